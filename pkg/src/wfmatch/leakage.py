"""Membership inference against an intersection-size oracle.

The attacker owns a candidate set and may ask for ``|Q ∩ hidden|`` on
subsets ``Q`` of its choosing, one query per protocol execution. It walks a
partition tree depth first: a node whose (noise-corrected) answer is zero
is claimed all non-members, one whose answer equals its size is claimed all
members, anything in between is split in two.

Against an exact oracle every claim is correct. Against the padded oracle
the answers carry ``NoisePmf(tau)`` noise, and claims become guesses.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Optional, Sequence

from .accountant import find_min_tau


class OracleMode(str, Enum):
    EXACT = "exact"
    DP = "dp"


def sample_noise(tau: int, rng: random.Random) -> int:
    """One draw of the dual-sided padding noise: two random tau-subsets of 2 tau."""
    if tau == 0:
        return 0
    a = set(rng.sample(range(2 * tau), tau))
    return sum(1 for x in rng.sample(range(2 * tau), tau) if x in a)


@dataclass
class SizeOracle:
    hidden: frozenset
    tau: int = 0
    rng: random.Random = field(default_factory=random.Random)
    queries: int = 0

    @property
    def mode(self) -> OracleMode:
        return OracleMode.DP if self.tau > 0 else OracleMode.EXACT

    def query(self, subset) -> int:
        self.queries += 1
        return sum(1 for x in subset if x in self.hidden) + sample_noise(self.tau, self.rng)


@dataclass
class AttackResult:
    targets: list
    members: set
    non_members: set
    queries: int
    exhausted: bool
    # (queries used so far, claims made by that query) in query order
    timeline: list[tuple[int, list[tuple[Hashable, bool]]]] = field(default_factory=list)

    @property
    def claims(self) -> int:
        return len(self.members) + len(self.non_members)

    def correct(self, hidden) -> int:
        return (sum(1 for x in self.members if x in hidden)
                + sum(1 for x in self.non_members if x not in hidden))

    def wrong(self, hidden) -> int:
        return self.claims - self.correct(hidden)

    def precision(self, hidden) -> Optional[float]:
        """Share of member claims that are right, None without member claims."""
        if not self.members:
            return None
        return sum(1 for x in self.members if x in hidden) / len(self.members)

    def balanced_accuracy(self, hidden) -> float:
        """Per-class accuracy averaged over members and non-members.

        A correct claim scores 1, a wrong one 0, an unclaimed target 0.5,
        so an attacker whose claims ignore the truth sits at 0.5.
        """
        def score(x):
            if x in self.members:
                return 1.0 if x in hidden else 0.0
            if x in self.non_members:
                return 0.0 if x in hidden else 1.0
            return 0.5

        pos = [score(x) for x in self.targets if x in hidden]
        neg = [score(x) for x in self.targets if x not in hidden]
        parts = [sum(s) / len(s) for s in (pos, neg) if s]
        return sum(parts) / len(parts)


def _blocks(items: list, size: int) -> list[list]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def attack_bisection(oracle: SizeOracle, candidates: Sequence[Hashable], query_budget: int,
                     block_size: Optional[int] = None, margin: Optional[float] = None) -> AttackResult:
    """Depth-first bisection; ``block_size`` sets the first layer of the tree.

    The answer for a node is corrected by the noise mean ``tau/2``. With
    ``margin`` (default 0 exact, 1 noised) a node is claimed non-member when
    the corrected answer is at most ``-margin`` and member when it is at
    least ``len(node) + margin``.
    """
    targets = list(candidates)
    if not targets:
        raise ValueError("candidate set is empty")
    if margin is None:
        margin = 0.0 if oracle.tau == 0 else 1.0
    shift = oracle.tau / 2
    stack = _blocks(targets, block_size or len(targets))[::-1]
    members, non_members, timeline = set(), set(), []
    used = 0
    while stack and used < query_budget:
        node = stack.pop()
        est = oracle.query(node) - shift
        used += 1
        claimed = []
        if est <= -margin:
            non_members.update(node)
            claimed = [(x, False) for x in node]
        elif est >= len(node) + margin:
            members.update(node)
            claimed = [(x, True) for x in node]
        elif len(node) > 1:
            half = len(node) // 2
            stack.append(node[half:])
            stack.append(node[:half])
        timeline.append((used, claimed))
    return AttackResult(targets, members, non_members, used, bool(stack), timeline)


def _planted(n: int, members: int, rng: random.Random) -> tuple[list[int], frozenset]:
    candidates = list(range(n))
    return candidates, frozenset(rng.sample(candidates, members))


def leakage_curve(mode: OracleMode | str, executions: int, trials: int, n: int = 10_000,
                  member_rate: float = 0.01, eps: float = 2.0, delta: float = 1e-5,
                  seed: int = 0, tau: Optional[int] = None) -> dict:
    """Leakage after 1..executions queries, averaged over ``trials``.

    ``leakage[e]`` is the fraction of candidates whose membership is claimed
    correctly after ``e`` queries and ``wrong[e]`` the fraction claimed
    wrongly. ``baseline[e]`` is the same attacker run
    against an oracle over an unrelated hidden set of equal size, scored on
    the real one: what the attacker gets from luck alone.
    """
    mode = OracleMode(mode)
    if trials < 1:
        raise ValueError("need at least one trial")
    if mode is OracleMode.DP and tau is None:
        tau = find_min_tau(eps, delta, executions)
    tau = tau if mode is OracleMode.DP else 0
    n_members = max(1, round(n * member_rate))
    block = max(1, round(1 / member_rate))
    rng = random.Random(seed)
    leak = [0.0] * executions
    base = [0.0] * executions
    errors = [0.0] * executions
    for _ in range(trials):
        candidates, hidden = _planted(n, n_members, rng)
        _, decoy = _planted(n, n_members, rng)
        for acc, err, target_set in ((leak, errors, hidden), (base, None, decoy)):
            oracle = SizeOracle(target_set, tau, random.Random(rng.getrandbits(64)))
            res = attack_bisection(oracle, candidates, executions, block_size=block)
            right = [0] * (executions + 1)
            wrong = [0] * (executions + 1)
            for used, claimed in res.timeline:
                hits = sum(1 for x, is_member in claimed if (x in hidden) == is_member)
                right[used] += hits
                wrong[used] += len(claimed) - hits
            r = w = 0
            for e in range(executions):
                r += right[e + 1]
                w += wrong[e + 1]
                acc[e] += r / n
                if err is not None:
                    err[e] += w / n
    leakage = [x / trials for x in leak]
    baseline = [x / trials for x in base]
    wrong = [x / trials for x in errors]
    return {
        "mode": mode.value,
        "tau": tau,
        "eps": eps if mode is OracleMode.DP else None,
        "delta": delta if mode is OracleMode.DP else None,
        "n": n,
        "members": n_members,
        "trials": trials,
        "executions": list(range(1, executions + 1)),
        "leakage": leakage,
        "baseline": baseline,
        "wrong": wrong,
        "excess": [a - b for a, b in zip(leakage, baseline)],
    }


def binomial_ci(successes: float, total: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval."""
    if total == 0:
        return 0.0, 1.0
    p = successes / total
    denom = 1 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return centre - half, centre + half
