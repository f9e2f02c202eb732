"""Dual-sided dummy padding and its exact privacy profile.

Both parties append ``tau`` random entries of a shared dummy set of size
``2 tau`` to their column. The intersection then grows by a hypergeometric
count ``z`` with ``P(z) = C(tau, z)^2 / C(2 tau, tau)``, which is what makes
the revealed size differentially private.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import mpmath

from .table import RESERVED_PREFIX, IdTable, TableError

REAL, NOISE, FILLER = "real", "noise", "filler"


class DpError(ValueError):
    pass


# -- dummy universes ------------------------------------------------------

def _dummy_id(seed: bytes, kind: str, column: int, index: int) -> str:
    digest = hashlib.sha256(b"wfm-dummy|" + seed + f"|{kind}|{column}|{index}".encode()).hexdigest()[:32]
    return f"{RESERVED_PREFIX}{kind}:{column}:{digest}"


@dataclass(frozen=True)
class DummyUniverse:
    """Public dummy sets for ``m`` columns, derived from a shared seed.

    ``noise[l]`` has ``2 tau`` ids, ``filler[l]`` has ``2 tau m``. Party A
    draws fillers from the first half of ``filler[l]``, party B from the
    second, so fillers can never match across parties.
    """

    tau: int
    m: int
    seed: bytes
    noise: tuple[tuple[str, ...], ...]
    filler: tuple[tuple[str, ...], ...]

    @classmethod
    def generate(cls, tau: int, m: int, seed: bytes) -> "DummyUniverse":
        if tau < 0 or m < 1:
            raise DpError("need tau >= 0 and m >= 1")
        noise = tuple(tuple(_dummy_id(seed, "dmy", l, i) for i in range(2 * tau)) for l in range(m))
        filler = tuple(tuple(_dummy_id(seed, "fil", l, i) for i in range(2 * tau * m)) for l in range(m))
        return cls(tau, m, seed, noise, filler)

    def filler_half(self, column: int, party: str) -> tuple[str, ...]:
        half = self.tau * self.m
        pool = self.filler[column]
        if party == "A":
            return pool[:half]
        if party == "B":
            return pool[half:]
        raise DpError(f"unknown party {party!r}")

    def all_ids(self) -> set[str]:
        return {x for group in self.noise + self.filler for x in group}


@dataclass
class PaddedTable:
    table: IdTable
    provenance: list[list[str]]
    n_real: int

    @property
    def n(self) -> int:
        return self.table.n


def pad_single(column: Sequence[Optional[str]], dummies: Sequence[str], tau: int,
               rng: random.Random) -> list[Optional[str]]:
    """Append a uniformly random ``tau``-subset of ``dummies`` to ``column``."""
    if len(dummies) < tau:
        raise DpError(f"dummy set of {len(dummies)} cannot supply {tau} entries")
    if tau == 0:
        return list(column)
    real = {x for x in column if x is not None}
    if real.intersection(dummies):
        raise DpError("dummy set overlaps real identifiers")
    return list(column) + rng.sample(list(dummies), tau)


def pad_multi(table: IdTable, universe: DummyUniverse, party: str, rng: random.Random) -> PaddedTable:
    """Multi-column padding with disjoint per-column noise.

    Dummy rows come in ``m`` blocks of ``tau``. In block ``l`` column ``l``
    holds a secret ``tau``-subset of ``noise[l]`` and every other column holds
    fillers from this party's half of ``filler[l]``. Dummy payloads are 0.
    """
    tau, m = universe.tau, universe.m
    if table.m != m:
        raise DpError(f"universe built for {m} columns, table has {table.m}")
    universe_ids = universe.all_ids()
    for b, col in enumerate(table.ids):
        if any(x is not None and x in universe_ids for x in col):
            raise DpError(f"column {table.columns[b]!r} overlaps the dummy universe")

    blocks_noise = [rng.sample(list(universe.noise[l]), tau) for l in range(m)]
    blocks_fill = [rng.sample(list(universe.filler_half(l, party)), tau * (m - 1)) for l in range(m)]

    ids = [list(col) for col in table.ids]
    prov = [[REAL] * table.n for _ in range(m)]
    for l in range(m):
        fill = iter(blocks_fill[l])
        for k in range(m):
            if k == l:
                ids[k].extend(blocks_noise[l])
                prov[k].extend([NOISE] * tau)
            else:
                ids[k].extend(next(fill) for _ in range(tau))
                prov[k].extend([FILLER] * tau)
    payloads = {name: list(v) + [0] * (m * tau) for name, v in table.payloads.items()}
    padded = IdTable(list(table.columns), ids, payloads)
    return PaddedTable(padded, prov, table.n)


# -- noise distribution and closed-form delta ------------------------------

def noise_pmf(tau: int, exact: bool = False) -> list:
    """Masses of the dummy-collision count ``z`` for ``z = 0..tau``."""
    if tau < 0:
        raise DpError("tau must be non-negative")
    total = math.comb(2 * tau, tau)
    masses = [Fraction(math.comb(tau, z) ** 2, total) for z in range(tau + 1)]
    return masses if exact else [float(p) for p in masses]


def _precision_for(tau: int) -> int:
    return len(str(math.comb(2 * tau, tau))) + 30


def exact_delta(tau: int, eps: float) -> float:
    """Tight single-execution delta(eps) of the padding mechanism."""
    if tau < 1:
        raise DpError("tau must be >= 1")
    if eps < 0:
        raise DpError("eps must be >= 0")
    if math.isinf(eps):
        return 1.0 / math.comb(2 * tau, tau)
    with mpmath.workdps(_precision_for(tau)):
        half = mpmath.exp(mpmath.mpf(eps) / 2)
        e_eps = half * half
        lo = max(0, int(mpmath.ceil((tau * half - 1) / (half + 1))))
        acc = mpmath.mpf(1)
        for z in range(lo, tau):
            acc += math.comb(tau, z) ** 2 - e_eps * math.comb(tau, z + 1) ** 2
        return float(acc / math.comb(2 * tau, tau))


def min_tau_single(eps: float, delta: float) -> int:
    """Smallest ``tau`` with ``exact_delta(tau, eps) <= delta``."""
    if not 0 < delta < 1 or eps < 0:
        raise DpError("need eps >= 0 and 0 < delta < 1")
    hi = 1
    while exact_delta(hi, eps) > delta:
        hi *= 2
    lo = hi // 2  # exact_delta(lo) > delta, or lo == 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if exact_delta(mid, eps) <= delta:
            hi = mid
        else:
            lo = mid
    return hi
