"""Private waterfall matching between two parties.

Party B holds payloads and the AHE key (both parties do in the ``both``
variant). Stages, each a label in the run report:

1. ``setup``      parameter check, public key, encrypted payloads
2. ``prf-eval``   reversed PRF on every identifier column, both directions
3. ``match-1``    exchange shuffled first-column tags, match
4. ``match-b``    for b >= 2: keep unmatched rows, blind key update, match
5. ``aggregate``  sum / shares of the matched payloads, then size confirmation

Matched positions are always recorded as *peer wire positions*: indices into
the peer's (secretly permuted) row order. ``WfmOutput.wire_order`` maps a
party's own wire positions back to its padded-table rows, which is how tests
line results up against the plaintext oracle.

On the last column only B sends its shuffled tags (A needs them to find the
rows to aggregate); B learns the last size from the confirmation. In the
``both`` variant A sends too, since B aggregates A's payloads.
"""
from __future__ import annotations

import json
import logging
import random
import secrets
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from . import ahe
from .accountant import DEFAULT_NX, find_min_tau
from .dp_mech import REAL, DummyUniverse, PaddedTable, pad_multi
from .durprf import PrfParty, TagSet, assist, begin_update, eval_recv, eval_send
from .group import Group, TagWidth, default_group
from .table import IdTable
from .transport import (Channel, MessageType, ProtocolError, TransportError, pack_varlen,
                        unpack_fixed, pack_fixed, unpack_varlen)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class Variant(str, Enum):
    SUM = "sum"
    SHARE = "share"
    BOTH = "both"


class SessionAbort(RuntimeError):
    def __init__(self, stage: str, reason: str):
        super().__init__(f"session aborted in stage {stage!r}: {reason}")
        self.stage = stage
        self.reason = reason


class PlanError(ValueError):
    pass


@dataclass
class DpPlan:
    """Everything both parties must agree on before running.

    ``tau = 0`` disables the DP padding (exact sizes, test mode).
    """

    eps: Optional[float] = None
    delta: Optional[float] = None
    k: int = 1
    m: int = 1
    tau: int = 0
    universe: Optional[DummyUniverse] = None
    variant: Variant = Variant.SUM
    tag_width: TagWidth = TagWidth.FULL
    tau_override: bool = False
    skip_last_update: bool = False
    ahe_bits: int = ahe.TEST_BITS

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.tag_width = TagWidth.parse(self.tag_width)
        if self.tau > 0 and self.universe is None:
            raise PlanError("a plan with tau > 0 needs a dummy universe")

    def negotiated(self) -> dict:
        """Fields checked for equality in the setup message."""
        return {
            "version": PROTOCOL_VERSION,
            "variant": self.variant.value,
            "m": self.m,
            "tau": self.tau,
            "tag_width": self.tag_width.value,
            "skip_last_update": self.skip_last_update,
            "universe": self.universe.seed.hex() if self.universe else None,
        }


def make_plan(m: int, eps: float | None = None, delta: float | None = None, k: int = 1,
              seed: bytes = b"", tau: int | None = None, n_x: int = DEFAULT_NX, **kw) -> DpPlan:
    """Build a plan; ``tau`` is derived from ``(eps, delta, k)`` unless given."""
    override = tau is not None
    if tau is None:
        if eps is None or delta is None:
            raise PlanError("either tau or (eps, delta) is required")
        if eps < 0 or not 0 < delta < 1:
            raise PlanError(f"infeasible privacy budget eps={eps}, delta={delta}")
        tau = find_min_tau(eps, delta, k, n_x)
    universe = DummyUniverse.generate(tau, m, seed) if tau > 0 else None
    return DpPlan(eps=eps, delta=delta, k=k, m=m, tau=tau, universe=universe,
                  tau_override=override, **kw)


def dp_enhance(table: IdTable, eps: float, delta: float, k: int, party: str,
               rng: random.Random, seed: bytes, **kw) -> tuple[PaddedTable, DpPlan]:
    """Size the dummies for the budget and pad ``table`` accordingly."""
    plan = make_plan(table.m, eps, delta, k, seed, **kw)
    return pad_multi(table, plan.universe, party, rng), plan


def unpadded(table: IdTable) -> PaddedTable:
    return PaddedTable(table, [[REAL] * table.n for _ in range(table.m)], table.n)


# -- plaintext reference ----------------------------------------------------

@dataclass
class OracleResult:
    sizes: list[int]
    matched_a: list[list[int]]
    matched_b: list[list[int]]
    sums_b: dict[str, int]
    sums_a: dict[str, int]
    pairs: list[list[tuple[int, int]]]


def oracle_wfm(table_a: IdTable, table_b: IdTable) -> OracleResult:
    """Waterfall matching in the clear, indices are table rows."""
    if table_a.m != table_b.m:
        raise ValueError("tables need the same number of identifier columns")
    alive_a = set(range(table_a.n))
    alive_b = set(range(table_b.n))
    sizes, ja, jb, pairs = [], [], [], []
    for b in range(table_a.m):
        index_b = {table_b.ids[b][j]: j for j in alive_b if table_b.ids[b][j] is not None}
        col_pairs = sorted((i, index_b[x]) for i in alive_a
                           if (x := table_a.ids[b][i]) is not None and x in index_b)
        matched_a = sorted(i for i, _ in col_pairs)
        matched_b = sorted(j for _, j in col_pairs)
        alive_a -= set(matched_a)
        alive_b -= set(matched_b)
        sizes.append(len(col_pairs))
        ja.append(matched_a)
        jb.append(matched_b)
        pairs.append(col_pairs)
    all_b = [j for col in jb for j in col]
    all_a = [i for col in ja for i in col]
    sums_b = {name: sum(vals[j] for j in all_b) for name, vals in table_b.payloads.items()}
    sums_a = {name: sum(vals[i] for i in all_a) for name, vals in table_a.payloads.items()}
    return OracleResult(sizes, ja, jb, sums_b, sums_a, pairs)


# -- protocol state -----------------------------------------------------------

@dataclass
class MatchState:
    """Book-keeping over the *peer's* rows, in peer wire positions."""

    n_peer: int
    matched: list[list[int]] = field(default_factory=list)
    surviving: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.surviving = list(range(self.n_peer))

    def record(self, positions: list[int]) -> None:
        hit = set(positions)
        taken = set(j for col in self.matched for j in col)
        if hit & taken:
            raise ProtocolError("a peer row matched twice")
        self.matched.append(sorted(hit))
        self.surviving = [j for j in self.surviving if j not in hit]

    @property
    def all_matched(self) -> list[int]:
        return sorted(j for col in self.matched for j in col)


@dataclass
class WfmOutput:
    role: str
    sizes: list[int]
    sums: Optional[dict[str, int]] = None
    shares: Optional[dict[str, list[int]]] = None
    share_modulus: Optional[int] = None
    own_shares: Optional[dict[str, list[int]]] = None
    own_share_modulus: Optional[int] = None
    matched: list[list[int]] = field(default_factory=list)
    wire_order: list[int] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)
    padded: Optional[PaddedTable] = None
    plan: Optional[DpPlan] = None
    prf: Optional[PrfParty] = field(default=None, repr=False)
    tags_sent: dict[str, list[bytes]] = field(default_factory=dict, repr=False)
    stage2_peer_tags: list[list[bytes]] = field(default_factory=list, repr=False)

    def matched_rows(self, peer_wire_order: list[int]) -> list[list[int]]:
        """Translate matched peer wire positions to the peer's padded rows."""
        return [sorted(peer_wire_order[j] for j in col) for col in self.matched]


def _pack_sizes(sizes: list[Optional[int]]) -> bytes:
    return struct.pack(">I", len(sizes)) + b"".join(struct.pack(">q", -1 if s is None else s) for s in sizes)


def _unpack_sizes(payload: bytes) -> list[Optional[int]]:
    (count,) = struct.unpack_from(">I", payload)
    if len(payload) != 4 + 8 * count:
        raise ProtocolError("malformed size confirmation")
    vals = struct.unpack_from(f">{count}q", payload, 4)
    return [None if v < 0 else v for v in vals]


def _sid(b: int) -> str:
    return f"col:{b + 1}"


def _upd_sid(b: int) -> str:
    return f"col:{b + 1}:upd"


class _PartyRun:
    def __init__(self, role: str, data: Union[IdTable, PaddedTable], plan: DpPlan,
                 channel: Channel, rng: random.Random | None, group: Group | None):
        self.role = role
        self.peer = "B" if role == "A" else "A"
        self.plan = plan
        self.ch = channel
        self.rng = rng or secrets.SystemRandom()
        self.group = group or default_group()
        if isinstance(data, IdTable):
            data.validate()
            if data.m != plan.m:
                raise PlanError(f"plan is for {plan.m} columns, table has {data.m}")
            data = pad_multi(data, plan.universe, role, self.rng) if plan.tau > 0 else unpadded(data)
        self.padded = data
        self.table = data.table
        self.width = plan.tag_width
        self.holds_key = plan.variant is Variant.BOTH or role == "B"
        self.expects_cts = plan.variant is Variant.BOTH or role == "A"

    # stage helpers ---------------------------------------------------------

    def _stage(self, name: str) -> None:
        self.stage = name
        self.ch.set_stage(name)

    def run(self) -> WfmOutput:
        self.stage = "setup"
        try:
            out = self._run()
        except (ProtocolError, TransportError, ahe.AheError, ValueError) as exc:
            self.ch.abort(f"{self.role}: {self.stage}: {exc}")
            raise SessionAbort(self.stage, str(exc)) from exc
        finally:
            self.ch.finish_timing()
        return out

    def _run(self) -> WfmOutput:
        plan, table, m = self.plan, self.table, self.plan.m
        self.wire_order = list(range(table.n))
        self.rng.shuffle(self.wire_order)

        self.prf = PrfParty(self.group, self.rng)
        sessions = [self.prf.init(_sid(b)) for b in range(m)]
        upd_sessions = [self.prf.init(_upd_sid(b)) if b > 0 else None for b in range(m)]

        self._stage("setup")
        self._setup()

        self._stage("prf-eval")
        for b in range(m):
            col = table.hash_inputs(b, self.role)
            eval_send(sessions[b], [col[r] for r in self.wire_order], self.ch)
        peer_tags = [eval_recv(sessions[b], self.ch, self.peer_n) for b in range(m)]

        state = MatchState(self.peer_n)
        out = WfmOutput(self.role, [], wire_order=self.wire_order, padded=self.padded, plan=plan, prf=self.prf)
        out.stage2_peer_tags = [ts.tags(self.group, self.width) for ts in peer_tags]

        peer_sizes: list[Optional[int]] = []
        for b in range(m):
            self._stage(f"match-{b + 1}")
            held = peer_tags[b].subset(state.surviving)
            out.batch_sizes.append(len(held))
            last = b == m - 1
            if b > 0 and not (last and plan.skip_last_update):
                pending = begin_update(sessions[b], upd_sessions[b], held, self.ch, self.rng)
                assist(sessions[b], upd_sessions[b], self.ch)
                held = pending.finish()
            held_tags = held.tags(self.group, self.width)

            # B needs A's survivors only to restrict the next column, or to
            # aggregate A's payloads in the both variant
            one_way = last and plan.variant is not Variant.BOTH
            skip_send = one_way and self.role == "A"
            skip_recv = one_way and self.role == "B"
            if not skip_send:
                shuffled = list(held_tags)
                self.rng.shuffle(shuffled)
                out.tags_sent[held.sid] = shuffled
                self.ch.send(MessageType.TAGS_SHUFFLED, _sid(b), pack_fixed(shuffled, self.group.tag_size(self.width)))
            if skip_recv:
                peer_sizes.append(None)
                state.matched.append([])
                continue
            frame = self.ch.recv(MessageType.TAGS_SHUFFLED, _sid(b))
            received = set(unpack_fixed(frame.payload, self.group.tag_size(self.width)))
            hits = [state.surviving[j] for j, t in enumerate(held_tags) if t in received]
            state.record(hits)
            peer_sizes.append(len(hits))

        self._stage("aggregate")
        self._aggregate(state, out)

        self.ch.send(MessageType.SIZE_CONFIRM, "", _pack_sizes(peer_sizes))
        theirs = _unpack_sizes(self.ch.recv(MessageType.SIZE_CONFIRM, "").payload)
        if len(theirs) != m:
            raise ProtocolError("size confirmation has wrong column count")
        sizes = []
        for b, (mine, other) in enumerate(zip(peer_sizes, theirs)):
            if mine is not None and other is not None and mine != other:
                raise ProtocolError(f"column {b + 1} size mismatch: {mine} vs {other}")
            val = mine if mine is not None else other
            if val is None:
                raise ProtocolError(f"column {b + 1} size unknown to both parties")
            sizes.append(val)
        out.sizes = sizes
        out.matched = state.matched
        return out

    def _setup(self) -> None:
        plan = self.plan
        header = dict(plan.negotiated(), rows=self.table.n, payloads=sorted(self.table.payloads))
        self.keypair = ahe.gen(plan.ahe_bits, self.rng) if self.holds_key else None
        pk_bytes = self.keypair.public.to_bytes() if self.keypair else b""
        self.ch.send(MessageType.SETUP_PK, "setup", pack_varlen([json.dumps(header, sort_keys=True).encode(), pk_bytes]))

        if self.keypair:
            pk, sk = self.keypair.public, self.keypair.secret
            for name in sorted(self.table.payloads):
                vals = self.table.payloads[name]
                cts = [ahe.enc_payload(pk, vals[r], self.rng, sk) for r in self.wire_order]
                self.ch.send(MessageType.PAYLOAD_CTS, f"payload:{name}", pack_varlen([c.body() for c in cts]))

        frame = self.ch.recv(MessageType.SETUP_PK, "setup")
        raw_header, raw_pk = unpack_varlen(frame.payload)
        peer = json.loads(raw_header)
        mine = plan.negotiated()
        for key, val in mine.items():
            if peer.get(key) != val:
                raise ProtocolError(f"parameter mismatch on {key!r}: ours {val!r}, peer {peer.get(key)!r}")
        self.peer_n = int(peer["rows"])
        self.peer_payload_names = list(peer["payloads"])
        self.peer_pk = ahe.PublicKey.from_bytes(raw_pk) if raw_pk else None
        self.peer_cts: dict[str, list[ahe.Ciphertext]] = {}
        if self.expects_cts:
            if self.peer_pk is None:
                raise ProtocolError("peer sent no public key")
            for name in self.peer_payload_names:
                fr = self.ch.recv(MessageType.PAYLOAD_CTS, f"payload:{name}")
                cts = [ahe.Ciphertext.from_body(self.peer_pk, body) for body in unpack_varlen(fr.payload)]
                if len(cts) != self.peer_n:
                    raise ProtocolError(f"{len(cts)} payload ciphertexts for {self.peer_n} rows")
                self.peer_cts[name] = cts

    def _aggregate(self, state: MatchState, out: WfmOutput) -> None:
        variant = self.plan.variant
        matched = state.all_matched
        if variant is Variant.SUM:
            if self.role == "A":
                pk = self.peer_pk
                for name in self.peer_payload_names:
                    cts = [self.peer_cts[name][j] for j in matched]
                    ct = ahe.sum(cts) if cts else ahe.enc(pk, 0, self.rng)
                    self.ch.send(MessageType.SUM_CT, f"payload:{name}", ahe.refresh(pk, ct, self.rng).body())
            else:
                out.sums = {}
                for name in sorted(self.table.payloads):
                    fr = self.ch.recv(MessageType.SUM_CT, f"payload:{name}")
                    ct = ahe.Ciphertext.from_body(self.keypair.public, fr.payload)
                    out.sums[name] = ahe.dec(self.keypair.secret, ct)
            return

        sharer = variant is Variant.BOTH or self.role == "A"
        receiver = variant is Variant.BOTH or self.role == "B"
        if sharer:
            pk = self.peer_pk
            order = list(matched)
            self.rng.shuffle(order)
            out.shares = {}
            out.share_modulus = pk.n
            for name in self.peer_payload_names:
                bodies, masks = [], []
                for j in order:
                    masked, r = ahe.mask_share(pk, self.peer_cts[name][j], self.rng)
                    bodies.append(masked.body())
                    masks.append((-r) % pk.n)
                self.ch.send(MessageType.SHARE_CTS, f"payload:{name}", pack_varlen(bodies))
                out.shares[name] = masks
        if receiver:
            pk, sk = self.keypair.public, self.keypair.secret
            out.own_shares = {}
            out.own_share_modulus = pk.n
            for name in sorted(self.table.payloads):
                fr = self.ch.recv(MessageType.SHARE_CTS, f"payload:{name}")
                out.own_shares[name] = [ahe.dec(sk, ahe.Ciphertext.from_body(pk, body))
                                        for body in unpack_varlen(fr.payload)]


def run_party_a(table: Union[IdTable, PaddedTable], plan: DpPlan, channel: Channel,
                rng: random.Random | None = None, group: Group | None = None) -> WfmOutput:
    return _PartyRun("A", table, plan, channel, rng, group).run()


def run_party_b(table: Union[IdTable, PaddedTable], plan: DpPlan, channel: Channel,
                rng: random.Random | None = None, group: Group | None = None) -> WfmOutput:
    return _PartyRun("B", table, plan, channel, rng, group).run()
