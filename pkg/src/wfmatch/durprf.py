"""Distributed, blindly updatable, reversed PRF from hashed Diffie-Hellman.

``F_k(x) = H(x)^k`` with the joint key ``k = k_A * k_B mod q``; neither party
ever holds ``k``. Evaluation is reversed: the *receiver* learns PRF values of
the *sender's* inputs. Update moves a receiver-held tag set to a fresh joint
key without the assisting party learning which tags were moved.
"""
from __future__ import annotations

import random
import secrets
from dataclasses import dataclass, field

from .group import Group, TagWidth, default_group
from .transport import Channel, MessageType, ProtocolError, pack_fixed, unpack_fixed


class DurPrfError(RuntimeError):
    pass


@dataclass
class PrfSession:
    sid: str
    local_key: int = field(repr=False)
    group: Group = field(repr=False)


@dataclass
class TagSet:
    """PRF values index-aligned with the rows they were computed from."""

    sid: str
    elements: list

    def __len__(self) -> int:
        return len(self.elements)

    def subset(self, indices) -> "TagSet":
        return TagSet(self.sid, [self.elements[i] for i in indices])

    def tags(self, group: Group, width: TagWidth | str = TagWidth.FULL) -> list[bytes]:
        return [group.to_tag(e, width) for e in self.elements]


class PrfParty:
    """One party's side of the durPRF: its session table."""

    def __init__(self, group: Group | None = None, rng: random.Random | None = None):
        self.group = group or default_group()
        self.rng = rng or secrets.SystemRandom()
        self.sessions: dict[str, PrfSession] = {}

    def init(self, sid: str, key: int | None = None) -> PrfSession:
        if sid in self.sessions:
            raise DurPrfError(f"session {sid!r} already initialised")
        if key is None:
            key = self.group.random_scalar(self.rng)
        session = PrfSession(sid, key, self.group)
        self.sessions[sid] = session
        return session

    def __getitem__(self, sid: str) -> PrfSession:
        return self.sessions[sid]


def _read_elements(group: Group, payload: bytes) -> list:
    return [group.deserialize(raw) for raw in unpack_fixed(payload, group.element_size)]


def _write_elements(group: Group, elements) -> bytes:
    return pack_fixed([group.serialize(e) for e in elements], group.element_size)


def eval_send(session: PrfSession, ids: list[bytes], channel: Channel) -> None:
    group = session.group
    hashed = [group.hash_to_group(x) for x in ids]
    blinded = group.exp_many(hashed, session.local_key)
    channel.send(MessageType.EVAL_BATCH, session.sid, _write_elements(group, blinded))


def eval_recv(session: PrfSession, channel: Channel, expected_count: int | None = None) -> TagSet:
    group = session.group
    frame = channel.recv(MessageType.EVAL_BATCH, session.sid)
    received = _read_elements(group, frame.payload)
    if expected_count is not None and len(received) != expected_count:
        raise ProtocolError(f"expected {expected_count} elements, got {len(received)}")
    return TagSet(session.sid, group.exp_many(received, session.local_key))


def _update_sid(old: PrfSession, new: PrfSession) -> str:
    return f"{old.sid}>{new.sid}"


def _lift_factor(old: PrfSession, new: PrfSession) -> int:
    group = old.group
    return new.local_key * group.scalar_inverse(old.local_key) % group.order


class PendingUpdate:
    """Updater state between sending the shuffled batch and receiving the reply.

    Lets both parties run an update and an assist concurrently on one channel:
    ``begin_update`` -> ``assist`` -> ``finish``.
    """

    def __init__(self, old: PrfSession, new: PrfSession, perm: list[int], channel: Channel):
        self._old, self._new = old, new
        self._perm = perm
        self._channel = channel

    def finish(self) -> TagSet:
        group = self._new.group
        frame = self._channel.recv(MessageType.UPDATE_REPLY, _update_sid(self._old, self._new))
        reply = _read_elements(group, frame.payload)
        if len(reply) != len(self._perm):
            raise ProtocolError(f"update reply has {len(reply)} elements, sent {len(self._perm)}")
        out = [None] * len(reply)
        for pos, src in enumerate(self._perm):
            out[src] = reply[pos]
        self._perm = []
        return TagSet(self._new.sid, out)


def begin_update(old: PrfSession, new: PrfSession, tags: TagSet, channel: Channel,
                 rng: random.Random | None = None) -> PendingUpdate:
    if tags.sid != old.sid:
        raise DurPrfError(f"tags were produced under {tags.sid!r}, not {old.sid!r}")
    rng = rng or secrets.SystemRandom()
    group = old.group
    lifted = group.exp_many(tags.elements, _lift_factor(old, new)) if tags.elements else []
    perm = list(range(len(lifted)))
    rng.shuffle(perm)
    channel.send(MessageType.UPDATE_BATCH, _update_sid(old, new),
                 _write_elements(group, [lifted[i] for i in perm]))
    return PendingUpdate(old, new, perm, channel)


def update(old: PrfSession, new: PrfSession, tags: TagSet, channel: Channel,
           rng: random.Random | None = None) -> TagSet:
    """Move ``tags`` from the ``old`` joint key to the ``new`` one.

    The output is index-aligned with ``tags``; the peer only ever sees the
    batch in a fresh random order.
    """
    return begin_update(old, new, tags, channel, rng).finish()


def assist(old: PrfSession, new: PrfSession, channel: Channel) -> int:
    """Serve one update request from the peer. Returns the batch size."""
    group = old.group
    sid = _update_sid(old, new)
    frame = channel.recv(MessageType.UPDATE_BATCH, sid)
    batch = _read_elements(group, frame.payload)
    lifted = group.exp_many(batch, _lift_factor(old, new)) if batch else []
    channel.send(MessageType.UPDATE_REPLY, sid, _write_elements(group, lifted))
    return len(batch)
