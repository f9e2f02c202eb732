"""Identifier tables: the private input of one party."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .ahe import PAYLOAD_MAX

RESERVED_PREFIX = "⟂"  # "⟂": no real identifier may start with it


class TableError(ValueError):
    pass


@dataclass
class IdTable:
    """``m`` identifier columns over ``n`` rows, plus optional payload columns.

    ``ids[b][i]`` is the ``b``-th identifier of row ``i`` or ``None`` when the
    cell is missing. Row indices are 0-based ingestion order.
    """

    columns: list[str]
    ids: list[list[Optional[str]]]
    payloads: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.columns:
            raise TableError("a table needs at least one identifier column")
        if len(self.ids) != len(self.columns):
            raise TableError("one id list per column required")
        lengths = {len(col) for col in self.ids} | {len(v) for v in self.payloads.values()}
        if len(lengths) > 1:
            raise TableError("columns have different lengths")

    @property
    def m(self) -> int:
        return len(self.columns)

    @property
    def n(self) -> int:
        return len(self.ids[0])

    def validate(self, allow_reserved: bool = False) -> "IdTable":
        for b, (name, col) in enumerate(zip(self.columns, self.ids)):
            seen: dict[str, int] = {}
            for i, x in enumerate(col):
                if x is None:
                    continue
                if not allow_reserved and x.startswith(RESERVED_PREFIX):
                    raise TableError(f"row {i}, column {name!r}: identifier uses the reserved prefix")
                if x in seen:
                    raise TableError(f"row {i}, column {name!r}: duplicate identifier (first seen in row {seen[x]})")
                seen[x] = i
        for name, values in self.payloads.items():
            for i, v in enumerate(values):
                if not 0 <= v <= PAYLOAD_MAX:
                    raise TableError(f"row {i}, payload {name!r}: {v} outside [0, 2^32 - 1]")
        return self

    def hash_inputs(self, column: int, party: str) -> list[bytes]:
        """Byte strings fed to the PRF; missing cells become inert row tokens."""
        out = []
        for i, x in enumerate(self.ids[column]):
            if x is None:
                x = f"{RESERVED_PREFIX}na:{party}:{i}"
            out.append(x.encode())
        return out

    @classmethod
    def from_rows(cls, columns: Sequence[str], rows: Sequence[Sequence[Optional[str]]],
                  payloads: dict[str, Sequence[int]] | None = None) -> "IdTable":
        ids = [[row[b] for row in rows] for b in range(len(columns))]
        return cls(list(columns), ids, {k: list(v) for k, v in (payloads or {}).items()})
