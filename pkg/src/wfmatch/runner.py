"""CSV ingestion, run reports, and in-process session helpers."""
from __future__ import annotations

import csv
import hashlib
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .protocol import DpPlan, WfmOutput, run_party_a, run_party_b
from .table import IdTable, TableError
from .transport import Channel, channel_pair

REPORT_VERSION = 1


class IngestError(TableError):
    pass


def ingest_csv(path: str | Path, id_columns: Sequence[str],
               payload_columns: Sequence[str] = ()) -> IdTable:
    """Read a headered CSV. Empty cells are missing ids; payloads must be filled."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in list(id_columns) + list(payload_columns):
            if col not in header:
                raise IngestError(f"column {col!r} not in header of {path}")
        ids: list[list[Optional[str]]] = [[] for _ in id_columns]
        payloads: dict[str, list[int]] = {c: [] for c in payload_columns}
        for i, row in enumerate(reader):
            for b, col in enumerate(id_columns):
                cell = row[col]
                ids[b].append(cell if cell not in (None, "") else None)
            for col in payload_columns:
                cell = (row[col] or "").strip()
                try:
                    payloads[col].append(int(cell))
                except ValueError:
                    raise IngestError(f"row {i}, payload {col!r}: {cell!r} is not an integer") from None
    if not ids[0]:
        raise IngestError(f"{path} has no data rows")
    table = IdTable(list(id_columns), ids, payloads)
    try:
        return table.validate()
    except TableError as exc:
        raise IngestError(str(exc)) from None


def emit_csv(table: IdTable, path: str | Path) -> None:
    names = list(table.columns) + list(table.payloads)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(table.n):
            row = ["" if col[i] is None else col[i] for col in table.ids]
            row += [table.payloads[name][i] for name in table.payloads]
            writer.writerow(row)


def fingerprint(seed: bytes | int | None) -> Optional[str]:
    """Short public fingerprint of a seed, so operators can compare without revealing it."""
    if seed is None:
        return None
    if isinstance(seed, int):
        seed = str(seed).encode()
    return hashlib.sha256(b"wfm-seed|" + seed).hexdigest()[:16]


@dataclass
class RunReport:
    role: str
    plan: DpPlan
    output: WfmOutput
    channel: Channel
    dummy_seed: Optional[bytes] = None
    rng_seed: Optional[int] = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        plan, out, ch = self.plan, self.output, self.channel
        stages = sorted(set(ch.bytes_sent) | set(ch.bytes_received) | set(ch.stage_time), key=_stage_key)
        shares = None
        if out.shares is not None or out.own_shares is not None:
            shares = {
                "masks": out.shares, "masks_modulus": out.share_modulus,
                "received": out.own_shares, "received_modulus": out.own_share_modulus,
            }
        return {
            "report_version": REPORT_VERSION,
            "role": self.role,
            "variant": plan.variant.value,
            "m": plan.m,
            "tau": plan.tau,
            "tau_override": plan.tau_override,
            "epsilon": plan.eps,
            "delta": plan.delta,
            "executions": plan.k,
            "tag_width": plan.tag_width.value,
            "skip_last_update": plan.skip_last_update,
            "rows_padded": out.padded.n if out.padded else None,
            "rows_real": out.padded.n_real if out.padded else None,
            "sizes": out.sizes,
            "sums": out.sums,
            "shares": shares,
            "batch_sizes": out.batch_sizes,
            "bytes_sent": {s: ch.bytes_sent.get(s, 0) for s in stages},
            "bytes_received": {s: ch.bytes_received.get(s, 0) for s in stages},
            "time_s": {s: round(ch.stage_time.get(s, 0.0), 6) for s in stages},
            "wall_time_s": round(self.wall_time, 6),
            "seed_fingerprints": {
                "dummy": fingerprint(self.dummy_seed),
                "rng": fingerprint(self.rng_seed),
            },
        }


TIMING_KEYS = ("time_s", "wall_time_s")


def comparable(report: dict) -> dict:
    """A report without its timing fields, for golden comparisons."""
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}


def _stage_key(stage: str):
    order = {"setup": 0, "prf-eval": 1, "aggregate": 10 ** 6}
    if stage.startswith("match-"):
        return (2, int(stage.split("-")[1]))
    return (order.get(stage, 5), 0)


def party_rng(seed: Optional[int]) -> random.Random:
    """Deterministic private randomness for tests, system randomness otherwise."""
    return random.Random(seed) if seed is not None else random.SystemRandom()


def run_role(role: str, table: IdTable, plan: DpPlan, channel: Channel,
             rng_seed: Optional[int] = None, dummy_seed: Optional[bytes] = None) -> RunReport:
    fn = run_party_a if role.upper() == "A" else run_party_b
    start = time.perf_counter()
    out = fn(table, plan, channel, party_rng(rng_seed))
    return RunReport(role.upper(), plan, out, channel, dummy_seed, rng_seed, time.perf_counter() - start)


def run_local(table_a: IdTable, table_b: IdTable, plan: DpPlan, rng_seeds=(None, None),
              dummy_seed: Optional[bytes] = None, keep_transcript: bool = False,
              timeout: float | None = 600) -> tuple[RunReport, RunReport]:
    """Both parties in one process on an in-memory channel pair."""
    ch_a, ch_b = channel_pair(timeout=timeout, keep_transcript=keep_transcript)
    results: dict[str, object] = {}

    def go(role, table, ch, seed):
        try:
            results[role] = run_role(role, table, plan, ch, seed, dummy_seed)
        except BaseException as exc:  # surfaced below
            results[role] = exc
            ch.close()

    threads = [threading.Thread(target=go, args=("A", table_a, ch_a, rng_seeds[0])),
               threading.Thread(target=go, args=("B", table_b, ch_b, rng_seeds[1]))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for role in ("A", "B"):
        if isinstance(results.get(role), BaseException):
            raise results[role]
    return results["A"], results["B"]
