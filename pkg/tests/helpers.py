"""Independent reference implementations and fixtures shared by the tests."""
from __future__ import annotations

import hashlib
import random
from typing import Optional

from wfmatch.table import IdTable

# P-256 in plain affine arithmetic, independent of the OpenSSL backend
P = 2**256 - 2**224 + 2**192 + 2**96 - 1
A = -3
B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


def ec_lift_x(x: int) -> tuple[int, int]:
    rhs = (x * x * x + A * x + B) % P
    y = pow(rhs, (P + 1) // 4, P)
    assert y * y % P == rhs, "not a curve x-coordinate"
    return x, y


def ec_add(p1, p2):
    if p1 is None:
        return p2
    if p2 is None:
        return p1
    (x1, y1), (x2, y2) = p1, p2
    if x1 == x2 and (y1 + y2) % P == 0:
        return None
    if p1 == p2:
        lam = (3 * x1 * x1 + A) * pow(2 * y1, -1, P) % P
    else:
        lam = (y2 - y1) * pow(x2 - x1, -1, P) % P
    x3 = (lam * lam - x1 - x2) % P
    return x3, (lam * (x1 - x3) - y1) % P


def ec_mul(k: int, pt):
    acc, add = None, pt
    while k:
        if k & 1:
            acc = ec_add(acc, add)
        add = ec_add(add, add)
        k >>= 1
    return acc


def oracle_hash(data: bytes) -> int:
    """Try-and-increment onto a P-256 x-coordinate, written from scratch."""
    for ctr in range(1 << 16):
        x = int.from_bytes(hashlib.sha256(data + ctr.to_bytes(2, "big")).digest(), "big")
        if x >= P:
            continue
        rhs = (x * x * x + A * x + B) % P
        if rhs == 0 or pow(rhs, (P - 1) // 2, P) == 1:
            return x
    raise AssertionError("counter exhausted")


def oracle_prf(data: bytes, key: int) -> bytes:
    """Serialized H(x)^key, compressed with the canonical 0x02 prefix."""
    pt = ec_mul(key % N, ec_lift_x(oracle_hash(data)))
    return b"\x02" + pt[0].to_bytes(32, "big")


# -- random matching instances ---------------------------------------------

def random_instance(rng: random.Random, n_a: int, n_b: int, m: int, overlap: float = 0.3,
                    missing: float = 0.1, with_payload: bool = True,
                    payload_a: bool = False, payload_max: int = 2**32 - 1) -> tuple[IdTable, IdTable]:
    """Two tables with shared entities, partial matches, holes and reused strings.

    Shared entities carry the same value in a random subset of columns, so
    rows can match on several columns. Some values of one column are reused
    in another column of the peer to check columns never cross-match.
    """
    cols = [f"id{b}" for b in range(m)]
    uid = iter(range(10**9))

    def fresh(b: int) -> str:
        return f"c{b}-{next(uid)}"

    a_rows = [[fresh(b) for b in range(m)] for _ in range(n_a)]
    b_rows = [[fresh(b) for b in range(m)] for _ in range(n_b)]
    shared = int(min(n_a, n_b) * overlap)
    ia = rng.sample(range(n_a), shared)
    ib = rng.sample(range(n_b), shared)
    for i, j in zip(ia, ib):
        on = [b for b in range(m) if rng.random() < 0.6] or [rng.randrange(m)]
        for b in on:
            v = fresh(b)
            a_rows[i][b] = v
            b_rows[j][b] = v
    for rows in (a_rows, b_rows):
        for row in rows:
            for b in range(m):
                if rng.random() < missing:
                    row[b] = None
    if m > 1:
        # same string in different columns of the two parties: must not match
        for _ in range(min(n_a, n_b) // 10):
            i, j = rng.randrange(n_a), rng.randrange(n_b)
            b1, b2 = rng.sample(range(m), 2)
            v = a_rows[i][b1]
            if v is not None and v not in (r[b2] for r in b_rows):
                b_rows[j][b2] = v

    def payload(n):
        return {"T": [rng.randrange(payload_max + 1) for _ in range(n)]}

    ta = IdTable.from_rows(cols, a_rows, payload(n_a) if payload_a else None)
    tb = IdTable.from_rows(cols, b_rows, payload(n_b) if with_payload else None)
    return ta.validate(), tb.validate()


def toy_tables() -> tuple[IdTable, IdTable]:
    """The two-identifier toy example (email, phone) with one hole per column."""
    a = IdTable.from_rows(["email", "phone"],
                          [("d", "!"), ("a", "#"), ("f", "&"), ("g", "@")])
    b = IdTable.from_rows(["email", "phone"],
                          [("b", "^"), ("a", "#"), ("c", "&"), ("g", None), (None, "@")],
                          {"T": [10, 20, 30, 40, 50]})
    return a, b


def tv_distance(counts: dict[int, int], pmf: list[float]) -> float:
    total = sum(counts.values())
    support = set(counts) | set(range(len(pmf)))
    return 0.5 * sum(abs(counts.get(z, 0) / total - (pmf[z] if 0 <= z < len(pmf) else 0.0)) for z in support)


def share_values(out_a, out_b, name: str = "T") -> list[int]:
    """Reconstruct B's matched payload multiset from both share lists."""
    n = out_a.share_modulus
    return sorted((x + y) % n for x, y in zip(out_b.own_shares[name], out_a.shares[name]))


def matched_multiset(table: IdTable, rows: list[list[int]], name: str = "T",
                     n_real: Optional[int] = None) -> list[int]:
    vals = table.payloads[name]
    return sorted(vals[r] for col in rows for r in col if n_real is None or r < n_real)


# -- two-process CLI runs ---------------------------------------------------

def free_port() -> int:
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_cli_pair(args_a: list[str], args_b: list[str], workdir, timeout: float = 300):
    """Run party B (listening) and party A (connecting) as separate processes.

    Returns ``(report_a, report_b, seconds)``; raises if either exits non-zero.
    """
    import json
    import subprocess
    import sys
    import time
    from pathlib import Path

    workdir = Path(workdir)
    addr = f"127.0.0.1:{free_port()}"
    rep_a, rep_b = workdir / "report_a.json", workdir / "report_b.json"
    cmd = [sys.executable, "-m", "wfmatch"]
    start = time.perf_counter()
    pb = subprocess.Popen(cmd + ["--role", "b", "--listen", addr, "--report", str(rep_b)] + args_b,
                          stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    pa = subprocess.Popen(cmd + ["--role", "a", "--connect", addr, "--report", str(rep_a)] + args_a,
                          stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        out_a, err_a = pa.communicate(timeout=timeout)
        out_b, err_b = pb.communicate(timeout=timeout)
    finally:
        for p in (pa, pb):
            if p.poll() is None:
                p.kill()
    elapsed = time.perf_counter() - start
    if pa.returncode or pb.returncode:
        raise AssertionError(f"A exit {pa.returncode}: {err_a}\nB exit {pb.returncode}: {err_b}")
    return json.loads(rep_a.read_text()), json.loads(rep_b.read_text()), elapsed
