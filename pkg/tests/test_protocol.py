import random
import threading

import pytest

from helpers import matched_multiset, random_instance, share_values, toy_tables
from wfmatch.accountant import find_min_tau
from wfmatch.dp_mech import NOISE, min_tau_single
from wfmatch.protocol import (DpPlan, PlanError, SessionAbort, Variant, dp_enhance, make_plan, oracle_wfm,
                              run_party_a, run_party_b)
from wfmatch.runner import run_local
from wfmatch.table import IdTable
from wfmatch.transport import MessageType, channel_pair


def run(ta, tb, plan, seeds=(1, 2), **kw):
    ra, rb = run_local(ta, tb, plan, seeds, **kw)
    return ra.output, rb.output


# -- plaintext reference ------------------------------------------------------

def test_oracle_toy_golden():
    a, b = toy_tables()
    o = oracle_wfm(a, b)
    assert o.sizes == [2, 1]
    assert o.matched_a == [[1, 3], [2]]
    assert o.matched_b == [[1, 3], [2]]
    assert o.pairs == [[(1, 1), (3, 3)], [(2, 2)]]
    assert o.sums_b == {"T": 20 + 40 + 30}


def test_oracle_trivial_cases():
    a = IdTable.from_rows(["x"], [("a",), ("b",)])
    b = IdTable.from_rows(["x"], [("c",), ("d",)], {"T": [1, 2]})
    o = oracle_wfm(a, b)
    assert o.sizes == [0] and o.sums_b == {"T": 0}
    same = IdTable.from_rows(["x"], [("a",), ("b",)], {"T": [5, 7]})
    o = oracle_wfm(a, same)
    assert o.sizes == [2] and o.sums_b == {"T": 12}


def test_oracle_counts_double_matches_once():
    a = IdTable.from_rows(["e", "p"], [("x", "1")])
    b = IdTable.from_rows(["e", "p"], [("x", "1")], {"T": [9]})
    o = oracle_wfm(a, b)
    assert o.sizes == [1, 0] and o.sums_b == {"T": 9}


# -- exact mode ---------------------------------------------------------------

@pytest.mark.parametrize("variant,skip", [(v, s) for v in Variant for s in (False, True)])
def test_toy_golden_protocol(variant, skip):
    a, b = toy_tables()
    if variant is Variant.BOTH:
        a = IdTable(a.columns, a.ids, {"U": [1, 2, 3, 4]})
    oa, ob = run(a, b, DpPlan(m=2, variant=variant, skip_last_update=skip))
    assert oa.sizes == ob.sizes == [2, 1]
    assert oa.matched_rows(ob.wire_order) == [[1, 3], [2]]
    # B sees A's last-column matches only when it aggregates A's payloads
    assert ob.matched_rows(oa.wire_order) == ([[1, 3], [2]] if variant is Variant.BOTH else [[1, 3], []])
    if variant is Variant.SUM:
        assert ob.sums == {"T": 90}
    else:
        assert share_values(oa, ob) == [20, 30, 40]
    if variant is Variant.BOTH:
        got = sorted((x + y) % ob.share_modulus for x, y in zip(oa.own_shares["U"], ob.shares["U"]))
        assert got == [2, 3, 4]


def test_single_column_and_trivial_instances():
    a = IdTable.from_rows(["x"], [(f"u{i}",) for i in range(30)])
    b = IdTable.from_rows(["x"], [(f"u{i}",) for i in range(30)], {"T": list(range(30))})
    oa, ob = run(a, b, DpPlan(m=1))
    assert ob.sizes == [30] and ob.sums == {"T": sum(range(30))}
    c = IdTable.from_rows(["x"], [(f"v{i}",) for i in range(30)])
    oa, ob = run(c, b, DpPlan(m=1))
    assert ob.sizes == [0] and ob.sums == {"T": 0}


def _split_instance(rng, n, m=3, rate=0.02, split=(0.85, 0.10, 0.05)):
    cols = [f"c{b}" for b in range(m)]
    a = [[f"a{b}-{i}" for b in range(m)] for i in range(n)]
    bb = [[f"b{b}-{i}" for b in range(m)] for i in range(n)]
    k = int(n * rate)
    rows_a, rows_b = rng.sample(range(n), k), rng.sample(range(n), k)
    for t, (i, j) in enumerate(zip(rows_a, rows_b)):
        col = 0 if t < split[0] * k else (1 if t < (split[0] + split[1]) * k else 2)
        a[i][col] = bb[j][col] = f"s{col}-{t}"
    return (IdTable.from_rows(cols, a), IdTable.from_rows(cols, bb, {"T": [rng.randrange(100) for _ in range(n)]}))


def test_m3_split_overlap_matches_oracle_and_batches_shrink():
    ta, tb = _split_instance(random.Random(4), 500)
    o = oracle_wfm(ta, tb)
    oa, ob = run(ta, tb, DpPlan(m=3))
    assert ob.sizes == o.sizes and sum(o.sizes) == 10
    assert ob.sums == o.sums_b
    for out in (oa, ob):
        assert out.batch_sizes == sorted(out.batch_sizes, reverse=True)
        assert out.batch_sizes[0] == 500 and out.batch_sizes[1] == 500 - out.sizes[0]


def test_random_instances_match_oracle():
    rng = random.Random(7)
    for m in (1, 2, 3):
        ta, tb = random_instance(rng, 60, 45, m)
        o = oracle_wfm(ta, tb)
        oa, ob = run(ta, tb, DpPlan(m=m, tag_width="96"))
        assert ob.sizes == o.sizes and ob.sums == o.sums_b
        assert oa.matched_rows(ob.wire_order) == o.matched_b
        assert ob.matched_rows(oa.wire_order) == o.matched_a[:-1] + [[]]


def test_multiple_payload_columns():
    rng = random.Random(8)
    ta, tb = random_instance(rng, 40, 40, 2)
    tb.payloads["V"] = [rng.randrange(2**32) for _ in range(tb.n)]
    o = oracle_wfm(ta, tb)
    _, ob = run(ta, tb, DpPlan(m=2))
    assert ob.sums == o.sums_b and set(ob.sums) == {"T", "V"}


# -- variants -----------------------------------------------------------------

def test_share_variant_reconstructs_multiset_and_order_is_fresh():
    rng = random.Random(9)
    ta, tb = random_instance(rng, 50, 50, 2, overlap=0.5)
    o = oracle_wfm(ta, tb)
    want = sorted(tb.payloads["T"][j] for col in o.matched_b for j in col)
    orders = set()
    for seed in range(3):
        oa, ob = run(ta, tb, DpPlan(m=2, variant="share"), seeds=(seed, seed + 100))
        assert share_values(oa, ob) == want
        plain = [(x + y) % oa.share_modulus for x, y in zip(ob.own_shares["T"], oa.shares["T"])]
        orders.add(tuple(plain))
    assert len(orders) > 1


def test_share_variant_empty_match():
    a = IdTable.from_rows(["x"], [("p",)])
    b = IdTable.from_rows(["x"], [("q",)], {"T": [3]})
    oa, ob = run(a, b, DpPlan(m=1, variant="share"))
    assert oa.shares == {"T": []} and ob.own_shares == {"T": []}


def test_both_payloads_variant():
    rng = random.Random(10)
    ta, tb = random_instance(rng, 40, 40, 2, payload_a=True)
    o = oracle_wfm(ta, tb)
    oa, ob = run(ta, tb, DpPlan(m=2, variant="both"))
    assert oa.sizes == ob.sizes == o.sizes
    assert ob.matched_rows(oa.wire_order) == o.matched_a
    assert share_values(oa, ob) == matched_multiset(tb, o.matched_b)
    got_a = sorted((x + y) % ob.share_modulus for x, y in zip(oa.own_shares["T"], ob.shares["T"]))
    assert got_a == matched_multiset(ta, o.matched_a)


# -- DP mode ------------------------------------------------------------------

def test_dp_enhance_plan_and_padding():
    rng = random.Random(11)
    ta, _ = random_instance(rng, 30, 30, 3)
    padded, plan = dp_enhance(ta, 2.0, 1e-5, 6, "A", rng, b"s" * 16)
    assert plan.tau == find_min_tau(2.0, 1e-5, 6) and not plan.tau_override
    assert abs(plan.tau - 191) <= 2
    assert padded.n == 30 + 3 * plan.tau
    _, plan1 = dp_enhance(ta, 2.0, 1e-5, 1, "A", rng, b"s" * 16)
    assert plan1.tau == min_tau_single(2.0, 1e-5)
    with pytest.raises(PlanError):
        make_plan(3, eps=1.0, delta=1.0)
    with pytest.raises(PlanError):
        make_plan(3, eps=-1.0, delta=1e-5)
    assert make_plan(2, tau=5, seed=b"x").tau_override


def test_dp_sum_exact_and_noise_from_dummies():
    rng = random.Random(12)
    ta, tb = random_instance(rng, 40, 40, 2)
    o = oracle_wfm(ta, tb)
    plan = make_plan(2, tau=6, seed=b"q" * 16)
    oa, ob = run(ta, tb, plan)
    assert ob.sums == o.sums_b
    assert oa.sizes == ob.sizes
    for b in range(2):
        noise = ob.sizes[b] - o.sizes[b]
        assert 0 <= noise <= plan.tau
        # count the noise directly: matched rows of B that are noise dummies in column b
        rows = oa.matched_rows(ob.wire_order)[b]
        assert sum(1 for r in rows if ob.padded.provenance[b][r] == NOISE) == noise


def test_no_type_x_linkage_across_epochs():
    rng = random.Random(13)
    ta, tb = random_instance(rng, 40, 40, 3, overlap=0.6)
    oa, ob = run(ta, tb, DpPlan(m=3))
    for out in (oa, ob):
        deleted = set()
        for b in range(1, 3):
            deleted |= set(out.matched[b - 1])
            old_tags = {out.stage2_peer_tags[b][j] for j in deleted}
            if f"col:{b + 1}:upd" not in out.tags_sent:
                assert out.role == "A" and b == 2  # one-way last column
                continue
            wire = set(out.tags_sent[f"col:{b + 1}:upd"])
            assert old_tags and not old_tags & wire


def test_skip_last_update_mode():
    rng = random.Random(14)
    ta, tb = random_instance(rng, 40, 40, 3, overlap=0.5)
    o = oracle_wfm(ta, tb)
    oa, ob = run(ta, tb, DpPlan(m=3, skip_last_update=True), keep_transcript=True)
    assert oa.sizes == ob.sizes == o.sizes and ob.sums == o.sums_b
    assert ob.matched[2] == []  # B learns s_m only from the confirmation
    assert oa.matched_rows(ob.wire_order) == o.matched_b
    oa, ob = run(ta, tb, DpPlan(m=3, variant="both", skip_last_update=True))
    assert ob.matched_rows(oa.wire_order) == o.matched_a


# -- failure handling ---------------------------------------------------------

def _run_threads(fa, fb):
    res = {}

    def go(key, fn):
        try:
            res[key] = fn()
        except Exception as exc:  # noqa: BLE001
            res[key] = exc

    ts = [threading.Thread(target=go, args=("a", fa)), threading.Thread(target=go, args=("b", fb))]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    return res["a"], res["b"]


def test_parameter_mismatch_aborts_both_sides():
    a, b = toy_tables()
    ca, cb = channel_pair(timeout=30)
    ra, rb = _run_threads(lambda: run_party_a(a, DpPlan(m=2, tag_width="96"), ca, random.Random(1)),
                          lambda: run_party_b(b, DpPlan(m=2), cb, random.Random(2)))
    assert isinstance(ra, SessionAbort) and isinstance(rb, SessionAbort)
    assert ra.stage == "setup" and "tag_width" in str(ra) + str(rb)


def test_corrupted_frame_aborts():
    a, b = toy_tables()
    ca, cb = channel_pair(timeout=30)
    real_send = cb.send

    def corrupt(mtype, sid, payload=b""):
        if mtype is MessageType.EVAL_BATCH:
            payload = payload[:-5]
        real_send(mtype, sid, payload)

    cb.send = corrupt
    ra, rb = _run_threads(lambda: run_party_a(a, DpPlan(m=2), ca, random.Random(1)),
                          lambda: run_party_b(b, DpPlan(m=2), cb, random.Random(2)))
    assert isinstance(ra, SessionAbort) and ra.stage == "prf-eval"
    assert isinstance(rb, SessionAbort)


def test_wrong_column_count_rejected():
    a, _ = toy_tables()
    with pytest.raises(PlanError):
        run_party_a(a, DpPlan(m=3), channel_pair()[0])


def _elements(channel):
    kinds = {MessageType.EVAL_BATCH, MessageType.TAGS_SHUFFLED, MessageType.UPDATE_BATCH, MessageType.UPDATE_REPLY}
    return sum(int.from_bytes(f.payload[:4], "big") for _, f in channel.transcript if f.type in kinds)


@pytest.mark.parametrize("variant,skip", [("sum", False), ("sum", True), ("both", False)])
def test_wire_element_count_formula(variant, skip):
    rng = random.Random(15)
    m = 3
    ta, tb = random_instance(rng, 120, 90, m, overlap=0.3, payload_a=True)
    ra, rb = run_local(ta, tb, DpPlan(m=m, variant=variant, skip_last_update=skip), (1, 2), keep_transcript=True)
    held_a, held_b = ra.output.batch_sizes, rb.output.batch_sizes
    want = m * (ta.n + tb.n) + ta.n + tb.n
    for b in range(1, m):
        last = b == m - 1
        if not (last and skip):
            want += 2 * (held_a[b] + held_b[b])
        want += held_b[b] + (held_a[b] if not last or variant == "both" else 0)
    assert _elements(ra.channel) == want
    if skip:
        bound = m * (ta.n + tb.n) + tb.n - sum(ra.output.sizes)
        assert want / bound <= 2.5
