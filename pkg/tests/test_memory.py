import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catmem.errors import DegenerateVectorError, FrozenMemoryError, ShapeError, SnapshotError
from catmem.memory import (
    Attention,
    CategoricalMemory,
    Equal,
    Predicted,
    PredictorParams,
    TopK,
    attention_scores,
    augment,
    read,
    read_backward,
)
from catmem.numerics import Rng


def filled_memory(c, d, seed=0, beta=0.9, tau=0.1):
    rng = Rng(seed, "fill")
    mem = CategoricalMemory.empty(c, d, beta, tau)
    for i in range(c):
        mem.write(i, rng.normal(d))
    return mem


# -- construction ---------------------------------------------------------------


def test_new_memory_is_empty():
    mem = CategoricalMemory.empty(3, 4, 0.9, 0.1)
    assert mem.slots.shape == (3, 4) and not mem.slots.any()
    assert not mem.initialized.any() and not mem.frozen


@pytest.mark.parametrize("beta,tau", [(1.0, 0.1), (0.0, 0.1), (1.5, 0.1), (0.9, 0.0), (0.9, -1.0)])
def test_new_memory_rejects_bad_hyperparameters(beta, tau):
    with pytest.raises(ValueError):
        CategoricalMemory.empty(3, 4, beta, tau)


def test_random_memory_deterministic_and_frozen():
    a = CategoricalMemory.random(5, 8, Rng(9, "memory"))
    b = CategoricalMemory.random(5, 8, Rng(9, "memory"))
    assert np.array_equal(a.slots, b.slots)
    assert a.frozen and a.initialized.all()
    with pytest.raises(FrozenMemoryError):
        a.write(0, np.ones(8))
    with pytest.raises(FrozenMemoryError):
        a.batch_write(np.ones((2, 8)), [0, 1])


def test_random_memory_entry_std():
    scale = 0.25
    mem = CategoricalMemory.random(100, 100, Rng(77), scale)
    x = mem.slots.ravel()
    se_std = scale / math.sqrt(2 * (x.size - 1))
    assert abs(x.std(ddof=1) - scale) <= 3 * se_std


def test_random_memory_default_scale():
    mem = CategoricalMemory.random(400, 25, Rng(1))
    assert mem.slots.std() == pytest.approx(1 / 5, rel=0.05)


# -- writing ----------------------------------------------------------------------


def test_first_write_copies_feature():
    mem = CategoricalMemory.empty(2, 3)
    f = np.array([1.0, -2.0, 0.5])
    mem.write(1, f)
    assert np.array_equal(mem.slots[1], f) and mem.initialized.tolist() == [False, True]


def test_write_fixed_point():
    mem = filled_memory(3, 4)
    before = mem.slots.copy()
    mem.write(2, before[2])
    assert np.max(np.abs(mem.slots[2] - before[2])) <= 1e-15
    assert np.array_equal(mem.slots[:2], before[:2])


def test_write_with_default_beta():
    mem = CategoricalMemory.empty(1, 2, beta=0.9)
    mem.write(0, [1.0, 0.0])
    mem.write(0, [0.0, 1.0])
    assert mem.slots[0] == pytest.approx([0.1, 0.9], abs=1e-15)


def test_hundred_writes_match_step_by_step_oracle():
    beta = 0.9
    m0 = np.array([3.0, -1.0, 2.0])
    v = np.array([0.5, 0.25, -4.0])
    mem = CategoricalMemory.empty(1, 3, beta)
    mem.write(0, m0)
    ref = [float(x) for x in m0]
    for _ in range(100):
        mem.write(0, v)
        ref = [r + beta * (vi - r) for r, vi in zip(ref, v)]
    assert np.max(np.abs(mem.slots[0] - np.array(ref))) <= 1e-10
    closed = v + (1 - beta) ** 100 * (m0 - v)
    assert np.max(np.abs(mem.slots[0] - closed)) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 10_000))
def test_write_contracts_distance(beta, seed):
    rng = Rng(seed)
    mem = CategoricalMemory.empty(1, 5, beta)
    mem.write(0, rng.normal(5))
    f = rng.normal(5)
    before = np.linalg.norm(mem.slots[0] - f)
    mem.write(0, f)
    after = np.linalg.norm(mem.slots[0] - f)
    assert after == pytest.approx((1 - beta) * before, rel=1e-12, abs=1e-300)


def test_write_errors():
    mem = CategoricalMemory.empty(2, 3)
    with pytest.raises(IndexError):
        mem.write(2, np.zeros(3))
    with pytest.raises(ShapeError):
        mem.write(0, np.zeros(4))
    with pytest.raises(ValueError):
        mem.write(0, [np.nan, 0.0, 0.0])


def test_batch_write_singletons_equal_individual_writes():
    rng = Rng(2)
    a, b = filled_memory(4, 3), filled_memory(4, 3)
    feats = rng.normal((4, 3))
    a.batch_write(feats, [2, 0, 3, 1])
    for f, y in zip(feats, [2, 0, 3, 1]):
        b.write(y, f)
    assert np.array_equal(a.slots, b.slots)


def test_batch_write_two_samples_use_their_mean():
    mem = filled_memory(2, 3)
    old = mem.slots[1].copy()
    feats = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    mem.batch_write(feats, [1, 1])
    assert mem.slots[1] == pytest.approx(0.1 * old + 0.9 * np.array([2.0, 2.0, 2.0]), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_batch_write_matches_group_mean_oracle(seed):
    rng = Rng(seed, "batch")
    c, d, n = 6, 5, 16
    mem = CategoricalMemory.empty(c, d, 0.7)
    mem.write(0, rng.normal(d))
    mem.write(3, rng.normal(d))
    feats = rng.normal((n, d))
    labels = rng.choice(c, n, replace=True)
    expected = mem.slots.copy()
    init = mem.initialized.copy()
    for cls in sorted(set(labels.tolist())):
        rows = [feats[i] for i in range(n) if labels[i] == cls]
        mean = [sum(r[j] for r in rows) / len(rows) for j in range(d)]
        if init[cls]:
            expected[cls] = [m + 0.7 * (x - m) for m, x in zip(expected[cls], mean)]
        else:
            expected[cls] = mean
    mem.batch_write(feats, labels)
    assert np.max(np.abs(mem.slots - expected)) <= 1e-12
    assert mem.initialized.tolist() == (init | np.isin(np.arange(c), labels)).tolist()


def test_batch_write_order_independent():
    rng = Rng(8)
    feats = rng.normal((10, 4))
    labels = np.array([0, 1, 1, 2, 0, 2, 2, 1, 0, 0])
    perm = rng.permutation(10)
    a, b = filled_memory(3, 4), filled_memory(3, 4)
    a.batch_write(feats, labels)
    b.batch_write(feats[perm], labels[perm])
    assert np.max(np.abs(a.slots - b.slots)) <= 1e-14


# -- reading ------------------------------------------------------------------------


def test_single_eligible_slot_gets_all_weight():
    mem = CategoricalMemory.empty(3, 2)
    mem.write(1, [0.2, -0.7])
    w = attention_scores(mem, np.array([5.0, 1.0]))
    assert w.tolist() == [0.0, 1.0, 0.0]


def test_equal_cosine_gives_uniform_attention():
    mem = CategoricalMemory.empty(2, 2)
    mem.write(0, [1.0, 0.0])
    mem.write(1, [0.0, 1.0])
    w = attention_scores(mem, np.array([1.0, 1.0]) / math.sqrt(2))
    assert w == pytest.approx([0.5, 0.5], abs=1e-15)


def test_attention_tau_point_one_example():
    mem = CategoricalMemory.empty(2, 2, tau=0.1)
    mem.write(0, [1.0, 0.0])
    mem.write(1, [0.0, 1.0])
    w = attention_scores(mem, np.array([1.0, 0.0]))
    e = math.exp(10.0)
    assert w[0] == pytest.approx(e / (e + 1), abs=1e-15)
    assert w[1] == pytest.approx(1 / (e + 1), rel=1e-12)
    assert w[0] == pytest.approx(0.9999546, abs=1e-7)


def test_attention_rejects_degenerate_query():
    mem = filled_memory(2, 3)
    with pytest.raises(DegenerateVectorError):
        attention_scores(mem, np.zeros(3))


def test_empty_memory_reads_zero():
    mem = CategoricalMemory.empty(3, 4)
    for mode in (Attention(), Equal(), TopK(2)):
        r = read(mem, np.ones(4), mode)
        assert r.eligible_count == 0
        assert not r.weights.any() and not r.response.any()


def test_dot_similarity_option():
    mem = CategoricalMemory.empty(2, 2, tau=1.0)
    mem.write(0, [2.0, 0.0])
    mem.write(1, [0.0, 1.0])
    w = attention_scores(mem, np.array([1.0, 1.0]), similarity="dot")
    assert w == pytest.approx([math.e ** 2 / (math.e ** 2 + math.e), math.e / (math.e ** 2 + math.e)], abs=1e-15)


def test_topk_full_equals_attention():
    mem = filled_memory(5, 4)
    f = Rng(3).normal(4)
    a = read(mem, f, Attention())
    b = read(mem, f, TopK(5))
    assert np.max(np.abs(a.weights - b.weights)) <= 1e-12
    assert np.max(np.abs(a.response - b.response)) <= 1e-12


def test_topk_one_returns_best_prototype():
    mem = filled_memory(5, 4)
    f = Rng(4).normal(4)
    w = attention_scores(mem, f)
    r = read(mem, f, TopK(1))
    assert np.array_equal(r.response, mem.slots[int(np.argmax(w))])


@pytest.mark.parametrize("seed", range(5))
def test_topk_matches_brute_force_oracle(seed):
    mem = filled_memory(3, 4, seed)
    f = Rng(seed, "q").normal(4)
    r = read(mem, f, TopK(2))
    sims = [float(f @ m / (np.linalg.norm(f) * np.linalg.norm(m))) for m in mem.slots]
    ex = [math.exp((s - max(sims)) / mem.tau) for s in sims]
    w = [e / sum(ex) for e in ex]
    drop = min(range(3), key=lambda i: (w[i], -i))
    kept = [0.0 if i == drop else w[i] for i in range(3)]
    kept = [x / sum(kept) for x in kept]
    resp = [sum(kept[i] * mem.slots[i][j] for i in range(3)) for j in range(4)]
    assert np.max(np.abs(r.weights - kept)) <= 1e-12
    assert np.max(np.abs(r.response - resp)) <= 1e-12


def test_topk_ties_prefer_lower_index():
    mem = CategoricalMemory.empty(3, 2)
    mem.write(0, [0.0, 1.0])
    mem.write(1, [1.0, 0.0])
    mem.write(2, [1.0, 0.0])
    r = read(mem, np.array([1.0, 0.0]), TopK(1))
    assert r.weights.tolist() == [0.0, 1.0, 0.0]


def test_topk_larger_than_eligible_is_error():
    mem = CategoricalMemory.empty(4, 2)
    mem.write(0, [1.0, 0.0])
    mem.write(1, [0.0, 1.0])
    with pytest.raises(ValueError):
        read(mem, np.ones(2), TopK(3))


def test_equal_mode_is_prototype_mean():
    mem = filled_memory(4, 3)
    r = read(mem, np.ones(3), Equal())
    assert np.array_equal(r.weights, np.full(4, 0.25))
    assert np.max(np.abs(r.response - mem.slots.mean(axis=0))) <= 1e-15


def test_equal_mode_covers_eligible_slots_only():
    mem = CategoricalMemory.empty(4, 3)
    mem.write(0, [1.0, 2.0, 3.0])
    mem.write(2, [3.0, 2.0, 1.0])
    r = read(mem, np.ones(3), Equal())
    assert r.weights.tolist() == [0.5, 0.0, 0.5, 0.0]
    assert r.response.tolist() == [2.0, 2.0, 2.0]


def test_predicted_mode_softmax_of_linear_layer():
    mem = filled_memory(3, 2)
    p = PredictorParams(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([0.0, 0.5, -1.0]))
    f = np.array([0.3, -0.2])
    z = p.weight @ f + p.bias
    ex = np.exp(z - z.max())
    r = read(mem, f, Predicted(p))
    assert r.weights == pytest.approx(ex / ex.sum(), abs=1e-15)


MODES = [Attention(), Equal(), TopK(2)]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 10_000), st.sampled_from(range(4)))
def test_weight_simplex_every_mode(c, d, seed, mode_idx):
    mem = filled_memory(c, d, seed)
    rng = Rng(seed, "query")
    f = rng.normal(d)
    if mode_idx == 3:
        mode = Predicted(PredictorParams(rng.normal((c, d)), rng.normal(c)))
    else:
        mode = MODES[mode_idx]
        if isinstance(mode, TopK):
            mode = TopK(min(2, c))
    r = read(mem, f, mode)
    assert np.all(r.weights >= 0)
    assert abs(r.weights.sum() - 1) <= 1e-9
    assert np.max(np.abs(r.response - r.weights @ mem.slots)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_attention_scale_invariant(c, d, seed, alpha):
    mem = filled_memory(c, d, seed)
    f = Rng(seed, "query").normal(d)
    a = attention_scores(mem, f)
    b = attention_scores(mem, alpha * f)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert int(np.argmax(a)) == int(np.argmax(b))


def test_reads_leave_frozen_memory_untouched():
    mem = filled_memory(4, 3)
    mem.frozen = True
    before = mem.snapshot()
    rng = Rng(1)
    for mode in (Attention(), Equal(), TopK(2)):
        for _ in range(5):
            read(mem, rng.normal(3), mode)
    assert mem.snapshot() == before


def test_augment():
    f = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(augment(f, np.zeros(3)), f)
    assert np.array_equal(augment(f, f), 2 * f)
    r = Rng(0).normal(3)
    assert augment(f, r).tolist() == [a + b for a, b in zip(f.tolist(), r.tolist())]
    with pytest.raises(ShapeError):
        augment(f, np.zeros(2))


# -- backward -----------------------------------------------------------------------


def fd_read_gradient(mem, f, mode, upstream, h=1e-6, similarity="cosine"):
    def objective(x):
        return float(upstream @ augment(x, read(mem, x, mode, similarity).response))

    g = np.zeros_like(f)
    for i in range(f.size):
        e = np.zeros_like(f)
        e[i] = h
        g[i] = (objective(f + e) - objective(f - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_backward_single_slot_is_identity():
    mem = CategoricalMemory.empty(3, 4)
    mem.write(2, [1.0, 2.0, 0.0, -1.0])
    u = Rng(0).normal(4)
    assert np.array_equal(read_backward(mem, Rng(1).normal(4), Attention(), u), u)


def test_backward_empty_memory_is_identity():
    mem = CategoricalMemory.empty(3, 4)
    u = Rng(0).normal(4)
    assert np.array_equal(read_backward(mem, Rng(1).normal(4), Attention(), u), u)


@pytest.mark.parametrize("seed", range(30))
@pytest.mark.parametrize("similarity", ["cosine", "dot"])
def test_backward_matches_finite_differences(seed, similarity):
    rng = Rng(seed, "bwd")
    c = 2 + seed % 7
    d = 3 + seed % 10
    mem = filled_memory(c, d, seed, tau=0.5 if similarity == "cosine" else 2.0)
    f = rng.normal(d)
    u = rng.normal(d)
    for mode in (Attention(), Equal(), TopK(max(1, c - 1))):
        g = read_backward(mem, f, mode, u, similarity=similarity)
        assert rel_err(g, fd_read_gradient(mem, f, mode, u, similarity=similarity)) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_predicted_backward_matches_finite_differences(seed):
    rng = Rng(seed, "pred")
    c, d = 3 + seed % 4, 4 + seed % 5
    mem = filled_memory(c, d, seed)
    p = PredictorParams(rng.normal((c, d)) * 0.5, rng.normal(c) * 0.5)
    f, u = rng.normal(d), rng.normal(d)
    g, pg = read_backward(mem, f, Predicted(p), u)
    assert rel_err(g, fd_read_gradient(mem, f, Predicted(p), u)) <= 1e-5

    def obj():
        return float(u @ read(mem, f, Predicted(p)).response)

    for arr, garr in ((p.weight, pg.weight), (p.bias, pg.bias)):
        num = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + 1e-6
            hi = obj()
            arr.flat[i] = old - 1e-6
            lo = obj()
            arr.flat[i] = old
            num.flat[i] = (hi - lo) / 2e-6
        assert rel_err(garr, num) <= 1e-5


def test_backward_without_attention_is_identity():
    mem = filled_memory(4, 5)
    u = Rng(0).normal(5)
    assert np.array_equal(read_backward(mem, Rng(1).normal(5), Attention(), u, through_attention=False), u)


# -- persistence ---------------------------------------------------------------------


def test_snapshot_round_trip():
    mem = filled_memory(3, 4, beta=0.37, tau=0.21)
    mem.initialized[1] = False
    mem.frozen = True
    back = CategoricalMemory.restore(mem.snapshot())
    assert back.snapshot() == mem.snapshot()
    assert np.array_equal(back.slots, mem.slots) and back.initialized.tolist() == [True, False, True]
    assert (back.beta, back.tau, back.frozen) == (0.37, 0.21, True)


def test_snapshot_header_layout():
    mem = filled_memory(3, 4, beta=0.9, tau=0.1)
    blob = mem.snapshot()
    assert blob[:4] == b"CMNM"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:10], "little") == 3
    assert int.from_bytes(blob[10:14], "little") == 4
    assert struct.unpack("<d", blob[14:22])[0] == 0.9
    assert struct.unpack("<d", blob[22:30])[0] == 0.1
    assert blob[30] == 0
    assert list(blob[31:34]) == [1, 1, 1]
    values = struct.unpack("<12d", blob[34:34 + 96])
    assert list(values) == mem.slots.ravel().tolist()
    assert len(blob) == 34 + 96


@pytest.mark.parametrize("cut", [0, 3, 20, 33, 60])
def test_truncated_snapshot_is_parse_error(cut):
    blob = filled_memory(3, 4).snapshot()
    with pytest.raises(SnapshotError) as info:
        CategoricalMemory.restore(blob[:cut])
    assert info.value.offset >= 0


def test_bad_magic_is_parse_error():
    blob = bytearray(filled_memory(2, 2).snapshot())
    blob[0:4] = b"XXXX"
    with pytest.raises(SnapshotError, match="offset 0"):
        CategoricalMemory.restore(bytes(blob))


def test_memory_csv_export(tmp_path):
    mem = filled_memory(2, 3)
    mem.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "class,m0,m1,m2"
    assert [float(x) for x in lines[2].split(",")[1:]] == mem.slots[1].tolist()
