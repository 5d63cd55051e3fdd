import json

import numpy as np
import pytest

from sparta import tensor as T
from sparta.adapter import SparseDelta, SparsityConfig, gather_grads, merged, sample_indices, sparse_delta_bytes
from sparta.errors import ConfigError, ConsistencyError, NoSavings, NumericError
from sparta.memory import (SPARSITY_COLUMNS, adapter_bytes, memory_report, render_table,
                           report_json, savings_fraction)
from sparta.model import forward
from sparta.optim import AdamState, adam_step, clip_grad_norm


def test_adam_first_step_constant_gradient():
    p = np.zeros(3, np.float32)
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.ones(3, np.float32)])
    np.testing.assert_allclose(p, -0.1, rtol=1e-6)


def test_adam_zero_gradient_no_change():
    p = np.arange(4, dtype=np.float32)
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.zeros(4, np.float32)])
    assert p.tolist() == [0, 1, 2, 3]


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(0)
    p = rng.normal(size=5).astype(np.float32)
    ref = p.astype(np.float64)
    m = v = np.zeros(5)
    state = AdamState.for_params([p], lr=0.01, weight_decay=0.1)
    for t in range(1, 21):
        g = rng.normal(size=5).astype(np.float32)
        adam_step(state, [p], [g])
        ref = ref * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-4, atol=1e-6)


def test_adam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(5)
        p = rng.normal(size=10).astype(np.float32)
        s = AdamState.for_params([p], lr=0.05)
        for _ in range(30):
            adam_step(s, [p], [rng.normal(size=10).astype(np.float32)])
        return p.tobytes()
    assert run() == run()


def test_adam_rejects_nan_before_touching_state():
    p = np.zeros(2, np.float32)
    s = AdamState.for_params([p])
    with pytest.raises(NumericError):
        adam_step(s, [p], [np.array([1.0, np.nan], np.float32)])
    assert s.step == 0 and p.tolist() == [0, 0]
    with pytest.raises(ConsistencyError):
        adam_step(s, [p], [np.zeros(3, np.float32)])


def test_clip_grad_norm():
    g = [np.array([3.0, 4.0], np.float32)]
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(g[0]) == pytest.approx(1.0, rel=1e-5)


def test_sparse_adam_equals_masked_dense_adam(cls_params):
    """Adam on the delta equals Adam on a dense copy with gradients masked to phi."""
    phi = sample_indices(cls_params, SparsityConfig(0.2, "all", 0))
    names = [t.name for t in phi]
    delta = SparseDelta.zeros(phi)
    dense = {n: cls_params[n].copy() for n in names}
    s_sparse = AdamState.for_params([delta.values[n] for n in names], lr=1e-2)
    s_dense = AdamState.for_params([dense[n] for n in names], lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        ids = rng.integers(1, 64, size=(4, 6))
        labels = rng.integers(0, 2, size=4)
        with merged(cls_params, phi, delta):
            leaves = {n: T.Tensor(cls_params[n], requires_grad=True) for n in names}
            with T.Tape() as tape:
                tape.backward(T.softmax_crossentropy(forward(cls_params, ids, weights=leaves), labels))
        gd = gather_grads(leaves, phi)
        adam_step(s_sparse, [delta.values[n] for n in names], [gd.values[n] for n in names])
        masked = []
        for t in phi:
            g = np.zeros(t.shape, np.float32)
            g.reshape(-1)[t.flat] = gd.values[t.name]
            masked.append(g)
        adam_step(s_dense, [dense[n] for n in names], masked)
        for t in phi:
            got = cls_params[t.name].reshape(-1)[t.flat] + delta.values[t.name]
            np.testing.assert_allclose(got, dense[t.name].reshape(-1)[t.flat], atol=1e-6)
            untouched = np.setdiff1d(np.arange(cls_params[t.name].size), t.flat)
            assert np.array_equal(dense[t.name].reshape(-1)[untouched],
                                  cls_params[t.name].reshape(-1)[untouched])


# -- memory accounting -------------------------------------------------------------------------

MEMORY_TABLE = {(2e9, 0.5): 16, (2e9, 0.8): 8.8, (2e9, 0.9): 6.4, (2e9, 0.95): 5.2, (2e9, 0.99): 4.2,
          (7e9, 0.5): 56, (7e9, 0.8): 30.8, (7e9, 0.9): 22.4, (7e9, 0.95): 18.2, (7e9, 0.99): 14.8}


@pytest.mark.parametrize("cell", sorted(MEMORY_TABLE))
def test_memory_table_cells(cell):
    n, s = cell
    r = memory_report(n, 1 - s)
    assert abs(r.sparta_train_bytes / 1e9 - MEMORY_TABLE[cell]) <= 0.05
    assert r.fullft_train_bytes == 4 * n * 2
    assert r.storage_bytes == 2 * n


def test_report_invariants():
    for n in (1e6, 2e9):
        for k in (0.01, 0.3, 0.5, 1.0):
            r = memory_report(n, k)
            assert r.sparta_train_bytes == pytest.approx(2 * n * (1 + 6 * k))
            assert r.extra_adapter_bytes == pytest.approx(3 * k * n * 2)
            assert r.breakeven == (k < 0.5)


def test_half_density_equals_full_ft():
    r = memory_report(2e9, 0.5)
    assert r.sparta_train_bytes == r.fullft_train_bytes == 16e9 and not r.breakeven


def test_extra_adapter_fraction():
    r = memory_report(2e9, 0.01)
    assert r.view()["sparta_gb"] == 4.2
    assert r.extra_adapter_bytes / r.storage_bytes == pytest.approx(0.03)


@pytest.mark.parametrize("k,expected", [(0.2, 0.45), (0.1, 0.6), (0.05, 0.675), (0.01, 0.735)])
def test_savings_fraction_exact(k, expected):
    assert savings_fraction(k) == expected


@pytest.mark.parametrize("s,expected", [(0.8, 0.45), (0.9, 0.6), (0.95, 0.675), (0.99, 0.735)])
def test_savings_fraction_from_sparsity_exact(s, expected):
    assert savings_fraction(sparsity=s) == expected


def test_savings_limits():
    assert savings_fraction(1e-12) == pytest.approx(0.75)
    assert savings_fraction(0.4999) > 0
    with pytest.raises(NoSavings):
        savings_fraction(0.5)
    with pytest.raises(NoSavings):
        savings_fraction(sparsity=0.5)
    with pytest.raises(ConfigError):
        savings_fraction()
    with pytest.raises(ConfigError):
        memory_report(0, 0.1)


def test_render_table_and_json():
    text = render_table()
    for cell in ("6.4", "4.2", "18.2", "14.8", "30.8", "8.8"):
        assert cell in text
    data = json.loads(report_json([memory_report(2e9, 1 - s) for s in SPARSITY_COLUMNS]))
    assert [d["sparta_gb"] for d in data] == [16, 8.8, 6.4, 5.2, 4.2]


def test_adapter_file_matches_accounting(cls_params):
    phi = sample_indices(cls_params, SparsityConfig(0.1, "all", 0))
    data = sparse_delta_bytes(phi, SparseDelta.zeros(phi), cls_params.fingerprint())
    from sparta.fileio import header_size
    n1d = sum(t.m for t in phi if len(t.shape) == 1)
    assert adapter_bytes(phi) == 3 * phi.m * 2 - 2 * n1d
    assert len(data) - header_size(data) == adapter_bytes(phi)
