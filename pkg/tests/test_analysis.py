import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparta.adapter import SparsityConfig, sample_indices
from sparta.analysis import (align_heads, delta_rank, format_rank_table, matrix_rank, random_drop, rank_report,
                             singular_values)
from sparta.errors import ConfigError, PairingError
from sparta.model import ModelConfig, init_params, swap_head


def test_identical_weights_rank_zero():
    w = np.random.default_rng(0).normal(size=(8, 6)).astype(np.float32)
    assert delta_rank(w, w) == 0
    assert delta_rank(w, w, tol=0.0) == 0


def test_outer_product_rank_one():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(10, 7))
    assert delta_rank(w, w + np.outer(rng.normal(size=10), rng.normal(size=7))) == 1


def test_ba_rank_eight_with_gram_oracle():
    rng = np.random.default_rng(2)
    delta = rng.normal(size=(32, 8)) @ rng.normal(size=(8, 32))
    assert matrix_rank(delta) == 8
    eig = np.linalg.eigvalsh(delta.T @ delta)
    assert int(np.sum(eig > 1e-10 * eig.max())) == 8


def test_rank_monotone_in_tolerance():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(20, 20)) @ np.diag(np.logspace(0, -12, 20)) @ rng.normal(size=(20, 20))
    ranks = [matrix_rank(a, tol) for tol in (0.0, 1e-12, 1e-9, 1e-6, 1e-3, 0.5)]
    assert ranks == sorted(ranks, reverse=True) and ranks[0] > ranks[-1]


def _pair(seed=0):
    cfg = ModelConfig(vocab_size=32, hidden_dim=16, num_layers=2, num_heads=2, head_dim=8,
                      mlp_dim=24, max_seq_len=8)
    pt = swap_head(init_params(cfg, seed), 2)
    return pt, pt.copy()


def test_dense_noise_full_rank():
    pt, ft = _pair()
    rng = np.random.default_rng(4)
    for k, v in ft.items():
        v += rng.normal(scale=1e-2, size=v.shape).astype(np.float32)
    report = rank_report(pt, ft)
    assert report.entries and all(e.deficiency == 0 for e in report.entries)
    assert report.skipped == [k for k, v in pt.items() if v.ndim != 2]
    assert [e.name for e in report.entries] == [k for k, v in pt.items() if v.ndim == 2]


def test_low_rank_wq_only():
    pt, ft = _pair()
    rng = np.random.default_rng(5)
    for k, v in ft.items():
        if v.ndim == 2:
            v += (rng.normal(size=(v.shape[0], 3)) @ rng.normal(size=(3, v.shape[1])) if k.endswith("wq")
                  else rng.normal(size=v.shape)).astype(np.float32)
    report = rank_report(pt, ft)
    for e in report.entries:
        assert e.deficiency == (min(e.dims) - 3 if e.name.endswith("wq") else 0)
    text = format_rank_table(report)
    assert "Rank deficiencies" in text and "wq" in text.lower() and "0 (full rank)" in text
    assert "layers.0.wq" in format_rank_table(report, per_tensor=True)


def test_pairing_error():
    pt, _ = _pair()
    other = swap_head(pt, 3)
    with pytest.raises(PairingError):
        rank_report(pt, other)


def test_singular_values_match_mpmath():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    rng = np.random.default_rng(6)
    for shape in ((5, 5), (7, 4), (4, 9), (8, 8)):
        a = rng.normal(size=shape)
        _, ref, _ = mpmath.svd_r(mpmath.matrix(a.tolist()))
        ref = sorted((float(x) for x in ref), reverse=True)
        got = singular_values(a)
        np.testing.assert_allclose(got, ref, rtol=1e-6)


def test_random_drop_p0_keeps_support():
    rng = np.random.default_rng(7)
    dense = rng.normal(size=(20, 30)).astype(np.float32)
    dense[dense < -1] = 0
    phi, delta = random_drop(dense, 0.0)
    assert delta.to_dense(phi, {"delta": dense.shape})["delta"].tobytes() == dense.tobytes()
    assert phi.m == np.count_nonzero(dense)


def test_random_drop_idempotent_support():
    rng = np.random.default_rng(8)
    dense = rng.normal(size=(30, 30)).astype(np.float32)
    phi, delta = random_drop(dense, 0.7, rescale=True, seed=3)
    once = delta.to_dense(phi, {"delta": dense.shape})["delta"]
    phi2, delta2 = random_drop(once, 0.0)
    assert delta2.to_dense(phi2, {"delta": dense.shape})["delta"].tobytes() == once.tobytes()


def test_random_drop_p1_rejected():
    with pytest.raises(ConfigError):
        random_drop(np.ones((2, 2)), 1.0)


def test_random_drop_kept_count_binomial():
    dense = np.ones((1000, 1000), np.float32)
    sigma = np.sqrt(1e6 * 0.01 * 0.99)
    for seed in range(3):
        phi, delta = random_drop(dense, 0.99, rescale=True, seed=seed)
        assert abs(phi.m - 10000) <= 3 * sigma
        assert np.allclose(delta.values["delta"], 100.0)


def test_random_drop_independent_of_sampling_stream():
    # a delta supported on a seed-s sample, dropped with the same seed, keeps ~(1 - p) of it
    pt, _ = _pair()
    phi = sample_indices(pt, SparsityConfig(0.05, seed=0))
    dense = {}
    for t in phi:
        d = np.zeros(t.shape, np.float32)
        d.reshape(-1)[t.flat] = 1.0
        dense[t.name] = d
    support = sum(np.count_nonzero(d) for d in dense.values())
    kept, _ = random_drop(dense, 0.9, seed=0)
    sigma = np.sqrt(support * 0.1 * 0.9)
    assert abs(kept.m - 0.1 * support) <= 3 * sigma


def test_align_heads_drops_swapped_head_only():
    pt, ft = _pair()
    task = swap_head(ft, 3)
    a, b, dropped = align_heads(pt, task)
    assert dropped and a.manifest() == b.manifest()
    assert pt.head_name not in a and len(a) == len(pt) - 1
    assert rank_report(a, b).entries
    same_a, same_b, dropped = align_heads(pt, ft)
    assert not dropped and same_a is pt and same_b is ft


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31))
def test_rank_bounded_property(r, c, seed):
    a = np.random.default_rng(seed).normal(size=(r, c))
    assert 0 <= matrix_rank(a) <= min(r, c)
