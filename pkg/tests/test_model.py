import dataclasses

import numpy as np
import pytest

from sparta import tensor as T
from sparta.checkpoint import checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint
from sparta.errors import ConfigError, InputError, VocabularyError
from sparta.model import (ALL_TYPES, ModelConfig, ParamType, count_params, forward, hidden_states,
                          init_params, pad_batch, parse_types, swap_head)


def oracle_forward(params, seq):
    """Straight-line float64 forward of one unpadded sequence, no tape, no batching."""
    cfg = params.config
    W = {k: v.astype(np.float64) for k, v in params.items()}
    S, d, H, hd = len(seq), cfg.hidden_dim, cfg.num_heads, cfg.head_dim
    group = cfg.num_heads // cfg.kv_heads

    def norm(x, g):
        return x / np.sqrt(np.mean(x * x) + 1e-6) * g

    xs = [W["embed"][t] + W["embed"][cfg.vocab_size + i] for i, t in enumerate(seq)]
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        hs = [norm(x, W[p + "attn_norm"]) for x in xs]
        qs = [W[p + "wq"] @ h for h in hs]
        ks = [W[p + "wk"] @ h for h in hs]
        vs = [W[p + "wv"] @ h for h in hs]
        new = []
        for i in range(S):
            ctx = np.zeros(d)
            for head in range(H):
                kv = head // group
                q = qs[i][head * hd:(head + 1) * hd]
                scores = np.array([q @ ks[j][kv * hd:(kv + 1) * hd] / np.sqrt(hd) for j in range(i + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[head * hd:(head + 1) * hd] = sum(w[j] * vs[j][kv * hd:(kv + 1) * hd] for j in range(i + 1))
            x = xs[i] + W[p + "wo"] @ ctx
            h = norm(x, W[p + "mlp_norm"])
            g = W[p + "mlp_gate"] @ h
            act = g / (1 + np.exp(-g)) * (W[p + "mlp_up"] @ h)
            new.append(x + W[p + "mlp_down"] @ act)
        xs = new
    return W["head"] @ norm(xs[-1], W["final_norm"])


@pytest.fixture
def oracle_params():
    cfg = ModelConfig(vocab_size=64, hidden_dim=16, num_layers=2, num_heads=2, head_dim=8,
                      mlp_dim=32, max_seq_len=16)
    return swap_head(init_params(cfg, 3), 3, seed=4)


def test_logits_shape_single_sequence(cls_params):
    assert forward(cls_params, [[5, 6, 7]]).shape == (1, 2)


def test_identical_sequences_identical_rows(cls_params):
    out = forward(cls_params, [[5, 6, 7], [5, 6, 7]]).data
    assert out[0].tobytes() == out[1].tobytes()


def test_matches_unbatched_oracle(oracle_params):
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 64, size=n)) for n in (3, 9, 1, 16, 6)]
    got = forward(oracle_params, seqs).data
    want = np.stack([oracle_forward(oracle_params, s) for s in seqs])
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)


def test_grouped_query_attention_matches_oracle():
    cfg = ModelConfig(vocab_size=40, hidden_dim=16, num_layers=1, num_heads=4, head_dim=4,
                      mlp_dim=24, max_seq_len=8, num_kv_heads=2)
    params = swap_head(init_params(cfg, 5), 2, seed=1)
    assert params["layers.0.wk"].shape == (8, 16)
    seqs = [[1, 2, 3, 4], [7, 8]]
    np.testing.assert_allclose(forward(params, seqs).data,
                               np.stack([oracle_forward(params, s) for s in seqs]), atol=1e-5)


def test_padding_does_not_change_logits(cls_params):
    alone = forward(cls_params, [[9, 8, 7]]).data
    batched = forward(cls_params, [[9, 8, 7], [1, 2, 3, 4, 5, 6]]).data
    np.testing.assert_allclose(alone[0], batched[0], atol=1e-6)


def test_causal_masking_prefix_invariance(cls_params):
    rng = np.random.default_rng(1)
    ids = rng.integers(1, 64, size=(3, 12))
    full = hidden_states(cls_params, ids).data.reshape(3, 12, -1)
    for t in (1, 5, 11):
        part = hidden_states(cls_params, ids[:, :t]).data.reshape(3, t, -1)
        np.testing.assert_allclose(part, full[:, :t], atol=1e-6)


def test_probabilities_sum_to_one(cls_params):
    logits = forward(cls_params, [[1, 2], [3, 4, 5]])
    np.testing.assert_allclose(T.softmax(logits).data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_errors(cls_params):
    with pytest.raises(VocabularyError):
        forward(cls_params, [[1, 64]])
    with pytest.raises(InputError):
        forward(cls_params, [[]])
    with pytest.raises(InputError):
        forward(cls_params, [list(range(1, 18))])


def test_forward_is_deterministic(cls_params):
    a = forward(cls_params, [[1, 2, 3]]).data
    b = forward(cls_params, [[1, 2, 3]]).data
    assert a.tobytes() == b.tobytes()


def test_pad_batch_right_pads():
    ids, lengths = pad_batch([[4, 5], [6]])
    assert ids.tolist() == [[4, 5], [6, 0]] and lengths.tolist() == [2, 1]


# -- head swap ---------------------------------------------------------------------------------

def test_swap_head_from_vocab_rows(tiny_params):
    new = swap_head(tiny_params, 2, "vocab", [5, 9])
    assert new["head"][0].tobytes() == tiny_params["head"][5].tobytes()
    assert new["head"][1].tobytes() == tiny_params["head"][9].tobytes()
    assert not np.shares_memory(new["head"], new["embed"])


def test_swap_head_random_deterministic(tiny_params):
    a = swap_head(tiny_params, 3, seed=11)["head"]
    b = swap_head(tiny_params, 3, seed=11)["head"]
    assert a.tobytes() == b.tobytes()
    assert abs(float(swap_head(tiny_params, 200, seed=0)["head"].std()) - 0.02) < 0.002


def test_swap_head_reduces_count(tiny_params, tiny_config):
    v, d, c = tiny_config.vocab_size, tiny_config.hidden_dim, 2
    assert tiny_params.n - swap_head(tiny_params, c).n == (v - c) * d


def test_swap_head_errors(tiny_params):
    with pytest.raises(ConfigError):
        swap_head(tiny_params, 2, "vocab", [5, 5])
    with pytest.raises(ConfigError):
        swap_head(tiny_params, 2, "vocab", [5])
    with pytest.raises(VocabularyError):
        swap_head(tiny_params, 2, "vocab", [5, 64])


# -- counts ------------------------------------------------------------------------------------

def test_count_params(cls_params, tiny_config):
    L, d = tiny_config.num_layers, tiny_config.hidden_dim
    assert count_params(cls_params, ALL_TYPES) == cls_params.n
    assert count_params(cls_params, {ParamType.HEAD}) == 2 * 16
    assert count_params(cls_params, {ParamType.WQ, ParamType.WV}) == L * (d * d + d * tiny_config.kv_dim)
    assert cls_params.n == sum(v.size for _, v in cls_params.items())


def test_gemma_geometry_density_counts():
    cfg = ModelConfig(vocab_size=256000, hidden_dim=2048, num_layers=18, num_heads=8, head_dim=256,
                      mlp_dim=16384, max_seq_len=1, num_kv_heads=1)
    n_sparse = count_params(cfg, parse_types("all"))
    assert abs(n_sparse * 0.05 - 99e6) / 99e6 < 0.01
    assert abs(n_sparse * 0.005 - 10e6) / 10e6 < 0.01


def test_store_invariants(tiny_params):
    types = [e.ptype for _, e in tiny_params.entries()]
    assert types.count(ParamType.EMBEDDING) == 1 and types.count(ParamType.HEAD) == 1
    assert len(set(tiny_params.names())) == len(tiny_params)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, hidden_dim=15, num_heads=2, head_dim=8)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, max_seq_len=0)


def test_parse_types_aliases():
    assert parse_types("wv,wo") == {ParamType.WV, ParamType.WO}
    assert parse_types("mlp") == {ParamType.MLP_GATE, ParamType.MLP_UP, ParamType.MLP_DOWN}
    assert ParamType.EMBEDDING not in parse_types("all")
    with pytest.raises(ConfigError):
        parse_types("bogus")


# -- checkpoint --------------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(cls_params, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cls_params, meta={"note": "x"})
    back, meta = load_checkpoint(path, with_meta=True)
    assert back.bitwise_equal(cls_params) and meta["note"] == "x"
    assert back.manifest() == cls_params.manifest()
    assert checkpoint_bytes(back, {"note": "x"}) == path.read_bytes()


def test_checkpoint_offsets_aligned(cls_params):
    from sparta.fileio import decode_container
    import json
    data = checkpoint_bytes(cls_params)
    hlen = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + hlen])
    assert all(a["offset"] % 64 == 0 for a in header["arrays"])
    assert [a["name"] for a in header["arrays"]] == cls_params.names()
    assert decode_container(data)[0]["kind"] == "checkpoint"
    assert checkpoint_from_bytes(data).bitwise_equal(cls_params)


def test_config_roundtrip():
    cfg = ModelConfig(vocab_size=9, num_kv_heads=2)
    assert ModelConfig.from_dict(dataclasses.asdict(cfg)) == cfg
