import io

import numpy as np
import pytest

from emforge import numerics as nx
from emforge.encoder import (
    BOS,
    EOS,
    IMG,
    ModelConfig,
    build_sequence,
    decode_tokens,
    dumps_checkpoint,
    encode,
    encode_batch,
    init_params,
    loads_checkpoint,
    lora_forward,
    merge_lora,
    merged_config,
    patchify,
    tokenize_text,
    trainable_names,
)
from emforge.encoder.checkpoint import CONFIG_KEY
from emforge.numerics import GradTape, Tensor

from oracles import central_diff, max_rel_err

TOY = ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=48, patch_size=4)


def seq(text, image=None, cfg=TOY):
    return build_sequence(text, image, cfg.patch_size, cfg.max_seq)


# ---------------------------------------------------------------------------
# tokens and patches
# ---------------------------------------------------------------------------

def test_tokenize_examples():
    assert tokenize_text("ab") == [258, 97, 98, 259]
    assert tokenize_text("") == [BOS, EOS]


@pytest.mark.parametrize("text", ["hello", "naïve café", "line\nbreak", "x" * 40])
def test_tokenize_round_trip(text):
    assert decode_tokens(tokenize_text(text)) == text


def test_tokenize_truncation_keeps_prefix():
    ids = tokenize_text("abcdef", max_tokens=5)
    assert ids == [BOS, 97, 98, 99, EOS]


def test_img_marker_maps_to_special():
    assert tokenize_text("[IMG] a") == [BOS, IMG, 32, 97, EOS]


def test_patchify_counts():
    assert patchify(np.zeros((1, 8, 8)), 4).shape == (4, 16)
    assert patchify(np.zeros((3, 16, 16)), 4).shape == (16, 48)
    img = np.full((1, 4, 4), 0.5)
    np.testing.assert_array_equal(patchify(img, 4), img.reshape(1, -1))


def test_patchify_row_major():
    img = np.arange(64, dtype=float).reshape(1, 8, 8)
    p = patchify(img, 4)
    np.testing.assert_array_equal(p[1], img[0, :4, 4:].reshape(-1))
    np.testing.assert_array_equal(p[2], img[0, 4:, :4].reshape(-1))


def test_patchify_rejects_uneven():
    with pytest.raises(ValueError, match="divisible"):
        patchify(np.zeros((1, 6, 8)), 4)


def test_patches_follow_img_token():
    s = seq("[IMG] hi", np.zeros((1, 8, 8)))
    assert s.ids[0] == BOS and s.ids[1] == IMG
    assert list(s.patch_slots) == [2, 3, 4, 5]
    assert s.ids[-1] == EOS and len(s) == 2 + 4 + 4


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def params64():
    return init_params(TOY, seed=0, dtype=np.float64)


def test_encode_shape_and_norm(params64):
    e = encode(seq("[IMG] a cat", np.random.default_rng(0).random((1, 8, 8))), params64, TOY)
    assert e.values.shape == (16,)
    assert abs(np.linalg.norm(e.values) - 1) < 1e-12


def test_encode_deterministic(params64):
    s = seq("same input")
    a = encode(s, params64, TOY).values
    b = encode(s, params64, TOY).values
    assert a.tobytes() == b.tobytes()


def test_masked_padding_leaves_embedding_unchanged(params64):
    s = seq("short")
    a = encode(s, params64, TOY).values
    same_bucket = encode(s.with_padding(3), params64, TOY).values
    assert a.tobytes() == same_bucket.tobytes()
    # crossing into a longer bucket changes array shapes, not the maths
    longer = encode(s.with_padding(20), params64, TOY).values
    np.testing.assert_allclose(longer, a, rtol=0, atol=1e-12)


def test_rows_independent_of_batch_grouping():
    cfg = ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=48)
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(2)
    seqs = [seq("x" * int(n), cfg=cfg) for n in rng.integers(1, 40, size=9)]
    full = encode_batch(seqs, params, cfg).data
    for i, s in enumerate(seqs):
        assert encode_batch([s], params, cfg).data[0].tobytes() == full[i].tobytes()
    assert encode_batch(seqs[3:7], params, cfg).data.tobytes() == full[3:7].tobytes()


def test_causal_future_tokens_do_not_leak(params64):
    # the state at position k only sees the first k+1 tokens
    a = seq("abcdef")
    ids = a.ids.copy()
    ids[-2] = ord("z")
    from emforge.encoder import TokenSequence
    b = TokenSequence(ids=ids)
    mask = np.ones(len(ids), dtype=bool)
    mask[-2:] = False
    ea = encode(TokenSequence(ids=a.ids, mask=mask), params64, TOY).values
    eb = encode(TokenSequence(ids=b.ids, mask=mask), params64, TOY).values
    assert ea.tobytes() == eb.tobytes()


def test_overlong_and_mismatched_params(params64):
    with pytest.raises(ValueError, match="max_seq"):
        encode_batch([build_sequence("x" * 60, None, 4, 100)], params64, TOY)
    other = ModelConfig(hidden_dim=8, layers=2, heads=2, max_seq=48)
    with pytest.raises(ValueError, match="mismatch|shape"):
        encode(seq("a"), params64, other)


def test_pipeline_gradient_matches_finite_differences():
    from emforge.contrastive import TrainBatch, info_nce

    params = init_params(TOY, seed=4, dtype=np.float64)
    rng = np.random.default_rng(5)
    qs = [seq(t) for t in ("red", "green", "blue")]
    ts = [seq("[IMG]", rng.random((1, 8, 8))) for _ in range(3)]

    def loss(p):
        q = encode_batch(qs, p, TOY)
        t = encode_batch(ts, p, TOY)
        return info_nce(TrainBatch(q, t, None, 0.5)).loss

    probe = ["patch.w", "layers.1.wq", "layers.0.fc2", "final.gamma", "layers.1.ln2.beta"]
    wrt = {n: params[n] for n in probe}
    with GradTape() as tape:
        tape.watch(wrt)
        out = loss(params)
    grads = nx.grad(out, tape, wrt)
    for name in probe:
        base = params[name].data
        flat = rng.choice(base.size, size=min(6, base.size), replace=False)
        for k in flat:
            idx = np.unravel_index(k, base.shape)

            def f(v, idx=idx, name=name):
                arr = base.copy()
                arr[idx] = v[0]
                return loss({**params, name: Tensor(arr)}).item()

            num = central_diff(f, np.array([base[idx]]))[0]
            assert max_rel_err(grads[name][idx], num, floor=1e-4) <= 1e-4, (name, idx)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def test_lora_zero_adapter_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(4, 5)))
    a = Tensor(rng.normal(size=(2, 5)))
    b = Tensor(np.zeros((4, 2)))
    base = nx.matmul(x, nx.transpose(w), kernel="blas")
    assert lora_forward(x, w, a, b, 16.0, 2).data.tobytes() == base.data.tobytes()


def test_lora_rank_zero_rejected():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="r >= 1"):
        lora_forward(t, t, t, t, 1.0, 0)


def test_lora_matches_merged_weight():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 6)))
    w, a, b = (Tensor(rng.normal(size=s)) for s in ((4, 6), (8, 6), (4, 8)))
    merged = w.data + (16.0 / 8) * (b.data @ a.data)
    want = x.data @ merged.T
    got = lora_forward(x, w, a, b, 16.0, 8).data
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)


def test_lora_params_and_trainable():
    cfg = ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=48, lora_rank=8)
    p = init_params(cfg, seed=0)
    names = trainable_names(p, cfg)
    assert names and all(".lora_" in n for n in names)
    assert all(not p[n].data.any() for n in names if n.endswith("lora_B"))
    assert len(names) == 2 * (1 + 6 * cfg.layers)
    assert not any(".lora_" in n for n in init_params(TOY, seed=0))


def test_merge_with_zero_adapter_is_bitwise_base():
    cfg = ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=48, lora_rank=4)
    p = init_params(cfg, seed=0, dtype=np.float64)
    m = merge_lora(p, cfg)
    for name, t in m.items():
        assert t.data.tobytes() == p[name].data.tobytes()
    with pytest.raises(ValueError, match="already merged"):
        merge_lora(m, cfg)
    with pytest.raises(ValueError, match="LoRA configuration"):
        merge_lora(init_params(TOY), TOY)


def test_merge_preserves_embeddings():
    cfg = ModelConfig(hidden_dim=16, layers=2, heads=2, max_seq=48, lora_rank=8)
    p = init_params(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(3)
    p = {k: Tensor(rng.normal(0, 0.2, v.shape)) if k.endswith("lora_B") else v for k, v in p.items()}
    seqs = [seq("[IMG] q", rng.random((1, 8, 8)), cfg), seq("plain text", cfg=cfg)]
    a = encode_batch(seqs, p, cfg).data
    b = encode_batch(seqs, merge_lora(p, cfg), merged_config(cfg)).data
    assert np.max(np.abs(a - b)) <= 1e-6


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise():
    cfg = ModelConfig(hidden_dim=16, layers=1, heads=2, max_seq=32, lora_rank=2)
    p = init_params(cfg, seed=9)
    raw = dumps_checkpoint(p, cfg)
    assert raw[:4] == b"EMC1"
    q, cfg2 = loads_checkpoint(raw)
    assert cfg2 == cfg
    assert set(q) == set(p)
    for k in p:
        assert q[k].data.tobytes() == p[k].data.tobytes() and q[k].dtype == p[k].dtype
    assert dumps_checkpoint(q, cfg2) == raw


def test_checkpoint_layout():
    import struct

    cfg = ModelConfig(hidden_dim=4, layers=1, heads=1, max_seq=4)
    p = init_params(cfg, seed=0)
    fh = io.BytesIO(dumps_checkpoint(p, cfg))
    assert fh.read(4) == b"EMC1"
    (count,) = struct.unpack("<I", fh.read(4))
    assert count == len(p) + 1
    (n,) = struct.unpack("<I", fh.read(4))
    assert fh.read(n).decode() == CONFIG_KEY
    with pytest.raises(ValueError):
        loads_checkpoint(b"EMC0")
