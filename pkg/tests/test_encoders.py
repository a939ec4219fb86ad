import numpy as np
import pytest

from ahnpl import encoders as enc

DIMS = enc.EncoderDims(vocab_size=7, image_dim=5, hidden_dim=4, embed_dim=3, max_len=6)
BAG = enc.EncoderDims(vocab_size=7, image_dim=5, hidden_dim=4, embed_dim=3, max_len=6, position_aware=False)


def text_oracle(p, ids):
    h = np.zeros(p.dims.hidden_dim)
    for pos, t in enumerate(ids):
        row = p["text_embed"][t].copy()
        if p.dims.position_aware:
            row *= p["text_pos"][pos]
        h += row
    h /= len(ids)
    return np.array([sum(h[i] * p["text_proj"][i, j] for i in range(len(h))) for j in range(p.dims.embed_dim)]) + p["text_bias"]


def test_init_determinism_and_shapes():
    a, b = enc.init_params(0, DIMS), enc.init_params(0, DIMS)
    c = enc.init_params(1, DIMS)
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])
        assert a[name].shape == enc.EncoderParams.shapes(DIMS)[name]
    assert not np.array_equal(a["text_proj"], c["text_proj"])
    assert not a["text_bias"].any() and not a["image_bias"].any()
    assert "text_pos" not in enc.init_params(0, BAG).names()


def test_single_token_caption():
    p = enc.init_params(2, BAG)
    np.testing.assert_allclose(enc.encode_text(p, [3]), p["text_embed"][3] @ p["text_proj"] + p["text_bias"], atol=1e-14)


def test_bag_encoder_ignores_order():
    p = enc.init_params(2, BAG)
    np.testing.assert_array_equal(enc.encode_text(p, [1, 2, 5]), enc.encode_text(p, [5, 1, 2]))


def test_position_aware_encoder_sees_order():
    p = enc.init_params(2, DIMS)
    assert not np.allclose(enc.encode_text(p, [1, 2, 5]), enc.encode_text(p, [5, 1, 2]))


@pytest.mark.parametrize("dims", [DIMS, BAG])
def test_text_matches_loop_oracle(dims, rng):
    p = enc.init_params(4, dims)
    captions = [rng.integers(0, 7, size=int(rng.integers(1, 7))) for _ in range(5)]
    out, _ = enc.encode_texts(p, captions)
    for row, ids in zip(out, captions):
        np.testing.assert_allclose(row, text_oracle(p, ids), atol=1e-12)


def test_image_encoder_examples(rng):
    p = enc.init_params(0, DIMS)
    p.arrays["image_bias"] = rng.standard_normal(3)
    np.testing.assert_array_equal(enc.encode_image(p, np.zeros(5)), p["image_bias"])
    ident = enc.EncoderDims(vocab_size=2, image_dim=3, hidden_dim=2, embed_dim=3)
    q = enc.init_params(0, ident)
    q.arrays["image_proj"] = np.eye(3)
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(enc.encode_image(q, x), x)
    x = rng.standard_normal((4, 5))
    np.testing.assert_allclose(enc.encode_images(p, x), [[sum(r[i] * p["image_proj"][i, j] for i in range(5)) for j in range(3)] for r in x] + p["image_bias"], atol=1e-12)


def test_with_positions_preserves_function():
    bag = enc.init_params(3, BAG)
    pos = enc.with_positions(bag, max_len=6)
    ids = [np.array([1, 2, 5]), np.array([6])]
    np.testing.assert_array_equal(enc.encode_texts(bag, ids)[0], enc.encode_texts(pos, ids)[0])
    with pytest.raises(ValueError):
        enc.with_positions(pos, 6)


def test_encoder_input_validation():
    p = enc.init_params(0, DIMS)
    with pytest.raises(ValueError):
        enc.encode_texts(p, [np.arange(7) % 7])
    with pytest.raises(IndexError):
        enc.encode_text(p, [9])
    with pytest.raises(ValueError):
        enc.encode_images(p, np.zeros((2, 4)))
    with pytest.raises(KeyError):
        enc.Vocabulary(["a", "b"]).encode(["c"])


def test_backward_matches_finite_differences(rng):
    p = enc.init_params(5, DIMS)
    captions = [np.array([1, 1, 4]), np.array([0, 6])]
    feats = rng.standard_normal((2, 5))
    w_t, w_i = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))

    def f(q):
        return float(np.sum(enc.encode_texts(q, captions)[0] * w_t) + np.sum(enc.encode_images(q, feats) * w_i))

    _, cache = enc.encode_texts(p, captions)
    grads = enc.backward(p, cache, w_t, feats, w_i)
    for name in p.names():
        num = np.zeros_like(p[name])
        for idx in np.ndindex(p[name].shape):
            q = p.copy()
            q.arrays[name][idx] += 1e-6
            hi = f(q)
            q.arrays[name][idx] -= 2e-6
            num[idx] = (hi - f(q)) / 2e-6
        np.testing.assert_allclose(grads[name], num, atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    p = enc.init_params(9, DIMS)
    vocab = enc.Vocabulary(["x", "y", "z"])
    enc.save_checkpoint(tmp_path / "c.txt", p, vocab, 0.4321, {"note": 1})
    q, v, a, extra = enc.load_checkpoint(tmp_path / "c.txt")
    assert q.dims == p.dims and v == vocab and a == 0.4321 and extra == {"note": 1}
    for name in p.names():
        np.testing.assert_array_equal(q[name], p[name])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.txt").write_text("hello\n")
    with pytest.raises(ValueError):
        enc.load_checkpoint(tmp_path / "bad.txt")
