import numpy as np
import pytest

from udit import blocks as B
from udit import tensor as T
from udit.attention import AttentionParams, self_attention
from udit.model import _build_block, _Init, preset
from udit.tensor import Tensor


def rnd(rng, *shape, s=0.3):
    return Tensor(rng.standard_normal(shape) * s)


def ln(x, g, b, eps=1e-6):
    mu = x.mean(1, keepdims=True)
    var = x.var(1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g[None, :, None, None] + b[None, :, None, None]


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def conv3x3(x, k):
    out = np.zeros_like(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    h, w = x.shape[2:]
    for i in range(3):
        for j in range(3):
            out += k[None, :, 0, i, j, None, None] * xp[:, :, i : i + h, j : j + w]
    return out


def lin(x, w, b):
    return np.einsum("oc,bchw->bohw", w, x) + b[None, :, None, None]


def random_block(rng, c=8, e=12, heads=2, s=2, dw=True):
    attn = AttentionParams(
        rnd(rng, 3 * c, c), rnd(rng, 3 * c), rnd(rng, c, c), rnd(rng, c), heads,
        log_tau=Tensor(np.log([0.3, 0.2])), cosine=True, rope=True, s=s,
        dw_kernel=rnd(rng, c, 1, 3, 3) if s == 2 else None,
    )
    ffn = B.FFNParams(
        rnd(rng, 4 * c, c), rnd(rng, 4 * c), rnd(rng, c, 4 * c), rnd(rng, c),
        dw_kernel=rnd(rng, 4 * c, 1, 3, 3) if dw else None, dw_shortcut=dw,
    )
    return B.UDiTBlockParams(
        Tensor(1 + rng.standard_normal(c) * 0.1), rnd(rng, c), Tensor(1 + rng.standard_normal(c) * 0.1), rnd(rng, c),
        attn, ffn, rnd(rng, 6 * c, e), rnd(rng, 6 * c),
    )


class TestFFN:
    def test_matches_numpy_composition(self):
        rng = np.random.default_rng(0)
        p = random_block(rng).ffn
        x = rng.standard_normal((2, 8, 4, 4))
        h = gelu(lin(x, p.fc1_w.data, p.fc1_b.data))
        h = conv3x3(h, p.dw_kernel.data) + h
        np.testing.assert_allclose(B.ffn_dwconv(Tensor(x), p).data, lin(h, p.fc2_w.data, p.fc2_b.data), atol=1e-12)

    def test_without_conv_is_plain_mlp(self):
        rng = np.random.default_rng(1)
        p = random_block(rng, dw=False).ffn
        x = rng.standard_normal((1, 8, 3, 3))
        expect = lin(gelu(lin(x, p.fc1_w.data, p.fc1_b.data)), p.fc2_w.data, p.fc2_b.data)
        np.testing.assert_allclose(B.ffn_dwconv(Tensor(x), p).data, expect, atol=1e-12)


class TestReparam:
    def test_merge_adds_centre_tap(self):
        k = np.random.default_rng(0).standard_normal((3, 1, 3, 3))
        m = B.reparam_merge(k).data
        d = m - k
        assert d[:, 0, 1, 1] == pytest.approx([1, 1, 1])
        d[:, 0, 1, 1] = 0
        np.testing.assert_array_equal(d, 0)

    def test_merge_rejects_bad_shape(self):
        with pytest.raises(ValueError, match="3, 3"):
            B.reparam_merge(np.zeros((3, 3, 3)))

    @pytest.mark.parametrize("s", [1, 2])
    def test_merged_block_matches_training_form(self, s):
        rng = np.random.default_rng(2)
        p = random_block(rng, s=s)
        x, emb = Tensor(rng.standard_normal((2, 8, 4, 4))), Tensor(rng.standard_normal((2, 12)))
        merged = B.merge_block(p)
        assert not merged.ffn.dw_shortcut
        np.testing.assert_allclose(B.udit_block(x, emb, merged).data, B.udit_block(x, emb, p).data, atol=1e-12)
        # the original is untouched
        assert p.ffn.dw_shortcut


class TestUDiTBlock:
    def test_identity_at_initialisation(self):
        cfg = preset("udit-t")
        p = _build_block(cfg, 1, _Init(0, np.float64))
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 64, 4, 4))
        emb = rng.standard_normal((2, cfg.embed_dim(1)))
        np.testing.assert_array_equal(B.udit_block(Tensor(x), Tensor(emb), p).data, x)

    def test_unit_gates_compose_attention_and_ffn(self):
        rng = np.random.default_rng(4)
        c = 8
        p = random_block(rng)
        p.ada_w = Tensor(np.zeros((6 * c, 12)))
        bias = np.zeros(6 * c)
        bias[2 * c : 3 * c] = 1.0  # gate1
        bias[5 * c :] = 1.0  # gate2
        p.ada_b = Tensor(bias)
        x = rng.standard_normal((2, c, 4, 4))
        emb = Tensor(rng.standard_normal((2, 12)))

        h = ln(x, p.norm1_g.data, p.norm1_b.data)
        x1 = x + self_attention(Tensor(h), p.attn).data
        h = ln(x1, p.norm2_g.data, p.norm2_b.data)
        expect = x1 + B.ffn_dwconv(Tensor(h), p.ffn).data
        np.testing.assert_allclose(B.udit_block(Tensor(x), emb, p).data, expect, atol=1e-12)

    def test_modulation_enters_as_one_plus_scale(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((2, 3, 2, 2))
        shift, scale = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        got = B.modulate(Tensor(z), Tensor(shift), Tensor(scale)).data
        np.testing.assert_allclose(got, z * (1 + scale[:, :, None, None]) + shift[:, :, None, None])

    def test_embedding_width_checked(self):
        p = random_block(np.random.default_rng(6))
        with pytest.raises(ValueError, match="embedding"):
            B.udit_block(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 5))), p)

    def test_adaln_width_checked(self):
        p = random_block(np.random.default_rng(7))
        with pytest.raises(ValueError, match="adaLN"):
            B.udit_block(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 12))), p)


class TestTransitions:
    def test_encoder_transition_oracle(self):
        rng = np.random.default_rng(8)
        c = 3
        p = B.DownParams(rnd(rng, c, 1, 3, 3), rnd(rng, 2 * c, 4 * c), rnd(rng, 2 * c))
        x = rng.standard_normal((2, c, 6, 4))
        y = conv3x3(x, p.dw_kernel.data) + x
        stacked = np.concatenate([y[:, :, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)], axis=1)
        got = B.encoder_transition(Tensor(x), p).data
        assert got.shape == (2, 2 * c, 3, 2)
        np.testing.assert_allclose(got, lin(stacked, p.proj_w.data, p.proj_b.data), atol=1e-12)

    def test_decoder_transition_oracle(self):
        rng = np.random.default_rng(9)
        c = 3
        p = B.UpParams(rnd(rng, 4 * c, 2 * c), rnd(rng, 4 * c), rnd(rng, c, 2 * c), rnd(rng, c))
        x = rng.standard_normal((2, 2 * c, 2, 3))
        skip = rng.standard_normal((2, c, 4, 6))
        up = lin(x, p.up_w.data, p.up_b.data)
        full = np.empty((2, c, 4, 6))
        for dy in (0, 1):
            for dx in (0, 1):
                ph = dy * 2 + dx
                full[:, :, dy::2, dx::2] = up[:, ph * c : (ph + 1) * c]
        expect = lin(np.concatenate([skip, full], axis=1), p.fuse_w.data, p.fuse_b.data)
        np.testing.assert_allclose(B.decoder_transition(Tensor(x), Tensor(skip), p).data, expect, atol=1e-12)

    def test_skip_shape_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        p = B.UpParams(rnd(rng, 12, 6), rnd(rng, 12), rnd(rng, 3, 6), rnd(rng, 3))
        with pytest.raises(ValueError, match="skip"):
            B.decoder_transition(Tensor(np.zeros((1, 6, 2, 2))), Tensor(np.zeros((1, 3, 2, 2))), p)

    def test_encoder_rejects_odd_extent(self):
        rng = np.random.default_rng(11)
        p = B.DownParams(rnd(rng, 2, 1, 3, 3), rnd(rng, 4, 8), rnd(rng, 4))
        with pytest.raises(ValueError, match="even"):
            B.encoder_transition(Tensor(np.zeros((1, 2, 3, 4))), p)

    def test_transitions_invert_shapes(self):
        rng = np.random.default_rng(12)
        c = 4
        down = B.DownParams(rnd(rng, c, 1, 3, 3), rnd(rng, 2 * c, 4 * c), rnd(rng, 2 * c))
        up = B.UpParams(rnd(rng, 4 * c, 2 * c), rnd(rng, 4 * c), rnd(rng, c, 2 * c), rnd(rng, c))
        x = Tensor(rng.standard_normal((2, c, 8, 8)))
        assert B.decoder_transition(B.encoder_transition(x, down), x, up).shape == x.shape


def test_blocks_follow_precision():
    with T.precision("float32"):
        p = _build_block(preset("udit-t"), 0, _Init(0, np.float32))
        out = B.udit_block(Tensor(np.ones((1, 32, 8, 8), np.float32)), Tensor(np.ones((1, 96), np.float32)), p)
    assert out.dtype == np.float32
