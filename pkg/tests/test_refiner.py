import numpy as np
import pytest

from clicklabel.clicks import Click, rasterize
from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.prompts import TextEmbedderConfig, embed_prompt
from clicklabel.refiner import (
    forward,
    forward_backward,
    init_params,
    load_params,
    save_params,
    zeros_like_params,
)

D_F, D_E, D_A, Q = 8, 8, 4, 12
CFG = TextEmbedderConfig(kind="hashed-toy", q=Q, z=5, seed=3)


def make_inputs(rng, grid=8, img=32):
    residual = rng.normal(size=(grid, grid, D_F))
    clicks = rasterize(
        [Click(int(rng.integers(img)), int(rng.integers(img)), 1),
         Click(int(rng.integers(img)), int(rng.integers(img)), 0)],
        img, img, radius=2,
    )
    m_prev = rng.random((img, img))
    v = embed_prompt("a dark scratch mark", CFG)
    return residual, clicks, m_prev, v


def scalar_forward_oracle(residual, clicks, m_prev, v, p):
    """Independent per-element reimplementation of the forward pass."""
    grid = residual.shape[0]
    img = m_prev.shape[0]
    cell = img // grid
    d_e = p.d_e

    pos = clicks.positive.astype(float) if p.variant == "click" else np.zeros_like(m_prev)
    neg = clicks.negative.astype(float) if p.variant == "click" else np.zeros_like(m_prev)

    e = np.zeros((grid, grid, d_e))
    for y in range(grid):
        for x in range(grid):
            vec = np.zeros(d_e)
            for j in range(d_e):
                for i in range(p.d_f):
                    vec[j] += p.embed_weight[i, j] * residual[y, x, i]
                vec[j] += p.embed_bias[j]
            block = (slice(y * cell, (y + 1) * cell), slice(x * cell, (x + 1) * cell))
            g = [pos[block].max(), neg[block].max(), m_prev[block].mean()]
            for j in range(d_e):
                for i in range(3):
                    vec[j] += p.guide_weight[i, j] * g[i]
            e[y, x] = vec

    # attention increment per cell
    keys = v.matrix.T @ p.attn_key
    values = v.matrix.T @ p.attn_value
    for y in range(grid):
        for x in range(grid):
            q = e[y, x] @ p.attn_query
            scores = np.full(v.z, -np.inf)
            for z in range(v.z):
                if v.valid[z]:
                    scores[z] = q @ keys[z] / np.sqrt(p.d_a)
            exps = np.exp(scores - scores[v.valid].max())
            exps[~v.valid] = 0.0
            att = exps / exps.sum()
            ctx = att @ values
            gate = 1.0 / (1.0 + np.exp(-(e[y, x] @ p.attn_gate)))
            e[y, x] = e[y, x] + gate * (ctx @ p.attn_out)

    def mixing(x_in, kernel, weight, bias):
        h, w, c = x_in.shape
        conv = np.zeros_like(x_in)
        for y in range(h):
            for xx in range(w):
                for ch in range(c):
                    acc = 0.0
                    for u in (-1, 0, 1):
                        for vv in (-1, 0, 1):
                            yy, xxx = y + u, xx + vv
                            if 0 <= yy < h and 0 <= xxx < w:
                                acc += x_in[yy, xxx, ch] * kernel[u + 1, vv + 1, ch]
                    conv[y, xx, ch] = acc
        out = np.maximum(conv @ weight + bias, 0.0)
        return out

    a1 = mixing(e, p.mix1_kernel, p.mix1_weight, p.mix1_bias)
    a2 = mixing(a1, p.mix2_kernel, p.mix2_weight, p.mix2_bias)
    logit_cells = a2 @ p.head_weight + p.head_bias[0]

    logits = np.zeros((img, img))
    for y in range(img):
        sy = min(max((y + 0.5) * grid / img - 0.5, 0.0), grid - 1.0)
        y0, wy = int(np.floor(sy)), 0.0
        y1 = min(y0 + 1, grid - 1)
        wy = sy - y0
        for x in range(img):
            sx = min(max((x + 0.5) * grid / img - 0.5, 0.0), grid - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, grid - 1)
            wx = sx - x0
            logits[y, x] = (
                logit_cells[y0, x0] * (1 - wy) * (1 - wx)
                + logit_cells[y0, x1] * (1 - wy) * wx
                + logit_cells[y1, x0] * wy * (1 - wx)
                + logit_cells[y1, x1] * wy * wx
            )
    return 1.0 / (1.0 + np.exp(-logits))


class TestInitParams:
    def test_same_seed_identical(self):
        a = init_params(np.random.default_rng(5), D_F, D_E, D_A, Q)
        b = init_params(np.random.default_rng(5), D_F, D_E, D_A, Q)
        for (_, x), (_, y) in zip(a.tensors(), b.tensors()):
            assert np.array_equal(x, y)

    def test_biases_zero(self):
        p = init_params(np.random.default_rng(0), D_F, D_E, D_A, Q)
        assert np.all(p.embed_bias == 0)
        assert np.all(p.mix1_bias == 0)
        assert np.all(p.mix2_bias == 0)
        assert np.all(p.head_bias == 0)

    def test_different_seeds_differ(self):
        a = init_params(np.random.default_rng(1), D_F, D_E, D_A, Q)
        b = init_params(np.random.default_rng(2), D_F, D_E, D_A, Q)
        assert any(not np.array_equal(x, y)
                   for (_, x), (_, y) in zip(a.tensors(), b.tensors()))

    def test_bound_scale(self):
        p = init_params(np.random.default_rng(3), D_F, D_E, D_A, Q)
        assert np.abs(p.embed_weight).max() <= np.sqrt(1.0 / D_F)
        assert np.abs(p.mix1_kernel).max() <= np.sqrt(1.0 / 9.0)


class TestForward:
    def test_zero_params_give_half(self, rng):
        p = zeros_like_params(init_params(rng, D_F, D_E, D_A, Q))
        residual, clicks, m_prev, v = make_inputs(np.random.default_rng(0))
        out = forward(residual, clicks, m_prev, v, p)
        assert np.allclose(out, 0.5)

    def test_seg_variant_ignores_clicks(self, rng):
        p = init_params(rng, D_F, D_E, D_A, Q, variant="seg")
        residual, clicks, m_prev, v = make_inputs(np.random.default_rng(1))
        a = forward(residual, clicks, m_prev, v, p)
        b = forward(residual, None, m_prev, v, p)
        heavy = rasterize([Click(5, 5, 1)], 32, 32, radius=10)
        c = forward(residual, heavy, m_prev, v, p)
        assert np.array_equal(a, b)
        assert np.array_equal(a, c)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        p = init_params(rng, D_F, D_E, D_A, Q)
        residual, clicks, m_prev, v = make_inputs(rng)
        got = forward(residual, clicks, m_prev, v, p)
        expected = scalar_forward_oracle(residual, clicks, m_prev, v, p)
        assert np.abs(got - expected).max() < 1e-10

    def test_output_range_and_determinism(self, rng):
        p = init_params(rng, D_F, D_E, D_A, Q)
        residual, clicks, m_prev, v = make_inputs(rng)
        a = forward(residual, clicks, m_prev, v, p)
        b = forward(residual, clicks, m_prev, v, p)
        assert np.array_equal(a, b)
        assert np.all((a > 0) & (a < 1))
        assert np.isfinite(a).all()

    def test_dim_mismatch_rejected(self, rng):
        p = init_params(rng, D_F, D_E, D_A, Q)
        residual, clicks, m_prev, v = make_inputs(rng)
        with pytest.raises(InvalidInputError):
            forward(residual[:, :, :4], clicks, m_prev, v, p)


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / denom


def fd_param_grads(residual, clicks, m_prev, v, params, upstream, h=1e-4):
    out = {}
    for name, arr in params.tensors():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            up = float((forward(residual, clicks, m_prev, v, params) * upstream).sum())
            arr[i] = orig - h
            down = float((forward(residual, clicks, m_prev, v, params) * upstream).sum())
            arr[i] = orig
            fd[i] = (up - down) / (2 * h)
            it.iternext()
        out[name] = fd
    return out


class TestForwardBackward:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2024)
        p = init_params(rng, D_F, d_e=6, d_a=3, q=Q)
        residual, clicks, m_prev, v = make_inputs(rng, grid=6, img=12)
        upstream = rng.normal(size=(12, 12))
        _, grads = forward_backward(residual, clicks, m_prev, v, p, upstream)
        fd = fd_param_grads(residual, clicks, m_prev, v, p, upstream)
        for name, arr in grads.tensors():
            assert relative_error(arr, fd[name]) < 1e-4, name

    def test_zero_upstream_zero_grads(self, rng):
        p = init_params(rng, D_F, D_E, D_A, Q)
        residual, clicks, m_prev, v = make_inputs(rng)
        _, grads = forward_backward(residual, clicks, m_prev, v, p,
                                    np.zeros((32, 32)))
        for name, arr in grads.tensors():
            assert np.all(arr == 0), name

    def test_head_bias_gradient_chain_rule(self):
        # 2x2 grid, 4x4 image: d(loss)/d(b_h) = sum(upstream * sigmoid')
        rng = np.random.default_rng(8)
        p = init_params(rng, D_F, d_e=4, d_a=2, q=Q)
        residual = rng.normal(size=(2, 2, D_F))
        m_prev = rng.random((4, 4))
        v = embed_prompt("spot", CFG)
        upstream = rng.normal(size=(4, 4))
        mask, grads = forward_backward(residual, None, m_prev, v, p, upstream)
        expected = (upstream * mask * (1 - mask)).sum()
        assert np.allclose(grads.head_bias[0], expected, rtol=1e-12)


class TestParamsFile:
    def test_round_trip(self, tmp_path, rng):
        p = init_params(rng, D_F, D_E, D_A, Q, variant="seg")
        path = tmp_path / "model.adwt"
        save_params(p, path)
        loaded = load_params(path)
        assert loaded.variant == "seg"
        for (name, a), (_, b) in zip(p.tensors(), loaded.tensors()):
            assert np.allclose(a, b, atol=1e-7), name
        # float32 storage: second save is byte-identical
        save_params(loaded, tmp_path / "again.adwt")
        assert (tmp_path / "model.adwt").read_bytes() == (tmp_path / "again.adwt").read_bytes()

    def test_crc_detects_corruption(self, tmp_path, rng):
        p = init_params(rng, D_F, D_E, D_A, Q)
        path = tmp_path / "model.adwt"
        save_params(p, path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="crc"):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.adwt"
        p.write_bytes(b"JUNK" + b"\0" * 64)
        with pytest.raises(FormatError, match="bad magic"):
            load_params(p)
