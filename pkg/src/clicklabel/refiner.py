"""The click-conditioned mask refiner.

A shallow, analytically differentiable network that maps a residual
tensor, rasterized click maps, the previous mask, and a prompt feature
to a per-pixel anomaly probability:

1. per-cell linear embedding of the residual,
2. additive guidance from cell-downsampled click maps (max) and the
   previous mask (mean),
3. additive pixel-word attention increment,
4. two mixing layers (depthwise 3x3 spatial kernel, channel mixer,
   ReLU),
5. linear head to per-cell logits,
6. bilinear upsampling of the logits to image resolution, then sigmoid.

The "seg" variant zeroes the click maps internally: its output is
invariant to whatever clicks the caller passes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from clicklabel.attention import (
    AttentionParams,
    pixel_word_attention,
    pixel_word_attention_backward,
)
from clicklabel.clicks import ClickMaps
from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.images import bilinear_resize, bilinear_resize_transpose, cell_max, cell_mean
from clicklabel.prompts import PromptFeature
from clicklabel.residual import ResidualTensor

ADWT_MAGIC = b"ADWT"
ADWT_VERSION = 1

VARIANTS = ("click", "seg")

DEFAULT_D_E = 64
DEFAULT_D_A = 32


@dataclass
class RefinerParams:
    """All learnable tensors of the refiner, in serialization order."""

    variant: str
    embed_weight: np.ndarray   # (d_f, d_e)
    embed_bias: np.ndarray     # (d_e,)
    guide_weight: np.ndarray   # (3, d_e): positive map, negative map, prev mask
    attn_query: np.ndarray     # (d_e, d_a)
    attn_key: np.ndarray       # (Q, d_a)
    attn_value: np.ndarray     # (Q, d_a)
    attn_out: np.ndarray       # (d_a, d_e)
    attn_gate: np.ndarray      # (d_e, d_e)
    mix1_kernel: np.ndarray    # (3, 3, d_e)
    mix1_weight: np.ndarray    # (d_e, d_e)
    mix1_bias: np.ndarray      # (d_e,)
    mix2_kernel: np.ndarray
    mix2_weight: np.ndarray
    mix2_bias: np.ndarray
    head_weight: np.ndarray    # (d_e,)
    head_bias: np.ndarray      # (1,)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")

    @property
    def d_f(self) -> int:
        return self.embed_weight.shape[0]

    @property
    def d_e(self) -> int:
        return self.embed_weight.shape[1]

    @property
    def d_a(self) -> int:
        return self.attn_query.shape[1]

    @property
    def q(self) -> int:
        return self.attn_key.shape[0]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "variant"]

    def attention_params(self) -> AttentionParams:
        return AttentionParams(
            w_query=self.attn_query, w_key=self.attn_key, w_value=self.attn_value,
            w_out=self.attn_out, w_gate=self.attn_gate,
        )

    def copy(self, variant: str | None = None) -> "RefinerParams":
        kwargs = {name: arr.copy() for name, arr in self.tensors()}
        return RefinerParams(variant=variant or self.variant, **kwargs)

    def assert_finite(self) -> None:
        for name, arr in self.tensors():
            if not np.isfinite(arr).all():
                raise InvalidInputError(f"parameter {name} contains non-finite values")


def _tensor_shapes(d_f: int, d_e: int, d_a: int, q: int) -> list[tuple[str, tuple[int, ...], int]]:
    # (name, shape, fan_in); fan_in 0 marks a zero-initialized bias
    return [
        ("embed_weight", (d_f, d_e), d_f),
        ("embed_bias", (d_e,), 0),
        ("guide_weight", (3, d_e), 3),
        ("attn_query", (d_e, d_a), d_e),
        ("attn_key", (q, d_a), q),
        ("attn_value", (q, d_a), q),
        ("attn_out", (d_a, d_e), d_a),
        ("attn_gate", (d_e, d_e), d_e),
        ("mix1_kernel", (3, 3, d_e), 9),
        ("mix1_weight", (d_e, d_e), d_e),
        ("mix1_bias", (d_e,), 0),
        ("mix2_kernel", (3, 3, d_e), 9),
        ("mix2_weight", (d_e, d_e), d_e),
        ("mix2_bias", (d_e,), 0),
        ("head_weight", (d_e,), d_e),
        ("head_bias", (1,), 0),
    ]


def init_params(rng: np.random.Generator, d_f: int, d_e: int = DEFAULT_D_E,
                d_a: int = DEFAULT_D_A, q: int = 64,
                variant: str = "click") -> RefinerParams:
    """Uniform(-s, s) weights with s = sqrt(1/fan_in); biases zero.

    Tensors are drawn in declaration order, so a seed pins every value.
    """
    kwargs = {}
    for name, shape, fan_in in _tensor_shapes(d_f, d_e, d_a, q):
        if fan_in == 0:
            kwargs[name] = np.zeros(shape, dtype=np.float64)
        else:
            s = np.sqrt(1.0 / fan_in)
            kwargs[name] = rng.uniform(-s, s, size=shape)
    return RefinerParams(variant=variant, **kwargs)


def zeros_like_params(params: RefinerParams) -> RefinerParams:
    return RefinerParams(
        variant=params.variant,
        **{name: np.zeros_like(arr) for name, arr in params.tensors()},
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _depthwise3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # zero-padded cross-correlation with one 3x3 kernel per channel
    h, w, _ = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x)
    for u in range(3):
        for vv in range(3):
            out += padded[u:u + h, vv:vv + w, :] * kernel[u, vv, :]
    return out


def _depthwise3x3_backward(d_out: np.ndarray, x: np.ndarray,
                           kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w, c = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    d_padded = np.zeros_like(padded)
    d_kernel = np.zeros_like(kernel)
    for u in range(3):
        for vv in range(3):
            d_padded[u:u + h, vv:vv + w, :] += d_out * kernel[u, vv, :]
            d_kernel[u, vv, :] = (d_out * padded[u:u + h, vv:vv + w, :]).sum(axis=(0, 1))
    return d_padded[1:-1, 1:-1, :], d_kernel


def _prepare_inputs(residual: ResidualTensor | np.ndarray, clicks: ClickMaps | None,
                    m_prev: np.ndarray, v: PromptFeature, params: RefinerParams):
    r = residual.values if isinstance(residual, ResidualTensor) else np.asarray(residual)
    if r.ndim != 3 or r.shape[2] != params.d_f:
        raise InvalidInputError(
            f"residual dims {r.shape} incompatible with d_f={params.d_f}"
        )
    h_f, w_f = r.shape[:2]
    m_prev = np.asarray(m_prev, dtype=np.float64)
    if m_prev.ndim != 2:
        raise InvalidInputError("previous mask must be 2-dimensional")
    hh, ww = m_prev.shape
    if params.variant == "seg" or clicks is None:
        pos = np.zeros((hh, ww))
        neg = np.zeros((hh, ww))
    else:
        if clicks.shape != (hh, ww):
            raise InvalidInputError("click maps and previous mask dims differ")
        pos = clicks.positive.astype(np.float64)
        neg = clicks.negative.astype(np.float64)
    if v.q != params.q:
        raise InvalidInputError(f"prompt feature Q={v.q} != params Q={params.q}")
    guidance = np.stack([
        cell_max(pos, h_f, w_f),
        cell_max(neg, h_f, w_f),
        cell_mean(m_prev, h_f, w_f),
    ], axis=2)
    return r.astype(np.float64), guidance, (hh, ww)


def _forward_core(r: np.ndarray, guidance: np.ndarray, v: PromptFeature,
                  params: RefinerParams, out_hw: tuple[int, int]):
    h_f, w_f, _ = r.shape
    n = h_f * w_f
    e0 = r.reshape(n, params.d_f) @ params.embed_weight + params.embed_bias
    e1 = e0 + guidance.reshape(n, 3) @ params.guide_weight
    inc, att_cache = pixel_word_attention(e1, v, params.attention_params(), with_cache=True)
    e2 = (e1 + inc).reshape(h_f, w_f, params.d_e)

    c1 = _depthwise3x3(e2, params.mix1_kernel)
    z1 = c1 @ params.mix1_weight + params.mix1_bias
    a1 = np.maximum(z1, 0.0)
    c2 = _depthwise3x3(a1, params.mix2_kernel)
    z2 = c2 @ params.mix2_weight + params.mix2_bias
    a2 = np.maximum(z2, 0.0)

    logit_cells = a2 @ params.head_weight + params.head_bias[0]
    logits = bilinear_resize(logit_cells, out_hw[0], out_hw[1])
    mask = _sigmoid(logits)
    cache = dict(r=r, guidance=guidance, e1=e1, att_cache=att_cache, e2=e2,
                 c1=c1, z1=z1, a1=a1, c2=c2, z2=z2, a2=a2,
                 logit_cells=logit_cells, mask=mask)
    return mask, cache


def forward(residual: ResidualTensor | np.ndarray, clicks: ClickMaps | None,
            m_prev: np.ndarray, v: PromptFeature,
            params: RefinerParams) -> np.ndarray:
    """Predict an (H, W) anomaly-probability mask. Pure and deterministic."""
    r, guidance, out_hw = _prepare_inputs(residual, clicks, m_prev, v, params)
    mask, _ = _forward_core(r, guidance, v, params, out_hw)
    return mask


def forward_backward(residual: ResidualTensor | np.ndarray, clicks: ClickMaps | None,
                     m_prev: np.ndarray, v: PromptFeature, params: RefinerParams,
                     d_mask: np.ndarray) -> tuple[np.ndarray, RefinerParams]:
    """Forward pass plus exact reverse-mode gradients for every parameter.

    ``d_mask`` is the upstream gradient of the loss w.r.t. the output
    mask; the returned gradient container mirrors RefinerParams.
    """
    r, guidance, out_hw = _prepare_inputs(residual, clicks, m_prev, v, params)
    mask, cache = _forward_core(r, guidance, v, params, out_hw)
    grads = _backward_from_cache(cache, params, d_mask)
    return mask, grads


def forward_loss_backward(residual, clicks, m_prev, v, params, loss_fn):
    """Single forward pass, caller-supplied loss, cached backward.

    ``loss_fn(mask) -> (loss, d_mask)``. Avoids re-running the forward
    pass when the upstream gradient depends on the prediction itself.
    """
    r, guidance, out_hw = _prepare_inputs(residual, clicks, m_prev, v, params)
    mask, cache = _forward_core(r, guidance, v, params, out_hw)
    loss, d_mask = loss_fn(mask)
    grads = _backward_from_cache(cache, params, d_mask)
    return mask, loss, grads


def _backward_from_cache(cache: dict, params: RefinerParams,
                         d_mask: np.ndarray) -> RefinerParams:
    mask = cache["mask"]
    d_mask = np.asarray(d_mask, dtype=np.float64)
    if d_mask.shape != mask.shape:
        raise InvalidInputError("upstream gradient dims differ from the mask")

    h_f, w_f = cache["logit_cells"].shape
    n = h_f * w_f
    d_e = params.d_e

    d_logits = d_mask * mask * (1.0 - mask)
    d_cells = bilinear_resize_transpose(d_logits, h_f, w_f)

    a2_flat = cache["a2"].reshape(n, d_e)
    d_head_weight = a2_flat.T @ d_cells.reshape(n)
    d_head_bias = np.array([d_cells.sum()])
    d_a2 = (d_cells[..., None] * params.head_weight).reshape(h_f, w_f, d_e)

    d_z2 = d_a2 * (cache["z2"] > 0)
    d_mix2_weight = cache["c2"].reshape(n, d_e).T @ d_z2.reshape(n, d_e)
    d_mix2_bias = d_z2.sum(axis=(0, 1))
    d_c2 = d_z2.reshape(n, d_e) @ params.mix2_weight.T
    d_a1, d_mix2_kernel = _depthwise3x3_backward(
        d_c2.reshape(h_f, w_f, d_e), cache["a1"], params.mix2_kernel
    )

    d_z1 = d_a1 * (cache["z1"] > 0)
    d_mix1_weight = cache["c1"].reshape(n, d_e).T @ d_z1.reshape(n, d_e)
    d_mix1_bias = d_z1.sum(axis=(0, 1))
    d_c1 = d_z1.reshape(n, d_e) @ params.mix1_weight.T
    d_e2, d_mix1_kernel = _depthwise3x3_backward(
        d_c1.reshape(h_f, w_f, d_e), cache["e2"], params.mix1_kernel
    )

    d_e2_flat = d_e2.reshape(n, d_e)
    d_pixel, att_grads = pixel_word_attention_backward(
        d_e2_flat, params.attention_params(), cache["att_cache"]
    )
    d_e1 = d_e2_flat + d_pixel

    d_guide_weight = cache["guidance"].reshape(n, 3).T @ d_e1
    d_embed_weight = cache["r"].reshape(n, params.d_f).T @ d_e1
    d_embed_bias = d_e1.sum(axis=0)

    return RefinerParams(
        variant=params.variant,
        embed_weight=d_embed_weight,
        embed_bias=d_embed_bias,
        guide_weight=d_guide_weight,
        attn_query=att_grads.w_query,
        attn_key=att_grads.w_key,
        attn_value=att_grads.w_value,
        attn_out=att_grads.w_out,
        attn_gate=att_grads.w_gate,
        mix1_kernel=d_mix1_kernel,
        mix1_weight=d_mix1_weight,
        mix1_bias=d_mix1_bias,
        mix2_kernel=d_mix2_kernel,
        mix2_weight=d_mix2_weight,
        mix2_bias=d_mix2_bias,
        head_weight=d_head_weight,
        head_bias=d_head_bias,
    )


def save_params(params: RefinerParams, path: str | Path) -> None:
    """Write parameters in the ADWT format (f32, trailing CRC32).

    The header carries [version, d_f, d_e, d_a, variant, Q]; Q is needed
    to reconstruct the word-projection shapes on load.
    """
    variant_code = VARIANTS.index(params.variant)
    header = struct.pack(
        "<IIIIII", ADWT_VERSION, params.d_f, params.d_e, params.d_a,
        variant_code, params.q,
    )
    payload = b"".join(arr.astype("<f4").tobytes(order="C") for _, arr in params.tensors())
    body = header + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(ADWT_MAGIC + body + struct.pack("<I", crc))


def load_params(path: str | Path) -> RefinerParams:
    """Read an ADWT file; raises FormatError naming the offending field."""
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise FormatError("truncated header")
    if raw[:4] != ADWT_MAGIC:
        raise FormatError("bad magic")
    body, tail = raw[4:-4], raw[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise FormatError("crc mismatch")
    version, d_f, d_e, d_a, variant_code, q = struct.unpack("<IIIIII", body[:24])
    if version != ADWT_VERSION:
        raise FormatError(f"version {version} unsupported")
    if variant_code >= len(VARIANTS):
        raise FormatError(f"variant code {variant_code} unknown")
    shapes = _tensor_shapes(d_f, d_e, d_a, q)
    expected = sum(int(np.prod(shape)) for _, shape, _ in shapes) * 4
    if len(body) - 24 != expected:
        raise FormatError(f"payload size {len(body) - 24} does not match header dims")
    kwargs = {}
    pos = 24
    for name, shape, _ in shapes:
        count = int(np.prod(shape)) * 4
        kwargs[name] = np.frombuffer(body[pos:pos + count], dtype="<f4").astype(
            np.float64
        ).reshape(shape)
        pos += count
    return RefinerParams(variant=VARIANTS[variant_code], **kwargs)


def save_checkpoint(params: RefinerParams, path: str | Path, step: int,
                    loss: float, config: dict) -> None:
    """Params file plus a JSON sidecar {step, loss, config hash, config}."""
    save_params(params, path)
    config_json = json.dumps(config, sort_keys=True)
    sidecar = {
        "step": step,
        "loss": loss,
        "config_hash": f"{zlib.crc32(config_json.encode()):08x}",
        "config": config,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_checkpoint_config(path: str | Path) -> dict:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FormatError(f"missing checkpoint sidecar {sidecar}")
    return json.loads(sidecar.read_text(encoding="utf-8"))
