"""Training: label construction, normalized focal loss, and the loops.

The click model is trained against ground-truth masks with simulated
corrective clicks. The segmentation model is trained on pseudo labels
produced by the click model: click-site confidence is strengthened,
the label is randomly quantized into a {0, 0.5, 1} map whose 0.5 band
is excluded from the loss entirely ("label abandon"), and the loop runs
in the same iterative-click style with at most three iterations.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from clicklabel.clicks import Click, rasterize, simulate_next_click
from clicklabel.errors import DegenerateBatchError, InvalidInputError
from clicklabel.optim import OptimizerState, adamw_step
from clicklabel.prompts import PromptFeature, sample_training_feature
from clicklabel.refiner import (
    RefinerParams,
    forward,
    forward_loss_backward,
    init_params,
)
from clicklabel.residual import ResidualTensor

LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters with the published defaults."""

    lr: float = 3e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    gamma: float = 2.0
    strengthen_radius: float = 5.0
    max_clicks: int = 20          # click-variant simulated clicks per sample
    seg_max_clicks: int = 3       # seg-variant iterations per sample
    pseudo_clicks: int = 5        # clicks used to build the pseudo label
    delta_max: float = 0.1
    epochs: int = 1
    seed: int = 0
    r_click: int | None = None    # None: scale 5px/512 by image height
    d_e: int = 64
    d_a: int = 32

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise InvalidInputError("lr must be > 0")
        if self.gamma < 0:
            raise InvalidInputError("gamma must be >= 0")
        if self.strengthen_radius < 0:
            raise InvalidInputError("strengthen radius must be >= 0")


def strengthen_clicks(mask: np.ndarray, positive: list[Click], negative: list[Click],
                      d: float) -> np.ndarray:
    """Force label confidence near click sites.

    Pixels strictly within distance ``d`` of a positive click become 1;
    otherwise, within ``d`` of a negative click, 0; all other pixels keep
    their value. The positive rule is evaluated first, so a pixel close
    to both polarities ends up positive. Idempotent.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    out = mask.copy()

    def near(clicks: list[Click]) -> np.ndarray:
        hit = np.zeros((h, w), dtype=bool)
        yy, xx = np.ogrid[:h, :w]
        for c in clicks:
            if not (0 <= c.x < w and 0 <= c.y < h):
                raise InvalidInputError(f"click ({c.x}, {c.y}) out of range")
            hit |= (yy - c.y) ** 2 + (xx - c.x) ** 2 < d * d
        return hit

    near_neg = near(negative)
    near_pos = near(positive)
    out[near_neg] = 0.0
    out[near_pos] = 1.0  # applied last: the first-listed case wins
    return out


def make_trimap(mask: np.ndarray, delta: float | None = None,
                rng: np.random.Generator | None = None,
                delta_max: float = 0.1) -> np.ndarray:
    """Quantize a soft mask into the {0, 0.5, 1} training label.

    Values above ``0.5 + delta`` map to 1, below ``0.5 - delta`` to 0,
    and the band in between to the abandoned value 0.5. With an rng,
    delta is drawn uniformly from [0, delta_max] per call.
    """
    if rng is not None:
        delta = float(rng.uniform(0.0, delta_max))
    if delta is None:
        raise InvalidInputError("either delta or rng must be supplied")
    if not 0.0 <= delta <= 0.1:
        raise InvalidInputError(f"delta {delta} outside [0, 0.1]")
    mask = np.asarray(mask, dtype=np.float64)
    out = np.full_like(mask, 0.5)
    out[mask > 0.5 + delta] = 1.0
    out[mask < 0.5 - delta] = 0.0
    return out


def binary_trimap(gt: np.ndarray) -> np.ndarray:
    """Ground-truth binary mask as a trimap with an empty abandon set."""
    return np.asarray(gt, dtype=np.float64).clip(0.0, 1.0).round()


def nfl_loss(pred: np.ndarray, label: np.ndarray,
             gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Normalized focal loss and its gradient w.r.t. the prediction.

    Pointwise weight |label - pred|^gamma, normalized by the sum of
    weights over supervised pixels (label != 0.5); the normalizer is
    treated as a constant in the gradient. The log argument is clamped
    at 1e-8. Gradient is exactly zero on abandoned pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise InvalidInputError("prediction and label dims differ")
    eps_flag = label != 0.5
    if not eps_flag.any():
        raise DegenerateBatchError("every pixel is abandoned; skip this step")
    zeta = label - pred
    u = np.abs(zeta)
    weights = np.where(eps_flag, u ** gamma, 0.0)  # note 0**0 == 1
    norm = weights.sum()
    if norm == 0.0:
        # gamma > 0 and a perfect prediction on every supervised pixel
        return 0.0, np.zeros_like(pred)
    clamped = np.maximum(1.0 - u, LOG_FLOOR)
    log_c = np.log(clamped)
    loss = float(-(weights * log_c).sum() / norm)

    # d/du of -u^gamma * log(clamped), with the normalizer frozen;
    # the log term's derivative vanishes inside the clamp
    with np.errstate(divide="ignore"):
        pow_term = np.where(u > 0, u ** (gamma - 1.0), 0.0)
    active = 1.0 - u > LOG_FLOOR
    d_du = -gamma * pow_term * log_c + np.where(active, u ** gamma / clamped, 0.0)
    grad = np.where(eps_flag, -np.sign(zeta) * d_du / norm, 0.0)
    return loss, grad


@dataclass
class TrainSample:
    """One training image after feature extraction and matching."""

    residual: ResidualTensor
    gt: np.ndarray
    defect: str
    prompt_features: list[PromptFeature]
    image_id: str = ""


def _radius(cfg: TrainConfig, height: int) -> int:
    if cfg.r_click is not None:
        return cfg.r_click
    return int(round(5 * height / 512.0))


def _step(params, state, cfg, residual, maps, m_prev, v, label):
    mask, loss, grads = forward_loss_backward(
        residual, maps, m_prev, v, params,
        lambda m: nfl_loss(m, label, cfg.gamma),
    )
    params, state = adamw_step(
        params, grads, state, lr=cfg.lr, weight_decay=cfg.weight_decay,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, ema_decay=cfg.ema_decay,
    )
    return params, state, mask, loss


def train_click_model(samples: list[TrainSample], cfg: TrainConfig,
                      params: RefinerParams | None = None,
                      log: list | None = None) -> RefinerParams:
    """Train the click-variant refiner with simulated corrective clicks.

    Per sample visit: draw a click budget, then iterate click simulation
    against the current prediction, forward, normalized focal loss
    against the ground truth (no abandoned pixels), backward, AdamW+EMA.
    Returns the EMA parameters. Bit-reproducible for a fixed seed.
    """
    if not samples:
        raise InvalidInputError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        d_f = samples[0].residual.d_f
        q = samples[0].prompt_features[0].q
        params = init_params(rng, d_f, cfg.d_e, cfg.d_a, q, variant="click")
    state = OptimizerState.fresh(params)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for si in order:
            s = samples[int(si)]
            h, w = s.gt.shape
            label = binary_trimap(s.gt)
            m_prev = np.zeros((h, w))
            clicks: list[Click] = []
            budget = int(rng.integers(1, cfg.max_clicks + 1))
            for t in range(1, budget + 1):
                nxt = simulate_next_click(m_prev, s.gt)
                if nxt is None:
                    break
                clicks.append(nxt.with_t(t))
                maps = rasterize(clicks, h, w, _radius(cfg, h))
                v = sample_training_feature(s.prompt_features, rng)
                params, state, mask, loss = _step(
                    params, state, cfg, s.residual, maps, m_prev, v, label
                )
                if log is not None:
                    log.append(loss)
                m_prev = mask
    return state.ema


def train_seg_model(samples: list[TrainSample], click_params: RefinerParams,
                    cfg: TrainConfig, log: list | None = None) -> RefinerParams:
    """Train the seg-variant refiner on click-model pseudo labels.

    Per sample: run the click model with up to ``pseudo_clicks``
    simulated clicks to produce a soft pseudo label, strengthen it
    around those clicks, then train the seg variant for up to
    ``seg_max_clicks`` iterations; each iteration draws a fresh
    quantization delta, so the abandoned band varies per step. The seg
    forward zeroes click maps by construction, so the iterations feed
    on the evolving mask history. Returns the EMA parameters.
    """
    if not samples:
        raise InvalidInputError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = click_params.copy(variant="seg")
    state = OptimizerState.fresh(params)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for si in order:
            s = samples[int(si)]
            h, w = s.gt.shape
            radius = _radius(cfg, h)
            v_avg = sample_training_feature(s.prompt_features, rng)

            pseudo = np.zeros((h, w))
            clicks: list[Click] = []
            for t in range(1, cfg.pseudo_clicks + 1):
                nxt = simulate_next_click(pseudo, s.gt)
                if nxt is None:
                    break
                clicks.append(nxt.with_t(t))
                pseudo = forward(s.residual, rasterize(clicks, h, w, radius),
                                 pseudo, v_avg, click_params)
            strengthened = strengthen_clicks(
                pseudo,
                [c for c in clicks if c.polarity == 1],
                [c for c in clicks if c.polarity == 0],
                cfg.strengthen_radius,
            )
            pseudo_gt = strengthened >= 0.5

            m_prev = np.zeros((h, w))
            budget = int(rng.integers(1, cfg.seg_max_clicks + 1))
            for t in range(1, budget + 1):
                if simulate_next_click(m_prev, pseudo_gt) is None:
                    break
                label = make_trimap(strengthened, rng=rng, delta_max=cfg.delta_max)
                v = sample_training_feature(s.prompt_features, rng)
                try:
                    params, state, mask, loss = _step(
                        params, state, cfg, s.residual, None, m_prev, v, label
                    )
                except DegenerateBatchError:
                    break
                if log is not None:
                    log.append(loss)
                m_prev = mask
    return state.ema


_INT_FIELDS = {"max_clicks", "seg_max_clicks", "pseudo_clicks", "epochs", "seed",
               "r_click", "d_e", "d_a"}


def load_train_config(path: str | Path, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    """Read the [train] section of an INI config; CLI overrides win.

    Returns the TrainConfig plus the full parsed file as nested dicts so
    callers can reach the other sections ([data], [backend], ...).
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise InvalidInputError(f"cannot read config file {path}")
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    values: dict = {}
    known = {f.name for f in fields(TrainConfig)}
    for key, raw in sections.get("train", {}).items():
        if key not in known:
            raise InvalidInputError(f"unknown [train] key {key!r}")
        values[key] = raw
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, raw in values.items():
        if key in _INT_FIELDS:
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return TrainConfig(**kwargs), sections


def config_as_dict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
