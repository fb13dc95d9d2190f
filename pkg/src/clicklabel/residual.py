"""Reference bank construction and location-aware residual matching.

A query cell may only be matched against features from the query's
globally most similar reference images (cosine similarity of global
descriptors, top K) whose grid coordinate lies strictly within radius
``sigma`` of the query cell. The residual is the difference between the
query descriptor and its best match.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.features import FeatureTensor, global_descriptor

ADBK_MAGIC = b"ADBK"
ADBK_VERSION = 1

RESIDUAL_KINDS = ("difference", "absolute")


@dataclass(frozen=True)
class MatchConfig:
    """Matching knobs: K global neighbors, spatial radius, residual kind."""

    k: int = 50
    sigma: float = 3.2
    residual_kind: str = "difference"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be > 0")
        if self.residual_kind not in RESIDUAL_KINDS:
            raise InvalidInputError(f"unknown residual kind {self.residual_kind!r}")


class ReferenceBank:
    """Flattened defect-free reference features with provenance.

    Features are kept in canonical order: sorted by (image index, y, x).
    ``image_index`` is 1-based. ``coords`` holds (x, y) grid cells.
    """

    def __init__(self, features: np.ndarray, image_index: np.ndarray,
                 coords: np.ndarray, global_descs: np.ndarray,
                 h_f: int, w_f: int) -> None:
        features = np.asarray(features, dtype=np.float32)
        image_index = np.asarray(image_index, dtype=np.int32)
        coords = np.asarray(coords, dtype=np.int32)
        global_descs = np.asarray(global_descs, dtype=np.float64)
        order = np.lexsort((coords[:, 0], coords[:, 1], image_index))
        self.features = features[order]
        self.image_index = image_index[order]
        self.coords = coords[order]
        self.global_descs = global_descs
        self.h_f = int(h_f)
        self.w_f = int(w_f)
        self._validate()

    def _validate(self) -> None:
        r = self.global_descs.shape[0]
        n = self.features.shape[0]
        if n != r * self.h_f * self.w_f:
            raise InvalidInputError(
                f"feature count {n} != R*h_f*w_f = {r * self.h_f * self.w_f}"
            )
        key = (self.image_index.astype(np.int64) * self.h_f * self.w_f
               + self.coords[:, 1].astype(np.int64) * self.w_f
               + self.coords[:, 0])
        if len(np.unique(key)) != n:
            raise InvalidInputError("duplicate (image, coord) pair in bank")
        norms = np.linalg.norm(self.global_descs, axis=1)
        # 1e-5 tolerance admits float32 round trips through the bank file
        if not np.all((np.abs(norms - 1.0) < 1e-5) | (norms == 0.0)):
            raise InvalidInputError("global descriptors must be unit-norm or zero")

    @property
    def n_images(self) -> int:
        return self.global_descs.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.features.shape[1]


@dataclass
class ResidualTensor:
    """Per-cell matching residuals plus matched bank indices."""

    values: np.ndarray        # (h_f, w_f, d_f) float64
    matched_index: np.ndarray  # (h_f, w_f) int64, bank feature index

    def __post_init__(self) -> None:
        if not np.isfinite(self.values).all():
            raise InvalidInputError("residual tensor contains non-finite values")

    @property
    def h_f(self) -> int:
        return self.values.shape[0]

    @property
    def w_f(self) -> int:
        return self.values.shape[1]

    @property
    def d_f(self) -> int:
        return self.values.shape[2]


def build_bank(tensors: list[FeatureTensor],
               global_tensors: list[FeatureTensor] | None = None) -> ReferenceBank:
    """Flatten reference feature tensors into a bank.

    Image indices follow input order (1-based); each cell's coordinate is
    its (x, y) grid position. ``global_tensors`` optionally supplies a
    separate tensor per image for the global descriptor (defaults to the
    matching tensor itself).
    """
    if not tensors:
        raise InvalidInputError("need at least one reference tensor")
    h_f, w_f, d_f = tensors[0].values.shape
    for t in tensors:
        if t.values.shape != (h_f, w_f, d_f):
            raise InvalidInputError(
                f"tensor {t.source_id!r} dims {t.values.shape} != {(h_f, w_f, d_f)}"
            )
    if global_tensors is not None and len(global_tensors) != len(tensors):
        raise InvalidInputError("global_tensors must match tensors 1:1")

    xs, ys = np.meshgrid(np.arange(w_f), np.arange(h_f))
    cell_coords = np.stack([xs.ravel(), ys.ravel()], axis=1)

    feats = []
    image_index = []
    coords = []
    descs = []
    for i, t in enumerate(tensors, start=1):
        feats.append(t.values.reshape(-1, d_f))
        image_index.append(np.full(h_f * w_f, i, dtype=np.int32))
        coords.append(cell_coords)
        desc_src = global_tensors[i - 1] if global_tensors is not None else t
        descs.append(global_descriptor(desc_src))
    return ReferenceBank(
        features=np.concatenate(feats),
        image_index=np.concatenate(image_index),
        coords=np.concatenate(coords),
        global_descs=np.stack(descs),
        h_f=h_f,
        w_f=w_f,
    )


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def knn_global(bank: ReferenceBank, query_desc: np.ndarray, k: int = 50) -> list[int]:
    """Image indices of the min(k, R) most similar references, descending.

    Similarity is the cosine of global descriptors; ties go to the
    smaller image index.
    """
    query_desc = np.asarray(query_desc, dtype=np.float64)
    if query_desc.shape != (bank.d_f,):
        raise InvalidInputError(f"query descriptor must have dimension {bank.d_f}")
    sims = np.array([_cosine(query_desc, d) for d in bank.global_descs])
    order = np.lexsort((np.arange(1, bank.n_images + 1), -sims))
    return [int(i) + 1 for i in order[: min(k, bank.n_images)]]


def qualified_set(bank: ReferenceBank, theta_knn: list[int],
                  eta_tst: tuple[int, int], sigma: float = 3.2) -> np.ndarray:
    """Bank feature indices matchable with a query cell at ``eta_tst``.

    Exactly those features whose image is in ``theta_knn`` and whose grid
    coordinate lies strictly within Euclidean distance ``sigma`` of the
    query coordinate.
    """
    x, y = eta_tst
    if not (0 <= x < bank.w_f and 0 <= y < bank.h_f):
        raise InvalidInputError(f"coordinate {eta_tst} outside {bank.h_f}x{bank.w_f} grid")
    if not theta_knn:
        return np.empty(0, dtype=np.int64)
    in_images = np.isin(bank.image_index, np.asarray(theta_knn, dtype=np.int32))
    dx = bank.coords[:, 0].astype(np.float64) - x
    dy = bank.coords[:, 1].astype(np.float64) - y
    near = dx * dx + dy * dy < sigma * sigma
    return np.nonzero(in_images & near)[0].astype(np.int64)


def _spatial_offsets(sigma: float) -> list[tuple[int, int]]:
    r = int(np.ceil(sigma))
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy < sigma * sigma:
                out.append((dy, dx))
    return out


def _match_unconstrained(cell_feature: np.ndarray, bank: ReferenceBank,
                         theta_knn: list[int]) -> int:
    """Fallback argmin over every feature of the K-NN images.

    Used when the spatially qualified set is empty (cannot occur for a
    full-grid bank, where the zero offset always qualifies).
    """
    mask = np.isin(bank.image_index, np.asarray(theta_knn, dtype=np.int32))
    idx = np.nonzero(mask)[0]
    diffs = bank.features[idx].astype(np.float64) - cell_feature
    d2 = (diffs * diffs).sum(axis=1)
    best = np.nonzero(d2 == d2.min())[0]
    return int(idx[best].min())


def match_residual(bank: ReferenceBank, query: FeatureTensor,
                   cfg: MatchConfig | None = None) -> ResidualTensor:
    """Location-aware patch matching of a query tensor against the bank.

    For each cell the match is the argmin of Euclidean distance over the
    qualified set (ties: lowest bank feature index); the residual is the
    elementwise difference (or absolute difference) to that match. If a
    cell's qualified set is empty the spatial constraint is dropped and
    the argmin runs over all features of the K-NN images.
    """
    cfg = cfg or MatchConfig()
    if bank.n_features == 0:
        raise InvalidInputError("reference bank is empty")
    h_f, w_f, d_f = query.values.shape
    if (h_f, w_f, d_f) != (bank.h_f, bank.w_f, bank.d_f):
        raise InvalidInputError(
            f"query dims {(h_f, w_f, d_f)} != bank dims {(bank.h_f, bank.w_f, bank.d_f)}"
        )

    theta_knn = knn_global(bank, global_descriptor(query), cfg.k)
    theta = np.asarray(sorted(theta_knn), dtype=np.int64)
    m = h_f * w_f
    q = query.values.astype(np.float64)
    refs = bank.features.reshape(bank.n_images, h_f, w_f, d_f).astype(np.float64)[theta - 1]
    base = (theta - 1) * m  # bank index offset per selected image

    big = np.int64(np.iinfo(np.int64).max)
    best_d = np.full((h_f, w_f), np.inf)
    best_idx = np.full((h_f, w_f), big, dtype=np.int64)
    yy, xx = np.indices((h_f, w_f))

    for dy, dx in _spatial_offsets(cfg.sigma):
        qy0, qy1 = max(0, -dy), min(h_f, h_f - dy)
        qx0, qx1 = max(0, -dx), min(w_f, w_f - dx)
        if qy0 >= qy1 or qx0 >= qx1:
            continue
        q_sl = (slice(qy0, qy1), slice(qx0, qx1))
        r_sl = (slice(qy0 + dy, qy1 + dy), slice(qx0 + dx, qx1 + dx))
        diff = q[q_sl][None] - refs[(slice(None),) + r_sl]
        d2 = (diff * diff).sum(axis=3)  # (K', h', w')
        cell_lin = (yy[q_sl] + dy) * w_f + (xx[q_sl] + dx)
        idx = base[:, None, None] + cell_lin[None]
        # reduce over the K' images with ties to the lowest bank index
        d2_min = d2.min(axis=0)
        idx_min = np.where(d2 == d2_min[None], idx, big).min(axis=0)
        better = (d2_min < best_d[q_sl]) | (
            (d2_min == best_d[q_sl]) & (idx_min < best_idx[q_sl])
        )
        best_d[q_sl] = np.where(better, d2_min, best_d[q_sl])
        best_idx[q_sl] = np.where(better, idx_min, best_idx[q_sl])

    unmatched = best_idx == big
    if unmatched.any():
        for y, x in zip(*np.nonzero(unmatched)):
            best_idx[y, x] = _match_unconstrained(q[y, x], bank, theta_knn)

    matched = bank.features[best_idx.ravel()].astype(np.float64).reshape(h_f, w_f, d_f)
    values = q - matched
    if cfg.residual_kind == "absolute":
        values = np.abs(values)
    return ResidualTensor(values=values, matched_index=best_idx)


def save_bank(bank: ReferenceBank, path: str | Path) -> None:
    """Write a bank in the ADBK binary format.

    Features are stored in canonical (image, y, x) order so coordinates
    and image indices are implicit in the header dimensions.
    """
    header = ADBK_MAGIC + struct.pack(
        "<IIIII", ADBK_VERSION, bank.n_images, bank.h_f, bank.w_f, bank.d_f
    )
    descs = bank.global_descs.astype("<f4").tobytes(order="C")
    feats = bank.features.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + descs + feats)


def load_bank(path: str | Path) -> ReferenceBank:
    """Read an ADBK file; raises FormatError naming the offending field."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise FormatError("truncated header")
    if raw[:4] != ADBK_MAGIC:
        raise FormatError("bad magic")
    version, r, h_f, w_f, d_f = struct.unpack("<IIIII", raw[4:24])
    if version != ADBK_VERSION:
        raise FormatError(f"version {version} unsupported")
    if min(r, h_f, w_f, d_f) < 1:
        raise FormatError("dimensions must be positive")
    n = r * h_f * w_f
    expected = (r + n) * d_f * 4
    if len(raw) - 24 != expected:
        raise FormatError(f"payload size {len(raw) - 24} does not match header dims")
    descs = np.frombuffer(raw[24:24 + r * d_f * 4], dtype="<f4").reshape(r, d_f)
    feats = np.frombuffer(raw[24 + r * d_f * 4:], dtype="<f4").reshape(n, d_f)
    xs, ys = np.meshgrid(np.arange(w_f), np.arange(h_f))
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return ReferenceBank(
        features=feats.copy(),
        image_index=np.repeat(np.arange(1, r + 1, dtype=np.int32), h_f * w_f),
        coords=np.tile(coords, (r, 1)),
        global_descs=descs.astype(np.float64),
        h_f=h_f,
        w_f=w_f,
    )
