"""Defect-specific language prompts and their feature matrices.

Prompts live in plain text files (one per line, ``#`` lines skipped,
named ``{object}__{defect}.txt``). Each prompt becomes a (Q, Z) word
feature matrix with a validity mask over the Z columns; matrices from a
prompt set are averaged into the defect's conditioning feature. The
built-in embedder hashes each token into a deterministic unit vector;
real embedding matrices can be imported via the ADPE format instead.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clicklabel.errors import FormatError, InvalidInputError

ADPE_MAGIC = b"ADPE"
ADPE_VERSION = 1

DEFAULT_Q = 64
DEFAULT_Z = 20
DEFAULT_PROMPT_COUNT = 40

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class TextEmbedderConfig:
    """Word-embedding backend: hashed toy vectors or imported matrices."""

    kind: str = "hashed-toy"
    q: int = DEFAULT_Q
    z: int = DEFAULT_Z
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("hashed-toy", "imported"):
            raise InvalidInputError(f"unknown embedder kind {self.kind!r}")
        if self.q < 1 or self.z < 1:
            raise InvalidInputError("q and z must be >= 1")


@dataclass(frozen=True)
class PromptSet:
    """A defect/object pair with its candidate prompt strings."""

    defect: str
    obj: str
    prompts: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.prompts:
            raise InvalidInputError("prompt set must contain at least one prompt")
        if any(not p.strip() for p in self.prompts):
            raise InvalidInputError("prompts must be non-empty after trimming")


@dataclass
class PromptFeature:
    """(Q, Z) word-feature matrix with a per-column validity mask."""

    matrix: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.matrix.ndim != 2 or self.valid.shape != (self.matrix.shape[1],):
            raise InvalidInputError("prompt feature must be (Q, Z) with a Z-length mask")

    @property
    def q(self) -> int:
        return self.matrix.shape[0]

    @property
    def z(self) -> int:
        return self.matrix.shape[1]


def format_instruction(defect: str, obj: str, n: int) -> str:
    """Render the templated generation instruction for a defect/object pair."""
    if not defect.strip() or not obj.strip():
        raise InvalidInputError("defect and object names must be non-empty")
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    return f"Give {n} phrase describing the {defect} defect on a {obj}"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


def _token_vector(token: str, cfg: TextEmbedderConfig) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = (int.from_bytes(digest, "little") ^ (cfg.seed & _U64)) & _U64
    vec = np.random.Generator(np.random.PCG64(seed)).standard_normal(cfg.q)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:  # essentially impossible; keep the unit-norm contract anyway
        vec = np.zeros(cfg.q)
        vec[0] = 1.0
        return vec
    return vec / norm


def embed_prompt(prompt: str, cfg: TextEmbedderConfig) -> PromptFeature:
    """Embed one prompt with the hashed toy embedder.

    Token k (k < Z) maps to a unit vector drawn from a PRNG seeded by
    hash64(token) XOR the config seed; longer prompts truncate to Z
    tokens and padding columns stay zero.
    """
    if cfg.kind != "hashed-toy":
        raise InvalidInputError("embed_prompt requires the hashed-toy embedder")
    tokens = tokenize(prompt)[: cfg.z]
    matrix = np.zeros((cfg.q, cfg.z), dtype=np.float64)
    valid = np.zeros(cfg.z, dtype=bool)
    for k, tok in enumerate(tokens):
        matrix[:, k] = _token_vector(tok, cfg)
        valid[k] = True
    return PromptFeature(matrix=matrix, valid=valid)


def average_prompt_feature(features: list[PromptFeature]) -> PromptFeature:
    """Elementwise mean of prompt features; validity is the mask union.

    Summands are sorted per element before accumulation, so the result
    is bitwise independent of input order.
    """
    if not features:
        raise InvalidInputError("cannot average an empty feature list")
    q, z = features[0].q, features[0].z
    for f in features:
        if (f.q, f.z) != (q, z):
            raise InvalidInputError("prompt features must share (Q, Z)")
    stacked = np.sort(np.stack([f.matrix for f in features]), axis=0)
    matrix = stacked.sum(axis=0) / len(features)
    valid = np.any([f.valid for f in features], axis=0)
    return PromptFeature(matrix=matrix, valid=valid)


def sample_training_feature(features: list[PromptFeature],
                            rng: np.random.Generator) -> PromptFeature:
    """Training-time conditioning draw.

    With probability one half returns the set average, otherwise a
    uniformly chosen single member.
    """
    if not features:
        raise InvalidInputError("cannot sample from an empty feature list")
    if rng.random() < 0.5:
        return average_prompt_feature(features)
    return features[int(rng.integers(len(features)))]


def load_prompt_file(path: str | Path) -> list[str]:
    """Read a prompt text file: one prompt per line, ``#`` lines skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines:
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        out.append(stripped)
    return out


def prompt_file_name(obj: str, defect: str) -> str:
    return f"{obj}__{defect}.txt"


def save_embeddings(features: list[PromptFeature], path: str | Path) -> None:
    """Write prompt features in the ADPE binary format.

    Layout: magic, u32 [version, U, Q, Z], then per matrix the (Q, Z)
    float32 values followed by a Z-byte validity mask.
    """
    if not features:
        raise InvalidInputError("nothing to save")
    q, z = features[0].q, features[0].z
    blobs = [ADPE_MAGIC + struct.pack("<IIII", ADPE_VERSION, len(features), q, z)]
    for f in features:
        if (f.q, f.z) != (q, z):
            raise InvalidInputError("prompt features must share (Q, Z)")
        blobs.append(f.matrix.astype("<f4").tobytes(order="C"))
        blobs.append(f.valid.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_embeddings(path: str | Path) -> list[PromptFeature]:
    """Read an ADPE file; raises FormatError naming the offending field."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError("truncated header")
    if raw[:4] != ADPE_MAGIC:
        raise FormatError("bad magic")
    version, u, q, z = struct.unpack("<IIII", raw[4:20])
    if version != ADPE_VERSION:
        raise FormatError(f"version {version} unsupported")
    if min(u, q, z) < 1:
        raise FormatError("dimensions must be positive")
    stride = q * z * 4 + z
    if len(raw) - 20 != u * stride:
        raise FormatError(f"payload size {len(raw) - 20} does not match header dims")
    out = []
    pos = 20
    for _ in range(u):
        matrix = np.frombuffer(raw[pos:pos + q * z * 4], dtype="<f4").reshape(q, z)
        pos += q * z * 4
        valid = np.frombuffer(raw[pos:pos + z], dtype=np.uint8).astype(bool)
        pos += z
        masked = matrix.astype(np.float64)
        masked[:, ~valid] = 0.0
        out.append(PromptFeature(matrix=masked, valid=valid.copy()))
    return out
