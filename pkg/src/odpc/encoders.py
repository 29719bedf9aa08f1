"""Frozen feature extraction.

Two sources of embeddings live behind the same matrix type: a deterministic
toy encoder (seeded Gaussian random projection onto the unit sphere) for
tests and desk-scale runs, and an import path for feature banks computed
elsewhere by a real vision-language model. Nothing in this module has
trainable state, and nothing here ever mutates after construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import persist
from .errors import InvalidArgumentError, ShapeError

DEFAULT_FEATURE_DIM = 512

_NORM_TOL = 1e-4


@dataclass(frozen=True)
class ToyEncoderConfig:
    seed: int = 0
    raw_dim: int = 64
    out_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        if self.raw_dim < 1 or self.out_dim < 1:
            raise InvalidArgumentError(
                f"encoder dims must be >= 1, got raw_dim={self.raw_dim} out_dim={self.out_dim}"
            )


@dataclass
class EmbeddingMatrix:
    """Fixed-dimension float32 feature rows.

    `normalized` asserts every row sits on the unit sphere (within 1e-4);
    `source` records whether the rows came from the toy encoder or a file.
    """

    values: np.ndarray
    normalized: bool = False
    source: str = "toy"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("embedding matrix contains non-finite values")
        if self.normalized and self.rows > 0:
            norms = np.linalg.norm(self.values.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > _NORM_TOL:
                raise InvalidArgumentError(
                    f"matrix flagged normalized but a row norm deviates by {worst:.2e}"
                )

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def _projection(cfg: ToyEncoderConfig) -> np.ndarray:
    """Fixed Gaussian projection matrix for a config; pure function of the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7,)))
    return rng.standard_normal((cfg.raw_dim, cfg.out_dim)) / np.sqrt(cfg.out_dim)


def _project_and_normalize(raw: np.ndarray, cfg: ToyEncoderConfig) -> np.ndarray:
    projected = raw.astype(np.float64) @ _projection(cfg)
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise InvalidArgumentError(f"row {bad} has (near-)zero norm; cannot place on unit sphere")
    return (projected / norms[:, None]).astype(np.float32)


def toy_encode_images(raw_vectors: np.ndarray, cfg: ToyEncoderConfig) -> EmbeddingMatrix:
    """Encode raw vectors with the seeded random projection, rows L2-normalized."""
    raw = np.asarray(raw_vectors, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != cfg.raw_dim:
        raise ShapeError(
            f"expected raw vectors of shape (n, {cfg.raw_dim}), got {raw.shape}"
        )
    return EmbeddingMatrix(_project_and_normalize(raw, cfg), normalized=True, source="toy")


def _token_index(token: str, raw_dim: int) -> int:
    # Stable across processes (unlike hash()) so encodings are reproducible.
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % raw_dim


def bag_of_words_counts(text: str, raw_dim: int) -> np.ndarray:
    """Hash whitespace tokens into a fixed-size count vector."""
    counts = np.zeros(raw_dim, dtype=np.float64)
    for token in text.split():
        counts[_token_index(token, raw_dim)] += 1.0
    return counts


def toy_encode_texts(descriptions: list[str], cfg: ToyEncoderConfig) -> EmbeddingMatrix:
    """Encode descriptions via hashed bag-of-words counts, then project + normalize.

    Token order does not matter; identical strings map to identical rows.
    """
    for i, text in enumerate(descriptions):
        if not isinstance(text, str) or not text.strip():
            raise InvalidArgumentError(f"description {i} is empty")
    raw = np.stack([bag_of_words_counts(t, cfg.raw_dim) for t in descriptions]) if descriptions else np.zeros((0, cfg.raw_dim))
    if raw.shape[0] == 0:
        return EmbeddingMatrix(np.zeros((0, cfg.out_dim), dtype=np.float32), normalized=True, source="toy")
    return EmbeddingMatrix(_project_and_normalize(raw, cfg), normalized=True, source="toy")


def import_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Load an externally computed feature bank file as an EmbeddingMatrix."""
    matrix, normalized = persist.read_bank(path)
    return EmbeddingMatrix(matrix, normalized=normalized, source="imported")
