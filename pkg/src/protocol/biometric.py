"""Simulated face capture, embedding storage by reference, and distance matching.

Embeddings stand in for the output of a face-recognition network: 128-dim
unit vectors compared by Euclidean distance against a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog

from src.config import EMBEDDING_DIM
from src.protocol.crypto_core import RandomSource
from src.protocol.errors import DimensionMismatch, NotFound
from src.protocol.jsonfile import read_json, write_json_atomic

logger = structlog.get_logger()

NORM_TOLERANCE = 1e-6
_DTYPE = np.dtype("<f8")


@dataclass(frozen=True, eq=False)
class FaceEmbedding:
    v: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.v, dtype=_DTYPE)
        if v.shape != (EMBEDDING_DIM,):
            raise DimensionMismatch(f"embedding must have shape ({EMBEDDING_DIM},), got {v.shape}")
        if abs(float(np.linalg.norm(v)) - 1.0) > NORM_TOLERANCE:
            raise ValueError("embedding must be L2-normalised")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FaceEmbedding) and self.to_bytes() == other.to_bytes()

    def __hash__(self) -> int:
        return hash(self.to_bytes())

    def to_bytes(self) -> bytes:
        return self.v.astype(_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FaceEmbedding":
        if len(raw) != EMBEDDING_DIM * _DTYPE.itemsize:
            raise DimensionMismatch(f"expected {EMBEDDING_DIM * _DTYPE.itemsize} bytes, got {len(raw)}")
        return cls(np.frombuffer(raw, dtype=_DTYPE).copy())

    @classmethod
    def from_vector(cls, raw: np.ndarray) -> "FaceEmbedding":
        raw = np.asarray(raw, dtype=_DTYPE)
        return cls(raw / np.linalg.norm(raw))


@dataclass(frozen=True)
class IdentityProfile:
    ground_truth: FaceEmbedding
    noise_sigma: float

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class FbUrl:
    id: str


def random_identity(rng: RandomSource, noise_sigma: float) -> IdentityProfile:
    """A fresh person: a uniformly random direction on the unit sphere."""
    return IdentityProfile(FaceEmbedding.from_vector(rng.gaussian(EMBEDDING_DIM, 1.0)), noise_sigma)


def capture(profile: IdentityProfile, rng: RandomSource) -> FaceEmbedding:
    if profile.noise_sigma == 0:
        return profile.ground_truth
    noisy = profile.ground_truth.v + rng.gaussian(EMBEDDING_DIM, profile.noise_sigma)
    return FaceEmbedding.from_vector(noisy)


def _vector(e: FaceEmbedding | np.ndarray) -> np.ndarray:
    return e.v if isinstance(e, FaceEmbedding) else np.asarray(e, dtype=_DTYPE)


def distance(a: FaceEmbedding | np.ndarray, b: FaceEmbedding | np.ndarray) -> float:
    va, vb = _vector(a), _vector(b)
    if va.shape != (EMBEDDING_DIM,) or vb.shape != (EMBEDDING_DIM,):
        raise DimensionMismatch(f"cannot compare shapes {va.shape} and {vb.shape}")
    return float(np.linalg.norm(va - vb))


def verify(login: FaceEmbedding, reg: FaceEmbedding, threshold: float) -> bool:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return distance(login, reg) <= threshold


class EmbeddingStore:
    """Server-side embedding storage addressed by opaque FbUrl ids.

    With a ``root`` every embedding is also written to ``<root>/<id>.json``
    and removed from disk on delete, so a restarted server finds the
    registration faces again through :meth:`load`.
    """

    def __init__(self, rng: RandomSource, root: Path | None = None) -> None:
        self._rng = rng
        self.root = None if root is None else Path(root)
        self._blobs: dict[str, bytes] = {}

    def __len__(self) -> int:
        return len(self._blobs)

    def __contains__(self, url: FbUrl) -> bool:
        return url.id in self._blobs

    def _path(self, url_id: str) -> Path:
        assert self.root is not None
        return self.root / f"{url_id}.json"

    def store(self, e: FaceEmbedding) -> FbUrl:
        while True:
            url_id = "fb-" + self._rng.bytes(12).hex()
            if url_id not in self._blobs:
                break
        self._blobs[url_id] = e.to_bytes()
        if self.root is not None:
            write_json_atomic(self._path(url_id), {"id": url_id, "embedding": self._blobs[url_id].hex()})
        return FbUrl(url_id)

    def fetch(self, url: FbUrl) -> FaceEmbedding:
        try:
            return FaceEmbedding.from_bytes(self._blobs[url.id])
        except KeyError as exc:
            raise NotFound(f"no embedding stored under {url.id}") from exc

    def delete(self, url: FbUrl) -> bool:
        removed = self._blobs.pop(url.id, None) is not None
        if removed:
            if self.root is not None:
                self._path(url.id).unlink(missing_ok=True)
            logger.debug("embedding_deleted", fburl=url.id)
        return removed

    def snapshot(self) -> dict[str, str]:
        return {url_id: raw.hex() for url_id, raw in sorted(self._blobs.items())}

    def restore(self, data: dict[str, str]) -> None:
        self._blobs = {url_id: bytes.fromhex(raw) for url_id, raw in data.items()}

    @classmethod
    def load(cls, rng: RandomSource, root: Path) -> "EmbeddingStore":
        store = cls(rng, root)
        if store.root.exists():
            for path in sorted(store.root.glob("fb-*.json")):
                doc = read_json(path)
                if doc is None:
                    continue
                store._blobs[doc["id"]] = bytes.fromhex(doc["embedding"])
        logger.info("embeddings_loaded", root=str(root), embeddings=len(store))
        return store


def store_embedding(store: EmbeddingStore, e: FaceEmbedding) -> FbUrl:
    return store.store(e)


def fetch(store: EmbeddingStore, url: FbUrl) -> FaceEmbedding:
    return store.fetch(url)
