from __future__ import annotations

import math

import numpy as np
import pytest

from src.config import EMBEDDING_DIM, MATCH_THRESHOLD
from src.protocol import biometric
from src.protocol.biometric import (
    EmbeddingStore,
    FaceEmbedding,
    FbUrl,
    IdentityProfile,
    capture,
    distance,
    random_identity,
    verify,
)
from src.protocol.crypto_core import SeededRandom
from src.protocol.errors import DimensionMismatch, NotFound


def _axis(i: int, sign: float = 1.0) -> FaceEmbedding:
    v = np.zeros(EMBEDDING_DIM)
    v[i] = sign
    return FaceEmbedding(v)


def test_distance_reference_points():
    assert distance(_axis(0), _axis(0)) == 0.0
    assert distance(_axis(0), _axis(1)) == pytest.approx(math.sqrt(2))
    assert distance(_axis(0), _axis(0, -1.0)) == pytest.approx(2.0)


def test_capture_without_noise_is_the_ground_truth(rng):
    profile = random_identity(rng, 0.0)
    assert capture(profile, rng) == profile.ground_truth
    assert verify(capture(profile, rng), profile.ground_truth, MATCH_THRESHOLD)


def test_capture_noise_magnitude(rng):
    profile = random_identity(rng, 0.02)
    distances = [distance(capture(profile, rng), profile.ground_truth) for _ in range(500)]
    expected = 0.02 * math.sqrt(EMBEDDING_DIM - 1)
    assert 0.7 * expected < np.mean(distances) < 1.3 * expected
    assert all(d > 0 for d in distances)


def test_capture_noise_is_monotone_in_sigma(rng):
    base = random_identity(rng, 0.0).ground_truth
    means = []
    for sigma in (0.01, 0.05, 0.2):
        profile = IdentityProfile(base, sigma)
        means.append(np.mean([distance(capture(profile, rng), base) for _ in range(200)]))
    assert means == sorted(means)


@pytest.mark.slow
def test_same_person_accepted_other_people_rejected():
    rng = SeededRandom(7, "people")
    accepted = rejected = 0
    for _ in range(10_000):
        person = random_identity(rng, 0.02)
        other = random_identity(rng, 0.02)
        reg = capture(person, rng)
        accepted += verify(capture(person, rng), reg, MATCH_THRESHOLD)
        rejected += not verify(capture(other, rng), reg, MATCH_THRESHOLD)
    assert accepted == 10_000
    assert rejected == 10_000


@pytest.mark.slow
def test_distance_is_a_metric():
    rng = SeededRandom(11, "triples")
    for _ in range(10_000):
        a, b, c = (random_identity(rng, 0.0).ground_truth for _ in range(3))
        ab, bc, ac = distance(a, b), distance(b, c), distance(a, c)
        assert ab == pytest.approx(distance(b, a))
        assert ac <= ab + bc + 1e-12
        assert 0.0 <= ab <= 2.0 + 1e-12


@pytest.mark.parametrize("threshold", [0.0, -1.0])
def test_verify_rejects_non_positive_threshold(threshold):
    with pytest.raises(ValueError):
        verify(_axis(0), _axis(0), threshold)


def test_verify_boundary_is_inclusive():
    assert verify(_axis(0), _axis(1), math.sqrt(2) + 1e-12)
    assert not verify(_axis(0), _axis(1), 1.0)


def test_wrong_dimensions():
    with pytest.raises(DimensionMismatch):
        FaceEmbedding(np.ones(3) / math.sqrt(3))
    with pytest.raises(DimensionMismatch):
        distance(_axis(0), np.ones(EMBEDDING_DIM + 1))
    with pytest.raises(DimensionMismatch):
        FaceEmbedding.from_bytes(b"\x00" * 8)


def test_embedding_must_be_normalised():
    with pytest.raises(ValueError):
        FaceEmbedding(np.ones(EMBEDDING_DIM))
    assert np.linalg.norm(FaceEmbedding.from_vector(np.ones(EMBEDDING_DIM)).v) == pytest.approx(1.0)


def test_embedding_is_read_only():
    e = _axis(3)
    with pytest.raises(ValueError):
        e.v[0] = 1.0


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        IdentityProfile(_axis(0), -0.1)


def test_store_fetch_and_delete(rng):
    store = EmbeddingStore(rng)
    e = random_identity(rng, 0.0).ground_truth
    url = biometric.store_embedding(store, e)
    assert url.id.startswith("fb-")
    assert biometric.fetch(store, url) == e
    assert url in store and len(store) == 1

    other = store.store(e)
    assert other != url  # same embedding, distinct handle

    assert store.delete(url)
    assert not store.delete(url)
    with pytest.raises(NotFound):
        store.fetch(url)
    with pytest.raises(NotFound):
        store.fetch(FbUrl("fb-missing"))


def test_store_snapshot_restore(rng):
    store = EmbeddingStore(rng)
    url = store.store(_axis(5))
    copy = EmbeddingStore(rng)
    copy.restore(store.snapshot())
    assert copy.fetch(url) == _axis(5)


def test_store_on_disk(rng, tmp_path):
    store = EmbeddingStore(rng, tmp_path)
    kept = store.store(_axis(1))
    dropped = store.store(_axis(2))
    assert store.delete(dropped)
    assert sorted(p.stem for p in tmp_path.glob("*.json")) == [kept.id]

    reloaded = EmbeddingStore.load(rng, tmp_path)
    assert len(reloaded) == 1
    assert reloaded.fetch(kept) == _axis(1)
    with pytest.raises(NotFound):
        reloaded.fetch(dropped)
    assert len(EmbeddingStore.load(rng, tmp_path / "missing")) == 0
