"""Open-vocabulary feature stand-ins: deterministic stub embeddings, the
normalized similarity used for matching, and running-mean feature fusion.

Real deployments plug a vision-language encoder in through the same
``embed_visual`` / ``embed_text`` surface; the stub hashes stable inputs
(class label text, dominant mask color) into unit vectors so the rest of the
pipeline exercises identical code paths without model weights.
"""

from __future__ import annotations

import hashlib

import numpy as np

UNIT_TOL = 1e-6


class FeatureError(ValueError):
    pass


def _seed_from_text(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stub_embed(class_label: str, instance_salt: str | None = None,
               dim: int = 64) -> np.ndarray:
    """Deterministic unit vector for a label (optionally salted per instance)."""
    if not class_label:
        raise FeatureError("empty class label")
    if dim < 2:
        raise FeatureError("feature dimension must be at least 2")
    key = class_label if instance_salt is None else f"{class_label}\x00{instance_salt}"
    rng = np.random.default_rng(_seed_from_text(key))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _check_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-4:
        raise FeatureError("feature vector is not unit length")
    return v


def feature_similarity(a, b) -> float:
    """Cosine similarity mapped from [-1, 1] to [0, 1]."""
    a = _check_unit(a)
    b = _check_unit(b)
    return float(a @ b) / 2.0 + 0.5


def fuse_features(old, new, n: int) -> np.ndarray:
    """Running mean of ``old`` (seen n times) with one new observation,
    renormalized to unit length."""
    if n < 1:
        raise FeatureError("fusion count must be >= 1")
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if old.shape != new.shape:
        raise FeatureError("feature dimensions differ")
    mean = (n * old + new) / (n + 1)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise FeatureError("fused feature collapsed to zero")
    return mean / norm


class RunningFeature:
    """Unnormalized running mean plus count; exposes a renormalized view."""

    def __init__(self, first: np.ndarray):
        self.mean = np.asarray(first, dtype=np.float64).copy()
        self.count = 1

    def update(self, new: np.ndarray):
        new = np.asarray(new, dtype=np.float64)
        self.mean = (self.count * self.mean + new) / (self.count + 1)
        self.count += 1

    @property
    def normalized(self) -> np.ndarray:
        norm = np.linalg.norm(self.mean)
        if norm < 1e-12:
            raise FeatureError("running feature collapsed to zero")
        return self.mean / norm


class StubEmbedder:
    """Pixel-free embedder: visual features hash the dominant mask color,
    text features hash the label. Comparable vectors come from the same hash
    space, mirroring a shared vision-language embedding space."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed_visual(self, color: np.ndarray, box, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise FeatureError("empty detection mask")
        mean_rgb = np.asarray(color, dtype=np.float64)[mask].mean(axis=0)
        quantized = np.round(mean_rgb * 1e4) / 1e4
        key = "rgb:{:.4f},{:.4f},{:.4f}".format(*quantized)
        return stub_embed(key, dim=self.dim)

    def embed_text(self, class_label: str) -> np.ndarray:
        return stub_embed(class_label, dim=self.dim)
