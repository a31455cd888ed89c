"""Precomputed image features and per-dialogue visual evidence pooling."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class FeatureFileError(ValueError):
    pass


class UnknownImageError(KeyError):
    pass


class VisualFeatureStore:
    """Image id -> fixed-width feature vector.

    An empty store has no inherent width; ``d_v`` must then be given so that
    pooling can still return a zero vector of the right size.
    """

    def __init__(self, features: Mapping[str, Iterable[float]] | None = None, d_v: int | None = None):
        self.features: dict[str, np.ndarray] = {}
        self.d_v = d_v
        for image_id, vec in (features or {}).items():
            self.add(image_id, vec)

    def add(self, image_id: str, vec: Iterable[float]) -> None:
        arr = np.asarray(list(vec) if not isinstance(vec, np.ndarray) else vec, dtype=np.float64).reshape(-1)
        if self.d_v is None:
            self.d_v = arr.size
        if arr.size != self.d_v:
            raise FeatureFileError(f"image {image_id!r} has width {arr.size}, expected {self.d_v}")
        if image_id in self.features:
            raise FeatureFileError(f"duplicate image id {image_id!r}")
        self.features[image_id] = arr

    def __len__(self) -> int:
        return len(self.features)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.features

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self.features[image_id]
        except KeyError:
            raise UnknownImageError(f"unknown image id {image_id!r}") from None

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for image_id in sorted(self.features):
                vals = ",".join(repr(float(x)) for x in self.features[image_id])
                fh.write(f"{image_id}\t{vals}\n")


def load_features(path: str | Path, d_v: int | None = None) -> VisualFeatureStore:
    """Read ``image_id<TAB>v1,v2,...`` lines; width is taken from the first record."""
    store = VisualFeatureStore(d_v=d_v)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise FeatureFileError(f"{path}:{lineno}: expected 'image_id<TAB>v1,...,vd'")
            try:
                vec = [float(x) for x in parts[1].split(",")]
            except ValueError as exc:
                raise FeatureFileError(f"{path}:{lineno}: {exc}") from None
            store.add(parts[0], vec)
    return store


def pool_dialogue_visuals(image_ids: Iterable[str], store: VisualFeatureStore) -> np.ndarray:
    """Mean image vector as a 1 x d_v array; zeros when no images are given."""
    ids = list(image_ids)
    if store.d_v is None:
        raise FeatureFileError("store width unknown; pass d_v when creating an empty store")
    if not ids:
        return np.zeros((1, store.d_v))
    return np.mean([store[i] for i in ids], axis=0).reshape(1, -1)
