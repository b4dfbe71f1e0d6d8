"""Region features and the (region, context) pair vector.

A pair vector is the concatenation of two blocks, one per role:
[appearance ++ bbox geometry] for the region, then the same for the context.
Both blocks pass through one min-max scaler fit on the training corpus, so
region-slot and context-slot dimensions carry independent ranges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scene import CandidateSet, ImageMeta, Region

BBOX_DIM = 5


def bbox_features(region: Region, image: ImageMeta) -> np.ndarray:
    """Normalized geometry: [xmin/W, ymin/H, xmax/W, ymax/H, area ratio]."""
    x0, y0, x1, y1 = region.bbox
    w, h = image.width, image.height
    area = (x1 - x0) * (y1 - y0) / (w * h)
    return np.array([x0 / w, y0 / h, x1 / w, y1 / h, area], dtype=np.float64)


@dataclass(frozen=True)
class Scaler:
    """Affine min-max map onto [-0.5, 0.5], clamping out-of-range inputs.

    Dimensions that were constant at fit time map to 0.
    """

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low", np.asarray(self.low, dtype=np.float64))
        object.__setattr__(self, "high", np.asarray(self.high, dtype=np.float64))
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ValueError("scaler bounds must be 1-d arrays of equal length")
        if np.any(self.high < self.low):
            raise ValueError("scaler high bound below low bound")

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dim {self.dim}, got {x.shape[-1]}")
        span = self.high - self.low
        out = np.zeros_like(x)
        live = span > 0
        clipped = np.clip(x, self.low, self.high)
        out[..., live] = (clipped[..., live] - self.low[live]) / span[live] - 0.5
        return out


def fit_scaler(vectors: Iterable[np.ndarray]) -> Scaler:
    """Per-dimension min/max over raw vectors."""
    mat = np.asarray(list(vectors), dtype=np.float64)
    if mat.size == 0:
        raise ValueError("cannot fit scaler on empty input")
    return Scaler(low=mat.min(axis=0), high=mat.max(axis=0))


def region_block(region: Region, image: ImageMeta) -> np.ndarray:
    """Raw per-role block: appearance followed by bbox geometry."""
    return np.concatenate([region.appearance, bbox_features(region, image)])


def raw_pair_vector(region: Region, context: Region, image: ImageMeta) -> np.ndarray:
    return np.concatenate([region_block(region, image), region_block(context, image)])


def pair_features(
    region: Region, context: Region, image: ImageMeta, scaler: Scaler
) -> np.ndarray:
    """Scaled pair vector, the per-timestep input appended to each embedding."""
    return scaler.apply(raw_pair_vector(region, context, image))


def pair_dim(appearance_dim: int) -> int:
    return 2 * (appearance_dim + BBOX_DIM)


def fit_scaler_from_candidates(
    candidate_sets: Sequence[tuple[ImageMeta, CandidateSet]]
) -> Scaler:
    """Fit over every ordered (proposal, context) pair the training set can form."""
    vectors = []
    for image, cs in candidate_sets:
        blocks = {r.id: region_block(r, image) for r in cs.all_regions}
        for r in cs.proposals:
            for cid in cs.context_ids_for(r.id):
                vectors.append(np.concatenate([blocks[r.id], blocks[cid]]))
    return fit_scaler(vectors)
