# app/services/radiomics.py
"""
Hand-crafted radiomics over a masked volume, plus the SSL feature block.

Families (names are namespaced so they never collide with SSL columns):
  fo_*     first-order intensity statistics over masked voxels
  shape_*  geometry of the mask only
  glcm_*   gray-level co-occurrence texture, 32 levels, 13 directions pooled
"""
import json
import logging
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage, stats
from scipy.spatial.distance import cdist

from app.errors import EmptyMaskError, ShapeError
from app.schemas import FeatureSet
from app.services.encoder import EncoderState, encode_in_chunks
from app.services.tensor_core import Array
from app.services.volumes import Dataset

logger = logging.getLogger(__name__)

HIST_BINS = 32
GLCM_BINS = 32
SSL_PREFIX = "ssl_"

# the 13 unique unit-step directions in 3D (first non-zero component positive)
OFFSETS: Tuple[Tuple[int, int, int], ...] = tuple(
    o for o in product((-1, 0, 1), repeat=3) if o > (0, 0, 0) and any(o)
)
AXIS_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def _masked(vol: Array, mask: Optional[Array]) -> Tuple[Array, Array]:
    mask = np.ones(vol.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise ShapeError(f"mask shape {mask.shape} != volume shape {vol.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no voxels")
    return np.asarray(vol, dtype=np.float64)[mask], mask


def _histogram_probs(values: Array, bins: int) -> Array:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.array([1.0])
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    return counts / counts.sum()


def _entropy(p: Array) -> float:
    return float(stats.entropy(p, base=2)) if p.size else 0.0


# -------------------------------
# first order
# -------------------------------
def first_order(vol: Array, mask: Optional[Array] = None) -> Dict[str, float]:
    v, _ = _masked(vol, mask)
    mean = v.mean()
    dev = v - mean
    var = float(np.mean(dev ** 2))
    if var > 0:
        skew = float(stats.skew(v))
        kurt = float(stats.kurtosis(v, fisher=False))
    else:
        skew = kurt = 0.0
    p10, p25, p50, p75, p90 = np.percentile(v, [10, 25, 50, 75, 90])
    probs = _histogram_probs(v, HIST_BINS)
    return {
        "fo_mean": float(mean),
        "fo_variance": var,
        "fo_skewness": skew,
        "fo_kurtosis": kurt,
        "fo_median": float(p50),
        "fo_p10": float(p10),
        "fo_p90": float(p90),
        "fo_min": float(v.min()),
        "fo_max": float(v.max()),
        "fo_range": float(v.max() - v.min()),
        "fo_iqr": float(p75 - p25),
        "fo_mad": float(np.mean(np.abs(dev))),
        "fo_rms": float(np.sqrt(np.mean(v ** 2))),
        "fo_energy": float(np.sum(v ** 2)),
        "fo_entropy": _entropy(probs),
        "fo_uniformity": float(np.sum(probs ** 2)),
    }


# -------------------------------
# shape
# -------------------------------
def surface_area(mask: Array) -> int:
    """Number of voxel faces between the mask and its exterior."""
    padded = np.pad(mask.astype(np.int8), 1)
    return int(sum(np.abs(np.diff(padded, axis=a)).sum() for a in range(3)))


def boundary_voxels(mask: Array) -> Array:
    # 6-connected erosion; voxels on the array border count as boundary
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return np.argwhere(mask & ~interior)


def max_diameter(points: Array, chunk: int = 512) -> float:
    if len(points) < 2:
        return 0.0
    pts = points.astype(np.float64)
    return max(float(cdist(pts[start:start + chunk], pts).max()) for start in range(0, len(pts), chunk))


def shape_features(mask: Array) -> Dict[str, float]:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ShapeError(f"mask must be 3D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no voxels")
    volume = float(mask.sum())
    area = float(surface_area(mask))
    coords = np.argwhere(mask)
    spans = coords.max(axis=0) - coords.min(axis=0) + 1
    if len(coords) > 1:
        eig = np.sort(np.linalg.eigvalsh(np.cov(coords.T, bias=True)))[::-1]
    else:
        eig = np.zeros(3)
    elongation = float(np.sqrt(eig[1] / eig[0])) if eig[0] > 0 else 0.0
    flatness = float(np.sqrt(eig[2] / eig[0])) if eig[0] > 0 else 0.0
    return {
        "shape_voxel_volume": volume,
        "shape_surface_area": area,
        "shape_surface_volume_ratio": area / volume,
        "shape_sphericity": float(np.pi ** (1 / 3) * (6 * volume) ** (2 / 3) / area),
        "shape_max_diameter": max_diameter(boundary_voxels(mask)),
        "shape_extent_d": float(spans[0]),
        "shape_extent_h": float(spans[1]),
        "shape_extent_w": float(spans[2]),
        "shape_elongation": elongation,
        "shape_flatness": flatness,
    }


# -------------------------------
# GLCM
# -------------------------------
def quantize(vol: Array, mask: Array, bins: int) -> Array:
    """Levels 1..bins over the masked min..max range; 0 outside the mask."""
    v = np.asarray(vol, dtype=np.float64)
    inside = v[mask]
    lo, hi = inside.min(), inside.max()
    levels = np.zeros(v.shape, dtype=np.int64)
    if hi <= lo:
        levels[mask] = 1
        return levels
    q = np.floor((inside - lo) / (hi - lo) * bins).astype(np.int64)
    levels[mask] = np.clip(q, 0, bins - 1) + 1
    return levels


def _shifted_pairs(levels: Array, offset: Sequence[int]) -> Tuple[Array, Array]:
    src, dst = [], []
    for o, n in zip(offset, levels.shape):
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    a, b = levels[tuple(src)].ravel(), levels[tuple(dst)].ravel()
    keep = (a > 0) & (b > 0)
    return a[keep], b[keep]


def glcm_matrix(vol: Array, mask: Optional[Array] = None, bins: int = GLCM_BINS,
                offsets: Sequence[Sequence[int]] = OFFSETS) -> Array:
    """Symmetric co-occurrence counts summed over all offsets, normalized to sum 1."""
    if bins < 2:
        raise ShapeError(f"GLCM needs at least 2 levels, got {bins}")
    _, mask = _masked(vol, mask)
    if mask.sum() < 2:
        raise EmptyMaskError("GLCM needs at least 2 masked voxels")
    levels = quantize(vol, mask, bins)
    counts = np.zeros((bins, bins), dtype=np.float64)
    for off in offsets:
        a, b = _shifted_pairs(levels, off)
        np.add.at(counts, (a - 1, b - 1), 1.0)
    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        raise EmptyMaskError("no neighbouring voxel pairs inside the mask")
    return counts / total


def glcm_features(vol: Array, mask: Optional[Array] = None, bins: int = GLCM_BINS,
                  offsets: Sequence[Sequence[int]] = OFFSETS) -> Dict[str, float]:
    p = glcm_matrix(vol, mask, bins, offsets)
    i, j = np.indices(p.shape, dtype=np.float64) + 1.0
    px = p.sum(axis=1)
    lv = np.arange(1, bins + 1, dtype=np.float64)
    mu = float(np.sum(lv * px))
    sigma2 = float(np.sum((lv - mu) ** 2 * px))
    if sigma2 > 0:
        correlation = float(np.sum((i - mu) * (j - mu) * p) / sigma2)
    else:
        correlation = 1.0
    diff = np.abs(i - j)
    sums = np.bincount((i + j).astype(int).ravel(), weights=p.ravel())
    return {
        "glcm_contrast": float(np.sum(diff ** 2 * p)),
        "glcm_correlation": correlation,
        "glcm_joint_energy": float(np.sum(p ** 2)),
        "glcm_homogeneity": float(np.sum(p / (1.0 + diff))),
        "glcm_idm": float(np.sum(p / (1.0 + diff ** 2))),
        "glcm_joint_entropy": _entropy(p.ravel()),
        "glcm_joint_average": mu,
        "glcm_dissimilarity": float(np.sum(diff * p)),
        "glcm_cluster_shade": float(np.sum((i + j - 2 * mu) ** 3 * p)),
        "glcm_cluster_prominence": float(np.sum((i + j - 2 * mu) ** 4 * p)),
        "glcm_max_probability": float(p.max()),
        "glcm_sum_entropy": _entropy(sums),
    }


def traditional_features(vol: Array, mask: Optional[Array] = None) -> Dict[str, float]:
    mask = np.ones(vol.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = first_order(vol, mask)
    out.update(shape_features(mask))
    out.update(glcm_features(vol, mask))
    return out


# -------------------------------
# records
# -------------------------------
@dataclass
class FeatureRecord:
    id: str
    label: int
    trad: Dict[str, float]
    ssl: Array

    @property
    def trad_vector(self) -> Array:
        return np.asarray(list(self.trad.values()), dtype=np.float64)

    @property
    def concat(self) -> Array:
        return np.concatenate([self.trad_vector, np.asarray(self.ssl, dtype=np.float64)])

    def vector(self, feature_set: FeatureSet) -> Array:
        if feature_set == "trad":
            return self.trad_vector
        if feature_set == "ssl":
            return np.asarray(self.ssl, dtype=np.float64)
        return self.concat

    def names(self, feature_set: FeatureSet) -> List[str]:
        ssl_names = [f"{SSL_PREFIX}{d:03d}" for d in range(len(self.ssl))]
        if feature_set == "trad":
            return list(self.trad)
        if feature_set == "ssl":
            return ssl_names
        return list(self.trad) + ssl_names


def extract_all(dataset: Dataset, state: Optional[EncoderState] = None,
                feature_set: FeatureSet = "concat") -> List[FeatureRecord]:
    """One record per sample. SSL features come from eval-mode encoding of `state`;
    with no state (trad-only extraction) the SSL block is empty."""
    if feature_set in ("ssl", "concat") and state is None:
        raise ShapeError(f"feature set {feature_set!r} needs an encoder checkpoint")
    ssl = None
    if state is not None and feature_set != "trad":
        cfg = state.config
        expected = (cfg.in_channels,) + (cfg.input_extent,) * 3
        for vol in dataset.volumes:
            if vol.as_input().shape != expected:
                raise ShapeError(
                    f"volume {vol.id} has shape {vol.as_input().shape}, encoder expects {expected}")
        ssl = encode_in_chunks(state, dataset.stack()).astype(np.float64)

    records = []
    for n, vol in enumerate(dataset.volumes):
        trad = {} if feature_set == "ssl" else traditional_features(vol.first_channel(), vol.mask_or_full())
        vec = ssl[n] if ssl is not None else np.zeros(0)
        records.append(FeatureRecord(vol.id, int(vol.label), trad, vec))
    logger.info("[extract] %d records feature_set=%s", len(records), feature_set)
    return records


def records_frame(records: Sequence[FeatureRecord], feature_set: FeatureSet) -> pd.DataFrame:
    if not records:
        raise ShapeError("no feature records")
    names = records[0].names(feature_set)
    rows = [[r.id, r.label] + list(r.vector(feature_set)) for r in records]
    return pd.DataFrame(rows, columns=["id", "label"] + names)


def feature_schema(frame: pd.DataFrame, feature_set: FeatureSet,
                   class_names: Optional[Sequence[str]] = None) -> dict:
    names = [c for c in frame.columns if c not in ("id", "label")]
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "feature table",
        "feature_set": feature_set,
        "class_names": list(class_names or []),
        "columns": ["id", "label"] + names,
        "families": {
            "trad": [n for n in names if not n.startswith(SSL_PREFIX)],
            "ssl": [n for n in names if n.startswith(SSL_PREFIX)],
        },
        "type": "object",
        "properties": dict(
            {"id": {"type": "string"}, "label": {"type": "integer"}},
            **{n: {"type": "number"} for n in names}),
        "required": ["id", "label"] + names,
    }


def write_features(path: Path, records: Sequence[FeatureRecord], feature_set: FeatureSet,
                   class_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """CSV (id, label, features...) plus a <name>.schema.json sidecar."""
    frame = records_frame(records, feature_set)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    sidecar = path.with_suffix(".schema.json")
    sidecar.write_text(json.dumps(feature_schema(frame, feature_set, class_names), indent=2) + "\n", encoding="utf-8")
    return frame


def read_features(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = {"id", "label"} - set(frame.columns)
    if missing:
        raise ShapeError(f"{path}: missing columns {sorted(missing)}")
    return frame


def read_class_names(path: Path) -> List[str]:
    sidecar = Path(path).with_suffix(".schema.json")
    if not sidecar.exists():
        return []
    return list(json.loads(sidecar.read_text(encoding="utf-8")).get("class_names", []))
