# app/services/volumes.py
"""
Volume file format, dataset manifests and the synthetic phantom generator.

Volume file (.rsv):
  line 1   JSON header, utf-8, terminated by b"\\n"
           {"format": "rsv", "format_version": 1, "id", "label", "extents": [D, H, W],
            "channels": C, "has_mask": bool, "rescale": {...}, "payload_bytes": n}
  payload  C*D*H*W little-endian float32 intensities (channel-major, C order),
           then D*H*W uint8 mask bytes when has_mask
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from app.errors import (
    DataError, FormatVersionError, PayloadSizeError, ShapeError, TruncatedPayloadError,
)
from app.schemas import DatasetManifest, ManifestEntry, SynthSpec
from app.services import seeding
from app.services.tensor_core import Array

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
VOLUME_SUFFIX = ".rsv"
MANIFEST_NAME = "manifest.json"
VOLUME_DIR = "volumes"
INTENSITY_MAX = 255.0

PathLike = Union[str, Path]


@dataclass
class Volume:
    data: Array
    mask: Optional[Array] = None
    label: int = 0
    id: str = ""
    rescale: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim not in (3, 4):
            raise ShapeError(f"volume data must be 3D or 4D, got shape {self.data.shape}")
        if self.mask is not None and self.mask.shape != self.extents:
            raise ShapeError(f"mask shape {self.mask.shape} != volume extents {self.extents}")

    @property
    def extents(self) -> tuple:
        return tuple(self.data.shape[-3:])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else int(self.data.shape[0])

    def as_input(self) -> Array:
        """C x D x H x W float32."""
        d = self.data if self.data.ndim == 4 else self.data[None]
        return d.astype(np.float32, copy=False)

    def first_channel(self) -> Array:
        return self.data if self.data.ndim == 3 else self.data[0]

    def mask_or_full(self) -> Array:
        return self.mask if self.mask is not None else np.ones(self.extents, dtype=bool)


# -------------------------------
# file format
# -------------------------------
def _payload_size(extents: Sequence[int], channels: int, has_mask: bool) -> int:
    voxels = int(np.prod(extents))
    return voxels * channels * 4 + (voxels if has_mask else 0)


def save_volume(path: PathLike, vol: Volume) -> None:
    path = Path(path)
    header = {
        "format": "rsv",
        "format_version": FORMAT_VERSION,
        "id": vol.id,
        "label": int(vol.label),
        "extents": [int(e) for e in vol.extents],
        "channels": vol.channels,
        "has_mask": vol.mask is not None,
        "rescale": vol.rescale,
        "payload_bytes": _payload_size(vol.extents, vol.channels, vol.mask is not None),
    }
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    if vol.mask is not None:
        payload += np.ascontiguousarray(vol.mask, dtype=np.uint8).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_volume(path: PathLike) -> Volume:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise TruncatedPayloadError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable header: {e}") from e

    version = header.get("format_version")
    if header.get("format") != "rsv" or version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")

    extents = tuple(int(e) for e in header["extents"])
    channels = int(header.get("channels", 1))
    has_mask = bool(header["has_mask"])
    declared = int(header["payload_bytes"])
    expected = _payload_size(extents, channels, has_mask)
    if declared != expected:
        raise PayloadSizeError(f"{path}: header declares {declared} payload bytes, extents imply {expected}")
    payload = raw[newline + 1:]
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise PayloadSizeError(f"{path}: {len(payload) - declared} trailing bytes after payload")

    n_float = int(np.prod(extents)) * channels
    data = np.frombuffer(payload, dtype="<f4", count=n_float).astype(np.float32)
    data = data.reshape(extents if channels == 1 else (channels,) + extents)
    mask = None
    if has_mask:
        mask = np.frombuffer(payload, dtype=np.uint8, offset=n_float * 4).reshape(extents).astype(bool)
    return Volume(data=data, mask=mask, label=int(header.get("label", 0)), id=header.get("id", ""),
                  rescale=header.get("rescale", {}))


# -------------------------------
# intensity
# -------------------------------
@dataclass
class RescaleResult:
    data: Array
    degenerate: bool
    source_min: float
    source_max: float

    def provenance(self) -> Dict[str, Any]:
        return {"source_min": self.source_min, "source_max": self.source_max, "degenerate": self.degenerate}


def rescale_intensity(data: Array, lo: float = 0.0, hi: float = INTENSITY_MAX) -> RescaleResult:
    """Linear map of [min, max] onto [lo, hi]; a constant input maps to lo."""
    if hi <= lo:
        raise DataError(f"rescale target needs hi > lo, got [{lo}, {hi}]")
    v = np.asarray(data, dtype=np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    if vmax <= vmin:
        logger.warning("[volumes] constant volume (value %.4g) rescaled to %g", vmin, lo)
        return RescaleResult(np.full(v.shape, lo, dtype=np.float32), True, vmin, vmax)
    out = lo + (v - vmin) * ((hi - lo) / (vmax - vmin))
    # pin the endpoints against rounding
    out[v == vmin] = lo
    out[v == vmax] = hi
    return RescaleResult(out.astype(np.float32), False, vmin, vmax)


# -------------------------------
# manifest / dataset
# -------------------------------
@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    volumes: List[Volume]

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def labels(self) -> Array:
        return np.asarray([e.label for e in self.manifest.entries], dtype=np.int64)

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.manifest.entries]

    @property
    def class_names(self) -> List[str]:
        names: Dict[int, str] = {}
        for e in self.manifest.entries:
            names.setdefault(e.label, e.class_name)
        return [names[k] for k in sorted(names)]

    def stack(self) -> Array:
        """N x C x D x H x W float32."""
        shapes = {v.as_input().shape for v in self.volumes}
        if len(shapes) > 1:
            raise ShapeError(f"dataset mixes volume shapes: {sorted(shapes)}")
        return np.stack([v.as_input() for v in self.volumes])


def save_manifest(root: PathLike, manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(root: PathLike) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    if manifest.format_version != FORMAT_VERSION:
        raise FormatVersionError(f"manifest version {manifest.format_version}, expected {FORMAT_VERSION}")
    return manifest


def load_dataset(root: PathLike) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    volumes = []
    for entry in manifest.entries:
        path = root / entry.path
        if not path.exists():
            raise DataError(f"manifest entry {entry.id}: {entry.path} not found")
        vol = load_volume(path)
        vol.label = entry.label
        vol.id = entry.id
        volumes.append(vol)
    logger.info("[volumes] loaded %d volumes from %s", len(volumes), root)
    return Dataset(root, manifest, volumes)


# -------------------------------
# synthetic phantoms
# -------------------------------
def class_counts(ratio: Sequence[float], count: Optional[int]) -> List[int]:
    """Largest-remainder apportionment of `count` by `ratio`."""
    ratio = np.asarray(ratio, dtype=np.float64)
    total = int(round(ratio.sum())) if count is None else int(count)
    quotas = ratio / ratio.sum() * total
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    # ties go to the earlier class
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    if np.any(counts < 1):
        raise DataError(f"count {total} too small to honor ratio {list(ratio)}")
    return [int(c) for c in counts]


def phantom(extent: int, class_index: int, n_classes: int, rng: np.random.Generator) -> Volume:
    """Blurred ellipsoid lesion on a noisy background.

    Class index drives eccentricity, internal texture frequency and rim contrast."""
    t = class_index / max(1, n_classes - 1)
    grid = np.indices((extent,) * 3, dtype=np.float64)
    center = (extent - 1) / 2.0 + rng.uniform(-1.0, 1.0, size=3)
    radius = 0.3 * extent
    squash = 1.0 - 0.45 * t
    axes = radius * np.array([1.0, squash, squash]) * rng.uniform(0.9, 1.1, size=3)
    rel = (grid - center[:, None, None, None]) / axes[:, None, None, None]
    rho = np.sqrt(np.sum(rel ** 2, axis=0))
    mask = rho <= 1.0

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    freq = 0.08 + 0.25 * t
    phase = rng.uniform(0, 2 * np.pi)
    texture = np.sin(2 * np.pi * freq * np.tensordot(direction, grid, axes=1) + phase)

    rim = (rho > 0.7) & mask
    img = 20.0 + rng.normal(0.0, 4.0, size=mask.shape)
    img[mask] = 110.0 + 35.0 * texture[mask]
    img[rim] += 20.0 + 80.0 * t
    img = ndimage.gaussian_filter(img, sigma=0.7, mode="nearest")

    rescaled = rescale_intensity(img)
    return Volume(data=rescaled.data, mask=mask, label=class_index, rescale=rescaled.provenance())


def synth_dataset(spec: SynthSpec, out_dir: PathLike) -> DatasetManifest:
    out_dir = Path(out_dir)
    counts = class_counts(spec.ratio, spec.count)
    entries = []
    for c, (name, n) in enumerate(zip(spec.classes, counts)):
        for i in range(n):
            vol = phantom(spec.extent, c, len(spec.classes), seeding.rng(spec.seed, "data", c, i))
            vol.id = f"{name}_{i:04d}"
            rel = f"{VOLUME_DIR}/{vol.id}{VOLUME_SUFFIX}"
            save_volume(out_dir / rel, vol)
            entries.append(ManifestEntry(id=vol.id, path=rel, label=c, class_name=name))
    manifest = DatasetManifest(entries=entries, class_counts=dict(zip(spec.classes, counts)),
                               seed=spec.seed, synth=spec)
    save_manifest(out_dir, manifest)
    logger.info("[synth] wrote %d volumes to %s counts=%s", len(entries), out_dir, manifest.class_counts)
    return manifest
