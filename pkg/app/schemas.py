# app/schemas.py
"""
pydantic models for every configuration section and every machine-readable
output (step log, cluster diagnostics, manifests, metrics reports).
"""
import hashlib
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ScalePreset = Literal["paper", "desk", "custom"]
BatchMode = Literal["none", "re", "se"]
FeatureSet = Literal["trad", "ssl", "concat"]


# -------------------------------
# Encoder
# -------------------------------
class EncoderConfig(BaseModel):
    """Stem conv, residual bottlenecks, three conv+pool stages, GAP, two dense layers."""
    model_config = ConfigDict(frozen=True)

    preset: ScalePreset = "desk"
    input_extent: int = Field(16, ge=1, description="cube side in voxels")
    in_channels: int = Field(1, ge=1, description="stacked modalities")
    # stem, residual inner, stage 4, stage 5, stage 6
    channel_widths: Tuple[int, int, int, int, int] = (8, 8, 16, 32, 64)
    residual_blocks: int = Field(2, ge=0)
    pool_kernel: int = Field(2, ge=1)
    hidden_dim: int = Field(48, ge=1, description="width of the dense layer before the representation")
    representation_dim: int = Field(32, gt=0)
    predictor_hidden_dim: Optional[int] = None
    zero_init_residual: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("channel_widths")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("channel widths must be positive")
        return v

    @model_validator(mode="after")
    def _pooling_cascade_fits(self):
        extent = self.input_extent
        for _ in range(3):
            if extent < self.pool_kernel:
                raise ValueError(
                    f"input_extent {self.input_extent} incompatible with the pooling cascade "
                    f"(kernel {self.pool_kernel})")
            extent //= self.pool_kernel
        return self

    @property
    def predictor_width(self) -> int:
        return self.predictor_hidden_dim or max(1, self.representation_dim // 4)

    def fingerprint(self) -> str:
        payload = self.model_dump_json()
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def paper(cls, **overrides) -> "EncoderConfig":
        base = dict(preset="paper", input_extent=96, channel_widths=(32, 32, 64, 128, 256),
                    pool_kernel=3, hidden_dim=324, representation_dim=256)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        base = dict(preset="desk", input_extent=16, channel_widths=(8, 8, 16, 32, 64),
                    pool_kernel=2, hidden_dim=48, representation_dim=32)
        base.update(overrides)
        return cls(**base)


# -------------------------------
# Augmentation
# -------------------------------
class AugmentPolicy(BaseModel):
    rotation_deg: Tuple[float, float] = (-20.0, 20.0)
    scale: Tuple[float, float] = (0.7, 1.3)
    shift: Tuple[float, float] = (-0.05, 0.05)
    gamma: Tuple[float, float] = (0.7, 1.5)
    sharpen_amount: Tuple[float, float] = (0.5, 1.5)
    sharpen_sigma: float = 1.0
    blur_sigma: Tuple[float, float] = (0.5, 1.0)
    noise_sigma: float = 3.0
    p_affine: float = 0.5
    p_gamma: float = 0.5
    p_sharpen: float = 0.5
    p_blur: float = 0.5
    p_noise: float = 0.5
    ensure_one: bool = Field(True, description="force one transform when none fired")

    @field_validator("rotation_deg", "scale", "shift", "gamma", "sharpen_amount", "blur_sigma")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError(f"range {v} is not ordered")
        return v

    @field_validator("p_affine", "p_gamma", "p_sharpen", "p_blur", "p_noise")
    @classmethod
    def _probability(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"probability {v} outside [0, 1]")
        return v

    @model_validator(mode="after")
    def _positive_scale(self):
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        if self.blur_sigma[0] < 0 or self.noise_sigma < 0 or self.sharpen_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(p_affine=0.0, p_gamma=0.0, p_sharpen=0.0, p_blur=0.0, p_noise=0.0)


# -------------------------------
# Training / imbalance
# -------------------------------
class TrainConfig(BaseModel):
    lr: float = Field(1e-2, ge=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = Field(6, ge=2)
    epochs: int = Field(2, ge=0, description="total epochs, warm-up included")
    iterations: Optional[int] = Field(None, ge=0, description="overrides epochs when set")
    frozen_bn_mode: Literal["train", "eval"] = "train"


class ImbalanceConfig(BaseModel):
    mode: BatchMode = "none"
    k: int = Field(3, ge=0)
    q: int = Field(10, ge=1)
    m: int = Field(6, ge=2)
    kmeans_period: int = Field(1, ge=1, description="re-cluster every n planning iterations")
    re_subsample: bool = Field(True, description="subsample the RE pool to the training batch size")
    warmup_epochs: int = Field(1, ge=0)

    @property
    def pool_size(self) -> int:
        return self.k * self.q

    @model_validator(mode="after")
    def _constraints(self):
        if self.mode == "se":
            if self.m % 2:
                raise ValueError(f"SE batch size m={self.m} must be even")
            if self.k < 2:
                raise ValueError("SE requires >= 2 clusters")
            if self.m * self.k >= self.pool_size:
                raise ValueError(f"m={self.m} must be smaller than N/k={self.pool_size / self.k:g}")
        if self.mode == "re" and self.k < 1:
            raise ValueError("RE requires >= 1 cluster")
        return self


class ExperimentConfig(BaseModel):
    seed: int = 0
    encoder: EncoderConfig = Field(default_factory=EncoderConfig.desk)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    train: TrainConfig = Field(default_factory=TrainConfig)
    imbalance: ImbalanceConfig = Field(default_factory=ImbalanceConfig)


# -------------------------------
# Data
# -------------------------------
class SynthSpec(BaseModel):
    classes: List[str] = Field(default_factory=lambda: ["class_0", "class_1"])
    ratio: List[float] = Field(default_factory=lambda: [250.0, 76.0])
    count: Optional[int] = Field(None, ge=1, description="defaults to the sum of the ratio")
    extent: int = Field(16, ge=8)
    seed: int = 0

    @model_validator(mode="after")
    def _matching_lengths(self):
        if len(self.classes) != len(self.ratio):
            raise ValueError(f"{len(self.classes)} class names for {len(self.ratio)} ratio entries")
        if len(self.classes) < 2:
            raise ValueError("at least two classes are required")
        if any(r <= 0 for r in self.ratio):
            raise ValueError("ratio entries must be positive")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        return self


class ManifestEntry(BaseModel):
    id: str
    path: str
    label: int
    class_name: str


class DatasetManifest(BaseModel):
    format_version: int = 1
    entries: List[ManifestEntry]
    class_counts: Dict[str, int]
    seed: Optional[int] = None
    synth: Optional[SynthSpec] = None

    @field_validator("entries")
    @classmethod
    def _unique_ids(cls, v):
        ids = [e.id for e in v]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique")
        return v


# -------------------------------
# Logs
# -------------------------------
class StepLogEntry(BaseModel):
    step: int
    loss: float
    collapse_metric: float
    lr: float
    weights_min: float
    weights_max: float
    batch_size: int
    mode: str


class ClusterDiagnostics(BaseModel):
    iteration: int
    inertia: float
    frequencies: List[int]
    chosen_pair: Optional[Tuple[int, int]] = None
    distance: Optional[float] = None


# -------------------------------
# Metrics
# -------------------------------
class FoldMetrics(BaseModel):
    fold: int
    chosen_c: float
    train_counts: Dict[str, int]
    test_counts: Dict[str, int]
    confusion: List[List[int]]
    overall_accuracy: float
    balanced_accuracy: float
    minor_class_accuracy: float
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    auc: float


class MetricsReport(BaseModel):
    feature_set: str
    n_features: int
    classes: List[str]
    positive_class: Optional[str] = None
    minor_class: str
    folds: int
    label_budget: float
    seed: int
    per_fold: List[FoldMetrics]
    overall_accuracy: float
    balanced_accuracy: float
    minor_class_accuracy: float
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    auc: float
