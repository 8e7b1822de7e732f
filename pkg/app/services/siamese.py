# app/services/siamese.py
"""
Siamese pretraining: two augmented views, a frozen copy of the encoder for
the targets, symmetrized negative-cosine loss with per-sample weights.

    l_i  = 1/2 S(p(E_a(x1)), E_f(x2)) + 1/2 S(p(E_a(x2)), E_f(x1))
    loss = sum(w_i * l_i) / sum(w_i)

E_f is a snapshot of E_a taken at the start of every step; its outputs are
constants for the backward pass, so it never receives gradient.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from app.errors import NumericError, ShapeError
from app.schemas import StepLogEntry, TrainConfig
from app.services.encoder import (
    EncoderState, backward_encoder, backward_head, encode, encode_with_tape, predict_with_tape,
)
from app.services.tensor_core import AdamState, Array, Grads, adam_step, add_grads

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class PairBatch:
    x1: Array
    x2: Array
    weights: Optional[Array] = None

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ShapeError(f"views differ in shape: {self.x1.shape} vs {self.x2.shape}")
        n = self.x1.shape[0]
        if self.weights is None:
            self.weights = np.ones(n, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n,):
            raise ShapeError(f"{len(self.weights)} weights for a batch of {n}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise NumericError("sample weights must be finite and non-negative")

    @property
    def size(self) -> int:
        return int(self.x1.shape[0])


@dataclass
class SiamStep:
    active: EncoderState
    optimizer: AdamState
    frozen: Optional[EncoderState] = None
    index: int = 0
    frozen_bn_mode: str = "train"
    last_reps: Optional[Array] = field(default=None, repr=False)

    @classmethod
    def start(cls, state: EncoderState, train: TrainConfig) -> "SiamStep":
        opt = AdamState(lr=train.lr, beta1=train.beta1, beta2=train.beta2,
                        eps=train.adam_eps, weight_decay=train.weight_decay)
        return cls(active=state, optimizer=opt, index=state.step, frozen_bn_mode=train.frozen_bn_mode)

    def sync_frozen(self) -> EncoderState:
        self.frozen = self.active.snapshot()
        return self.frozen


@dataclass
class StepResult:
    loss: float
    grads: Grads
    reps: Array
    per_sample: Array = field(repr=False, default=None)


# -------------------------------
# loss
# -------------------------------
def _normalize(v: Array) -> Tuple[Array, Array]:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise NumericError("cosine undefined for a zero-norm vector")
    return v / norms, norms


def negative_cosine(t: Array, r: Array) -> float:
    t_hat, _ = _normalize(np.asarray(t, dtype=np.float64))
    r_hat, _ = _normalize(np.asarray(r, dtype=np.float64))
    return float(-np.sum(t_hat * r_hat))


def negative_cosine_rows(t: Array, r: Array) -> Tuple[Array, Array]:
    """Row-wise S(t_i, r_i) and dS/dt; r is a constant."""
    if t.shape != r.shape:
        raise ShapeError(f"cosine operands differ in shape: {t.shape} vs {r.shape}")
    t64 = np.asarray(t, dtype=np.float64)
    t_hat, t_norm = _normalize(t64)
    r_hat, _ = _normalize(np.asarray(r, dtype=np.float64))
    cos = np.sum(t_hat * r_hat, axis=1)
    dt = -(r_hat - cos[:, None] * t_hat) / t_norm
    return -cos, dt


def symmetrized_objective(p1: Array, p2: Array, r1: Array, r2: Array,
                          weights: Optional[Array] = None) -> Tuple[float, Array, Array, Array]:
    """Returns (loss, dloss/dp1, dloss/dp2, per-sample loss)."""
    n = p1.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0.0:
        raise NumericError("all sample weights are zero")
    s12, g1 = negative_cosine_rows(p1, r2)
    s21, g2 = negative_cosine_rows(p2, r1)
    per_sample = 0.5 * s12 + 0.5 * s21
    loss = float(np.dot(w, per_sample) / total)
    scale = (w / total)[:, None] * 0.5
    return loss, (scale * g1).astype(p1.dtype), (scale * g2).astype(p2.dtype), per_sample


def symmetrized_loss(step: SiamStep, pair: PairBatch) -> StepResult:
    frozen = step.frozen if step.frozen is not None else step.sync_frozen()
    active = step.active
    r1 = encode(frozen, pair.x1, step.frozen_bn_mode)
    r2 = encode(frozen, pair.x2, step.frozen_bn_mode)

    z1, enc_tape1 = encode_with_tape(active, pair.x1, "train")
    p1, head_tape1 = predict_with_tape(active, z1, "train")
    z2, enc_tape2 = encode_with_tape(active, pair.x2, "train")
    p2, head_tape2 = predict_with_tape(active, z2, "train")

    loss, dp1, dp2, per_sample = symmetrized_objective(p1, p2, r1, r2, pair.weights)

    grads: Grads = {}
    for dp, head_tape, enc_tape in ((dp1, head_tape1, enc_tape1), (dp2, head_tape2, enc_tape2)):
        dz, g_head = backward_head(active, dp, head_tape)
        _, g_enc = backward_encoder(active, dz, enc_tape)
        add_grads(grads, g_head)
        add_grads(grads, g_enc)
    return StepResult(loss=loss, grads=grads, reps=z1, per_sample=per_sample)


def train_step(step: SiamStep, pair: PairBatch) -> Tuple[float, SiamStep]:
    """One optimizer update. Mutates and returns `step`."""
    step.sync_frozen()
    try:
        result = symmetrized_loss(step, pair)
        adam_step(step.active.params, result.grads, step.optimizer)
    except NumericError as exc:
        raise exc.at_step(step.index) from exc
    step.index += 1
    step.active.step = step.index
    step.last_reps = result.reps
    return result.loss, step


def collapse_metric(reps: Array) -> float:
    """Mean per-dimension std of the L2-normalized rows; ~0 means constant output."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise ShapeError(f"collapse metric needs an N x d matrix with N >= 2, got {reps.shape}")
    norms = np.maximum(np.linalg.norm(reps, axis=1, keepdims=True), NORM_EPS)
    return float(np.mean(np.std(reps / norms, axis=0)))


# -------------------------------
# loop
# -------------------------------
@dataclass
class PretrainSummary:
    steps: int
    losses: List[float]
    final_loss: Optional[float]
    seconds: float


def run_pretraining(step: SiamStep, batches: Iterable[Tuple[PairBatch, str]],
                    step_log: Optional[Path] = None,
                    on_epoch: Optional[Callable[[int], None]] = None,
                    steps_per_epoch: int = 0) -> PretrainSummary:
    """Drives train_step over (pair, mode) items and appends one JSON line per step."""
    t0 = time.time()
    losses: List[float] = []
    fh = open(step_log, "a", encoding="utf-8") if step_log else None
    try:
        for pair, mode in batches:
            loss, step = train_step(step, pair)
            losses.append(loss)
            collapse = collapse_metric(step.last_reps) if pair.size >= 2 else 0.0
            entry = StepLogEntry(step=step.index, loss=loss, collapse_metric=collapse,
                                 lr=step.optimizer.lr, weights_min=float(pair.weights.min()),
                                 weights_max=float(pair.weights.max()), batch_size=pair.size, mode=mode)
            if fh:
                fh.write(entry.model_dump_json() + "\n")
            logger.debug("[pretrain] step=%d loss=%.4f mode=%s", step.index, loss, mode)
            if steps_per_epoch and step.index % steps_per_epoch == 0:
                epoch = step.index // steps_per_epoch
                logger.info("[pretrain] epoch=%d step=%d loss=%.4f collapse=%.4f",
                            epoch, step.index, loss, collapse)
                if on_epoch:
                    on_epoch(epoch)
    finally:
        if fh:
            fh.close()
    return PretrainSummary(steps=len(losses), losses=losses,
                           final_loss=losses[-1] if losses else None, seconds=time.time() - t0)
