# app/services/encoder.py
"""
3D encoder + predictor head.

Layer stack (paper preset / desk preset):
  conv1 3x3x3 + bn + relu          96^3 x 32   / 16^3 x 8
  residual bottleneck x2           96^3 x 32   / 16^3 x 8
  pool3                            32^3        / 8^3
  conv4 + bn + relu, pool4         10^3 x 64   / 4^3 x 16
  conv5 + bn + relu, pool5          3^3 x 128  / 2^3 x 32
  conv6 + bn + relu                 3^3 x 256  / 2^3 x 64
  global average pool
  dense7 + bn + relu                324        / 48
  dense8                            256        / 32   <- representation
Predictor: repr -> repr/4 (bn, relu) -> repr.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, List, Literal, Optional, Tuple

import numpy as np

from app.errors import ShapeError
from app.schemas import EncoderConfig
from app.services import seeding
from app.services.tensor_core import (
    Array, BatchNorm, Conv3d, Dense, GlobalAvgPool3d, Grads, MaxPool3d, Params, ReLU,
    ResidualBlock, Sequential, parameter_count,
)

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


@dataclass
class EncoderState:
    """Learnable parameters (encoder + predictor) and batch-norm running statistics."""
    config: EncoderConfig
    seed: int
    params: Params
    buffers: Params
    step: int = 0

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def snapshot(self) -> "EncoderState":
        return EncoderState(self.config, self.seed,
                            {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()},
                            self.step)

    def encoder_param_names(self) -> List[str]:
        return [k for k in self.params if not k.startswith("pred.")]

    def predictor_param_names(self) -> List[str]:
        return [k for k in self.params if k.startswith("pred.")]


def _stage(name: str, c_in: int, c_out: int, cfg: EncoderConfig) -> List:
    return [
        Conv3d(f"conv{name}", c_in, c_out, 3),
        BatchNorm(f"bn{name}", c_out, cfg.bn_eps, cfg.bn_momentum),
        ReLU(f"relu{name}"),
    ]


@lru_cache(maxsize=32)
def build_networks(cfg: EncoderConfig) -> Tuple[Sequential, Sequential]:
    stem, inner, w4, w5, w6 = cfg.channel_widths
    layers: List[Any] = _stage("1", cfg.in_channels, stem, cfg)
    for i in range(cfg.residual_blocks):
        layers.append(ResidualBlock(f"res{i + 2}", stem, inner, zero_init=cfg.zero_init_residual))
    layers.append(MaxPool3d("pool3", cfg.pool_kernel))
    layers += _stage("4", stem, w4, cfg) + [MaxPool3d("pool4", cfg.pool_kernel)]
    layers += _stage("5", w4, w5, cfg) + [MaxPool3d("pool5", cfg.pool_kernel)]
    layers += _stage("6", w5, w6, cfg)
    layers += [
        GlobalAvgPool3d("gap"),
        Dense("dense7", w6, cfg.hidden_dim, bias=False),
        BatchNorm("bn7", cfg.hidden_dim, cfg.bn_eps, cfg.bn_momentum),
        ReLU("relu7"),
        Dense("dense8", cfg.hidden_dim, cfg.representation_dim),
    ]
    predictor = Sequential("pred", [
        Dense("pred.fc1", cfg.representation_dim, cfg.predictor_width, bias=False),
        BatchNorm("pred.bn1", cfg.predictor_width, cfg.bn_eps, cfg.bn_momentum),
        ReLU("pred.relu1"),
        Dense("pred.fc2", cfg.predictor_width, cfg.representation_dim),
    ])
    return Sequential("encoder", layers), predictor


def layer_extents(cfg: EncoderConfig) -> List[Tuple[str, int]]:
    """Spatial extent after each stage, without running the network."""
    e = cfg.input_extent
    out = [("input", e), ("conv1", e)]
    if cfg.residual_blocks:
        out.append(("residual", e))
    for stage in ("3", "4", "5"):
        if stage != "3":
            out.append((f"conv{stage}", e))
        if e < cfg.pool_kernel:
            raise ShapeError(f"extent {e} smaller than pool kernel {cfg.pool_kernel} at pool{stage}")
        e //= cfg.pool_kernel
        out.append((f"pool{stage}", e))
    out += [("conv6", e), ("gap", 1)]
    return out


def build_encoder(cfg: EncoderConfig, seed: int) -> EncoderState:
    layer_extents(cfg)
    encoder, predictor = build_networks(cfg)
    rng = seeding.rng(seed, "init")
    dtype = np.dtype(cfg.dtype)
    params = encoder.init_params(rng, dtype)
    params.update(predictor.init_params(rng, dtype))
    buffers = encoder.init_buffers(dtype)
    buffers.update(predictor.init_buffers(dtype))
    logger.debug("[encoder] built preset=%s params=%d fingerprint=%s",
                 cfg.preset, parameter_count(params), cfg.fingerprint())
    return EncoderState(cfg, seed, params, buffers)


def _check_batch(state: EncoderState, batch: Array) -> None:
    cfg = state.config
    expected = (cfg.in_channels,) + (cfg.input_extent,) * 3
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"batch shape {tuple(batch.shape)} does not match encoder input N x {expected}")


def encode_with_tape(state: EncoderState, batch: Array, mode: Mode = "train") -> Tuple[Array, Any]:
    _check_batch(state, batch)
    encoder, _ = build_networks(state.config)
    x = np.asarray(batch, dtype=state.dtype)
    return encoder.forward(x, state.params, state.buffers, mode == "train")


def encode(state: EncoderState, batch: Array, mode: Mode = "eval") -> Array:
    reps, _ = encode_with_tape(state, batch, mode)
    return reps


def backward_encoder(state: EncoderState, dreps: Array, tape: Any) -> Tuple[Array, Grads]:
    encoder, _ = build_networks(state.config)
    return encoder.backward(dreps, tape, state.params)


def predict_with_tape(state: EncoderState, reps: Array, mode: Mode = "train") -> Tuple[Array, Any]:
    if reps.ndim != 2 or reps.shape[1] != state.config.representation_dim:
        raise ShapeError(
            f"predictor expects N x {state.config.representation_dim}, got {tuple(reps.shape)}")
    _, predictor = build_networks(state.config)
    return predictor.forward(reps, state.params, state.buffers, mode == "train")


def predict_head(state: EncoderState, reps: Array, mode: Mode = "train") -> Array:
    out, _ = predict_with_tape(state, reps, mode)
    return out


def backward_head(state: EncoderState, dout: Array, tape: Any) -> Tuple[Array, Grads]:
    _, predictor = build_networks(state.config)
    return predictor.backward(dout, tape, state.params)


def encode_in_chunks(state: EncoderState, volumes: Array, chunk: Optional[int] = 16) -> Array:
    """Eval-mode encoding; samples are independent so chunking does not change results."""
    if len(volumes) == 0:
        return np.zeros((0, state.config.representation_dim), dtype=state.dtype)
    step = chunk or len(volumes)
    parts = [encode(state, volumes[i:i + step], "eval") for i in range(0, len(volumes), step)]
    return np.concatenate(parts, axis=0)
