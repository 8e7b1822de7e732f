# app/services/checkpoint.py
"""
Encoder checkpoints.

  line 1   JSON header: format_version, encoder config, fingerprint, seed, step,
           adam hyper-parameters + t, and a tensor manifest
           [{group, name, shape, dtype, offset, nbytes}, ...]
  payload  raw little-endian tensor bytes at the manifest offsets

Groups: params, buffers, adam_m, adam_v. Every round trip is bit-exact.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app.errors import (
    DataError, FingerprintMismatchError, FormatVersionError, PayloadSizeError, TruncatedPayloadError,
)
from app.schemas import EncoderConfig
from app.services.encoder import EncoderState
from app.services.tensor_core import AdamState, Array

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GROUPS = ("params", "buffers", "adam_m", "adam_v")


def _groups(state: EncoderState, optimizer: Optional[AdamState]) -> Dict[str, Dict[str, Array]]:
    out = {"params": state.params, "buffers": state.buffers}
    if optimizer is not None:
        out["adam_m"] = optimizer.m
        out["adam_v"] = optimizer.v
    return out


def save_checkpoint(path: Union[str, Path], state: EncoderState,
                    optimizer: Optional[AdamState] = None) -> Path:
    path = Path(path)
    manifest: List[dict] = []
    chunks: List[bytes] = []
    offset = 0
    for group, tensors in _groups(state, optimizer).items():
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            dtype = arr.dtype.newbyteorder("<")
            raw = arr.astype(dtype, copy=False).tobytes()
            manifest.append({"group": group, "name": name, "shape": list(arr.shape),
                             "dtype": dtype.str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.model_dump(mode="json"),
        "fingerprint": state.fingerprint,
        "seed": state.seed,
        "step": state.step,
        "adam": None if optimizer is None else {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay, "t": optimizer.t,
        },
        "payload_bytes": offset,
        "tensors": manifest,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for raw in chunks:
            fh.write(raw)
    logger.info("[checkpoint] saved step=%d tensors=%d -> %s", state.step, len(manifest), path)
    return path


def read_header(path: Union[str, Path]) -> Tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise TruncatedPayloadError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable checkpoint header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"{path}: checkpoint version {header.get('format_version')!r}, expected {CHECKPOINT_VERSION}")
    payload = raw[newline + 1:]
    declared = int(header["payload_bytes"])
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise PayloadSizeError(f"{path}: {len(payload) - declared} trailing bytes")
    return header, payload


def load_checkpoint(path: Union[str, Path],
                    expected: Optional[EncoderConfig] = None) -> Tuple[EncoderState, Optional[AdamState]]:
    """Restores encoder state (and optimizer state when saved).

    With `expected`, the stored config fingerprint must match it."""
    header, payload = read_header(path)
    config = EncoderConfig.model_validate(header["config"])
    stored = header["fingerprint"]
    if config.fingerprint() != stored:
        raise FingerprintMismatchError(stored, config.fingerprint())
    if expected is not None and expected.fingerprint() != stored:
        raise FingerprintMismatchError(expected.fingerprint(), stored)

    groups: Dict[str, Dict[str, Array]] = {g: {} for g in GROUPS}
    for t in header["tensors"]:
        if t["group"] not in groups:
            raise DataError(f"{path}: unknown tensor group {t['group']!r}")
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise TruncatedPayloadError(f"{path}: tensor {t['name']} truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        groups[t["group"]][t["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    state = EncoderState(config, int(header["seed"]), groups["params"], groups["buffers"], int(header["step"]))
    optimizer = None
    if header.get("adam") is not None:
        a = header["adam"]
        optimizer = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                              weight_decay=a["weight_decay"], t=int(a["t"]),
                              m=groups["adam_m"], v=groups["adam_v"])
    logger.info("[checkpoint] loaded step=%d fingerprint=%s from %s", state.step, stored, path)
    return state, optimizer
