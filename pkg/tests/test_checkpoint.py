# tests/test_checkpoint.py
import numpy as np
import pytest

from app.errors import FingerprintMismatchError, FormatVersionError, PayloadSizeError, TruncatedPayloadError
from app.schemas import TrainConfig
from app.services.checkpoint import load_checkpoint, read_header, save_checkpoint
from app.services.encoder import build_encoder, encode
from app.services.siamese import PairBatch, SiamStep, train_step
from tests.conftest import tiny_encoder_config


def pairs(n_steps, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n_steps):
        x1 = r.uniform(0, 255, size=(2, 1, 8, 8, 8))
        out.append(PairBatch(x1, np.clip(x1 + r.normal(0, 10, size=x1.shape), 0, 255)))
    return out


class TestCheckpoint:

    def test_round_trip_encodes_identically(self, tmp_path, tiny_state, rng):
        path = save_checkpoint(tmp_path / "c.rsc", tiny_state)
        state, opt = load_checkpoint(path, tiny_state.config)
        assert opt is None
        assert state.fingerprint == tiny_state.fingerprint
        for name, arr in tiny_state.params.items():
            np.testing.assert_array_equal(state.params[name], arr)
            assert state.params[name].dtype == arr.dtype
        x = rng.uniform(0, 255, size=(3, 1, 8, 8, 8))
        np.testing.assert_array_equal(encode(state, x), encode(tiny_state, x))

    def test_header(self, tmp_path, tiny_state):
        save_checkpoint(tmp_path / "c.rsc", tiny_state)
        header, payload = read_header(tmp_path / "c.rsc")
        assert header["fingerprint"] == tiny_state.fingerprint
        assert header["payload_bytes"] == len(payload)
        assert {t["group"] for t in header["tensors"]} == {"params", "buffers"}

    def test_fingerprint_mismatch(self, tmp_path, tiny_state):
        save_checkpoint(tmp_path / "c.rsc", tiny_state)
        with pytest.raises(FingerprintMismatchError):
            load_checkpoint(tmp_path / "c.rsc", tiny_encoder_config(representation_dim=16))

    def test_truncated(self, tmp_path, tiny_state):
        path = save_checkpoint(tmp_path / "c.rsc", tiny_state)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, tiny_state):
        path = save_checkpoint(tmp_path / "c.rsc", tiny_state)
        path.write_bytes(path.read_bytes() + b"\x01")
        with pytest.raises(PayloadSizeError):
            load_checkpoint(path)

    def test_version(self, tmp_path, tiny_state):
        path = save_checkpoint(tmp_path / "c.rsc", tiny_state)
        raw = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 7', 1)
        path.write_bytes(raw)
        with pytest.raises(FormatVersionError):
            load_checkpoint(path)

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_config):
        train = TrainConfig(lr=1e-3)
        batches = pairs(4)

        straight = SiamStep.start(build_encoder(tiny_config, seed=0), train)
        for pair in batches:
            train_step(straight, pair)

        first = SiamStep.start(build_encoder(tiny_config, seed=0), train)
        for pair in batches[:2]:
            train_step(first, pair)
        save_checkpoint(tmp_path / "mid.rsc", first.active, first.optimizer)

        state, opt = load_checkpoint(tmp_path / "mid.rsc", tiny_config)
        assert state.step == 2 and opt.t == first.optimizer.t
        resumed = SiamStep(active=state, optimizer=opt, index=state.step, frozen_bn_mode=train.frozen_bn_mode)
        for pair in batches[2:]:
            train_step(resumed, pair)

        assert resumed.index == straight.index == 4
        for name in straight.active.params:
            np.testing.assert_array_equal(resumed.active.params[name], straight.active.params[name])
        for name in straight.active.buffers:
            np.testing.assert_array_equal(resumed.active.buffers[name], straight.active.buffers[name])
