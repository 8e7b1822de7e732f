# tests/test_volumes.py
import json

import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import DataError, FormatVersionError, PayloadSizeError, ShapeError, TruncatedPayloadError
from app.schemas import SynthSpec
from app.services import seeding
from app.services.volumes import (
    Volume, class_counts, load_dataset, load_manifest, load_volume, phantom, rescale_intensity,
    save_volume, synth_dataset,
)


def rewrite_header(path, **changes):
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    header = json.loads(raw[:nl])
    header.update(changes)
    path.write_bytes(json.dumps(header).encode() + raw[nl:])


@pytest.fixture
def masked_volume(rng):
    data = rng.uniform(0, 255, size=(8, 8, 8)).astype(np.float32)
    mask = np.zeros((8, 8, 8), dtype=bool)
    mask[2:6, 2:6, 2:6] = True
    return Volume(data=data, mask=mask, label=1, id="v0")


# =============================================================================
# file format
# =============================================================================

class TestVolumeFile:

    def test_round_trip(self, tmp_path, masked_volume):
        path = tmp_path / "v.rsv"
        save_volume(path, masked_volume)
        back = load_volume(path)
        np.testing.assert_array_equal(back.data, masked_volume.data)
        np.testing.assert_array_equal(back.mask, masked_volume.mask)
        assert back.label == 1 and back.id == "v0"

    def test_multichannel_round_trip(self, tmp_path, rng):
        vol = Volume(data=rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
        save_volume(tmp_path / "v.rsv", vol)
        back = load_volume(tmp_path / "v.rsv")
        assert back.channels == 2 and back.mask is None
        np.testing.assert_array_equal(back.data, vol.data)

    def test_declared_size_mismatch(self, tmp_path, masked_volume):
        path = tmp_path / "v.rsv"
        save_volume(path, masked_volume)
        rewrite_header(path, payload_bytes=123)
        with pytest.raises(PayloadSizeError):
            load_volume(path)

    def test_missing_mask_bytes(self, tmp_path, masked_volume):
        path = tmp_path / "v.rsv"
        save_volume(path, masked_volume)
        path.write_bytes(path.read_bytes()[:-512])
        with pytest.raises(TruncatedPayloadError):
            load_volume(path)

    def test_trailing_bytes(self, tmp_path, masked_volume):
        path = tmp_path / "v.rsv"
        save_volume(path, masked_volume)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(PayloadSizeError):
            load_volume(path)

    def test_unknown_version(self, tmp_path, masked_volume):
        path = tmp_path / "v.rsv"
        save_volume(path, masked_volume)
        rewrite_header(path, format_version=99)
        with pytest.raises(FormatVersionError):
            load_volume(path)

    def test_no_header_terminator(self, tmp_path):
        path = tmp_path / "v.rsv"
        path.write_bytes(b'{"format": "rsv"')
        with pytest.raises(TruncatedPayloadError):
            load_volume(path)

    def test_mask_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            Volume(data=np.zeros((8, 8, 8)), mask=np.ones((4, 4, 4), dtype=bool))


# =============================================================================
# intensity
# =============================================================================

class TestRescale:

    def test_unit_range_to_byte_range(self):
        res = rescale_intensity(np.array([0.0, 0.25, 1.0]))
        np.testing.assert_allclose(res.data, [0.0, 63.75, 255.0])
        assert not res.degenerate

    def test_endpoints_exact(self, rng):
        res = rescale_intensity(rng.normal(size=(5, 5, 5)))
        assert res.data.min() == 0.0 and res.data.max() == 255.0

    def test_constant_volume(self):
        res = rescale_intensity(np.full((4, 4, 4), 7.0))
        assert res.degenerate
        assert np.all(res.data == 0.0)
        assert res.provenance()["source_min"] == 7.0


# =============================================================================
# synthetic data
# =============================================================================

class TestSynth:

    @pytest.mark.parametrize("ratio, count, expected", [
        ([9, 1], 100, [90, 10]),
        ([250, 76], None, [250, 76]),
        ([2, 1, 6], 90, [20, 10, 60]),
        ([1, 1, 1], 10, [4, 3, 3]),
    ])
    def test_class_counts(self, ratio, count, expected):
        assert class_counts(ratio, count) == expected

    def test_class_counts_too_small(self):
        with pytest.raises(DataError):
            class_counts([100, 1], 20)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            SynthSpec(classes=["a", "b"], ratio=[1.0])
        with pytest.raises(ValidationError):
            SynthSpec(classes=["a", "a"], ratio=[1.0, 1.0])

    def test_phantom_in_range(self):
        vol = phantom(12, 1, 2, seeding.rng(0, "data", 1, 0))
        assert vol.extents == (12, 12, 12)
        assert vol.data.min() >= 0.0 and vol.data.max() <= 255.0
        assert vol.mask.any()

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SynthSpec(classes=["a", "b"], ratio=[2, 1], count=6, extent=8, seed=3)
        synth_dataset(spec, tmp_path / "one")
        synth_dataset(spec, tmp_path / "two")
        files = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes()

    def test_different_seed_different_data(self, tmp_path):
        a = synth_dataset(SynthSpec(count=4, ratio=[1, 1], extent=8, seed=0), tmp_path / "a")
        synth_dataset(SynthSpec(count=4, ratio=[1, 1], extent=8, seed=1), tmp_path / "b")
        p = a.entries[0].path
        assert (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()

    def test_dataset_load(self, tiny_dataset_dir):
        ds = load_dataset(tiny_dataset_dir)
        assert len(ds) == 30
        assert ds.class_names == ["major", "minor"]
        assert np.bincount(ds.labels).tolist() == [20, 10]
        assert ds.stack().shape == (30, 1, 8, 8, 8)
        assert load_manifest(tiny_dataset_dir).class_counts == {"major": 20, "minor": 10}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


# =============================================================================
# seeding
# =============================================================================

class TestSeeding:

    def test_streams_are_independent(self):
        a = seeding.rng(0, "data").random(4)
        b = seeding.rng(0, "augment").random(4)
        assert not np.array_equal(a, b)

    def test_streams_are_reproducible(self):
        np.testing.assert_array_equal(seeding.rng(5, "kmeans", 2).random(3), seeding.rng(5, "kmeans", 2).random(3))

    def test_unknown_stream(self):
        with pytest.raises(KeyError):
            seeding.rng(0, "bogus")
