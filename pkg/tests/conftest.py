# tests/conftest.py
import numpy as np
import pytest

from app.schemas import EncoderConfig, SynthSpec
from app.services.encoder import build_encoder
from app.services.tensor_core import relative_error
from app.services.volumes import synth_dataset


# =============================================================================
# configs
# =============================================================================

def tiny_encoder_config(**overrides) -> EncoderConfig:
    """8^3 input, pools 8 -> 4 -> 2 -> 1, float64 so finite differences are meaningful."""
    base = dict(preset="custom", input_extent=8, channel_widths=(2, 2, 3, 3, 4), residual_blocks=1,
                pool_kernel=2, hidden_dim=6, representation_dim=8, dtype="float64")
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return tiny_encoder_config()


@pytest.fixture
def tiny_state(tiny_config):
    return build_encoder(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """30 phantoms at 8^3, classes major:minor = 20:10."""
    root = tmp_path_factory.mktemp("data")
    synth_dataset(SynthSpec(classes=["major", "minor"], ratio=[2.0, 1.0], count=30, extent=8, seed=0), root)
    return root


# =============================================================================
# finite differences
# =============================================================================

@pytest.fixture
def sampled_grad_check():
    """Central differences on a random subset of entries of each array.

    Returns the relative error between the analytic and numeric vectors built
    from all sampled entries.
    """
    def check(loss_fn, arrays, grads, per_array=6, h=1e-5, seed=0):
        pick = np.random.default_rng(seed)
        analytic, numeric = [], []
        for name, arr in arrays.items():
            flat = arr.reshape(-1)
            g = np.asarray(grads.get(name, np.zeros_like(arr))).reshape(-1)
            for i in pick.choice(flat.size, size=min(per_array, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn()
                flat[i] = orig - h
                fm = loss_fn()
                flat[i] = orig
                numeric.append((fp - fm) / (2 * h))
                analytic.append(g[i])
        return relative_error(np.asarray(analytic), np.asarray(numeric))
    return check
