import numpy as np
import pytest

from app.core import numerics as nx
from app.core.fixtures import procedural_clips, room_scene
from app.core.motion_db import build_database
from app.core.skeleton import default_skeleton
from app.models.base import RunConfig


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clips(skeleton):
    return procedural_clips(skeleton)


@pytest.fixture(scope="session")
def database(clips):
    return build_database(clips)


@pytest.fixture(scope="session")
def room():
    return room_scene()


@pytest.fixture
def run_config(tmp_path):
    """Defaults with a permissive action switch and small optimizer sizes"""
    config = RunConfig()
    config.synthesizer.transition_max_distance = 1e9
    config.reward.sigma_inter = 1.0
    config.termination.success_inter = 0.8
    config.termination.max_frames = 300
    config.ppo.tuples_per_update = 256
    config.ppo.minibatch = 64
    config.ppo.policy_hidden = [32, 32]
    config.ppo.value_hidden = [32]
    config.paths.output_dir = str(tmp_path / "runs")
    config.workers = 1
    return config


@pytest.fixture
def gradcheck():
    """
    Compare reverse-mode gradients of a scalar function of tensors with
    central finite differences.
    """

    def check(fn, *arrays, eps=1e-6, rtol=1e-4, atol=1e-7):
        inputs = [nx.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*inputs)
        nx.backward(out)
        for i, array in enumerate(arrays):
            analytic = inputs[i].grad if inputs[i].grad is not None else np.zeros_like(array)
            numeric = np.zeros_like(array, dtype=np.float64)
            flat = numeric.reshape(-1)
            for k in range(flat.size):
                plus = [np.array(a, dtype=np.float64) for a in arrays]
                minus = [np.array(a, dtype=np.float64) for a in arrays]
                plus[i].reshape(-1)[k] += eps
                minus[i].reshape(-1)[k] -= eps
                with nx.no_grad():
                    f_plus = fn(*[nx.Tensor(a) for a in plus]).item()
                    f_minus = fn(*[nx.Tensor(a) for a in minus]).item()
                flat[k] = (f_plus - f_minus) / (2 * eps)
            np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)

    return check
