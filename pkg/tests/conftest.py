import numpy as np
import pytest
import torch

from treenet.data import generate_synthetic
from treenet.pipeline import make_mini_config, run_pipeline


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    # Keep CPU scheduling stable so timed tests behave the same everywhere.
    torch.set_num_threads(min(torch.get_num_threads(), 8))


@pytest.fixture(scope="session")
def synthetic_96():
    return generate_synthetic(count=64, size=96, seed=11)


@pytest.fixture(scope="session")
def mini_cfg():
    return make_mini_config()


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory, mini_cfg):
    """One completed mini pipeline shared by tests that need trained parts."""
    run_dir = tmp_path_factory.mktemp("mini") / "run"
    result = run_pipeline(mini_cfg, run_dir)
    return mini_cfg, run_dir, result


def finite_diff_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar fn() with respect to x.

    fn must read the exact tensor object x; its elements are perturbed in
    place around each evaluation.
    """
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = np.maximum(
        np.maximum(np.abs(analytic.numpy()), np.abs(numeric.numpy())), 1e-8)
    return float((np.abs(analytic.numpy() - numeric.numpy()) / denom).max())
