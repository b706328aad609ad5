import numpy as np
import pytest

from tinyfqa.model import ModelParams
from tinyfqa.tensorops import conv2d_strided


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def make_params(rng, n_kernels=1, kernel_size=7, channels=3, loss_kind="plcc"):
    """Random but well-conditioned parameters for numeric tests."""
    return ModelParams(
        kernels=rng.normal(0, 0.2, (n_kernels, channels, kernel_size, kernel_size)).astype(
            np.float32
        ),
        conv_bias=rng.normal(0, 0.1, n_kernels).astype(np.float32),
        pool_min_w=rng.normal(0, 1.0, n_kernels).astype(np.float32),
        pool_max_w=rng.normal(0, 1.0, n_kernels).astype(np.float32),
        pool_bias=float(rng.normal()),
        loss_kind=loss_kind,
    )


def _extrema_gaps_ok(params, patches, margin):
    """True when every sample/kernel has a clear runner-up gap at both
    extremes, i.e. no finite-difference perturbation can flip the argmin or
    argmax (the loss is non-differentiable exactly at those ties)."""
    for patch in patches:
        grid = conv2d_strided(
            np.asarray(patch, dtype=np.float64),
            params.kernels.astype(np.float64),
            params.conv_bias.astype(np.float64),
            stride=5,
            padding=1,
        )
        flat = np.sort(grid.reshape(-1, grid.shape[2]), axis=0)
        if flat.shape[0] < 2:
            continue
        if (flat[1] - flat[0] <= margin).any() or (flat[-1] - flat[-2] <= margin).any():
            return False
    return True


def draw_gradcheck_instance(rng, n_kernels, size, batch, fd_step=1e-3):
    """Random (params, patches, labels) at which min/max routing is stable
    under +-fd_step coordinate perturbations (pixel values are <= 1, so one
    perturbed kernel weight moves any response by at most fd_step)."""
    margin = 3.0 * fd_step
    for _ in range(64):
        params = make_params(rng, n_kernels)
        patches = [rng.random((size, size, 3)).astype(np.float32) for _ in range(batch)]
        labels = rng.normal(size=batch) * 4.0
        if _extrema_gaps_ok(params, patches, margin):
            return params, patches, labels
    raise AssertionError("could not draw a kink-free gradcheck instance")


@pytest.fixture
def params_factory(rng):
    def factory(n_kernels=1, **kwargs):
        return make_params(rng, n_kernels, **kwargs)

    return factory
