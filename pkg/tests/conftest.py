import time

import numpy as np
import pytest

from freqcodec import tensor as T
from freqcodec.imageio import synthetic_textures
from freqcodec.model import FrequencyCodec
from freqcodec.training import TrainConfig, train
from freqcodec.transform import ModelConfig

# Desk run shared by the training, rate-fidelity, scalable-decode and codec tests.
DESK_TRAIN = TrainConfig(lmbda=0.01, metric="mse", lr=1e-3, max_iters=2000, seed=0)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f at x (float64)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, *arrays, h: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over all inputs.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar with a fixed
    random projection so every output element matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(seed).normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(a) for a in arrs]).data * proj))

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = T.tsum(fn(*leaves) * T.Tensor(proj))
    loss.backward(leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return scalar(*args)

        num = numeric_grad(f, arrays[i].copy(), h)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_data():
    return synthetic_textures(16, seed=1), synthetic_textures(4, seed=2)


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """One 2k-iteration desk training run (about 6 minutes on one core)."""
    images, held = desk_data
    model = FrequencyCodec(ModelConfig(), seed=0)
    start = time.perf_counter()
    result = train(model, images, DESK_TRAIN, eval_images=held)
    return model, result, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_model(desk_run):
    return desk_run[0]


@pytest.fixture(scope="session")
def test_images():
    return synthetic_textures(10, seed=3)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
