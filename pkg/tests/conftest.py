import numpy as np
import pytest

from keymatch.tensor import GradTape, Tensor, backward


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor for tiny grads."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f with respect to x.

    ``f`` takes no arguments and reads the current contents of ``x``,
    which is perturbed in place entry by entry.
    """
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def tape_gradients(build, params: list[Tensor]) -> dict[Tensor, np.ndarray]:
    """Record build() on a fresh tape and return gradients of its output."""
    with GradTape() as tape:
        tape.watch(*params)
        out = build()
    return backward(out, tape)


def check_gradients(build, params: list[Tensor], h: float = 1e-5,
                    tol: float = 1e-4) -> float:
    """Compare tape gradients of build() against finite differences."""
    grads = tape_gradients(build, params)
    worst = 0.0
    for p in params:
        fd = finite_difference(lambda: build().item(), p.data, h=h)
        worst = max(worst, rel_error(grads[p], fd))
    assert worst < tol, f"gradient mismatch: max relative error {worst}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
