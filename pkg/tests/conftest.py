import numpy as np
import pytest


def central_difference_check(
    loss_fn, params: np.ndarray, analytic: np.ndarray, rng, n_samples=20, h=1e-4, rel_tol=1e-4
):
    """Compare analytic gradients against central differences on sampled coords.

    loss_fn() evaluates the scalar loss at the current contents of `params`
    (mutated in place around each sampled coordinate). Coordinates whose
    analytic and numeric gradients are both tiny are compared absolutely.
    """
    n = params.size
    flat = params.reshape(-1)
    scale = max(1.0, float(np.max(np.abs(analytic))))
    idx = rng.choice(n, size=min(n_samples, n), replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(numeric), abs(analytic.reshape(-1)[i]), 1e-6 * scale)
        worst = max(worst, abs(numeric - analytic.reshape(-1)[i]) / denom)
    assert worst < rel_tol, f"finite-difference mismatch: rel err {worst:.3e}"
    return worst


@pytest.fixture
def fd_check():
    return central_difference_check
