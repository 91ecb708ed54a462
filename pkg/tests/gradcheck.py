"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

FD_STEP = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-2
SMALL = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d f / d x by central differences; f maps a float64 array to a float."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=REL_TOL, abs_small=ABS_TOL):
    """Relative error <= rel, or absolute <= abs_small where |true| < 1e-6."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = scale < SMALL
    err = np.abs(analytic - numeric)
    bad_small = small & (err > abs_small)
    bad_big = ~small & (err > rel * scale)
    assert not bad_small.any(), f"absolute error {err[bad_small].max():.3g} on tiny entries"
    assert not bad_big.any(), (
        f"relative error {(err[bad_big] / scale[bad_big]).max():.3g} > {rel} "
        f"at {np.argwhere(bad_big)[:3].tolist()}"
    )
