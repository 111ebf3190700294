import numpy as np
import pytest

from octcomplete import autodiff as ad


def numeric_grad(f, arrays, which, h=1e-5):
    """Central finite differences of scalar f w.r.t. arrays[which]."""
    a = arrays[which]
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = a[i]
        a[i] = orig + h
        fp = f()
        a[i] = orig - h
        fm = f()
        a[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, arrays, rtol=1e-4, h=1e-5):
    """Compare taped gradients against central differences.

    `build` runs the op and returns the scalar loss FeatureMap; `arrays` maps
    name -> float64 ndarray that `build` reads through ad.parameter wrappers
    created by the caller. The caller passes the same FeatureMap objects each
    call so edits to `arrays` values are visible.
    """
    with ad.Tape():
        loss = build()
        ad.backward(loss)
    for name, (fm, arr) in arrays.items():
        got = fm.grad
        assert got is not None, f"no gradient for {name}"
        want = numeric_grad(lambda: float(build().values[0, 0]), {name: arr}, name, h=h)
        denom = np.maximum(np.abs(want), 1.0)
        err = np.abs(got - want) / denom
        assert err.max() < rtol, f"{name}: max rel err {err.max():.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
