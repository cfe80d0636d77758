import numpy as np
import pytest

from splitmerge import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_diff(fn, params, step=1e-5):
    """Central-difference gradients of scalar fn() w.r.t. each tensor in params.

    ``fn`` must rebuild its computation from the current parameter values on
    every call.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads[name] = g
    return grads


def tape_grads(build, params):
    """Run build() under a fresh tape, backward from its scalar output."""
    for p in params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        out = build()
        tape.backward(out)
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()}


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    # below atol the central-difference truncation noise dominates; compare
    # those entries absolutely instead of relatively
    for name in numeric:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.abs(n), np.abs(a))
        mask = denom > atol
        if mask.any():
            rel = np.abs(a - n)[mask] / denom[mask]
            assert rel.max() <= rtol, f"{name}: max rel err {rel.max():.3g}"
        np.testing.assert_allclose(a[~mask], n[~mask], atol=1e-9)
