import numpy as np
import pytest

from meshgcn import presets
from meshgcn.sampling import build_hierarchy
from meshgcn.shapes import icosphere


def _evaluate(f):
    out = f()
    return out if isinstance(out, tuple) else (out, None)


def central_difference(f, array, index, step=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. ``array[index]``.

    ``f`` may return ``(value, signature)`` where ``signature`` encodes the
    active branch of every piecewise-linear unit. Returns ``(derivative,
    smooth)``; ``smooth`` is False when the stencil crosses a kink, in which
    case the difference quotient does not estimate the derivative.
    """
    old = array[index]
    _, sig0 = _evaluate(f)
    array[index] = old + step
    fp, sig_p = _evaluate(f)
    array[index] = old - step
    fm, sig_m = _evaluate(f)
    array[index] = old
    smooth = sig0 is None or (np.array_equal(sig0, sig_p) and np.array_equal(sig0, sig_m))
    return (fp - fm) / (2 * step), smooth


def assert_gradient_matches(f, array, analytic, rtol=1e-4, atol=1e-8, max_entries=None,
                            rng=None, max_kinks=0):
    """Compare ``analytic`` against central differences entry by entry.

    ``atol`` only matters where the true gradient is zero (e.g. a bias that an
    instance norm cancels), where relative error is meaningless. An entry that
    misses the tolerance is excused only if its stencil crossed a kink; at
    most ``max_kinks`` may be.
    Returns ``(worst relative error, skipped entries)``.
    """
    indices = list(np.ndindex(array.shape))
    if max_entries is not None and len(indices) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(indices), size=max_entries, replace=False)
        indices = [indices[i] for i in sorted(pick)]
    worst = 0.0
    kinks = 0
    for idx in indices:
        num, smooth = central_difference(f, array, idx)
        ana = analytic[idx]
        err = abs(num - ana)
        if err > rtol * max(abs(num), abs(ana)) + atol:
            assert not smooth, (idx, num, ana)
            kinks += 1
            continue
        if max(abs(num), abs(ana)) > atol:
            worst = max(worst, err / max(abs(num), abs(ana)))
    assert kinks <= max_kinks, f"{kinks} stencils crossed an activation kink"
    return worst, kinks


def decoder_signature(cache):
    """Sign pattern of every leaky-activation input recorded in a decoder cache."""
    _, block_caches, _, head_pre, _, _ = cache
    parts = []
    for c in block_caches:
        n1, pre = c[2], c[7]
        parts += [n1.ravel() >= 0, pre.ravel() >= 0]
    parts.append(head_pre.ravel() >= 0)
    return np.concatenate(parts)


@pytest.fixture(scope="session")
def toy_hierarchy():
    return presets.toy_hierarchy()


@pytest.fixture(scope="session")
def tiny_hierarchy():
    """42 -> 20 -> 8 vertex sphere hierarchy for gradient checks."""
    return build_hierarchy(icosphere(1), [20, 8])
