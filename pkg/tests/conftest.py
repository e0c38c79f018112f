import numpy as np
import pytest

from otfpf.autodiff import Parameter, Tensor


def numerical_grad(fn, arrays, index, step=1e-3):
    """Central finite differences of scalar-valued ``fn`` w.r.t. ``arrays[index]``.

    ``fn`` receives plain numpy arrays and returns a float; evaluation runs
    at the arrays' own precision so the oracle sees the same arithmetic as
    the implementation under test.
    """
    base = [np.array(a, dtype=np.float32, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(*base)
        flat[i] = orig - step
        fm = fn(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-4):
    """Max absolute deviation scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(floor, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build_loss, arrays, step=1e-3, tol=1e-3, floor=1e-4):
    """Assert analytic gradients match central differences for every input.

    ``build_loss`` maps Tensor inputs to a scalar Tensor. Returns the worst
    relative error observed.
    """
    params = [Parameter(np.array(a, dtype=np.float32)) for a in arrays]
    loss = build_loss(*params)
    loss.backward()

    def as_scalar_fn(*arrs):
        with_np = [Tensor(a) for a in arrs]
        return float(build_loss(*with_np).data)

    worst = 0.0
    for i, p in enumerate(params):
        assert p.grad is not None, f"input {i} received no gradient"
        num = numerical_grad(as_scalar_fn, [p.data for p in params], i, step=step)
        err = relative_error(p.grad, num, floor=floor)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch on input {i}: rel err {err:.3e} > {tol}"
    return worst


def projection_loss(rng_or_seed, shape):
    """Fixed random linear functional; smooth, so FD sees the op's Jacobian."""
    r = np.random.default_rng(rng_or_seed if isinstance(rng_or_seed, int) else 99).standard_normal(shape).astype(np.float32)

    def apply(y):
        from otfpf import ops
        return ops.mul(y, Tensor(r)).sum()

    return apply


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
