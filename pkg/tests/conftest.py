import numpy as np
import pytest

from tscan import autodiff as ad
from tscan.layers import LayerConfig
from tscan.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_layer_config():
    return LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)


@pytest.fixture
def toy_model_config(toy_layer_config):
    return ModelConfig(t=8, d=6, n=2, layer=toy_layer_config,
                       fusion="concatenate", task="ihm", n_classes=2)


def numeric_grad(f, arrays, step=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    Independent of the tape: evaluates ``f`` twice per entry.
    """
    grads = []
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*arrays)
            flat[i] = orig - step
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.max(np.abs(analytic - numeric) /
                  np.maximum(1.0, np.abs(numeric)))


def param_finite_diff(build_loss, store, step=1e-5, tol=1e-4, names=None):
    """Check tape gradients of every named parameter against central
    differences of ``build_loss`` (a zero-arg callable returning a fresh
    scalar loss Node from the store's current values)."""
    store.zero_grads()
    ad.backward(build_loss())
    names = list(names) if names is not None else store.names()
    analytic = {}
    for name in names:
        g = store[name].grad
        assert g is not None, f"no gradient reached {name}"
        analytic[name] = np.array(g)
    worst = 0.0
    for name in names:
        base = np.array(store[name].data)
        flat = base.ravel()
        numeric = np.zeros_like(base)
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            store.assign(name, base)
            hi = float(build_loss().data)
            flat[i] = orig - step
            store.assign(name, base)
            lo = float(build_loss().data)
            flat[i] = orig
            store.assign(name, base)
            nflat[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, rel_err(analytic[name], numeric))
    assert worst < tol, f"param finite-difference mismatch: rel err {worst:.3e}"
    return worst


def finite_diff_check(build, arrays, step=1e-5, tol=1e-4):
    """Compare tape gradients of ``build`` (arrays -> scalar Node via leaf
    nodes it creates) against central differences. ``build`` receives the
    list of leaf nodes and must return the scalar output node."""
    leaves = [ad.constant(a) for a in arrays]
    ad.backward(build(leaves))

    def scalar(*arrs):
        fresh = [ad.constant(a) for a in arrs]
        return float(build(fresh).data)

    numeric = numeric_grad(scalar, arrays, step=step)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None, "gradient did not reach a leaf"
        worst = max(worst, rel_err(leaf.grad, num))
    assert worst < tol, f"finite-difference mismatch: rel err {worst:.3e}"
    return worst
