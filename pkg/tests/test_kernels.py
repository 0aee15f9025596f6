import numpy as np
import pytest

from appsel_pfl import kernels, model
from appsel_pfl.kernels import get_backend

F, D, H = model.N_FEATURES, model.D_MODEL, model.N_HEADS
BACKENDS = ["python", "cython"]


def _cohort(seed, devices=5):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 4, size=devices)
    pairs = []
    for _ in range(int(sizes.sum())):
        n = int(rng.integers(2, 9))
        pairs.append((rng.random((n, F)), int(rng.integers(n))))
    b = model.Batch.from_pairs(pairs)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return b, offsets


def _manual(params, b, offsets, mask, lr, epochs, cw):
    deltas, losses = [], []
    for d in range(len(offsets) - 1):
        sub = b.subset(np.arange(offsets[d], offsets[d + 1]))
        theta = params.copy()
        first = None
        for _ in range(epochs):
            loss, g = kernels.get_backend("python").loss_grad(
                theta, sub.X, sub.ncand, sub.labels, F, D, H, cw)
            first = loss if first is None else first
            theta[mask] -= lr * g[mask]
        deltas.append(theta - params)
        losses.append(first)
    return np.array(deltas), np.array(losses)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("policy", ["none", "top_layer_only", "all_but_input"])
def test_local_training_is_full_batch_sgd(backend, policy):
    p = model.apply_freeze(model.init_params(2), policy)
    b, offsets = _cohort(4)
    mask = p.trainable_mask()
    kern = get_backend(backend)
    deltas, losses = kern.local_train_cohort(p.flat, mask.astype(np.uint8), b.X, b.ncand,
                                             b.labels, offsets, F, D, H, 0.05, 3, 0.1)
    ref_d, ref_l = _manual(p.flat, b, offsets, mask, 0.05, 3, 0.1)
    assert np.max(np.abs(deltas - ref_d)) < 1e-13
    assert np.allclose(losses, ref_l, rtol=1e-12, atol=0)
    assert np.all(deltas[:, ~mask] == 0.0)


def test_backends_agree_on_every_kernel():
    py, cy = get_backend("python"), get_backend("cython")
    p = model.init_params(9, gain=2.0)
    b, offsets = _cohort(9, devices=8)
    s1, c1 = py.predict(p.flat, b.X, b.ncand, F, D, H)
    s2, c2 = cy.predict(p.flat, b.X, b.ncand, F, D, H)
    assert np.max(np.abs(s1 - s2)) < 1e-14 and np.max(np.abs(c1 - c2)) < 1e-14
    l1, g1 = py.loss_grad(p.flat, b.X, b.ncand, b.labels, F, D, H, 0.1)
    l2, g2 = cy.loss_grad(p.flat, b.X, b.ncand, b.labels, F, D, H, 0.1)
    assert abs(l1 - l2) < 1e-14 and np.max(np.abs(g1 - g2)) < 1e-14
    m = np.ones(p.size, dtype=np.uint8)
    d1, _ = py.local_train_cohort(p.flat, m, b.X, b.ncand, b.labels, offsets, F, D, H, .01, 3, .1)
    d2, _ = cy.local_train_cohort(p.flat, m, b.X, b.ncand, b.labels, offsets, F, D, H, .01, 3, .1)
    assert np.max(np.abs(d1 - d2)) < 1e-14


def test_selected_backend_is_reported():
    assert kernels.BACKEND in ("python", "cython")
    with pytest.raises(ValueError):
        get_backend("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_shape_checks(backend):
    kern = get_backend(backend)
    p = model.init_params(0)
    b, _ = _cohort(0)
    with pytest.raises(ValueError):
        kern.predict(p.flat[:-1], b.X, b.ncand, F, D, H)
    bad = b.ncand.copy()
    bad[0] = 0
    with pytest.raises(ValueError):
        kern.predict(p.flat, b.X, bad, F, D, H)
    bad[0] = b.X.shape[1] + 1
    with pytest.raises(ValueError):
        kern.loss_grad(p.flat, b.X, bad, b.labels, F, D, H, 0.1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_inputs_are_not_mutated(backend):
    kern = get_backend(backend)
    p = model.init_params(1)
    b, offsets = _cohort(1)
    theta, X = p.flat.copy(), b.X.copy()
    kern.local_train_cohort(theta, np.ones(p.size, np.uint8), b.X, b.ncand, b.labels, offsets,
                            F, D, H, 0.01, 2, 0.1)
    assert np.array_equal(theta, p.flat) and np.array_equal(X, b.X)
