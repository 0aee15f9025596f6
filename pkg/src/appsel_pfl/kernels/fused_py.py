"""Pure numpy implementation of the fused app-selection kernels.

Records are padded to a common candidate count; ``ncand`` gives the real
count per record and padded candidates are masked out of attention keys,
the loss and the pooled representation. Every function here vectorizes over
records, with either one shared parameter vector or one vector per record.
"""
from __future__ import annotations

import numpy as np

from appsel_pfl.kernels.layout import param_shapes

BACKEND = "python"


def _unpack(theta: np.ndarray, F: int, D: int, H: int) -> dict[str, np.ndarray]:
    lead = theta.shape[:-1]
    out, pos = {}, 0
    for name, shape in param_shapes(F, D, H):
        size = int(np.prod(shape))
        out[name] = theta[..., pos:pos + size].reshape(lead + shape)
        pos += size
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check(theta, X, ncand, F, D, H) -> None:
    P = sum(int(np.prod(shape)) for _, shape in param_shapes(F, D, H))
    if theta.shape[-1] != P:
        raise ValueError(f"theta has {theta.shape[-1]} entries, layout needs {P}")
    if X.ndim != 3 or X.shape[2] != F:
        raise ValueError(f"features must be (R, N, {F}), got {X.shape}")
    if ncand.shape[0] != X.shape[0]:
        raise ValueError("ncand and X disagree on the record count")
    if X.shape[0] and (ncand.min() < 1 or ncand.max() > X.shape[1]):
        raise ValueError("candidate counts out of range")


def _mask(ncand: np.ndarray, N: int) -> np.ndarray:
    return np.arange(N)[None, :] < ncand[:, None]


def _forward_backward(theta, X, ncand, labels, F, D, H, conf_weight, want_grad):
    """theta is (R, P), possibly a broadcast view; returns per-record results."""
    R, N, _ = X.shape
    dh = D // H
    scale = 1.0 / np.sqrt(dh)
    p = _unpack(theta, F, D, H)
    mask = _mask(ncand, N)
    n = ncand.astype(np.float64)
    key_mask = mask[:, None, :]

    Z0 = X @ p["input.weight"] + p["input.bias"][:, None, :]
    H0 = np.maximum(Z0, 0.0)
    heads = []
    for h in range(H):
        Q = H0 @ p[f"attn.head{h}.query"]
        K = H0 @ p[f"attn.head{h}.key"]
        V = H0 @ p[f"attn.head{h}.value"]
        S = np.where(key_mask, (Q @ K.swapaxes(1, 2)) * scale, -np.inf)
        E = np.exp(S - S.max(axis=2, keepdims=True))
        A = E / E.sum(axis=2, keepdims=True)
        heads.append((Q, K, V, A))
    O = np.concatenate([A @ V for (_, _, V, A) in heads], axis=2)
    H1 = H0 + O @ p["attn.out.weight"] + p["attn.out.bias"][:, None, :]

    ws, we = p["score.weight"], p["epistemic.weight"]
    s = _sigmoid(np.einsum("rnd,rd->rn", H1, ws) + p["score.bias"])
    pooled = np.where(mask[:, :, None], H1, 0.0).sum(axis=1) / n[:, None]
    c = _sigmoid(np.einsum("rd,rd->r", pooled, we) + p["epistemic.bias"][:, 0])
    scores = np.where(mask, s, 0.0)
    if labels is None:
        return scores, c, None, None

    onehot = np.zeros((R, N))
    onehot[np.arange(R), labels] = 1.0
    diff = np.where(mask, s - onehot, 0.0)
    loss = (diff * diff).sum(axis=1) / n + conf_weight * (c - 1.0) ** 2
    if not want_grad:
        return scores, c, loss, None

    g = {}
    dzs = (2.0 / n)[:, None] * diff * s * (1.0 - s)
    dzc = 2.0 * conf_weight * (c - 1.0) * c * (1.0 - c)
    g["score.weight"] = np.einsum("rnd,rn->rd", H1, dzs)
    g["score.bias"] = dzs.sum(axis=1)[:, None]
    g["epistemic.weight"] = pooled * dzc[:, None]
    g["epistemic.bias"] = dzc[:, None]

    dH1 = dzs[:, :, None] * ws[:, None, :] + np.where(
        mask[:, :, None], (dzc / n)[:, None, None] * we[:, None, :], 0.0)
    g["attn.out.weight"] = O.swapaxes(1, 2) @ dH1
    g["attn.out.bias"] = dH1.sum(axis=1)
    dO = dH1 @ p["attn.out.weight"].swapaxes(1, 2)

    dH0 = dH1.copy()
    for h, (Q, K, V, A) in enumerate(heads):
        dOh = dO[:, :, h * dh:(h + 1) * dh]
        dA = dOh @ V.swapaxes(1, 2)
        dV = A.swapaxes(1, 2) @ dOh
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.swapaxes(1, 2) @ Q
        H0t = H0.swapaxes(1, 2)
        Wq = p[f"attn.head{h}.query"]
        Wk = p[f"attn.head{h}.key"]
        Wv = p[f"attn.head{h}.value"]
        g[f"attn.head{h}.query"] = H0t @ dQ
        g[f"attn.head{h}.key"] = H0t @ dK
        g[f"attn.head{h}.value"] = H0t @ dV
        dH0 += dQ @ Wq.swapaxes(1, 2) + dK @ Wk.swapaxes(1, 2) + dV @ Wv.swapaxes(1, 2)

    dZ0 = dH0 * (Z0 > 0.0)
    g["input.weight"] = X.swapaxes(1, 2) @ dZ0
    g["input.bias"] = dZ0.sum(axis=1)

    grad = np.concatenate(
        [g[name].reshape(R, -1) for name, _ in param_shapes(F, D, H)], axis=1)
    return scores, c, loss, grad


def predict(theta, X, ncand, F, D, H):
    """Scores (R, N), zero at padded slots, and epistemic confidence (R,)."""
    _check(theta, X, ncand, F, D, H)
    R = X.shape[0]
    th = np.broadcast_to(theta, (R, theta.shape[0]))
    scores, conf, _, _ = _forward_backward(th, X, ncand, None, F, D, H, 0.0, False)
    return scores, conf


def loss_grad(theta, X, ncand, labels, F, D, H, conf_weight):
    """Mean loss and mean gradient over a batch, all records sharing ``theta``."""
    _check(theta, X, ncand, F, D, H)
    R = X.shape[0]
    th = np.broadcast_to(theta, (R, theta.shape[0]))
    _, _, loss, grad = _forward_backward(th, X, ncand, labels, F, D, H, conf_weight, True)
    return float(loss.mean()), grad.mean(axis=0)


def local_train_cohort(theta, trainable, X, ncand, labels, offsets, F, D, H,
                       lr, epochs, conf_weight):
    """Full-batch local SGD for every client of a cohort.

    Client ``b`` owns records ``offsets[b]:offsets[b+1]``. Returns the parameter
    deltas (B, P) and each client's mean loss at the starting parameters.
    """
    _check(theta, X, ncand, F, D, H)
    B = len(offsets) - 1
    counts = np.diff(offsets)
    if np.any(counts < 1):
        raise ValueError("every client needs at least one record")
    owner = np.repeat(np.arange(B), counts)
    step = lr * trainable.astype(np.float64)
    local = np.tile(theta, (B, 1))
    losses = np.zeros(B)
    with np.errstate(all="ignore"):
        for epoch in range(epochs):
            _, _, loss, grad = _forward_backward(
                local[owner], X, ncand, labels, F, D, H, conf_weight, True)
            gsum = np.add.reduceat(grad, offsets[:-1], axis=0)
            if epoch == 0:
                losses = np.add.reduceat(loss, offsets[:-1]) / counts
            local -= step * (gsum / counts[:, None])
    return local - theta, losses
