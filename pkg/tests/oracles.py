"""Reference computations shared by the unit and acceptance suites."""
import numpy as np

from appsel_pfl.nn import Tape, mse_loss
from appsel_pfl.nn import tape as T


def _random_graph_loss(tape, params, x):
    """Small two-layer attention-flavoured network over every op in the set."""
    h = T.relu(T.add_bias(T.matmul(x, params["w1"]), params["b1"]))
    att = T.softmax_rows(T.scale(T.matmul(h, T.transpose(h)), 0.5))
    mixed = T.concat([T.matmul(att, h), T.slice_cols(h, 0, 2)], axis=1)
    out = T.sigmoid(T.matmul(mixed, params["w2"]))
    gated = T.mul(out, T.add(out, T.scale(out, 0.3)))
    return mse_loss(gated, np.linspace(0, 1, gated.data.size).reshape(gated.shape))


def fd_check(seed: int) -> float:
    """Worst relative gap between tape and central-difference gradients on a random net."""
    rng = np.random.default_rng(seed)
    n, f, d = rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 6)
    x = rng.normal(size=(n, f))
    p = {"w1": rng.normal(size=(f, d)), "b1": rng.normal(size=d) * 0.1,
         "w2": rng.normal(size=(d + 2, 1))}

    tape = Tape()
    watched = {k: tape.watch(v, k) for k, v in p.items()}
    grads = tape.backward(_random_graph_loss(tape, watched, x))

    def value(q):
        return float(_random_graph_loss(None, {k: T.Tensor(v) for k, v in q.items()}, x).data)

    worst = 0.0
    h = 1e-5
    for k, v in p.items():
        for idx in np.ndindex(v.shape):
            up = {kk: vv.copy() for kk, vv in p.items()}
            dn = {kk: vv.copy() for kk, vv in p.items()}
            up[k][idx] += h
            dn[k][idx] -= h
            fd = (value(up) - value(dn)) / (2 * h)
            an = grads[k][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst
