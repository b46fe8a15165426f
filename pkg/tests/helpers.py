"""Finite-difference oracles shared by the gradient tests."""
from __future__ import annotations

import numpy as np

from streamanchor import numerics as nx


def central_diff(f, x: np.ndarray, index, h: float = 1e-6) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring x afterwards."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_leaf_grads(build_loss, leaves, n_coords=None, rng=None, h=1e-6):
    """Max relative error between backward() and central differences.

    ``build_loss()`` must return a scalar Tensor computed from ``leaves``.
    """
    rng = rng or np.random.default_rng(0)
    with nx.Tape() as tape:
        loss = build_loss()
    grads = nx.backward(tape, loss)
    worst = 0.0
    value = lambda: float(nx._data(build_loss()))
    for leaf in leaves:
        g = grads.get(leaf, np.zeros_like(leaf.data))
        idxs = list(np.ndindex(leaf.shape)) if leaf.shape else [()]
        if n_coords is not None and len(idxs) > n_coords:
            pick = rng.choice(len(idxs), n_coords, replace=False)
            idxs = [idxs[i] for i in pick]
        for i in idxs:
            fd = central_diff(value, leaf.data, i, h)
            worst = max(worst, rel_err(float(np.asarray(g)[i]), fd))
    return worst


def model_param_grad_check(model, seqs, spec, task, n_coords: int, seed: int, h: float = 1e-6,
                           floor: float = 1e-5):
    """Relative errors at ``n_coords`` random parameter coordinates of one batch loss.

    The loss is O(1), so a step of 1e-6 leaves roughly 1e-10 of rounding
    noise in each difference quotient. The denominator floor keeps that
    noise from dominating on coordinates whose gradient is itself ~1e-7.
    """
    from streamanchor.losses import batch_loss
    from streamanchor.trainer import loss_and_grads, pad_batch

    _, grads = loss_and_grads(model, seqs, spec, task)
    x, y, w, lengths = pad_batch(seqs, task, spec.no_anchor_weight)

    def value():
        return float(nx._data(batch_loss(model.forward(x), y, w, lengths, spec)))

    names = list(model.params)
    sizes = np.array([model.params[n].data.size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), n_coords, replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for k in flat:
        j = int(np.searchsorted(bounds, k, side="right"))
        name = names[j]
        local = int(k - (bounds[j - 1] if j else 0))
        p = model.params[name].data
        idx = np.unravel_index(local, p.shape)
        fd = central_diff(value, p, idx, h)
        errs.append(rel_err(float(grads[name][idx]), fd, floor))
    return np.array(errs)
