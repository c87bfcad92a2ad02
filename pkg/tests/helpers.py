"""Shared oracles for the test suite."""

import numpy as np

from patchprior import autodiff as ad


def fd_check(loss_fn, arrays, h=1e-5, max_coords=40, seed=0):
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` takes tensors and returns a scalar tensor.  A random subset of
    at most ``max_coords`` coordinates per input is probed.  The relative
    error is |g_ad - g_fd| / max(|g_fd|, 1e-2 * scale) with ``scale`` the
    largest finite-difference magnitude, so near-zero coordinates are judged
    against the gradient's overall size.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.grad(loss_fn(*tensors), tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            up = float(loss_fn(*[ad.Tensor(b) for b in arrays]).data)
            flat[c] = old - h
            dn = float(loss_fn(*[ad.Tensor(b) for b in arrays]).data)
            flat[c] = old
            fd[j] = (up - dn) / (2 * h)
        an = grads[k].reshape(-1)[coords]
        scale = max(np.abs(fd).max(), 1e-12)
        rel = np.abs(an - fd) / np.maximum(np.abs(fd), 1e-2 * scale)
        worst = max(worst, float(rel.max()))
    return worst
