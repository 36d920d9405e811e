from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def check_gradients(fn: Callable[..., Tensor], x0, eps: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``x0`` is one tensor or a sequence of tensors passed positionally to
    ``fn``; every coordinate of every input is perturbed.
    """
    xs: Sequence = [x0] if isinstance(x0, (Tensor, np.ndarray)) else list(x0)
    leaves = [Tensor(np.asarray(getattr(x, "data", x)), requires_grad=True) for x in xs]
    with GradTape() as tape:
        loss = fn(*leaves)
    analytic = tape.gradient(loss, leaves)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        base = leaf.data.copy()
        flat = base.reshape(-1)
        num = np.empty_like(flat)
        for j in range(flat.size):
            args = [Tensor(l.data) for l in leaves]
            plus, minus = flat.copy(), flat.copy()
            plus[j] += eps
            minus[j] -= eps
            args[i] = Tensor(plus.reshape(base.shape))
            fp = fn(*args).item()
            args[i] = Tensor(minus.reshape(base.shape))
            fm = fn(*args).item()
            num[j] = (fp - fm) / (2.0 * eps)
        a = analytic[i].reshape(-1)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
