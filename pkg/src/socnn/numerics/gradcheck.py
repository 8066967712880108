"""Central-difference gradient checking against the autodiff engine."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


class NonDeterministicLoss(RuntimeError):
    pass


def grad_check(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5,
               names: list[str] | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None, per_tensor: bool = False):
    """Compare analytic gradients of ``loss_fn(store)`` with central differences.

    Returns the max relative error ``|a - f| / max(|a|, |f|, 1e-8)`` over the
    checked entries; with ``per_tensor=True`` returns a name -> error dict.
    ``max_entries`` samples that many entries per tensor (all by default).
    """
    if store.dtype != np.float64:
        raise TypeError("gradient checks need a float64 parameter store")
    names = list(store.params) if names is None else names
    rng = np.random.default_rng(0) if rng is None else rng

    store.zero_grad()
    loss = loss_fn(store)
    base = float(loss.data)
    if float(loss_fn(store).data) != base:
        raise NonDeterministicLoss("loss_fn returned different values for identical parameters")
    loss.backward()
    analytic = {n: (store.params[n].grad if store.params[n].grad is not None
                    else np.zeros_like(store.params[n].data)).copy() for n in names}
    store.zero_grad()

    errors: dict[str, float] = {}
    for n in names:
        p = store.params[n].data
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(store).data)
            flat[i] = old - h
            down = float(loss_fn(store).data)
            flat[i] = old
            fd = (up - down) / (2.0 * h)
            a = analytic[n].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        errors[n] = worst
    if per_tensor:
        return errors
    return max(errors.values(), default=0.0)
