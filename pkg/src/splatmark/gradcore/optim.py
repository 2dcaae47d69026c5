"""Adaptive-moment optimizer with per-parameter-group learning rates."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def sgd_adam_step(params, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-15):
    """One adaptive-moment update on `params`; moments live in `state`.

    `state` maps id(tensor) -> [step, m, v]. All params must carry grads.
    """
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_adam_step: parameter has no gradient")
        slot = state.get(id(p))
        if slot is None:
            slot = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
            state[id(p)] = slot
        slot[0] += 1
        t = slot[0]
        slot[1] = beta1 * slot[1] + (1 - beta1) * p.grad
        slot[2] = beta2 * slot[2] + (1 - beta2) * (p.grad * p.grad)
        m_hat = slot[1] / (1 - beta1**t)
        v_hat = slot[2] / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Groups of tensors, each with its own (mutable) learning rate."""

    def __init__(self, groups):
        # groups: list of dicts {"name": str, "params": [Tensor], "lr": float}
        self.groups = groups
        self.state: dict[int, list] = {}

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        for g in self.groups:
            live = [p for p in g["params"] if p.grad is not None]
            if live:
                sgd_adam_step(live, self.state, g["lr"])

    def set_lr(self, name: str, lr: float):
        for g in self.groups:
            if g["name"] == name:
                g["lr"] = lr
                return
        raise KeyError(name)

    def remap_rows(self, p: Tensor, keep_idx=None, n_new_rows: int = 0):
        """Mirror anchor grow/prune surgery in the moment buffers of `p`."""
        slot = self.state.get(id(p))
        if slot is None:
            return
        for k in (1, 2):
            buf = slot[k]
            if keep_idx is not None:
                buf = buf[keep_idx]
            if n_new_rows:
                buf = np.concatenate([buf, np.zeros((n_new_rows,) + buf.shape[1:])], axis=0)
            slot[k] = buf
