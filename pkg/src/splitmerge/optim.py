"""RMSProp and Adam with a shared lr/epoch decay schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = ["RmsProp", "Adam", "make_optimizer"]


class _Optimizer:
    """Shared bookkeeping: named parameters, epoch counter, lr/k decay."""

    kind = "base"

    def __init__(self, params: dict[str, Tensor], base_rate: float):
        self.params = dict(params)
        self.base_rate = float(base_rate)
        self.epoch = 1
        self.slots: dict[str, dict[str, np.ndarray]] = {
            name: self._init_slot(p) for name, p in self.params.items()
        }

    def _init_slot(self, p: Tensor) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @property
    def effective_rate(self) -> float:
        return self.base_rate / self.epoch

    def set_epoch(self, k: int):
        if k < 1:
            raise ValueError(f"epoch counter must be >= 1, got {k}")
        self.epoch = int(k)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def clip_global_norm(self, max_norm: float):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        if norm > max_norm > 0:
            c = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= c
        return norm

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
            self._update(name, p, g)

    def _update(self, name: str, p: Tensor, g: np.ndarray):
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_rate": self.base_rate,
            "epoch": self.epoch,
            "slots": {
                name: {k: v.tolist() for k, v in slot.items() if isinstance(v, np.ndarray)}
                | {k: v for k, v in slot.items() if not isinstance(v, np.ndarray)}
                for name, slot in self.slots.items()
            },
        }

    def load_state_dict(self, state: dict):
        if state["kind"] != self.kind:
            raise ValueError(f"optimizer kind mismatch: {state['kind']} != {self.kind}")
        self.base_rate = float(state["base_rate"])
        self.epoch = int(state["epoch"])
        for name, slot in state["slots"].items():
            target = self.slots[name]
            for k, v in slot.items():
                if isinstance(target.get(k), np.ndarray):
                    target[k] = np.asarray(v, dtype=np.float64).reshape(target[k].shape)
                else:
                    target[k] = v


class RmsProp(_Optimizer):
    kind = "rmsprop"

    def __init__(self, params, base_rate=0.01, decay=0.9, eps=1e-8):
        self.decay = float(decay)
        self.eps = float(eps)
        super().__init__(params, base_rate)

    def _init_slot(self, p):
        return {"sq": np.zeros_like(p.data)}

    def _update(self, name, p, g):
        slot = self.slots[name]
        slot["sq"] = self.decay * slot["sq"] + (1.0 - self.decay) * g * g
        p.data -= self.effective_rate * g / np.sqrt(slot["sq"] + self.eps)


class Adam(_Optimizer):
    kind = "adam"

    def __init__(self, params, base_rate=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        super().__init__(params, base_rate)

    def _init_slot(self, p):
        return {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}

    def _update(self, name, p, g):
        slot = self.slots[name]
        slot["t"] = int(slot["t"]) + 1
        t = slot["t"]
        slot["m"] = self.beta1 * slot["m"] + (1.0 - self.beta1) * g
        slot["v"] = self.beta2 * slot["v"] + (1.0 - self.beta2) * g * g
        mhat = slot["m"] / (1.0 - self.beta1 ** t)
        vhat = slot["v"] / (1.0 - self.beta2 ** t)
        p.data -= self.effective_rate * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params: dict[str, Tensor], base_rate: float) -> _Optimizer:
    if kind == "rmsprop":
        return RmsProp(params, base_rate)
    if kind == "adam":
        return Adam(params, base_rate)
    raise ValueError(f"unknown optimizer kind {kind!r}")
