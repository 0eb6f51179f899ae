"""AdamW with decoupled weight decay and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 2e-4
    total_steps: int = 1000
    warmup_fraction: float = 0.1
    warmup_start: float = 0.04   # rate at step 0 as a fraction of the peak
    final_div: float = 100.0     # rate at the last step is peak / final_div
    kind: str = "one_cycle"      # or "constant"

    def __post_init__(self):
        if self.peak_lr <= 0 or self.total_steps < 1:
            raise ValueError("peak_lr > 0 and total_steps >= 1 required")
        if not 0 <= self.warmup_fraction < 1 or self.final_div < 1:
            raise ValueError("bad schedule shape")
        if self.kind not in ("one_cycle", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def rate(self, step: int) -> float:
        """Learning rate for a 0-based step; a pure function of the step count."""
        if self.kind == "constant":
            return self.peak_lr
        w = self.warmup_steps
        lo = self.peak_lr * self.warmup_start
        if step < w:
            return lo + (self.peak_lr - lo) * step / w
        end = self.peak_lr / self.final_div
        span = max(self.total_steps - 1 - w, 1)
        frac = min(max((step - w) / span, 0.0), 1.0)
        return end + (self.peak_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    schedule: Schedule
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"schedule": asdict(self.schedule), "weight_decay": self.weight_decay,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "skipped": self.skipped}

    def moment_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out["m/" + k] = self.m[k]
            out["v/" + k] = self.v[k]
        return out

    @classmethod
    def restore(cls, hyper: dict, arrays: dict) -> "OptimState":
        h = dict(hyper)
        st = cls(schedule=Schedule(**h.pop("schedule")), **h)
        for k, a in arrays.items():
            kind, name = k.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = a.copy()
        return st


def optimizer_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """One AdamW update in place on ``params``; returns ``(params, state)``.

    Parameters without an entry in ``grads`` are frozen (no decay, no moments).

    A non-finite gradient anywhere skips the whole update (moments untouched) and
    bumps ``state.skipped``; the step counter still advances so the schedule and
    data order stay aligned with an uninterrupted run.
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            state.step += 1
            return params, state
    lr = state.schedule.rate(state.step)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step += 1
    return params, state
