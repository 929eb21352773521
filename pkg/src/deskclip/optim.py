"""LAMB and AdamW with layer-wise LR decay, warmup schedules, and loss scaling.

Moments and a master copy of each parameter are kept in float64; the model's
float32 tensors are refreshed from the master after every applied step. If a
parameter is modified externally (checkpoint load, logit-scale clamp), the
master re-syncs from the tensor before the next update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DivergenceError, RangeError
from .tensor import Tensor

SCALE_FLOOR = 2.0**-20


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "lamb"  # "lamb" | "adamw"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.kind not in ("lamb", "adamw"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(f"betas must be in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0.0 or self.weight_decay < 0.0:
            raise ContractError(f"need eps > 0 and weight_decay >= 0, got {self.eps}, {self.weight_decay}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


def default_decay_exempt(name: str) -> bool:
    """Biases, norm gains, and the logit scale take no weight decay."""
    return name.endswith(".bias") or name.endswith(".gain") or name == "logit_scale"


@dataclass
class ParamGroup:
    name: str
    member_names: list[str]
    peak_lr: float
    layer_decay: float = 1.0
    depths: dict[str, int] = field(default_factory=dict)  # member -> depth index
    num_layers: int = 0
    decay_exempt: Callable[[str], bool] = default_decay_exempt

    def __post_init__(self):
        if not 0.0 < self.layer_decay <= 1.0:
            raise ContractError(f"layer_decay must be in (0, 1], got {self.layer_decay}")


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    shape: str = "cosine"  # "cosine" | "linear"

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ContractError(f"warmup {self.warmup_steps} exceeds total {self.total_steps}")
        if self.shape not in ("cosine", "linear"):
            raise ContractError(f"unknown schedule shape {self.shape!r}")


def lr_at(schedule: Schedule, peak: float, step: int) -> float:
    """Linear warmup 0 -> peak, then cosine or linear decay to exactly 0."""
    if step > schedule.total_steps:
        raise RangeError(f"step {step} beyond schedule total {schedule.total_steps}")
    if step < schedule.warmup_steps:
        return peak * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    t = 1.0 if span == 0 else (step - schedule.warmup_steps) / span
    if schedule.shape == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * t))
    return peak * (1.0 - t)


def layer_scales(layer_decay: float, num_layers: int) -> np.ndarray:
    """Scale per depth index 0..num_layers+1; the head (last index) is 1."""
    if not 0.0 < layer_decay <= 1.0:
        raise ContractError(f"layer_decay must be in (0, 1], got {layer_decay}")
    exponents = num_layers + 1 - np.arange(num_layers + 2)
    return layer_decay**exponents


# -- per-tensor update rules ----------------------------------------------------


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    master: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, param: Tensor) -> "MomentState":
        w = param.data.astype(np.float64)
        return cls(m=np.zeros_like(w), v=np.zeros_like(w), master=w.copy())


def _resync_master(param: Tensor, state: MomentState) -> None:
    stored = state.master.astype(param.data.dtype)
    changed = stored != param.data
    if changed.any():
        state.master[changed] = param.data[changed].astype(np.float64)


def _core_update(grad64: np.ndarray, state: MomentState, cfg: OptimizerConfig) -> np.ndarray:
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad64
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad64 * grad64
    m_hat = state.m / (1.0 - cfg.beta1**state.t)
    v_hat = state.v / (1.0 - cfg.beta2**state.t)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def lamb_step(param: Tensor, grad: np.ndarray, state: MomentState, cfg: OptimizerConfig,
              lr: float, apply_decay: bool = True, force_trust_ratio: float | None = None) -> bool:
    """Trust-ratio update; returns False (step skipped) on non-finite gradients."""
    grad64 = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad64).all():
        return False
    _resync_master(param, state)
    update = _core_update(grad64, state, cfg)
    if apply_decay and cfg.weight_decay:
        update = update + cfg.weight_decay * state.master
    if force_trust_ratio is not None:
        phi = force_trust_ratio
    else:
        w_norm = float(np.linalg.norm(state.master))
        u_norm = float(np.linalg.norm(update))
        phi = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
    state.master = state.master - lr * phi * update
    param.data = state.master.astype(param.data.dtype)
    return True


def adamw_step(param: Tensor, grad: np.ndarray, state: MomentState, cfg: OptimizerConfig,
               lr: float, apply_decay: bool = True) -> bool:
    """Decoupled-decay Adam update; same moment recurrences as lamb_step."""
    grad64 = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad64).all():
        return False
    _resync_master(param, state)
    update = _core_update(grad64, state, cfg)
    decay = cfg.weight_decay if apply_decay else 0.0
    state.master = state.master - lr * update - lr * decay * state.master
    param.data = state.master.astype(param.data.dtype)
    return True


class Optimizer:
    """Drives per-tensor updates over parameter groups with layer-wise decay."""

    def __init__(self, params: dict[str, Tensor], groups: list[ParamGroup], cfg: OptimizerConfig):
        grouped = [n for g in groups for n in g.member_names]
        if sorted(grouped) != sorted(params):
            missing = set(params) - set(grouped)
            extra = set(grouped) - set(params)
            raise ContractError(f"groups must partition params exactly (missing={missing}, extra={extra})")
        self.params = params
        self.groups = groups
        self.cfg = cfg
        self.state = {name: MomentState.fresh(p) for name, p in params.items()}
        self.last_effective_lrs: dict[str, float] = {}

    def step(self, group_lrs: dict[str, float]) -> bool:
        """Apply one update given lr_at() values per group; False if skipped."""
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                return False
        apply = lamb_step if self.cfg.kind == "lamb" else adamw_step
        self.last_effective_lrs = {}
        for group in self.groups:
            scales = layer_scales(group.layer_decay, group.num_layers)
            for name in group.member_names:
                param = self.params[name]
                grad = param.grad if param.grad is not None else np.zeros_like(param.data)
                depth = group.depths.get(name, group.num_layers + 1)
                lr = group_lrs[group.name] * float(scales[depth])
                apply(param, grad, self.state[name], self.cfg, lr,
                      apply_decay=not group.decay_exempt(name))
                self.last_effective_lrs[name] = lr
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state for checkpointing (float64 payloads)."""
        out: dict[str, np.ndarray] = {}
        for name, st in self.state.items():
            out[f"m/{name}"] = st.m
            out[f"v/{name}"] = st.v
            out[f"master/{name}"] = st.master
            out[f"t/{name}"] = np.array([st.t], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, st in self.state.items():
            st.m = arrays[f"m/{name}"].astype(np.float64).reshape(st.m.shape)
            st.v = arrays[f"v/{name}"].astype(np.float64).reshape(st.v.shape)
            st.master = arrays[f"master/{name}"].astype(np.float64).reshape(st.master.shape)
            st.t = int(arrays[f"t/{name}"][0])


# -- dynamic loss scaling ---------------------------------------------------------


@dataclass
class LossScalerState:
    scale: float = 2.0**15
    good_steps: int = 0
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5

    def __post_init__(self):
        if self.scale <= 0.0 or self.growth_factor <= 1.0 or not 0.0 < self.backoff_factor < 1.0:
            raise ContractError("loss scaler configured outside its domain")


def scaler_update(state: LossScalerState, overflow: bool) -> bool:
    """Advance the scaler state machine; True when the step counts as effective."""
    if overflow:
        state.scale *= state.backoff_factor
        state.good_steps = 0
        if state.scale < SCALE_FLOOR:
            raise DivergenceError(f"loss scale {state.scale} underflowed the 2^-20 floor")
        return False
    state.good_steps += 1
    if state.good_steps >= state.growth_interval:
        state.scale *= state.growth_factor
        state.good_steps = 0
    return True
