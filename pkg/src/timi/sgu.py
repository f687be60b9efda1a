"""Spatial-stabilized geometry-adaptive latent update.

Transforms the raw separation gradient into the applied latent update:
Gaussian smoothing of the gradient field, peak-normalized adaptive scaling
against the current latent's standard deviation, and a momentum buffer.
Order is fixed: loss -> smooth -> scale -> momentum -> subtract, one update
per guided timestep, and each step appends a log entry with the quantities
the invariants are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TimiError
from .fields import field_max_abs, field_std, gaussian_smooth
from .isg import separation_loss
from .pipeline import AttentionCapture, InstanceMaskSet


@dataclass
class GuidanceConfig:
    alpha: float = 0.1
    sigma: float = 1.5
    beta: float = 0.9
    eps: float = 1e-6
    guided_layer_max: int = 4
    guided_step_max: int = 15
    use_isg: bool = True
    use_gm: bool = True
    use_sr: bool = True
    use_momentum: bool = True

    def validate(self):
        if self.alpha <= 0:
            raise TimiError("bad-config", "alpha must be > 0")
        if self.use_sr and self.sigma <= 0:
            raise TimiError("bad-config", "sigma must be > 0 when smoothing is on")
        if not 0.0 <= self.beta < 1.0:
            raise TimiError("bad-config", "beta must be in [0, 1)")
        if self.eps <= 0:
            raise TimiError("bad-config", "eps must be > 0")


@dataclass
class StepLogEntry:
    step: int
    loss: float
    mu_max: float  # max |regularized gradient|
    lambda_adap: float
    max_delta: float  # max |scaled update| before momentum
    std_z: float  # latent std at the step, before the update
    raw_grad_max: float  # max |unsmoothed gradient| (diagnostic, not in CSV)


@dataclass
class GuidanceState:
    momentum: np.ndarray  # same shape as the latent, zero at step 0
    log: list[StepLogEntry] = field(default_factory=list)

    def append(self, entry: StepLogEntry):
        if self.log and entry.step <= self.log[-1].step:
            raise TimiError("bad-log", "step log must be strictly increasing")
        self.log.append(entry)


def new_state(latent_shape: tuple[int, ...]) -> GuidanceState:
    return GuidanceState(np.zeros(latent_shape, dtype=np.float64))


def regularize_gradient(grad: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """Gaussian-smooth the separation gradient (identity when SR is off)."""
    if not cfg.use_sr:
        return grad.copy()
    return gaussian_smooth(grad, cfg.sigma)


def adaptive_scale(
    g_reg: np.ndarray, z_t: np.ndarray, cfg: GuidanceConfig
) -> tuple[float, np.ndarray]:
    """Peak-normalized scaling: the largest update entry is alpha * std(z).

    With geometry-adaptive modulation off, the scale is the constant alpha
    (naive scaling).
    """
    if g_reg.shape != z_t.shape:
        raise TimiError("shape", f"gradient {g_reg.shape} vs latent {z_t.shape}")
    if cfg.use_gm:
        mu_max = field_max_abs(g_reg)
        lam = cfg.alpha * field_std(z_t) / (mu_max + cfg.eps)
    else:
        lam = cfg.alpha
    return lam, lam * g_reg


def momentum_update(
    state: GuidanceState, delta_z: np.ndarray, cfg: GuidanceConfig
) -> np.ndarray:
    """EMA the update into the momentum buffer; pass-through when disabled."""
    if state.momentum.shape != delta_z.shape:
        raise TimiError("shape", f"momentum {state.momentum.shape} vs delta {delta_z.shape}")
    if not cfg.use_momentum:
        return delta_z
    state.momentum = cfg.beta * state.momentum + (1.0 - cfg.beta) * delta_z
    return state.momentum.copy()


def apply_guided_step(
    z_t: np.ndarray,
    caps: list[AttentionCapture],
    masks: InstanceMaskSet,
    state: GuidanceState,
    cfg: GuidanceConfig,
    step: int,
) -> tuple[np.ndarray, GuidanceState]:
    """One full guidance update: z <- z - m, with a log entry appended.

    The caller gates on the guided window; calling outside it (or with the
    guidance disabled) is a contract violation.
    """
    if not cfg.use_isg or step >= cfg.guided_step_max:
        raise TimiError("window", f"step {step} outside the guided window")
    cfg.validate()
    report = separation_loss(caps, masks, eps_log=cfg.eps)
    g_reg = regularize_gradient(report.grad, cfg)
    lam, delta_z = adaptive_scale(g_reg, z_t, cfg)
    m = momentum_update(state, delta_z, cfg)
    state.append(
        StepLogEntry(
            step=step,
            loss=report.loss_value,
            mu_max=field_max_abs(g_reg),
            lambda_adap=lam,
            max_delta=field_max_abs(delta_z),
            std_z=field_std(z_t),
            raw_grad_max=field_max_abs(report.grad),
        )
    )
    return z_t - m, state
