"""Instance-aware separation guidance.

Builds per-instance probability maps from captured cross-attention, derives
the structure-aware spatial weights, and evaluates the spatially weighted
negative log-likelihood separation objective together with its analytic
gradient with respect to the latent field.  A finite-difference oracle over
tiny grids verifies the gradient end to end.

The weight map is a constant target: no gradient flows through it, and the
finite-difference oracle freezes it at the evaluation point so both sides
differentiate the same objective.

Instance-order invariance: per-instance contributions are accumulated in a
canonical order keyed by mask content, so permuting the instances permutes
the P / W columns but leaves loss and gradient bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TimiError
from .pipeline import (
    AttentionCapture,
    ConditionSet,
    DenoiserConfig,
    InstanceMaskSet,
    attention_backward,
    denoiser_forward,
)

DEFAULT_EPS = 1e-6

FD_MAX_ENTRIES = 4096


@dataclass
class InstanceProbabilityMap:
    p: np.ndarray  # (L, K) in [0, 1]
    layer_index: int


@dataclass
class SpatialWeightMap:
    w: np.ndarray  # (L, K), nonnegative, columns sum to S_k / (S_k + eps)
    eps: float


@dataclass
class SeparationLossReport:
    loss_value: float
    per_layer_losses: list[float]
    grad: np.ndarray  # (C, D, H, W)


def _check_masks(cap: AttentionCapture, masks: InstanceMaskSet):
    if masks.m != cap.a_zc.shape[1]:
        raise TimiError(
            "mask-dim", f"mask length {masks.m} != capture columns {cap.a_zc.shape[1]}"
        )


def instance_probability(cap: AttentionCapture, masks: InstanceMaskSet) -> InstanceProbabilityMap:
    """P[v, k] = attention mass of latent token v on instance k's tokens."""
    _check_masks(cap, masks)
    return InstanceProbabilityMap(cap.a_zc @ masks.masks.T, cap.layer_index)


def spatial_weights(
    cap: AttentionCapture, masks: InstanceMaskSet, eps: float = DEFAULT_EPS
) -> SpatialWeightMap:
    """Masked attention, normalized per instance column over latent tokens."""
    if eps <= 0:
        raise TimiError("bad-config", "eps must be > 0")
    _check_masks(cap, masks)
    p = cap.a_zc @ masks.masks.T
    return SpatialWeightMap(p / (p.sum(axis=0, keepdims=True) + eps), eps)


def _canonical_instance_order(masks: InstanceMaskSet) -> list[int]:
    keys = [masks.masks[k].tobytes() for k in range(masks.k)]
    return sorted(range(masks.k), key=keys.__getitem__)


def _layer_loss_and_grad(
    cap: AttentionCapture,
    masks: InstanceMaskSet,
    eps_log: float,
    w_frozen: np.ndarray | None,
    with_grad: bool,
) -> tuple[float, np.ndarray | None]:
    p = cap.a_zc @ masks.masks.T
    w = w_frozen if w_frozen is not None else p / (p.sum(axis=0, keepdims=True) + eps_log)
    order = _canonical_instance_order(masks)
    logp = np.log(p + eps_log)
    loss = 0.0
    d_azc = np.zeros_like(cap.a_zc) if with_grad else None
    for k in order:
        loss += -float(np.dot(w[:, k], logp[:, k]))
        if with_grad:
            d_azc -= np.outer(w[:, k] / (p[:, k] + eps_log), masks.masks[k])
    return loss, d_azc


def separation_loss(
    caps: list[AttentionCapture],
    masks: InstanceMaskSet,
    eps_log: float = DEFAULT_EPS,
    with_grad: bool = True,
    frozen_weights: list[np.ndarray] | None = None,
) -> SeparationLossReport:
    """Mean separation loss over the guided layers, plus its latent gradient.

    ``frozen_weights`` substitutes externally fixed weight maps (one per
    capture, in layer order); the finite-difference oracle uses this to pin
    the target while the attention varies.
    """
    if eps_log <= 0:
        raise TimiError("bad-config", "eps_log must be > 0")
    if not caps:
        raise TimiError("no-captures", "separation loss needs at least one capture")
    caps = sorted(caps, key=lambda cap: cap.layer_index)
    n = len(caps)
    per_layer = []
    grad = None
    for i, cap in enumerate(caps):
        w_frozen = frozen_weights[i] if frozen_weights is not None else None
        loss_l, d_azc = _layer_loss_and_grad(cap, masks, eps_log, w_frozen, with_grad)
        per_layer.append(loss_l)
        if with_grad:
            layer_grad = attention_backward(cap, d_azc / n)
            grad = layer_grad if grad is None else grad + layer_grad
    total = sum(per_layer) / n
    if not with_grad:
        grad = np.zeros(caps[0].dims)
    return SeparationLossReport(total, per_layer, grad)


def fd_gradient_oracle(
    z: np.ndarray,
    cond: ConditionSet,
    cfg: DenoiserConfig,
    masks: InstanceMaskSet,
    guided_layers: tuple[int, ...],
    h: float = 1e-4,
    eps_log: float = DEFAULT_EPS,
) -> np.ndarray:
    """Central finite differences of the separation loss over every entry.

    Runs 2 * C * L forward passes, so it is restricted to tiny grids.  The
    spatial weight maps are computed once at ``z`` and held fixed for the
    perturbed evaluations, matching their constant-target role in the
    analytic gradient.
    """
    if h <= 0:
        raise TimiError("bad-config", "step h must be > 0")
    if z.size > FD_MAX_ENTRIES:
        raise TimiError("oracle-too-large", f"{z.size} entries > {FD_MAX_ENTRIES}")

    _, caps0 = denoiser_forward(z, cond, cfg, capture_layers=tuple(guided_layers))
    frozen = [
        spatial_weights(cap, masks, eps=eps_log).w
        for cap in sorted(caps0, key=lambda cap: cap.layer_index)
    ]

    def loss_at(zp: np.ndarray) -> float:
        _, caps = denoiser_forward(zp, cond, cfg, capture_layers=tuple(guided_layers))
        return separation_loss(
            caps, masks, eps_log=eps_log, with_grad=False, frozen_weights=frozen
        ).loss_value

    grad = np.zeros_like(z)
    flat = grad.reshape(-1)
    base = z.copy().reshape(-1)
    for i in range(base.size):
        zp = base.copy()
        zp[i] = base[i] + h
        lp = loss_at(zp.reshape(z.shape))
        zp[i] = base[i] - h
        lm = loss_at(zp.reshape(z.shape))
        flat[i] = (lp - lm) / (2.0 * h)
    return grad
