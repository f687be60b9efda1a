"""End-to-end sampling runs over scene records.

One run: seeded Gaussian noise, then for every step a single denoiser
forward (capturing the guided layers while inside the guided window), an
optional guidance update applied to the latent before the sampler step, and
finally the occupancy decode.  After the guided window the momentum buffer
is frozen and no longer applied.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import TimiError
from .fields import assert_finite
from .isg import separation_loss
from .pipeline import (
    LATENT_CHANNELS,
    DenoiserConfig,
    ForwardContext,
    build_weights,
    denoiser_forward,
    init_noise,
    sampler_step,
    toy_decode,
)
from .rng import Rng
from .scenes import SceneRecord
from .sgu import GuidanceConfig, GuidanceState, StepLogEntry, apply_guided_step, new_state

STEPLOG_HEADER = "step,loss,mu_max,lambda,max_delta,std_z"


@dataclass
class RunConfig:
    """Flat configuration covering the denoiser, guidance, sampling and eval."""

    # denoiser
    n_layers: int = 6
    d: int = 32
    attn_temperature: float = 1.1
    weight_seed: int = 1
    # guidance
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
    # sampling
    total_steps: int = 50
    seed: int = 0
    # evaluation
    points_cap: int = 2048
    fscore_tau: float = 0.1
    min_component_size: int = 4

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.n_layers, self.d, self.attn_temperature, self.weight_seed)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(
            alpha=self.alpha,
            sigma=self.sigma,
            beta=self.beta,
            eps=self.eps,
            guided_layer_max=self.guided_layer_max,
            guided_step_max=self.guided_step_max,
            use_isg=self.use_isg,
            use_gm=self.use_gm,
            use_sr=self.use_sr,
            use_momentum=self.use_momentum,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**data)

    def echo(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_echo(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunResult:
    z_final: np.ndarray
    pred_occ: np.ndarray
    state: GuidanceState
    # (step, loss) pairs for unguided trajectories evaluated inside the
    # guided window; empty unless separation tracking was requested.
    loss_trace: list[tuple[int, float]] = field(default_factory=list)


def run_scene(record: SceneRecord, cfg: RunConfig, track_separation: bool = False) -> RunResult:
    """Sample one scene.  Raises ``numerical-divergence`` on any NaN latent."""
    dcfg = cfg.denoiser()
    gcfg = cfg.guidance()
    gcfg.validate()
    dcfg.validate(guided_layer_max=cfg.guided_layer_max if cfg.use_isg else None)

    dims = record.spec.dims
    weights = build_weights(dcfg, channels=LATENT_CHANNELS)
    ctx = ForwardContext(weights, record.cond, dims)
    z = init_noise(dims, LATENT_CHANNELS, Rng(cfg.seed))
    state = new_state(z.shape)
    guided_layers = tuple(range(1, cfg.guided_layer_max + 1))
    loss_trace: list[tuple[int, float]] = []

    for step in range(cfg.total_steps):
        in_window = step < cfg.guided_step_max
        guided = cfg.use_isg and in_window
        capture = guided_layers if (guided or (track_separation and in_window)) else ()
        x0_hat, caps = denoiser_forward(z, record.cond, dcfg, capture, weights, ctx)
        if guided:
            z, state = apply_guided_step(z, caps, record.masks, state, gcfg, step)
        elif caps:
            report = separation_loss(caps, record.masks, eps_log=cfg.eps, with_grad=False)
            loss_trace.append((step, report.loss_value))
        z = sampler_step(z, x0_hat, step, cfg.total_steps)
        if not np.all(np.isfinite(z)):
            raise TimiError("numerical-divergence", f"NaN latent at step {step}")
    assert_finite(z, "final latent")
    return RunResult(z, toy_decode(z), state, loss_trace)


def steplog_csv(entries: list[StepLogEntry]) -> str:
    lines = [STEPLOG_HEADER]
    for e in entries:
        lines.append(
            ",".join(
                repr(float(v))
                for v in (e.loss, e.mu_max, e.lambda_adap, e.max_delta, e.std_z)
            )
        )
        lines[-1] = f"{e.step}," + lines[-1]
    return "\n".join(lines) + "\n"
