"""Deterministic toy image-to-3D pipeline.

A stand-in for a pretrained latent diffusion stack that needs no weights:

* a resolution-preserving "VAE" over occupancy grids (4 channels, channel 0
  is signed occupancy),
* an untrained multi-layer joint-attention denoiser whose 3D-to-image
  cross-attention block is capturable and differentiable,
* a fixed-step Euler sampler and seeded Gaussian noise init.

Each layer embeds the raw inputs independently (no residual stream): latent
token v as proj([pos3d(v), z_channels(v)]), condition token m as
proj([pos2d(m), payload(m)]).  The embeddings share their (h, w) positional
blocks and their content block across the two projections, and queries and
keys share one projection matrix, so token affinity approximately equals
embedding dot product.  That gives the untrained network a 2D<->3D position
correspondence prior plus a content channel the guidance can steer; the
attention temperature widens or sharpens the correspondence kernel, which is
what makes adjacent instances fuse (or not) in the decoded scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TimiError
from .rng import Rng, mix_seeds

LATENT_CHANNELS = 4

# 8 fixed sinusoids per axis: sin/cos pairs at these spatial frequencies.
POS_FREQS = (1.0, 1.7, 2.9, 4.9)
POS_FEATS_PER_AXIS = 2 * len(POS_FREQS)

# Gains on the condition-side shared blocks.  Tuned so that, at temperature
# 1.0, matching-footprint tokens win the row softmax against the latent-key
# bulk by a margin small enough that adjacent instances still bleed into
# each other (the entanglement the guidance is meant to cure).
COND_POS_GAIN = 5.0
COND_OCC_GAIN = 1.0  # occupancy channel of the payload
COND_SIG_GAIN = 9.0  # instance-signature channels of the payload
DEPTH_POS_SCALE = 0.25  # depth axis has no condition counterpart: noise only


def empty_code(channels: int = LATENT_CHANNELS) -> np.ndarray:
    """Latent code of empty space: signed occupancy -1, content channels 0."""
    code = np.zeros(channels, dtype=np.float64)
    code[0] = -1.0
    return code


def toy_encode(occ: np.ndarray) -> np.ndarray:
    """Occupancy grid (D, H, W) in {0,1} -> latent field (4, D, H, W)."""
    occ = np.asarray(occ)
    if not np.all((occ == 0) | (occ == 1)):
        raise TimiError("bad-occupancy", "entries must be 0 or 1")
    z = np.zeros((LATENT_CHANNELS,) + occ.shape, dtype=np.float64)
    z[0] = 2.0 * occ.astype(np.float64) - 1.0
    return z


def toy_decode(z: np.ndarray) -> np.ndarray:
    """Latent field -> occupancy grid: strictly positive channel 0."""
    return z[0] > 0.0


def sampler_step(z_s: np.ndarray, x0_hat: np.ndarray, s: int, total_steps: int) -> np.ndarray:
    """One Euler interpolation step toward the clean-sample readout."""
    if not 0 <= s < total_steps:
        raise TimiError("step-overflow", f"step {s} outside [0, {total_steps})")
    if total_steps - s == 1:
        return x0_hat.copy()  # exact: float z + (x0 - z) need not equal x0
    return z_s + (x0_hat - z_s) / float(total_steps - s)


def init_noise(dims: tuple[int, int, int], channels: int, rng: Rng) -> np.ndarray:
    """I.i.d. standard normal latent field (channels, D, H, W)."""
    d, h, w = dims
    return rng.normals(channels * d * h * w).reshape(channels, d, h, w)


# ---------------------------------------------------------------------------
# Condition inputs
# ---------------------------------------------------------------------------


@dataclass
class ConditionSet:
    """Image-side tokens: payload vectors plus normalized 2D positions."""

    token_grid: tuple[int, int]  # (Gh, Gw)
    tokens: np.ndarray  # (M, C) payload per token, empty code for background
    pos2d: np.ndarray  # (M, 2) in [0, 1]^2

    def __post_init__(self):
        gh, gw = self.token_grid
        if self.tokens.shape[0] != gh * gw or self.pos2d.shape != (gh * gw, 2):
            raise TimiError("bad-condition", "token count must equal Gh*Gw")
        if not np.all(np.isfinite(self.tokens)):
            raise TimiError("bad-condition", "non-finite payload")

    @property
    def m(self) -> int:
        return self.tokens.shape[0]


@dataclass
class InstanceMaskSet:
    """K binary masks over the M condition tokens (overlap allowed)."""

    masks: np.ndarray  # (K, M) of 0.0 / 1.0

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 2:
            raise TimiError("mask-dim", "masks must be (K, M)")
        if not np.all((self.masks == 0.0) | (self.masks == 1.0)):
            raise TimiError("mask-dim", "masks must be binary")
        if np.any(self.masks.sum(axis=1) == 0):
            raise TimiError("mask-dim", "every mask needs at least one token")

    @property
    def k(self) -> int:
        return self.masks.shape[0]

    @property
    def m(self) -> int:
        return self.masks.shape[1]


@dataclass
class DenoiserConfig:
    n_layers: int = 6
    d: int = 32
    attn_temperature: float = 1.1
    weight_seed: int = 1

    def validate(self, guided_layer_max: int | None = None):
        if self.attn_temperature <= 0:
            raise TimiError("bad-config", "attn_temperature must be > 0")
        if self.d < LATENT_CHANNELS + 3 * POS_FEATS_PER_AXIS:
            raise TimiError("bad-config", "embedding width too small for features")
        if guided_layer_max is not None and self.n_layers < guided_layer_max:
            raise TimiError("bad-config", "n_layers below guided layer window")


def positional_features(coords: np.ndarray) -> np.ndarray:
    """(N, A) normalized coords -> (N, A * 8) sin/cos features per axis."""
    n, axes = coords.shape
    out = np.empty((n, axes * POS_FEATS_PER_AXIS), dtype=np.float64)
    col = 0
    for a in range(axes):
        for f in POS_FREQS:
            ang = 2.0 * np.pi * f * coords[:, a]
            out[:, col] = np.sin(ang)
            out[:, col + 1] = np.cos(ang)
            col += 2
    return out


def latent_positions(dims: tuple[int, int, int]) -> np.ndarray:
    """Normalized voxel-center coordinates, token order (D outer, W inner)."""
    d, h, w = dims
    dd, hh, ww = np.meshgrid(
        (np.arange(d) + 0.5) / d,
        (np.arange(h) + 0.5) / h,
        (np.arange(w) + 0.5) / w,
        indexing="ij",
    )
    return np.stack([dd.ravel(), hh.ravel(), ww.ravel()], axis=1)


@dataclass
class LayerWeights:
    w_emb_z: np.ndarray  # (24 + C, d) latent-token embedding
    w_emb_c: np.ndarray  # (16 + C, d) condition-token embedding
    p_qk: np.ndarray  # (d, d) shared query/key projection


@dataclass
class DenoiserWeights:
    cfg: DenoiserConfig
    channels: int
    layers: list[LayerWeights]


def build_weights(cfg: DenoiserConfig, channels: int = LATENT_CHANNELS) -> DenoiserWeights:
    """Draw all projection matrices deterministically from the weight seed.

    Entries are N(0, 1/d).  The (h, w) positional blocks and the content
    block are shared between the latent and condition embeddings (the
    condition side scaled by the gains above); everything else is
    independent per layer.
    """
    p = POS_FEATS_PER_AXIS
    scale = 1.0 / np.sqrt(cfg.d)
    content_gain = np.full(channels, COND_SIG_GAIN)
    content_gain[0] = COND_OCC_GAIN
    layers = []
    for layer in range(1, cfg.n_layers + 1):
        rng = Rng(mix_seeds(cfg.weight_seed, layer))
        r_depth = rng.normals(p * cfg.d).reshape(p, cfg.d) * (scale * DEPTH_POS_SCALE)
        b_h = rng.normals(p * cfg.d).reshape(p, cfg.d) * scale
        b_w = rng.normals(p * cfg.d).reshape(p, cfg.d) * scale
        r_content = rng.normals(channels * cfg.d).reshape(channels, cfg.d) * scale
        # Orthonormalized so query-key affinity equals embedding dot product
        # exactly (a dense draw adds Wishart noise that drowns the kernel).
        g = rng.normals(cfg.d * cfg.d).reshape(cfg.d, cfg.d)
        p_qk, _ = np.linalg.qr(g)
        w_emb_z = np.vstack([r_depth, b_h, b_w, r_content])
        w_emb_c = np.vstack(
            [COND_POS_GAIN * b_h, COND_POS_GAIN * b_w, content_gain[:, None] * r_content]
        )
        layers.append(LayerWeights(w_emb_z, w_emb_c, p_qk))
    return DenoiserWeights(cfg, channels, layers)


@dataclass
class AttentionCapture:
    """Cross-attention block of one layer plus state for its backward pass.

    ``a_zc`` rows are latent tokens, columns are condition tokens; the row
    softmax also spans the latent-key columns, whose contribution survives
    in ``row_max`` / ``row_denom`` so the backward can rebuild full rows.
    """

    layer_index: int
    a_zc: np.ndarray  # (L, M)
    q_z: np.ndarray  # (L, d) latent queries (= latent keys)
    k_all: np.ndarray  # (M + L, d) keys, condition tokens first
    row_max: np.ndarray  # (L,) per-row logit max
    row_denom: np.ndarray  # (L,) sum of exp(logit - row_max) over all columns
    inv_scale: float  # 1 / (sqrt(d) * temperature)
    dims: tuple[int, int, int, int]  # (C, D, H, W) of the latent
    weights: LayerWeights = field(repr=False)


class ForwardContext:
    """Per-run precomputation: condition keys and latent positional terms."""

    def __init__(self, weights: DenoiserWeights, cond: ConditionSet, dims: tuple[int, int, int]):
        self.weights = weights
        self.cond = cond
        self.dims = dims
        pos3 = positional_features(latent_positions(dims))  # (L, 24)
        pos2 = positional_features(cond.pos2d)  # (M, 16)
        p3 = pos3.shape[1]
        self.pos_term_z = []  # (L, d) per layer
        self.k_c = []  # (M, d) per layer
        self.w_content = []  # (C, d) per layer, content rows of w_emb_z
        for lw in weights.layers:
            e_c = np.hstack([pos2, cond.tokens]) @ lw.w_emb_c
            self.pos_term_z.append(pos3 @ lw.w_emb_z[:p3])
            self.k_c.append(e_c @ lw.p_qk)
            self.w_content.append(lw.w_emb_z[p3:])


_CHUNK_ROWS = 4096


def denoiser_forward(
    z: np.ndarray,
    cond: ConditionSet,
    cfg: DenoiserConfig,
    capture_layers: tuple[int, ...] = (),
    weights: DenoiserWeights | None = None,
    ctx: ForwardContext | None = None,
) -> tuple[np.ndarray, list[AttentionCapture]]:
    """One denoiser pass: clean-sample readout plus requested captures.

    Layers whose attention is neither captured nor the final readout layer
    are skipped: they embed the raw inputs independently, so they have no
    observable effect.  Passing ``weights`` / ``ctx`` avoids rebuilding
    per-run state inside the sampling loop.
    """
    cfg.validate()
    for layer in capture_layers:
        if not 1 <= layer <= cfg.n_layers:
            raise TimiError("bad-layer", f"capture layer {layer} outside [1, {cfg.n_layers}]")
    c, d, h, w = z.shape
    dims = (d, h, w)
    if weights is None:
        weights = build_weights(cfg, channels=c)
    if ctx is None:
        ctx = ForwardContext(weights, cond, dims)
    m = cond.m
    length = d * h * w
    z_tok = z.reshape(c, length).T  # (L, C)
    inv_scale = 1.0 / (np.sqrt(cfg.d) * cfg.attn_temperature)
    bg = empty_code(c)

    captures: dict[int, AttentionCapture] = {}
    x0_hat = None
    need = sorted(set(capture_layers) | {cfg.n_layers})
    for layer in need:
        lw = weights.layers[layer - 1]
        e_z = ctx.pos_term_z[layer - 1] + z_tok @ ctx.w_content[layer - 1]  # (L, d)
        q_z = e_z @ lw.p_qk
        k_all = np.vstack([ctx.k_c[layer - 1], q_z])  # latent keys = latent queries
        a_zc = np.empty((length, m), dtype=np.float64)
        row_max = np.empty(length, dtype=np.float64)
        row_denom = np.empty(length, dtype=np.float64)
        for lo in range(0, length, _CHUNK_ROWS):
            hi = min(lo + _CHUNK_ROWS, length)
            s = (q_z[lo:hi] @ k_all.T) * inv_scale
            mx = s.max(axis=1)
            np.exp(s - mx[:, None], out=s)
            denom = s.sum(axis=1)
            a_zc[lo:hi] = s[:, :m] / denom[:, None]
            row_max[lo:hi] = mx
            row_denom[lo:hi] = denom
        if layer in capture_layers:
            captures[layer] = AttentionCapture(
                layer, a_zc, q_z, k_all, row_max, row_denom, inv_scale, z.shape, lw
            )
        if layer == cfg.n_layers:
            residual = 1.0 - a_zc.sum(axis=1)
            x0_tok = a_zc @ cond.tokens + residual[:, None] * bg[None, :]
            x0_hat = x0_tok.T.reshape(z.shape)
    return x0_hat, [captures[layer] for layer in sorted(captures)]


def attention_backward(cap: AttentionCapture, d_azc: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss through one captured layer.

    Given dLoss/dA_zc, backpropagates through the full-row softmax (the
    latent-key columns are rebuilt from the stored row statistics), the
    shared query/key projection, and the latent-token embedding; returns
    dLoss/dz with the latent field's shape.  The condition embeddings carry
    no dependence on z, so their branch is dropped.
    """
    c, d, h, w = cap.dims
    length = d * h * w
    m = cap.a_zc.shape[1]
    # c_row[v] = sum_m dA[v,m] * A[v,m]: the softmax-Jacobian row coupling.
    c_row = np.einsum("vm,vm->v", d_azc, cap.a_zc)
    dq_z = np.empty_like(cap.q_z)
    dk_all = np.zeros_like(cap.k_all)
    for lo in range(0, length, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, length)
        s = (cap.q_z[lo:hi] @ cap.k_all.T) * cap.inv_scale
        np.exp(s - cap.row_max[lo:hi, None], out=s)
        a_full = s / cap.row_denom[lo:hi, None]
        ds = a_full * (-c_row[lo:hi, None])
        ds[:, :m] += a_full[:, :m] * d_azc[lo:hi]
        dq_z[lo:hi] = (ds @ cap.k_all) * cap.inv_scale
        dk_all += (ds.T @ cap.q_z[lo:hi]) * cap.inv_scale
    de_z = (dq_z + dk_all[m:]) @ cap.weights.p_qk.T
    p3 = cap.weights.w_emb_z.shape[0] - c
    dz_tok = de_z @ cap.weights.w_emb_z[p3:].T  # (L, C)
    return dz_tok.T.reshape(cap.dims)
