"""Synthetic multi-instance scene generator with exact ground truth.

Scenes are seeded and fully deterministic: K simple shapes (boxes, spheres,
L-shapes) are rejection-sampled into a voxel grid so that each new instance
sits at exactly the requested empty-voxel separation from the already placed
ones (gap 0 means touching faces).  Ground truth keeps every instance's own
occupancy grid and centroid even when the fused scene is one connected blob.

Condition tokens are a front-orthographic footprint of the scene: each token
marches along the depth axis and takes the first occupied voxel it hits.
Tokens over instance k carry the occupied latent code with instance k's
content signature on the spare channels; background tokens carry the empty
code.  Instance masks are exactly this nearest-instance token ownership, so
they are disjoint by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import TimiError
from .pipeline import LATENT_CHANNELS, ConditionSet, InstanceMaskSet, empty_code
from .rng import Rng

SHAPE_KINDS = ("box", "sphere", "l_shape")

# Content signatures on the three spare latent channels.  Distinct
# instances repel in content space, which is what lets attention commit
# latent tokens to one instance rather than a blend.  Two instances get
# antipodal directions (dot -1); three or four get tetrahedral ones
# (pairwise dot -1/3).
_TETRA = np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
) / np.sqrt(3.0)


def instance_signatures(k: int) -> np.ndarray:
    """(k, 3) unit content signatures for k instances."""
    if k == 2:
        return np.array([_TETRA[0], -_TETRA[0]])
    return _TETRA[:k]

_MAX_PROPOSALS = 1000
_TRIES_PER_INSTANCE = 50


@dataclass
class SceneSpec:
    dims: tuple[int, int, int] = (10, 10, 10)
    n_instances: int = 2  # 2..4
    size_min: int = 3  # voxels per axis
    size_max: int = 5
    gap: int = 0  # exact empty-voxel separation between instances: 0, 1 or 2
    token_grid: tuple[int, int] = (16, 16)
    seed: int = 0
    shapes: tuple[str, ...] | None = None  # None: sampled per instance

    def validate(self):
        if not 2 <= self.n_instances <= len(_TETRA):
            raise TimiError("bad-config", "instance count must be in [2, 4]")
        if self.gap not in (0, 1, 2):
            raise TimiError("bad-config", "gap must be 0, 1 or 2")
        if self.size_min < 2 or self.size_max < self.size_min:
            raise TimiError("bad-config", "bad size range")
        if self.shapes is not None:
            if len(self.shapes) != self.n_instances:
                raise TimiError("bad-config", "one shape kind per instance")
            for s in self.shapes:
                if s not in SHAPE_KINDS:
                    raise TimiError("bad-config", f"unknown shape {s!r}")


@dataclass
class SceneRecord:
    spec: SceneSpec
    fused: np.ndarray  # (D, H, W) bool
    instance_grids: list[np.ndarray]  # K x (D, H, W) bool
    centroids: np.ndarray  # (K, 3) voxel-center coordinates
    cond: ConditionSet
    masks: InstanceMaskSet
    shape_kinds: list[str] = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return len(self.instance_grids)


def _rasterize(kind: str, sizes: tuple[int, int, int], pos: tuple[int, int, int],
               dims: tuple[int, int, int]) -> np.ndarray:
    occ = np.zeros(dims, dtype=bool)
    sd, sh, sw = sizes
    d0, h0, w0 = pos
    if kind == "box":
        occ[d0:d0 + sd, h0:h0 + sh, w0:w0 + sw] = True
    elif kind == "sphere":
        r = sd / 2.0  # sphere uses the first size for all axes
        ctr = np.array([d0 + r, h0 + r, w0 + r])
        dd, hh, ww = np.mgrid[d0:d0 + sd, h0:h0 + sh, w0:w0 + sw]
        centers = np.stack([dd + 0.5, hh + 0.5, ww + 0.5], axis=-1)
        inside = np.sqrt(((centers - ctr) ** 2).sum(axis=-1)) <= r
        occ[d0:d0 + sd, h0:h0 + sh, w0:w0 + sw] = inside
    elif kind == "l_shape":
        occ[d0:d0 + sd, h0:h0 + sh, w0:w0 + sw] = True
        occ[d0:d0 + sd, h0 + sh // 2:h0 + sh, w0 + sw // 2:w0 + sw] = False
    else:
        raise TimiError("bad-config", f"unknown shape {kind!r}")
    return occ


def _min_chebyshev(a: np.ndarray, b: np.ndarray) -> int:
    """Minimum Chebyshev distance between two voxel coordinate sets."""
    diff = np.abs(a[:, None, :] - b[None, :, :]).max(axis=2)
    return int(diff.min())


def _touches_face(a: np.ndarray, b: np.ndarray) -> bool:
    """True when some voxel pair shares a face (Manhattan distance 1)."""
    manhattan = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    return bool((manhattan == 1).any())


def _sample_instance(rng: Rng, spec: SceneSpec, kind: str):
    d, h, w = spec.dims
    if kind == "sphere":
        s = rng.randint(spec.size_min, spec.size_max + 1)
        sizes = (s, s, s)
    else:
        sizes = tuple(rng.randint(spec.size_min, spec.size_max + 1) for _ in range(3))
    pos = tuple(rng.randint(0, dim - size + 1) for dim, size in zip((d, h, w), sizes))
    return _rasterize(kind, sizes, pos, spec.dims)


def _build_tokens(spec: SceneSpec, fused: np.ndarray, grids: list[np.ndarray]):
    """Front-orthographic footprint: payloads, positions and ownership masks."""
    gh, gw = spec.token_grid
    d, h, w = spec.dims
    m = gh * gw
    sigs = instance_signatures(len(grids))
    tokens = np.tile(empty_code(), (m, 1))
    pos2d = np.empty((m, 2), dtype=np.float64)
    masks = np.zeros((len(grids), m), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            t = i * gw + j
            pos2d[t] = ((i + 0.5) / gh, (j + 0.5) / gw)
            hh = min(int((i + 0.5) / gh * h), h - 1)
            ww = min(int((j + 0.5) / gw * w), w - 1)
            column = fused[:, hh, ww]
            hits = np.flatnonzero(column)
            if len(hits) == 0:
                continue
            dd = hits[0]  # nearest occupied voxel, front to back
            owner = next(k for k, g in enumerate(grids) if g[dd, hh, ww])
            masks[owner, t] = 1.0
            tokens[t, 0] = 1.0
            tokens[t, 1:] = sigs[owner]
    return tokens, pos2d, masks


def generate_scene(spec: SceneSpec) -> SceneRecord:
    """Rejection-sample a scene honoring the exact-gap constraint.

    A proposal places all instances (each gets a bounded number of position
    draws; every one after the first must sit at exactly ``gap`` empty
    voxels from the union of the placed ones) and is rejected whenever an
    instance would own no condition token.  Proposals beyond the budget
    raise ``packing-failed``; callers retry with a fresh seed.
    """
    spec.validate()
    rng = Rng(spec.seed)
    required = spec.gap + 1  # exact min Chebyshev distance between voxel sets
    for _ in range(_MAX_PROPOSALS):
        kinds = list(spec.shapes) if spec.shapes is not None else [
            rng.choice(SHAPE_KINDS) for _ in range(spec.n_instances)
        ]
        grids: list[np.ndarray] = []
        coords: list[np.ndarray] = []
        ok = True
        for k in range(spec.n_instances):
            placed = False
            for _ in range(_TRIES_PER_INSTANCE):
                occ = _sample_instance(rng, spec, kinds[k])
                pts = np.argwhere(occ)
                if len(pts) == 0:
                    continue
                if k == 0:
                    placed = True
                else:
                    union = np.concatenate(coords)
                    if _min_chebyshev(pts, union) == required:
                        # gap 0 means actual face contact, not a diagonal graze
                        placed = spec.gap > 0 or _touches_face(pts, union)
                if placed:
                    grids.append(occ)
                    coords.append(pts)
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        fused = np.logical_or.reduce(grids)
        tokens, pos2d, mask_arr = _build_tokens(spec, fused, grids)
        if np.any(mask_arr.sum(axis=1) == 0):
            continue  # an instance is fully occluded: reject the proposal
        centroids = np.stack([c.astype(np.float64).mean(axis=0) + 0.5 for c in coords])
        return SceneRecord(
            spec=spec,
            fused=fused,
            instance_grids=grids,
            centroids=centroids,
            cond=ConditionSet(spec.token_grid, tokens, pos2d),
            masks=InstanceMaskSet(mask_arr),
            shape_kinds=kinds,
        )
    raise TimiError("packing-failed", f"no valid placement after {_MAX_PROPOSALS} proposals")


def entangled_baseline_check(record: SceneRecord, run_cfg) -> dict:
    """Run the unguided pipeline on a scene and report its separation state.

    Diagnostic only: used to certify that the default temperature makes the
    baseline fuse adjacent instances (SSR < 1) on gap-0 scenes.
    """
    from dataclasses import replace

    from .metrics import extract_instances, ssr
    from .runner import run_scene

    result = run_scene(record, replace(run_cfg, use_isg=False))
    n_pred = len(extract_instances(result.pred_occ, run_cfg.min_component_size))
    return {
        "n_pred": n_pred,
        "n_gt": record.n_instances,
        "ssr": ssr(n_pred, record.n_instances),
    }


# ---------------------------------------------------------------------------
# Scene directory format: scene.json + fused / per-instance occupancy blobs.
# ---------------------------------------------------------------------------


def save_scene(record: SceneRecord, directory: str | Path) -> None:
    from .fields import save_blob

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec_dict = asdict(record.spec)
    spec_dict["dims"] = list(record.spec.dims)
    spec_dict["token_grid"] = list(record.spec.token_grid)
    spec_dict["shapes"] = list(record.spec.shapes) if record.spec.shapes else None
    meta = {
        "spec": spec_dict,
        "shape_kinds": record.shape_kinds,
        "centroids": record.centroids.tolist(),
        "mask_tokens": [
            np.flatnonzero(record.masks.masks[k]).tolist() for k in range(record.masks.k)
        ],
    }
    (directory / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    save_blob(directory / "fused", record.fused.astype(np.float64)[None])
    for k, g in enumerate(record.instance_grids):
        save_blob(directory / f"inst_{k}", g.astype(np.float64)[None])


def load_scene(directory: str | Path) -> SceneRecord:
    from .fields import load_blob

    directory = Path(directory)
    meta = json.loads((directory / "scene.json").read_text())
    sd = meta["spec"]
    spec = SceneSpec(
        dims=tuple(sd["dims"]),
        n_instances=sd["n_instances"],
        size_min=sd["size_min"],
        size_max=sd["size_max"],
        gap=sd["gap"],
        token_grid=tuple(sd["token_grid"]),
        seed=sd["seed"],
        shapes=tuple(sd["shapes"]) if sd["shapes"] else None,
    )
    fused = load_blob(directory / "fused")[0] > 0.5
    grids = [
        load_blob(directory / f"inst_{k}")[0] > 0.5 for k in range(spec.n_instances)
    ]
    tokens, pos2d, mask_arr = _build_tokens(spec, fused, grids)
    expected = [np.flatnonzero(mask_arr[k]).tolist() for k in range(len(grids))]
    if expected != meta["mask_tokens"]:
        raise TimiError("bad-scene", "stored masks disagree with the geometry")
    return SceneRecord(
        spec=spec,
        fused=fused,
        instance_grids=grids,
        centroids=np.array(meta["centroids"], dtype=np.float64),
        cond=ConditionSet(spec.token_grid, tokens, pos2d),
        masks=InstanceMaskSet(mask_arr),
        shape_kinds=list(meta["shape_kinds"]),
    )
