"""The training loop: Adam over scene rows with per-group learning rates,
periodic densification, logging, and checkpoints.

Learning-rate groups follow the usual splatting recipe: position moves at
a rate proportional to the scene extent with exponential decay over the
run, the other groups stay constant. The optimizer state lives in two
(N, P) moment matrices that follow the primitives through densification
(children start with zero moments).

Reproducibility contract: with a fixed config and seed the entire run is
deterministic down to the bit for any thread count. All randomness flows
from one PCG64 generator consumed in a fixed order (view sampling, then
any split jitter per round); the renderer and backward pass are
schedule-independent by construction.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .autograd import backward_with_renders
from .checkpoint import save_checkpoint
from .densify import DensifyConfig, densify_round
from .errors import EmptySceneError, NanLossError
from .losses import LossConfig, psnr
from .primitives import (
    COL_LOG_SCALE,
    COL_MU,
    COL_RAW_OPACITY,
    COL_ROT,
    HEAD_OFFSET,
    HeadSpec,
    Scene,
    init_sh,
    init_siren,
    inverse_sigmoid,
)

DEFAULT_ITERATIONS = 20_000


@dataclass
class TrainConfig:
    iterations: int = DEFAULT_ITERATIONS
    seed: int = 0
    threads: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    head: HeadSpec = field(default_factory=HeadSpec.siren)
    loss: LossConfig = field(default_factory=LossConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    lr_position: float = 1.6e-4        # x scene extent, decays to lr_position_final
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_head: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    init_opacity: float = 0.1
    init_scale_factor: float = 1.0     # multiplies the neighbor-distance init scales
    views_per_step: int = 1
    checkpoint_every: int = 0          # 0: only the final checkpoint


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(shape) -> "AdamState":
        return AdamState(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr_row: np.ndarray, cfg: TrainConfig) -> None:
    """One Adam update in place. lr_row holds one learning rate per column."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    params -= lr_row[None, :] * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def scene_extent(cameras, points: np.ndarray | None = None) -> float:
    """Radius of the camera rig, scaled by 1.1 (the usual splatting
    convention). With fewer than two cameras the rig has no radius, so the
    extent falls back to 1.1 x the median camera distance to the initial
    point centroid."""
    centers = np.stack([c.position for c in cameras])
    if len(cameras) >= 2:
        mean = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - mean, axis=1).max())
        if radius > 0.0:
            return 1.1 * radius
    target = points.mean(axis=0) if points is not None and len(points) else np.zeros(3)
    return 1.1 * float(np.median(np.linalg.norm(centers - target, axis=1)))


def init_scene(points: np.ndarray, head: HeadSpec, cfg: TrainConfig, rng: np.random.Generator) -> Scene:
    """Bootstrap primitives from a point cloud: identity rotation, both
    axes sized by the mean distance to the three nearest neighbors, low
    uniform opacity, randomly initialized heads."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise EmptySceneError(f"need an (M, 3) point cloud, got {points.shape}")
    n = len(points)
    params = np.zeros((n, HEAD_OFFSET + head.param_count))
    params[:, COL_MU] = points
    params[:, COL_ROT] = [1.0, 0.0, 0.0, 0.0]
    if n >= 4:
        tree = cKDTree(points)
        dists, _ = tree.query(points, k=4)
        nn = dists[:, 1:].mean(axis=1)
    else:
        nn = np.full(n, 0.1)
    nn = np.maximum(nn * cfg.init_scale_factor, 1e-7)
    params[:, COL_LOG_SCALE] = np.log(nn)[:, None]
    params[:, COL_RAW_OPACITY] = inverse_sigmoid(cfg.init_opacity)
    if head.kind == "siren":
        for i in range(n):
            params[i, HEAD_OFFSET:] = init_siren(rng, head)
    else:
        base = init_sh(np.full(3, 0.5), head.degree)
        params[:, HEAD_OFFSET:] = base[None, :]
    return Scene(params, head)


def lr_vector(cfg: TrainConfig, extent: float, iteration: int, row_width: int) -> np.ndarray:
    """Per-column learning rates at a given iteration (1-based)."""
    frac = iteration / max(cfg.iterations, 1)
    decay = (cfg.lr_position_final / cfg.lr_position) ** frac
    lr = np.empty(row_width)
    lr[COL_MU] = cfg.lr_position * extent * decay
    lr[COL_ROT] = cfg.lr_rotation
    lr[COL_LOG_SCALE] = cfg.lr_scale
    lr[COL_RAW_OPACITY] = cfg.lr_opacity
    lr[HEAD_OFFSET:] = cfg.lr_head
    return lr


@dataclass
class TrainResult:
    scene: Scene
    metrics: list
    events: list
    extent: float


def train(
    views,
    cfg: TrainConfig,
    *,
    initial_points: np.ndarray | None = None,
    initial_scene: Scene | None = None,
    out_dir=None,
    on_step=None,
    config_echo: dict | None = None,
) -> TrainResult:
    """Fit a scene to the training views.

    Pass either initial_points (bootstrapped into a fresh scene) or an
    initial_scene to resume from. When out_dir is given, metrics.jsonl,
    events.jsonl and checkpoints are written there.
    """
    views = list(views)
    if not views:
        raise EmptySceneError("training needs at least one view")
    rng = np.random.default_rng(cfg.seed)
    extent = scene_extent([v.camera for v in views], initial_points)

    if initial_scene is not None:
        scene = initial_scene.copy()
    else:
        if initial_points is None:
            raise EmptySceneError("need initial points or an initial scene")
        scene = init_scene(initial_points, cfg.head, cfg, rng)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = events_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_path / "metrics.jsonl", "w")
        events_file = open(out_path / "events.jsonl", "w")

    adam = AdamState.zeros(scene.params.shape)
    grad_sum = np.zeros(scene.n)
    grad_count = np.zeros(scene.n)
    densify_until = int(cfg.densify.until_fraction * cfg.iterations)
    round_index = 0
    metrics = []
    events = []

    try:
        for it in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            picks = rng.integers(0, len(views), size=cfg.views_per_step)
            batch = [views[int(p)] for p in picks]
            loss, bundle, renders = backward_with_renders(
                scene, batch, cfg.loss, background=cfg.background, threads=cfg.threads
            )
            if not np.isfinite(loss):
                _dump_diagnostics(out_path, it, scene, loss)
                raise NanLossError(f"loss became {loss} at iteration {it}")
            adam_step(scene.params, bundle.params, adam, lr_vector(cfg, extent, it, scene.row_width), cfg)
            scene.normalize_rotations()
            grad_sum += bundle.screen_grad_sum
            grad_count += bundle.screen_grad_count

            entry = {
                "iter": it,
                "loss": float(loss),
                "psnr": float(psnr(renders[0], batch[0].image)),
                "n_primitives": scene.n,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            metrics.append(entry)
            if metrics_file is not None:
                metrics_file.write(json.dumps(entry) + "\n")
            if on_step is not None:
                on_step(entry)

            due = (
                cfg.densify.interval > 0
                and it % cfg.densify.interval == 0
                and it <= densify_until
            )
            if due:
                round_index += 1
                n_sample = min(cfg.densify.views_per_round, len(views))
                picks = rng.choice(len(views), size=n_sample, replace=False)
                sample = [views[int(p)] for p in np.sort(picks)]
                scene, (adam.m, adam.v), event = densify_round(
                    scene,
                    (adam.m, adam.v),
                    sample,
                    cfg.densify,
                    extent,
                    rng,
                    grad_stats=(grad_sum, grad_count),
                    round_index=round_index,
                    background=cfg.background,
                    threads=cfg.threads,
                )
                grad_sum = np.zeros(scene.n)
                grad_count = np.zeros(scene.n)
                record = {"iteration": it, **event.to_dict()}
                events.append(record)
                if events_file is not None:
                    events_file.write(json.dumps(record) + "\n")

            if (
                out_path is not None
                and cfg.checkpoint_every > 0
                and it % cfg.checkpoint_every == 0
                and it < cfg.iterations
            ):
                save_checkpoint(
                    scene, out_path / f"checkpoint_{it:06d}.ply", iteration=it, config=config_echo
                )
        if out_path is not None:
            save_checkpoint(
                scene,
                out_path / "checkpoint_final.ply",
                iteration=cfg.iterations,
                config=config_echo,
            )
    finally:
        if metrics_file is not None:
            metrics_file.close()
        if events_file is not None:
            events_file.close()

    return TrainResult(scene=scene, metrics=metrics, events=events, extent=extent)


def _dump_diagnostics(out_path, iteration: int, scene: Scene, loss) -> None:
    if out_path is None:
        return
    info = {
        "iteration": iteration,
        "loss": repr(loss),
        "n_primitives": scene.n,
        "non_finite_rows": np.nonzero(~np.isfinite(scene.params).all(axis=1))[0].tolist(),
        "opacity_range": [float(scene.opacity().min()), float(scene.opacity().max())],
        "scale_range": [float(scene.scale().min()), float(scene.scale().max())],
    }
    (Path(out_path) / "diagnostics.json").write_text(json.dumps(info, indent=2) + "\n")
