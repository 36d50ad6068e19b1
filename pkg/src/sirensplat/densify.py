"""Adaptive control of the primitive count.

Every `interval` iterations the trainer scores primitives on a sample of
views, turns high scorers into two primitives (clone or split), prunes
washed-out or bloated ones, and occasionally walks opacities toward a low
target so pruning can pick the survivors.

Three scoring strategies share the selection/clone/split machinery:

* ``frequency``: per-band spectral error maps projected onto primitives
  through their recorded blend weights; a primitive's score is its worst
  band on its worst view.
* ``error``: same projection of a plain photometric error map (ablation
  for the band decomposition).
* ``gradient``: mean screen-space positional gradient norm accumulated by
  the backward pass since the previous round (the classic splatting
  heuristic; thresholded differently because its scale differs).

Scores are compared against a threshold and the survivors of the threshold
are admitted best-first until the primitive cap would be hit. Each admitted
primitive is replaced by two: exact copies if it is small relative to the
scene (clone), spread-out children at reduced scale otherwise (split). Both
children inherit the parent's head weights bit for bit and get the opacity
correction alpha' = 1 - sqrt(1 - alpha), which makes two stacked copies
blend to exactly the parent's appearance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .geometry import quaternion_to_matrix
from .primitives import COL_LOG_SCALE, COL_RAW_OPACITY, Scene, inverse_sigmoid, sigmoid
from .renderer import ContributionSet, RenderOptions, render
from .spectral import FreqErrorConfig, box_avg, freq_error_maps, to_single_channel

STRATEGIES = ("frequency", "error", "gradient")


@dataclass
class DensifyConfig:
    interval: int = 100              # iterations between rounds
    views_per_round: int = 20        # views sampled for scoring
    threshold: float = 0.01          # score cut for frequency/error strategies
    grad_threshold: float = 2e-4     # score cut for the gradient strategy
    max_primitives: int = 100_000
    until_fraction: float = 0.95     # stop densifying after this share of training
    strategy: str = "frequency"
    clone_pct: float = 0.01          # of scene extent: smaller clones, larger splits
    split_factor: float = 1.6        # children scale divisor
    prune_opacity: float = 0.05
    prune_scale: float = 0.5         # of scene extent
    reset_every: int = 30            # rounds between opacity reset bursts
    reset_rounds: int = 3            # consecutive rounds per burst
    reset_target: float = 0.05
    reset_rate: float = 0.9
    freq: FreqErrorConfig = field(default_factory=FreqErrorConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ShapeMismatchError(
                f"unknown densify strategy {self.strategy!r}, pick one of {STRATEGIES}"
            )


@dataclass
class RoundEvent:
    """What one densification round did, for the event log."""

    strategy: str
    scored_views: int
    candidates: int
    clones: int
    splits: int
    pruned: int
    opacity_reset: bool
    count_after: int
    chosen_mu: list  # world centers of admitted candidates, for diagnostics

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "scored_views": self.scored_views,
            "candidates": self.candidates,
            "clones": self.clones,
            "splits": self.splits,
            "pruned": self.pruned,
            "opacity_reset": self.opacity_reset,
            "count_after": self.count_after,
            "chosen_mu": self.chosen_mu,
        }


def project_error(error_map: np.ndarray, contribs: ContributionSet) -> np.ndarray:
    """Blend-weighted sum of a per-pixel error field for every primitive:
    E_k = sum_p err(p) * w_k(p) over the pixels the primitive touched."""
    if error_map.shape != contribs.shape:
        raise ShapeMismatchError(
            f"error map {error_map.shape} does not match render {contribs.shape}"
        )
    flat = error_map.ravel()
    scores = np.zeros(len(contribs.pixel_idx))
    for k, (idx, w) in enumerate(zip(contribs.pixel_idx, contribs.weights)):
        if idx.size:
            scores[k] = float(np.sum(flat[idx] * w))
    return scores


def photometric_error_map(rendered: np.ndarray, gt: np.ndarray, cfg: FreqErrorConfig) -> np.ndarray:
    """Box-averaged absolute luminance error (band-free ablation map)."""
    r = to_single_channel(rendered, cfg.channel_mode)
    g = to_single_channel(gt, cfg.channel_mode)
    return box_avg(np.abs(g - r), cfg.avg_kernel)


def score_round(scene: Scene, views_sample, cfg: DensifyConfig, *, background=(0.0, 0.0, 0.0), threads: int = 1) -> np.ndarray:
    """Worst-case projected error per primitive over the sampled views.

    For the frequency strategy each view contributes its worst band.
    """
    opts = RenderOptions(background=tuple(background), threads=threads, record_contributions=True)
    scores = np.zeros(scene.n)
    for view in views_sample:
        out = render(scene, view.camera, opts)
        if cfg.strategy == "frequency":
            maps = freq_error_maps(out.rgb, view.image, cfg.freq)
            view_scores = np.zeros(scene.n)
            for band_map in maps:
                view_scores = np.maximum(view_scores, project_error(band_map, out.contributions))
        else:
            err = photometric_error_map(out.rgb, view.image, cfg.freq)
            view_scores = project_error(err, out.contributions)
        scores = np.maximum(scores, view_scores)
    return scores


def gradient_scores(grad_sum: np.ndarray, grad_count: np.ndarray) -> np.ndarray:
    """Mean screen-space gradient norm since the last round."""
    return grad_sum / np.maximum(grad_count, 1.0)


def select_candidates(scores: np.ndarray, threshold: float, current_count: int, max_primitives: int) -> np.ndarray:
    """Ids whose score clears the threshold, best first, capped so the
    round cannot push the scene past max_primitives (each admitted id adds
    exactly one net primitive). Ties break toward lower id."""
    above = np.nonzero(scores > threshold)[0]
    if above.size == 0:
        return above
    order = above[np.argsort(-scores[above], kind="stable")]
    budget = max(max_primitives - current_count, 0)
    return order[:budget]


def corrected_raw_opacity(raw: float) -> float:
    """Post-duplication opacity: alpha' = 1 - sqrt(1 - alpha), in raw
    (pre-sigmoid) form. Two primitives at alpha' compose to alpha."""
    alpha = float(sigmoid(raw))
    alpha_c = 1.0 - np.sqrt(max(1.0 - alpha, 1e-15))
    return float(inverse_sigmoid(np.clip(alpha_c, 1e-12, 1.0 - 1e-12)))


def clone_or_split(row: np.ndarray, extent: float, cfg: DensifyConfig, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Two replacement rows for one admitted primitive.

    Returns (rows (2, P), was_clone). Small primitives are cloned in place;
    large ones are split into children sampled from the parent's own
    footprint at scale / split_factor. Head weights are copied verbatim.
    """
    row = np.asarray(row, dtype=np.float64)
    scale = np.exp(row[COL_LOG_SCALE])
    raw_corr = corrected_raw_opacity(row[COL_RAW_OPACITY])
    children = np.stack([row.copy(), row.copy()])
    children[:, COL_RAW_OPACITY] = raw_corr
    if float(scale.max()) < cfg.clone_pct * extent:
        return children, True
    rot = quaternion_to_matrix(row[3:7])
    for c in range(2):
        ab = rng.standard_normal(2)
        children[c, 0:3] += ab[0] * scale[0] * rot[:, 0] + ab[1] * scale[1] * rot[:, 1]
        children[c, COL_LOG_SCALE] = np.log(scale / cfg.split_factor)
    return children, False


def prune_mask(scene: Scene, cfg: DensifyConfig, extent: float) -> np.ndarray:
    """Keep mask: drop primitives that are nearly transparent or have grown
    past a fraction of the scene extent."""
    alpha = scene.opacity()
    max_scale = scene.scale().max(axis=1)
    return (alpha >= cfg.prune_opacity) & (max_scale <= cfg.prune_scale * extent)


def should_reset_opacity(round_index: int, cfg: DensifyConfig) -> bool:
    """True on `reset_rounds` consecutive rounds every `reset_every`
    rounds, starting at round `reset_every` (1-based round numbering)."""
    if round_index < cfg.reset_every:
        return False
    return round_index % cfg.reset_every < cfg.reset_rounds


def apply_opacity_reset(scene: Scene, cfg: DensifyConfig) -> None:
    """One step of the gradual reset: alpha <- min(alpha, rate * alpha +
    (1 - rate) * target), in place. Repeated rounds walk every opacity
    toward the target without the shock of a hard reset."""
    alpha = scene.opacity()
    walked = cfg.reset_rate * alpha + (1.0 - cfg.reset_rate) * cfg.reset_target
    new_alpha = np.minimum(alpha, walked)
    scene.params[:, COL_RAW_OPACITY] = inverse_sigmoid(np.clip(new_alpha, 1e-12, 1.0 - 1e-12))


def densify_round(
    scene: Scene,
    adam_moments: tuple[np.ndarray, np.ndarray],
    views_sample,
    cfg: DensifyConfig,
    extent: float,
    rng: np.random.Generator,
    *,
    grad_stats: tuple[np.ndarray, np.ndarray] | None = None,
    round_index: int = 1,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
):
    """One full round: score, select, clone/split, prune, maybe reset.

    Returns (scene, (m, v), event). Adam moment rows follow the primitives:
    survivors keep theirs, children start from zero.
    """
    views_sample = list(views_sample)
    if cfg.strategy == "gradient":
        if grad_stats is None:
            raise ShapeMismatchError("gradient strategy needs accumulated gradient stats")
        scores = gradient_scores(*grad_stats)
        threshold = cfg.grad_threshold
    else:
        scores = score_round(scene, views_sample, cfg, background=background, threads=threads)
        threshold = cfg.threshold

    chosen = select_candidates(scores, threshold, scene.n, cfg.max_primitives)
    chosen_sorted = np.sort(chosen)
    chosen_mu = scene.mu[chosen_sorted].tolist()
    m, v = adam_moments
    clones = splits = 0

    if chosen_sorted.size:
        is_chosen = np.zeros(scene.n, dtype=bool)
        is_chosen[chosen_sorted] = True
        new_rows = []
        for k in chosen_sorted:
            rows, was_clone = clone_or_split(scene.params[k], extent, cfg, rng)
            new_rows.append(rows)
            if was_clone:
                clones += 1
            else:
                splits += 1
        keep = ~is_chosen
        params = np.concatenate([scene.params[keep]] + new_rows, axis=0)
        scene = Scene(params, scene.head_spec)
        zeros = np.zeros((2 * chosen_sorted.size, m.shape[1]))
        m = np.concatenate([m[keep], zeros], axis=0)
        v = np.concatenate([v[keep], zeros], axis=0)

    keep = prune_mask(scene, cfg, extent)
    pruned = int(scene.n - keep.sum())
    if pruned and keep.any():
        scene = scene.kept(keep)
        m = m[keep]
        v = v[keep]
    elif not keep.any():
        pruned = 0  # refusing to empty the scene; keep everything

    do_reset = should_reset_opacity(round_index, cfg)
    if do_reset:
        apply_opacity_reset(scene, cfg)

    event = RoundEvent(
        strategy=cfg.strategy,
        scored_views=len(views_sample),
        candidates=int(chosen.size),
        clones=clones,
        splits=splits,
        pruned=pruned,
        opacity_reset=do_reset,
        count_after=scene.n,
        chosen_mu=chosen_mu,
    )
    return scene, (m, v), event
