"""Forward rendering: depth sorting, tile binning, alpha compositing.

The renderer runs in two phases:

* Phase A computes, independently per primitive, a dense screen-space slab:
  the bounding rectangle of the projected 3-sigma rim plus per-pixel splat
  coordinates, kernel values and head colors inside it. Nothing in phase A
  depends on tiling or thread count.
* Phase B walks primitives front to back and composites those slabs into
  the image. It can run as one sweep over the whole image or tile by tile
  on a thread pool; both consume the same phase A arrays with the same
  per-pixel operation sequence, so the two schedules produce bit-identical
  images. Parallel results are merged in fixed index order.

Bounding rectangles are exact: the 3-sigma rim is a conic in screen space
and its axis-aligned extremes come from the dual conic. When a splat.Rim
crosses the camera plane the conic is not an ellipse and the slab falls
back to the whole image; per-pixel masks keep the result correct.

Early termination: a pixel stops accepting contributions once its
transmittance drops to EARLY_STOP or below. Because each blend weight
equals the transmittance lost at that pixel, sum(weights) + final
transmittance telescopes to exactly 1 regardless of where termination cuts
in.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySceneError
from .geometry import (
    KERNEL_CUTOFF,
    NEAR_CLIP,
    PARALLEL_EPS,
    Camera,
    cross3,
    quaternion_to_matrix,
    ray_grid,
)
from .primitives import Scene, sigmoid_scalar, siren_eval_batch, sh_eval_batch

EARLY_STOP = 1e-4          # transmittance at or below this terminates a pixel
CONTRIB_THRESHOLD = 1e-5   # blend weights above this are recorded
DEFAULT_TILE = 16


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    tile_size: int = DEFAULT_TILE
    record_contributions: bool = False
    early_stop: float = EARLY_STOP
    contrib_threshold: float = CONTRIB_THRESHOLD


@dataclass
class PrimSlab:
    """Screen-space footprint of one primitive from phase A."""

    rect: tuple          # (y0, y1, x0, x1), half-open
    valid: np.ndarray    # (h, w) bool, kernel support and clip tests
    gauss: np.ndarray    # (h, w) kernel values, zero where invalid
    color: np.ndarray    # (h, w, 3) head colors, zero where invalid
    alpha: float
    view_dir: np.ndarray  # (3,) unit direction from camera to center
    # Everything below is compressed to the valid pixels in row-major
    # order, which is what the backward pass consumes; it never has to
    # re-derive or re-gather per-pixel quantities from the rect arrays.
    uv_c: np.ndarray     # (M, 2) splat coordinates
    gauss_c: np.ndarray  # (M,)
    color_c: np.ndarray  # (M, 3)
    dn_c: np.ndarray     # (M,) Cramer denominator d . (s_u x s_v)
    d_c: np.ndarray      # (M, 3) ray directions
    pre: np.ndarray | None = None   # (M, hidden) siren pre-activations
    hid: np.ndarray | None = None   # (M, hidden) siren activations


@dataclass
class ContributionSet:
    """Per-primitive records of which pixels a primitive influenced and by
    how much. Indices are flat row-major pixel ids, sorted ascending."""

    shape: tuple
    pixel_idx: list
    weights: list

    def weight_sum_image(self) -> np.ndarray:
        acc = np.zeros(self.shape[0] * self.shape[1])
        for idx, w in zip(self.pixel_idx, self.weights):
            np.add.at(acc, idx, w)
        return acc.reshape(self.shape)

    def total_weight(self, i: int) -> float:
        return float(np.sum(self.weights[i]))


@dataclass
class RenderResult:
    rgb: np.ndarray            # (H, W, 3)
    alpha: np.ndarray          # (H, W) accumulated opacity, 1 - final T
    transmittance: np.ndarray  # (H, W) final T
    order: np.ndarray          # depth-sorted primitive ids
    contributions: ContributionSet | None = None


@dataclass
class TileGrid:
    tile_size: int
    nx: int
    ny: int
    bins: list  # ny*nx arrays of primitive ids in depth order

    def tile_rect(self, ty: int, tx: int, height: int, width: int) -> tuple:
        y0 = ty * self.tile_size
        x0 = tx * self.tile_size
        return y0, min(y0 + self.tile_size, height), x0, min(x0 + self.tile_size, width)


def sort_by_depth(scene: Scene, camera: Camera) -> np.ndarray:
    """Front-to-back order of primitive ids: ascending distance of centers
    along the camera forward axis, ties broken by id."""
    f = camera.forward()
    depth = (scene.mu - camera.position) @ f
    return np.argsort(depth, kind="stable")


def _projection_rows(camera: Camera) -> np.ndarray:
    """Homogeneous pinhole rows mapping camera space to (px*w, py*w, w)
    with w the depth along the forward axis."""
    return np.array(
        [
            [camera.fx, 0.0, -camera.cx],
            [0.0, -camera.fy, -camera.cy],
            [0.0, 0.0, -1.0],
        ]
    )


def screen_bboxes(scene: Scene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Conservative integer pixel rectangles covering each projected
    3-sigma rim. Returns (rects (N, 4) as y0, y1, x0, x1 half-open, and a
    visibility mask). Invisible primitives get empty rects."""
    n = scene.n
    rects = np.zeros((n, 4), dtype=np.int64)
    visible = np.zeros(n, dtype=bool)
    r_cam = camera.rotation_matrix()
    proj = _projection_rows(camera)
    scales = scene.scale()
    q_inv = np.array([1.0, 1.0, -1.0 / (KERNEL_CUTOFF * KERNEL_CUTOFF)])
    height, width = camera.height, camera.width
    for i in range(n):
        rot = quaternion_to_matrix(scene.rot[i])
        a = np.empty((3, 3))
        a[:, 0] = r_cam.T @ (scales[i, 0] * rot[:, 0])
        a[:, 1] = r_cam.T @ (scales[i, 1] * rot[:, 1])
        a[:, 2] = r_cam.T @ (scene.mu[i] - camera.position)
        m = proj @ a
        dep_c = m[2, 2]
        dep_r = np.hypot(m[2, 0], m[2, 1])
        if dep_c + dep_r <= 0.0:
            continue  # entire footprint behind the camera plane
        if dep_c - dep_r <= PARALLEL_EPS:
            # Rim crosses the camera plane: projection is unbounded.
            rects[i] = (0, height, 0, width)
            visible[i] = True
            continue
        dual = (m * q_inv[None, :]) @ m.T
        bounds = _conic_extremes(dual, height, width)
        if bounds is None:
            rects[i] = (0, height, 0, width)
            visible[i] = True
            continue
        y0, y1, x0, x1 = bounds
        if y0 < y1 and x0 < x1:
            rects[i] = (y0, y1, x0, x1)
            visible[i] = True
    return rects, visible


def _conic_extremes(dual: np.ndarray, height: int, width: int):
    d22 = dual[2, 2]
    if abs(d22) < 1e-300:
        return None
    disc_x = dual[0, 2] ** 2 - dual[0, 0] * d22
    disc_y = dual[1, 2] ** 2 - dual[1, 1] * d22
    if disc_x < 0.0 or disc_y < 0.0:
        return None
    sx = np.sqrt(disc_x)
    sy = np.sqrt(disc_y)
    xlo = (dual[0, 2] - sx) / d22
    xhi = (dual[0, 2] + sx) / d22
    ylo = (dual[1, 2] - sy) / d22
    yhi = (dual[1, 2] + sy) / d22
    if xlo > xhi:
        xlo, xhi = xhi, xlo
    if ylo > yhi:
        ylo, yhi = yhi, ylo
    # Pixel i has center i + 0.5; pad one pixel for float safety.
    x0 = max(int(np.floor(xlo - 0.5)) - 1, 0)
    x1 = min(int(np.ceil(xhi - 0.5)) + 2, width)
    y0 = max(int(np.floor(ylo - 0.5)) - 1, 0)
    y1 = min(int(np.ceil(yhi - 0.5)) + 2, height)
    return y0, y1, x0, x1


def bin_tiles(scene: Scene, camera: Camera, tile_size: int = DEFAULT_TILE) -> TileGrid:
    """Assign each visible primitive to the tiles its bounding rectangle
    overlaps. Bin contents are kept in front-to-back order."""
    order = sort_by_depth(scene, camera)
    rects, visible = screen_bboxes(scene, camera)
    nx = (camera.width + tile_size - 1) // tile_size
    ny = (camera.height + tile_size - 1) // tile_size
    bins = [[] for _ in range(ny * nx)]
    for k in order:
        if not visible[k]:
            continue
        y0, y1, x0, x1 = rects[k]
        ty0, ty1 = y0 // tile_size, (y1 - 1) // tile_size
        tx0, tx1 = x0 // tile_size, (x1 - 1) // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                bins[ty * nx + tx].append(int(k))
    return TileGrid(
        tile_size=tile_size,
        nx=nx,
        ny=ny,
        bins=[np.array(b, dtype=np.int64) for b in bins],
    )


def _slab_for_primitive(scene, camera, i, rect, dirs_grid, early_cutoff2):
    y0, y1, x0, x1 = rect
    rot = quaternion_to_matrix(scene.rot[i])
    scale = np.exp(scene.log_scale[i])
    s_u = scale[0] * rot[:, 0]
    s_v = scale[1] * rot[:, 1]
    mu = scene.mu[i]
    origin = camera.position
    e = origin - mu
    cvec = cross3(s_u, s_v)
    normal = rot[:, 2]
    a_u = cross3(e, s_v)
    a_v = cross3(s_u, e)
    num_t = -float(np.dot(cvec, e))

    d = dirs_grid[y0:y1, x0:x1]
    dn = d @ cvec
    d_nrm = d @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dn
        u = (d @ a_u) * inv
        v = (d @ a_v) * inv
        t = num_t * inv
    ok = np.abs(d_nrm) >= PARALLEL_EPS
    ok &= dn != 0.0
    r2 = u * u + v * v
    valid = ok & (t > NEAR_CLIP) & (r2 <= early_cutoff2)
    m = valid.ravel()
    uv = np.stack([u.ravel()[m], v.ravel()[m]], axis=1)
    gauss_c = np.exp(-0.5 * (uv[:, 0] ** 2 + uv[:, 1] ** 2))
    gauss = np.zeros(u.shape)
    gauss.ravel()[m] = gauss_c

    view_dir = mu - origin
    nrm = np.linalg.norm(view_dir)
    view_dir = view_dir / nrm if nrm > 0 else np.array([0.0, 0.0, -1.0])

    color = np.zeros(u.shape + (3,))
    pre = hid = None
    col = np.zeros((uv.shape[0], 3))
    if uv.shape[0]:
        spec = scene.head_spec
        head = scene.head_params[i]
        if spec.kind == "siren":
            hdim, din = spec.hidden, spec.d_in
            i0 = hdim * din
            w_in = head[:i0].reshape(hdim, din)
            b_in = head[i0 : i0 + hdim]
            w_out = head[i0 + hdim : i0 + 4 * hdim].reshape(3, hdim)
            b_out = head[i0 + 4 * hdim :]
            col, pre, hid = siren_eval_batch(
                w_in, b_in, w_out, b_out, spec.omega0, uv, direction=view_dir
            )
        else:
            coeffs = head.reshape(3, (spec.degree + 1) ** 2)
            one, _, _ = sh_eval_batch(coeffs, spec.degree, view_dir[None, :])
            col = np.broadcast_to(one, (uv.shape[0], 3))
        color.reshape(-1, 3)[m] = col
    # Saturated opacities are capped so 1 - alpha*G stays representable in
    # the compositing recurrence; the sigmoid derivative is ~0 there anyway.
    alpha = min(sigmoid_scalar(float(scene.raw_opacity[i])), 1.0 - 1e-10)
    return PrimSlab(
        rect=(y0, y1, x0, x1),
        valid=valid,
        gauss=gauss,
        color=color,
        alpha=alpha,
        view_dir=view_dir,
        uv_c=uv,
        gauss_c=gauss_c,
        color_c=col,
        dn_c=dn.ravel()[m],
        d_c=d.reshape(-1, 3)[m],
        pre=pre,
        hid=hid,
    )


def compute_slabs(scene: Scene, camera: Camera, threads: int = 1) -> tuple[list, np.ndarray, np.ndarray]:
    """Phase A for every primitive. Returns (slabs, rects, visible); the
    slab list holds None for invisible primitives. Thread-safe because each
    primitive writes only its own slot."""
    if scene.n == 0:
        raise EmptySceneError("cannot render an empty scene")
    rects, visible = screen_bboxes(scene, camera)
    dirs_grid = ray_grid(camera)
    cutoff2 = KERNEL_CUTOFF * KERNEL_CUTOFF
    slabs: list = [None] * scene.n

    def work(i):
        slabs[i] = _slab_for_primitive(scene, camera, i, tuple(rects[i]), dirs_grid, cutoff2)

    targets = [i for i in range(scene.n) if visible[i]]
    if threads > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, targets))
    else:
        for i in targets:
            work(i)
    return slabs, rects, visible


def _composite_region(region, order, slabs, opts, contrib_out, width):
    """Composite all primitives into one rectangular region of the image.

    region = (y0, y1, x0, x1, T, c) where T and c are writable views. The
    per-pixel operation sequence depends only on depth order and slab
    contents, not on how the image was partitioned.
    """
    ry0, ry1, rx0, rx1, trans, accum = region
    stop = opts.early_stop
    for k in order:
        slab = slabs[k]
        if slab is None:
            continue
        sy0, sy1, sx0, sx1 = slab.rect
        y0, y1 = max(ry0, sy0), min(ry1, sy1)
        x0, x1 = max(rx0, sx0), min(rx1, sx1)
        if y0 >= y1 or x0 >= x1:
            continue
        tview = trans[y0 - ry0 : y1 - ry0, x0 - rx0 : x1 - rx0]
        cview = accum[y0 - ry0 : y1 - ry0, x0 - rx0 : x1 - rx0]
        gv = slab.gauss[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
        colv = slab.color[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
        vmask = slab.valid[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
        live = vmask & (tview > stop)
        if not live.any():
            continue
        w = slab.alpha * gv * tview
        cview[live] += w[live, None] * colv[live]
        if contrib_out is not None:
            keep = live & (w > opts.contrib_threshold)
            if keep.any():
                yy, xx = np.nonzero(keep)
                contrib_out[k].append(((yy + y0) * width + (xx + x0), w[keep]))
        tview[live] *= 1.0 - slab.alpha * gv[live]


def render(scene: Scene, camera: Camera, opts: RenderOptions | None = None) -> RenderResult:
    """Render the scene front to back over a constant background."""
    if opts is None:
        opts = RenderOptions()
    order = sort_by_depth(scene, camera)
    slabs, _, _ = compute_slabs(scene, camera, threads=opts.threads)
    height, width = camera.height, camera.width
    trans = np.ones((height, width))
    accum = np.zeros((height, width, 3))
    contrib_out = [[] for _ in range(scene.n)] if opts.record_contributions else None

    if opts.threads > 1:
        ts = opts.tile_size
        ny = (height + ts - 1) // ts
        nx = (width + ts - 1) // ts

        def tile_work(t):
            ty, tx = divmod(t, nx)
            y0, x0 = ty * ts, tx * ts
            y1, x1 = min(y0 + ts, height), min(x0 + ts, width)
            region = (y0, y1, x0, x1, trans[y0:y1, x0:x1], accum[y0:y1, x0:x1])
            _composite_region(region, order, slabs, opts, contrib_out, width)

        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            list(pool.map(tile_work, range(ny * nx)))
    else:
        region = (0, height, 0, width, trans, accum)
        _composite_region(region, order, slabs, opts, contrib_out, width)

    bg = np.asarray(opts.background, dtype=np.float64)
    rgb = accum + trans[..., None] * bg[None, None, :]

    contribs = None
    if contrib_out is not None:
        idx_list, w_list = [], []
        for frags in contrib_out:
            if frags:
                idx = np.concatenate([f[0] for f in frags])
                wts = np.concatenate([f[1] for f in frags])
                srt = np.argsort(idx, kind="stable")  # canonical order, schedule-free
                idx_list.append(idx[srt])
                w_list.append(wts[srt])
            else:
                idx_list.append(np.empty(0, dtype=np.int64))
                w_list.append(np.empty(0))
        contribs = ContributionSet(shape=(height, width), pixel_idx=idx_list, weights=w_list)

    return RenderResult(
        rgb=rgb,
        alpha=1.0 - trans,
        transmittance=trans,
        order=order,
        contributions=contribs,
    )
