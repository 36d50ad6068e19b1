"""Analytic gradients of the photometric loss with respect to every
primitive parameter.

The backward pass mirrors the renderer's two-phase structure:

1. A forward replay composites the slabs exactly like the renderer while
   recording, per primitive, the transmittance each pixel had when the
   primitive blended (`t_before`) and which pixels actually blended
   (`live`).
2. A reverse sweep over primitives maintains the suffix color
   S(p) = sum of contributions behind the current primitive plus the
   background term, giving the blend-weight gradient in closed form:

       dc/da_k = color_k * T_k - S_k / (1 - a_k),   a_k = alpha_k * G_k

3. A per-primitive reduction turns per-pixel kernel and color gradients
   into parameter gradients through the Gaussian kernel, the Cramer
   intersection, the quaternion-scaled tangent frame, the sigmoid opacity
   and the color head.

Indicator factors (kernel cutoff, near clip, early termination) are
treated as constants, which is exact away from their thresholds; the
finite-difference oracle in the tests samples scenes with margins so no
parameter sits on a threshold.

Every reduction runs over operands fully determined by the scene row and
the camera, never by tile layout or thread schedule, so gradients are
bit-identical at any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, cross3, quaternion_to_matrix
from .losses import LossConfig, combined_loss, combined_loss_grad
from .primitives import (
    COL_LOG_SCALE,
    COL_MU,
    COL_RAW_OPACITY,
    COL_ROT,
    HEAD_OFFSET,
    Scene,
    sh_basis,
    sh_basis_grad,
    sigmoid_scalar,
)
from .renderer import RenderOptions, compute_slabs, render, sort_by_depth

# Test hook: scales the blend-weight gradient. Anything but 1.0 breaks the
# gradient check on purpose (negative control for the oracle).
_DEBUG_BLEND_GRAD_SCALE = 1.0


@dataclass
class GradientBundle:
    """Parameter gradients in scene-row layout plus the screen-space
    positional gradient statistic used by the gradient densifier."""

    params: np.ndarray            # (N, P), d(loss)/d(row)
    screen_grad_sum: np.ndarray   # (N,) summed |d(loss)/d(projected center)|
    screen_grad_count: np.ndarray  # (N,) views in which the primitive blended


@dataclass
class _Trace:
    t_before: np.ndarray  # (h, w) transmittance seen by this primitive
    live: np.ndarray      # (h, w) pixels where it actually blended


def _trace_region(region, order, slabs, traces, stop):
    ry0, ry1, rx0, rx1, trans = region
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
        gv = slab.gauss[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
        vmask = slab.valid[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
        live = vmask & (tview > stop)
        tr = traces[k]
        tr.t_before[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0][live] = tview[live]
        tr.live[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0][live] = True
        if live.any():
            tview[live] *= 1.0 - slab.alpha * gv[live]


def _forward_with_trace(scene, camera, opts):
    """Render while recording per-primitive blending traces."""
    order = sort_by_depth(scene, camera)
    slabs, _, _ = compute_slabs(scene, camera, threads=opts.threads)
    height, width = camera.height, camera.width
    trans = np.ones((height, width))
    traces = []
    for slab in slabs:
        if slab is None:
            traces.append(None)
        else:
            h = slab.rect[1] - slab.rect[0]
            w = slab.rect[3] - slab.rect[2]
            traces.append(_Trace(t_before=np.zeros((h, w)), live=np.zeros((h, w), dtype=bool)))
    stop = opts.early_stop

    if opts.threads > 1:
        ts = opts.tile_size
        ny = (height + ts - 1) // ts
        nx = (width + ts - 1) // ts

        def tile_work(t):
            ty, tx = divmod(t, nx)
            y0, x0 = ty * ts, tx * ts
            y1, x1 = min(y0 + ts, height), min(x0 + ts, width)
            _trace_region((y0, y1, x0, x1, trans[y0:y1, x0:x1]), order, slabs, traces, stop)

        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            list(pool.map(tile_work, range(ny * nx)))
    else:
        _trace_region((0, height, 0, width, trans), order, slabs, traces, stop)

    accum = np.zeros((height, width, 3))
    for k in order:
        slab, tr = slabs[k], traces[k]
        if slab is None or not tr.live.any():
            continue
        y0, y1, x0, x1 = slab.rect
        w = slab.alpha * slab.gauss * tr.t_before
        accum[y0:y1, x0:x1][tr.live] += w[tr.live, None] * slab.color[tr.live]
    bg = np.asarray(opts.background, dtype=np.float64)
    rgb = accum + trans[..., None] * bg[None, None, :]
    return rgb, trans, slabs, traces, order


def _suffix_region(region, order_rev, slabs, traces, dldc, ga_out, gc_out):
    """Reverse sweep over one image region, accumulating blend gradients."""
    ry0, ry1, rx0, rx1, suffix = region
    for k in order_rev:
        slab, tr = slabs[k], traces[k]
        if slab is None:
            continue
        sy0, sy1, sx0, sx1 = slab.rect
        y0, y1 = max(ry0, sy0), min(ry1, sy1)
        x0, x1 = max(rx0, sx0), min(rx1, sx1)
        if y0 >= y1 or x0 >= x1:
            continue
        ls = (slice(y0 - sy0, y1 - sy0), slice(x0 - sx0, x1 - sx0))
        live = tr.live[ls]
        if not live.any():
            continue
        sview = suffix[y0 - ry0 : y1 - ry0, x0 - rx0 : x1 - rx0]
        dview = dldc[y0:y1, x0:x1]
        tb = tr.t_before[ls]
        gv = slab.gauss[ls]
        colv = slab.color[ls]
        a = slab.alpha * gv
        w = a * tb
        # d(loss)/d(color_k) and d(loss)/d(a_k) at live pixels. The channel
        # contraction distributes over the two terms, which keeps the
        # per-channel temporaries out of the loop.
        gc = dview * w[..., None]
        dcol = np.einsum("hwc,hwc->hw", dview, colv)
        dsuf = np.einsum("hwc,hwc->hw", dview, sview)
        ga = dcol * tb - dsuf / (1.0 - a)
        if _DEBUG_BLEND_GRAD_SCALE != 1.0:
            ga = ga * _DEBUG_BLEND_GRAD_SCALE
        gc_out[k][ls][live] = gc[live]
        ga_out[k][ls][live] = ga[live]
        sview[live] += w[live, None] * colv[live]


def _siren_head_arrays(spec, head):
    hdim, din = spec.hidden, spec.d_in
    i0 = hdim * din
    w_in = head[:i0].reshape(hdim, din)
    b_in = head[i0 : i0 + hdim]
    w_out = head[i0 + hdim : i0 + 4 * hdim].reshape(3, hdim)
    b_out = head[i0 + 4 * hdim :]
    return w_in, b_in, w_out, b_out


def _reduce_primitive(scene, camera, k, slab, trace, ga_k, gc_k):
    """Turn per-pixel gradients of one primitive into parameter gradients.
    Returns (row gradient, screen-space positional gradient norm).

    Everything runs on the valid-compressed axis. The blend gradients ga/gc
    are zero wherever the primitive did not actually blend, so dead pixels
    drop out of every reduction without explicit masking."""
    spec = scene.head_spec
    row_grad = np.zeros(scene.row_width)
    if not trace.live.any():
        return row_grad, 0.0
    m = slab.valid.ravel()
    d = slab.d_c
    u = slab.uv_c[:, 0]
    v = slab.uv_c[:, 1]
    gauss = slab.gauss_c
    color = slab.color_c
    dn = slab.dn_c
    ga = ga_k.ravel()[m]
    gc = gc_k.reshape(-1, 3)[m]
    alpha = slab.alpha

    rot = quaternion_to_matrix(scene.rot[k])
    scale = np.exp(scene.log_scale[k])
    s_u = scale[0] * rot[:, 0]
    s_v = scale[1] * rot[:, 1]
    mu = scene.mu[k]
    e = camera.position - mu

    # Opacity chain: a = alpha * G, alpha = sigmoid(raw).
    sig = sigmoid_scalar(float(scene.raw_opacity[k]))
    row_grad[COL_RAW_OPACITY] = float(np.sum(ga * gauss)) * sig * (1.0 - sig)

    # Kernel chain: dG/du = -u G.
    dgauss = ga * alpha
    gu = -dgauss * u * gauss
    gv = -dgauss * v * gauss

    # Head chain.
    gdir = np.zeros(3)
    if spec.kind == "siren":
        w_in, b_in, w_out, b_out = _siren_head_arrays(spec, scene.head_params[k])
        pre = slab.pre
        hid = slab.hid
        om = spec.omega0
        gz = gc * color * (1.0 - color)  # sigmoid output
        g_wout = gz.T @ hid
        g_bout = gz.sum(axis=0)
        gpre = (gz @ w_out) * np.cos(pre)
        y2 = np.empty((u.shape[0], 2))
        y2[:, 0] = u
        y2[:, 1] = v
        g_bin = om * gpre.sum(axis=0)
        gy = om * (gpre @ w_in[:, :2])
        gu = gu + gy[:, 0]
        gv = gv + gy[:, 1]
        g_win = np.empty_like(w_in)
        g_win[:, :2] = om * (gpre.T @ y2)
        if spec.d_in == 5:
            # The direction is constant over the batch, so its weight
            # gradient is an outer product with the summed pre-activation
            # gradient, which is g_bin up to the omega0 factor.
            g_win[:, 2:5] = np.outer(g_bin, slab.view_dir)
            gdir = g_bin @ w_in[:, 2:5]
        hoff = HEAD_OFFSET
        hdim, din = spec.hidden, spec.d_in
        row_grad[hoff : hoff + hdim * din] = g_win.ravel()
        row_grad[hoff + hdim * din : hoff + hdim * din + hdim] = g_bin
        row_grad[hoff + hdim * din + hdim : hoff + hdim * din + 4 * hdim] = g_wout.ravel()
        row_grad[hoff + hdim * din + 4 * hdim :] = g_bout
    else:
        coeffs = scene.head_params[k].reshape(3, (spec.degree + 1) ** 2)
        raw = coeffs @ sh_basis(spec.degree, slab.view_dir) + 0.5
        mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)  # clamp indicator
        graw = gc * mask[None, :]
        graw_sum = graw.sum(axis=0)
        basis = sh_basis(spec.degree, slab.view_dir)
        row_grad[HEAD_OFFSET:] = np.outer(graw_sum, basis).ravel()
        gdir = graw_sum @ (coeffs @ sh_basis_grad(spec.degree, slab.view_dir))

    # Intersection chain (Cramer solution of o + t d = mu + u s_u + v s_v).
    wu = gu / dn
    wv = gv / dn
    p_u = wu @ d
    p_v = wv @ d
    a_mix = (wu * u + wv * v) @ d
    gmu = -cross3(s_v, p_u) - cross3(p_v, s_u)
    gsu = cross3(e, p_v) - cross3(s_v, a_mix)
    gsv = cross3(p_u, e) - cross3(a_mix, s_u)

    # View direction chain: dir = (mu - o) / |mu - o|.
    if np.any(gdir != 0.0):
        rho = np.linalg.norm(mu - camera.position)
        dirv = slab.view_dir
        gmu = gmu + (gdir - dirv * float(np.dot(dirv, gdir))) / rho

    # Scale chain: s_u = exp(ls_u) * col0(q).
    row_grad[COL_LOG_SCALE.start] = float(np.dot(gsu, s_u))
    row_grad[COL_LOG_SCALE.start + 1] = float(np.dot(gsv, s_v))

    # Quaternion chain through the normalized components.
    q = scene.rot[k]
    nq = np.linalg.norm(q)
    qh = q / nq
    w_, x_, y_, z_ = qh
    dcol0 = np.array(
        [
            [0.0, 0.0, -4.0 * y_, -4.0 * z_],
            [2.0 * z_, 2.0 * y_, 2.0 * x_, 2.0 * w_],
            [-2.0 * y_, 2.0 * z_, -2.0 * w_, 2.0 * x_],
        ]
    )
    dcol1 = np.array(
        [
            [-2.0 * z_, 2.0 * y_, 2.0 * x_, -2.0 * w_],
            [0.0, -4.0 * x_, 0.0, -4.0 * z_],
            [2.0 * x_, 2.0 * w_, 2.0 * z_, 2.0 * y_],
        ]
    )
    gqh = scale[0] * (dcol0.T @ gsu) + scale[1] * (dcol1.T @ gsv)
    gq = (gqh - qh * float(np.dot(qh, gqh))) / nq
    row_grad[COL_MU] = gmu
    row_grad[COL_ROT] = gq

    # Screen-space positional gradient norm (densification statistic).
    screen_norm = _screen_grad_norm(camera, mu, gmu)
    return row_grad, screen_norm


def _screen_grad_norm(camera: Camera, mu: np.ndarray, gmu: np.ndarray) -> float:
    """Norm of the loss gradient mapped to pixel coordinates of the
    projected center (least-squares pullback through the projection
    Jacobian)."""
    rt = camera.rotation_matrix().T
    p_cam = rt @ (mu - camera.position)
    depth = -p_cam[2]
    if depth <= 1e-9:
        return 0.0
    jx = camera.fx * (rt[0] * depth + p_cam[0] * rt[2]) / (depth * depth)
    jy = -camera.fy * (rt[1] * depth + p_cam[1] * rt[2]) / (depth * depth)
    jj = np.array([[jx @ jx, jx @ jy], [jx @ jy, jy @ jy]])
    jg = np.array([jx @ gmu, jy @ gmu])
    det = jj[0, 0] * jj[1, 1] - jj[0, 1] * jj[1, 0]
    if abs(det) < 1e-30:
        return 0.0
    gx = (jj[1, 1] * jg[0] - jj[0, 1] * jg[1]) / det
    gy = (-jj[1, 0] * jg[0] + jj[0, 0] * jg[1]) / det
    return float(np.hypot(gx, gy))


def backward_view(scene: Scene, camera: Camera, gt: np.ndarray, loss_cfg: LossConfig, opts: RenderOptions):
    """Loss, gradients and the rendered image for a single view."""
    rgb, trans, slabs, traces, order = _forward_with_trace(scene, camera, opts)
    loss, dldc = combined_loss_grad(rgb, gt, loss_cfg)

    height, width = camera.height, camera.width
    ga_out = [None] * scene.n
    gc_out = [None] * scene.n
    for k, slab in enumerate(slabs):
        if slab is not None:
            h = slab.rect[1] - slab.rect[0]
            w = slab.rect[3] - slab.rect[2]
            ga_out[k] = np.zeros((h, w))
            gc_out[k] = np.zeros((h, w, 3))

    bg = np.asarray(opts.background, dtype=np.float64)
    suffix = trans[..., None] * bg[None, None, :]
    order_rev = order[::-1]

    if opts.threads > 1:
        ts = opts.tile_size
        ny = (height + ts - 1) // ts
        nx = (width + ts - 1) // ts

        def tile_work(t):
            ty, tx = divmod(t, nx)
            y0, x0 = ty * ts, tx * ts
            y1, x1 = min(y0 + ts, height), min(x0 + ts, width)
            _suffix_region(
                (y0, y1, x0, x1, suffix[y0:y1, x0:x1]), order_rev, slabs, traces, dldc, ga_out, gc_out
            )

        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            list(pool.map(tile_work, range(ny * nx)))
    else:
        _suffix_region((0, height, 0, width, suffix), order_rev, slabs, traces, dldc, ga_out, gc_out)

    grads = np.zeros_like(scene.params)
    norms = np.zeros(scene.n)
    counts = np.zeros(scene.n)

    def prim_work(k):
        slab, tr = slabs[k], traces[k]
        if slab is None or not tr.live.any():
            return
        row, sn = _reduce_primitive(scene, camera, k, slab, tr, ga_out[k], gc_out[k])
        grads[k] = row
        norms[k] = sn
        counts[k] = 1.0

    if opts.threads > 1 and scene.n > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            list(pool.map(prim_work, range(scene.n)))
    else:
        for k in range(scene.n):
            prim_work(k)

    return loss, grads, norms, counts, rgb


def backward(scene: Scene, views, loss_cfg: LossConfig | None = None, *, background=(0.0, 0.0, 0.0), threads: int = 1):
    """Mean loss over the views and its gradient bundle."""
    loss, bundle, _ = backward_with_renders(
        scene, views, loss_cfg, background=background, threads=threads
    )
    return loss, bundle


def backward_with_renders(scene: Scene, views, loss_cfg: LossConfig | None = None, *, background=(0.0, 0.0, 0.0), threads: int = 1):
    loss_cfg = loss_cfg or LossConfig()
    views = list(views)
    if not views:
        raise ValueError("backward needs at least one view")
    opts = RenderOptions(background=tuple(background), threads=threads)
    total_loss = 0.0
    total_grads = np.zeros_like(scene.params)
    norm_sum = np.zeros(scene.n)
    norm_count = np.zeros(scene.n)
    renders = []
    for view in views:
        loss, grads, norms, counts, rgb = backward_view(scene, view.camera, view.image, loss_cfg, opts)
        total_loss += loss
        total_grads += grads
        norm_sum += norms
        norm_count += counts
        renders.append(rgb)
    n = float(len(views))
    bundle = GradientBundle(
        params=total_grads / n,
        screen_grad_sum=norm_sum,
        screen_grad_count=norm_count,
    )
    return total_loss / n, bundle, renders


def finite_diff_gradients(scene: Scene, loss_fn, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of an arbitrary scalar function of the
    scene, parameter by parameter. The independent oracle for backward()."""
    base = scene.params
    grads = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            plus = base.copy()
            plus[i, j] += h
            minus = base.copy()
            minus[i, j] -= h
            f_plus = loss_fn(Scene(plus, scene.head_spec))
            f_minus = loss_fn(Scene(minus, scene.head_spec))
            grads[i, j] = (f_plus - f_minus) / (2.0 * h)
    return grads


def loss_for_views(views, loss_cfg: LossConfig | None = None, *, background=(0.0, 0.0, 0.0)):
    """Closure factory matching backward()'s loss definition, so the
    finite-difference oracle differentiates exactly the same scalar."""
    loss_cfg = loss_cfg or LossConfig()
    views = list(views)
    opts = RenderOptions(background=tuple(background))

    def fn(scene: Scene) -> float:
        total = 0.0
        for view in views:
            out = render(scene, view.camera, opts)
            total += combined_loss(out.rgb, view.image, loss_cfg)
        return total / len(views)

    return fn


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, floor: float = 1e-8):
    """Elementwise gradient comparison. Entries where both gradients are
    below the floor are ignored; elsewhere the relative error must stay
    under rtol. Returns (ok, worst relative error, offending index)."""
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    consider = mag > floor
    denom = np.where(consider, mag, 1.0)
    rel = np.where(consider, np.abs(analytic - numeric) / denom, 0.0)
    worst = float(rel.max()) if rel.size else 0.0
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
    return worst <= rtol, worst, idx
