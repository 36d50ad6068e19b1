"""Splat primitives: parameter layout, color heads, and the scene container.

A primitive owns 10 geometry/opacity parameters plus one color head:

    [mu(3), rot(4, wxyz), log_scale(2), raw_opacity(1), head...]

The scene keeps every primitive as one row of a dense (N, P) float64 matrix
in exactly this order, which is also the flatten/checkpoint order. Two head
families exist:

* ``siren``: a single sinusoidal hidden layer. Input y is (u, v) optionally
  followed by the unit view direction; pre-activation is scaled by omega0,
  and the output layer is squashed with a sigmoid.
* ``sh``: real spherical harmonics up to degree 3 with the usual 0.5 offset,
  clamped to the displayable range.

Every batched contraction here runs over operands that are fully
determined by the scene row and the camera, never by tile layout or
thread schedule, so results are reproducible bit for bit at any thread
setting no matter which kernel (BLAS included) executes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatchError,
    EmptySceneError,
    LengthMismatchError,
    ShapeMismatchError,
)

# Column layout of one scene row.
COL_MU = slice(0, 3)
COL_ROT = slice(3, 7)
COL_LOG_SCALE = slice(7, 9)
COL_RAW_OPACITY = 9
HEAD_OFFSET = 10

DEFAULT_OMEGA0 = 30.0

# Real SH constants (with Condon-Shortley phase), degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    # expit is the stable two-branch form in compiled code
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid_scalar(x: float) -> float:
    """Same two-branch sigmoid on a plain float. The array machinery in
    expit costs far more than the arithmetic at size one, and the render
    and backward paths hit this once per primitive."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


@dataclass(frozen=True)
class HeadSpec:
    """Static description of a color head; fixed for a whole scene."""

    kind: str                 # 'siren' or 'sh'
    d_in: int = 0             # siren only: 2 (u, v) or 5 (u, v, view dir)
    hidden: int = 0           # siren only
    omega0: float = DEFAULT_OMEGA0
    degree: int = 0           # sh only

    @staticmethod
    def siren(d_in: int = 5, hidden: int = 6, omega0: float = DEFAULT_OMEGA0) -> "HeadSpec":
        if d_in not in (2, 5):
            raise DimensionMismatchError(f"siren head input width must be 2 or 5, got {d_in}")
        if hidden < 1:
            raise DimensionMismatchError("siren head needs at least one hidden unit")
        return HeadSpec(kind="siren", d_in=d_in, hidden=hidden, omega0=omega0)

    @staticmethod
    def sh(degree: int = 3) -> "HeadSpec":
        if not 0 <= degree <= 3:
            raise DimensionMismatchError(f"sh degree must be in 0..3, got {degree}")
        return HeadSpec(kind="sh", degree=degree)

    @property
    def param_count(self) -> int:
        if self.kind == "siren":
            return self.hidden * self.d_in + self.hidden + 3 * self.hidden + 3
        return 3 * (self.degree + 1) ** 2

    @property
    def uses_view_dir(self) -> bool:
        return self.kind == "sh" or self.d_in == 5

    def to_dict(self) -> dict:
        if self.kind == "siren":
            return {
                "kind": "siren",
                "d_in": self.d_in,
                "hidden": self.hidden,
                "omega0": self.omega0,
            }
        return {"kind": "sh", "degree": self.degree}

    @staticmethod
    def from_dict(d: dict) -> "HeadSpec":
        if d.get("kind") == "siren":
            return HeadSpec.siren(
                d_in=int(d["d_in"]), hidden=int(d["hidden"]), omega0=float(d.get("omega0", DEFAULT_OMEGA0))
            )
        if d.get("kind") == "sh":
            return HeadSpec.sh(degree=int(d["degree"]))
        raise DimensionMismatchError(f"unknown head kind {d.get('kind')!r}")


@dataclass
class SirenHead:
    w_in: np.ndarray    # (hidden, d_in)
    b_in: np.ndarray    # (hidden,)
    w_out: np.ndarray   # (3, hidden)
    b_out: np.ndarray   # (3,)
    omega0: float = DEFAULT_OMEGA0

    @property
    def spec(self) -> HeadSpec:
        return HeadSpec.siren(d_in=self.w_in.shape[1], hidden=self.w_in.shape[0], omega0=self.omega0)


@dataclass
class ShHead:
    coeffs: np.ndarray  # (3, (degree+1)**2), channel major
    degree: int

    @property
    def spec(self) -> HeadSpec:
        return HeadSpec.sh(degree=self.degree)


def init_siren(rng: np.random.Generator, spec: HeadSpec) -> np.ndarray:
    """Initial flat head parameters for one siren primitive.

    First layer (weights and biases) ~ U(-1/d_in, 1/d_in); output weights
    ~ U(-sqrt(6/hidden)/omega0, sqrt(6/hidden)/omega0); output bias zero.
    """
    lim_in = 1.0 / spec.d_in
    lim_out = np.sqrt(6.0 / spec.hidden) / spec.omega0
    w_in = rng.uniform(-lim_in, lim_in, size=(spec.hidden, spec.d_in))
    b_in = rng.uniform(-lim_in, lim_in, size=spec.hidden)
    w_out = rng.uniform(-lim_out, lim_out, size=(3, spec.hidden))
    b_out = np.zeros(3)
    return np.concatenate([w_in.ravel(), b_in, w_out.ravel(), b_out])


def init_sh(base_color: np.ndarray, degree: int) -> np.ndarray:
    """Flat sh head params reproducing `base_color` from every direction:
    DC term set from the inverse of the 0.5 offset, higher orders zero."""
    coeffs = np.zeros((3, (degree + 1) ** 2))
    coeffs[:, 0] = (np.asarray(base_color, dtype=np.float64) - 0.5) / SH_C0
    return coeffs.ravel()


def head_to_vector(head) -> np.ndarray:
    if isinstance(head, SirenHead):
        return np.concatenate(
            [head.w_in.ravel(), head.b_in.ravel(), head.w_out.ravel(), head.b_out.ravel()]
        )
    if isinstance(head, ShHead):
        return head.coeffs.ravel()
    raise DimensionMismatchError(f"unknown head type {type(head).__name__}")


def head_from_vector(spec: HeadSpec, vec: np.ndarray):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (spec.param_count,):
        raise LengthMismatchError(
            f"head expects {spec.param_count} parameters, got {vec.shape}"
        )
    if spec.kind == "siren":
        h, d = spec.hidden, spec.d_in
        i0 = h * d
        return SirenHead(
            w_in=vec[:i0].reshape(h, d).copy(),
            b_in=vec[i0 : i0 + h].copy(),
            w_out=vec[i0 + h : i0 + h + 3 * h].reshape(3, h).copy(),
            b_out=vec[i0 + 4 * h :].copy(),
            omega0=spec.omega0,
        )
    n = (spec.degree + 1) ** 2
    return ShHead(coeffs=vec.reshape(3, n).copy(), degree=spec.degree)


@dataclass
class SplatPrimitive:
    """One splat as a plain record. Scenes store rows instead; this type is
    for construction, inspection and scalar reference paths."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    raw_opacity: float
    head: SirenHead | ShHead

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def flatten_params(p: SplatPrimitive) -> np.ndarray:
    vec = np.concatenate(
        [
            np.asarray(p.mu, dtype=np.float64),
            np.asarray(p.rot, dtype=np.float64),
            np.asarray(p.log_scale, dtype=np.float64),
            [float(p.raw_opacity)],
            head_to_vector(p.head),
        ]
    )
    return vec


def unflatten_params(vec: np.ndarray, spec: HeadSpec) -> SplatPrimitive:
    vec = np.asarray(vec, dtype=np.float64)
    expect = HEAD_OFFSET + spec.param_count
    if vec.shape != (expect,):
        raise LengthMismatchError(f"expected {expect} parameters, got {vec.shape}")
    return SplatPrimitive(
        mu=vec[COL_MU].copy(),
        rot=vec[COL_ROT].copy(),
        log_scale=vec[COL_LOG_SCALE].copy(),
        raw_opacity=float(vec[COL_RAW_OPACITY]),
        head=head_from_vector(spec, vec[HEAD_OFFSET:]),
    )


def siren_color(head: SirenHead, u: float, v: float, direction=None) -> np.ndarray:
    """Scalar reference evaluation of one siren head at one splat point."""
    color, _, _ = siren_eval_batch(
        head.w_in, head.b_in, head.w_out, head.b_out, head.omega0,
        np.array([[u, v]]), direction=direction,
    )
    return color[0]


def siren_eval_batch(w_in, b_in, w_out, b_out, omega0: float, uv: np.ndarray, direction=None):
    """Batched siren forward at one primitive. uv is (M, 2) splat
    coordinates; direction is the (3,) unit view direction for d_in=5
    heads, constant across the batch because it is taken at the primitive
    center. Returns (color (M, 3), pre-activation (M, hidden), hidden
    activations (M, hidden))."""
    d_in = w_in.shape[1]
    if d_in == 5:
        if direction is None:
            raise DimensionMismatchError("siren head with d_in=5 needs a view direction")
        # Constant direction folds into the bias, leaving a width-2 matmul.
        b_eff = b_in + w_in[:, 2:5] @ np.asarray(direction, dtype=np.float64)
    else:
        b_eff = b_in
    pre = omega0 * (uv @ w_in[:, :2].T + b_eff[None, :])
    hid = np.sin(pre)
    out = hid @ w_out.T + b_out[None, :]
    return sigmoid(out), pre, hid


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values for unit directions. dirs (..., 3) ->
    (..., (degree+1)**2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = (degree + 1) ** 2
    out = np.empty(dirs.shape[:-1] + (n,))
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction): (..., (degree+1)**2, 3) for unit dirs."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = (degree + 1) ** 2
    g = np.zeros(dirs.shape[:-1] + (n, 3))
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = SH_C2[2] * 4.0 * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * 2.0 * x
        g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * 8.0 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8.0 * x * z
        g[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def sh_eval_batch(coeffs: np.ndarray, degree: int, dirs: np.ndarray):
    """Batched SH color: 0.5 offset then clamp to [0, 1]. Returns
    (color (M, 3), pre-clamp values (M, 3), basis (M, n))."""
    basis = sh_basis(degree, dirs)
    raw = np.einsum("cn,mn->mc", coeffs, basis) + 0.5
    return np.clip(raw, 0.0, 1.0), raw, basis


def sh_color(head: ShHead, direction: np.ndarray) -> np.ndarray:
    color, _, _ = sh_eval_batch(head.coeffs, head.degree, np.asarray(direction, dtype=np.float64)[None, :])
    return color[0]


class Scene:
    """All primitives of one model as a dense (N, P) float64 row matrix."""

    def __init__(self, params: np.ndarray, head_spec: HeadSpec):
        params = np.ascontiguousarray(params, dtype=np.float64)
        expect = HEAD_OFFSET + head_spec.param_count
        if params.ndim != 2 or params.shape[1] != expect:
            raise ShapeMismatchError(
                f"scene rows must have {expect} columns for this head, got {params.shape}"
            )
        self.params = params
        self.head_spec = head_spec

    @staticmethod
    def from_primitives(prims: list[SplatPrimitive]) -> "Scene":
        if not prims:
            raise EmptySceneError("cannot build a scene from zero primitives")
        spec = prims[0].head.spec
        rows = [flatten_params(p) for p in prims]
        for p in prims[1:]:
            if p.head.spec != spec:
                raise DimensionMismatchError("all primitives in a scene share one head spec")
        return Scene(np.stack(rows), spec)

    @property
    def n(self) -> int:
        return self.params.shape[0]

    @property
    def row_width(self) -> int:
        return self.params.shape[1]

    @property
    def mu(self) -> np.ndarray:
        return self.params[:, COL_MU]

    @property
    def rot(self) -> np.ndarray:
        return self.params[:, COL_ROT]

    @property
    def log_scale(self) -> np.ndarray:
        return self.params[:, COL_LOG_SCALE]

    @property
    def raw_opacity(self) -> np.ndarray:
        return self.params[:, COL_RAW_OPACITY]

    @property
    def head_params(self) -> np.ndarray:
        return self.params[:, HEAD_OFFSET:]

    def opacity(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def primitive(self, i: int) -> SplatPrimitive:
        return unflatten_params(self.params[i], self.head_spec)

    def copy(self) -> "Scene":
        return Scene(self.params.copy(), self.head_spec)

    def appended(self, rows: np.ndarray) -> "Scene":
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        return Scene(np.concatenate([self.params, rows], axis=0), self.head_spec)

    def kept(self, mask: np.ndarray) -> "Scene":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n,):
            raise ShapeMismatchError("keep mask length must match primitive count")
        if not mask.any():
            raise EmptySceneError("pruning would remove every primitive")
        return Scene(self.params[mask].copy(), self.head_spec)

    def normalize_rotations(self) -> None:
        """Renormalize quaternion rows in place (used after optimizer steps)."""
        q = self.params[:, COL_ROT]
        q /= np.linalg.norm(q, axis=1, keepdims=True)
