"""Front-to-back alpha blending of 2D Gaussian disks.

Rendering is split in two phases:

* ``rasterize`` finds, for every pixel, the disks whose ray intersection lies
  inside the cutoff radius, sorted by depth (ties by Gaussian index).  This
  depends on geometry only, so it can be cached while appearance changes.
* ``Fragments.composite`` turns those fragments into blend weights for a given
  opacity vector, applying the alpha clamp and early termination.

Every per-pixel quantity is computed from that pixel's fragments alone and
accumulated in depth order, so tiling the image (or threading over tiles)
never changes a single bit of the output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .scene import NO_LABEL, CameraView, GaussianDisk, Scene

PARALLEL_EPS = 1e-12


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class RasterOptions:
    cutoff_radius: float = 3.0
    alpha_clamp: float = 0.99
    term_eps: float = 1e-4
    with_features: bool = False
    threads: int = 1
    tile_rows: int = 32

    def __post_init__(self):
        if not (self.cutoff_radius > 0 and self.alpha_clamp > 0 and self.term_eps > 0):
            raise RasterError("raster options must be positive")
        if self.threads < 1 or self.tile_rows < 1:
            raise RasterError("threads and tile_rows must be >= 1")

    @property
    def g_min(self):
        return math.exp(-self.cutoff_radius ** 2 / 2)


def gaussian_value(uv):
    uv = np.asarray(uv, dtype=float)
    return np.exp(-(uv[..., 0] ** 2 + uv[..., 1] ** 2) / 2)


def intersect_ray_disk(view: CameraView, pixel, disk: GaussianDisk):
    """Local (u, v) coordinates and depth where the ray through ``pixel``
    (x=col, y=row) meets the disk's plane, or None."""
    x, y = pixel
    if not (0 <= x < view.width and 0 <= y < view.height):
        raise RasterError(f"pixel {pixel} outside the image")
    d = view.pixel_directions(x, y)
    o = view.origin
    n = disk.normal
    dn = float(d @ n)
    if abs(dn) < PARALLEL_EPS:
        return None
    lam = float((disk.center - o) @ n) / dn
    if lam <= 0:
        return None
    rel = o + lam * d - disk.center
    uv = np.array([rel @ disk.tangent_u / disk.scale_u, rel @ disk.tangent_v / disk.scale_v])
    return uv, lam


# ---------------------------------------------------------------------------
# geometry pass


@dataclass
class Fragments:
    """All cutoff-passing (pixel, Gaussian) pairs of one view.

    Arrays are sorted pixel-major, then by depth, then by Gaussian index;
    ``slot`` is the rank of the fragment within its pixel.
    """

    height: int
    width: int
    n_gaussians: int
    pixel: np.ndarray
    gaussian: np.ndarray
    g: np.ndarray
    depth: np.ndarray
    slot: np.ndarray

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def depth_k(self):
        return int(self.slot.max()) + 1 if self.slot.size else 0

    def composite(self, opacity, options: RasterOptions) -> "Composite":
        opacity = np.asarray(opacity, float)
        alpha = np.minimum(opacity[self.gaussian] * self.g, options.alpha_clamp)
        P, K = self.n_pixels, self.depth_k
        A = np.zeros((P, K))
        A[self.pixel, self.slot] = alpha
        t_after = np.cumprod(1.0 - A, axis=1)
        t_before = np.ones((P, K))
        if K > 1:
            t_before[:, 1:] = t_after[:, :-1]
        tb = t_before[self.pixel, self.slot]
        active = tb > options.term_eps
        n_act = np.bincount(self.pixel[active], minlength=P)
        residual = np.ones(P)
        hit = n_act > 0
        residual[hit] = t_after[hit, n_act[hit] - 1]
        weight = np.where(active, alpha * tb, 0.0)
        return Composite(self, opacity, alpha, tb, active, weight, residual, options)


def _bboxes(scene: Scene, view: CameraView, r):
    n = len(scene)
    corners = []
    for a in (-r, r):
        for b in (-r, r):
            corners.append(scene.centers
                           + a * scene.scales[:, :1] * scene.tangent_u
                           + b * scene.scales[:, 1:] * scene.tangent_v)
    corners = np.stack(corners, axis=1)  # (n, 4, 3)
    xy, z = view.project(corners)
    behind = (z <= 1e-9).any(axis=1)
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(np.nanmin(xy[..., 0], axis=1))
        x1 = np.floor(np.nanmax(xy[..., 0], axis=1))
        y0 = np.ceil(np.nanmin(xy[..., 1], axis=1))
        y1 = np.floor(np.nanmax(xy[..., 1], axis=1))
    x0 = np.where(behind, 0, x0)
    y0 = np.where(behind, 0, y0)
    x1 = np.where(behind, view.width - 1, x1)
    y1 = np.where(behind, view.height - 1, y1)
    x0 = np.clip(x0, 0, view.width).astype(np.int64)
    y0 = np.clip(y0, 0, view.height).astype(np.int64)
    x1 = np.clip(x1, -1, view.width - 1).astype(np.int64)
    y1 = np.clip(y1, -1, view.height - 1).astype(np.int64)
    return x0, x1, y0, y1, np.zeros(n)


def _dot3(a, b):
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2]


def _tile(scene, view, options, pre, r0, r1):
    x0, x1, y0, y1 = pre["bbox"]
    ty0 = np.maximum(y0, r0)
    ty1 = np.minimum(y1, r1 - 1)
    w = x1 - x0 + 1
    h = ty1 - ty0 + 1
    sel = np.flatnonzero((w > 0) & (h > 0))
    empty = np.zeros(0, np.int64)
    if sel.size == 0:
        return empty, empty, np.zeros(0), np.zeros(0)
    counts = w[sel] * h[sel]
    gid = np.repeat(sel, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(gid.size) - starts
    px = x0[gid] + local % w[gid]
    py = ty0[gid] + local // w[gid]

    d = view.pixel_directions(px, py)
    dn = _dot3(d, pre["normal"][gid])
    ok = np.abs(dn) >= PARALLEL_EPS
    gid, px, py, d, dn = gid[ok], px[ok], py[ok], d[ok], dn[ok]
    lam = pre["num"][gid] / dn
    ok = lam > 0
    gid, px, py, d, lam = gid[ok], px[ok], py[ok], d[ok], lam[ok]
    u = (lam * _dot3(d, scene.tangent_u[gid]) - pre["au"][gid]) / scene.scales[gid, 0]
    v = (lam * _dot3(d, scene.tangent_v[gid]) - pre["av"][gid]) / scene.scales[gid, 1]
    g = np.exp(-(u * u + v * v) / 2)
    ok = g >= options.g_min
    return py[ok] * view.width + px[ok], gid[ok], g[ok], lam[ok]


def rasterize(scene: Scene, view: CameraView, options: RasterOptions | None = None,
              check_view=True) -> Fragments:
    options = options or RasterOptions()
    if check_view and not scene.has_view(view):
        raise RasterError(f"view {view.view_index} does not belong to the scene")
    H, W = view.height, view.width
    n = len(scene)
    if n == 0:
        e = np.zeros(0, np.int64)
        return Fragments(H, W, 0, e, e, np.zeros(0), np.zeros(0), e)
    o = view.origin
    rel = scene.centers - o
    normal = scene.normals
    x0, x1, y0, y1, _ = _bboxes(scene, view, options.cutoff_radius)
    pre = {
        "bbox": (x0, x1, y0, y1),
        "normal": normal,
        "num": _dot3(rel, normal),
        "au": _dot3(rel, scene.tangent_u),
        "av": _dot3(rel, scene.tangent_v),
    }
    bounds = [(r, min(r + options.tile_rows, H)) for r in range(0, H, options.tile_rows)]
    if options.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(options.threads) as ex:
            parts = list(ex.map(lambda b: _tile(scene, view, options, pre, *b), bounds))
    else:
        parts = [_tile(scene, view, options, pre, *b) for b in bounds]
    pix = np.concatenate([p[0] for p in parts])
    gid = np.concatenate([p[1] for p in parts])
    g = np.concatenate([p[2] for p in parts])
    depth = np.concatenate([p[3] for p in parts])
    order = np.lexsort((gid, depth, pix))
    pix, gid, g, depth = pix[order], gid[order], g[order], depth[order]
    m = pix.size
    if m:
        first = np.r_[True, pix[1:] != pix[:-1]]
        start = np.maximum.accumulate(np.where(first, np.arange(m), 0))
        slot = np.arange(m) - start
    else:
        slot = np.zeros(0, np.int64)
    return Fragments(H, W, n, pix, gid, g, depth, slot)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class Composite:
    fragments: Fragments
    opacity: np.ndarray
    alpha: np.ndarray
    t_before: np.ndarray
    active: np.ndarray
    weight: np.ndarray
    residual: np.ndarray
    options: RasterOptions

    @property
    def n_traversed(self):
        """Fragments actually blended (i.e. before early termination)."""
        return int(self.active.sum())

    def _padded(self):
        f = self.fragments
        P, K = f.n_pixels, f.depth_k
        idx = np.zeros((P, K), np.int64)
        wts = np.zeros((P, K))
        a = np.zeros((P, K))
        tb = np.zeros((P, K))
        act = self.active
        idx[f.pixel, f.slot] = f.gaussian
        wts[f.pixel[act], f.slot[act]] = self.weight[act]
        a[f.pixel[act], f.slot[act]] = self.alpha[act]
        tb[f.pixel[act], f.slot[act]] = self.t_before[act]
        return idx, wts, a, tb

    def accumulate(self, values):
        """Per-pixel sum of ``values[i] * w_i`` in depth order; (P, C)."""
        values = np.asarray(values, float)
        idx, wts, _, _ = self._padded()
        out = np.zeros((self.fragments.n_pixels, values.shape[1]))
        for k in range(idx.shape[1]):
            out += wts[:, k, None] * values[idx[:, k]]
        return out

    def blend_matrix(self):
        """Sparse (pixels x Gaussians) matrix of blend weights."""
        f, act = self.fragments, self.active
        return sp.csr_matrix(
            (self.weight[act], (f.pixel[act], f.gaussian[act])),
            shape=(f.n_pixels, f.n_gaussians),
        )

    def contributions(self) -> "Contributions":
        f, act = self.fragments, self.active
        pix = f.pixel[act]
        indptr = np.zeros(f.n_pixels + 1, np.int64)
        np.cumsum(np.bincount(pix, minlength=f.n_pixels), out=indptr[1:])
        return Contributions(f.height, f.width, indptr, f.gaussian[act],
                             self.weight[act], self.residual, int(act.sum()))

    def backward(self, values, grad, grad_transmittance=None, gauss_newton=False):
        """Gradients of ``sum(grad * accumulate(values)) + sum(grad_T * residual)``.

        Returns (d/d values (N, C), d/d opacity (N,)) and, if ``gauss_newton``,
        the diagonal Gauss-Newton terms for values (N,) and opacity (N,).
        """
        f = self.fragments
        values = np.asarray(values, float)
        grad = np.asarray(grad, float).reshape(f.n_pixels, -1)
        idx, wts, a, tb = self._padded()
        P, K = idx.shape
        rest = np.zeros((P, values.shape[1]))
        rest_t = np.ones(P) if grad_transmittance is not None else None
        gt = None if grad_transmittance is None else np.asarray(grad_transmittance, float).ravel()
        d_alpha = np.zeros((P, K))
        jac2 = np.zeros((P, K)) if gauss_newton else None
        for k in range(K - 1, -1, -1):
            v = values[idx[:, k]]
            ak = a[:, k, None]
            diff = v - rest
            da = tb[:, k] * np.einsum("pc,pc->p", grad, diff)
            if gt is not None:
                da -= tb[:, k] * gt * rest_t
                rest_t = (1 - a[:, k]) * rest_t
            d_alpha[:, k] = da
            if gauss_newton:
                jac2[:, k] = tb[:, k] ** 2 * np.einsum("pc,pc->p", diff, diff)
            rest = ak * v + (1 - ak) * rest
        B = self.blend_matrix()
        d_values = np.asarray(B.T @ grad)
        act = self.active
        gate = (self.opacity[f.gaussian] * f.g < self.options.alpha_clamp) & act
        da_frag = d_alpha[f.pixel, f.slot]
        d_op = np.bincount(f.gaussian[gate], weights=(da_frag * f.g)[gate], minlength=f.n_gaussians)
        if not gauss_newton:
            return d_values, d_op
        gn_values = np.asarray(B.multiply(B).T @ np.ones(f.n_pixels)).ravel()
        j2 = jac2[f.pixel, f.slot]
        gn_op = np.bincount(f.gaussian[gate], weights=(j2 * f.g ** 2)[gate], minlength=f.n_gaussians)
        return d_values, d_op, gn_values, gn_op


@dataclass
class Contributions:
    """Active fragments in CSR form: pixel p owns entries indptr[p]:indptr[p+1]."""

    height: int
    width: int
    indptr: np.ndarray
    gaussian: np.ndarray
    weight: np.ndarray
    residual: np.ndarray
    n_fragments: int

    def pixel(self, p):
        s = slice(self.indptr[p], self.indptr[p + 1])
        return list(zip(self.gaussian[s].tolist(), self.weight[s].tolist()))

    def pixel_ids(self):
        return np.repeat(np.arange(self.height * self.width), np.diff(self.indptr))


# ---------------------------------------------------------------------------
# public operations


@dataclass
class RenderOutput:
    color: np.ndarray
    feature: np.ndarray | None
    transmittance: np.ndarray
    n_fragments: int


def _values(scene, with_features):
    if with_features:
        return np.concatenate([scene.colors, scene.features], axis=1)
    return scene.colors


def render_composite(scene: Scene, comp: Composite, with_features=False) -> RenderOutput:
    f = comp.fragments
    out = comp.accumulate(_values(scene, with_features))
    color = out[:, :3].reshape(f.height, f.width, 3)
    feat = out[:, 3:].reshape(f.height, f.width, -1) if with_features else None
    return RenderOutput(color, feat, comp.residual.reshape(f.height, f.width), comp.n_traversed)


def composite_view(scene, view, options=None, check_view=True) -> Composite:
    options = options or RasterOptions()
    return rasterize(scene, view, options, check_view).composite(scene.opacity, options)


def render(scene: Scene, view: CameraView, options: RasterOptions | None = None,
           check_view=True) -> RenderOutput:
    options = options or RasterOptions()
    comp = composite_view(scene, view, options, check_view)
    return render_composite(scene, comp, options.with_features)


def render_contributions(scene, view, options=None, check_view=True) -> Contributions:
    return composite_view(scene, view, options, check_view).contributions()


@dataclass
class AppearanceGrads:
    color: np.ndarray
    opacity: np.ndarray
    feature: np.ndarray | None


def appearance_gradients(scene: Scene, view: CameraView, loss_grad: dict,
                         options: RasterOptions | None = None,
                         comp: Composite | None = None) -> AppearanceGrads:
    """Analytic gradients of a loss with respect to colour, opacity and feature.

    ``loss_grad`` maps "color" (H, W, 3), and optionally "feature" (H, W, d)
    and "transmittance" (H, W), to the loss derivative on that output.
    Geometry receives no gradient.
    """
    options = options or RasterOptions()
    if comp is None:
        comp = composite_view(scene, view, options)
    H, W = view.height, view.width
    gc = np.asarray(loss_grad.get("color", np.zeros((H, W, 3))), float)
    if gc.shape != (H, W, 3):
        raise RasterError(f"color gradient has shape {gc.shape}, expected {(H, W, 3)}")
    gf = loss_grad.get("feature")
    parts, vals = [gc.reshape(-1, 3)], [scene.colors]
    if gf is not None:
        gf = np.asarray(gf, float)
        if gf.shape != (H, W, scene.feature_dim):
            raise RasterError(f"feature gradient has shape {gf.shape}")
        parts.append(gf.reshape(-1, scene.feature_dim))
        vals.append(scene.features)
    gt = loss_grad.get("transmittance")
    if gt is not None:
        gt = np.asarray(gt, float)
        if gt.shape != (H, W):
            raise RasterError(f"transmittance gradient has shape {gt.shape}")
    d_values, d_op = comp.backward(np.concatenate(vals, 1), np.concatenate(parts, 1), gt)
    return AppearanceGrads(d_values[:, :3], d_op, d_values[:, 3:] if gf is not None else None)


def render_gt_instance_map(scene: Scene, view: CameraView, options=None, comp=None) -> np.ndarray:
    """Per pixel, the instance with the largest total blend weight; pixels with
    residual transmittance above 0.5 are background (0)."""
    if len(scene) and (scene.gt_instance == NO_LABEL).any():
        bad = int(np.flatnonzero(scene.gt_instance == NO_LABEL)[0])
        raise RasterError(f"gaussian {bad} has no ground-truth instance")
    H, W = view.height, view.width
    if len(scene) == 0:
        return np.zeros((H, W), np.int32)
    if comp is None:
        comp = composite_view(scene, view, options)
    f, act = comp.fragments, comp.active
    n_lab = int(scene.gt_instance.max()) + 1
    key = f.pixel[act] * n_lab + scene.gt_instance[f.gaussian[act]]
    tot = np.bincount(key, weights=comp.weight[act], minlength=f.n_pixels * n_lab)
    lab = tot.reshape(f.n_pixels, n_lab).argmax(axis=1)
    lab[comp.residual > 0.5] = 0
    return lab.reshape(H, W).astype(np.int32)


def render_selection_mask(comp: Composite, selected) -> np.ndarray:
    """Binary mask where the selected Gaussians out-weigh the rest of the scene
    and the pixel is covered (residual transmittance <= 0.5)."""
    f, act = comp.fragments, comp.active
    sel = np.zeros(f.n_gaussians, bool)
    sel[np.asarray(selected, np.int64)] = True
    w = comp.weight[act]
    inside = sel[f.gaussian[act]]
    ws = np.bincount(f.pixel[act][inside], weights=w[inside], minlength=f.n_pixels)
    wo = np.bincount(f.pixel[act][~inside], weights=w[~inside], minlength=f.n_pixels)
    return ((ws > wo) & (comp.residual <= 0.5)).reshape(f.height, f.width)
