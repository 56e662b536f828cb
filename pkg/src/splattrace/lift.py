"""Contrastive feature lifting, feature-query segmentation, multi-view object
extraction and self-prompting.

The contrastive loss over sampled pixels U with features f and instance ids::

    s(u, v) = exp(-tau * |f_u - f_v|^2)
    L = -1/|U| sum_u log( sum_{v in U+(u)} exp(s(u, v)) / sum_{v in U} exp(s(u, v)) )

U+(u) holds the pixels sharing u's id, u included.  During training scene
geometry and opacity are fixed, so each view's blend matrix B (pixels x
Gaussians) is built once and the rendered features are B @ F.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .raster import RasterOptions, composite_view, render_selection_mask
from .scene import Scene
from .tracing import TraceOptions, trace_view


class LiftError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    feature_dim: int = 16
    lr: float = 1e-5
    tau: float = 0.01
    n_pixels: int = 256
    steps: int = 2000
    balance: bool = True
    seed: int = 0
    stable: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, scene=None):
        if self.tau <= 0:
            raise LiftError("tau must be positive")
        if self.n_pixels < 2:
            raise LiftError("need at least 2 sampled pixels")
        if self.steps < 0 or self.lr <= 0:
            raise LiftError("steps must be >= 0 and lr > 0")
        if scene is not None and scene.feature_dim != self.feature_dim:
            raise LiftError(f"scene has d={scene.feature_dim}, config d={self.feature_dim}")


# ---------------------------------------------------------------------------
# loss


def contrastive_loss_vectors(feats, labels, tau, stable=False):
    """Loss and its gradient with respect to ``feats`` (|U|, d)."""
    f = np.asarray(feats, float)
    lab = np.asarray(labels)
    n = len(f)
    if n < 2:
        raise LiftError("need at least 2 sampled pixels")
    if (lab <= 0).any():
        raise LiftError("sampled pixels must be labelled (id > 0)")
    diff = f[:, None, :] - f[None, :, :]
    d2 = (diff * diff).sum(-1)
    s = np.exp(-tau * d2)
    pos = lab[:, None] == lab[None, :]
    if stable:
        log_num = logsumexp(np.where(pos, s, -np.inf), axis=1)
        log_den = logsumexp(s, axis=1)
        loss = float(-(log_num - log_den).mean())
        p_num = np.where(pos, np.exp(s - log_num[:, None]), 0.0)
        p_den = np.exp(s - log_den[:, None])
        c = -(p_num - p_den) / n
    else:
        e = np.exp(s)
        num = np.where(pos, e, 0.0).sum(axis=1)
        den = e.sum(axis=1)
        loss = float(-np.log(num / den).mean())
        c = -(np.where(pos, e, 0.0) / num[:, None] - e / den[:, None]) / n
    m = (c + c.T) * s
    grad = -2 * tau * (m.sum(axis=1)[:, None] * f - m @ f)
    return loss, grad


def contrastive_loss(feature_image, instance_map, pixels, tau, stable=False):
    """Loss over the sampled ``pixels`` (flat indices or (row, col) pairs) and
    the gradient on the feature image (zero away from U)."""
    img = np.asarray(feature_image, float)
    H, W, d = img.shape
    labels = np.asarray(getattr(instance_map, "labels", instance_map))
    if labels.shape != (H, W):
        raise LiftError("instance map does not match the feature image")
    pix = np.asarray(pixels)
    flat = pix[:, 0] * W + pix[:, 1] if pix.ndim == 2 else pix
    loss, g = contrastive_loss_vectors(img.reshape(-1, d)[flat], labels.ravel()[flat], tau, stable)
    out = np.zeros((H * W, d))
    np.add.at(out, flat, g)
    return loss, out.reshape(H, W, d)


# ---------------------------------------------------------------------------
# training


@dataclass
class ViewCache:
    """Blend matrix and coverage of one view at fixed geometry and opacity."""

    view: object
    blend: object
    coverage: np.ndarray
    comp: object

    @classmethod
    def build(cls, scene, view, options):
        comp = composite_view(scene, view, options)
        return cls(view, comp.blend_matrix(), 1.0 - comp.residual, comp)

    def features(self, feats, normalise=True):
        f = np.asarray(self.blend @ feats)
        if normalise:
            f = f / np.maximum(self.coverage, 1e-12)[:, None]
        return f


def sample_pixels(labels, n, rng, balance=True):
    """Flat pixel indices: an instance uniformly, then a pixel inside it."""
    flat = np.asarray(labels).ravel()
    idx = np.flatnonzero(flat > 0)
    if idx.size == 0:
        raise LiftError("instance map has no labelled pixels")
    if not balance:
        return idx[rng.integers(idx.size, size=n)]
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    ids, start, count = np.unique(lab, return_index=True, return_counts=True)
    pick = rng.integers(ids.size, size=n)
    within = (rng.random(n) * count[pick]).astype(np.int64)
    return idx[start[pick] + within]


@dataclass
class TrainResult:
    scene: Scene
    losses: list


def train_contrastive(scene: Scene, merged_maps, config: ContrastiveConfig,
                      options: RasterOptions | None = None, caches=None) -> TrainResult:
    """Adam on per-Gaussian features, one view per step in round-robin order."""
    config.validate(scene)
    options = options or RasterOptions()
    if not merged_maps or len(merged_maps) != scene.n_views:
        raise LiftError(f"need {scene.n_views} merged maps")
    maps = [np.asarray(getattr(m, "labels", m)) for m in merged_maps]
    for v, m in zip(scene.views, maps):
        if m.shape != v.shape:
            raise LiftError(f"view {v.view_index}: map {m.shape} vs {v.shape}")
    if config.steps == 0:
        return TrainResult(scene, [])
    caches = caches or [ViewCache.build(scene, v, options) for v in scene.views]
    usable = [l for l, m in enumerate(maps) if (m > 0).any()]
    if not usable:
        raise LiftError("all merged maps are empty")
    rng = np.random.default_rng(config.seed)
    feats = scene.features.copy()
    m1 = np.zeros_like(feats)
    m2 = np.zeros_like(feats)
    b1, b2 = config.beta1, config.beta2
    losses = []
    for step in range(config.steps):
        l = usable[step % len(usable)]
        pix = sample_pixels(maps[l], config.n_pixels, rng, config.balance)
        rows = caches[l].blend[pix]
        fu = np.asarray(rows @ feats)
        loss, gu = contrastive_loss_vectors(fu, maps[l].ravel()[pix], config.tau, config.stable)
        g = np.asarray(rows.T @ gu)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        t = step + 1
        mh = m1 / (1 - b1 ** t)
        vh = m2 / (1 - b2 ** t)
        feats = feats - config.lr * mh / (np.sqrt(vh) + config.eps)
        losses.append(loss)
    return TrainResult(scene.with_params(features=feats), losses)


def feature_separation(scene, maps, caches=None, options=None, n_pixels=512, seed=0):
    """Mean cosine similarity of rendered features within instances minus across
    instances, over a balanced pixel sample of every view."""
    options = options or RasterOptions()
    caches = caches or [ViewCache.build(scene, v, options) for v in scene.views]
    rng = np.random.default_rng(seed)
    intra, inter = [], []
    for c, m in zip(caches, maps):
        m = np.asarray(getattr(m, "labels", m))
        if not (m > 0).any():
            continue
        pix = sample_pixels(m, n_pixels, rng)
        f = c.features(scene.features)[pix]
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-300)
        cos = f @ f.T
        lab = m.ravel()[pix]
        same = lab[:, None] == lab[None, :]
        off = ~np.eye(len(pix), dtype=bool)
        intra.append(cos[same & off].mean())
        if (~same).any():
            inter.append(cos[~same].mean())
    return float(np.mean(intra) - np.mean(inter)), float(np.mean(intra)), float(np.mean(inter))


# ---------------------------------------------------------------------------
# extraction


def extract_object(scene: Scene, per_view_masks, options: RasterOptions | None = None,
                   trace_options: TraceOptions | None = None, mass_threshold=0.5,
                   composites=None):
    """Select Gaussians whose traced mass lies mostly on the mask in a strict
    majority of their visible views.  ``per_view_masks[l]`` may be None for a
    view without a mask; such views do not vote.  Returns (selected, complement)."""
    options = options or RasterOptions()
    n = len(scene)
    yes = np.zeros(n, np.int64)
    seen = np.zeros(n, np.int64)
    for l, mask in enumerate(per_view_masks):
        if mask is None:
            continue
        view = scene.views[l]
        mask = np.asarray(mask, bool)
        if mask.shape != view.shape:
            raise LiftError(f"view {l}: mask {mask.shape} vs image {view.shape}")
        comp = composites[l] if composites is not None else None
        rows = trace_view(scene, view, mask.astype(np.int32), options, trace_options, comp)
        vis = rows.visible
        dense_on = np.zeros(n)
        ids = rows.row_ids()
        on = rows.patch == 1
        dense_on[ids[on]] = rows.prob[on]
        seen += vis
        yes += vis & (dense_on > mass_threshold)
    sel = (seen > 0) & (2 * yes > seen)
    return np.flatnonzero(sel), np.flatnonzero(~sel)


# ---------------------------------------------------------------------------
# feature queries


@dataclass
class QueryResult:
    query_points: list
    query_features: np.ndarray
    threshold: float
    masks: dict
    selected: np.ndarray
    iou_trace: list = field(default_factory=list)
    per_view_iou: dict = field(default_factory=dict)

    def manifest(self):
        return {
            "query_points": _plain_points(self.query_points),
            "threshold": float(self.threshold),
            "per_view_iou": {str(k): float(v) for k, v in sorted(self.per_view_iou.items())},
            "n_selected_gaussians": int(len(self.selected)),
        }


def _plain_points(pts):
    """Query points are (row, col) pairs, or (view, [(row, col), ...]) when
    self-prompting."""
    out = []
    for p in pts:
        if len(p) == 2 and not np.isscalar(p[1]):
            out.append([int(p[0]), [[int(r), int(c)] for r, c in p[1]]])
        else:
            out.append([int(x) for x in p])
    return out


def _best_threshold(score, target, valid):
    """Threshold on ``score`` maximising IoU of {valid & score >= t} with target."""
    idx = np.flatnonzero(valid)
    s = score[idx]
    order = np.argsort(-s, kind="stable")
    s = s[order]
    tp = np.cumsum(target[idx][order])
    k = np.arange(1, s.size + 1)
    m = int(target.sum())
    iou = tp / (m + k - tp)
    # only cut between distinct scores
    last = np.r_[s[1:] != s[:-1], True]
    iou = np.where(last, iou, -1.0)
    j = int(np.argmax(iou))
    return float(s[j]), float(iou[j])


def _score(feats, queries):
    """Negative squared distance to the nearest query feature."""
    best = np.full(len(feats), -np.inf)
    for q in queries:
        d = feats - q
        best = np.maximum(best, -(d * d).sum(axis=1))
    return best


def query_segment(scene: Scene, reference_view: int, reference_mask, options=None,
                  caches=None, holdout_caches=None, max_queries=8, min_gain=1e-3,
                  coverage_min=0.5, tau=0.01) -> QueryResult:
    """Grow a set of query features from the reference mask until the best
    threshold stops improving IoU, then predict masks on every view."""
    options = options or RasterOptions()
    mask = np.asarray(reference_mask, bool)
    if not mask.any():
        raise LiftError("reference mask is empty")
    caches = caches or [ViewCache.build(scene, v, options) for v in scene.views]
    ref = caches[reference_view]
    if mask.shape != ref.view.shape:
        raise LiftError("reference mask does not match the reference view")
    feats = ref.features(scene.features)
    flat = mask.ravel()
    valid = ref.coverage >= coverage_min
    inner = ndimage.binary_erosion(mask).ravel()
    cand = np.flatnonzero(inner & valid)
    if cand.size == 0:
        cand = np.flatnonzero(flat & valid)
    if cand.size == 0:
        cand = np.flatnonzero(flat)
    W = ref.view.width
    rows, cols = np.divmod(cand, W)
    cy, cx = np.nonzero(mask)
    d2 = (rows - cy.mean()) ** 2 + (cols - cx.mean()) ** 2
    picked = [int(cand[np.argmin(d2)])]
    thr, iou = _best_threshold(_score(feats, feats[picked]), flat, valid)
    trace = [iou]
    while len(picked) < max_queries:
        sc = _score(feats, feats[picked])
        free = cand[~np.isin(cand, picked)]
        if free.size == 0:
            break
        nxt = int(free[np.argmin(sc[free])])
        t2, i2 = _best_threshold(_score(feats, feats[picked + [nxt]]), flat, valid)
        if i2 - iou < min_gain:
            break
        picked.append(nxt)
        thr, iou = t2, i2
        trace.append(iou)
    q = feats[picked]
    masks = {}
    for c in list(caches) + list(holdout_caches or []):
        f = c.features(scene.features)
        pred = (_score(f, q) >= thr) & (c.coverage >= coverage_min)
        masks[c.view.view_index] = pred.reshape(c.view.shape)
    train_masks = [masks[c.view.view_index] for c in caches]
    sel, _ = extract_object(scene, train_masks, options,
                            composites=[c.comp for c in caches])
    pts = [tuple(int(x) for x in divmod(p, W)) for p in picked]
    return QueryResult(pts, q, float(np.exp(tau * thr)), masks, sel, trace)


# ---------------------------------------------------------------------------
# self-prompting


class Prompter(Protocol):
    def __call__(self, view: int, points: list) -> np.ndarray: ...


class OraclePrompter:
    """Answers point prompts from ground-truth maps: the mask of the id under
    most prompt points.  For views listed in ``corrupted`` the answer is the
    injected mask covering most prompt points instead."""

    def __init__(self, gt_maps, corrupted: dict | None = None):
        self.gt_maps = [np.asarray(m) for m in gt_maps]
        self.corrupted = corrupted or {}

    def __call__(self, view, points):
        m = self.gt_maps[view]
        pts = [(int(r), int(c)) for r, c in points]
        if view in self.corrupted:
            masks = self.corrupted[view].masks
            hits = [sum(bool(mk[r, c]) for r, c in pts) for mk in masks]
            if masks.size and max(hits) > 0:
                return masks[int(np.argmax(hits))].copy()
            return np.zeros(m.shape, bool)
        labels = [m[r, c] for r, c in pts if m[r, c] > 0]
        if not labels:
            return np.zeros(m.shape, bool)
        ids, counts = np.unique(labels, return_counts=True)
        return m == ids[np.argmax(counts)]


def self_prompt(scene: Scene, reference_view: int, point_prompts, prompter: Callable,
                max_views=None, options=None, trace_options=None, holdout_caches=None,
                composites=None, n_prompts=3) -> QueryResult:
    """Prompt the reference view, trace the answer, then prompt each next view
    at the projected centres of the best-voted Gaussians visible there."""
    options = options or RasterOptions()
    trace_options = trace_options or TraceOptions()
    L = scene.n_views
    max_views = L if max_views is None else max_views
    if not point_prompts:
        raise LiftError("need at least one point prompt")
    order = [(reference_view + j) % L for j in range(L)][:max_views]
    comps = composites or [None] * L
    n = len(scene)
    votes = np.zeros(n, np.int64)
    seen = np.zeros(n, np.int64)
    masks = [None] * L
    points = [tuple(p) for p in point_prompts]
    used_points = []
    for j, l in enumerate(order):
        view = scene.views[l]
        if j > 0:
            comp = comps[l] if comps[l] is not None else composite_view(scene, view, options)
            comps[l] = comp
            f = comp.fragments
            mass = np.bincount(f.gaussian[comp.active], weights=comp.weight[comp.active],
                               minlength=n)
            vis = mass >= trace_options.vis_eps
            cand = np.flatnonzero(vis & (votes > 0))
            if cand.size == 0:
                break
            rank = np.lexsort((cand, -votes[cand]))
            best = cand[rank[:n_prompts]]
            xy, _ = view.project(scene.centers[best])
            points = [(int(np.clip(round(y), 0, view.height - 1)),
                       int(np.clip(round(x), 0, view.width - 1))) for x, y in xy]
        try:
            mask = np.asarray(prompter(l, points), bool)
        except Exception as e:  # surface with the view index
            raise LiftError(f"prompter failed on view {l}: {e}") from e
        if mask.shape != view.shape:
            raise LiftError(f"prompter returned {mask.shape} on view {l}, expected {view.shape}")
        masks[l] = mask
        used_points.append((l, points))
        rows = trace_view(scene, view, mask.astype(np.int32), options, trace_options, comps[l])
        on = np.zeros(n)
        ids = rows.row_ids()
        hit = rows.patch == 1
        on[ids[hit]] = rows.prob[hit]
        seen += rows.visible
        votes += rows.visible & (on > 0.5)
    sel = np.flatnonzero((seen > 0) & (2 * votes > seen))
    out = {}
    for c in holdout_caches or []:
        out[c.view.view_index] = render_selection_mask(c.comp, sel)
    for l in range(L):
        if masks[l] is not None:
            out[scene.views[l].view_index] = masks[l]
    return QueryResult(used_points, np.zeros((0, scene.feature_dim)), 0.5, out, sel)
