"""Ambiguity scoring and GIT-guided split/prune density control, with an
appearance-only refit between rounds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .raster import RasterOptions, rasterize, render
from .scene import NO_LABEL, GaussianDisk, Scene, concat_scenes
from .tracing import TraceOptions, WeightMatrix, trace_all


class RefineError(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    gamma: float = 0.8
    theta_as: float = 0.5
    scale_divisor: float = 2.0
    period: int = 1000
    max_rounds: int = 5
    lr: float = 1.0
    photometric_weight: float = 1.0
    max_halvings: int = 20
    seed: int = 0

    def validate(self):
        if not 0 < self.gamma < 1:
            raise RefineError("gamma must lie in (0, 1)")
        if not 0 < self.theta_as <= 1:
            raise RefineError("theta_as must lie in (0, 1]")
        if not self.scale_divisor > 1:
            raise RefineError("scale_divisor must exceed 1")
        if self.period < 0 or self.max_rounds < 0 or self.lr <= 0:
            raise RefineError("period and max_rounds must be >= 0, lr > 0")
        if not self.photometric_weight > 0:
            raise RefineError("photometric_weight must be positive")


@dataclass
class AmbiguityReport:
    scores: np.ndarray
    n_visible: np.ndarray
    ambiguous: np.ndarray
    invisible: np.ndarray
    round_index: int = 0

    @property
    def n_ambiguous(self):
        return int(self.ambiguous.sum())


def ambiguity_scores(wm: WeightMatrix, gamma=0.8, theta_as=0.5, round_index=0) -> AmbiguityReport:
    """As_i = fraction of visible views whose row max is strictly below gamma;
    ambiguous iff As_i > theta_as."""
    vis = wm.visibility()
    nv = vis.sum(axis=1)
    below = ((wm.max_prob < gamma) & vis).sum(axis=1)
    scores = np.where(nv > 0, below / np.maximum(nv, 1), 0.0)
    invisible = nv == 0
    return AmbiguityReport(scores, nv, (scores > theta_as) & ~invisible, invisible, round_index)


def split_gaussian(disk: GaussianDisk, rng, divisor=2.0):
    """Two children at 1/divisor scale, centres drawn from the parent's density."""
    out = []
    for _ in range(2):
        u, v = rng.standard_normal(2)
        c = (np.asarray(disk.center) + u * disk.scale_u * np.asarray(disk.tangent_u)
             + v * disk.scale_v * np.asarray(disk.tangent_v))
        out.append(GaussianDisk(c, disk.tangent_u, disk.tangent_v, disk.scale_u / divisor,
                                disk.scale_v / divisor, disk.opacity, disk.color,
                                disk.feature, None))
    return tuple(out)


def _split_all(scene: Scene, idx, rng, divisor):
    """Scene with the Gaussians in ``idx`` replaced by two children each; the
    untouched Gaussians keep their order and the children are appended."""
    keep = np.setdiff1d(np.arange(len(scene)), idx)
    m = len(idx)
    centers = np.empty((2 * m, 3))
    for j, i in enumerate(idx):
        a, b = split_gaussian(scene.gaussian(i), rng, divisor)
        centers[2 * j], centers[2 * j + 1] = a.center, b.center
    rep = np.repeat(np.asarray(idx, np.int64), 2)
    kept = scene.subset(keep)
    kids = scene.subset(rep).with_params(
        centers=centers, scales=scene.scales[rep] / divisor,
        gt_instance=np.full(2 * m, NO_LABEL))
    return concat_scenes([kept, kids]), keep, rep


@dataclass
class RoundResult:
    scene: Scene
    before: AmbiguityReport
    after: AmbiguityReport
    n_split: int
    n_pruned: int
    # new_index[old] for the input scene's Gaussians (-1 when split or pruned)
    new_index: np.ndarray
    # (parent old index, child new index or -1 if pruned)
    children: list = field(default_factory=list)


def _check_maps(scene, instance_maps):
    if len(instance_maps) != scene.n_views:
        raise RefineError(f"{len(instance_maps)} instance maps for {scene.n_views} views")
    for v, m in zip(scene.views, instance_maps):
        shape = np.shape(getattr(m, "labels", m))
        if shape != v.shape:
            raise RefineError(f"view {v.view_index}: map {shape} vs image {v.shape}")


def density_control_round(scene: Scene, instance_maps, config: RefineConfig, rng,
                          options: RasterOptions | None = None,
                          trace_options: TraceOptions | None = None,
                          round_index=0) -> RoundResult:
    """Trace, split every ambiguous Gaussian, re-trace, then prune whatever is
    still ambiguous (children and original survivors alike)."""
    config.validate()
    _check_maps(scene, instance_maps)
    wm = trace_all(scene, instance_maps, options, trace_options)
    before = ambiguity_scores(wm, config.gamma, config.theta_as, round_index)
    n = len(scene)
    amb = np.flatnonzero(before.ambiguous)
    if amb.size == 0:
        return RoundResult(scene, before, before, 0, 0, np.arange(n))
    split, keep, rep = _split_all(scene, amb, rng, config.scale_divisor)
    wm2 = trace_all(split, instance_maps, options, trace_options)
    mid = ambiguity_scores(wm2, config.gamma, config.theta_as, round_index)
    survive = np.flatnonzero(~mid.ambiguous)
    out = split.subset(survive)
    pos = np.full(len(split), -1, np.int64)
    pos[survive] = np.arange(survive.size)
    new_index = np.full(n, -1, np.int64)
    new_index[keep] = pos[: keep.size]
    children = list(zip(rep.tolist(), pos[keep.size:].tolist()))
    after = ambiguity_scores(trace_all(out, instance_maps, options, trace_options),
                             config.gamma, config.theta_as, round_index)
    return RoundResult(out, before, after, int(amb.size), int(len(split) - survive.size),
                       new_index, children)


# ---------------------------------------------------------------------------
# appearance refit


def psnr_from_mse(mse):
    return math.inf if mse <= 0 else 10 * math.log10(1.0 / mse)


class _Photometric:
    """Cached geometry for every view; appearance is re-composited per call."""

    def __init__(self, scene: Scene, targets, options: RasterOptions, weight=1.0):
        if len(targets) != scene.n_views:
            raise RefineError(f"{len(targets)} targets for {scene.n_views} views")
        self.targets = []
        for v, t in zip(scene.views, targets):
            t = np.asarray(t, float)
            if t.shape != (v.height, v.width, 3):
                raise RefineError(f"view {v.view_index}: target {t.shape} vs {(v.height, v.width, 3)}")
            self.targets.append(t.reshape(-1, 3))
        self.options = options
        self.frags = [rasterize(scene, v, options) for v in scene.views]
        self.count = sum(t.size for t in self.targets)
        self.weight = weight

    def loss(self, colors, opacity):
        tot = 0.0
        for f, t in zip(self.frags, self.targets):
            r = f.composite(opacity, self.options).accumulate(colors) - t
            tot += float((r * r).sum())
        return self.weight * tot / self.count

    def grad(self, colors, opacity):
        n = len(opacity)
        gc, go = np.zeros((n, 3)), np.zeros(n)
        hc, ho = np.zeros(n), np.zeros(n)
        tot = 0.0
        s = 2.0 * self.weight / self.count
        for f, t in zip(self.frags, self.targets):
            comp = f.composite(opacity, self.options)
            r = comp.accumulate(colors) - t
            tot += float((r * r).sum())
            dv, do, gv, gn = comp.backward(colors, s * r, gauss_newton=True)
            gc += dv
            go += do
            hc += s * gv
            ho += s * gn
        return self.weight * tot / self.count, gc, go, hc, ho


def refine_appearance(scene: Scene, targets, iters, lr=1.0, options=None,
                      max_halvings=20, trace=None, weight=1.0) -> Scene:
    """Diagonally preconditioned gradient descent on the mean squared error over
    all views, updating colour and opacity only.  A step that raises the loss
    is retried at half the rate, so the loss never increases.  ``weight``
    scales the loss; the preconditioned step is invariant to it."""
    options = options or RasterOptions()
    if iters <= 0 or len(scene) == 0:
        return scene
    ph = _Photometric(scene, targets, options, weight)
    colors, opacity = scene.colors.copy(), scene.opacity.copy()
    loss = None
    for _ in range(iters):
        loss, gc, go, hc, ho = ph.grad(colors, opacity)
        if trace is not None:
            trace.append(loss)
        if loss == 0 or (not gc.any() and not go.any()):
            break
        pc = gc / (hc[:, None] + 1e-12 + 1e-6 * hc.mean())
        po = go / (ho + 1e-12 + 1e-6 * max(ho.mean(), 1e-12))
        step = lr
        for _h in range(max_halvings + 1):
            c2 = np.clip(colors - step * pc, 0.0, 1.0)
            o2 = np.clip(opacity - step * po, 0.0, 1.0)
            l2 = ph.loss(c2, o2)
            if l2 <= loss:
                colors, opacity = c2, o2
                break
            step /= 2
        else:
            break
    return scene.with_params(colors=colors, opacity=opacity)


def render_psnr(scene: Scene, targets, options=None) -> float:
    ph = _Photometric(scene, targets, options or RasterOptions())
    return psnr_from_mse(ph.loss(scene.colors, scene.opacity))


@dataclass
class RefineRun:
    scene: Scene
    rounds: list
    reports: list

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rounds)


def run_refinement(scene: Scene, instance_maps, config: RefineConfig, rng=None,
                   targets=None, options=None) -> RefineRun:
    """Alternate density control and ``period`` refit iterations.  Stops after
    ``max_rounds`` or as soon as a round finds nothing ambiguous."""
    config.validate()
    options = options or RasterOptions()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if targets is None:
        targets = [render(scene, v, options).color for v in scene.views]
    rounds, reports = [], []
    if config.max_rounds == 0:
        scene = refine_appearance(scene, targets, config.period, config.lr, options,
                                  config.max_halvings, weight=config.photometric_weight)
        return RefineRun(scene, rounds, reports)
    for r in range(config.max_rounds):
        res = density_control_round(scene, instance_maps, config, rng, options, round_index=r)
        reports.append((res.before, res.after))
        scene = res.scene
        if res.n_split:
            scene = refine_appearance(scene, targets, config.period, config.lr, options,
                                      config.max_halvings, weight=config.photometric_weight)
        rounds.append({
            "round": r,
            "n_gaussians": len(scene),
            "n_ambiguous": res.before.n_ambiguous,
            "n_ambiguous_after": res.after.n_ambiguous,
            "n_split": res.n_split,
            "n_pruned": res.n_pruned,
            "psnr": _json_float(render_psnr(scene, targets, options)),
        })
        if res.n_split == 0:
            break
    return RefineRun(scene, rounds, reports)


def _json_float(x):
    return "inf" if math.isinf(x) else round(float(x), 6)
