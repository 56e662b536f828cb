"""Scene types, synthetic scene generation and scene files.

A scene is stored struct-of-arrays: every per-Gaussian attribute lives in one
numpy array indexed by Gaussian id.  ``GaussianDisk`` is the per-primitive view
used at API boundaries (splitting, construction by hand).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

SCENE_MAGIC = "splattrace-scene"
SCENE_VERSION = 1
NO_LABEL = -1
ORTHO_TOL = 1e-9

# Distinct, saturated object colours; cycled when K exceeds the palette.
PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.70, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.75, 0.30, 0.85],
        [0.15, 0.80, 0.85],
        [0.95, 0.55, 0.15],
        [0.55, 0.55, 0.55],
    ]
)


class SceneError(ValueError):
    """Invalid scene content or specification."""


class SceneFormatError(SceneError):
    """A scene file could not be parsed.

    Attributes:
        path: JSON path of the offending field, if known.
        offset: byte offset into the stream, if known.
    """

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianDisk:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float
    color: np.ndarray
    feature: np.ndarray
    gt_instance: int | None = None

    def __post_init__(self):
        for name in ("center", "tangent_u", "tangent_v", "color", "feature"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        _check_frame(self.tangent_u[None], self.tangent_v[None], "gaussian")
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise SceneError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise SceneError("opacity must lie in [0, 1]")

    @property
    def normal(self):
        return np.cross(self.tangent_u, self.tangent_v)


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera.  World point X maps to camera ``rotation @ X + translation``;
    the camera looks down +z, image x to the right and image y down.  Pixel
    (row, col) is centred at image coordinates (x=col, y=row)."""

    view_index: int
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise SceneError("camera rotation must be 3x3 and translation a 3-vector")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > ORTHO_TOL:
            raise SceneError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise SceneError("image size must be at least 1x1")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def origin(self):
        return -self.rotation.T @ self.translation

    def pixel_directions(self, xs, ys):
        """World-space ray directions (unnormalised, camera-z component 1)."""
        dx = (np.asarray(xs, float) - self.cx) / self.fx
        dy = (np.asarray(ys, float) - self.cy) / self.fy
        r = self.rotation
        # elementwise on purpose: BLAS rounding may depend on array length
        return dx[..., None] * r[0] + dy[..., None] * r[1] + r[2]

    def project(self, points):
        """Project world points; returns (xy pixel coords, camera depth)."""
        pc = np.asarray(points, float) @ self.rotation.T + self.translation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * pc[..., 0] / z + self.cx
            y = self.fy * pc[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def same_as(self, other):
        return (
            self.view_index == other.view_index
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation for a camera at ``eye``."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    # re-orthonormalise so the 1e-9 invariant holds after round-off
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return rot, -rot @ eye


def _check_frame(tu, tv, where):
    nu = np.linalg.norm(tu, axis=-1)
    nv = np.linalg.norm(tv, axis=-1)
    dot = np.einsum("ij,ij->i", tu, tv)
    bad = np.flatnonzero(
        (np.abs(nu - 1) > ORTHO_TOL) | (np.abs(nv - 1) > ORTHO_TOL) | (np.abs(dot) > ORTHO_TOL)
    )
    if bad.size:
        raise SceneError(f"{where}[{bad[0]}]: tangents are not orthonormal")


@dataclass(frozen=True, eq=False)
class Scene:
    centers: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    gt_instance: np.ndarray
    views: tuple = ()
    holdout_views: tuple = ()
    feature_dim: int = 16

    def __post_init__(self):
        n = len(self.centers)
        object.__setattr__(self, "centers", _frozen(self.centers).reshape(n, 3))
        object.__setattr__(self, "tangent_u", _frozen(self.tangent_u).reshape(n, 3))
        object.__setattr__(self, "tangent_v", _frozen(self.tangent_v).reshape(n, 3))
        object.__setattr__(self, "scales", _frozen(self.scales).reshape(n, 2))
        object.__setattr__(self, "opacity", _frozen(self.opacity).reshape(n))
        object.__setattr__(self, "colors", _frozen(self.colors).reshape(n, 3))
        object.__setattr__(
            self, "features", _frozen(self.features).reshape(n, self.feature_dim)
        )
        object.__setattr__(self, "gt_instance", _frozen(self.gt_instance, np.int64).reshape(n))
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "holdout_views", tuple(self.holdout_views))
        _check_frame(self.tangent_u, self.tangent_v, "gaussians")
        if n and self.scales.min() <= 0:
            raise SceneError("scales must be positive")
        if n and (self.opacity.min() < 0 or self.opacity.max() > 1):
            raise SceneError("opacity must lie in [0, 1]")

    def __len__(self):
        return len(self.centers)

    @property
    def n_views(self):
        return len(self.views)

    @property
    def normals(self):
        return np.cross(self.tangent_u, self.tangent_v)

    def has_view(self, view):
        return any(v.same_as(view) for v in self.views + self.holdout_views)

    def gaussian(self, i) -> GaussianDisk:
        g = int(self.gt_instance[i])
        return GaussianDisk(
            center=self.centers[i],
            tangent_u=self.tangent_u[i],
            tangent_v=self.tangent_v[i],
            scale_u=float(self.scales[i, 0]),
            scale_v=float(self.scales[i, 1]),
            opacity=float(self.opacity[i]),
            color=self.colors[i],
            feature=self.features[i],
            gt_instance=None if g == NO_LABEL else g,
        )

    def with_params(self, **kw):
        return replace(self, **kw)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            centers=self.centers[idx],
            tangent_u=self.tangent_u[idx],
            tangent_v=self.tangent_v[idx],
            scales=self.scales[idx],
            opacity=self.opacity[idx],
            colors=self.colors[idx],
            features=self.features[idx],
            gt_instance=self.gt_instance[idx],
        )

    @classmethod
    def from_disks(cls, disks: Sequence[GaussianDisk], views=(), holdout_views=(), feature_dim=None):
        disks = list(disks)
        if feature_dim is None:
            feature_dim = len(disks[0].feature) if disks else 16
        if any(len(d.feature) != feature_dim for d in disks):
            raise SceneError("all features must have length feature_dim")
        if not disks:
            return cls.empty(views, feature_dim, holdout_views)
        return cls(
            centers=[d.center for d in disks],
            tangent_u=[d.tangent_u for d in disks],
            tangent_v=[d.tangent_v for d in disks],
            scales=[[d.scale_u, d.scale_v] for d in disks],
            opacity=[d.opacity for d in disks],
            colors=[d.color for d in disks],
            features=[d.feature for d in disks],
            gt_instance=[NO_LABEL if d.gt_instance is None else d.gt_instance for d in disks],
            views=views,
            holdout_views=holdout_views,
            feature_dim=feature_dim,
        )

    @classmethod
    def empty(cls, views=(), feature_dim=16, holdout_views=()):
        z3 = np.zeros((0, 3))
        return cls(z3, z3, z3, np.zeros((0, 2)), np.zeros(0), z3,
                   np.zeros((0, feature_dim)), np.zeros(0, np.int64),
                   views, holdout_views, feature_dim)

    def equals(self, other):
        if not isinstance(other, Scene) or self.feature_dim != other.feature_dim:
            return False
        arrays = ("centers", "tangent_u", "tangent_v", "scales", "opacity",
                  "colors", "features", "gt_instance")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        for mine, theirs in ((self.views, other.views), (self.holdout_views, other.holdout_views)):
            if len(mine) != len(theirs) or not all(a.same_as(b) for a, b in zip(mine, theirs)):
                return False
        return True

    __eq__ = equals
    __hash__ = None


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class PanelSpec:
    """An axis-aligned rectangle of disks.  ``normal_axis`` names the world axis
    the panel faces; ``size`` is its extent along the two remaining axes in
    (x, y, z) order."""

    center: tuple
    size: tuple
    normal_axis: str = "z"
    color: tuple | None = None
    opacity: float | None = None


@dataclass(frozen=True)
class SceneSpec:
    n_objects: int = 4
    panels: tuple | None = None
    disks_per_side: int = 24
    background: bool = False
    seed: int = 0
    center_jitter: float = 0.1
    scale_jitter: float = 0.05
    opacity_jitter: float = 0.03
    color_jitter: float = 0.02
    opacity: float = 0.9
    scale_ratio: float = 0.5
    feature_dim: int = 16
    feature_init_scale: float = 1e-3
    n_views: int = 8
    n_holdout_views: int = 4
    image_size: tuple = (64, 64)
    elevation_deg: float = 55.0
    distance: float = 4.0
    fill: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.panels is not None:
            object.__setattr__(
                self, "panels",
                tuple(p if isinstance(p, PanelSpec) else PanelSpec(**p) for p in self.panels),
            )

    def validate(self):
        if self.n_objects < 1:
            raise SceneError("n_objects must be >= 1")
        if self.disks_per_side < 1:
            raise SceneError("disks_per_side must be >= 1")
        if self.panels is not None and len(self.panels) != self.n_objects:
            raise SceneError("need exactly one panel per object")
        if self.n_views < 1 or self.feature_dim < 1:
            raise SceneError("n_views and feature_dim must be positive")
        if not 0 < self.scale_ratio:
            raise SceneError("scale_ratio must be positive")


_AXES = {"x": (1, 2, 0), "y": (0, 2, 1), "z": (0, 1, 2)}


def _default_panels(k):
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    panels = []
    for j in range(k):
        r, c = divmod(j, cols)
        x = (c - (cols - 1) / 2) * 1.0
        y = (r - (rows - 1) / 2) * 1.0
        panels.append(PanelSpec(center=(x, y, 0.04 * (j % 2)), size=(0.8, 0.8)))
    return panels


def _tessellate(panel: PanelSpec, n_side, spec: SceneSpec, rng):
    a_ax, b_ax, n_ax = _AXES[panel.normal_axis]
    a, b = panel.size
    h = max(a, b) / n_side
    na, nb = max(1, round(a / h)), max(1, round(b / h))
    ga = (np.arange(na) + 0.5) * (a / na) - a / 2
    gb = (np.arange(nb) + 0.5) * (b / nb) - b / 2
    A, B = np.meshgrid(ga, gb, indexing="ij")
    m = A.size
    centers = np.tile(np.asarray(panel.center, float), (m, 1))
    jit = spec.center_jitter * h
    centers[:, a_ax] += A.ravel() + rng.uniform(-jit, jit, m)
    centers[:, b_ax] += B.ravel() + rng.uniform(-jit, jit, m)
    # tiny normal offset so coplanar disks never tie in depth
    centers[:, n_ax] += rng.uniform(-1e-3, 1e-3, m) * h
    tu = np.zeros((m, 3))
    tv = np.zeros((m, 3))
    tu[:, a_ax] = 1.0
    tv[:, b_ax] = 1.0
    s = spec.scale_ratio * h * (1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter, (m, 2)))
    return centers, tu, tv, s


def _ring_views(spec, target, extent, n, phase, first_index):
    w, hgt = spec.image_size
    elev = math.radians(spec.elevation_deg)
    focal = spec.fill * 0.5 * min(w, hgt) * spec.distance / extent
    views = []
    for j in range(n):
        phi = 2 * math.pi * (j + phase) / n
        eye = np.asarray(target) + spec.distance * np.array(
            [math.cos(elev) * math.cos(phi), math.cos(elev) * math.sin(phi), math.sin(elev)]
        )
        rot, t = look_at(eye, target)
        views.append(CameraView(first_index + j, rot, t, focal, focal,
                                (w - 1) / 2, (hgt - 1) / 2, w, hgt))
    return views


def generate_scene(spec: SceneSpec) -> Scene:
    """Build a labelled panel scene and a ring of cameras around it.

    Every Gaussian carries the 1-based id of the panel it was tessellated from;
    the optional background panel gets id ``n_objects + 1``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    panels = list(spec.panels) if spec.panels is not None else _default_panels(spec.n_objects)
    if spec.background:
        cs = np.array([p.center for p in panels], float)
        lo, hi = cs.min(0), cs.max(0)
        size = tuple(float(v) for v in (hi - lo)[:2] + 1.6)
        panels.append(PanelSpec(center=((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2] - 0.3),
                                size=size, color=(0.5, 0.45, 0.4)))
    parts = []
    for k, panel in enumerate(panels):
        c, tu, tv, s = _tessellate(panel, spec.disks_per_side, spec, rng)
        m = len(c)
        base_op = spec.opacity if panel.opacity is None else panel.opacity
        op = np.clip(base_op + rng.uniform(-spec.opacity_jitter, spec.opacity_jitter, m), 0.0, 1.0)
        base_col = PALETTE[k % len(PALETTE)] if panel.color is None else np.asarray(panel.color)
        col = np.clip(base_col + rng.uniform(-spec.color_jitter, spec.color_jitter, (m, 3)), 0, 1)
        feat = rng.normal(0.0, spec.feature_init_scale, (m, spec.feature_dim))
        parts.append((c, tu, tv, s, op, col, feat, np.full(m, k + 1)))
    cat = [np.concatenate(x) for x in zip(*parts)]

    cs = np.array([p.center for p in panels[: spec.n_objects]], float)
    target = cs.mean(0)
    half = np.array([max(p.size) for p in panels[: spec.n_objects]]) / 2
    extent = float(np.max(np.linalg.norm(cs[:, :2] - target[:2], axis=1) + half * math.sqrt(2)))
    views = _ring_views(spec, target, extent, spec.n_views, 0.0, 0)
    holdout = _ring_views(spec, target, extent, spec.n_holdout_views, 0.5, spec.n_views)
    return Scene(*cat, views=views, holdout_views=holdout, feature_dim=spec.feature_dim)


# ---------------------------------------------------------------------------
# scene files


def _f(x):
    return repr(float(x))


def _fs(a):
    return [_f(x) for x in np.ravel(a)]


def _view_to_json(v: CameraView):
    return {
        "view_index": v.view_index,
        "rotation": _fs(v.rotation),
        "translation": _fs(v.translation),
        "fx": _f(v.fx), "fy": _f(v.fy), "cx": _f(v.cx), "cy": _f(v.cy),
        "width": v.width, "height": v.height,
    }


def scene_to_json(scene: Scene) -> dict:
    gs = []
    for i in range(len(scene)):
        g = int(scene.gt_instance[i])
        gs.append({
            "center": _fs(scene.centers[i]),
            "tangent_u": _fs(scene.tangent_u[i]),
            "tangent_v": _fs(scene.tangent_v[i]),
            "scale_u": _f(scene.scales[i, 0]),
            "scale_v": _f(scene.scales[i, 1]),
            "opacity": _f(scene.opacity[i]),
            "color": _fs(scene.colors[i]),
            "feature": _fs(scene.features[i]),
            "gt_instance": None if g == NO_LABEL else g,
        })
    return {
        "magic": SCENE_MAGIC,
        "version": SCENE_VERSION,
        "feature_dim": scene.feature_dim,
        "gaussians": gs,
        "views": [_view_to_json(v) for v in scene.views],
        "holdout_views": [_view_to_json(v) for v in scene.holdout_views],
    }


def save_scene(scene: Scene) -> bytes:
    doc = scene_to_json(scene)
    return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("utf-8")


def _num(doc, key, path, n=None):
    try:
        raw = doc[key]
    except (KeyError, TypeError):
        raise SceneFormatError(f"{path}.{key}: missing", path=f"{path}.{key}") from None
    try:
        if n is None:
            return float(raw)
        vals = [float(x) for x in raw]
    except (TypeError, ValueError):
        raise SceneFormatError(f"{path}.{key}: not numeric", path=f"{path}.{key}") from None
    if len(vals) != n:
        raise SceneFormatError(f"{path}.{key}: expected {n} values", path=f"{path}.{key}")
    return np.array(vals)


def _view_from_json(d, path):
    try:
        return CameraView(
            view_index=int(d["view_index"]),
            rotation=_num(d, "rotation", path, 9).reshape(3, 3),
            translation=_num(d, "translation", path, 3),
            fx=_num(d, "fx", path), fy=_num(d, "fy", path),
            cx=_num(d, "cx", path), cy=_num(d, "cy", path),
            width=int(d["width"]), height=int(d["height"]),
        )
    except SceneFormatError:
        raise
    except (KeyError, TypeError, SceneError) as e:
        raise SceneFormatError(f"{path}: {e}", path=path) from None


def load_scene(data: bytes | str) -> Scene:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SceneFormatError(f"invalid UTF-8 at byte {e.start}", offset=e.start) from None
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"malformed scene file at offset {e.pos}: {e.msg}", offset=e.pos) from None
    if not isinstance(doc, dict) or doc.get("magic") != SCENE_MAGIC:
        raise SceneFormatError("not a scene file (bad magic)", path="$.magic")
    if doc.get("version") != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {doc.get('version')!r}", path="$.version")
    d = doc.get("feature_dim")
    if not isinstance(d, int) or d < 1:
        raise SceneFormatError("feature_dim must be a positive integer", path="$.feature_dim")
    disks = []
    for i, g in enumerate(doc.get("gaussians", [])):
        p = f"$.gaussians[{i}]"
        tu, tv = _num(g, "tangent_u", p, 3), _num(g, "tangent_v", p, 3)
        if (abs(np.linalg.norm(tu) - 1) > ORTHO_TOL or abs(np.linalg.norm(tv) - 1) > ORTHO_TOL
                or abs(tu @ tv) > ORTHO_TOL):
            raise SceneFormatError(f"{p}: tangents are not orthonormal", path=f"{p}.tangent_u")
        su, sv = _num(g, "scale_u", p), _num(g, "scale_v", p)
        if su <= 0:
            raise SceneFormatError(f"{p}.scale_u: must be positive", path=f"{p}.scale_u")
        if sv <= 0:
            raise SceneFormatError(f"{p}.scale_v: must be positive", path=f"{p}.scale_v")
        op = _num(g, "opacity", p)
        if not 0 <= op <= 1:
            raise SceneFormatError(f"{p}.opacity: outside [0, 1]", path=f"{p}.opacity")
        gt = g.get("gt_instance")
        disks.append(GaussianDisk(
            center=_num(g, "center", p, 3), tangent_u=tu, tangent_v=tv,
            scale_u=su, scale_v=sv, opacity=op,
            color=_num(g, "color", p, 3), feature=_num(g, "feature", p, d),
            gt_instance=None if gt is None else int(gt),
        ))
    views = [_view_from_json(v, f"$.views[{j}]") for j, v in enumerate(doc.get("views", []))]
    hold = [_view_from_json(v, f"$.holdout_views[{j}]")
            for j, v in enumerate(doc.get("holdout_views", []))]
    if not disks:
        return Scene.empty(views, d, hold)
    return Scene.from_disks(disks, views, hold, d)


def write_scene(path, scene: Scene):
    with open(path, "wb") as fh:
        fh.write(save_scene(scene))


def read_scene(path) -> Scene:
    with open(path, "rb") as fh:
        return load_scene(fh.read())


def spec_from_dict(d: dict) -> SceneSpec:
    known = set(SceneSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise SceneError(f"unknown scene spec fields: {sorted(unknown)}")
    return SceneSpec(**d)


def concat_scenes(scenes: Iterable[Scene]) -> Scene:
    scenes = list(scenes)
    first = scenes[0]
    cat = {
        a: np.concatenate([getattr(s, a) for s in scenes])
        for a in ("centers", "tangent_u", "tangent_v", "scales", "opacity",
                  "colors", "features", "gt_instance")
    }
    return replace(first, **cat)


def straddle_scene(seed=0, image_size=(48, 48), n_views=4, straddler_scale=0.15,
                   straddler_opacity=0.7):
    """Two abutting panels that fill every view, plus one unlabelled disk lying
    across their shared edge.

    Returns (clean scene, scene with the straddler appended last).  Instance
    maps should come from the clean scene, which makes the straddler the only
    Gaussian split between two patches.
    """
    spec = SceneSpec(n_objects=2, disks_per_side=40, seed=seed, scale_ratio=0.4,
                     panels=(PanelSpec((-1.0, 0.0, 0.0), (2.0, 4.0)),
                             PanelSpec((1.0, 0.0, 0.0), (2.0, 4.0))),
                     n_views=1, n_holdout_views=0, image_size=image_size)
    base = generate_scene(spec)
    w, h = image_size
    focal = 0.5 * min(w, h) * 2.5 / 0.8
    views = []
    for j in range(n_views):
        phi = 2 * math.pi * (j + 0.125) / n_views
        eye = np.array([0.3 * math.cos(phi), 0.3 * math.sin(phi), 2.5])
        rot, t = look_at(eye, (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
        views.append(CameraView(j, rot, t, focal, focal, (w - 1) / 2, (h - 1) / 2, w, h))
    clean = replace(base, views=tuple(views), holdout_views=())
    rng = np.random.default_rng([seed, 1])
    disk = GaussianDisk(
        center=(0.0, 0.0, 0.02), tangent_u=(1.0, 0.0, 0.0), tangent_v=(0.0, 1.0, 0.0),
        scale_u=straddler_scale, scale_v=straddler_scale, opacity=straddler_opacity,
        color=(0.9, 0.9, 0.9), feature=rng.normal(0.0, 1e-3, spec.feature_dim),
        gt_instance=None,
    )
    one = Scene.from_disks([disk], views=clean.views, feature_dim=spec.feature_dim)
    return clean, concat_scenes([clean, one])
