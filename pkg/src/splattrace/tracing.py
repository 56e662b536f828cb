"""Gaussian instance tracing: attribute labelled pixels back to the Gaussians
that rendered them.

For one view, every active fragment (pixel p, Gaussian i, weight w) adds w to
bucket (i, label(p)).  Per Gaussian the buckets are normalised into a
distribution over that view's patches.  Only one view's sparse rows are built
at a time; the dense N x T x L tensor never exists.

Weight-matrix dump (little-endian)::

    magic    b"GITW"
    u32      version (1)
    u32      N, L, flags (bit 0: mass block present)
    u32[L]   patch count per view
    u64      nnz
    nnz x    {u32 view, u32 gaussian, u32 patch, f64 prob}   sorted by (view, gaussian, patch)
    f64[L*N] per-view total mass, view-major (only if flags & 1)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .raster import Composite, RasterOptions, composite_view
from .scene import Scene

GITW_MAGIC = b"GITW"
GITW_VERSION = 1
NOT_VISIBLE = -1
_RECORD = np.dtype([("view", "<u4"), ("gaussian", "<u4"), ("patch", "<u4"), ("prob", "<f8")])


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceOptions:
    vis_eps: float = 1e-4
    trace_eps: float = 1e-4


def _labels(instance_map):
    """(labels array, patch count) from an InstanceMap or a plain label array."""
    labels = getattr(instance_map, "labels", instance_map)
    labels = np.asarray(labels)
    n = getattr(instance_map, "patch_count", None)
    if n is None:
        n = int(labels.max()) + 1 if labels.size else 1
    return labels, int(n)


@dataclass
class ViewWeightRows:
    """Sparse per-Gaussian patch distributions for one view (CSR by Gaussian)."""

    n_gaussians: int
    n_patches: int
    indptr: np.ndarray
    patch: np.ndarray
    prob: np.ndarray
    mass: np.ndarray
    n_traversed: int = 0
    _by_patch: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def visible(self):
        return np.diff(self.indptr) > 0

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def row(self, i):
        s = slice(self.indptr[i], self.indptr[i + 1])
        return dict(zip(self.patch[s].tolist(), self.prob[s].tolist()))

    def row_ids(self):
        return np.repeat(np.arange(self.n_gaussians), np.diff(self.indptr))

    def dense(self):
        """Dense (N, T) rows; for tests and small scenes only."""
        out = np.zeros((self.n_gaussians, self.n_patches))
        out[self.row_ids(), self.patch] = self.prob
        return out

    def to_sparse(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.prob, self.patch, self.indptr),
                             shape=(self.n_gaussians, self.n_patches))

    def argmax(self):
        """(best patch, its probability) per Gaussian; ties go to the smaller
        patch id, invisible rows give (NOT_VISIBLE, 0)."""
        best = np.full(self.n_gaussians, NOT_VISIBLE, np.int64)
        top = np.zeros(self.n_gaussians)
        vis = np.flatnonzero(self.visible)
        if vis.size == 0:
            return best, top
        top[vis] = np.maximum.reduceat(self.prob, self.indptr[vis])
        rows = self.row_ids()
        hit = np.flatnonzero(self.prob == top[rows])
        # patches ascend within a row, so the first hit per row is the smallest id
        first = hit[np.r_[True, rows[hit][1:] != rows[hit][:-1]]]
        best[rows[first]] = self.patch[first]
        return best, top

    def patch_members(self, patch_id, trace_eps):
        if not 0 <= patch_id < self.n_patches:
            raise TraceError(f"patch {patch_id} does not exist (view has {self.n_patches})")
        if self._by_patch is None:
            order = np.lexsort((self.row_ids(), self.patch))
            ptr = np.zeros(self.n_patches + 1, np.int64)
            np.cumsum(np.bincount(self.patch, minlength=self.n_patches), out=ptr[1:])
            self._by_patch = (ptr, self.row_ids()[order], self.prob[order])
        ptr, gid, prob = self._by_patch
        s = slice(ptr[patch_id], ptr[patch_id + 1])
        return gid[s][prob[s] > trace_eps]


def trace_view(scene: Scene, view, instance_map, options: RasterOptions | None = None,
               trace_options: TraceOptions | None = None,
               comp: Composite | None = None) -> ViewWeightRows:
    """Reverse-rasterise one labelled view into per-Gaussian patch distributions."""
    options = options or RasterOptions()
    trace_options = trace_options or TraceOptions()
    labels, n_patches = _labels(instance_map)
    if labels.shape != (view.height, view.width):
        raise TraceError(f"instance map has shape {labels.shape}, view is "
                         f"{(view.height, view.width)}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_patches):
        raise TraceError("instance map labels out of range")
    if comp is None:
        comp = composite_view(scene, view, options)
    f, act = comp.fragments, comp.active
    n = len(scene)
    gid = f.gaussian[act]
    w = comp.weight[act]
    lab = labels.ravel().astype(np.int64)[f.pixel[act]]
    # bincount adds in fragment order, the same order contributions are listed in
    mass = np.bincount(gid, weights=w, minlength=n)
    key = gid * n_patches + lab
    ukey, inv = np.unique(key, return_inverse=True)
    pm = np.bincount(inv, weights=w, minlength=ukey.size)
    rows = ukey // n_patches
    patch = ukey % n_patches
    visible = mass >= trace_options.vis_eps
    keep = visible[rows] & (pm > 0)
    rows, patch, pm = rows[keep], patch[keep], pm[keep]
    tot = np.bincount(rows, weights=pm, minlength=n)
    prob = pm / tot[rows]
    indptr = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return ViewWeightRows(n, n_patches, indptr, patch.astype(np.int64), prob, mass,
                          comp.n_traversed)


@dataclass
class WeightMatrix:
    """Per-view sparse rows plus the N x L argmax reduction."""

    views: list
    argmax_trace: np.ndarray
    max_prob: np.ndarray

    @property
    def n_gaussians(self):
        return self.argmax_trace.shape[0]

    @property
    def n_views(self):
        return len(self.views)

    @property
    def patch_counts(self):
        return [v.n_patches for v in self.views]

    def visibility(self):
        """(N, L) boolean table of non-empty rows."""
        if not self.views:
            return np.zeros((self.n_gaussians, 0), bool)
        return np.stack([v.visible for v in self.views], axis=1)

    @classmethod
    def from_views(cls, rows: list) -> "WeightMatrix":
        n = rows[0].n_gaussians if rows else 0
        am = np.full((n, len(rows)), NOT_VISIBLE, np.int64)
        mp = np.zeros((n, len(rows)))
        for l, r in enumerate(rows):
            am[:, l], mp[:, l] = r.argmax()
        return cls(list(rows), am, mp)

    @classmethod
    def from_dense(cls, dense_views, mass=None) -> "WeightMatrix":
        """Build from explicit (N, T_v) row tables; all-zero rows are invisible.
        Rows are stored as given (no renormalisation)."""
        rows = []
        for l, d in enumerate(dense_views):
            d = np.asarray(d, float)
            n, t = d.shape
            r, c = np.nonzero(d)
            indptr = np.zeros(n + 1, np.int64)
            np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
            m = d.sum(axis=1) if mass is None else np.asarray(mass[l], float)
            rows.append(ViewWeightRows(n, t, indptr, c.astype(np.int64), d[r, c], m))
        return cls.from_views(rows)

    def equals(self, other):
        if self.n_views != other.n_views or self.n_gaussians != other.n_gaussians:
            return False
        for a, b in zip(self.views, other.views):
            if a.n_patches != b.n_patches:
                return False
            for x, y in ((a.indptr, b.indptr), (a.patch, b.patch), (a.prob, b.prob),
                         (a.mass, b.mass)):
                if not np.array_equal(x, y):
                    return False
        return np.array_equal(self.argmax_trace, other.argmax_trace)


def trace_all(scene: Scene, instance_maps, options: RasterOptions | None = None,
              trace_options: TraceOptions | None = None, composites=None) -> WeightMatrix:
    """Trace every training view in turn; only one view's buckets are live at once
    beyond the retained sparse rows."""
    if len(instance_maps) != scene.n_views:
        raise TraceError(f"need {scene.n_views} instance maps, got {len(instance_maps)}")
    rows = []
    for l, (view, imap) in enumerate(zip(scene.views, instance_maps)):
        comp = composites[l] if composites is not None else None
        try:
            rows.append(trace_view(scene, view, imap, options, trace_options, comp))
        except (TraceError, ValueError) as e:
            raise TraceError(f"view {l}: {e}") from e
    return WeightMatrix.from_views(rows)


def trace_patch_gaussians(wm: WeightMatrix, view: int, patch_id: int,
                          trace_eps: float = 1e-4) -> np.ndarray:
    """Sorted Gaussian ids whose probability on (view, patch) exceeds trace_eps."""
    if not 0 <= view < wm.n_views:
        raise TraceError(f"view {view} out of range")
    return wm.views[view].patch_members(patch_id, trace_eps)


def visible_views(wm: WeightMatrix, gaussian_index: int) -> set:
    if not 0 <= gaussian_index < wm.n_gaussians:
        raise TraceError(f"gaussian {gaussian_index} out of range")
    return {l for l, v in enumerate(wm.views) if v.indptr[gaussian_index + 1] > v.indptr[gaussian_index]}


# ---------------------------------------------------------------------------
# dump format


def dump_weight_matrix(wm: WeightMatrix, with_mass=True) -> bytes:
    n, L = wm.n_gaussians, wm.n_views
    recs = []
    for l, v in enumerate(wm.views):
        r = np.zeros(v.nnz, _RECORD)
        r["view"] = l
        r["gaussian"] = v.row_ids()
        r["patch"] = v.patch
        r["prob"] = v.prob
        recs.append(r)
    recs = np.concatenate(recs) if recs else np.zeros(0, _RECORD)
    head = GITW_MAGIC + struct.pack("<IIII", GITW_VERSION, n, L, 1 if with_mass else 0)
    head += struct.pack(f"<{L}I", *wm.patch_counts) + struct.pack("<Q", recs.size)
    body = recs.tobytes()
    if with_mass:
        body += np.concatenate([v.mass for v in wm.views] or [np.zeros(0)]).astype("<f8").tobytes()
    return head + body


def load_weight_matrix(data: bytes) -> WeightMatrix:
    if data[:4] != GITW_MAGIC:
        raise TraceError("bad weight-matrix magic")
    try:
        version, n, L, flags = struct.unpack_from("<IIII", data, 4)
        if version != GITW_VERSION:
            raise TraceError(f"unsupported weight-matrix version {version}")
        off = 20
        counts = struct.unpack_from(f"<{L}I", data, off)
        off += 4 * L
        (nnz,) = struct.unpack_from("<Q", data, off)
        off += 8
    except struct.error as e:
        raise TraceError(f"truncated weight-matrix header: {e}") from e
    end = off + nnz * _RECORD.itemsize
    if len(data) < end:
        raise TraceError(f"truncated weight-matrix records at offset {len(data)}")
    recs = np.frombuffer(data[off:end], _RECORD)
    mass = None
    if flags & 1:
        block = data[end:end + 8 * L * n]
        if len(block) != 8 * L * n:
            raise TraceError("truncated weight-matrix mass block")
        mass = np.frombuffer(block, "<f8")
        mass = mass.reshape(L, n)
    rows = []
    for l in range(L):
        r = recs[recs["view"] == l]
        gid = r["gaussian"].astype(np.int64)
        if gid.size and (gid.max() >= n or r["patch"].max() >= counts[l]):
            raise TraceError(f"view {l}: record index out of range")
        indptr = np.zeros(n + 1, np.int64)
        np.cumsum(np.bincount(gid, minlength=n), out=indptr[1:])
        m = mass[l].copy() if mass is not None else np.zeros(n)
        rows.append(ViewWeightRows(n, counts[l], indptr, r["patch"].astype(np.int64),
                                   r["prob"].astype(float), m))
    return WeightMatrix.from_views(rows)
