"""Binary masks, disjoint-patch instance maps, a multi-view inconsistency
injector and instance-map IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imageio


class InstanceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masks and patches


@dataclass
class BinaryMaskSet:
    """Masks of one view, shape (m, H, W).  ``contains`` lists (j, k) pairs with
    mask j covering mask k; None means no hierarchy is known."""

    masks: np.ndarray
    contains: list | None = None
    sources: list | None = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks, bool)
        if self.masks.ndim != 3:
            raise InstanceError("masks must be an (m, H, W) stack")
        empty = np.flatnonzero(~self.masks.reshape(len(self.masks), -1).any(axis=1))
        if empty.size:
            raise InstanceError(f"mask {empty[0]} is empty")
        if self.contains is not None:
            self.contains = sorted({(int(j), int(k)) for j, k in self.contains})
            _check_dag(len(self.masks), self.contains)

    @property
    def shape(self):
        return self.masks.shape[1:]

    def __len__(self):
        return len(self.masks)

    def coarse(self):
        """Masks not covered by any other mask."""
        inner = {k for _, k in self.contains or ()}
        return [j for j in range(len(self)) if j not in inner]

    @classmethod
    def with_hierarchy(cls, masks, tol=0.02, sources=None):
        m = cls(masks, None, sources)
        m.contains = infer_hierarchy(m.masks, tol)
        return m


def _check_dag(m, edges):
    adj = [[] for _ in range(m)]
    for j, k in edges:
        if not (0 <= j < m and 0 <= k < m) or j == k:
            raise InstanceError(f"bad hierarchy edge {(j, k)}")
        adj[j].append(k)
    state = [0] * m
    for s in range(m):
        stack = [(s, iter(adj[s]))]
        if state[s]:
            continue
        state[s] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                raise InstanceError("hierarchy has a cycle")
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(adj[nxt])))


def infer_hierarchy(masks, tol=0.02):
    """(j, k) for every larger mask j holding all but ``tol`` of mask k."""
    masks = np.asarray(masks, bool)
    flat = masks.reshape(len(masks), -1).astype(np.int64)
    size = flat.sum(axis=1)
    inter = flat @ flat.T
    out = []
    for j in range(len(masks)):
        for k in range(len(masks)):
            if j != k and size[j] > size[k] and size[k] - inter[j, k] <= tol * size[k]:
                out.append((j, k))
    return out


@dataclass
class InstanceMap:
    """Per-pixel patch ids; 0 is unlabelled.  ``signatures[t]`` is the set of
    mask indices covering patch t."""

    labels: np.ndarray
    patch_count: int
    pixel_counts: np.ndarray = field(default=None)
    signatures: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.int32)
        if self.pixel_counts is None:
            self.pixel_counts = np.bincount(self.labels.ravel(), minlength=self.patch_count)

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, np.int32)
        n = int(labels.max()) + 1 if labels.size else 1
        return cls(labels, max(n, 1))

    def to_pgm(self) -> bytes:
        return imageio.encode_pgm16(self.labels)


def overlap_masks(mask_set: BinaryMaskSet, shape=None) -> InstanceMap:
    """One patch per distinct covering-mask signature, ids in row-major
    first-occurrence order; uncovered pixels are 0."""
    masks = mask_set.masks
    if shape is not None and tuple(masks.shape[1:]) != tuple(shape):
        raise InstanceError(f"masks are {masks.shape[1:]}, view is {tuple(shape)}")
    m, H, W = masks.shape
    if m == 0:
        return InstanceMap(np.zeros((H, W), np.int32), 1, signatures=[frozenset()])
    bits = np.packbits(masks.reshape(m, -1), axis=0).T  # (P, ceil(m/8))
    keys = np.ascontiguousarray(bits).view(np.dtype((np.void, bits.shape[1]))).ravel()
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    covered = bits.any(axis=1)
    order = np.argsort(first, kind="stable")
    ids = np.zeros(len(first), np.int64)
    nxt = 1
    sigs = [frozenset()]
    for u in order:
        p = first[u]
        if covered[p]:
            ids[u] = nxt
            nxt += 1
            sigs.append(frozenset(np.flatnonzero(masks[:, p // W, p % W]).tolist()))
    labels = ids[inv.ravel()].reshape(H, W)
    return InstanceMap(labels, nxt, signatures=sigs)


def masks_from_labels(labels) -> dict:
    """{id: bool mask} for every id >= 1 present, ascending."""
    labels = np.asarray(labels)
    return {int(k): labels == k for k in np.unique(labels) if k > 0}


# ---------------------------------------------------------------------------
# injector


@dataclass
class InjectorParams:
    """Per-view corruption controls.  Probabilities may be scalars or per-view
    lists.  ``split_objects`` / ``merge_pairs`` force events: they map a view
    index to object ids (or id pairs) and bypass the random draws for that view."""

    split_prob: float | list = 0.0
    merge_prob: float | list = 0.0
    boundary_radius: int = 0
    seed: int = 0
    split_objects: dict | None = None
    merge_pairs: dict | None = None
    adjacency_px: float = 24.0
    coarse_masks: bool = False

    def validate(self, n_views=None):
        for name in ("split_prob", "merge_prob"):
            p = np.atleast_1d(np.asarray(getattr(self, name), float))
            if p.size == 0 or (p < 0).any() or (p > 1).any():
                raise InstanceError(f"{name} must lie in [0, 1]")
            if n_views is not None and p.size not in (1, n_views):
                raise InstanceError(f"{name} needs 1 or {n_views} entries")
        if self.boundary_radius < 0:
            raise InstanceError("boundary_radius must be >= 0")

    def prob(self, name, view):
        p = np.atleast_1d(np.asarray(getattr(self, name), float))
        return float(p[0] if p.size == 1 else p[view])


def _disk(r):
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def _split(mask):
    rows, cols = np.nonzero(mask)
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    a = np.zeros_like(mask)
    if c1 - c0 >= r1 - r0:
        cut = (c0 + c1 + 1) // 2
        a[:, :cut] = mask[:, :cut]
    else:
        cut = (r0 + r1 + 1) // 2
        a[:cut] = mask[:cut]
    b = mask & ~a
    return [x for x in (a, b) if x.any()]


def _adjacent(a, b, px):
    dist = ndimage.distance_transform_edt(~a)
    return bool(dist[b].min() <= px)


def _lookup(table, view):
    if not table:
        return None
    return table.get(view, table.get(str(view)))


def inject_inconsistency(gt_masks_per_view, params: InjectorParams) -> list:
    """Corrupt per-view object masks the way an inconsistent 2D segmenter would.

    ``gt_masks_per_view`` is a list (one per view) of {object id: mask}.  Views
    draw from independent seeded streams, in the order merge, split (ascending
    object id), boundary noise (output order).
    """
    params.validate(len(gt_masks_per_view))
    out = []
    for view, objs in enumerate(gt_masks_per_view):
        rng = np.random.default_rng([params.seed, view])
        ids = sorted(objs)
        groups = [[k] for k in ids]
        forced_merge = _lookup(params.merge_pairs, view)
        if forced_merge is not None:
            pairs = [tuple(p) for p in forced_merge]
        else:
            pairs = []
            if ids and rng.random() < params.prob("merge_prob", view):
                cand = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]
                        if _adjacent(objs[a], objs[b], params.adjacency_px)]
                if cand:
                    pairs = [cand[rng.integers(len(cand))]]
        for a, b in pairs:
            ga = next(g for g in groups if a in g)
            gb = next(g for g in groups if b in g)
            if ga is not gb:
                ga.extend(gb)
                groups.remove(gb)
        forced_split = _lookup(params.split_objects, view)
        masks, sources, coarse = [], [], []
        for g in groups:
            m = np.logical_or.reduce([objs[k] for k in g])
            if len(g) == 1:
                if forced_split is not None:
                    do_split = g[0] in forced_split
                else:
                    do_split = rng.random() < params.prob("split_prob", view)
                if do_split:
                    parts = _split(m)
                    if len(parts) == 2:
                        if params.coarse_masks:
                            coarse.append((m, tuple(g)))
                        masks.extend(parts)
                        sources.extend([tuple(g), tuple(g)])
                        continue
            masks.append(m)
            sources.append(tuple(g))
        for m, src in coarse:
            masks.append(m)
            sources.append(src)
        if params.boundary_radius > 0:
            se = _disk(params.boundary_radius)
            noisy = []
            for m in masks:
                if rng.random() < 0.5:
                    n = ndimage.binary_dilation(m, se)
                else:
                    n = ndimage.binary_erosion(m, se)
                noisy.append(n if n.any() else m)
            masks = noisy
        shape = next(iter(objs.values())).shape if objs else (0, 0)
        stack = np.array(masks, bool) if masks else np.zeros((0,) + shape, bool)
        if params.coarse_masks:
            out.append(BinaryMaskSet.with_hierarchy(stack, sources=sources))
        else:
            out.append(BinaryMaskSet(stack, None, sources))
    return out


# ---------------------------------------------------------------------------
# IoU


def _contingency(pred, gt):
    pred = np.asarray(pred, np.int64).ravel()
    gt = np.asarray(gt, np.int64).ravel()
    np_, ng = int(pred.max()) + 1, int(gt.max()) + 1
    table = np.bincount(pred * ng + gt, minlength=np_ * ng).reshape(np_, ng)
    return table


def _greedy(inter):
    """Greedy one-to-one matching on descending intersection; id 0 excluded."""
    p, g = np.nonzero(inter)
    keep = (p > 0) & (g > 0)
    p, g = p[keep], g[keep]
    order = np.lexsort((p, g, -inter[p, g]))
    used_p, match = set(), {}
    for j in order:
        if g[j] not in match and p[j] not in used_p:
            match[int(g[j])] = int(p[j])
            used_p.add(p[j])
    return match


@dataclass
class IoUResult:
    per_instance: dict
    accuracy: dict
    matching: dict

    @property
    def miou(self):
        return float(np.mean(list(self.per_instance.values()))) if self.per_instance else 0.0

    @property
    def macc(self):
        return float(np.mean(list(self.accuracy.values()))) if self.accuracy else 0.0


def map_iou(pred, gt) -> IoUResult:
    """Per-GT-instance IoU under greedy matching; unmatched GT instances score 0.
    A GT map with no instances and a prediction with none is a perfect 1.0."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InstanceError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    inter = _contingency(pred, gt)
    ps, gs = inter.sum(axis=1), inter.sum(axis=0)
    match = _greedy(inter)
    ious, accs = {}, {}
    for k in range(1, inter.shape[1]):
        if gs[k] == 0:
            continue
        j = match.get(k)
        if j is None:
            ious[k] = accs[k] = 0.0
            continue
        i = inter[j, k]
        ious[k] = float(i / (ps[j] + gs[k] - i))
        accs[k] = float(i / gs[k])
    if not ious:
        perfect = not (pred > 0).any()
        return IoUResult({0: float(perfect)}, {0: float(perfect)}, match)
    return IoUResult(ious, accs, match)


def multiview_miou(pred_maps, gt_maps):
    """mIoU with one ID matching shared by all views: predicted ids must be
    consistent across views to score.  Returns (mean, per-view means, matching)."""
    if len(pred_maps) != len(gt_maps):
        raise InstanceError("need one prediction per GT map")
    ng = max(int(np.max(g)) for g in gt_maps) + 1
    npd = max(int(np.max(p)) for p in pred_maps) + 1
    total = np.zeros((npd, ng), np.int64)
    tables = []
    for p, g in zip(pred_maps, gt_maps):
        if np.shape(p) != np.shape(g):
            raise InstanceError("map shapes differ")
        t = np.bincount(np.asarray(p, np.int64).ravel() * ng + np.asarray(g, np.int64).ravel(),
                        minlength=npd * ng).reshape(npd, ng)
        tables.append(t)
        total += t
    match = _greedy(total)
    per_view, all_iou = [], []
    for t in tables:
        ps, gs = t.sum(axis=1), t.sum(axis=0)
        vals = []
        for k in range(1, ng):
            if gs[k] == 0:
                continue
            j = match.get(k)
            if j is None:
                vals.append(0.0)
                continue
            i = t[j, k]
            vals.append(float(i / (ps[j] + gs[k] - i)))
        per_view.append(float(np.mean(vals)) if vals else 1.0)
        all_iou.extend(vals)
    return float(np.mean(all_iou)) if all_iou else 1.0, per_view, match
