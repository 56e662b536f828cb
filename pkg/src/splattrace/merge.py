"""Patch similarity by multi-view majority vote and union-find merging of
patches into globally consistent instance ids.

For patches a and b with traced Gaussian sets G_a, G_b the score is the mean
inner product of W_i^v and W_j^v over all (i in G_a, j in G_b, v) with both
Gaussians visible in v.  Summing over i and j first gives the exact same
number from per-view aggregates::

    sim = sum_v <S_a(v), S_b(v)> / sum_v n_a(v) n_b(v)

where S_a(v) is the sum of the rows of G_a in view v and n_a(v) counts the
visible members.  When both patches come from the same view, that view does
not vote.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .instances import BinaryMaskSet, InstanceMap
from .tracing import TraceError, WeightMatrix, trace_patch_gaussians


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeConfig:
    theta: float = 0.5
    trace_eps: float = 1e-4
    # cross-view unions may not join two components that both hold a patch of
    # the same view; within-view decisions stay authoritative
    exclusive: bool = True
    retrace_rounds: int = 0


def _as_map(m):
    return m if isinstance(m, InstanceMap) else InstanceMap.from_labels(m)


class _Votes:
    """Per-view aggregates S (keys x T_v) and n (keys) for a list of keys."""

    def __init__(self, wm: WeightMatrix, keys, trace_eps):
        self.keys = list(keys)
        n = wm.n_gaussians
        rows, cols = [], []
        for k, (v, t) in enumerate(self.keys):
            try:
                g = trace_patch_gaussians(wm, v, t, trace_eps)
            except TraceError as e:
                raise MergeError(f"key {(v, t)}: {e}") from e
            rows.append(np.full(g.size, k))
            cols.append(g)
        rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        ind = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(len(self.keys), n))
        ind.sort_indices()
        self.sizes = np.diff(ind.indptr)
        self.S, self.n = [], []
        for rows_v in wm.views:
            self.S.append((ind @ rows_v.to_sparse()).toarray())
            self.n.append(np.asarray(ind @ rows_v.visible.astype(float)).round().astype(np.int64))
        self.views = np.array([v for v, _ in self.keys], np.int64)

    def score_block(self, ia, ib):
        """Similarity for every (ia[x], ib[y]) pair; exact symmetry holds because
        the per-view products are elementwise and summed in a fixed order."""
        ia, ib = np.asarray(ia), np.asarray(ib)
        num = np.zeros((ia.size, ib.size))
        den = np.zeros((ia.size, ib.size), np.int64)
        same = self.views[ia][:, None] == self.views[ib][None, :]
        for v, (S, n) in enumerate(zip(self.S, self.n)):
            prod = (S[ia][:, None, :] * S[ib][None, :, :]).sum(axis=-1)
            cnt = n[ia][:, None] * n[ib][None, :]
            skip = same & (self.views[ia][:, None] == v)
            num += np.where(skip, 0.0, prod)
            den += np.where(skip, 0, cnt)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.maximum(den, 1), 0.0)


def patch_keys(instance_maps):
    keys = []
    for v, m in enumerate(instance_maps):
        m = _as_map(m)
        keys.extend((v, t) for t in range(1, m.patch_count) if m.pixel_counts[t] > 0)
    return keys


def patch_similarity(wm: WeightMatrix, key_a, key_b, trace_eps=1e-4) -> float:
    votes = _Votes(wm, [tuple(key_a), tuple(key_b)], trace_eps)
    return float(votes.score_block([0], [1])[0, 0])


class UnionFind:
    """Union-find over 0..n-1 where the smallest index is always the root."""

    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        lo, hi = min(ra, rb), max(ra, rb)
        self.parent[hi] = lo
        return True


@dataclass
class MergeResult:
    keys: list
    root: dict
    global_id: dict
    maps: list
    log: list = field(default_factory=list)

    @property
    def n_instances(self):
        return len(set(self.global_id.values()))

    @property
    def n_unions(self):
        return sum(1 for e in self.log if e["merged"])

    def log_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)


def _within_candidates(m: InstanceMap, hierarchy: BinaryMaskSet | None):
    ts = [t for t in range(1, m.patch_count) if m.pixel_counts[t] > 0]
    pairs = [(a, b) for i, a in enumerate(ts) for b in ts[i + 1:]]
    if hierarchy is None or hierarchy.contains is None:
        return pairs
    if m.signatures is None:
        raise MergeError("hierarchy pruning needs patch signatures")
    coarse = set(hierarchy.coarse())
    return [(a, b) for a, b in pairs if m.signatures[a] & m.signatures[b] & coarse]


def merge_patches(wm: WeightMatrix, instance_maps, hierarchy=None, theta=0.5,
                  config: MergeConfig | None = None) -> MergeResult:
    """Union patches whose vote similarity exceeds theta, within views first and
    then across views, and relabel every map with global ids (1, 2, ...)."""
    cfg = config or MergeConfig(theta=theta)
    maps = [_as_map(m) for m in instance_maps]
    if len(maps) != wm.n_views:
        raise MergeError(f"{len(maps)} maps for a {wm.n_views}-view weight matrix")
    if hierarchy is None:
        hierarchy = [None] * len(maps)
    keys = patch_keys(maps)
    index = {k: j for j, k in enumerate(keys)}
    votes = _Votes(wm, keys, cfg.trace_eps)
    uf = UnionFind(len(keys))
    log = []

    def entry(a, b, s, merged):
        return {"view_a": keys[a][0], "patch_a": keys[a][1], "view_b": keys[b][0],
                "patch_b": keys[b][1], "score": float(s), "merged": bool(merged)}

    allk = np.arange(len(keys))
    sims = votes.score_block(allk, allk) if keys else np.zeros((0, 0))
    for v, m in enumerate(maps):
        for a, b in _within_candidates(m, hierarchy[v]):
            a, b = index[(v, a)], index[(v, b)]
            s = sims[a, b]
            if s > cfg.theta:
                uf.union(a, b)
            log.append(entry(a, b, s, s > cfg.theta))

    cross = [(a, b) for a in range(len(keys)) for b in range(a + 1, len(keys))
             if keys[a][0] != keys[b][0]]
    if cfg.exclusive:
        cross.sort(key=lambda p: (-sims[p], p))
        views_of = {r: {keys[r][0]} for r in {uf.find(k) for k in allk}}
        for a, b in cross:
            s = sims[a, b]
            ok = False
            if s > cfg.theta:
                ra, rb = uf.find(a), uf.find(b)
                if ra == rb:
                    ok = True
                elif not (views_of[ra] & views_of[rb]):
                    uf.union(ra, rb)
                    r = uf.find(ra)
                    views_of[r] = views_of.pop(ra, set()) | views_of.pop(rb, set())
                    ok = True
            log.append(entry(a, b, s, ok))
    else:
        for a, b in cross:
            s = sims[a, b]
            if s > cfg.theta:
                uf.union(a, b)
            log.append(entry(a, b, s, s > cfg.theta))

    roots = sorted({uf.find(j) for j in allk})
    gid = {r: i + 1 for i, r in enumerate(roots)}
    root = {keys[j]: keys[uf.find(j)] for j in allk}
    global_id = {keys[j]: gid[uf.find(j)] for j in allk}
    out = []
    for v, m in enumerate(maps):
        lut = np.zeros(m.patch_count, np.int32)
        for t in range(1, m.patch_count):
            lut[t] = global_id.get((v, t), 0)
        out.append(lut[m.labels])
    return MergeResult(keys, root, global_id, out, log)


def same_partition(maps_a, maps_b) -> bool:
    """True if two label-map lists differ only by a renaming of ids (0 fixed)."""
    fwd, bwd = {}, {}
    for a, b in zip(maps_a, maps_b):
        pairs = np.unique(np.stack([np.ravel(a), np.ravel(b)]), axis=1)
        for x, y in pairs.T.tolist():
            if (x == 0) != (y == 0) or fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
                return False
    return True


def merge_until_stable(scene, instance_maps, config: MergeConfig, options=None,
                       hierarchy=None, composites=None):
    """Merge, then re-trace with the merged maps and merge again, up to
    ``config.retrace_rounds`` extra times or until the partition stops changing."""
    from .tracing import trace_all

    wm = trace_all(scene, instance_maps, options, composites=composites)
    res = merge_patches(wm, instance_maps, hierarchy, config=config)
    for _ in range(config.retrace_rounds):
        wm = trace_all(scene, res.maps, options, composites=composites)
        nxt = merge_patches(wm, res.maps, None, config=config)
        if same_partition(nxt.maps, res.maps):
            break
        gid = {k: nxt.global_id[(k[0], g)] for k, g in res.global_id.items()}
        by_id = {}
        for k in sorted(gid):
            by_id.setdefault(gid[k], k)
        root = {k: by_id[g] for k, g in gid.items()}
        res = MergeResult(res.keys, root, gid, nxt.maps, res.log + nxt.log)
    return res
