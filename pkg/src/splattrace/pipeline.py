"""Stage runners shared by the CLI.  Every stage reads its inputs from the run
directory, writes its artifacts back there and returns a metrics dict; the
caller wraps it in a versioned JSON report.

Run directory layout::

    config.json               resolved configuration
    scene.json                generated scene
    gt/{train,holdout}_NN.pgm ground-truth instance maps
    renders/train_NN.ppm      colour renders (+ .trans.raw transmittance)
    inject/train_NN.pgm       overlapped patch maps of the corrupted masks
    inject/train_NN.masks.pgm corrupted masks, one bit plane per mask
    inject/masks.json         mask provenance and hierarchy
    trace/weights.gitw        weight matrix of the injected maps
    merge/train_NN.pgm        merged maps with global ids; merge/log.jsonl
    refine/scene.json         density-controlled scene; refine/rounds.jsonl
    lift/scene.json           scene with trained features; lift/losses.json
    segment/obj_K/...         query masks per view; segment/obj_K.json
    extract/obj_K.json        extracted Gaussian ids and their metrics
    selfprompt/obj_K.json     self-prompting result per object
    reports/<stage>.json      one report per stage
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .config import RunConfig
from .instances import (BinaryMaskSet, InjectorParams, inject_inconsistency, map_iou,
                        masks_from_labels, multiview_miou, overlap_masks)
from .lift import (OraclePrompter, ViewCache, extract_object, feature_separation,
                   query_segment, self_prompt, train_contrastive)
from .merge import merge_patches
from .metrics import mask_from_render, mask_iou, psnr_restricted
from .raster import RasterOptions, composite_view, render, render_gt_instance_map
from .refine import run_refinement
from .scene import generate_scene, read_scene, write_scene
from .tracing import dump_weight_matrix, load_weight_matrix, trace_all

SCHEMA_VERSION = 1
STAGES = ("generate", "gtmaps", "render", "inject", "trace", "merge", "refine", "lift",
          "segment", "extract", "selfprompt", "eval")


class PipelineError(RuntimeError):
    pass


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    threads: int = 1
    record_timings: bool = False

    @property
    def raster(self) -> RasterOptions:
        r = self.cfg.raster
        return RasterOptions(r.cutoff_radius, r.alpha_clamp, r.term_eps, r.with_features,
                             self.threads, r.tile_rows)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        if not p.exists():
            raise PipelineError(f"missing input {p}; run the producing stage first")
        return p


# ---------------------------------------------------------------------------
# small io helpers


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _clean(x):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


def _name(kind, i):
    return f"{kind}_{i:02d}"


def save_maps(ctx, folder, kind, maps):
    for i, m in enumerate(maps):
        imageio.write_bytes(ctx.path(folder, _name(kind, i) + ".pgm"),
                            imageio.encode_pgm16(np.asarray(getattr(m, "labels", m))))


def load_maps(ctx, folder, kind, n):
    return [imageio.decode_pgm16(imageio.read_bytes(ctx.need(folder, _name(kind, i) + ".pgm")))
            for i in range(n)]


def _scene(ctx, which="scene.json"):
    return read_scene(ctx.need(which))


def _latest_scene(ctx):
    for p in ("lift/scene.json", "refine/scene.json", "scene.json"):
        if (ctx.out / p).exists():
            return read_scene(ctx.out / p)
    raise PipelineError("no scene in the run directory; run generate first")


def _refined_scene(ctx):
    p = ctx.out / "refine/scene.json"
    return read_scene(p) if p.exists() else _scene(ctx)


def _object_ids(ctx, gt_train):
    if ctx.cfg.eval.objects is not None:
        return [int(k) for k in ctx.cfg.eval.objects]
    ids = set()
    for m in gt_train:
        ids.update(int(k) for k in np.unique(m) if k > 0)
    return sorted(ids)


# ---------------------------------------------------------------------------
# stages


def stage_generate(ctx: Context):
    if ctx.cfg.scene_file:
        scene = read_scene(ctx.cfg.scene_file)
    else:
        scene = generate_scene(ctx.cfg.scene)
    write_scene(ctx.path("scene.json"), scene)
    write_json(ctx.path("config.json"), ctx.cfg.to_dict())
    return {"n_gaussians": len(scene), "n_views": scene.n_views,
            "n_holdout_views": len(scene.holdout_views), "feature_dim": scene.feature_dim}


def stage_gtmaps(ctx: Context):
    scene = _scene(ctx)
    opts = ctx.raster
    tr = [render_gt_instance_map(scene, v, opts) for v in scene.views]
    ho = [render_gt_instance_map(scene, v, opts) for v in scene.holdout_views]
    save_maps(ctx, "gt", "train", tr)
    save_maps(ctx, "gt", "holdout", ho)
    return {"instances_per_view": [int(len(np.unique(m)) - (m == 0).any()) for m in tr]}


def stage_render(ctx: Context):
    scene = _scene(ctx)
    opts = ctx.raster
    cover = []
    for i, v in enumerate(scene.views):
        out = render(scene, v, opts)
        imageio.write_bytes(ctx.path("renders", _name("train", i) + ".ppm"),
                            imageio.encode_ppm(out.color))
        imageio.write_bytes(ctx.path("renders", _name("train", i) + ".trans.raw"),
                            imageio.encode_raw(out.transmittance))
        cover.append(float((out.transmittance <= 0.5).mean()))
    return {"covered_fraction": cover}


def _bitplanes(ms: BinaryMaskSet):
    if len(ms) > 16:
        raise PipelineError("at most 16 masks per view fit the bit-plane file")
    planes = np.zeros(ms.shape, np.int64)
    for j, m in enumerate(ms.masks):
        planes |= m.astype(np.int64) << j
    return planes


def _from_bitplanes(planes, n, contains, sources):
    masks = np.array([(planes >> j) & 1 for j in range(n)], bool)
    return BinaryMaskSet(masks, contains, sources)


def stage_inject(ctx: Context):
    scene = _scene(ctx)
    gt = load_maps(ctx, "gt", "train", scene.n_views)
    sets = inject_inconsistency([masks_from_labels(m) for m in gt], ctx.cfg.injector)
    meta = []
    maps = []
    for i, ms in enumerate(sets):
        imageio.write_bytes(ctx.path("inject", _name("train", i) + ".masks.pgm"),
                            imageio.encode_pgm16(_bitplanes(ms)))
        meta.append({"n_masks": len(ms), "contains": ms.contains,
                     "sources": [list(s) for s in ms.sources]})
        maps.append(overlap_masks(ms).labels)
    write_json(ctx.path("inject", "masks.json"), meta)
    save_maps(ctx, "inject", "train", maps)
    pv = [map_iou(p, g) for p, g in zip(maps, gt)]
    glob, _, _ = multiview_miou(maps, gt)
    return {"n_masks": [m["n_masks"] for m in meta],
            "n_patches": [int(m.max()) + 1 for m in maps],
            "miou_per_view": [r.miou for r in pv],
            "miou_view_mean": float(np.mean([r.miou for r in pv])),
            "miou_global": glob}


def load_injected(ctx, n):
    meta = read_json(ctx.need("inject", "masks.json"))
    sets = []
    for i in range(n):
        planes = imageio.decode_pgm16(imageio.read_bytes(
            ctx.need("inject", _name("train", i) + ".masks.pgm")))
        m = meta[i]
        sets.append(_from_bitplanes(planes, m["n_masks"], m["contains"],
                                    [tuple(s) for s in m["sources"]]))
    return sets


def stage_trace(ctx: Context):
    scene = _scene(ctx)
    maps = load_maps(ctx, "inject", "train", scene.n_views)
    wm = trace_all(scene, maps, ctx.raster, ctx.cfg.trace)
    imageio.write_bytes(ctx.path("trace", "weights.gitw"), dump_weight_matrix(wm))
    return {"nnz_per_view": [v.nnz for v in wm.views],
            "fragments_per_view": [v.n_traversed for v in wm.views],
            "visible_per_view": [int(v.visible.sum()) for v in wm.views]}


def stage_merge(ctx: Context):
    scene = _scene(ctx)
    n = scene.n_views
    wm = load_weight_matrix(imageio.read_bytes(ctx.need("trace", "weights.gitw")))
    sets = load_injected(ctx, n)
    maps = [overlap_masks(s) for s in sets]
    hierarchy = [s if s.contains is not None else None for s in sets]
    res = merge_patches(wm, maps, hierarchy, config=ctx.cfg.merge)
    save_maps(ctx, "merge", "train", res.maps)
    ctx.path("merge", "log.jsonl").write_text(res.log_jsonl(), encoding="utf-8")
    gt = load_maps(ctx, "gt", "train", n)
    pre = [map_iou(m.labels, g) for m, g in zip(maps, gt)]
    post = [map_iou(m, g) for m, g in zip(res.maps, gt)]
    pre_g, pre_pv, _ = multiview_miou([m.labels for m in maps], gt)
    post_g, post_pv, _ = multiview_miou(res.maps, gt)
    return {
        "n_patches": len(res.keys), "n_instances": res.n_instances,
        "n_unions_logged": res.n_unions,
        "pre_miou_global": pre_g, "post_miou_global": post_g,
        "pre_miou_global_per_view": pre_pv, "post_miou_global_per_view": post_pv,
        "pre_miou_view_mean": float(np.mean([r.miou for r in pre])),
        "post_miou_view_mean": float(np.mean([r.miou for r in post])),
        "post_macc_view_mean": float(np.mean([r.macc for r in post])),
    }


def stage_refine(ctx: Context):
    scene = _scene(ctx)
    n = scene.n_views
    maps = load_maps(ctx, "merge", "train", n)
    # refit against exact float renders; the stored PPMs are quantised to 8 bits
    targets = [render(scene, v, ctx.raster).color for v in scene.views]
    run = run_refinement(scene, maps, ctx.cfg.refine, np.random.default_rng(ctx.cfg.refine.seed),
                         targets, ctx.raster)
    write_scene(ctx.path("refine", "scene.json"), run.scene)
    ctx.path("refine", "rounds.jsonl").write_text(run.jsonl(), encoding="utf-8")
    return {"rounds": run.rounds, "n_gaussians": len(run.scene),
            "ambiguous_per_round": [r["n_ambiguous"] for r in run.rounds]}


def stage_lift(ctx: Context):
    scene = _refined_scene(ctx)
    maps = load_maps(ctx, "merge", "train", scene.n_views)
    caches = [ViewCache.build(scene, v, ctx.raster) for v in scene.views]
    res = train_contrastive(scene, maps, ctx.cfg.contrastive, ctx.raster, caches)
    write_scene(ctx.path("lift", "scene.json"), res.scene)
    write_json(ctx.path("lift", "losses.json"), res.losses)
    sep, intra, inter = feature_separation(res.scene, maps, caches)
    return {"steps": len(res.losses),
            "loss_first": res.losses[0] if res.losses else None,
            "loss_last100_mean": float(np.mean(res.losses[-100:])) if res.losses else None,
            "cosine_intra": intra, "cosine_inter": inter, "cosine_separation": sep}


def _holdout_scores(pred: dict, scene, gt_hold, k):
    out = {}
    for v, g in zip(scene.holdout_views, gt_hold):
        out[v.view_index] = mask_iou(pred[v.view_index], g == k)
    return out


def stage_segment(ctx: Context):
    scene = _scene(ctx, "lift/scene.json")
    gt = load_maps(ctx, "gt", "train", scene.n_views)
    gt_hold = load_maps(ctx, "gt", "holdout", len(scene.holdout_views))
    opts = ctx.raster
    ref = ctx.cfg.eval.reference_view
    caches = [ViewCache.build(scene, v, opts) for v in scene.views]
    hcaches = [ViewCache.build(scene, v, opts) for v in scene.holdout_views]
    per_obj = {}
    for k in _object_ids(ctx, gt):
        mask = gt[ref] == k
        if not mask.any():
            per_obj[k] = {"skipped": "object absent from the reference view"}
            continue
        q = query_segment(scene, ref, mask, opts, caches, hcaches,
                          ctx.cfg.eval.max_queries, coverage_min=ctx.cfg.eval.coverage_min,
                          tau=ctx.cfg.contrastive.tau)
        q.per_view_iou = _holdout_scores(q.masks, scene, gt_hold, k)
        for vi, m in sorted(q.masks.items()):
            imageio.write_bytes(ctx.path("segment", f"obj_{k}", f"view_{vi:02d}.pgm"),
                                imageio.encode_pgm16(m.astype(np.int32)))
        man = q.manifest()
        man["iou_trace"] = q.iou_trace
        write_json(ctx.path("segment", f"obj_{k}.json"), man)
        per_obj[k] = {"holdout_miou": float(np.mean(list(q.per_view_iou.values()))),
                      "n_queries": len(q.query_points), "threshold": q.threshold}
    scores = [o["holdout_miou"] for o in per_obj.values() if "holdout_miou" in o]
    return {"objects": per_obj, "holdout_miou_mean": float(np.mean(scores)) if scores else None,
            "holdout_miou_min": float(np.min(scores)) if scores else None}


def stage_extract(ctx: Context):
    scene = _scene(ctx, "lift/scene.json")
    base = _scene(ctx)
    gt = load_maps(ctx, "gt", "train", scene.n_views)
    gt_hold = load_maps(ctx, "gt", "holdout", len(scene.holdout_views))
    opts = ctx.raster
    comps = [composite_view(scene, v, opts) for v in scene.views]
    labelled = scene.gt_instance >= 0
    per_obj = {}
    for k in _object_ids(ctx, gt):
        folder = ctx.out / "segment" / f"obj_{k}"
        if not folder.exists():
            per_obj[k] = {"skipped": "no segment masks"}
            continue
        masks = [imageio.decode_pgm16(imageio.read_bytes(folder / f"view_{v.view_index:02d}.pgm")) > 0
                 for v in scene.views]
        sel, _ = extract_object(scene, masks, opts, ctx.cfg.trace, composites=comps)
        target = np.flatnonzero(scene.gt_instance == k)
        hit = np.isin(target, sel)
        sel_lab = sel[labelled[sel]]
        contamination = float((scene.gt_instance[sel_lab] != k).mean()) if sel_lab.size else 0.0
        sub = scene.subset(sel)
        ref_sub = base.subset(np.flatnonzero(base.gt_instance == k))
        ious, psnrs = [], []
        for v, g in zip(scene.holdout_views, gt_hold):
            img = render(sub, v, opts, check_view=False).color
            ious.append(mask_iou(mask_from_render(img), g == k))
            if (g == k).any():
                ref_img = render(ref_sub, v, opts, check_view=False).color
                psnrs.append(psnr_restricted(img, ref_img, g == k))
        write_json(ctx.path("extract", f"obj_{k}.json"), {"selected": sel})
        finite = [p for p in psnrs if p != "inf"]
        per_obj[k] = {
            "n_selected": int(sel.size), "n_gt": int(target.size),
            "recall": float(hit.mean()) if target.size else 1.0,
            "contamination": contamination,
            "render_mask_iou": ious,
            "psnr_restricted": psnrs,
            "psnr_restricted_mean": float(np.mean(finite)) if finite else "inf",
        }
    return {"objects": per_obj}


def _corrupted_views(ctx, n, rng):
    ref = ctx.cfg.eval.reference_view
    k = int(round(ctx.cfg.eval.corrupted_fraction * n))
    pool = [v for v in range(n) if v != ref]
    return sorted(int(v) for v in rng.choice(pool, size=min(k, len(pool)), replace=False))


def stage_selfprompt(ctx: Context):
    scene = _scene(ctx, "lift/scene.json")
    n = scene.n_views
    gt = load_maps(ctx, "gt", "train", n)
    gt_hold = load_maps(ctx, "gt", "holdout", len(scene.holdout_views))
    opts = ctx.raster
    rng = np.random.default_rng(ctx.cfg.prompt_seed())
    bad = _corrupted_views(ctx, n, rng)
    params = InjectorParams(split_prob=0.5, merge_prob=0.5,
                            boundary_radius=ctx.cfg.injector.boundary_radius,
                            seed=ctx.cfg.prompt_seed())
    noisy = inject_inconsistency([masks_from_labels(m) for m in gt], params)
    prompter = OraclePrompter(gt, {v: noisy[v] for v in bad})
    comps = [composite_view(scene, v, opts) for v in scene.views]
    hcaches = [ViewCache.build(scene, v, opts) for v in scene.holdout_views]
    ref = ctx.cfg.eval.reference_view
    per_obj = {}
    for k in _object_ids(ctx, gt):
        mask = gt[ref] == k
        if not mask.any():
            per_obj[k] = {"skipped": "object absent from the reference view"}
            continue
        rr, cc = np.nonzero(mask)
        j = int(np.argmin((rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2))
        q = self_prompt(scene, ref, [(int(rr[j]), int(cc[j]))], prompter, n, opts,
                        ctx.cfg.trace, hcaches, comps, ctx.cfg.eval.n_prompts)
        q.per_view_iou = _holdout_scores(q.masks, scene, gt_hold, k)
        man = q.manifest()
        write_json(ctx.path("selfprompt", f"obj_{k}.json"), man)
        per_obj[k] = {"holdout_miou": float(np.mean(list(q.per_view_iou.values()))),
                      "n_selected": int(q.selected.size)}
    scores = [o["holdout_miou"] for o in per_obj.values() if "holdout_miou" in o]
    return {"corrupted_views": bad, "objects": per_obj,
            "holdout_miou_mean": float(np.mean(scores)) if scores else None}


def stage_eval(ctx: Context, pred_dir=None, gt_dir=None):
    """Either compare two directories of P5 maps, or summarise a run."""
    if pred_dir is not None:
        return eval_dirs(pred_dir, gt_dir)
    rep = {}
    for st in ("merge", "segment", "extract", "selfprompt", "refine"):
        p = ctx.out / "reports" / f"{st}.json"
        if p.exists():
            rep[st] = read_json(p)["metrics"]
    return summarize(rep)


def eval_dirs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.name for p in gt_dir.glob("*.pgm"))
    if not names:
        raise PipelineError(f"no .pgm maps in {gt_dir}")
    pred, gt = [], []
    for nm in names:
        if not (pred_dir / nm).exists():
            raise PipelineError(f"prediction {pred_dir / nm} missing")
        pred.append(imageio.decode_pgm16(imageio.read_bytes(pred_dir / nm)))
        gt.append(imageio.decode_pgm16(imageio.read_bytes(gt_dir / nm)))
    res = [map_iou(p, g) for p, g in zip(pred, gt)]
    glob, _, _ = multiview_miou(pred, gt)
    return {"maps": names, "miou_per_view": [r.miou for r in res],
            "macc_per_view": [r.macc for r in res],
            "miou_view_mean": float(np.mean([r.miou for r in res])),
            "macc_view_mean": float(np.mean([r.macc for r in res])),
            "miou_global": glob}


def summarize(rep: dict):
    out = {}
    if "merge" in rep:
        m = rep["merge"]
        out["segmentation"] = {k: m[k] for k in ("pre_miou_global", "post_miou_global",
                                                 "pre_miou_view_mean", "post_miou_view_mean",
                                                 "post_macc_view_mean")}
    if "segment" in rep:
        out["query_holdout_miou_mean"] = rep["segment"]["holdout_miou_mean"]
        out["query_holdout_miou_min"] = rep["segment"]["holdout_miou_min"]
    if "extract" in rep:
        objs = [o for o in rep["extract"]["objects"].values() if "recall" in o]
        out["extraction"] = {
            "recall_min": min(o["recall"] for o in objs) if objs else None,
            "contamination_max": max(o["contamination"] for o in objs) if objs else None,
            "render_mask_iou_mean": float(np.mean([np.mean(o["render_mask_iou"]) for o in objs]))
            if objs else None,
        }
    if "selfprompt" in rep:
        out["selfprompt_holdout_miou_mean"] = rep["selfprompt"]["holdout_miou_mean"]
    if "refine" in rep:
        out["ambiguous_per_round"] = rep["refine"]["ambiguous_per_round"]
    return out


STAGE_FUNCS = {
    "generate": stage_generate, "gtmaps": stage_gtmaps, "render": stage_render,
    "inject": stage_inject, "trace": stage_trace, "merge": stage_merge,
    "refine": stage_refine, "lift": stage_lift, "segment": stage_segment,
    "extract": stage_extract, "selfprompt": stage_selfprompt, "eval": stage_eval,
}


def make_report(stage, metrics, seconds=None):
    return {"schema_version": SCHEMA_VERSION, "stage": stage, "metrics": metrics,
            "timings": {} if seconds is None else {"seconds": seconds}}


def run_stage(ctx: Context, stage, **kw):
    t0 = time.perf_counter()
    metrics = STAGE_FUNCS[stage](ctx, **kw)
    dt = time.perf_counter() - t0
    rep = make_report(stage, metrics, dt if ctx.record_timings else None)
    write_json(ctx.path("reports", f"{stage}.json"), rep)
    return rep


def collect_report(ctx: Context):
    """Aggregate every stage report into report.json; unknown versions fail."""
    stages = {}
    for st in STAGES:
        p = ctx.out / "reports" / f"{st}.json"
        if not p.exists():
            continue
        r = read_json(p)
        if r.get("schema_version") != SCHEMA_VERSION:
            raise PipelineError(f"{p}: unsupported schema version {r.get('schema_version')}")
        stages[st] = r
    rep = make_report("report", {"stages": sorted(stages),
                                 "summary": summarize({k: v["metrics"] for k, v in stages.items()})})
    if ctx.record_timings:
        rep["timings"] = {k: v["timings"].get("seconds") for k, v in stages.items()}
    write_json(ctx.path("report.json"), rep)
    return rep


def run_pipeline(ctx: Context):
    for st in STAGES:
        run_stage(ctx, st)
    return collect_report(ctx)
