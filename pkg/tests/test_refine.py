import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_scene
from splattrace.raster import render, render_gt_instance_map
from splattrace.refine import (RefineConfig, RefineError, ambiguity_scores, density_control_round,
                               refine_appearance, render_psnr, run_refinement, split_gaussian)
from splattrace.scene import GaussianDisk, Scene, straddle_scene
from splattrace.tracing import WeightMatrix, trace_all


def _rows_with_max(maxes, n_patches=3):
    """One Gaussian per entry; view l's row has max ``maxes[l]`` (None = invisible)."""
    views = []
    for m in maxes:
        d = np.zeros((1, n_patches))
        if m is not None:
            d[0, 1] = m
            d[0, 2] = 1 - m
        views.append(d)
    return WeightMatrix.from_dense(views)


def test_one_hot_rows_are_not_ambiguous():
    r = ambiguity_scores(_rows_with_max([1.0, 1.0]))
    assert r.scores[0] == 0.0 and not r.ambiguous[0]


def test_half_score_is_not_ambiguous_under_strict_threshold():
    r = ambiguity_scores(_rows_with_max([0.9, 0.6]), gamma=0.8, theta_as=0.5)
    assert r.scores[0] == 0.5 and not r.ambiguous[0]


def test_all_low_rows_are_ambiguous():
    r = ambiguity_scores(_rows_with_max([0.7, 0.6, 0.75]), gamma=0.8, theta_as=0.5)
    assert r.scores[0] == 1.0 and r.ambiguous[0]


def test_max_equal_to_gamma_is_not_below():
    r = ambiguity_scores(_rows_with_max([0.8, 0.8]), gamma=0.8)
    assert r.scores[0] == 0.0


def test_invisible_gaussians_are_reported_not_flagged():
    r = ambiguity_scores(_rows_with_max([None, None]))
    assert r.invisible[0] and not r.ambiguous[0] and r.n_visible[0] == 0
    r = ambiguity_scores(_rows_with_max([None, 0.6]))
    assert r.n_visible[0] == 1 and r.scores[0] == 1.0


def _disk(su=0.4, sv=0.2):
    return GaussianDisk((0.1, -0.2, 0.3), (1, 0, 0), (0, 0, 1), su, sv, 0.6, (0.2, 0.3, 0.4),
                        np.arange(4.0), 3)


def test_split_halves_scales_and_copies_appearance():
    a, b = split_gaussian(_disk(), np.random.default_rng(0))
    for c in (a, b):
        assert (c.scale_u, c.scale_v) == (0.2, 0.1)
        assert c.opacity == 0.6 and np.array_equal(c.feature, np.arange(4.0))
        assert c.gt_instance is None
        assert np.array_equal(c.tangent_u, [1, 0, 0])


def test_split_is_seed_reproducible():
    a = split_gaussian(_disk(), np.random.default_rng(5))
    b = split_gaussian(_disk(), np.random.default_rng(5))
    assert all(np.array_equal(x.center, y.center) for x, y in zip(a, b))


def split_covariance(n=10_000, seed=0):
    """Empirical in-plane covariance of child centres, in (t_u, t_v) coordinates."""
    d = _disk()
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        for c in split_gaussian(d, rng):
            rel = c.center - d.center
            pts.append((rel @ d.tangent_u, rel @ d.tangent_v))
    return np.cov(np.array(pts).T), np.diag([d.scale_u ** 2, d.scale_v ** 2])


def test_split_centres_follow_parent_density():
    cov, ref = split_covariance()
    assert abs(cov[0, 0] / ref[0, 0] - 1) < 0.05
    assert abs(cov[1, 1] / ref[1, 1] - 1) < 0.05
    assert abs(cov[0, 1]) < 0.05 * np.sqrt(ref[0, 0] * ref[1, 1])


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(theta_as=0.0), dict(scale_divisor=1.0), dict(lr=0.0),
                dict(photometric_weight=0.0)):
        with pytest.raises(RefineError):
            RefineConfig(**bad).validate()


def test_round_is_fixed_point_without_ambiguity(small_scene, small_gt):
    res = density_control_round(small_scene, small_gt, RefineConfig(gamma=0.01),
                                np.random.default_rng(0))
    assert res.scene is small_scene
    assert res.n_split == 0 and res.children == []
    assert res.new_index.tolist() == list(range(len(small_scene)))


def test_round_rejects_mismatched_maps(small_scene, small_gt):
    with pytest.raises(RefineError):
        density_control_round(small_scene, small_gt[:2], RefineConfig(), np.random.default_rng(0))
    with pytest.raises(RefineError):
        density_control_round(small_scene, [m[:5] for m in small_gt], RefineConfig(),
                              np.random.default_rng(0))


@pytest.fixture(scope="module")
def straddle():
    clean, scene = straddle_scene()
    maps = [render_gt_instance_map(clean, v) for v in clean.views]
    targets = [render(clean, v).color for v in clean.views]
    return clean, scene, maps, targets


def test_straddler_is_the_ambiguous_one(straddle):
    _, scene, maps, _ = straddle
    r = ambiguity_scores(trace_all(scene, maps))
    assert np.flatnonzero(r.ambiguous).tolist() == [len(scene) - 1]


def test_round_removes_straddle(straddle):
    _, scene, maps, _ = straddle
    cfg = RefineConfig()
    res = density_control_round(scene, maps, cfg, np.random.default_rng(0))
    assert res.n_split == 1 and res.after.n_ambiguous == 0
    assert res.new_index[-1] == -1
    assert res.new_index[:-1].tolist() == list(range(len(scene) - 1))
    # every survivor's row max clears gamma in a majority of its visible views
    wm = trace_all(res.scene, maps)
    vis = wm.visibility()
    good = ((wm.max_prob >= cfg.gamma) & vis).sum(axis=1)
    assert (2 * good > vis.sum(axis=1))[vis.any(axis=1)].all()


def test_run_refinement_history(straddle):
    clean, scene, maps, targets = straddle
    pre = render_psnr(scene, targets)
    run = run_refinement(scene, maps, RefineConfig(period=20, max_rounds=5), targets=targets)
    counts = [r["n_ambiguous"] for r in run.rounds] + [run.rounds[-1]["n_ambiguous_after"]]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0 and len(run.rounds) <= 5
    assert render_psnr(run.scene, targets) >= pre - 0.5
    assert run.jsonl().count("\n") == len(run.rounds)


@settings(max_examples=6)
@given(seed=st.integers(0, 1000))
def test_round_never_increases_ambiguity(seed):
    scene = random_scene(seed, n=20, n_views=2)
    maps = [render_gt_instance_map(scene, v) for v in scene.views]
    res = density_control_round(scene, maps, RefineConfig(), np.random.default_rng(seed))
    assert res.after.n_ambiguous <= res.before.n_ambiguous


def test_refit_at_optimum_is_noop():
    scene = random_scene(2, n=12, n_views=2)
    targets = [render(scene, v).color for v in scene.views]
    out = refine_appearance(scene, targets, 5)
    assert np.array_equal(out.colors, scene.colors)
    assert np.array_equal(out.opacity, scene.opacity)


def test_single_disk_moves_toward_brighter_red():
    scene = random_scene(4, n=1)
    view = scene.views[0]
    d = scene.gaussian(0)
    scene = Scene.from_disks([GaussianDisk(view.origin + 3 * view.rotation[2], view.rotation[0],
                                           view.rotation[1], 0.5, 0.5, 0.5, (0.2, 0.2, 0.2),
                                           d.feature, 1)], [view])
    target = render(scene.with_params(colors=np.array([[0.9, 0.2, 0.2]])), view).color
    reds = [0.2]
    for _ in range(4):
        scene = refine_appearance(scene.with_params(opacity=np.array([0.5])), [target], 1)
        reds.append(scene.colors[0, 0])
    assert all(b >= a for a, b in zip(reds, reds[1:])) and reds[-1] > 0.2


def test_refit_loss_is_monotone():
    scene = random_scene(6, n=20, n_views=2)
    rng = np.random.default_rng(0)
    targets = [np.clip(render(scene, v).color + rng.normal(0, 0.1, (16, 16, 3)), 0, 1)
               for v in scene.views]
    trace = []
    refine_appearance(scene, targets, 60, trace=trace)
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_refit_target_shape_checked():
    scene = random_scene(1)
    with pytest.raises(RefineError):
        refine_appearance(scene, [np.zeros((3, 3, 3))], 1)
