import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_render, random_scene, random_view, solve_intersection
from splattrace.raster import (RasterError, RasterOptions, appearance_gradients, composite_view,
                               gaussian_value, intersect_ray_disk, render, render_contributions,
                               render_gt_instance_map, render_selection_mask)
from splattrace.scene import GaussianDisk, Scene


def test_gaussian_value_center_and_cutoff():
    assert gaussian_value([0.0, 0.0]) == 1.0
    assert gaussian_value([3.0, 0.0]) == pytest.approx(math.exp(-4.5))


def test_intersection_matches_linear_solve():
    rng = np.random.default_rng(0)
    for s in range(30):
        scene = random_scene(s, n=3)
        view = scene.views[0]
        for i in range(len(scene)):
            d = scene.gaussian(i)
            x, y = rng.integers(0, 16, 2)
            got = intersect_ray_disk(view, (x, y), d)
            ref = solve_intersection(view, x, y, d.center, d.tangent_u, d.tangent_v,
                                     d.scale_u, d.scale_v)
            if ref is None:
                assert got is None
                continue
            uv, lam = got
            np.testing.assert_allclose(uv, ref[:2], rtol=1e-9, atol=1e-9)
            assert lam == pytest.approx(ref[2], rel=1e-9)


def test_intersection_rejects_pixels_outside_image():
    scene = random_scene(1, n=1)
    with pytest.raises(RasterError):
        intersect_ray_disk(scene.views[0], (16, 0), scene.gaussian(0))


def test_parallel_ray_misses():
    scene = random_scene(2, n=1)
    view = scene.views[0]
    d = view.pixel_directions(7.5, 7.5)
    d = d / np.linalg.norm(d)
    tu = np.cross(d, [0.0, 0.0, 1.0])
    tu /= np.linalg.norm(tu)
    disk = GaussianDisk(view.origin + 2 * d, tu, d, 0.2, 0.2, 0.5, np.ones(3), np.zeros(4))
    assert intersect_ray_disk(view, (7.5, 7.5), disk) is None


@pytest.mark.parametrize("seed", range(6))
def test_render_matches_naive_blender(seed):
    scene = random_scene(seed)
    view = scene.views[0]
    color, residual, _ = naive_render(scene, view)
    out = render(scene, view)
    assert np.abs(out.color - color).max() <= 1e-6
    assert np.abs(out.transmittance - residual).max() <= 1e-6


def test_contributions_match_naive_and_conserve():
    scene = random_scene(11, n=20)
    view = scene.views[0]
    _, residual, contrib = naive_render(scene, view)
    c = render_contributions(scene, view)
    for p in range(256):
        got = c.pixel(p)
        ref = contrib[p]
        assert [g for g, _ in got] == [g for g, _ in ref]
        np.testing.assert_allclose([w for _, w in got], [w for _, w in ref], atol=1e-12)
        assert sum(w for _, w in got) + c.residual[p] == pytest.approx(1.0, abs=1e-9)


def test_empty_scene_renders_black():
    view = random_view(np.random.default_rng(0))
    scene = Scene.empty([view], 4)
    out = render(scene, view)
    assert not out.color.any()
    assert (out.transmittance == 1).all()
    assert out.n_fragments == 0


def test_foreign_view_rejected():
    scene = random_scene(3)
    other = random_view(np.random.default_rng(99), index=7)
    with pytest.raises(RasterError):
        render(scene, other)
    render(scene, other, check_view=False)


def test_options_validated():
    with pytest.raises(RasterError):
        RasterOptions(threads=0)
    with pytest.raises(RasterError):
        RasterOptions(cutoff_radius=-1)


def test_alpha_clamp_bounds_single_layer():
    view = random_view(np.random.default_rng(5))
    fwd = view.rotation[2]
    disk = GaussianDisk(view.origin + 3 * fwd, view.rotation[0], view.rotation[1], 5.0, 5.0,
                        1.0, np.ones(3), np.zeros(4), 1)
    scene = Scene.from_disks([disk], [view])
    out = render(scene, view)
    assert out.transmittance.min() == pytest.approx(0.01)


def test_early_termination_marks_inactive():
    view = random_view(np.random.default_rng(6))
    fwd = view.rotation[2]
    disks = [GaussianDisk(view.origin + (2 + 0.1 * k) * fwd, view.rotation[0], view.rotation[1],
                          5.0, 5.0, 1.0, np.ones(3), np.zeros(4), 1) for k in range(4)]
    scene = Scene.from_disks(disks, [view])
    comp = composite_view(scene, view)
    # three clamped layers leave T = 1e-6 <= term_eps, so the fourth is skipped
    per_pixel = np.bincount(comp.fragments.pixel[comp.active], minlength=256)
    assert per_pixel.max() == 3
    assert comp.n_traversed < comp.fragments.pixel.size


@given(seed=st.integers(0, 10_000), tile_rows=st.integers(1, 16), threads=st.integers(1, 4))
def test_tiles_and_threads_are_bit_identical(seed, tile_rows, threads):
    scene = random_scene(seed, feature_dim=3)
    view = scene.views[0]
    ref = render(scene, view, RasterOptions(with_features=True))
    out = render(scene, view, RasterOptions(with_features=True, tile_rows=tile_rows,
                                            threads=threads))
    assert np.array_equal(ref.color, out.color)
    assert np.array_equal(ref.feature, out.feature)
    assert np.array_equal(ref.transmittance, out.transmittance)


@given(seed=st.integers(0, 10_000))
def test_conservation(seed):
    scene = random_scene(seed)
    c = render_contributions(scene, scene.views[0])
    tot = np.bincount(c.pixel_ids(), weights=c.weight, minlength=256)
    assert np.abs(tot + c.residual - 1).max() <= 1e-9


@given(seed=st.integers(0, 10_000))
def test_render_is_permutation_invariant(seed):
    scene = random_scene(seed)
    perm = np.random.default_rng(seed).permutation(len(scene))
    a = render(scene, scene.views[0])
    b = render(scene.subset(perm), scene.views[0])
    np.testing.assert_allclose(a.color, b.color, atol=1e-12)


def _fd_check(f, x, grad, idx, h=1e-4):
    """Largest relative error of central differences over the listed entries."""
    worst = 0.0
    for j in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        ana = grad.flat[j]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def appearance_fd_errors(seed=0):
    """Relative FD errors for colour, opacity and feature gradients of a
    random linear functional of the render (colour, feature, transmittance)."""
    scene = random_scene(seed, n=24, feature_dim=4, opacity=(0.1, 0.7))
    view = scene.views[0]
    rng = np.random.default_rng(seed + 1)
    wc = rng.standard_normal((16, 16, 3))
    wf = rng.standard_normal((16, 16, 4))
    wt = rng.standard_normal((16, 16))
    opts = RasterOptions(with_features=True)

    def loss(colors=None, opacity=None, features=None):
        s = scene.with_params(colors=scene.colors if colors is None else colors,
                              opacity=scene.opacity if opacity is None else opacity,
                              features=scene.features if features is None else features)
        out = render(s, view, opts)
        return float((wc * out.color).sum() + (wf * out.feature).sum()
                     + (wt * out.transmittance).sum())

    g = appearance_gradients(scene, view, {"color": wc, "feature": wf, "transmittance": wt}, opts)
    errs = {
        "color": _fd_check(lambda c: loss(colors=c), scene.colors.copy(), g.color, range(72)),
        "opacity": _fd_check(lambda o: loss(opacity=o), scene.opacity.copy(), g.opacity, range(24)),
        "feature": _fd_check(lambda f: loss(features=f), scene.features.copy(), g.feature, range(96)),
    }
    return errs, 72 + 24 + 96


def test_appearance_gradients_match_finite_differences():
    errs, n = appearance_fd_errors(0)
    assert n >= 100
    for k, e in errs.items():
        assert e < 1e-4, (k, e)


def test_appearance_gradient_shape_checked():
    scene = random_scene(0)
    with pytest.raises(RasterError):
        appearance_gradients(scene, scene.views[0], {"color": np.zeros((3, 3, 3))})


def test_gt_instance_map_requires_labels_and_marks_background():
    scene = random_scene(4)
    lab = render_gt_instance_map(scene, scene.views[0])
    res = render(scene, scene.views[0]).transmittance
    assert (lab[res > 0.5] == 0).all()
    assert set(np.unique(lab)) <= {0, 1, 2, 3}
    bad = scene.with_params(gt_instance=np.full(len(scene), -1))
    with pytest.raises(RasterError):
        render_gt_instance_map(bad, scene.views[0])


def test_selection_mask_all_and_none():
    scene = random_scene(8, n=20)
    comp = composite_view(scene, scene.views[0])
    everything = render_selection_mask(comp, np.arange(len(scene)))
    assert np.array_equal(everything, comp.residual.reshape(16, 16) <= 0.5)
    assert not render_selection_mask(comp, []).any()
