import numpy as np
import pytest

from splattrace.metrics import (MetricError, expanded_bbox, mask_from_render, mask_iou, psnr,
                                psnr_restricted)


def test_identical_region_is_infinite():
    img = np.random.default_rng(0).random((8, 8, 3))
    mask = np.zeros((8, 8), bool)
    mask[3, 3] = True
    assert psnr_restricted(img, img, mask) == "inf"


def test_uniform_offset_gives_20db():
    a = np.zeros((6, 6, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    mask = np.ones((6, 6), bool)
    assert psnr_restricted(a, a + 0.1, mask) == pytest.approx(20.0)


def test_bbox_grows_and_clamps():
    mask = np.zeros((30, 30), bool)
    mask[1, 15:17] = True
    assert expanded_bbox(mask, 10) == (0, 12, 5, 27)
    mask[:] = False
    mask[29, 29] = True
    assert expanded_bbox(mask, 3) == (26, 30, 26, 30)


def test_region_excludes_far_pixels():
    a = np.zeros((40, 40, 3))
    b = a.copy()
    b[35:, 35:] = 1.0
    mask = np.zeros((40, 40), bool)
    mask[2:5, 2:5] = True
    assert psnr_restricted(a, b, mask) == "inf"


def test_empty_mask_and_shape_errors():
    with pytest.raises(MetricError):
        psnr_restricted(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4), bool))
    with pytest.raises(MetricError):
        psnr_restricted(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), np.ones((4, 4), bool))
    with pytest.raises(MetricError):
        mask_iou(np.ones((2, 2)), np.ones((3, 3)))


def test_mask_from_render_threshold():
    img = np.zeros((1, 3, 3))
    img[0, 1, 2] = 2e-6
    img[0, 2, 0] = 1e-6
    assert mask_from_render(img).tolist() == [[False, True, False]]


def test_mask_iou_values():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
