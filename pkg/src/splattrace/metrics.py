"""Image and mask metrics."""

from __future__ import annotations

import math

import numpy as np

INF = "inf"
PSNR_MARGIN = 10
RENDER_EPS = 1e-6


class MetricError(ValueError):
    pass


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def expanded_bbox(mask, margin=PSNR_MARGIN):
    """(r0, r1, c0, c1), half-open, of the mask's bounding box grown by
    ``margin`` pixels and clamped to the image."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise MetricError("mask is empty")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    H, W = mask.shape
    return (max(rows[0] - margin, 0), min(rows[-1] + margin + 1, H),
            max(cols[0] - margin, 0), min(cols[-1] + margin + 1, W))


def psnr_restricted(render, reference, gt_mask, margin=PSNR_MARGIN):
    """PSNR of [0, 1] images inside the mask's expanded bounding box.  Returns
    the string "inf" when the region matches exactly."""
    render = np.asarray(render, float)
    reference = np.asarray(reference, float)
    if render.shape != reference.shape or render.shape[:2] != np.shape(gt_mask):
        raise MetricError("render, reference and mask must share their image size")
    r0, r1, c0, c1 = expanded_bbox(gt_mask, margin)
    p = psnr(render[r0:r1, c0:c1], reference[r0:r1, c0:c1])
    return INF if math.isinf(p) else p


def mask_from_render(render, eps=RENDER_EPS):
    """Pixels where any channel exceeds eps."""
    return (np.asarray(render, float) > eps).any(axis=-1)


def mask_iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError("mask shapes differ")
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
