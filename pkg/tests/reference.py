"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, no shared code with the
package) so they can arbitrate the fast paths.
"""

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct sextuple-loop convolution, row-major accumulation order."""
    s = (stride, stride) if np.isscalar(stride) else tuple(stride)
    p = (padding, padding) if np.isscalar(padding) else tuple(padding)
    d = (dilation, dilation) if np.isscalar(dilation) else tuple(dilation)
    n_, c_, h_, w_ = x.shape
    o_, cg, kh, kw = w.shape
    ho = (h_ + 2 * p[0] - d[0] * (kh - 1) - 1) // s[0] + 1
    wo = (w_ + 2 * p[1] - d[1] * (kw - 1) - 1) // s[1] + 1
    out = np.zeros((n_, o_, ho, wo), dtype=x.dtype)
    og = o_ // groups
    for n in range(n_):
        for o in range(o_):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        c = g * cg + ci
                        for u in range(kh):
                            for v in range(kw):
                                hi = i * s[0] - p[0] + u * d[0]
                                wi = j * s[1] - p[1] + v * d[1]
                                if 0 <= hi < h_ and 0 <= wi < w_:
                                    acc += x[n, c, hi, wi] * w[o, ci, u, v]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_maxpool2d(x, k, stride, padding):
    n_, c_, h_, w_ = x.shape
    ho = (h_ + 2 * padding - k) // stride + 1
    wo = (w_ + 2 * padding - k) // stride + 1
    out = np.full((n_, c_, ho, wo), -np.inf, dtype=x.dtype)
    for n in range(n_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    for u in range(k):
                        for v in range(k):
                            hi = i * stride - padding + u
                            wi = j * stride - padding + v
                            if 0 <= hi < h_ and 0 <= wi < w_:
                                out[n, c, i, j] = max(out[n, c, i, j], x[n, c, hi, wi])
    return out


def box_iou_xyxy(a, b):
    """Plain IoU of two [x1, y1, x2, y2] boxes."""
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(dets, gts, threshold):
    """Single-class 101-point AP by explicit PR-curve construction.

    dets: list of (image_idx, score, box_xyxy); gts: list of (image_idx, box).
    Ties in score break by (image, submission order); a detection matches the
    highest-IoU unmatched GT of its image at IoU >= threshold, ties to the
    lowest GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], i))
    matched = [False] * len(gts)
    tps = []
    for i in order:
        img, _, box = dets[i]
        best_iou, best_j = -1.0, -1
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or matched[j]:
                continue
            iou = box_iou_xyxy(box, gbox)
            if iou >= threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tps.append(True)
        else:
            tps.append(False)
    n_gt = len(gts)
    if n_gt == 0:
        return float("nan")
    precisions, recalls = [], []
    tp_cum = 0
    for k, flag in enumerate(tps, 1):
        tp_cum += flag
        precisions.append(tp_cum / k)
        recalls.append(tp_cum / n_gt)
    total = 0.0
    for step in range(101):
        r = step / 100.0
        best_p = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best_p:
                best_p = p
        total += best_p
    return total / 101.0
