"""Slow, obviously-correct reference implementations used by the tests.

None of these import from cropseg; they are written from the definitions.
"""
from __future__ import annotations

import math

import numpy as np


def bilinear_scalar(img, target_w, target_h):
    """Pixel-by-pixel bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    out = np.zeros((target_h, target_w) + img.shape[2:])
    for y in range(target_h):
        sy = min(max((y + 0.5) * h / target_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(target_w):
            sx = min(max((x + 0.5) * w / target_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bot * fy
    return out


def conv2d_loops(x, weight, bias=None):
    """Direct cross-correlation, stride 1, zero 'same' padding, NCHW."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, o, h, w))
    for b in range(n):
        for oc in range(o):
            for i in range(h):
                for j in range(w):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i + u - ph, j + v - pw
                                if 0 <= y < h and 0 <= xx < w:
                                    acc += x[b, ic, y, xx] * weight[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


def confusion_loops(gt, pred, k=3):
    cm = np.zeros((k, k), dtype=np.int64)
    for g, p in zip(np.ravel(gt), np.ravel(pred)):
        cm[int(g), int(p)] += 1
    return cm


def metrics_from_confusion(cm):
    """IoU, precision, recall per class with None for 0/0, and mIoU over defined IoUs."""
    k = len(cm)
    iou, prec, rec = [], [], []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c][r] for r in range(k)) - tp
        iou.append(tp / (tp + fp + fn) if tp + fp + fn else None)
        prec.append(tp / (tp + fp) if tp + fp else None)
        rec.append(tp / (tp + fn) if tp + fn else None)
    defined = [v for v in iou if v is not None]
    return iou, prec, rec, (sum(defined) / len(defined) if defined else None)


def flood_fill_components(mask, cls, min_area):
    """4-connected components of ``mask == cls`` by explicit stack flood fill.

    Returns a list of pixel-coordinate sets, sorted by their first pixel.
    """
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] != cls or seen[y, x]:
                continue
            stack, pix = [(y, x)], set()
            seen[y, x] = True
            while stack:
                cy, cx = stack.pop()
                pix.add((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and mask[ny, nx] == cls:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            if len(pix) >= min_area:
                comps.append(pix)
    return comps


def majority_or_soil(values):
    counts = [0, 0, 0]
    for v in values:
        counts[int(v)] += 1
    top = max(counts)
    return counts.index(top) if counts.count(top) == 1 else 0


def otsu_exhaustive(values, bins=256, rtol=1e-9):
    """Try every inner bin edge as threshold; score with pixel-level class means."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    best_t, best_score, scores = None, -1.0, []
    for k in range(1, bins):
        t = lo + (hi - lo) * k / bins
        bg, fg = v[v <= t], v[v > t]
        if len(bg) == 0 or len(fg) == 0:
            scores.append((t, -1.0))
            continue
        score = len(bg) * len(fg) * (bg.mean() - fg.mean()) ** 2
        scores.append((t, score))
        best_score = max(best_score, score)
    for t, score in scores:
        if score >= best_score - rtol * abs(best_score):
            best_t = t
            break
    return best_t


def hand_parameter_tally(in_ch=14, depth=16, mid=8, k=5, classes=3, blocks=24):
    """Parameter count of the default network, written out term by term."""
    first = k * k * in_ch * depth + 2 * depth                   # conv + BN
    block = (depth * mid + 2 * mid                              # 1x1 reduce + BN
             + k * mid * mid + 2 * mid                          # kx1 + BN
             + k * mid * mid + 2 * mid                          # 1xk + BN
             + mid * depth + 2 * depth)                         # 1x1 expand + BN
    head = depth * classes + classes
    return first + blocks * block + head


def receptive_field_recurrence(ops):
    """ops: list of (kernel, stride); r <- r + (k - 1) * j, j <- j * s."""
    r, j = 1, 1
    for k, s in ops:
        r += (k - 1) * j
        j *= s
    return r
