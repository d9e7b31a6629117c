"""Slow, independent reference implementations used by the test-suite.

None of these import from the package's implementation of the thing they check.
"""
import math
from collections import deque

import numpy as np


def naive_instance_loss(f, i, j, tau):
    """Double loop over the printed formula, in float64 python math."""
    f = np.asarray(f, dtype=np.float64)
    n, k, _ = f.shape

    def sim(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    num = 0.0
    for v in range(k):
        if v != j:
            num += math.exp(sim(f[i, j], f[i, v]) / tau)
    den = 0.0
    for m in range(n):
        if m == i:
            continue
        for v in range(k):
            den += math.exp(sim(f[i, j], f[m, v]) / tau)
    return -math.log(num / den)


def naive_batch_loss(f, tau):
    n, k = np.asarray(f).shape[:2]
    total = 0.0
    for i in range(n):
        for j in range(k):
            total += naive_instance_loss(f, i, j, tau)
    return total / (n * k)


def naive_ntxent_instance_loss(f, i, j, tau):
    f = np.asarray(f, dtype=np.float64)
    n, k, _ = f.shape
    u = f[i, j] / np.linalg.norm(f[i, j])
    den = 0.0
    for m in range(n):
        for v in range(k):
            if (m, v) != (i, j):
                den += math.exp(float(u @ (f[m, v] / np.linalg.norm(f[m, v]))) / tau)
    total = 0.0
    for v in range(k):
        if v != j:
            s = float(u @ (f[i, v] / np.linalg.norm(f[i, v]))) / tau
            total += -(s - math.log(den))
    return total / (k - 1)


def flood_fill_components(values, t):
    """All 4-connected components of ``values > t`` by explicit BFS."""
    values = np.asarray(values)
    h, w = values.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if seen[r, c] or not values[r, c] > t:
                continue
            pix = []
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                pix.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not seen[yy, xx] and values[yy, xx] > t:
                        seen[yy, xx] = True
                        queue.append((yy, xx))
            comps.append(pix)
    return comps


def oracle_dar(values, t):
    """Chosen component as ``(pixel mask, peak, (x, y, h, w))`` or ``None`` if empty."""
    values = np.asarray(values)
    best, best_key = None, None
    for pix in flood_fill_components(values, t):
        peak = max(values[p] for p in pix)
        first_peak = min(p for p in pix if values[p] == peak)
        key = (-peak, -len(pix), first_peak)
        if best_key is None or key < best_key:
            best, best_key = pix, key
    if best is None:
        return None
    mask = np.zeros(values.shape, dtype=bool)
    for p in best:
        mask[p] = True
    ys = [p[0] for p in best]
    xs = [p[1] for p in best]
    box = (min(xs), min(ys), max(ys) - min(ys) + 1, max(xs) - min(xs) + 1)
    return mask, -best_key[0], box


def set_metrics(target, pred, num_classes):
    """IoU / OA / Acc straight from pixel sets: |P & T| / |P | T| etc."""
    target = np.asarray(target).ravel()
    pred = np.asarray(pred).ravel()
    iou, acc = {}, {}
    for c in range(num_classes):
        p = {k for k, v in enumerate(pred) if v == c}
        g = {k for k, v in enumerate(target) if v == c}
        if p | g:
            iou[c] = len(p & g) / len(p | g)
        if g:
            acc[c] = len(p & g) / len(g)
    correct = sum(1 for a, b in zip(target, pred) if a == b)
    return {
        "iou": iou,
        "acc": acc,
        "miou": sum(iou.values()) / len(iou),
        "macc": sum(acc.values()) / len(acc),
        "oa": correct / len(target),
    }


def central_difference(fn, x, step, indices):
    """Central finite differences of scalar ``fn`` at flat ``indices`` of array ``x``."""
    x = np.array(x, dtype=np.float64)
    out = []
    flat = x.reshape(-1)
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + step
        up = fn(x)
        flat[idx] = orig - step
        down = fn(x)
        flat[idx] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)
