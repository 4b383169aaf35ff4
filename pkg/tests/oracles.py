"""Brute-force reference implementations used as test oracles."""

from collections import deque
from itertools import product

import numpy as np

from segmeta.metrics import dispersion_maps

NEIGHBOURS_8 = [(dr, dc) for dr, dc in product((-1, 0, 1), repeat=2) if (dr, dc) != (0, 0)]
NEIGHBOURS_4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]


def flood_fill(mask, excluded=None):
    """Components as (class, frozenset of pixels), ordered by first raster pixel."""
    mask = np.asarray(mask)
    h, w = mask.shape
    excluded = np.zeros((h, w), bool) if excluded is None else excluded
    seen = np.zeros((h, w), bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if seen[r, c] or excluded[r, c]:
                continue
            cls = mask[r, c]
            pix = set()
            todo = deque([(r, c)])
            seen[r, c] = True
            while todo:
                y, x = todo.popleft()
                pix.add((y, x))
                for dr, dc in NEIGHBOURS_8:
                    yy, xx = y + dr, x + dc
                    if (0 <= yy < h and 0 <= xx < w and not seen[yy, xx]
                            and not excluded[yy, xx] and mask[yy, xx] == cls):
                        seen[yy, xx] = True
                        todo.append((yy, xx))
            comps.append((int(cls), frozenset(pix)))
    return comps


def boundary_of(pixels, h, w):
    out = set()
    for y, x in pixels:
        for dr, dc in NEIGHBOURS_4:
            yy, xx = y + dr, x + dc
            if not (0 <= yy < h and 0 <= xx < w) or (yy, xx) not in pixels:
                out.add((y, x))
                break
    return out


def brute_iou(cls, pixels, gt_comps):
    """IoU of one predicted component against the union of touching same-class gt components."""
    k_prime = set()
    for gcls, gpix in gt_comps:
        if gcls == cls and gpix & pixels:
            k_prime |= gpix
    if not k_prime:
        return 0.0
    return len(pixels & k_prime) / len(pixels | k_prime)


def brute_precision(cls, pixels, gt_comps):
    region = set().union(*[p for c, p in gt_comps if c == cls]) if gt_comps else set()
    return len(pixels & region) / len(pixels)


def brute_recall(cls, pixels, pred_comps):
    region = set().union(*[p for c, p in pred_comps if c == cls]) if pred_comps else set()
    return len(pixels & region) / len(pixels)


def pair_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def brute_cost_decision(p, costs):
    h, w, q = p.shape
    out = np.zeros((h, w), np.int32)
    for r in range(h):
        for c in range(w):
            best, best_cost = 0, None
            for yp in range(q):
                cost = sum(costs[yp, y] * p[r, c, y] for y in range(q) if y != yp)
                if best_cost is None or cost < best_cost:
                    best, best_cost = yp, cost
            out[r, c] = best
    return out


def random_probs(rng, h, w, q, sharp=1.0):
    logits = rng.normal(size=(h, w, q)) * sharp
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_mask(rng, h, w, q, blocky=True):
    """Random label map; blocky maps have larger components than i.i.d. noise."""
    if blocky and rng.uniform() < 0.5:
        bh, bw = rng.integers(1, 5, 2)
        small = rng.integers(0, q, (-(-h // bh), -(-w // bw)))
        return np.kron(small, np.ones((bh, bw), int))[:h, :w].astype(np.uint8)
    return rng.integers(0, q, (h, w)).astype(np.uint8)


def brute_rows(p, mask, excluded=None):
    """Per-segment features by explicit loops over pixel lists."""
    h, w, q = p.shape
    d = dispersion_maps(p)
    maps = [d.entropy, d.variation_ratio, d.margin]
    rows = []
    for cls, pix in flood_fill(mask, excluded):
        bd = boundary_of(pix, h, w)
        inner = pix - bd
        row = [len(pix), len(inner), len(bd), len(pix) / len(bd), len(inner) / len(bd)]
        for m in maps:
            for sub in (pix, bd, inner):
                row.append(sum(m[r, c] for r, c in sorted(sub)) / len(sub) if sub else 0.0)
        for y in range(q):
            row.append(sum(p[r, c, y] for r, c in sorted(pix)) / len(pix))
        row += [cls, float(bool(inner))]
        rows.append(row)
    return np.array(rows)


def on_segment(x, a, b, scale, tol=1e-9):
    """True if x = (1-u) a + u b for one u in [0, 1], checked coordinate-wise in z-space."""
    x, a, b = x / scale, a / scale, b / scale
    d = b - a
    moving = np.abs(d) > tol
    if not moving.any():
        return np.all(np.abs(x - a) <= tol)
    u = (x[moving] - a[moving]) / d[moving]
    if np.ptp(u) > 1e-7 or u.min() < -tol or u.max() > 1 + tol:
        return False
    return np.all(np.abs(x - (a + u.mean() * d)) <= tol)
