"""Independent brute-force references used to validate the package.

Everything here is written directly from the defining formulas with plain
loops and no shared code with the implementation under test: scaled
dot-product attention head by head and row by row, deformable attention
term by term, assignment by exhaustive permutation search, and the
retrieval protocol (AP / CMC) as a naive scan.
"""

import itertools
import math

import numpy as np


def softmax_vec(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def mha_oracle(y, wq, wk, wv, wo):
    """Multi-head attention, one arithmetic term at a time.

    y: (N, d); wq/wk/wv: lists of (d, dk); wo: (H*dk, d).
    """
    n, _ = y.shape
    dk = wq[0].shape[1]
    head_outs = []
    for h in range(len(wq)):
        q = y @ wq[h]
        k = y @ wk[h]
        v = y @ wv[h]
        out = np.zeros((n, dk))
        for i in range(n):
            logits = np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(dk)
            a = softmax_vec(logits)
            for j in range(n):
                out[i] += a[j] * v[j]
        head_outs.append(out)
    return np.concatenate(head_outs, axis=1) @ wo


def bilinear_oracle(fmap, x, y):
    """Four-corner interpolation of a (C, H, W) map with zero padding."""
    c, hh, ww = fmap.shape
    x0 = int(math.ceil(x)) - 1
    y0 = int(math.ceil(y)) - 1
    dx, dy = x - x0, y - y0

    def at(yy, xx):
        if 0 <= yy < hh and 0 <= xx < ww:
            return fmap[:, yy, xx]
        return np.zeros(c)

    return (
        at(y0, x0) * (1 - dx) * (1 - dy)
        + at(y0, x0 + 1) * dx * (1 - dy)
        + at(y0 + 1, x0) * (1 - dx) * dy
        + at(y0 + 1, x0 + 1) * dx * dy
    )


def deform_oracle(z, refs, maps, w_offset, b_offset, w_weight, b_weight, w_value, w_out):
    """Deformable attention, looped per query / head / level / sample.

    refs: list of (x, y) normalized points; maps: list of (C, Hf, Wf)
    arrays.  Offsets and weights follow the head-major, then level, then
    sample column layout; A normalizes per head over all level*sample
    entries.  Sampling happens at pixel units (x*(Wf-1), y*(Hf-1)) plus the
    predicted offset.
    """
    n, d = z.shape
    heads = len(w_value)
    levels = len(maps)
    points = (w_offset.shape[1] // 2) // (heads * levels)
    out = np.zeros((n, d))
    for q in range(n):
        off = z[q] @ w_offset + b_offset
        logit = z[q] @ w_weight + b_weight
        for h in range(heads):
            a = softmax_vec(logit[h * points * levels : (h + 1) * points * levels])
            inner = np.zeros(w_value[h].shape[1])
            for lv in range(levels):
                fmap = maps[lv]
                _, hh, ww = fmap.shape
                base_x = refs[q][0] * (ww - 1)
                base_y = refs[q][1] * (hh - 1)
                for s in range(points):
                    k = h * levels * points + lv * points + s
                    px = base_x + off[2 * k]
                    py = base_y + off[2 * k + 1]
                    sample = bilinear_oracle(fmap, px, py)
                    inner += a[lv * points + s] * (sample @ w_value[h])
            out[q] += inner @ w_out[h]
    return out


def hungarian_oracle(cost):
    """Minimum-cost assignment by exhaustive permutation search.

    Works on rectangular matrices by assigning min(n, m) pairs; returns
    (best pair set, best total cost).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best = None
    best_total = math.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[i, perm[i]] for i in range(n))
            if total < best_total - 1e-15:
                best_total = total
                best = [(i, perm[i]) for i in range(n)]
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(cost[perm[j], j] for j in range(m))
            if total < best_total - 1e-15:
                best_total = total
                best = [(perm[j], j) for j in range(m)]
    return best, best_total


def iou_oracle(a, b):
    """IoU of two (x1, y1, x2, y2) boxes."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def rank_one_query_oracle(query_emb, query_scene, identity, entries, truth, iou_thr=0.5):
    """Naive ranking of gallery entries for one query.

    entries: list of (scene_id, box, embedding) excluding nothing; the
    query's own scene is skipped here.  truth: scene_id -> list of
    (box, identity).  Candidates sort by cosine similarity (descending,
    ties by original list order).  A candidate is correct when it overlaps
    an unclaimed ground-truth box of the query identity at IoU >= iou_thr,
    claiming greedily in rank order.

    Returns (flags, sims, num_relevant).
    """
    cand = [
        (i, e) for i, e in enumerate(entries) if e[0] != query_scene
    ]
    sims = []
    for _, (scene, box, emb) in cand:
        sims.append(float(np.dot(query_emb, emb)))
    order = sorted(range(len(cand)), key=lambda i: (-sims[i], i))
    claimed = set()
    flags = []
    sorted_sims = []
    for idx in order:
        scene, box, _ = cand[idx][1]
        sorted_sims.append(sims[idx])
        hit = False
        for g, (gt_box, gt_id) in enumerate(truth.get(scene, [])):
            if gt_id != identity or (scene, g) in claimed:
                continue
            if iou_oracle(box, gt_box) >= iou_thr:
                claimed.add((scene, g))
                hit = True
                break
        flags.append(1 if hit else 0)
    num_relevant = sum(
        1
        for scene, boxes in truth.items()
        if scene != query_scene
        for _, gt_id in boxes
        if gt_id == identity
    )
    return flags, sorted_sims, num_relevant


def ap_oracle(flags, num_relevant):
    """AP = sum over hits of precision-at-that-rank, over num_relevant."""
    if num_relevant <= 0:
        raise ValueError("need at least one relevant instance")
    hits = 0
    total = 0.0
    for r, f in enumerate(flags, start=1):
        if f:
            hits += 1
            total += hits / r
    return total / num_relevant


def cmc_oracle(flags, k):
    return 1.0 if any(flags[:k]) else 0.0
