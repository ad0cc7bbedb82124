"""Independent reference computations used by the unit and acceptance tests."""
from collections import deque

import numpy as np

from ugtst.segmenter import loss_and_grad


def _split(batch, num_classes):
    # documented flat layout: w1 (8,1,3,3), b1, w2 (16,8,3,3), b2, w3 (C,16), b3
    shapes = [(8, 1, 3, 3), (8,), (16, 8, 3, 3), (16,), (num_classes, 16), (num_classes,)]
    out, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(batch[:, off:off + n].reshape((-1,) + s))
        off += n
    assert off == batch.shape[1]
    return out


def _conv_batched(x, w, b):
    # x: (P, Cin, H, W), w: (P, Cout, Cin, 3, 3); explicit sum over the nine taps
    h, wd = x.shape[2:]
    xp = np.zeros(x.shape[:2] + (h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((x.shape[0], w.shape[1], h * wd))
    for i in range(3):
        for j in range(3):
            tap = xp[:, :, i:i + h, j:j + wd].reshape(x.shape[0], x.shape[1], h * wd)
            out += np.matmul(w[..., i, j], tap)
    return out.reshape(x.shape[0], -1, h, wd) + b[:, :, None, None]


def objectives(batch, image, target, weight, num_classes):
    """Loss of one slice under each parameter vector in ``batch`` (P, n),
    written out directly from the Dice + cross-entropy definition.
    Also returns the sign patterns of both pre-activations."""
    w1, b1, w2, b2, w3, b3 = _split(batch, num_classes)
    x = np.broadcast_to(np.asarray(image, dtype=np.float64), (len(batch), 1) + image.shape)
    z1 = _conv_batched(x, w1, b1)
    z2 = _conv_batched(np.maximum(z1, 0), w2, b2)
    logits = np.einsum("pck,pkhw->pchw", w3, np.maximum(z2, 0)) + b3[:, :, None, None]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    prob = np.exp(logp)
    y = np.asarray(target)
    onehot = (y[None] == np.arange(num_classes)[:, None, None]).astype(float)
    ce = -(logp * onehot[None]).sum(axis=1).mean(axis=(1, 2))
    eps = 1e-5
    inter = (prob[:, 1:] * onehot[None, 1:]).sum(axis=(2, 3))
    size = prob[:, 1:].sum(axis=(2, 3)) + onehot[None, 1:].sum(axis=(2, 3))
    dice = (1 - (2 * inter + eps) / (size + eps)).mean(axis=1)
    return weight * 0.5 * (dice + ce), z1 > 0, z2 > 0


def finite_difference_check(params, images, targets, weights, num_classes, step=1e-3):
    """Compare analytic and central-difference gradients component by component.

    Components whose +-step stencil flips any ReLU are not differentiable over
    the stencil and are reported separately instead of compared.
    Returns (max_relative_error, n_checked, n_kink).
    """
    _, analytic = loss_and_grad(params, images, targets, weights, num_classes)
    n = params.size
    batch = np.concatenate([params[None], params + step * np.eye(n), params - step * np.eye(n)])
    total = np.zeros(len(batch))
    kink = np.zeros(n, dtype=bool)
    for img, tgt, w in zip(images, targets, weights):
        f, s1, s2 = objectives(batch, img, tgt, w, num_classes)
        total += f / len(images)
        for s in (s1, s2):
            flips = (s[1:] != s[:1]).reshape(2 * n, -1).any(axis=1)
            kink |= flips[:n] | flips[n:]
    fd = (total[1:n + 1] - total[n + 1:]) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
    rel = np.abs(fd - analytic) / denom
    ok = ~kink
    worst = float(rel[ok].max()) if ok.any() else 0.0
    return worst, int(ok.sum()), int(kink.sum())


def scan_oracle(densities, epsilon):
    """Exhaustive scan of the two peak conditions, written independently."""
    d = [float(v) for v in densities]
    n = len(d)
    first = [d[i + 1] - d[i] for i in range(n - 1)]
    delta = epsilon * max(abs(v) for v in first)
    cands = [i for i in range(1, n - 1)
             if abs(first[i]) < delta and d[i + 1] - 2 * d[i] + d[i - 1] < 0]
    if cands:
        return cands[0], False
    best = max(range(n), key=lambda i: (d[i], -i))
    return best, True


def flood_fill_components(mask):
    """Face-connected components by BFS; returns a list of pixel-index lists
    in order of each component's first pixel in raster order."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    offsets = []
    for ax in range(mask.ndim):
        for s in (-1, 1):
            o = [0] * mask.ndim
            o[ax] = s
            offsets.append(tuple(o))
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = [], deque([start])
        while queue:
            p = queue.popleft()
            comp.append(p)
            for o in offsets:
                q = tuple(a + b for a, b in zip(p, o))
                if all(0 <= q[k] < mask.shape[k] for k in range(mask.ndim)) \
                        and mask[q] and not seen[q]:
                    seen[q] = True
                    queue.append(q)
        comps.append(comp)
    return comps


def largest_component_oracle(mask):
    comps = flood_fill_components(mask)
    out = np.zeros(np.shape(mask), dtype=bool)
    if comps:
        best = max(comps, key=len)  # max keeps the first of equal sizes
        for p in best:
            out[p] = True
    return out


def brute_hd95(pred, gt):
    from ugtst.metrics import boundary
    bp, bg = np.argwhere(boundary(pred)), np.argwhere(boundary(gt))
    pool = []
    for a in bp:
        pool.append(min(np.sqrt(((a - b) ** 2).sum()) for b in bg))
    for b in bg:
        pool.append(min(np.sqrt(((a - b) ** 2).sum()) for a in bp))
    return float(np.percentile(pool, 95))
