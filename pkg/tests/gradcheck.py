"""Seeded strict-extremum configurations for the corner-loss gradient check."""

import numpy as np

from pseudolabel.geometry import BBox, corners
from pseudolabel.losses import MatchedPair, corner_term, cprl_loss

from oracles import central_difference

H_STEP = 1e-5
MARGIN = 10 * H_STEP


def _strict(values, margin=MARGIN):
    v = np.sort(np.asarray(values).ravel())
    return v[1] - v[0] >= margin and v[-1] - v[-2] >= margin


def quad_configs(n, seed=0):
    """Jittered rectangles: every extremum of the eight points is unique."""
    rng = np.random.default_rng([seed, 0xC0])
    out = []
    while len(out) < n:
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(5, 40, 2)
        ct = corners(BBox(x1, y1, x1 + w, y1 + h)) + rng.normal(0, 0.5, (4, 2))
        cs = ct + rng.normal(0, 4.0, (4, 2))
        pts = np.vstack([ct, cs])
        if _strict(pts[:, 0]) and _strict(pts[:, 1]):
            out.append((ct, cs))
    return out


def box_configs(n, seed=0):
    """Rectangle pairs whose enclosing-rectangle edges each come from one box."""
    rng = np.random.default_rng([seed, 0xB0])
    out = []
    while len(out) < n:
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(5, 40, 2)
        t = np.array([x1, y1, x1 + w, y1 + h])
        s = t + rng.normal(0, 4.0, 4)
        if s[2] - s[0] < 1 or s[3] - s[1] < 1:
            continue
        if all(abs(t[k] - s[k]) >= MARGIN for k in range(4)):
            out.append((t, s))
    return out


def check_quad(ct, cs, rel_tol=1e-4):
    _, g = corner_term(ct, cs)
    fd = central_difference(lambda c: corner_term(ct, c.reshape(4, 2))[0], cs, H_STEP)
    return _close(g, fd, rel_tol)


def check_boxes(t, s, rel_tol=1e-4, extra_pairs=1):
    """cprl_loss over one test pair plus fixed extra pairs (exercises 1/N)."""
    teacher = BBox(*t)
    extras = [MatchedPair(BBox(0, 0, 10, 10), BBox(1, 1, 12, 10), 0.9, 0.7)] * extra_pairs

    def loss(sv):
        pair = MatchedPair(BBox(*sv), teacher, 0.9, 0.5)
        return cprl_loss([pair] + extras)[0]

    _, grads = cprl_loss([MatchedPair(BBox(*s), teacher, 0.9, 0.5)] + extras)
    g = grads[0]
    # corners are TL, TR, BR, BL; chain rule onto (x1, y1, x2, y2)
    g_box = np.array([g[0, 0] + g[3, 0], g[0, 1] + g[1, 1],
                      g[1, 0] + g[2, 0], g[2, 1] + g[3, 1]])
    fd = central_difference(loss, s, H_STEP)
    return _close(g_box, fd, rel_tol)


def _close(g, fd, rel_tol):
    err = np.abs(g - fd)
    scale = np.maximum(np.abs(fd), np.abs(g))
    # entries that are zero analytically are compared absolutely at the same level
    ok = err <= rel_tol * np.maximum(scale, 1e-6 * np.max(np.abs(fd)) + 1e-12)
    return bool(np.all(ok)), float(np.max(err / np.maximum(scale, 1e-12)))
