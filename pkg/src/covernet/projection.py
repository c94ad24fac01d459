"""Two-dimensional PCA view of softmax activation vectors.

Each test image's probability vector is a point; the class axes are the
images of the unit vectors e_0..e_{C-1} under the same centring and
projection, so a fully confident prediction for class i lands on the tip
of arrow i.
"""

from __future__ import annotations

import colorsys
import csv
import io
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import DegenerateProjectionError

TOLERANCE = 1e-10
MAX_ITERATIONS = 10_000


@dataclass
class Projection2D:
    points: np.ndarray               # n x 2
    class_axes: np.ndarray           # C x 2
    labels: np.ndarray               # n
    explained_variance: np.ndarray   # 2, descending
    components: np.ndarray           # C x 2, unit columns
    mean: np.ndarray                 # C


def power_iteration(a, start, tol=TOLERANCE, max_iter=MAX_ITERATIONS, orthogonal_to=None):
    """Dominant eigenpair of symmetric PSD ``a``. Returns ``(value, vector, converged)``."""
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = a @ v
        if orthogonal_to is not None:
            w -= orthogonal_to * (orthogonal_to @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v, True
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return float(w @ a @ w), w, True
        v = w
    return float(v @ a @ v), v, False


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix, eigenvalues descending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p].copy(), a[q].copy()
                a[p], a[q] = c * rp - s * rq, s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * cp - s * cq, s * cp + c * cq
                vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p], vecs[:, q] = c * vp - s * vq, s * vp + c * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], vecs[:, order]


def _fix_sign(v):
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def top2_eigenpairs(cov, tol=TOLERANCE, max_iter=MAX_ITERATIONS):
    """Leading two eigenpairs by power iteration + deflation (Jacobi if it stalls)."""
    n = cov.shape[0]
    starts = np.random.default_rng(0).standard_normal((2, n))
    lam1, v1, ok1 = power_iteration(cov, starts[0], tol, max_iter)
    deflated = cov - lam1 * np.outer(v1, v1)
    lam2, v2, ok2 = power_iteration(deflated, starts[1], tol, max_iter, orthogonal_to=v1)
    if not (ok1 and ok2):
        values, vectors = jacobi_eigh(cov)
        lam1, lam2 = values[:2]
        v1, v2 = vectors[:, 0], vectors[:, 1]
    return np.array([lam1, lam2]), np.stack([_fix_sign(v1), _fix_sign(v2)], axis=1)


def pca_project(probs, labels=None) -> Projection2D:
    """Centre the rows and project onto the two leading covariance eigenvectors."""
    if hasattr(probs, "probs"):
        labels = probs.labels if labels is None else labels
        probs = probs.probs
    x = np.asarray(probs, dtype=np.float64)
    n, c = x.shape
    if n < 3:
        raise DegenerateProjectionError(f"need at least 3 rows, got {n}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    values, comps = top2_eigenpairs(cov)
    floor = 1e-12 * max(float(np.trace(cov)), 0.0)
    if not values[1] > floor:
        raise DegenerateProjectionError("covariance has fewer than two positive eigenvalues")
    points = centred @ comps
    axes = (np.eye(c) - mean) @ comps
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return Projection2D(points, axes, labels, values, comps, mean)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def palette(count=30):
    """``count`` evenly spaced hues as ``#rrggbb``."""
    out = []
    for i in range(count):
        r, g, b = colorsys.hsv_to_rgb(i / count, 0.85, 0.9 if i % 2 == 0 else 0.7)
        out.append("#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255)))
    return out


def projection_csv(p: Projection2D, class_names) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "x", "y", "classId", "className"])
    for (x, y), label in zip(p.points, p.labels):
        w.writerow(["point", repr(float(x)), repr(float(y)), int(label), class_names[label]])
    for i, (x, y) in enumerate(p.class_axes):
        w.writerow(["axis", repr(float(x)), repr(float(y)), i, class_names[i]])
    return buf.getvalue().encode("utf-8")


def read_projection_csv(data: bytes):
    """Return ``(points, labels, axes)`` from :func:`projection_csv` output."""
    points, labels, axes = [], [], []
    reader = csv.DictReader(io.StringIO(data.decode("utf-8")))
    for row in reader:
        xy = (float(row["x"]), float(row["y"]))
        if row["kind"] == "point":
            points.append(xy)
            labels.append(int(row["classId"]))
        else:
            axes.append(xy)
    return np.array(points).reshape(-1, 2), np.array(labels, dtype=np.int64), np.array(axes).reshape(-1, 2)


def projection_svg(p: Projection2D, class_names, size=900, margin=60) -> bytes:
    colors = palette(len(class_names))
    everything = np.vstack([p.points, p.class_axes, np.zeros((1, 2))])
    lo, hi = everything.min(axis=0), everything.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-12)
    scale = (size - 2 * margin) / span

    def sx(x):
        return margin + (x - lo[0]) * scale

    def sy(y):
        return size - margin - (y - lo[1]) * scale

    ox, oy = sx(0.0), sy(0.0)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" "
        "markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#333\"/></marker></defs>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
        '<g id="points">',
    ]
    for (x, y), label in zip(p.points, p.labels):
        out.append(f'<circle class="point" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" '
                   f'fill="{colors[label]}" fill-opacity="0.7"/>')
    out.append("</g>")
    out.append('<g id="axes">')
    for i, (x, y) in enumerate(p.class_axes):
        out.append(f'<line class="axis" x1="{ox:.2f}" y1="{oy:.2f}" x2="{sx(x):.2f}" y2="{sy(y):.2f}" '
                   f'stroke="{colors[i]}" stroke-width="1.5" marker-end="url(#arrow)"/>')
        out.append(f'<text x="{sx(x):.2f}" y="{sy(y):.2f}" font-size="10" font-family="sans-serif" '
                   f'fill="#222">{escape(class_names[i])}</text>')
    out.append("</g>")
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


def export_projection(p: Projection2D, class_names):
    """``(csv_bytes, svg_bytes)``."""
    return projection_csv(p, class_names), projection_svg(p, class_names)
