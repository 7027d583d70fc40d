"""Hand-crafted detector: Sobel edges, per-anchor peak picking, quadratic rail fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .grid import RailPrediction, RowAnchorGrid

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def sobel(image) -> np.ndarray:
    """Gradient magnitude ``sqrt(Gx^2 + Gy^2)``; the one-pixel border is zero."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValidationError(f"sobel needs a 2-d image of at least 3x3, got {img.shape}")
    h, w = img.shape
    gx = np.zeros((h - 2, w - 2))
    gy = np.zeros((h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            win = img[i : i + h - 2, j : j + w - 2]
            gx += SOBEL_X[i, j] * win
            gy += SOBEL_Y[i, j] * win
    out = np.zeros((h, w))
    out[1:-1, 1:-1] = np.hypot(gx, gy)
    return out


@dataclass(frozen=True)
class BaselineConfig:
    percentile: float = 95.0
    nms_window: int = 5
    gate: float = 10.0  # px at desk width; wider gates jump between converging rails
    degree: int = 2
    min_support: int = 3
    max_gap: int = 2  # anchors a track may skip before it is closed
    merge_tol: float = 1.5  # rms px for joining two fragments into one rail
    outlier_tol: float = 3.0  # px; worst points beyond this are dropped and the fit redone
    duplicate_tol: float = 3.0  # px; a weaker track mostly this close to a kept one is dropped


def _peaks(row, percentile, window):
    if not np.any(row > 0):
        return np.zeros(0)
    half = window // 2
    # merge the two flanks of a slender bright stroke into one bump
    smooth = np.convolve(row, np.ones(window) / window, mode="same")
    thr = np.percentile(smooth, percentile)
    n = len(smooth)
    inner = np.arange(1, n - 1)
    is_max = (smooth[inner] >= smooth[inner - 1]) & (smooth[inner] >= smooth[inner + 1]) & \
        (smooth[inner] > thr) & (smooth[inner] > 0)
    cand = inner[is_max]
    kept = []
    for x in cand[np.argsort(-smooth[cand], kind="stable")]:
        if all(abs(x - k) > half for k in kept):
            kept.append(int(x))
    kept.sort()
    out = []
    for x in kept:
        a, b, c = smooth[x - 1], smooth[x], smooth[x + 1]
        den = a - 2 * b + c
        out.append(x + (0.5 * (a - c) / den if den < 0 else 0.0))
    return np.asarray(out)


def extract_candidates(edges, anchors, percentile=95.0, nms_window=5) -> list:
    """Per anchor row: sub-pixel x of edge-magnitude peaks above the row percentile."""
    edges = np.asarray(edges, dtype=np.float64)
    h = edges.shape[0]
    out = []
    for y in anchors:
        r = int(np.clip(round(float(y)), 0, h - 1))
        out.append(_peaks(edges[r], percentile, nms_window))
    return out


def fit_polynomial(ys, xs, degree=2) -> np.ndarray:
    """Least-squares ``x(y)`` coefficients, highest power first."""
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    vander = np.vander(ys, degree + 1)
    scale = np.abs(vander).max(axis=0)
    scale[scale == 0] = 1.0
    coef, *_ = np.linalg.lstsq(vander / scale, xs, rcond=None)
    return coef / scale


def _predict(pts, y):
    """Next x along a track, extrapolating its last two points."""
    if len(pts) < 2:
        return pts[-1][1]
    (y0, x0), (y1, x1) = pts[-2], pts[-1]
    return x1 + (x1 - x0) / (y1 - y0) * (y - y1) if y1 != y0 else x1


def chain_tracks(candidates, anchors, gate=20.0, max_gap=2) -> list:
    """Greedy nearest-neighbour chaining from the bottom anchor upwards.

    A track's expected x at the next anchor is linearly extrapolated from its
    last two points. Returns a list of tracks, each a list of ``(y, x)`` points.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    tracks = []  # each: {"pts": [...], "miss": n}
    for j in np.argsort(-anchors):
        y, xs = anchors[j], np.asarray(candidates[j])
        alive = [t for t in tracks if t["miss"] <= max_gap]
        guess = [_predict(t["pts"], y) for t in alive]
        pairs = sorted((abs(g - x), ti, ci)
                       for ti, g in enumerate(guess) for ci, x in enumerate(xs)
                       if abs(g - x) <= gate)
        used_t, used_c = set(), set()
        for _, ti, ci in pairs:
            if ti in used_t or ci in used_c:
                continue
            used_t.add(ti)
            used_c.add(ci)
            alive[ti]["pts"].append((y, float(xs[ci])))
            alive[ti]["miss"] = 0
        for ti, t in enumerate(alive):
            if ti not in used_t:
                t["miss"] += 1
        for ci, x in enumerate(xs):
            if ci not in used_c:
                tracks.append({"pts": [(y, float(x))], "miss": 0})
    return [t["pts"] for t in tracks]


def _fit(pts, degree, y_ref):
    ys, xs = np.array(pts, dtype=np.float64).T
    coef = fit_polynomial(ys, xs, min(degree, len(pts) - 1))
    coef = np.concatenate([np.zeros(degree + 1 - len(coef)), coef])
    resid = float(np.sqrt(np.mean((np.polyval(coef, ys) - xs) ** 2)))
    return {"pts": list(pts), "coef": coef, "y0": ys.min(), "y1": ys.max(), "n": len(pts),
            "resid": resid, "x_ref": float(np.polyval(coef, y_ref))}


def _trim(fit, degree, tol, y_ref, min_points):
    """Drop the worst-fitting point and refit while any residual exceeds ``tol``."""
    while fit["n"] > min_points:
        ys, xs = np.array(fit["pts"], dtype=np.float64).T
        res = np.abs(np.polyval(fit["coef"], ys) - xs)
        worst = int(np.argmax(res))
        if res[worst] <= tol:
            break
        fit = _fit(fit["pts"][:worst] + fit["pts"][worst + 1 :], degree, y_ref)
    return fit


def _merge_fragments(fits, degree, tol, y_ref):
    """Join tracks that are pieces of one curve: the union must still fit within ``tol``."""
    fits = sorted(fits, key=lambda f: -f["n"])
    merged = True
    while merged:
        merged = False
        for a in range(len(fits)):
            rows = {p[0] for p in fits[a]["pts"]}
            for b in range(a + 1, len(fits)):
                if any(p[0] in rows for p in fits[b]["pts"]):
                    continue
                joined = _fit(fits[a]["pts"] + fits[b]["pts"], degree, y_ref)
                if joined["resid"] <= tol:
                    fits[a] = joined
                    del fits[b]
                    merged = True
                    break
            if merged:
                break
        fits.sort(key=lambda f: -f["n"])
    return fits


def _order_slots(fits, width):
    """Primary pair first, then the rest left to right.

    The primary pair is the pair of neighbouring well-supported tracks (at least
    half the best support) that straddles the image center; failing that, the
    neighbouring pair whose midpoint is closest to the center.
    """
    fits = sorted(fits, key=lambda f: f["x_ref"])
    if len(fits) < 2:
        return fits
    center = width / 2.0
    top = max(f["n"] for f in fits)
    strong = [k for k, f in enumerate(fits) if f["n"] >= 0.5 * top]
    pairs = [(a, b) for a, b in zip(strong, strong[1:])
             if fits[a]["x_ref"] <= center <= fits[b]["x_ref"]]
    if not pairs:
        pairs = list(zip(range(len(fits) - 1), range(1, len(fits))))
    i, j = min(pairs, key=lambda p: abs((fits[p[0]]["x_ref"] + fits[p[1]]["x_ref"]) / 2 - center))
    return [fits[i], fits[j]] + [f for k, f in enumerate(fits) if k not in (i, j)]


def _duplicates(weak, strong, tol):
    """``weak`` retraces ``strong``: most of its points inside ``strong``'s span lie on it."""
    ys, xs = np.array(weak["pts"], dtype=np.float64).T
    inside = (ys >= strong["y0"]) & (ys <= strong["y1"])
    if inside.sum() < 2:
        return False
    near = np.abs(np.polyval(strong["coef"], ys[inside]) - xs[inside]) <= tol
    return bool(near.mean() >= 0.5)


def fit_rails(candidates, anchors, grid: RowAnchorGrid, config: BaselineConfig | None = None
              ) -> RailPrediction:
    """Chain candidates into tracks, fit each with a polynomial, keep the ``C`` best supported.

    Fragments of one curve are joined first; tracks closer than the NMS window
    to a better-supported track are treated as the same rail and dropped.
    """
    config = config or BaselineConfig()
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.size == 0:
        raise ValidationError("anchors must be nonempty")
    y_ref = anchors.max()
    fits = [_fit(pts, config.degree, y_ref)
            for pts in chain_tracks(candidates, anchors, config.gate, config.max_gap)
            if len(pts) >= 2]
    fits = _merge_fragments(fits, config.degree, config.merge_tol, y_ref)
    need = max(config.min_support, config.degree + 1)
    fits = [_trim(f, config.degree, config.outlier_tol, y_ref, need) for f in fits if f["n"] >= need]
    fits.sort(key=lambda f: -f["n"])
    kept = []
    for f in fits:
        if len(kept) == grid.num_rails:
            break
        if not any(_duplicates(f, k, config.duplicate_tol) for k in kept):
            kept.append(f)
    C, h = grid.num_rails, grid.num_anchors
    x = np.full((C, h), np.nan)
    for slot, f in enumerate(_order_slots(kept, grid.image_width)):
        inside = (anchors >= f["y0"]) & (anchors <= f["y1"])
        xv = np.polyval(f["coef"], anchors)
        ok = inside & (xv >= 0) & (xv < grid.image_width)
        x[slot, ok] = xv[ok]
    present = ~np.isnan(x)
    loc = np.where(present, np.clip(x * grid.num_columns / grid.image_width - 0.5, 0, None), np.nan)
    return RailPrediction(present, loc, x, grid.anchor_rows)


def detect(image, grid: RowAnchorGrid, config: BaselineConfig | None = None) -> RailPrediction:
    config = config or BaselineConfig()
    edges = sobel(image)
    cands = extract_candidates(edges, grid.anchors, config.percentile, config.nms_window)
    return fit_rails(cands, grid.anchors, grid, config)
