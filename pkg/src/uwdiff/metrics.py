"""Image quality metrics: PSNR, SSIM, UIQM, UCIQE, CPBD and CIEDE2000.

All RGB inputs are float arrays in [0, 1] with shape ``(H, W, 3)``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from .colorspace import rgb_to_lab
from .imageio import load_rgb
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
UIQM_WEIGHTS = (0.0282, 0.2953, 3.5753)
UCIQE_WEIGHTS = (0.4680, 0.2745, 0.2576)
LUMA = np.array([0.299, 0.587, 0.114])
COLUMNS = ("id", "psnr", "ssim", "uiqm", "uciqe", "cpbd", "ciede2000")

# Agreement expected against independent implementations (absolute).
TOLERANCES = {"psnr": 1e-6, "ssim": 1e-4, "uiqm": 1e-3, "uciqe": 1e-3, "cpbd": 5e-3, "ciede2000": 1e-4}


def _pair(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float64)
    return img @ LUMA if img.ndim == 3 else img


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b, sigma: float = 1.5, win: int = 11) -> float:
    """Mean SSIM of the luma images with a Gaussian window, valid region only."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} is smaller than the {win}x{win} SSIM window")
    truncate = ((win - 1) / 2) / sigma
    filt = lambda z: ndimage.gaussian_filter(z, sigma, truncate=truncate, mode="reflect")
    c1, c2 = 0.01**2, 0.03**2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


# --- UIQM ---------------------------------------------------------------


def trimmed_mean(x: np.ndarray, alpha_l: float = 0.1, alpha_r: float = 0.1) -> float:
    s = np.sort(np.ravel(x))
    k = s.size
    lo, hi = math.ceil(alpha_l * k), math.floor(alpha_r * k)
    return float(s[lo : k - hi].mean())


def uicm(img255: np.ndarray) -> float:
    rg = img255[..., 0] - img255[..., 1]
    yb = (img255[..., 0] + img255[..., 1]) / 2 - img255[..., 2]
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg, var_yb = np.mean((rg - mu_rg) ** 2), np.mean((yb - mu_yb) ** 2)
    return float(-0.0268 * np.hypot(mu_rg, mu_yb) + 0.1586 * np.sqrt(var_rg + var_yb))


def _block_edges(n: int, k: int) -> np.ndarray:
    return np.round(np.linspace(0, n, k + 1)).astype(int)[:-1]


def block_extrema(x: np.ndarray, grid: int):
    """Per-block max and min over a ``grid x grid`` partition (fewer blocks for tiny images)."""
    kr, kc = max(1, min(grid, x.shape[0] // 2)), max(1, min(grid, x.shape[1] // 2))
    r, c = _block_edges(x.shape[0], kr), _block_edges(x.shape[1], kc)
    hi = np.maximum.reduceat(np.maximum.reduceat(x, r, axis=0), c, axis=1)
    lo = np.minimum.reduceat(np.minimum.reduceat(x, r, axis=0), c, axis=1)
    return hi, lo


def eme(x: np.ndarray, grid: int = 32) -> float:
    hi, lo = block_extrema(x, grid)
    ok = (hi > 0) & (lo > 0)
    terms = np.log(np.where(ok, hi, 1.0) / np.where(ok, lo, 1.0))
    return float(2.0 / hi.size * terms.sum())


def sobel_magnitude(ch: np.ndarray) -> np.ndarray:
    mag = np.hypot(ndimage.sobel(ch, 0), ndimage.sobel(ch, 1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def uism(img255: np.ndarray, grid: int = 32) -> float:
    w = (0.299, 0.587, 0.114)
    return float(sum(wc * eme(sobel_magnitude(img255[..., c]) * img255[..., c], grid) for c, wc in enumerate(w)))


def uiconm(img255: np.ndarray, grid: int = 32) -> float:
    hi, lo = block_extrema(to_gray(img255), grid)
    top, bot = hi - lo, hi + lo
    ok = (top > 0) & (bot > 0)
    r = np.where(ok, top, 1.0) / np.where(ok, bot, 1.0)
    return float(-1.0 / hi.size * np.sum(np.where(ok, r * np.log(r), 0.0)))


def uiqm(img, grid: int = 32, parts: bool = False):
    """Colorfulness, sharpness and contrast combination on 0-255 values.

    ``grid`` is the number of blocks per side for the block measures (32 blocks
    equals the usual 8-pixel window at 256x256), so block sizes scale with the image.
    """
    x = np.asarray(img, np.float64) * 255.0
    c, s, k = uicm(x), uism(x, grid), uiconm(x, grid)
    total = UIQM_WEIGHTS[0] * c + UIQM_WEIGHTS[1] * s + UIQM_WEIGHTS[2] * k
    return (total, {"uicm": c, "uism": s, "uiconm": k}) if parts else total


# --- UCIQE --------------------------------------------------------------


def uciqe(img, parts: bool = False):
    """Chroma spread, luminance contrast and saturation in CIELAB.

    Channels are scaled to the 8-bit Lab convention: ``L*/100`` and ``a*/255``, ``b*/255``.
    """
    lab = rgb_to_lab(img)
    L = lab[..., 0] / 100.0
    chroma = np.hypot(lab[..., 1], lab[..., 2]) / 255.0
    sigma_c = float(chroma.std())
    lo, hi = np.percentile(L, [1, 99])
    con_l = float(hi - lo)
    denom = np.hypot(chroma, L)
    sat = np.divide(chroma, denom, out=np.zeros_like(chroma), where=denom > 0)
    mu_s = float(sat.mean())
    total = UCIQE_WEIGHTS[0] * sigma_c + UCIQE_WEIGHTS[1] * con_l + UCIQE_WEIGHTS[2] * mu_s
    return (total, {"sigma_c": sigma_c, "con_l": con_l, "mu_s": mu_s}) if parts else total


# --- CPBD ---------------------------------------------------------------

_SOBEL = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]]) / 8.0
CPBD_BLOCK = 64
CPBD_BETA = 3.6
CPBD_EDGE_FRACTION = 0.002
CPBD_MAX_WALK = 100


def _thin_sobel_edges(gray: np.ndarray) -> np.ndarray:
    """Vertical-edge Sobel response, thresholded and thinned to local maxima."""
    strength = ndimage.convolve(gray, _SOBEL.T) ** 2
    strength[strength <= 2.0 * np.sqrt(strength.mean())] = 0.0
    zc = np.zeros((strength.shape[0], 1))
    zr = np.zeros((1, strength.shape[1]))
    horiz = (strength > np.hstack([zc, strength[:, :-1]])) & (strength > np.hstack([strength[:, 1:], zc]))
    vert = (strength > np.vstack([zr, strength[:-1]])) & (strength > np.vstack([strength[1:], zr]))
    return horiz | vert


def _runs(mask: np.ndarray, reverse: bool) -> np.ndarray:
    """Length of the run of True values ending at each column (scanning left, or right if reverse)."""
    out = np.zeros(mask.shape, dtype=np.int64)
    cols = range(mask.shape[1] - 1, -1, -1) if reverse else range(mask.shape[1])
    prev = np.zeros(mask.shape[0], dtype=np.int64)
    for j in cols:
        prev = np.where(mask[:, j], prev + 1, 0)
        out[:, j] = prev
    return out


def edge_widths(gray: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Horizontal extent of each edge pixel's monotone intensity profile (0 off-edge)."""
    h, w = gray.shape
    gy, gx = np.gradient(gray)
    with np.errstate(invalid="ignore"):
        angle = np.where(gx != 0, np.degrees(np.arctan2(gy, gx)), 0.0)
    widths = np.zeros_like(gray)
    if not np.any(angle) or w < 3:
        return widths
    q = 45.0 * np.round(angle / 45.0)
    d = np.diff(gray, axis=1)
    up_left, up_right = _runs(d > 0, False), _runs(d > 0, True)
    dn_left, dn_right = _runs(d < 0, False), _runs(d < 0, True)
    inner = np.zeros_like(edges, dtype=bool)
    inner[1:-1, 1:-1] = edges[1:-1, 1:-1]
    rows, cols = np.nonzero(inner)
    if rows.size == 0:
        return widths

    def walk(runs, idx, valid):
        return np.where(valid, np.minimum(runs[rows, np.clip(idx, 0, w - 2)], CPBD_MAX_WALK), 0) + 1

    left_ok, right_ok = cols - 2 >= 0, cols + 1 <= w - 2
    rising = q[rows, cols] == 0
    falling = np.abs(q[rows, cols]) == 180
    wr = walk(up_left, cols - 2, left_ok) + walk(up_right, cols + 1, right_ok)
    wf = walk(dn_left, cols - 2, left_ok) + walk(dn_right, cols + 1, right_ok)
    widths[rows, cols] = np.where(rising, wr, np.where(falling, wf, 0))
    return widths


def cpbd(img, block: int = CPBD_BLOCK) -> float:
    """Cumulative probability of blur detection (higher is sharper), on 0-255 luma."""
    gray = to_gray(img) * 255.0
    widths = edge_widths(gray, _thin_sobel_edges(gray))
    canny_edges = canny(gray)
    hist = np.zeros(101)
    total = 0
    for i in range(gray.shape[0] // block):
        for j in range(gray.shape[1] // block):
            sl = (slice(i * block, (i + 1) * block), slice(j * block, (j + 1) * block))
            if np.count_nonzero(canny_edges[sl]) <= block * block * CPBD_EDGE_FRACTION:
                continue
            bw = widths[sl][widths[sl] != 0]
            contrast = int(gray[sl].max() - gray[sl].min())
            jnb = 5.0 if contrast <= 50 else 3.0
            prob = 1.0 - np.exp(-np.abs(bw / jnb) ** CPBD_BETA)
            np.add.at(hist, np.round(prob * 100).astype(int), 1)
            total += bw.size
    if total == 0:
        warnings.warn("cpbd: no edges detected, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(hist[:64].sum() / total)


# --- CIEDE2000 ----------------------------------------------------------


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """Color difference between Lab colors (broadcast over leading axes)."""
    L1, a1, b1 = np.moveaxis(np.asarray(lab1, np.float64), -1, 0)
    L2, a2, b2 = np.moveaxis(np.asarray(lab2, np.float64), -1, 0)
    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    g = 0.5 * (1 - np.sqrt(c_bar**7 / (c_bar**7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.where(c1p == 0, 0.0, np.degrees(np.arctan2(b1, a1p)) % 360)
    h2p = np.where(c2p == 0, 0.0, np.degrees(np.arctan2(b2, a2p)) % 360)

    dL = L2 - L1
    dC = c2p - c1p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(c1p * c2p == 0, 0.0, dh)
    dH = 2 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh / 2))

    L_bar = (L1 + L2) / 2
    cp_bar = (c1p + c2p) / 2
    hsum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180, hsum / 2, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2)
    )
    h_bar = np.where(c1p * c2p == 0, hsum, h_bar)

    T = (
        1
        - 0.17 * np.cos(np.radians(h_bar - 30))
        + 0.24 * np.cos(np.radians(2 * h_bar))
        + 0.32 * np.cos(np.radians(3 * h_bar + 6))
        - 0.20 * np.cos(np.radians(4 * h_bar - 63))
    )
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    r_c = 2 * np.sqrt(cp_bar**7 / (cp_bar**7 + 25.0**7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * cp_bar
    s_h = 1 + 0.015 * cp_bar * T
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c
    tl, tc, th = dL / (kL * s_l), dC / (kC * s_c), dH / (kH * s_h)
    de = np.sqrt(tl**2 + tc**2 + th**2 + r_t * tc * th)
    return float(de) if de.ndim == 0 else de


def patch_color_difference(patch_rgb, reference_lab) -> float:
    """CIEDE2000 between the mean color of an RGB patch and a reference Lab color."""
    mean_rgb = np.asarray(patch_rgb, np.float64).reshape(-1, 3).mean(axis=0)
    return ciede2000(rgb_to_lab(mean_rgb), reference_lab)


def mean_ciede2000(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(ciede2000(rgb_to_lab(a), rgb_to_lab(b))))


# --- reports ------------------------------------------------------------


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)

    @property
    def means(self) -> dict:
        out = {}
        for col in COLUMNS[1:]:
            vals = [r[col] for r in self.records if r.get(col) is not None]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fmt = lambda v: "" if v is None else repr(float(v))
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.records:
                w.writerow([r["id"]] + [fmt(r.get(c)) for c in COLUMNS[1:]])
            if self.records:
                means = self.means
                w.writerow(["MEAN"] + [fmt(means[c]) for c in COLUMNS[1:]])
        return path


def score_image(img, ref=None, include=None) -> dict:
    """Scores for one image; ``include`` limits which metrics are computed (others stay None)."""
    want = set(COLUMNS[1:] if include is None else include)
    fns = {"uiqm": uiqm, "uciqe": uciqe, "cpbd": cpbd}
    full = {"psnr": psnr, "ssim": ssim, "ciede2000": mean_ciede2000}
    rec = dict.fromkeys(COLUMNS[1:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k, fn in fns.items():
            if k in want:
                rec[k] = fn(img)
    if ref is not None:
        for k, fn in full.items():
            if k in want:
                rec[k] = fn(img, ref)
    return rec


def evaluate(manifest: DatasetManifest, out_csv=None, include=None) -> MetricReport:
    """Score every record's ``degraded_path`` image (the image under test).

    Full-reference columns are filled only when a ``reference_path`` exists.
    """
    report = MetricReport()
    for rec in manifest:
        try:
            img = load_rgb(manifest.resolve(rec.degraded_path))
            ref = load_rgb(manifest.resolve(rec.reference_path)) if rec.reference_path else None
            if ref is not None and ref.shape != img.shape:
                raise ValueError(f"reference shape {ref.shape} != image shape {img.shape}")
        except Exception as exc:
            log.warning("skipping %s: %s", rec.id, exc)
            continue
        report.records.append({"id": rec.id, **score_image(img, ref, include)})
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
