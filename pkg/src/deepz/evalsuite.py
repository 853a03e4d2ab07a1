"""Measurement tools: image-quality metrics and Gaussian PSF fits.

Metrics follow the usual definitions (MSE / RMSE / MAE / Pearson
correlation) plus a single-window SSIM computed over the whole image with
the standard constants C1 = (0.01 L)^2, C2 = (0.03 L)^2, L being the
larger dynamic range of the two images.

Bead analysis: connected components above a triangular threshold give
candidate centroids; a damped (Levenberg-Marquardt style) least-squares
fit of a 2D Gaussian over a 30x30 crop yields sub-pixel position and
widths, converted to FWHM via 2 sqrt(2 ln 2) * sigma * pixel size. Axial
width comes from the same fit applied to an x-z slice of a stack.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datapipe import triangular_threshold
from .errors import DegenerateInputError, DimensionError, FitError
from .stack import ImageStack

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))
CROP = 30
MAX_FIT_ITER = 200


# ---------------------------------------------------------------------------
# image quality metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    mse: float
    rmse: float
    mae: float
    corr: float
    ssim: float

    def as_dict(self):
        return {"mse": self.mse, "rmse": self.rmse, "mae": self.mae, "corr": self.corr, "ssim": self.ssim}


def metrics(output, ground_truth) -> MetricsReport:
    """MSE, RMSE, MAE, correlation and global SSIM between two images."""
    a = np.asarray(output, dtype=np.float64)
    b = np.asarray(ground_truth, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"metrics: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))

    da = a - a.mean()
    db = b - b.mean()
    va = float(np.mean(da * da))
    vb = float(np.mean(db * db))
    if va == 0.0 or vb == 0.0:
        raise DegenerateInputError("undefined correlation: an image has zero variance")
    corr = float(np.mean(da * db) / math.sqrt(va * vb))

    dynamic_range = max(float(a.max() - a.min()), float(b.max() - b.min()))
    ssim = _global_ssim(a, b, dynamic_range if dynamic_range > 0 else 1.0)
    return MetricsReport(mse=mse, rmse=math.sqrt(mse), mae=mae, corr=corr, ssim=ssim)


def _global_ssim(a, b, dynamic_range) -> float:
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_a = a.mean()
    mu_b = b.mean()
    var_a = np.mean((a - mu_a) ** 2)
    var_b = np.mean((b - mu_b) ** 2)
    cov = np.mean((a - mu_a) * (b - mu_b))
    return float(
        (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    )


def ssim(output, ground_truth) -> float:
    return metrics(output, ground_truth).ssim


# ---------------------------------------------------------------------------
# bead detection and Gaussian fitting
# ---------------------------------------------------------------------------


@dataclass
class BeadFit:
    x_c: float  # column, px
    y_c: float  # row, px
    amplitude: float
    sigma_x: float  # px
    sigma_y: float  # px
    residual: float  # rms residual relative to amplitude
    fwhm_lateral_um: float
    converged: bool = True
    flags: list = field(default_factory=list)
    z_c: float | None = None  # plane index
    sigma_z: float | None = None  # planes
    fwhm_axial_um: float | None = None


def detect_beads(image, threshold: float | None = None) -> list:
    """Candidate bead centroids: triangular threshold, 8-connected
    components, intensity-weighted centers.

    Returns (y, x, flags) tuples; flags mark components touching the image
    border or whose 30x30 fit crops would overlap another component.
    """
    img = np.asarray(image, dtype=np.float64)
    try:
        thr = triangular_threshold(img) if threshold is None else threshold
    except DegenerateInputError:
        return []
    mask = img >= thr
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    out = []
    h, w = img.shape
    objects = ndimage.find_objects(labels)
    for i, sl in enumerate(objects, start=1):
        comp = labels[sl] == i
        weights = np.where(comp, img[sl], 0.0)
        total = weights.sum()
        if total <= 0:
            continue
        ys, xs = np.mgrid[sl[0], sl[1]]
        y_c = float((ys * weights).sum() / total)
        x_c = float((xs * weights).sum() / total)
        flags = []
        if sl[0].start == 0 or sl[1].start == 0 or sl[0].stop == h or sl[1].stop == w:
            flags.append("border")
        out.append([y_c, x_c, flags])
    # crop-overlap flag: fit windows closer than one crop width interact
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            if abs(out[i][0] - out[j][0]) < CROP and abs(out[i][1] - out[j][1]) < CROP:
                if "overlap" not in out[i][2]:
                    out[i][2].append("overlap")
                if "overlap" not in out[j][2]:
                    out[j][2].append("overlap")
    return [(y, x, flags) for y, x, flags in out]


def _gauss2d(params, ys, xs):
    a, x0, y0, sx, sy = params
    return a * np.exp(-((xs - x0) ** 2 / (2 * sx**2) + (ys - y0) ** 2 / (2 * sy**2)))


def _fit_gaussian2d(patch, ys, xs):
    """Damped least squares with the analytic Jacobian, moment-initialized.

    Returns (params, rms_residual, converged) with params (A, x0, y0, sx, sy).
    """
    data = patch.astype(np.float64)
    pos = np.clip(data, 0, None)
    total = pos.sum()
    if total <= 0:
        raise FitError("empty fit window")
    x0 = float((pos * xs).sum() / total)
    y0 = float((pos * ys).sum() / total)
    sx = math.sqrt(max(float((pos * (xs - x0) ** 2).sum() / total), 0.25))
    sy = math.sqrt(max(float((pos * (ys - y0) ** 2).sum() / total), 0.25))
    p = np.array([float(data.max()), x0, y0, sx, sy])

    lam = 1e-3
    residual = _gauss2d(p, ys, xs) - data
    cost = float((residual**2).sum())
    converged = False
    for _ in range(MAX_FIT_ITER):
        a, x0, y0, sx, sy = p
        model = _gauss2d(p, ys, xs)
        dx = xs - x0
        dy = ys - y0
        jac = np.stack(
            [
                model / a,
                model * dx / sx**2,
                model * dy / sy**2,
                model * dx**2 / sx**3,
                model * dy**2 / sy**3,
            ],
            axis=-1,
        ).reshape(-1, 5)
        r = (model - data).reshape(-1)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        if np.max(np.abs(jtr)) < 1e-12 * max(cost, 1.0):
            converged = True
            break
        try:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)) + 1e-12 * np.eye(5), -jtr)
        except np.linalg.LinAlgError:
            raise FitError("singular normal equations")
        candidate = p + step
        candidate[3] = abs(candidate[3])
        candidate[4] = abs(candidate[4])
        if candidate[3] < 1e-3 or candidate[4] < 1e-3:
            candidate[3] = max(candidate[3], 1e-3)
            candidate[4] = max(candidate[4], 1e-3)
        new_resid = _gauss2d(candidate, ys, xs) - data
        new_cost = float((new_resid**2).sum())
        if new_cost < cost:
            rel_drop = (cost - new_cost) / max(cost, 1e-300)
            p = candidate
            cost = new_cost
            lam = max(lam / 10.0, 1e-12)
            if rel_drop < 1e-12 or cost < 1e-24:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    rms = math.sqrt(cost / data.size) / max(abs(p[0]), 1e-300)
    return p, rms, converged


def fit_lateral(image, centroid, pixel_size_um: float = 0.325, crop: int = CROP) -> BeadFit:
    """2D Gaussian fit in a crop x crop window around (y, x).

    FWHM_lateral = 2 sqrt(2 ln 2) * (sigma_x * px + sigma_y * px) / 2.
    """
    img = np.asarray(image, dtype=np.float64)
    y, x = float(centroid[0]), float(centroid[1])  # accepts (y, x) or (y, x, flags)
    r0 = int(round(y)) - crop // 2
    c0 = int(round(x)) - crop // 2
    if r0 < 0 or c0 < 0 or r0 + crop > img.shape[0] or c0 + crop > img.shape[1]:
        raise DimensionError(f"{crop}x{crop} fit window around ({y:.1f}, {x:.1f}) does not fit in the image")
    patch = img[r0 : r0 + crop, c0 : c0 + crop]
    ys, xs = np.mgrid[0:crop, 0:crop].astype(np.float64)
    p, rms, converged = _fit_gaussian2d(patch, ys, xs)
    a, x0, y0, sx, sy = p
    fwhm = FWHM_FACTOR * 0.5 * (sx * pixel_size_um + sy * pixel_size_um)
    flags = [] if converged else ["non-converged"]
    return BeadFit(
        x_c=c0 + x0,
        y_c=r0 + y0,
        amplitude=a,
        sigma_x=sx,
        sigma_y=sy,
        residual=rms,
        fwhm_lateral_um=fwhm,
        converged=converged,
        flags=flags,
    )


def fit_axial(stack: ImageStack, bead: BeadFit, crop: int = CROP) -> BeadFit:
    """Augment a lateral fit with sigma_z from the x-z slice at y = y_c.

    FWHM_axial = 2 sqrt(2 ln 2) * sigma_z * step. The whole stack depth is
    used as the z window.
    """
    if stack.step_um <= 0:
        raise ValueError("axial FWHM needs a positive step size")
    row = int(round(bead.y_c))
    if not 0 <= row < stack.planes.shape[1]:
        raise DimensionError(f"bead row {row} outside stack")
    c0 = int(round(bead.x_c)) - crop // 2
    if c0 < 0 or c0 + crop > stack.planes.shape[2]:
        raise DimensionError(f"{crop}-wide x window around column {bead.x_c:.1f} does not fit")
    slab = stack.planes[:, row, c0 : c0 + crop].astype(np.float64)  # (Nz, crop)
    zs, xs = np.mgrid[0 : stack.nz, 0:crop].astype(np.float64)
    p, rms, converged = _fit_gaussian2d(slab, zs, xs)
    a, x0, z0, sx, sz = p
    bead.z_c = z0
    bead.sigma_z = sz
    bead.fwhm_axial_um = FWHM_FACTOR * sz * stack.step_um
    if not converged and "non-converged" not in bead.flags:
        bead.flags.append("non-converged")
        bead.converged = False
    bead.residual = max(bead.residual, rms)
    return bead


def fit_image_beads(image, pixel_size_um: float = 0.325, include_flagged: bool = False) -> list:
    """Detect and laterally fit every clean bead in an image."""
    fits = []
    for y, x, flags in detect_beads(image):
        if flags and not include_flagged:
            continue
        try:
            fit = fit_lateral(image, (y, x), pixel_size_um=pixel_size_um)
        except (DimensionError, FitError):
            continue
        fit.flags.extend(flags)
        fits.append(fit)
    return fits


def write_bead_csv(path, fits):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_c", "y_c", "z_c", "fwhm_lateral_um", "fwhm_axial_um", "residual", "flags"])
        for f in fits:
            writer.writerow(
                [
                    f"{f.x_c:.3f}",
                    f"{f.y_c:.3f}",
                    "" if f.z_c is None else f"{f.z_c:.3f}",
                    f"{f.fwhm_lateral_um:.4f}",
                    "" if f.fwhm_axial_um is None else f"{f.fwhm_axial_um:.4f}",
                    f"{f.residual:.3e}",
                    ";".join(f.flags),
                ]
            )


# ---------------------------------------------------------------------------
# focus curve
# ---------------------------------------------------------------------------


def focus_zero(stack: ImageStack, reference) -> float:
    """Axial zero-point from the SSIM focus curve.

    SSIM of each plane against the reference gives a curve over z; a
    quadratic through the four highest-SSIM points is fit and its vertex,
    required to lie inside the stack range, is returned (um).
    """
    if stack.nz < 4:
        raise DimensionError("focus_zero needs at least 4 planes")
    curve = np.array([ssim(stack.planes[i], reference) for i in range(stack.nz)])
    top = np.sort(np.argsort(curve)[-4:])
    zs = stack.z_values()[top]
    a, b, c = np.polyfit(zs, curve[top], 2)
    if a >= 0:
        raise DegenerateInputError("no interior focus: focus curve is not peaked")
    vertex = -b / (2 * a)
    z_lo, z_hi = stack.z_of(0), stack.z_of(stack.nz - 1)
    if not (min(z_lo, z_hi) <= vertex <= max(z_lo, z_hi)):
        raise DegenerateInputError(f"no interior focus: vertex {vertex:.2f} um outside stack range")
    return float(vertex)
