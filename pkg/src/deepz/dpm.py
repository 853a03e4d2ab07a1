"""Digital propagation matrices (DPMs).

A DPM assigns every pixel of an input image the axial distance (in um,
positive toward increasing stack z) to the surface it should be refocused
onto. Networks consume the normalized form, values divided by 10 so the
usable +/-10 um range maps onto [-1, 1] and matches the image dynamic
range.

Out-of-range or too-rapidly-varying surfaces are legal inputs: refocusing
quality degrades there rather than being forbidden, so validate() emits
warnings instead of errors.
"""

import math
from dataclasses import dataclass

import numpy as np

from .stack import ImageStack, load_dzst, save_dzst

NORMALIZATION_UM = 10.0
MIN_SAFE_PERIOD_PX = 100.0


@dataclass
class Dpm:
    """Per-pixel axial propagation distances in micrometers."""

    values_um: np.ndarray

    def __post_init__(self):
        self.values_um = np.asarray(self.values_um, dtype=np.float32)
        if self.values_um.ndim != 2:
            raise ValueError(f"DPM must be 2-D, got shape {self.values_um.shape}")

    @property
    def normalized(self) -> np.ndarray:
        return self.values_um / NORMALIZATION_UM

    @property
    def shape(self):
        return self.values_um.shape

    def is_uniform(self) -> bool:
        return bool(np.all(self.values_um == self.values_um.flat[0]))

    def save(self, path):
        save_dzst(path, ImageStack(self.values_um[None], step_um=0.0), distance_map=True)

    @classmethod
    def load(cls, path) -> "Dpm":
        stack, is_map = load_dzst(path)
        if not is_map:
            raise ValueError(f"{path}: not flagged as a distance map")
        return cls(stack.planes[0])


def uniform(height: int, width: int, dz_um: float) -> Dpm:
    """Constant refocus distance: the training-time DPM form."""
    return Dpm(np.full((height, width), dz_um, dtype=np.float32))


def surface(height: int, width: int, spec: dict, pixel_size_um: float = 0.325) -> Dpm:
    """Non-uniform DPM from a named surface description.

    spec kinds:
      {"kind": "tilt", "angle_deg": a, "axis": "x"|"y"}
          plane tilted about the field center
      {"kind": "cylinder", "diameter_mm": d, "offset_um": o, "axis": "x"|"y"}
          circular arc sag, vertex at the field center
      {"kind": "sinusoid", "period_px": p, "z_lo_um": lo, "z_hi_um": hi, "axis": "x"|"y"}
          axial oscillation between lo and hi
      {"kind": "explicit", "values_um": 2-D array}
    axis is the direction along which the surface varies ("x" = columns).
    """
    if pixel_size_um <= 0:
        raise ValueError("pixel_size_um must be positive")
    kind = spec.get("kind")
    axis = spec.get("axis", "x")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    n = width if axis == "x" else height

    if kind == "explicit":
        values = np.asarray(spec["values_um"], dtype=np.float32)
        if values.shape != (height, width):
            raise ValueError(f"explicit map shape {values.shape} != ({height}, {width})")
        return Dpm(values)

    coords = np.arange(n, dtype=np.float64)
    center = (n - 1) / 2.0
    if kind == "tilt":
        angle = math.radians(float(spec["angle_deg"]))
        profile = math.tan(angle) * (coords - center) * pixel_size_um
    elif kind == "cylinder":
        radius_um = float(spec["diameter_mm"]) * 1000.0 / 2.0
        lateral = (coords - center) * pixel_size_um
        under = radius_um**2 - lateral**2
        if (under < 0).any():
            raise ValueError("field is wider than the cylinder; sag is undefined at the edges")
        profile = radius_um - np.sqrt(under) + float(spec.get("offset_um", 0.0))
    elif kind == "sinusoid":
        z_lo = float(spec["z_lo_um"])
        z_hi = float(spec["z_hi_um"])
        period = float(spec["period_px"])
        mid = 0.5 * (z_lo + z_hi)
        half = 0.5 * (z_hi - z_lo)
        profile = mid + half * np.sin(2.0 * math.pi * coords / period)
    else:
        raise ValueError(f"unknown surface kind {kind!r}")

    if axis == "x":
        values = np.broadcast_to(profile[None, :], (height, width))
    else:
        values = np.broadcast_to(profile[:, None], (height, width))
    return Dpm(np.array(values, dtype=np.float32))


def _local_periods(profile: np.ndarray, amplitude_floor: float):
    """Periods implied by consecutive extrema of a 1-D profile."""
    d = np.diff(profile)
    signs = np.sign(d)
    nz = signs != 0
    if not nz.any():
        return []
    idx = np.nonzero(nz)[0]
    runs = signs[idx]
    flips = np.nonzero(runs[1:] * runs[:-1] < 0)[0]
    extrema = idx[flips] + 1
    if len(extrema) < 2:
        return []
    periods = []
    for a, b in zip(extrema[:-1], extrema[1:]):
        swing = abs(profile[b] - profile[a])
        if swing > amplitude_floor:
            periods.append(2.0 * (b - a))
    return periods


def validate(dpm: Dpm, training_range_um: float = 10.0) -> list:
    """Advisory warnings: distances beyond the trained axial range, and
    lateral modulation faster than the network can track."""
    warnings = []
    values = dpm.values_um.astype(np.float64)
    over = np.abs(values) > training_range_um + 1e-6
    if over.any():
        frac = over.mean()
        worst = float(np.abs(values).max())
        warnings.append(
            f"out-of-range: {frac:.1%} of pixels request |dz| > {training_range_um:g} um "
            f"(max {worst:.2f} um); refocusing quality degrades beyond the trained range"
        )

    span = float(values.max() - values.min())
    floor = max(0.05, 0.01 * span)
    periods = []
    for profile in (values.mean(axis=0), values.mean(axis=1)):
        periods.extend(_local_periods(profile, floor))
    if periods:
        period = float(np.median(periods))
        if period < MIN_SAFE_PERIOD_PX:
            warnings.append(
                f"high-frequency surface: local lateral period ~{period:.0f} px is below "
                f"{MIN_SAFE_PERIOD_PX:.0f} px; expect background modulation artifacts"
            )
    return warnings
