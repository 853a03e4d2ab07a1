"""Inference: refocus single images onto DPM-defined surfaces.

A trained generator takes the (normalized) input image stacked with a
normalized DPM and emits the image refocused onto the surface the DPM
describes. Convenience wrappers build uniform virtual stacks and tile
large fields through the network with halo discarding and feathered
seams.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dpm as dpm_mod
from .errors import DimensionError
from .network import GeneratorConfig, generator_forward, load_model
from .optim import ParamSet
from .stack import ImageStack

PAD_MULTIPLE = 16
FEATHER_PX = 8


@dataclass
class RefocusModel:
    params: ParamSet
    config: GeneratorConfig

    @classmethod
    def load(cls, path) -> "RefocusModel":
        params, config = load_model(path)
        params.set_trainable(False)
        return cls(params=params, config=config)


@dataclass
class RefocusResult:
    image: np.ndarray
    warnings: list = field(default_factory=list)


def _pad_to_multiple(arr, multiple):
    h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if h + ph < 32:
        ph = 32 - h
    if w + pw < 32:
        pw = 32 - w
    if ph == 0 and pw == 0:
        return arr, (0, 0)
    return np.pad(arr, ((0, ph), (0, pw)), mode="edge"), (ph, pw)


def refocus(model: RefocusModel, image, dpm: dpm_mod.Dpm,
            training_range_um: float = 10.0) -> RefocusResult:
    """Refocus a normalized 2D image onto the surface defined by the DPM.

    The image is expected to be normalized the same way training inputs
    were (background-subtracted, foreground scaled to ~[0, 1]). Inputs
    whose dims are not multiples of 16 are replicate-padded through the
    network and cropped back. DPM validation warnings ride along in the
    result.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise DimensionError(f"refocus expects a 2-D image, got shape {img.shape}")
    if dpm.shape != img.shape:
        raise DimensionError(f"DPM shape {dpm.shape} != image shape {img.shape}")
    warnings = dpm_mod.validate(dpm, training_range_um=training_range_um)

    padded_img, (ph, pw) = _pad_to_multiple(img, PAD_MULTIPLE)
    padded_dpm, _ = _pad_to_multiple(dpm.normalized.astype(np.float32), PAD_MULTIPLE)
    x = np.stack([padded_img, padded_dpm])[None]  # (1, 2, H, W)
    out = generator_forward(model.params, ad.Tensor(x), model.config).data[0, 0]
    if ph or pw:
        out = out[: img.shape[0], : img.shape[1]]
    return RefocusResult(image=np.ascontiguousarray(out, dtype=np.float32), warnings=warnings)


def virtual_stack(model: RefocusModel, image, z_min_um: float, z_max_um: float, step_um: float,
                  pixel_size_um: float = 0.325) -> ImageStack:
    """Refocus to every uniform distance on a z grid; planes stack into an
    ImageStack with matching metadata."""
    if step_um <= 0:
        raise ValueError("step_um must be positive")
    if z_min_um > z_max_um:
        raise ValueError("z range must satisfy z_min <= z_max")
    img = np.asarray(image, dtype=np.float32)
    n = int(round((z_max_um - z_min_um) / step_um)) + 1
    planes = []
    for i in range(n):
        dz = z_min_um + i * step_um
        result = refocus(model, img, dpm_mod.uniform(img.shape[0], img.shape[1], dz))
        planes.append(result.image)
    return ImageStack(np.stack(planes), pixel_size_um=pixel_size_um, step_um=step_um, z0_um=z_min_um)


def tile_refocus(model: RefocusModel, image, dpm: dpm_mod.Dpm, tile: int = 256,
                 halo: int = 32, training_range_um: float = 10.0) -> RefocusResult:
    """Process a large field in overlapping tiles.

    Tiles overlap by 2*halo; halo pixels are dropped from each tile's
    contribution except at the image border, and the remaining overlap is
    blended by linear feathering over an 8 px band. A field no larger than
    one tile falls back to a single pass.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise DimensionError(f"tile_refocus expects a 2-D image, got {img.shape}")
    if dpm.shape != img.shape:
        raise DimensionError(f"DPM shape {dpm.shape} != image shape {img.shape}")
    h, w = img.shape
    tile_r = min(tile, h)
    tile_c = min(tile, w)
    if tile_r == h and tile_c == w:
        return refocus(model, img, dpm, training_range_um=training_range_um)
    if halo < FEATHER_PX or 2 * halo >= min(tile_r, tile_c):
        raise ValueError(f"halo must satisfy {FEATHER_PX} <= halo < tile/2, got {halo}")

    warnings = dpm_mod.validate(dpm, training_range_um=training_range_um)
    origins_r = _tile_origins(h, tile_r, tile_r - 2 * halo)
    origins_c = _tile_origins(w, tile_c, tile_c - 2 * halo)

    acc = np.zeros((h, w), dtype=np.float64)
    weight = np.zeros((h, w), dtype=np.float64)
    for r in origins_r:
        for c in origins_c:
            sub = img[r : r + tile_r, c : c + tile_c]
            sub_dpm = dpm_mod.Dpm(dpm.values_um[r : r + tile_r, c : c + tile_c])
            out = refocus(model, sub, sub_dpm, training_range_um=training_range_um).image
            wmap = _ramp(tile_r, r > 0, r + tile_r < h, halo)[:, None] * _ramp(
                tile_c, c > 0, c + tile_c < w, halo
            )[None, :]
            acc[r : r + tile_r, c : c + tile_c] += out * wmap
            weight[r : r + tile_r, c : c + tile_c] += wmap
    return RefocusResult(image=(acc / weight).astype(np.float32), warnings=warnings)


def _tile_origins(extent, tile, step):
    origins = list(range(0, extent - tile + 1, max(step, 1)))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def _ramp(n, lo_cut, hi_cut, halo):
    """1-D tile weight. At interior cuts the halo is dropped except for an
    8 px linear ramp placed so adjacent tiles' ramps overlap and sum to 1."""
    w = np.ones(n)
    up = (np.arange(1, FEATHER_PX + 1)) / (FEATHER_PX + 1.0)
    if lo_cut:
        w[: halo - FEATHER_PX] = 0.0
        w[halo - FEATHER_PX : halo] = up
    if hi_cut:
        w[n - halo :] = 0.0
        w[n - halo - FEATHER_PX : n - halo] = up[::-1]
    return w
