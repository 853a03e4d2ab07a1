"""Preprocessing and training-set construction.

A raw focal stack is normalized against an extended-depth-of-field
reference (max-intensity projection), foreground regions are covered by a
greedy minimal set of square crops, and every crop yields training pairs:
one plane as input, other planes of the same axial window as targets,
each pair carrying a uniform DPM with the signed refocus distance.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rng_mod
from .dpm import NORMALIZATION_UM
from .errors import DegenerateInputError, DimensionError
from .stack import ImageStack

HISTOGRAM_BINS = 256
DILATION_PX = 3


def edf_reference(stack: ImageStack) -> np.ndarray:
    """Extended-depth-of-field proxy: per-pixel max projection across z."""
    return stack.planes.max(axis=0)


def triangular_threshold(image) -> float:
    """Histogram-geometry threshold separating background from foreground.

    Builds a 256-bin histogram, draws the chord from the peak bin to the
    farthest non-empty bin, and returns the midpoint of the bin whose
    histogram point lies farthest from that chord.
    """
    values = np.asarray(image, dtype=np.float64).ravel()
    lo = values.min()
    hi = values.max()
    if not hi > lo:
        raise DegenerateInputError("degenerate histogram: image has a single value")
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(lo, hi))
    peak = int(counts.argmax())
    nonempty = np.nonzero(counts)[0]
    tail = int(nonempty[-1] if nonempty[-1] - peak >= peak - nonempty[0] else nonempty[0])
    if tail == peak:
        raise DegenerateInputError("degenerate histogram: peak and tail coincide")

    lo_i, hi_i = (peak, tail) if peak < tail else (tail, peak)
    idx = np.arange(lo_i, hi_i + 1)
    # perpendicular distance from (i, counts[i]) to the peak->tail chord
    x1, y1 = float(peak), float(counts[peak])
    x2, y2 = float(tail), float(counts[tail])
    num = np.abs((y2 - y1) * idx - (x2 - x1) * counts[idx] + x2 * y1 - y2 * x1)
    best = idx[int(num.argmax())]
    return float(0.5 * (edges[best] + edges[best + 1]))


@dataclass
class NormalizationRecord:
    background: float
    scale: float

    def apply(self, data):
        return (np.asarray(data, dtype=np.float32) - np.float32(self.background)) / np.float32(self.scale)

    def invert(self, data):
        return np.asarray(data, dtype=np.float32) * np.float32(self.scale) + np.float32(self.background)


def normalization_from_reference(reference) -> NormalizationRecord:
    """Background level and intensity scale derived from a reference image.

    Background is the mean of sub-threshold pixels; the scale maps the
    99th percentile of background-subtracted foreground to 1.0, i.e. 1%
    of the reference foreground saturates above one.
    """
    reference = np.asarray(reference, dtype=np.float64)
    thr = triangular_threshold(reference)
    fg = reference >= thr
    bg = ~fg
    if not fg.any():
        raise DegenerateInputError("no foreground pixels above the triangular threshold")
    background = float(reference[bg].mean()) if bg.any() else 0.0
    scale = float(np.percentile(reference[fg] - background, 99.0))
    if scale <= 0:
        raise DegenerateInputError("non-positive normalization scale; reference has no usable contrast")
    return NormalizationRecord(background=background, scale=scale)


def normalize_stack(stack: ImageStack, reference) -> tuple[ImageStack, NormalizationRecord]:
    """Normalize every plane by the reference's background and scale."""
    reference = np.asarray(reference)
    if reference.shape != stack.planes.shape[1:]:
        raise DimensionError(f"reference shape {reference.shape} != plane shape {stack.planes.shape[1:]}")
    record = normalization_from_reference(reference)
    planes = record.apply(stack.planes)
    out = ImageStack(
        planes,
        pixel_size_um=stack.pixel_size_um,
        step_um=stack.step_um,
        z0_um=stack.z0_um,
        background=record.background,
        scale=record.scale,
    )
    return out, record


def normalize_input_image(image) -> tuple[np.ndarray, NormalizationRecord]:
    """Normalization for a lone test image (no stack): the image itself is
    the reference."""
    record = normalization_from_reference(image)
    return record.apply(image), record


def foreground_mask(reference, dilation_px: int = DILATION_PX) -> np.ndarray:
    """Signal mask: triangular threshold plus a small binary dilation so dim
    halos around sources stay inside the training regions."""
    thr = triangular_threshold(reference)
    mask = np.asarray(reference) >= thr
    if dilation_px > 0:
        mask = ndimage.binary_dilation(mask, iterations=dilation_px)
    return mask


def crop_cover(mask, tile: int = 256, overlap_frac: float = 0.05) -> list:
    """Greedy minimal-ish cover of mask pixels by tile x tile windows.

    Candidate origins sit on a grid of pitch tile*(1-overlap_frac) (plus
    clamped edge rows/cols); each round accepts the candidate covering the
    most still-uncovered mask pixels, breaking ties toward the top-left.
    Returns (row, col) origins; every mask pixel ends up inside >= 1 tile.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if tile > min(h, w):
        raise DimensionError(f"tile {tile} exceeds image dims {h}x{w}")
    if not mask.any():
        return []

    pitch = max(1, int(round(tile * (1.0 - overlap_frac))))
    rows = sorted(set(list(range(0, h - tile + 1, pitch)) + [h - tile]))
    cols = sorted(set(list(range(0, w - tile + 1, pitch)) + [w - tile]))

    uncovered = mask.copy()
    origins = []
    while uncovered.any():
        # summed-area table of the uncovered mask
        sat = np.zeros((h + 1, w + 1), dtype=np.int64)
        np.cumsum(np.cumsum(uncovered, axis=0), axis=1, out=sat[1:, 1:])
        best = None
        best_count = 0
        for r in rows:
            for c in cols:
                count = sat[r + tile, c + tile] - sat[r, c + tile] - sat[r + tile, c] + sat[r, c]
                if count > best_count:
                    best_count = count
                    best = (r, c)
        if best is None:
            break  # cannot happen while uncovered pixels remain on-grid
        origins.append(best)
        r, c = best
        uncovered[r : r + tile, c : c + tile] = False
    return origins


@dataclass
class TrainingPair:
    """(input plane + uniform DPM) -> target plane, with provenance."""

    input_plane: np.ndarray
    dpm: np.ndarray  # normalized (values / 10)
    target_plane: np.ndarray
    distance_um: float
    region_id: int


DIHEDRAL_OPS = 8


def _dihedral(image, op_index: int):
    if not 0 <= op_index < DIHEDRAL_OPS:
        raise ValueError(f"op_index must be in [0, {DIHEDRAL_OPS}), got {op_index}")
    out = np.rot90(image, k=op_index % 4)
    if op_index >= 4:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def augment(pair: TrainingPair, op_index: int) -> TrainingPair:
    """Apply one of the 8 flip/rot90 ops to input, target and DPM alike."""
    return TrainingPair(
        input_plane=_dihedral(pair.input_plane, op_index),
        dpm=_dihedral(pair.dpm, op_index),
        target_plane=_dihedral(pair.target_plane, op_index),
        distance_um=pair.distance_um,
        region_id=pair.region_id,
    )


def build_pairs(stack: ImageStack, tiles, tile: int, targets_per_input: int = 5,
                range_planes: int = 20, seed: int = 0) -> list:
    """Training pairs from a normalized stack and a list of tile origins.

    Per tile: the middle plane is the one with the highest intensity
    standard deviation inside the window (clamped so the +/-range_planes
    window fits); every plane of that window is used as an input once,
    each paired with targets_per_input target planes drawn from the window
    without replacement. DPM value = (target z - input z) / 10.
    """
    window = 2 * range_planes + 1
    if stack.nz < window:
        raise DimensionError(f"stack too shallow: need Nz >= {window}, got {stack.nz}")
    pairs = []
    for region_id, (r, c) in enumerate(tiles):
        gen = rng_mod.stream(seed, "pairs", region_id)
        crop = stack.planes[:, r : r + tile, c : c + tile]
        stds = crop.reshape(stack.nz, -1).std(axis=1)
        middle = int(np.clip(int(stds.argmax()), range_planes, stack.nz - 1 - range_planes))
        plane_ids = np.arange(middle - range_planes, middle + range_planes + 1)
        for input_id in plane_ids:
            targets = gen.choice(plane_ids, size=min(targets_per_input, window), replace=False)
            for target_id in targets:
                dz = (int(target_id) - int(input_id)) * stack.step_um
                pairs.append(
                    TrainingPair(
                        input_plane=np.ascontiguousarray(crop[input_id]),
                        dpm=np.full((tile, tile), dz / NORMALIZATION_UM, dtype=np.float32),
                        target_plane=np.ascontiguousarray(crop[target_id]),
                        distance_um=float(dz),
                        region_id=region_id,
                    )
                )
    return pairs


@dataclass
class Dataset:
    """Flattened training pairs plus geometry metadata."""

    inputs: np.ndarray  # (N, H, W) float32, normalized
    targets: np.ndarray  # (N, H, W) float32
    distance_um: np.ndarray  # (N,) float32
    region_id: np.ndarray  # (N,) int32
    pixel_size_um: float = 0.325
    step_um: float = 0.5
    normalization: NormalizationRecord = field(default_factory=lambda: NormalizationRecord(0.0, 1.0))

    def __len__(self):
        return len(self.inputs)

    @property
    def tile(self) -> int:
        return self.inputs.shape[1]

    def pair(self, i: int) -> TrainingPair:
        h, w = self.inputs.shape[1:]
        return TrainingPair(
            input_plane=self.inputs[i],
            dpm=np.full((h, w), self.distance_um[i] / NORMALIZATION_UM, dtype=np.float32),
            target_plane=self.targets[i],
            distance_um=float(self.distance_um[i]),
            region_id=int(self.region_id[i]),
        )

    @classmethod
    def from_pairs(cls, pairs, pixel_size_um, step_um, normalization) -> "Dataset":
        return cls(
            inputs=np.stack([p.input_plane for p in pairs]).astype(np.float32),
            targets=np.stack([p.target_plane for p in pairs]).astype(np.float32),
            distance_um=np.array([p.distance_um for p in pairs], dtype=np.float32),
            region_id=np.array([p.region_id for p in pairs], dtype=np.int32),
            pixel_size_um=pixel_size_um,
            step_um=step_um,
            normalization=normalization,
        )

    def split_by_region(self, val_frac: float = 0.15, seed: int = 0):
        """85/15-style split by region id so near-duplicate pairs from one
        crop never straddle the train/validation boundary."""
        regions = np.unique(self.region_id)
        order = rng_mod.stream(seed, "split").permutation(len(regions))
        n_val = max(1, int(round(val_frac * len(regions)))) if len(regions) > 1 else 0
        val_regions = set(regions[order[:n_val]].tolist())
        val_mask = np.isin(self.region_id, sorted(val_regions))
        train_idx = np.nonzero(~val_mask)[0]
        val_idx = np.nonzero(val_mask)[0]
        return train_idx, val_idx

    def save(self, directory):
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(
            directory / "dataset.npz",
            inputs=self.inputs,
            targets=self.targets,
            distance_um=self.distance_um,
            region_id=self.region_id,
        )
        meta = {
            "pixel_size_um": self.pixel_size_um,
            "step_um": self.step_um,
            "background": self.normalization.background,
            "scale": self.normalization.scale,
            "pairs": int(len(self)),
            "tile": int(self.tile),
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        from pathlib import Path

        directory = Path(directory)
        with np.load(directory / "dataset.npz") as npz:
            arrays = {k: npz[k] for k in ("inputs", "targets", "distance_um", "region_id")}
        meta = json.loads((directory / "meta.json").read_text())
        return cls(
            normalization=NormalizationRecord(meta["background"], meta["scale"]),
            pixel_size_um=meta["pixel_size_um"],
            step_um=meta["step_um"],
            **arrays,
        )


def build_dataset(stack: ImageStack, tile: int = 256, overlap_frac: float = 0.05,
                  targets_per_input: int = 5, range_planes: int = 20, seed: int = 0) -> Dataset:
    """Full pipeline: EDF reference -> normalize -> mask -> crops -> pairs."""
    reference = edf_reference(stack)
    normalized, record = normalize_stack(stack, reference)
    mask = foreground_mask(reference)
    tiles = crop_cover(mask, tile=tile, overlap_frac=overlap_frac)
    if not tiles:
        raise DegenerateInputError("foreground mask is empty; nothing to crop")
    pairs = build_pairs(normalized, tiles, tile, targets_per_input=targets_per_input,
                        range_planes=range_planes, seed=seed)
    return Dataset.from_pairs(pairs, stack.pixel_size_um, stack.step_um, record)
