"""Image stacks: the in-memory type plus DZST and TIFF persistence.

DZST container, little-endian:
    magic "DZST", u32 version word, u32 Nz, u32 H, u32 W,
    f32 pixel_size_um, f32 step_um, f32 z0_um, f32 background, f32 scale,
    then Nz*H*W float32 plane data.
The low 16 bits of the version word are the format version; bit 16 flags
"this is a distance map in micrometers" (used for persisted DPMs).

TIFF support is deliberately small: uncompressed grayscale, 8/16-bit
unsigned or 32-bit float, little-endian, one page per plane.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

DZST_MAGIC = b"DZST"
DZST_VERSION = 1
DZST_FLAG_DISTANCE_MAP = 1 << 16


@dataclass
class ImageStack:
    """A z-stack of float images with physical calibration.

    planes are (Nz, H, W) float32; z of plane i is z0_um + i*step_um.
    background/scale record the normalization applied (0/1 = raw).
    """

    planes: np.ndarray
    pixel_size_um: float = 0.325
    step_um: float = 0.5
    z0_um: float = 0.0
    background: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float32)
        if self.planes.ndim == 2:
            self.planes = self.planes[None]
        if self.planes.ndim != 3 or self.planes.shape[0] < 1:
            raise DimensionError(f"stack planes must be (Nz, H, W), got {self.planes.shape}")

    @property
    def nz(self) -> int:
        return self.planes.shape[0]

    @property
    def shape(self):
        return self.planes.shape

    def z_of(self, index: int) -> float:
        return self.z0_um + index * self.step_um

    def z_values(self) -> np.ndarray:
        return self.z0_um + self.step_um * np.arange(self.nz)

    def index_of(self, z_um: float) -> int:
        if self.nz == 1:
            return 0
        return int(round((z_um - self.z0_um) / self.step_um))


def save_dzst(path, stack: ImageStack, distance_map: bool = False):
    version = DZST_VERSION | (DZST_FLAG_DISTANCE_MAP if distance_map else 0)
    nz, h, w = stack.planes.shape
    header = struct.pack(
        "<4sIIIIfffff",
        DZST_MAGIC,
        version,
        nz,
        h,
        w,
        float(stack.pixel_size_um),
        float(stack.step_um),
        float(stack.z0_um),
        float(stack.background),
        float(stack.scale),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stack.planes, dtype="<f4").tobytes())


def load_dzst(path):
    """Read a DZST file; returns (ImageStack, is_distance_map)."""
    with open(path, "rb") as fh:
        head = fh.read(40)
        if len(head) != 40:
            raise ValueError(f"{path}: truncated DZST header")
        magic, version, nz, h, w, px, step, z0, bg, scale = struct.unpack("<4sIIIIfffff", head)
        if magic != DZST_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {DZST_MAGIC!r}")
        if (version & 0xFFFF) != DZST_VERSION:
            raise ValueError(f"{path}: unsupported DZST version {version & 0xFFFF}")
        buf = fh.read(4 * nz * h * w)
        if len(buf) != 4 * nz * h * w:
            raise ValueError(f"{path}: truncated DZST data")
        planes = np.frombuffer(buf, dtype="<f4").reshape(nz, h, w).copy()
    stack = ImageStack(planes, pixel_size_um=px, step_um=step, z0_um=z0, background=bg, scale=scale)
    return stack, bool(version & DZST_FLAG_DISTANCE_MAP)


# ---------------------------------------------------------------------------
# minimal TIFF
# ---------------------------------------------------------------------------

_TAG_WIDTH = 256
_TAG_LENGTH = 257
_TAG_BITS = 258
_TAG_COMPRESSION = 259
_TAG_PHOTOMETRIC = 262
_TAG_STRIP_OFFSETS = 273
_TAG_SAMPLES_PER_PIXEL = 277
_TAG_ROWS_PER_STRIP = 278
_TAG_STRIP_BYTE_COUNTS = 279
_TAG_SAMPLE_FORMAT = 339

_TYPE_SHORT = 3
_TYPE_LONG = 4

_DTYPES = {
    (8, 1): np.uint8,
    (16, 1): np.uint16,
    (32, 3): np.float32,
}


def write_tiff(path, planes: np.ndarray, dtype=None):
    """Write (Nz, H, W) or (H, W) data as an uncompressed multi-page TIFF."""
    arr = np.asarray(planes)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"write_tiff expects (Nz, H, W) or (H, W), got {arr.shape}")
    if dtype is not None:
        arr = arr.astype(dtype)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    if arr.dtype not in (np.uint8, np.uint16, np.float32):
        raise ValueError(f"unsupported TIFF dtype {arr.dtype}; use uint8, uint16 or float32")
    nz, h, w = arr.shape
    bits = arr.dtype.itemsize * 8
    fmt = 3 if arr.dtype == np.float32 else 1
    plane_bytes = h * w * arr.dtype.itemsize

    entries = [
        (_TAG_WIDTH, _TYPE_LONG, w),
        (_TAG_LENGTH, _TYPE_LONG, h),
        (_TAG_BITS, _TYPE_SHORT, bits),
        (_TAG_COMPRESSION, _TYPE_SHORT, 1),
        (_TAG_PHOTOMETRIC, _TYPE_SHORT, 1),
        (_TAG_STRIP_OFFSETS, _TYPE_LONG, 0),  # patched per page
        (_TAG_SAMPLES_PER_PIXEL, _TYPE_SHORT, 1),
        (_TAG_ROWS_PER_STRIP, _TYPE_LONG, h),
        (_TAG_STRIP_BYTE_COUNTS, _TYPE_LONG, plane_bytes),
        (_TAG_SAMPLE_FORMAT, _TYPE_SHORT, fmt),
    ]
    ifd_size = 2 + 12 * len(entries) + 4

    with open(path, "wb") as fh:
        fh.write(struct.pack("<2sHI", b"II", 42, 8))
        offset = 8
        for i in range(nz):
            data_offset = offset + ifd_size
            next_ifd = data_offset + plane_bytes if i + 1 < nz else 0
            fh.write(struct.pack("<H", len(entries)))
            for tag, typ, value in entries:
                if tag == _TAG_STRIP_OFFSETS:
                    value = data_offset
                fh.write(struct.pack("<HHI", tag, typ, 1))
                if typ == _TYPE_SHORT:
                    fh.write(struct.pack("<HH", value, 0))
                else:
                    fh.write(struct.pack("<I", value))
            fh.write(struct.pack("<I", next_ifd))
            fh.write(np.ascontiguousarray(arr[i]).astype(arr.dtype.newbyteorder("<")).tobytes())
            offset = data_offset + plane_bytes


def read_tiff(path) -> np.ndarray:
    """Read an uncompressed grayscale TIFF into a (Nz, H, W) float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"II":
        raise ValueError(f"{path}: only little-endian TIFF is supported")
    if struct.unpack("<H", blob[2:4])[0] != 42:
        raise ValueError(f"{path}: not a TIFF file")
    (ifd_offset,) = struct.unpack("<I", blob[4:8])

    planes = []
    while ifd_offset:
        (count,) = struct.unpack("<H", blob[ifd_offset : ifd_offset + 2])
        tags = {}
        for i in range(count):
            base = ifd_offset + 2 + 12 * i
            tag, typ, n = struct.unpack("<HHI", blob[base : base + 8])
            if typ == _TYPE_SHORT:
                values = struct.unpack(f"<{min(n, 2)}H", blob[base + 8 : base + 8 + 2 * min(n, 2)])
            elif typ == _TYPE_LONG:
                if n == 1:
                    values = struct.unpack("<I", blob[base + 8 : base + 12])
                else:
                    (ptr,) = struct.unpack("<I", blob[base + 8 : base + 12])
                    values = struct.unpack(f"<{n}I", blob[ptr : ptr + 4 * n])
            else:
                continue
            tags[tag] = values
        (next_ifd,) = struct.unpack("<I", blob[ifd_offset + 2 + 12 * count : ifd_offset + 6 + 12 * count])

        w = tags[_TAG_WIDTH][0]
        h = tags[_TAG_LENGTH][0]
        bits = tags.get(_TAG_BITS, (8,))[0]
        fmt = tags.get(_TAG_SAMPLE_FORMAT, (1,))[0]
        if tags.get(_TAG_COMPRESSION, (1,))[0] != 1:
            raise ValueError(f"{path}: compressed TIFF is not supported")
        if tags.get(_TAG_SAMPLES_PER_PIXEL, (1,))[0] != 1:
            raise ValueError(f"{path}: only single-sample grayscale TIFF is supported")
        dtype = _DTYPES.get((bits, fmt))
        if dtype is None:
            raise ValueError(f"{path}: unsupported sample layout ({bits}-bit, format {fmt})")

        offsets = tags[_TAG_STRIP_OFFSETS]
        counts = tags.get(_TAG_STRIP_BYTE_COUNTS)
        if counts is None:
            counts = (h * w * np.dtype(dtype).itemsize,)
        raw = b"".join(blob[o : o + c] for o, c in zip(offsets, counts))
        plane = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"), count=h * w).reshape(h, w)
        planes.append(plane.astype(np.float32))
        ifd_offset = next_ifd

    if not planes:
        raise ValueError(f"{path}: no TIFF pages found")
    return np.stack(planes)
