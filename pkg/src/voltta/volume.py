"""Volume/label data model, preprocessing pipeline, and file formats.

Preprocessing follows a fixed order: pad to a cube, resample to the working
grid (trilinear for intensities, nearest for labels), then normalize
intensities over the non-zero region per channel. The native ``.svol``
container round-trips bit-exactly; a minimal uncompressed NIfTI-1 reader
covers ingestion of real-world volumes (stored axis order, no reorientation).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

SVOL_MAGIC = b"SVOL1\x00"
NORMALIZE_STD_FLOOR = 1e-8


class SvolError(Exception):
    """Base error for the svol container format."""


class BadMagic(SvolError):
    pass


class TruncatedPayload(SvolError):
    pass


class PayloadSizeMismatch(SvolError):
    pass


class UnsupportedFeature(Exception):
    """NIfTI feature outside the minimal reader's scope; names the field."""

    def __init__(self, field, detail=""):
        self.field = field
        super().__init__(f"unsupported NIfTI feature: {field}" + (f" ({detail})" if detail else ""))


@dataclass
class Volume:
    """Multi-channel intensity grid, channels-first float64."""

    data: np.ndarray  # (channels, D, H, W)
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"Volume data must be 4-D (C,D,H,W), got {self.data.shape}")
        if min(self.data.shape[1:]) < 1:
            raise ValueError(f"Volume dims must all be >= 1, got {self.dims}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass
class LabelMap:
    """Integer class grid; 0 is background."""

    labels: np.ndarray  # (D, H, W) uint16
    class_count: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"LabelMap must be 3-D, got {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]")
        self.labels = self.labels.astype(np.uint16)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.labels.shape


# ---------------------------------------------------------------------------
# preprocessing


def _cube_pad_amounts(dims):
    side = max(dims)
    pads = []
    for extent in dims:
        deficit = side - extent
        before = deficit // 2
        pads.append((before, deficit - before))  # odd deficit: extra trailing slice
    return pads


def pad_to_cube(v):
    """Zero-pad to (S,S,S), S = max extent, splitting symmetrically."""
    if isinstance(v, LabelMap):
        pads = _cube_pad_amounts(v.dims)
        return LabelMap(np.pad(v.labels, pads), v.class_count, v.spacing)
    pads = _cube_pad_amounts(v.dims)
    return Volume(np.pad(v.data, [(0, 0)] + pads), v.spacing)


def _corner_aligned_coords(src, dst):
    if dst < 1:
        raise ValueError(f"resample target extent must be >= 1, got {dst}")
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst) * ((src - 1) / (dst - 1))


def resample_trilinear(v: Volume, target):
    """Corner-aligned trilinear resampling of an intensity volume."""
    coords = [_corner_aligned_coords(s, t) for s, t in zip(v.dims, target)]
    lo = [np.floor(c).astype(np.int64) for c in coords]
    hi = [np.minimum(l + 1, s - 1) for l, s in zip(lo, v.dims)]
    fr = [c - l for c, l in zip(coords, lo)]

    out = np.zeros((v.channels,) + tuple(target))
    for dz, wz in ((lo[0], 1.0 - fr[0]), (hi[0], fr[0])):
        for dy, wy in ((lo[1], 1.0 - fr[1]), (hi[1], fr[1])):
            for dx, wx in ((lo[2], 1.0 - fr[2]), (hi[2], fr[2])):
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * v.data[:, dz[:, None, None], dy[None, :, None], dx[None, None, :]]
    scale = [s / t for s, t in zip(v.dims, target)]
    spacing = tuple(sp * sc for sp, sc in zip(v.spacing, scale))
    return Volume(out, spacing)


def resample_nearest(m: LabelMap, target):
    """Nearest-neighbor label resampling (round-half-up along each axis)."""
    coords = [_corner_aligned_coords(s, t) for s, t in zip(m.dims, target)]
    idx = [np.minimum(np.floor(c + 0.5).astype(np.int64), s - 1)
           for c, s in zip(coords, m.dims)]
    labels = m.labels[idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
    scale = [s / t for s, t in zip(m.dims, target)]
    spacing = tuple(sp * sc for sp, sc in zip(m.spacing, scale))
    return LabelMap(labels, m.class_count, spacing)


def normalize_nonzero(v: Volume):
    """Zero-mean unit-std per channel over voxels with nonzero intensity.

    Uses the population (biased) standard deviation; channels whose nonzero
    std falls below ``NORMALIZE_STD_FLOOR`` are only mean-shifted. Zero
    voxels stay exactly zero.
    """
    out = v.data.copy()
    for c in range(v.channels):
        chan = out[c]
        mask = chan != 0.0
        if not mask.any():
            continue
        vals = chan[mask]
        mean = vals.mean()
        std = vals.std()
        if std < NORMALIZE_STD_FLOOR:
            std = 1.0
        chan[mask] = (vals - mean) / std
    return Volume(out, v.spacing)


def preprocess(v: Volume, grid):
    """pad -> resample -> normalize, the fixed pipeline order."""
    return normalize_nonzero(resample_trilinear(pad_to_cube(v), (grid,) * 3))


def preprocess_labels(m: LabelMap, grid):
    return resample_nearest(pad_to_cube(m), (grid,) * 3)


# ---------------------------------------------------------------------------
# svol container


def write_svol(path, v):
    if isinstance(v, LabelMap):
        header = {"kind": "labels", "channels": 1, "dims": list(v.dims),
                  "spacing": list(v.spacing), "dtype": "u16", "class_count": v.class_count}
        payload = np.ascontiguousarray(v.labels, dtype="<u2").tobytes()
    else:
        header = {"kind": "volume", "channels": v.channels, "dims": list(v.dims),
                  "spacing": list(v.spacing), "dtype": "f64"}
        payload = np.ascontiguousarray(v.data, dtype="<f8").tobytes()
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SVOL_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)


def read_svol(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != SVOL_MAGIC:
        raise BadMagic(f"{path}: magic {blob[:6]!r} != {SVOL_MAGIC!r}")
    if len(blob) < 10:
        raise TruncatedPayload(f"{path}: file shorter than fixed header")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise TruncatedPayload(f"{path}: header length {hlen} overruns file")
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    dims = tuple(header["dims"])
    spacing = tuple(header["spacing"])
    payload = blob[10 + hlen:]
    if header["kind"] == "labels":
        expected = int(np.prod(dims)) * 2
        _check_payload(path, len(payload), expected)
        labels = np.frombuffer(payload, dtype="<u2").reshape(dims)
        return LabelMap(labels.copy(), header["class_count"], spacing)
    expected = header["channels"] * int(np.prod(dims)) * 8
    _check_payload(path, len(payload), expected)
    data = np.frombuffer(payload, dtype="<f8").reshape((header["channels"],) + dims)
    return Volume(data.copy(), spacing)


def _check_payload(path, got, expected):
    if got < expected:
        raise TruncatedPayload(f"{path}: payload {got} bytes < declared {expected}")
    if got > expected:
        raise PayloadSizeMismatch(f"{path}: payload {got} bytes > declared {expected}")


# ---------------------------------------------------------------------------
# minimal NIfTI-1 reader

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti_minimal(path, kind="volume"):
    """Read an uncompressed single-file NIfTI-1 volume.

    Supports datatypes uint8/int16/float32, up to 3 spatial dims plus an
    optional 4th treated as channels, little-endian files only. Intensities
    are scaled by scl_slope/scl_inter when scl_slope is nonzero. Data is
    returned in stored axis order (no reorientation).
    """
    with open(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) >= 2 and hdr[:2] == b"\x1f\x8b":
            raise UnsupportedFeature("compression", "gzip stream; only raw .nii supported")
        if len(hdr) < 348:
            raise SvolError(f"{path}: NIfTI header shorter than 348 bytes")
        (sizeof_hdr,) = struct.unpack("<i", hdr[0:4])
        if sizeof_hdr != 348:
            raise UnsupportedFeature("byte_order", f"sizeof_hdr={sizeof_hdr}; expected 348 little-endian")
        magic = hdr[344:348]
        if magic != b"n+1\x00":
            raise BadMagic(f"{path}: NIfTI magic {magic!r} != b'n+1\\x00'")
        dim = struct.unpack("<8h", hdr[40:56])
        ndim = dim[0]
        if ndim < 1 or ndim > 4:
            raise UnsupportedFeature("dim", f"dim[0]={ndim}; only 1..4 supported")
        (datatype,) = struct.unpack("<h", hdr[70:72])
        if datatype not in _NIFTI_DTYPES:
            raise UnsupportedFeature("datatype", f"code {datatype}")
        pixdim = struct.unpack("<8f", hdr[76:108])
        (vox_offset,) = struct.unpack("<f", hdr[108:112])
        scl_slope, scl_inter = struct.unpack("<2f", hdr[112:120])

        extents = [max(1, dim[i]) for i in range(1, 5)]
        nx, ny, nz, nt = extents[0], extents[1], extents[2], extents[3] if ndim == 4 else 1
        count = nx * ny * nz * nt
        f.seek(int(vox_offset))
        raw = f.read(count * np.dtype(_NIFTI_DTYPES[datatype]).itemsize)
    if len(raw) < count * np.dtype(_NIFTI_DTYPES[datatype]).itemsize:
        raise TruncatedPayload(f"{path}: NIfTI data shorter than header dims imply")

    arr = np.frombuffer(raw, dtype=np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<"))
    # stored order is x-fastest; reshape to (channels, z, y, x)
    arr = arr.reshape(nt, nz, ny, nx).astype(np.float64)
    if scl_slope != 0.0:
        arr = arr * scl_slope + scl_inter
    spacing = (pixdim[3] or 1.0, pixdim[2] or 1.0, pixdim[1] or 1.0)
    if kind == "labels":
        if nt != 1:
            raise UnsupportedFeature("dim", "4-D label maps not supported")
        labels = np.rint(arr[0]).astype(np.int64)
        return LabelMap(labels, class_count=int(labels.max()) + 1, spacing=spacing)
    return Volume(arr, spacing)
