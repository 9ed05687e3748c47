"""Voxel-grid data model and NIfTI-1 file I/O.

All volumes in the pipeline share one atlas-style grid, so only a narrow
NIfTI-1 subset is supported: single-file little-endian volumes (magic
"n+1"), dimensionality 3, datatypes uint8 / int16 / float32, optionally
gzip-compressed. Orientation beyond spacing and origin is carried along
verbatim but never interpreted.

Array convention: volume data has shape (nx, ny, nz) and ``data[x, y, z]``
addresses the voxel whose flat file offset is ``(z*ny + y)*nx + x`` (x
fastest, as stored in the file).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import VolumeCorruptionError, VolumeFormatError

# Normative label convention for segmentation volumes.
LABEL_BACKGROUND = 0
LABEL_NECROSIS = 1
LABEL_EDEMA = 2
LABEL_ENHANCING = 3
VALID_LABELS = (LABEL_BACKGROUND, LABEL_NECROSIS, LABEL_EDEMA, LABEL_ENHANCING)

ORIGIN_TOLERANCE_MM = 1e-6

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 header, little-endian, fields in file order.
_HEADER_FMT = "".join(
    [
        "<",
        "i",  # sizeof_hdr
        "10s",  # data_type (unused)
        "18s",  # db_name (unused)
        "i",  # extents (unused)
        "h",  # session_error (unused)
        "b",  # regular (unused)
        "b",  # dim_info
        "8h",  # dim
        "fff",  # intent_p1..p3
        "h",  # intent_code
        "h",  # datatype
        "h",  # bitpix
        "h",  # slice_start
        "8f",  # pixdim
        "f",  # vox_offset
        "f",  # scl_slope
        "f",  # scl_inter
        "h",  # slice_end
        "b",  # slice_code
        "b",  # xyzt_units
        "f",  # cal_max
        "f",  # cal_min
        "f",  # slice_duration
        "f",  # toffset
        "i",  # glmax (unused)
        "i",  # glmin (unused)
        "80s",  # descrip
        "24s",  # aux_file
        "h",  # qform_code
        "h",  # sform_code
        "fff",  # quatern_b, c, d
        "fff",  # qoffset_x, y, z
        "4f",  # srow_x
        "4f",  # srow_y
        "4f",  # srow_z
        "16s",  # intent_name
        "4s",  # magic
    ]
)
_HEADER = struct.Struct(_HEADER_FMT)
assert _HEADER.size == HEADER_SIZE

# Byte span of the orientation block (qform_code .. srow_z) preserved
# verbatim on round-trip.
_ORIENT_SPAN = (252, 328)

_DT_UINT8 = 2
_DT_INT16 = 4
_DT_FLOAT32 = 16
_NUMPY_DTYPES = {
    _DT_UINT8: np.dtype("<u1"),
    _DT_INT16: np.dtype("<i2"),
    _DT_FLOAT32: np.dtype("<f4"),
}
_BITPIX = {_DT_UINT8: 8, _DT_INT16: 16, _DT_FLOAT32: 32}


@dataclass(frozen=True)
class GridMeta:
    """Geometry of a voxel grid: shape, spacing (mm), world origin (mm).

    ``origin`` is the world position of the center of voxel (0, 0, 0).
    ``orient`` carries the raw NIfTI orientation block of a loaded file so
    that writing it back preserves those bytes; it never affects geometry
    or compatibility.
    """

    shape: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    orient: bytes | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("shape, spacing, and origin must have 3 entries")
        if any(n < 1 for n in shape):
            raise ValueError(f"all shape entries must be >= 1, got {shape}")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"all spacing entries must be > 0, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def diagonal_mm(self) -> float:
        """Physical diagonal extent of the grid."""
        return float(
            np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(self.shape, self.spacing)))
        )

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates (mm) of voxel centers along one axis."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.shape[axis])


def grids_compatible(a: GridMeta, b: GridMeta) -> bool:
    """True iff shapes and spacings match and origins agree to 1e-6 mm."""
    return (
        a.shape == b.shape
        and a.spacing == b.spacing
        and all(abs(oa - ob) < ORIGIN_TOLERANCE_MM for oa, ob in zip(a.origin, b.origin))
    )


def ensure_compatible(*metas: GridMeta) -> None:
    from .errors import GridCompatibilityError

    first = metas[0]
    for other in metas[1:]:
        if not grids_compatible(first, other):
            raise GridCompatibilityError(
                f"incompatible grids: shape/spacing/origin "
                f"{first.shape}/{first.spacing}/{first.origin} vs "
                f"{other.shape}/{other.spacing}/{other.origin}"
            )


def _freeze(meta: GridMeta, data: np.ndarray, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.shape != meta.shape:
        raise ValueError(f"data shape {arr.shape} does not match grid shape {meta.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Dense 3D field of real values on a grid (densities, probabilities,
    distances)."""

    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        object.__setattr__(self, "data", _freeze(self.meta, arr))

    def __eq__(self, other):
        if not isinstance(other, ScalarVolume):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense 3D field of tumor-compartment labels {0, 1, 2, 3}."""

    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label data must be integer, got dtype {arr.dtype}")
        bad = np.setdiff1d(np.unique(arr), VALID_LABELS)
        if bad.size:
            raise ValueError(f"labels outside {set(VALID_LABELS)}: {bad.tolist()}")
        object.__setattr__(self, "data", _freeze(self.meta, arr, np.uint8))

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.data, other.data)

    def label_mask(self, labels) -> "Mask":
        """Mask of voxels whose label is in ``labels``."""
        return Mask(self.meta, np.isin(self.data, list(labels)))


@dataclass(frozen=True, eq=False)
class Mask:
    """Dense 3D boolean region."""

    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.bool_:
            vals = np.unique(arr)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"mask values must be 0/1, got {vals.tolist()}")
        object.__setattr__(self, "data", _freeze(self.meta, arr, np.bool_))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.data, other.data)

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))


Volume = Union[ScalarVolume, LabelVolume, Mask]


def _open_for_read(path: Path):
    raw = open(path, "rb")
    magic = raw.read(2)
    raw.seek(0)
    if magic == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=raw)
    return raw


def read_volume(
    path,
    *,
    as_mask: bool = False,
    label_remap: Mapping[int, int] | None = None,
) -> Volume:
    """Read a supported NIfTI-1 volume.

    Float files load as ScalarVolume. Integer files load as LabelVolume,
    or as Mask when ``as_mask`` is set and all values are 0/1.
    ``label_remap`` translates raw integer values before label validation.
    Scaling slope/intercept, when non-identity, is applied and yields a
    ScalarVolume regardless of on-disk type.
    """
    path = Path(path)
    with _open_for_read(path) as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise VolumeCorruptionError(f"{path}: truncated header ({len(header)} bytes)")
        fields = _HEADER.unpack(header)
        sizeof_hdr = fields[0]
        if sizeof_hdr != HEADER_SIZE:
            raise VolumeFormatError(
                f"{path}: sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} "
                "(big-endian and NIfTI-2 files are unsupported)"
            )
        magic = fields[-1]
        if magic != MAGIC:
            raise VolumeFormatError(f"{path}: magic is {magic!r}, expected {MAGIC!r}")
        dim = fields[7:15]
        if dim[0] != 3:
            raise VolumeFormatError(f"{path}: dim[0] is {dim[0]}, only 3D supported")
        nx, ny, nz = (int(d) for d in dim[1:4])
        if min(nx, ny, nz) < 1:
            raise VolumeFormatError(f"{path}: dim contains non-positive extent {dim[1:4]}")
        datatype = fields[19]
        if datatype not in _NUMPY_DTYPES:
            raise VolumeFormatError(
                f"{path}: datatype {datatype} unsupported (uint8=2, int16=4, float32=16)"
            )
        bitpix = fields[20]
        if bitpix != _BITPIX[datatype]:
            raise VolumeFormatError(
                f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}"
            )
        pixdim = fields[22:30]
        spacing = tuple(float(p) for p in pixdim[1:4])
        if any(not s > 0 for s in spacing):
            raise VolumeFormatError(f"{path}: pixdim spacing must be positive, got {spacing}")
        vox_offset = int(fields[30])
        if vox_offset < HEADER_SIZE:
            raise VolumeFormatError(f"{path}: vox_offset {vox_offset} < {HEADER_SIZE}")
        scl_slope = float(fields[31])
        scl_inter = float(fields[32])
        origin = tuple(float(q) for q in fields[49:52])
        orient = header[_ORIENT_SPAN[0] : _ORIENT_SPAN[1]]

        fh.read(vox_offset - HEADER_SIZE)
        dt = _NUMPY_DTYPES[datatype]
        expected = nx * ny * nz * dt.itemsize
        payload = fh.read(expected)
        if len(payload) < expected:
            raise VolumeCorruptionError(
                f"{path}: payload truncated, got {len(payload)} of {expected} bytes"
            )

    meta = GridMeta((nx, ny, nz), spacing, origin, orient=orient)
    data = np.frombuffer(payload, dtype=dt).reshape((nx, ny, nz), order="F")

    scaled = not (scl_slope in (0.0, 1.0) and scl_inter == 0.0)
    if scaled:
        data = data.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
        if as_mask:
            raise VolumeFormatError(f"{path}: scl_slope/scl_inter set, cannot load as mask")
        return ScalarVolume(meta, data)
    if datatype == _DT_FLOAT32:
        if as_mask:
            raise VolumeFormatError(f"{path}: datatype is float32, cannot load as mask")
        return ScalarVolume(meta, data)
    if as_mask:
        vals = np.unique(data)
        if not np.isin(vals, (0, 1)).all():
            raise VolumeFormatError(
                f"{path}: mask requested but values are {vals.tolist()}"
            )
        return Mask(meta, data != 0)
    if label_remap:
        remapped = data.astype(np.int64, copy=True)
        for src, dst in label_remap.items():
            remapped[data == src] = dst
        data = remapped
    return LabelVolume(meta, data)


def _canonical_orient(meta: GridMeta) -> bytes:
    # Identity qform (code 1, unit quaternion), no sform.
    return struct.pack(
        "<hhffffff4f4f4f",
        1,
        0,
        0.0,
        0.0,
        0.0,
        meta.origin[0],
        meta.origin[1],
        meta.origin[2],
        *(0.0,) * 12,
    )


def write_volume(vol: Volume, path) -> None:
    """Write a volume as single-file NIfTI-1; gzip when path ends in .gz.

    ScalarVolume is stored as float32, LabelVolume and Mask as uint8.
    ``read_volume(write_volume(v))`` reproduces ``v`` exactly for data
    already in a storable dtype.
    """
    path = Path(path)
    if isinstance(vol, ScalarVolume):
        datatype = _DT_FLOAT32
        payload_arr = vol.data.astype("<f4", copy=False)
    elif isinstance(vol, LabelVolume):
        datatype = _DT_UINT8
        payload_arr = vol.data
    elif isinstance(vol, Mask):
        datatype = _DT_UINT8
        payload_arr = vol.data.astype(np.uint8)
    else:
        raise TypeError(f"unsupported volume type {type(vol).__name__}")

    meta = vol.meta
    nx, ny, nz = meta.shape
    orient = meta.orient if meta.orient is not None else _canonical_orient(meta)
    if len(orient) != _ORIENT_SPAN[1] - _ORIENT_SPAN[0]:
        raise ValueError(f"orientation block must be {_ORIENT_SPAN[1] - _ORIENT_SPAN[0]} bytes")
    qform_code, sform_code = struct.unpack_from("<hh", orient, 0)
    quatern = struct.unpack_from("<fff", orient, 4)
    qoffset = struct.unpack_from("<fff", orient, 16)
    srows = struct.unpack_from("<12f", orient, 28)

    header = _HEADER.pack(
        HEADER_SIZE,
        b"",
        b"",
        0,
        0,
        0,
        0,
        3,
        nx,
        ny,
        nz,
        1,
        1,
        1,
        1,
        0.0,
        0.0,
        0.0,
        0,
        datatype,
        _BITPIX[datatype],
        0,
        1.0,  # pixdim[0] (qfac)
        meta.spacing[0],
        meta.spacing[1],
        meta.spacing[2],
        0.0,
        0.0,
        0.0,
        0.0,
        float(VOX_OFFSET),
        1.0,  # scl_slope
        0.0,  # scl_inter
        0,
        0,
        2,  # xyzt_units: millimeters
        0.0,
        0.0,
        0.0,
        0.0,
        0,
        0,
        b"gbmbench",
        b"",
        qform_code,
        sform_code,
        *quatern,
        *qoffset,
        *srows,
        b"",
        MAGIC,
    )
    blob = bytearray(header)
    blob += b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    blob += payload_arr.tobytes(order="F")

    if path.suffix == ".gz":
        # mtime and filename pinned so identical volumes produce identical bytes
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(bytes(blob))
    else:
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
