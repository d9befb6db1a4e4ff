"""NIfTI-1 volume I/O.

Reads and writes single-file NIfTI-1 streams (optionally gzip-wrapped)
into :class:`VoxelGrid` / :class:`LabelVolume` values.  The reader
detects byte order from ``sizeof_hdr``, applies ``scl_slope`` rescaling,
and resolves the voxel-to-world affine with sform taking precedence
over qform over a diagonal ``pixdim`` fallback.

Exactly six datatype codes are supported; anything else is a hard
error rather than a silent coercion:

========  =========  ======
code      numpy      bitpix
========  =========  ======
2         uint8      8
4         int16      16
8         int32      32
16        float32    32
64        float64    64
512       uint16     16
========  =========  ======
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    HeaderInconsistent,
    LabelOutOfRange,
    LossyConversion,
    NonIntegerLabels,
    TruncatedData,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
CODE_BY_NAME = {dt.name: code for code, dt in DTYPE_BY_CODE.items()}

LABEL_NAMES = {0: "background", 1: "ET", 2: "ED", 3: "CAV"}
MAX_LABEL = 3


@dataclass(frozen=True)
class NiftiHeader:
    """Decoded NIfTI-1 header fields the pipeline cares about."""

    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow_x: tuple[float, float, float, float]
    srow_y: tuple[float, float, float, float]
    srow_z: tuple[float, float, float, float]
    magic: bytes
    byteorder: str


@dataclass(frozen=True)
class VoxelGrid:
    """A 3D scalar image: float64 data indexed ``[x, y, z]`` plus geometry.

    ``affine`` maps voxel indices (homogeneous) to world millimetres.
    Values are arbitrary MR units before normalization and z-score
    units afterwards; the container does not care which.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HeaderInconsistent(f"VoxelGrid data must be 3D, got {self.data.ndim}D")
        if any(s <= 0 for s in self.spacing):
            raise HeaderInconsistent(f"non-positive spacing {self.spacing}")
        if self.affine.shape != (4, 4):
            raise HeaderInconsistent("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise HeaderInconsistent("affine upper-left 3x3 is singular")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """A 3D label map over {0: background, 1: ET, 2: ED, 3: CAV}."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HeaderInconsistent(f"LabelVolume data must be 3D, got {self.data.ndim}D")
        if self.data.dtype != np.uint8:
            raise NonIntegerLabels(f"label data must be uint8, got {self.data.dtype}")
        if self.data.size:
            top = int(self.data.max())
            if top > MAX_LABEL:
                raise LabelOutOfRange(top)
        if any(s <= 0 for s in self.spacing):
            raise HeaderInconsistent(f"non-positive spacing {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def same_geometry(a, b, tol: float = 1e-6) -> bool:
    """True when two volumes share dims, spacing, and affine within tol."""
    return (a.dims == b.dims
            and np.allclose(a.spacing, b.spacing, atol=tol)
            and np.allclose(a.affine, b.affine, atol=tol))


# ---------------------------------------------------------------------------
# reading

def _inflate(raw: bytes, gz: bool | None) -> bytes:
    if gz is None:
        gz = raw[:2] == b"\x1f\x8b"
    if gz:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"gzip stream does not inflate: {exc}") from exc
    return raw


def _probe_byteorder(raw: bytes) -> str:
    (le,) = struct.unpack_from("<i", raw, 0)
    if le == HEADER_SIZE:
        return "<"
    (be,) = struct.unpack_from(">i", raw, 0)
    if be == HEADER_SIZE:
        return ">"
    raise HeaderInconsistent(f"sizeof_hdr is {le} (LE) / {be} (BE), expected 348")


def _parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"stream is {len(raw)} bytes, header needs {HEADER_SIZE}")
    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"magic bytes {magic!r} are not a NIfTI-1 signature")
    bo = _probe_byteorder(raw)
    dim = struct.unpack_from(bo + "8h", raw, 40)
    (datatype,) = struct.unpack_from(bo + "h", raw, 70)
    (bitpix,) = struct.unpack_from(bo + "h", raw, 72)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(bo + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(bo + "2h", raw, 252)
    quatern = struct.unpack_from(bo + "3f", raw, 256)
    qoffset = struct.unpack_from(bo + "3f", raw, 268)
    srow_x = struct.unpack_from(bo + "4f", raw, 280)
    srow_y = struct.unpack_from(bo + "4f", raw, 296)
    srow_z = struct.unpack_from(bo + "4f", raw, 312)
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE, dim=tuple(int(d) for d in dim),
        datatype=int(datatype), bitpix=int(bitpix),
        pixdim=tuple(float(p) for p in pixdim), vox_offset=float(vox_offset),
        scl_slope=float(scl_slope), scl_inter=float(scl_inter),
        qform_code=int(qform_code), sform_code=int(sform_code),
        quatern=tuple(float(q) for q in quatern),
        qoffset=tuple(float(q) for q in qoffset),
        srow_x=tuple(float(v) for v in srow_x),
        srow_y=tuple(float(v) for v in srow_y),
        srow_z=tuple(float(v) for v in srow_z),
        magic=magic, byteorder=bo,
    )


def _quaternion_affine(header: NiftiHeader) -> np.ndarray:
    b, c, d = header.quatern
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a_sq) if a_sq > 0.0 else 0.0
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = header.pixdim[0]
    if qfac == 0.0:
        qfac = 1.0
    scales = np.array([header.pixdim[1], header.pixdim[2], header.pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = r * scales[np.newaxis, :]
    affine[:3, 3] = header.qoffset
    return affine


def resolve_affine(header: NiftiHeader) -> np.ndarray:
    """sform when sform_code > 0, else qform, else diagonal pixdim."""
    if header.sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = header.srow_x
        affine[1, :] = header.srow_y
        affine[2, :] = header.srow_z
        return affine
    if header.qform_code > 0:
        return _quaternion_affine(header)
    affine = np.diag([header.pixdim[1], header.pixdim[2], header.pixdim[3], 1.0])
    return affine


def _check_header(header: NiftiHeader) -> tuple[int, int, int]:
    if header.datatype not in DTYPE_BY_CODE:
        raise UnsupportedDatatype(header.datatype)
    expected_bits = DTYPE_BY_CODE[header.datatype].itemsize * 8
    if header.bitpix != expected_bits:
        raise HeaderInconsistent(
            f"bitpix {header.bitpix} contradicts datatype {header.datatype} "
            f"(expected {expected_bits})")
    rank = header.dim[0]
    if rank == 4:
        if header.dim[4] != 1:
            raise HeaderInconsistent(
                f"4D volume with dim[4]={header.dim[4]}; only singleton time axes are accepted")
    elif rank != 3:
        raise HeaderInconsistent(f"rank {rank} volume; expected 3D (or 4D with one frame)")
    nx, ny, nz = header.dim[1], header.dim[2], header.dim[3]
    if min(nx, ny, nz) < 1:
        raise HeaderInconsistent(f"non-positive dims {(nx, ny, nz)}")
    if any(header.pixdim[i] <= 0 for i in (1, 2, 3)):
        raise HeaderInconsistent(f"non-positive pixdim {header.pixdim[1:4]}")
    return nx, ny, nz


def read_nifti(raw: bytes, gz: bool | None = None) -> tuple[NiftiHeader, VoxelGrid]:
    """Decode a NIfTI-1 byte stream into its header and a VoxelGrid.

    Parameters
    ----------
    raw:
        The whole file as bytes, gzip-wrapped or not.
    gz:
        ``None`` (default) detects gzip by the 0x1F 0x8B prefix; pass
        True/False to force the interpretation.

    Returns
    -------
    (NiftiHeader, VoxelGrid)
        Voxel values as float64 with ``scl_slope``/``scl_inter``
        applied when the slope is nonzero.
    """
    raw = _inflate(raw, gz)
    header = _parse_header(raw)
    nx, ny, nz = _check_header(header)

    dtype = DTYPE_BY_CODE[header.datatype].newbyteorder(header.byteorder)
    count = nx * ny * nz
    offset = int(header.vox_offset)
    if offset < SINGLE_FILE_OFFSET:
        offset = SINGLE_FILE_OFFSET
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedData(f"need {need} bytes for the voxel block, stream has {len(raw)}")

    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float64)
    if header.scl_slope != 0.0:
        data = data * header.scl_slope + header.scl_inter

    spacing = (float(header.pixdim[1]), float(header.pixdim[2]), float(header.pixdim[3]))
    grid = VoxelGrid(data=data, spacing=spacing, affine=resolve_affine(header))
    return header, grid


def read_label_volume(raw: bytes, gz: bool | None = None) -> tuple[NiftiHeader, LabelVolume]:
    """Decode a byte stream into a LabelVolume over {0, 1, 2, 3}.

    Float-encoded labels are accepted when every value is within 1e-6
    of an integer (resampling tools sometimes emit float label maps).
    """
    header, grid = read_nifti(raw, gz)
    rounded = np.rint(grid.data)
    drift = np.abs(grid.data - rounded)
    if drift.size and float(drift.max()) > 1e-6:
        worst = float(grid.data.flat[int(np.argmax(drift))])
        raise NonIntegerLabels(f"voxel value {worst!r} is not integral within 1e-6")
    if rounded.size:
        lo, hi = float(rounded.min()), float(rounded.max())
        if lo < 0 or hi > MAX_LABEL:
            raise LabelOutOfRange(int(hi if hi > MAX_LABEL else lo))
    labels = LabelVolume(data=rounded.astype(np.uint8), spacing=grid.spacing,
                         affine=grid.affine)
    return header, labels


# ---------------------------------------------------------------------------
# writing

def _encode_data(data: np.ndarray, code: int, quantize: bool) -> np.ndarray:
    dtype = DTYPE_BY_CODE[code]
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        if quantize:
            return np.clip(np.rint(data), info.min, info.max).astype(dtype)
        if not np.all(data == np.rint(data)):
            raise LossyConversion(
                f"non-integer values written to datatype {code}; pass quantize=True to round")
        if data.size and (float(data.min()) < info.min or float(data.max()) > info.max):
            raise LossyConversion(
                f"values outside [{info.min}, {info.max}] do not fit datatype {code}")
        return data.astype(dtype)
    return data.astype(dtype)


def write_nifti(grid: VoxelGrid, datatype: int = 16, gz: bool = False,
                quantize: bool = False) -> bytes:
    """Encode a VoxelGrid as a single-file NIfTI-1 stream.

    The header carries the affine as sform (sform_code=1, qform_code=0),
    spacing in pixdim, scl_slope=1/scl_inter=0, and vox_offset=352.
    Output is little-endian; gzip output uses mtime=0 so identical
    grids serialize to identical bytes.

    Raises LossyConversion when real data targets an integer datatype
    unless ``quantize=True`` explicitly requests rounding.
    """
    if datatype not in DTYPE_BY_CODE:
        raise UnsupportedDatatype(datatype)
    encoded = _encode_data(np.asarray(grid.data), datatype, quantize)
    nx, ny, nz = grid.dims

    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<b", buf, 38, ord("r"))
    struct.pack_into("<8h", buf, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", buf, 70, datatype)
    struct.pack_into("<h", buf, 72, DTYPE_BY_CODE[datatype].itemsize * 8)
    struct.pack_into("<8f", buf, 76, 1.0, grid.spacing[0], grid.spacing[1],
                     grid.spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", buf, 108, float(SINGLE_FILE_OFFSET))
    struct.pack_into("<2f", buf, 112, 1.0, 0.0)
    struct.pack_into("<b", buf, 123, 2)  # xyzt_units: millimetres
    struct.pack_into("<2h", buf, 252, 0, 1)
    affine = np.asarray(grid.affine, dtype=np.float64)
    struct.pack_into("<4f", buf, 280, *affine[0, :])
    struct.pack_into("<4f", buf, 296, *affine[1, :])
    struct.pack_into("<4f", buf, 312, *affine[2, :])
    buf[344:348] = MAGIC_SINGLE

    stream = bytes(buf) + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE)
    stream += np.asfortranarray(encoded).tobytes(order="F")
    if gz:
        return gzip.compress(stream, compresslevel=6, mtime=0)
    return stream


def write_label_volume(labels: LabelVolume, gz: bool = False) -> bytes:
    """Encode a LabelVolume as uint8 NIfTI-1."""
    grid = VoxelGrid(data=labels.data.astype(np.float64), spacing=labels.spacing,
                     affine=labels.affine)
    return write_nifti(grid, datatype=2, gz=gz)


# ---------------------------------------------------------------------------
# path helpers

def _wants_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def load_volume(path: str | Path) -> tuple[NiftiHeader, VoxelGrid]:
    return read_nifti(Path(path).read_bytes())


def load_label_volume(path: str | Path) -> tuple[NiftiHeader, LabelVolume]:
    return read_label_volume(Path(path).read_bytes())


def save_volume(path: str | Path, grid: VoxelGrid, datatype: int = 16,
                quantize: bool = False) -> None:
    path = Path(path)
    path.write_bytes(write_nifti(grid, datatype=datatype, gz=_wants_gz(path),
                                 quantize=quantize))


def save_label_volume(path: str | Path, labels: LabelVolume) -> None:
    path = Path(path)
    path.write_bytes(write_label_volume(labels, gz=_wants_gz(path)))
