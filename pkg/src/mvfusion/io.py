"""File formats: the rawvol container, a minimal NIfTI-1 reader, and run configs.

rawvol is this package's own tiny volume container: a 24-byte header
(magic "MVF1", an element-type code, channel count, and Z/Y/X extents)
followed by the little-endian payload, channel-first with x fastest.
Labels store as uint8, intensities and probabilities as float32, and the
write/read round trip is exact to the bit.

The NIfTI reader is deliberately small and read-only: single-file
uncompressed .nii, 348-byte header, 3D only, uint8 / int16 / float32,
either byte order, with scl_slope / scl_inter applied when set.

Run configurations are plain "key = value" text files so experiment
settings can live in version control and diffs stay readable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    LengthMismatch,
    TruncatedFile,
    UnsupportedDtype,
    UnsupportedShape,
)
from .fusion import FusionMethod, FusionWeights, Voting, WeightedAveraging
from .loss import LossConfig
from .model import TrainConfig
from .volume import IntensityVolume, LabelVolume, ProbVolume, ViewAxis

# ---------------------------------------------------------------------------
# rawvol

RAWVOL_MAGIC = b"MVF1"
_RAWVOL_HEADER = struct.Struct("<4sB3xIIII")

_CODE_LABEL = 0
_CODE_INTENSITY = 1
_CODE_PROB = 2


def write_rawvol(path, volume) -> None:
    """Serialize an IntensityVolume, LabelVolume, or ProbVolume.

    Real-valued volumes are stored as float32; writing a float64 volume
    narrows it.  Labels are stored as a single uint8 channel.
    """
    if isinstance(volume, LabelVolume):
        code, channels = _CODE_LABEL, 1
        z, y, x = volume.dims
        payload = volume.data.astype(np.uint8, copy=False)
    elif isinstance(volume, IntensityVolume):
        code, channels = _CODE_INTENSITY, volume.modalities
        z, y, x = volume.dims
        payload = volume.data.astype("<f4", copy=False)
    elif isinstance(volume, ProbVolume):
        code, channels = _CODE_PROB, volume.n_classes
        z, y, x = volume.dims
        payload = np.moveaxis(volume.data, -1, 0).astype("<f4", copy=False)
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__}")
    with open(path, "wb") as fh:
        fh.write(_RAWVOL_HEADER.pack(RAWVOL_MAGIC, code, channels, z, y, x))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_rawvol(path):
    """Read a rawvol file back into the volume type it was written from."""
    with open(path, "rb") as fh:
        header = fh.read(_RAWVOL_HEADER.size)
        if len(header) < _RAWVOL_HEADER.size:
            raise TruncatedFile(f"{path}: header cut short")
        magic, code, channels, z, y, x = _RAWVOL_HEADER.unpack(header)
        if magic != RAWVOL_MAGIC:
            raise BadMagic(f"{path}: bad magic {magic!r}")
        if code == _CODE_LABEL:
            dtype, itemsize = np.uint8, 1
        elif code in (_CODE_INTENSITY, _CODE_PROB):
            dtype, itemsize = np.dtype("<f4"), 4
        else:
            raise UnsupportedDtype(f"{path}: unknown element code {code}")
        if min(channels, z, y, x) < 1:
            raise LengthMismatch(f"{path}: non-positive extent in header")
        expected = channels * z * y * x * itemsize
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedFile(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise LengthMismatch(f"{path}: trailing bytes after the declared payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(channels, z, y, x)
    if code == _CODE_LABEL:
        if channels != 1:
            raise LengthMismatch(f"{path}: label volumes must have one channel")
        return LabelVolume(arr[0], n_classes=max(int(arr.max()) + 1, 5))
    if code == _CODE_INTENSITY:
        return IntensityVolume(arr)
    return ProbVolume(np.moveaxis(arr, 0, -1))


# ---------------------------------------------------------------------------
# NIfTI-1 (read-only)

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti(path, as_labels: bool | None = None):
    """Read an uncompressed single-file 3D NIfTI-1 volume.

    uint8 data (or as_labels=True) is returned as a LabelVolume; int16 and
    float32 become a single-modality IntensityVolume with scl_slope and
    scl_inter applied when the header sets them.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _NIFTI_HEADER_SIZE:
        raise TruncatedFile(f"{path}: file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == _NIFTI_HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _NIFTI_HEADER_SIZE:
        bo = ">"
    else:
        raise BadMagic(f"{path}: header does not declare 348 bytes in either byte order")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"{path}: magic {magic!r} is not a NIfTI-1 signature")
    if magic == b"ni1\x00":
        raise UnsupportedShape(f"{path}: detached .hdr/.img pairs are not supported")

    dim = struct.unpack_from(f"{bo}8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedShape(f"{path}: expected 3D data, header says {dim[0]}D")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise UnsupportedShape(f"{path}: non-positive extents {(nx, ny, nz)}")
    datatype, bitpix = struct.unpack_from(f"{bo}2h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtype(f"{path}: datatype code {datatype} not supported")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(bo)
    if bitpix != dtype.itemsize * 8:
        raise UnsupportedDtype(f"{path}: bitpix {bitpix} disagrees with datatype {datatype}")
    vox_offset = struct.unpack_from(f"{bo}f", raw, 108)[0]
    offset = int(vox_offset) if vox_offset >= _NIFTI_HEADER_SIZE else _NIFTI_HEADER_SIZE
    scl_slope, scl_inter = struct.unpack_from(f"{bo}2f", raw, 112)

    count = nx * ny * nz
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise TruncatedFile(f"{path}: payload needs {end} bytes, file has {len(raw)}")
    # NIfTI stores x fastest, so the C-order shape is (z, y, x).
    arr = np.frombuffer(raw[offset:end], dtype=dtype).reshape(nz, ny, nx)

    scaled = arr.astype(np.float32)
    if scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0):
        scaled = scaled * scl_slope + scl_inter

    labelish = datatype == 2 if as_labels is None else as_labels
    if labelish:
        ints = np.rint(scaled).astype(np.int64)
        if not np.array_equal(ints, scaled):
            raise UnsupportedDtype(f"{path}: non-integer values cannot be labels")
        return LabelVolume(ints, n_classes=max(int(ints.max()) + 1, 5))
    return IntensityVolume(scaled[None])


# ---------------------------------------------------------------------------
# Run configuration files

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class RunConfig:
    """One experiment's settings, serializable as key = value text."""

    seed: int = 0
    fusion_method: str = "wa"
    fusion_weights: tuple[float, ...] = (0.4, 0.3, 0.3)
    reference_view: str = "axial"
    alpha: float = 0.5
    beta: float = 1.0
    engage_epoch: int = 3
    lr0: float = 1e-4
    halve_every: int = 2
    epochs: int = 35
    dropout: float = 0.2
    batch_axial: int = 10
    batch_coronal: int = 16
    batch_sagittal: int = 16
    axial_final_batch: int | None = 20
    patch: int = 3
    nonzero_only: bool = True

    def __post_init__(self):
        if self.fusion_method not in ("voting", "wa"):
            raise ValueError(f"fusion_method must be voting or wa, got {self.fusion_method!r}")
        ViewAxis.parse(self.reference_view)
        # Building the typed configs runs their validation.
        self.train_config()

    def method(self) -> FusionMethod:
        if self.fusion_method == "voting":
            return Voting(ref_view=ViewAxis.parse(self.reference_view).value)
        return WeightedAveraging(FusionWeights(self.fusion_weights))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            halve_every=self.halve_every,
            epochs=self.epochs,
            dropout=self.dropout,
            loss=LossConfig(alpha=self.alpha, beta=self.beta, engage_epoch=self.engage_epoch),
            batch_axial=self.batch_axial,
            batch_coronal=self.batch_coronal,
            batch_sagittal=self.batch_sagittal,
            axial_final_batch=self.axial_final_batch,
            fusion_method=self.method(),
            patch=self.patch,
            seed=self.seed,
        )

    def save(self, path) -> None:
        lines = ["# mvfusion run configuration"]
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        fields = cls.__dataclass_fields__
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, text = stripped.partition("=")
            key = key.strip().lower()
            text = text.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(key, text, fields[key].type)
        return cls(**values)


def _convert(key: str, text: str, annotation: str):
    if key == "fusion_weights":
        return tuple(float(part) for part in text.split(",") if part.strip())
    if key == "axial_final_batch":
        return None if text.lower() == "none" else int(text)
    if annotation == "bool":
        return _parse_bool(text)
    if annotation == "int":
        return int(text)
    if annotation == "float":
        return float(text)
    return text
