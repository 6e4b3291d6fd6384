"""Volume containers and lossless slicing across the three anatomical views.

Axis convention, used everywhere in this package: spatial axes are ordered
(z, y, x) with x fastest in memory.  The axial view fixes z, the coronal
view fixes y, the sagittal view fixes x.  Multi-modal intensity data is
stored channel-first as (modalities, z, y, x); per-voxel class
distributions are stored channel-last as (z, y, x, classes), which is the
natural layout for per-voxel argmax and softmax work.

Slicing a volume into a stack of 2D images and reassembling the stack is a
pure axis permutation, so the round trip is exact to the bit for every
dtype.  All container types are frozen dataclasses holding read-only array
views; treat them as immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InconsistentStack, ShrinkNotAllowed, ZeroVariance


class ViewAxis(Enum):
    """Anatomical slicing direction, keyed by the spatial axis it fixes."""

    AXIAL = 0
    CORONAL = 1
    SAGITTAL = 2

    @property
    def axis(self) -> int:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "ViewAxis":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown view {name!r}, expected one of axial, coronal, sagittal"
            ) from None


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class IntensityVolume:
    """Multi-modal scalar volume, channel-first (modalities, z, y, x)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"intensity volume must be 4D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise ValueError("intensity volume contains non-finite values")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def modalities(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel class labels as uint8, shape (z, y, x)."""

    data: np.ndarray
    n_classes: int = 5

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label volume must be integer, got {arr.dtype}")
        if self.n_classes < 1 or self.n_classes > 256:
            raise ValueError(f"n_classes out of range: {self.n_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
            raise ValueError(
                f"labels must lie in [0, {self.n_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "data", _readonly(arr.astype(np.uint8, copy=False)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel class distribution, channel-last (z, y, x, classes).

    Every voxel's entries are probabilities in [0, 1] summing to 1 within
    1e-6.  dtype may be float32 or float64 and is preserved by the fusion
    operations, so callers needing tight numeric tolerances should build
    float64 volumes.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"probability volume must be 4D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.shape[-1] < 2:
            raise ValueError("probability volume needs at least 2 classes")
        if not np.isfinite(arr).all():
            raise ValueError("probability volume contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1e-9 or hi > 1 + 1e-9:
            raise ValueError(f"probabilities outside [0, 1]: range [{lo}, {hi}]")
        sums = arr.sum(axis=-1, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
        if worst > 1e-6:
            raise ValueError(f"per-voxel sums deviate from 1 by up to {worst:.3e}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def n_classes(self) -> int:
        return self.data.shape[-1]


# Slice stacks always carry channels last: (n_slices, height, width, channels).
# For a (z, y, x) volume the in-plane dims are axial (y, x), coronal (z, x),
# sagittal (z, y).

_KINDS = ("intensity", "prob")


def _stack_shape(view: ViewAxis, volume_dims, channels):
    z, y, x = volume_dims
    if view is ViewAxis.AXIAL:
        return (z, y, x, channels)
    if view is ViewAxis.CORONAL:
        return (y, z, x, channels)
    return (x, z, y, channels)


@dataclass(frozen=True)
class SliceStack:
    """Stack of 2D slices cut from one volume along one view axis."""

    view: ViewAxis
    data: np.ndarray
    volume_dims: tuple[int, int, int]
    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise InconsistentStack(f"slice stack must be 4D, got shape {arr.shape}")
        dims = tuple(int(d) for d in self.volume_dims)
        object.__setattr__(self, "volume_dims", dims)
        expected = _stack_shape(self.view, dims, arr.shape[-1])
        if arr.shape != expected:
            raise InconsistentStack(
                f"{self.view.name.lower()} stack for volume {dims} must have "
                f"shape {expected}, got {arr.shape}"
            )
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def slice_dims(self) -> tuple[int, int]:
        return tuple(self.data.shape[1:3])

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def slice_array(arr: np.ndarray, view: ViewAxis) -> np.ndarray:
    """Permute a channel-last (z, y, x, c) array into slice order.

    Returns a zero-copy view shaped (n_slices, h, w, c) where slice i is
    the sub-array at fixed index i along the view's axis.
    """
    if arr.ndim != 4:
        raise ValueError(f"expected channel-last 4D array, got shape {arr.shape}")
    return np.moveaxis(arr, view.axis, 0)


def unslice_array(stack: np.ndarray, view: ViewAxis) -> np.ndarray:
    """Inverse of slice_array; returns a channel-last (z, y, x, c) view."""
    if stack.ndim != 4:
        raise ValueError(f"expected 4D slice stack, got shape {stack.shape}")
    return np.moveaxis(stack, 0, view.axis)


def extract_slices(vol, view: ViewAxis) -> SliceStack:
    """Cut an IntensityVolume or ProbVolume into a stack of 2D slices.

    No data is copied and no interpolation happens; the stack holds a
    reordered view of the original array with channels carried through.
    """
    if isinstance(vol, IntensityVolume):
        data = slice_array(np.moveaxis(vol.data, 0, -1), view)
        kind = "intensity"
    elif isinstance(vol, ProbVolume):
        data = slice_array(vol.data, view)
        kind = "prob"
    else:
        raise TypeError(f"cannot slice {type(vol).__name__}")
    return SliceStack(view=view, data=data, volume_dims=vol.dims, kind=kind)


def assemble_volume(stack: SliceStack):
    """Reassemble a SliceStack into the volume type it was cut from.

    Exact inverse of extract_slices: values, dtype, and shape all round
    trip bit for bit.
    """
    arr = unslice_array(stack.data, stack.view)
    if arr.shape[:3] != stack.volume_dims:
        raise InconsistentStack(
            f"stack reassembles to {arr.shape[:3]}, declared {stack.volume_dims}"
        )
    if stack.kind == "intensity":
        return IntensityVolume(np.moveaxis(arr, -1, 0))
    return ProbVolume(arr)


def zscore_normalize(vol: IntensityVolume, nonzero_only: bool = True) -> IntensityVolume:
    """Standardize each modality to zero mean and unit standard deviation.

    With nonzero_only (the default, matching skull-stripped recordings
    where the background is exactly zero) statistics are computed over the
    nonzero voxels of each modality and zero voxels are left untouched.
    The standard deviation is the population one (ddof=0).  Raises
    ZeroVariance when a modality's support has fewer than two voxels or is
    constant.
    """
    src = vol.data
    out = np.array(src, dtype=src.dtype, copy=True)
    for m in range(vol.modalities):
        vals = src[m]
        mask = vals != 0 if nonzero_only else np.ones(vals.shape, dtype=bool)
        support = vals[mask].astype(np.float64)
        if support.size < 2:
            raise ZeroVariance(
                f"modality {m}: need at least 2 voxels in the support, "
                f"got {support.size}"
            )
        mean = support.mean()
        std = support.std()
        if std == 0.0:
            raise ZeroVariance(f"modality {m}: support is constant ({mean})")
        out[m][mask] = ((support - mean) / std).astype(src.dtype)
    return IntensityVolume(out)


def pad_to(vol, target_dims) -> "IntensityVolume | LabelVolume":
    """Zero-pad a volume at the high end of each spatial axis.

    Accepts IntensityVolume or LabelVolume; labels pad with class 0.
    Raises ShrinkNotAllowed if any target extent is smaller than the
    current one.  A target equal to the current dims returns an identical
    volume.
    """
    target = tuple(int(d) for d in target_dims)
    if len(target) != 3:
        raise ValueError(f"target_dims must be (z, y, x), got {target}")
    dims = vol.dims
    if any(t < d for t, d in zip(target, dims)):
        raise ShrinkNotAllowed(f"cannot pad {dims} down to {target}")
    spatial = [(0, t - d) for t, d in zip(target, dims)]
    if isinstance(vol, IntensityVolume):
        padded = np.pad(vol.data, [(0, 0)] + spatial, constant_values=0)
        return IntensityVolume(padded)
    if isinstance(vol, LabelVolume):
        padded = np.pad(vol.data, spatial, constant_values=0)
        return LabelVolume(padded, n_classes=vol.n_classes)
    raise TypeError(f"cannot pad {type(vol).__name__}")


def one_hot(labels, n_classes: int | None = None, dtype=np.float64) -> np.ndarray:
    """Expand integer labels to a channel-last one-hot field."""
    if isinstance(labels, LabelVolume):
        if n_classes is None:
            n_classes = labels.n_classes
        labels = labels.data
    arr = np.asarray(labels)
    if n_classes is None:
        raise ValueError("n_classes is required for plain label arrays")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    return np.eye(n_classes, dtype=dtype)[arr]


def stack_modalities(volumes) -> IntensityVolume:
    """Concatenate single- or multi-modal volumes along the channel axis."""
    if not volumes:
        raise ValueError("need at least one volume")
    dims = volumes[0].dims
    if any(v.dims != dims for v in volumes):
        raise ValueError("modalities must share spatial dims")
    return IntensityVolume(np.concatenate([v.data for v in volumes], axis=0))
