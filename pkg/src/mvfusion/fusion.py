"""Per-voxel decision fusion of class-probability volumes from several views.

Two methods are provided.  Majority voting turns each view's distribution
into a one-hot vote, tallies the votes per voxel, and keeps the majority
class; voxels where no class collects more than one vote fall back to the
argmax of a designated reference view.  Weighted averaging blends the raw
distributions with per-view weights and takes the argmax of the blend.

Argmax ties resolve to the lowest class index everywhere, matching
numpy's argmax.  All operations are deterministic and allocate their
outputs fresh; inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import AllZeroWeights, DimMismatch, TooFewViews
from .volume import LabelVolume, ProbVolume

# Renormalization of a weighted blend is skipped when the weights already
# sum to 1 within this tolerance, keeping the common case exact.
_UNIT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class FusionWeights:
    """Per-view blend weights; nonnegative, at least one positive."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w:
            raise ValueError("weights may not be empty")
        if not all(np.isfinite(w)):
            raise ValueError(f"weights must be finite, got {w}")
        if any(x < 0 for x in w):
            raise ValueError(f"weights must be nonnegative, got {w}")
        if all(x == 0 for x in w):
            raise AllZeroWeights("at least one weight must be positive")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def total(self) -> float:
        return float(sum(self.weights))

    @property
    def scale(self) -> float:
        """Divisor applied when blends are renormalized to distributions."""
        s = self.total
        return 1.0 if abs(s - 1.0) <= _UNIT_SUM_TOL else s


@dataclass(frozen=True)
class Voting:
    """Majority voting with a reference view for non-majority voxels."""

    ref_view: int = 0

    def __post_init__(self):
        if self.ref_view < 0:
            raise ValueError(f"ref_view must be nonnegative, got {self.ref_view}")


@dataclass(frozen=True)
class WeightedAveraging:
    """Weighted blending of raw distributions followed by argmax."""

    weights: FusionWeights

    def __post_init__(self):
        if not isinstance(self.weights, FusionWeights):
            object.__setattr__(self, "weights", FusionWeights(tuple(self.weights)))


FusionMethod = Union[Voting, WeightedAveraging]


@dataclass(frozen=True)
class VoteCountVolume:
    """Per-voxel, per-class vote tallies from k views."""

    counts: np.ndarray
    k_views: int

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 4:
            raise ValueError(f"vote counts must be 4D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"vote counts must be integer, got {arr.dtype}")
        if self.k_views < 2:
            raise TooFewViews(f"vote tallies need at least 2 views, got {self.k_views}")
        if arr.size:
            if arr.min() < 0 or arr.max() > self.k_views:
                raise ValueError("tallies out of range for the declared view count")
            if not (arr.sum(axis=-1, dtype=np.int64) == self.k_views).all():
                raise ValueError("per-voxel tallies must sum to the view count")
        v = arr.view()
        v.setflags(write=False)
        object.__setattr__(self, "counts", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.counts.shape[:3])

    @property
    def n_classes(self) -> int:
        return self.counts.shape[-1]


def _check_views(views: Sequence[ProbVolume], minimum: int) -> None:
    if len(views) < minimum:
        raise TooFewViews(f"need at least {minimum} views, got {len(views)}")
    dims, k = views[0].dims, views[0].n_classes
    for i, v in enumerate(views[1:], start=1):
        if v.dims != dims or v.n_classes != k:
            raise DimMismatch(
                f"view {i} has grid {v.dims} x {v.n_classes} classes, "
                f"view 0 has {dims} x {k}"
            )


def one_hot_argmax(dist) -> np.ndarray:
    """One-hot of the argmax over the last axis; ties pick the lowest index.

    Accepts a single distribution vector or any channel-last array and
    returns a uint8 array of the same shape.
    """
    arr = np.asarray(dist)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise ValueError("need at least one class along the last axis")
    return np.eye(arr.shape[-1], dtype=np.uint8)[arr.argmax(axis=-1)]


def vote_counts(views: Sequence[ProbVolume]) -> VoteCountVolume:
    """Tally each view's one-hot argmax decision per voxel and class."""
    _check_views(views, minimum=2)
    dims, k = views[0].dims, views[0].n_classes
    counts = np.zeros(dims + (k,), dtype=np.int32)
    flat = counts.reshape(-1, k)
    rows = np.arange(flat.shape[0])
    for v in views:
        flat[rows, v.data.argmax(axis=-1).ravel()] += 1
    return VoteCountVolume(counts=counts, k_views=len(views))


def vote_decide(counts: VoteCountVolume, ref: ProbVolume) -> LabelVolume:
    """Resolve tallies to labels: majority class, else the reference view.

    A voxel has a majority when its best class collected more than one
    vote; otherwise the label is the argmax of the reference view's
    distribution at that voxel.
    """
    if counts.k_views < 3:
        raise TooFewViews(
            f"majority voting needs at least 3 views, got {counts.k_views}"
        )
    if counts.dims != ref.dims or counts.n_classes != ref.n_classes:
        raise DimMismatch(
            f"tallies {counts.dims} x {counts.n_classes} do not match "
            f"reference {ref.dims} x {ref.n_classes}"
        )
    tally = counts.counts
    majority = tally.max(axis=-1) > 1
    labels = np.where(
        majority, tally.argmax(axis=-1), ref.data.argmax(axis=-1)
    ).astype(np.uint8)
    return LabelVolume(labels, n_classes=counts.n_classes)


def vote_fuse(views: Sequence[ProbVolume], ref_index: int = 0) -> LabelVolume:
    """Majority-vote fusion of k >= 3 views with a reference fallback."""
    _check_views(views, minimum=3)
    if not 0 <= ref_index < len(views):
        raise ValueError(f"ref_index {ref_index} out of range for {len(views)} views")
    return vote_decide(vote_counts(views), views[ref_index])


def blend_distributions(arrays: Sequence[np.ndarray], weights: FusionWeights) -> np.ndarray:
    """Weighted per-element sum of arrays, renormalized via weights.scale.

    Shared by weighted_average and the loss gradients so both see exactly
    the same blend.
    """
    if len(arrays) != len(weights):
        raise DimMismatch(f"{len(arrays)} arrays but {len(weights)} weights")
    w = weights.weights
    out = w[0] * np.asarray(arrays[0])
    for wi, a in zip(w[1:], arrays[1:]):
        out += wi * np.asarray(a)
    if weights.scale != 1.0:
        out /= weights.scale
    return out


def weighted_average(views: Sequence[ProbVolume], w: FusionWeights) -> ProbVolume:
    """Blend k >= 2 views voxelwise with per-view weights.

    When the weights sum to 1 the output is the plain weighted sum; when
    they do not, the blend is divided by the weight total so the result is
    again a distribution.  Scaling all weights by a common positive factor
    therefore never changes the output argmax.
    """
    _check_views(views, minimum=2)
    if len(w) != len(views):
        raise DimMismatch(f"{len(views)} views but {len(w)} weights")
    return ProbVolume(blend_distributions([v.data for v in views], w))


def wa_fuse(views: Sequence[ProbVolume], w: FusionWeights) -> LabelVolume:
    """Weighted-averaging fusion: argmax of the blended distributions."""
    blended = weighted_average(views, w)
    labels = blended.data.argmax(axis=-1).astype(np.uint8)
    return LabelVolume(labels, n_classes=blended.n_classes)


def fused_distribution(method: FusionMethod, views: Sequence[ProbVolume]) -> ProbVolume:
    """The fused per-voxel distribution a method exposes to the losses.

    Weighted averaging returns its (renormalized) blend.  Voting returns
    tallies divided by the view count; that field is a piecewise-constant
    function of the inputs, so gradients never flow through it.
    """
    if isinstance(method, WeightedAveraging):
        return weighted_average(views, method.weights)
    if isinstance(method, Voting):
        _check_views(views, minimum=3)
        counts = vote_counts(views)
        return ProbVolume(counts.counts / float(counts.k_views))
    raise TypeError(f"unknown fusion method {type(method).__name__}")


def fuse_labels(method: FusionMethod, views: Sequence[ProbVolume]) -> LabelVolume:
    """Fused hard labels under either method."""
    if isinstance(method, WeightedAveraging):
        return wa_fuse(views, method.weights)
    if isinstance(method, Voting):
        return vote_fuse(views, ref_index=method.ref_view)
    raise TypeError(f"unknown fusion method {type(method).__name__}")
