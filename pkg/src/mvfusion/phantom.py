"""Synthetic brain-like phantoms with controllable per-view errors.

A phantom is a set of nested ellipsoids on a zero background: a brain
shell of plain tissue (class 0 with nonzero intensity), an edema rim
(class 2), a tumor core split between necrosis (class 1) and
non-enhancing tumor (class 3), and an enhancing center (class 4).  That
layout realizes all three evaluation regions with the proper nesting
enhancing within core within complete.

Each of the three views gets a probability volume equal to the one-hot
ground truth except on its own error set, where the vote goes to a wrong
class.  Error voxels are drawn from the enhancing center and flipped to
background, the one corruption every region grouping registers, so any
view with a nonempty error set scores below 1.0 on all three regions.
When the error sets are pairwise disjoint at most one view is wrong at
any voxel, and majority voting reconstructs the ground truth exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleSpec
from .volume import IntensityVolume, LabelVolume, ProbVolume, one_hot

# Mean intensity per modality (rows) and class (columns); spreads the
# classes apart so a small linear model can separate them.
_MODALITY_MEANS = np.array(
    [
        [0.55, 0.90, 0.35, 0.70, 0.20],
        [0.45, 0.25, 0.85, 0.60, 0.95],
        [0.60, 0.70, 0.50, 0.15, 0.80],
        [0.40, 0.55, 0.20, 0.90, 0.65],
    ]
)


def _radii(value) -> tuple[float, float, float]:
    if np.isscalar(value):
        return (float(value),) * 3
    r = tuple(float(v) for v in value)
    if len(r) != 3:
        raise ValueError(f"radii must be a scalar or a (z, y, x) triple, got {value!r}")
    return r


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, noise, and per-view error description for one phantom."""

    dims: tuple[int, int, int] = (32, 32, 32)
    brain_radii: tuple[float, float, float] | float = 14.0
    complete_radii: tuple[float, float, float] | float = 10.0
    core_radii: tuple[float, float, float] | float = 7.0
    enhancing_radii: tuple[float, float, float] | float = 4.0
    error_sizes: tuple[int, int, int] = (0, 0, 0)
    disjoint_errors: bool = True
    noise_sigma: float = 0.05
    modalities: int = 4
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 4:
            raise InfeasibleSpec(f"dims must be three extents of at least 4, got {dims}")
        object.__setattr__(self, "dims", dims)
        for name in ("brain_radii", "complete_radii", "core_radii", "enhancing_radii"):
            object.__setattr__(self, name, _radii(getattr(self, name)))
        shells = (self.enhancing_radii, self.core_radii, self.complete_radii, self.brain_radii)
        for inner, outer in zip(shells, shells[1:]):
            if not all(a < b for a, b in zip(inner, outer)):
                raise InfeasibleSpec(
                    "shells must nest strictly: enhancing < core < complete < brain"
                )
        errors = tuple(int(n) for n in self.error_sizes)
        if len(errors) != 3 or min(errors) < 0:
            raise InfeasibleSpec(f"error_sizes must be three counts >= 0, got {errors}")
        object.__setattr__(self, "error_sizes", errors)
        if self.noise_sigma < 0:
            raise InfeasibleSpec("noise_sigma must be nonnegative")
        if not 1 <= self.modalities <= _MODALITY_MEANS.shape[0]:
            raise InfeasibleSpec(f"modalities must be 1..{_MODALITY_MEANS.shape[0]}")


def _ellipsoid(dims, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def generate_phantom(spec: PhantomSpec):
    """Build one phantom: (intensity, labels, per-view probability triple).

    Deterministic in spec.seed.  Raises InfeasibleSpec when a shell is
    empty at the requested size or the error sets cannot be drawn from the
    enhancing center (with disjoint_errors the three sets must fit side by
    side).
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    center = tuple((d - 1) / 2.0 for d in dims)

    brain = _ellipsoid(dims, center, spec.brain_radii)
    complete = _ellipsoid(dims, center, spec.complete_radii)
    core = _ellipsoid(dims, center, spec.core_radii)
    enhancing = _ellipsoid(dims, center, spec.enhancing_radii)

    zz = np.arange(dims[0])[:, None, None]
    labels = np.zeros(dims, dtype=np.uint8)
    labels[complete] = 2
    necrosis_side = np.broadcast_to(zz < center[0], dims)
    labels[core & necrosis_side] = 1
    labels[core & ~necrosis_side] = 3
    labels[enhancing] = 4

    for cls in (1, 2, 3, 4):
        if not (labels == cls).any():
            raise InfeasibleSpec(f"class {cls} is empty at dims {dims}")

    means = _MODALITY_MEANS[: spec.modalities, labels]
    noise = rng.normal(0.0, spec.noise_sigma, size=means.shape)
    intensity = np.where(brain[None], means + noise, 0.0).astype(np.float32)

    candidates = np.flatnonzero(labels == 4)
    needed = sum(spec.error_sizes) if spec.disjoint_errors else max(spec.error_sizes, default=0)
    if needed > candidates.size:
        raise InfeasibleSpec(
            f"error sets need {needed} enhancing voxels, phantom has {candidates.size}"
        )

    truth = one_hot(labels, 5, dtype=np.float32)
    if spec.disjoint_errors:
        drawn = rng.choice(candidates, size=sum(spec.error_sizes), replace=False)
        splits = np.split(drawn, np.cumsum(spec.error_sizes)[:-1])
    else:
        splits = [
            rng.choice(candidates, size=n, replace=False) for n in spec.error_sizes
        ]

    views = []
    background = one_hot(np.zeros(1, dtype=np.uint8), 5, dtype=np.float32)[0]
    for flat_idx in splits:
        prob = truth.copy()
        prob.reshape(-1, 5)[flat_idx] = background
        views.append(ProbVolume(prob))

    return (
        IntensityVolume(intensity),
        LabelVolume(labels, n_classes=5),
        tuple(views),
    )


NATURAL_RADII = (14.0, 10.0, 7.0, 4.0)

# Near-equal class volumes at 32^3. Inverse-frequency class weights then
# stay within a ~1.7x band, which keeps the weighted transition term stable
# for the linear toy segmenter; with a tiny enhancing core the rare-class
# weights dominate that term's gradient and drag every voxel toward the
# rare classes once the fusion terms engage.
BALANCED_RADII = (20.0, 18.8, 16.5, 11.8)


def phantom_dataset(count, dims=(32, 32, 32), seed=0, noise_sigma=0.05,
                    modalities=4, base_radii=NATURAL_RADII):
    """A list of (intensity, labels) phantom pairs with jittered geometry.

    ``base_radii`` is the (brain, complete, core, enhancing) tuple before
    per-case jitter; jitter is capped below half the smallest gap so the
    nesting never breaks. Radii scale with the volume so the same anatomy
    fits any cubic grid.
    """
    if count < 1:
        raise ValueError("count must be positive")
    b0, b1, b2, b3 = base_radii
    if not b0 > b1 > b2 > b3 > 0:
        raise InfeasibleSpec(f"base radii must strictly nest: {base_radii}")
    jitter = min(1.0, 0.45 * min(b0 - b1, b1 - b2, b2 - b3))
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        scale = min(dims) / 32.0
        spec = PhantomSpec(
            dims=dims,
            brain_radii=tuple((b0 + rng.uniform(-jitter, jitter)) * scale for _ in range(3)),
            complete_radii=tuple((b1 + rng.uniform(-jitter, jitter)) * scale for _ in range(3)),
            core_radii=tuple((b2 + rng.uniform(-jitter, jitter)) * scale for _ in range(3)),
            enhancing_radii=tuple((b3 + rng.uniform(-jitter, jitter)) * scale for _ in range(3)),
            noise_sigma=noise_sigma,
            modalities=modalities,
            seed=int(rng.integers(0, 2**31)),
        )
        vol, lab, _ = generate_phantom(spec)
        pairs.append((vol, lab))
    return pairs
