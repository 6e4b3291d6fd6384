"""Shape bookkeeping for the reference encoder, plus a trainable toy model.

Two concerns live here.  First, a declarative description of the
full-scale 2D encoder's downsampling trunk, used to verify stage spatial
sizes and channel widths for a given input plane without instantiating
any tensors.  Second, a deliberately small per-voxel segmenter (a linear
map from a p x p multi-modal patch to class logits) that is cheap enough
to train on a laptop yet exercises the entire multi-view objective:
slicing, per-view prediction, fusion, the fused losses, and synchronized
per-view batch schedules.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    DimMismatch,
    IndivisibleInput,
    NonFiniteLoss,
    TooFewViews,
    TruncatedFile,
    UnalignableBatches,
    UnsupportedDtype,
)
from .fusion import (
    FusionMethod,
    FusionWeights,
    Voting,
    WeightedAveraging,
    blend_distributions,
    fuse_labels,
)
from .loss import (
    ClassWeights,
    LossConfig,
    class_weights,
    grad_decision_through_blend,
    grad_wce_softmax,
    softmax,
    _weighted_ce,
)
from .metrics import evaluate
from .volume import (
    IntensityVolume,
    LabelVolume,
    ProbVolume,
    SliceStack,
    ViewAxis,
    one_hot,
    slice_array,
    unslice_array,
)

# ---------------------------------------------------------------------------
# Encoder shape engine


@dataclass(frozen=True)
class LayerSpec:
    name: str
    stride: int
    out_channels: int
    stage_output: bool


def _trunk_layers() -> tuple[LayerSpec, ...]:
    return (
        LayerSpec("initialize", 2, 32, False),
        LayerSpec("resblock1", 1, 64, True),
        LayerSpec("conv1", 2, 64, False),
        LayerSpec("resblock2", 1, 128, True),
        LayerSpec("conv2", 2, 128, False),
        LayerSpec("resblock3", 1, 256, True),
        LayerSpec("conv3", 2, 256, False),
        LayerSpec("resblock4", 1, 256, True),
    )


@dataclass(frozen=True)
class ArchSpec:
    """Downsampling trunk of the reference encoder.

    Four stages at 1/2, 1/4, 1/8, and 1/16 of the input plane, with the
    channel progression 32 -> 64 -> 128 -> 256 -> 256.  Construction
    rejects any layer list that deviates from that contract.
    """

    layers: tuple[LayerSpec, ...] = field(default_factory=_trunk_layers)
    n_classes: int = 5

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("architecture needs at least one layer")
        factor = 1
        for layer in layers:
            if layer.stride not in (1, 2):
                raise ValueError(f"{layer.name}: stride must be 1 or 2")
            if layer.out_channels < 1:
                raise ValueError(f"{layer.name}: channels must be positive")
            factor *= layer.stride
        if factor != 16:
            raise ValueError(f"trunk must downsample by 16, got {factor}")
        channels = (layers[0].out_channels,) + tuple(
            l.out_channels for l in layers if l.stage_output
        )
        if channels != (32, 64, 128, 256, 256):
            raise ValueError(f"channel progression must be 32/64/128/256/256, got {channels}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 output classes")

    @property
    def downsample_factor(self) -> int:
        f = 1
        for layer in self.layers:
            f *= layer.stride
        return f


def shape_check(arch: ArchSpec, input_hw: tuple[int, int]) -> tuple[tuple[int, int, int], ...]:
    """Stage output shapes (height, width, channels) for an input plane.

    The input extents must be positive and divisible by the trunk's total
    downsampling factor so every stride-2 layer sees even extents.
    """
    h, w = (int(v) for v in input_hw)
    if h < 1 or w < 1:
        raise ValueError(f"input plane must be positive, got {(h, w)}")
    factor = arch.downsample_factor
    if h % factor or w % factor:
        raise IndivisibleInput(f"input {(h, w)} not divisible by {factor}")
    stages = []
    for layer in arch.layers:
        if layer.stride == 2:
            h //= 2
            w //= 2
        if layer.stage_output:
            stages.append((h, w, layer.out_channels))
    return tuple(stages)


# ---------------------------------------------------------------------------
# Toy per-voxel segmenter


@dataclass(frozen=True)
class ToySegmenter:
    """Linear map from a p x p multi-modal patch to per-class logits.

    weights has shape (n_classes, modalities, p, p); bias has shape
    (n_classes,).  Patches are read with zero padding at the slice border,
    so every voxel gets a prediction.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
            raise ValueError(f"weights must be (classes, modalities, p, p), got {w.shape}")
        if w.shape[-1] % 2 != 1:
            raise ValueError(f"patch size must be odd, got {w.shape[-1]}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} classes")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def modalities(self) -> int:
        return self.weights.shape[1]

    @property
    def patch(self) -> int:
        return self.weights.shape[-1]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    @classmethod
    def init_random(cls, patch, modalities, n_classes, rng, scale=0.01) -> "ToySegmenter":
        w = rng.normal(0.0, scale, size=(n_classes, modalities, patch, patch))
        b = np.zeros(n_classes)
        return cls(weights=w, bias=b)


def _patch_windows(slices: np.ndarray, patch: int) -> np.ndarray:
    """Sliding p x p windows over (n, h, w, c) slices with zero padding.

    Returns a strided view shaped (n, h, w, c, p, p); nothing is copied.
    """
    half = patch // 2
    padded = np.pad(
        slices, ((0, 0), (half, half), (half, half), (0, 0)), constant_values=0
    )
    return sliding_window_view(padded, (patch, patch), axis=(1, 2))


def forward_logits(model: ToySegmenter, slices: np.ndarray) -> np.ndarray:
    """Per-voxel logits for a (n, h, w, modalities) slice batch."""
    arr = np.asarray(slices, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != model.modalities:
        raise DimMismatch(
            f"slices shaped {arr.shape} do not fit {model.modalities} modalities"
        )
    win = _patch_windows(arr, model.patch)
    return np.einsum("nhwcij,kcij->nhwk", win, model.weights) + model.bias


def forward(model: ToySegmenter, stack: SliceStack) -> SliceStack:
    """Softmax predictions for an intensity slice stack, as a prob stack."""
    if stack.kind != "intensity":
        raise ValueError(f"expected an intensity stack, got kind={stack.kind!r}")
    probs = softmax(forward_logits(model, stack.data))
    return SliceStack(
        view=stack.view, data=probs, volume_dims=stack.volume_dims, kind="prob"
    )


def predict_volume(model: ToySegmenter, vol: IntensityVolume, view: ViewAxis) -> ProbVolume:
    """Slice along a view, predict every slice, and reassemble to 3D."""
    channel_last = np.moveaxis(vol.data, 0, -1)
    logits = forward_logits(model, slice_array(channel_last, view))
    return ProbVolume(unslice_array(softmax(logits), view))


# ---------------------------------------------------------------------------
# Synchronized step plans

_VIEW_ORDER = (ViewAxis.AXIAL, ViewAxis.CORONAL, ViewAxis.SAGITTAL)


@dataclass(frozen=True)
class StepPlan:
    """Per-view slice ranges for one patient's synchronized steps.

    ranges maps each view to a tuple of (start, stop) half-open slice
    intervals, one per step.  Construction verifies that every view has
    the same number of steps and that its intervals tile the view's slice
    extent exactly once, in order.
    """

    view_extents: tuple[int, int, int]
    steps: int
    ranges: dict[ViewAxis, tuple[tuple[int, int], ...]]

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("a plan needs at least one step")
        if set(self.ranges) != set(_VIEW_ORDER):
            raise ValueError("plan must cover exactly the three canonical views")
        for view in _VIEW_ORDER:
            intervals = self.ranges[view]
            extent = self.view_extents[view.axis]
            if len(intervals) != self.steps:
                raise ValueError(
                    f"{view.name.lower()}: {len(intervals)} intervals for {self.steps} steps"
                )
            cursor = 0
            for lo, hi in intervals:
                if lo != cursor or hi <= lo:
                    raise ValueError(
                        f"{view.name.lower()}: intervals must tile [0, {extent}) in order"
                    )
                cursor = hi
            if cursor != extent:
                raise ValueError(
                    f"{view.name.lower()}: intervals cover {cursor} of {extent} slices"
                )

    def batch_sizes(self, view: ViewAxis) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in self.ranges[view])


def _even_ranges(extent: int, batch: int) -> tuple[tuple[int, int], ...]:
    return tuple(
        (lo, min(lo + batch, extent)) for lo in range(0, extent, batch)
    )


def build_step_plan(view_extents, cfg: "TrainConfig") -> StepPlan:
    """Synchronize per-view batch schedules over one patient volume.

    The coronal and sagittal views run their configured batch sizes with a
    short final batch if needed; both must land on the same step count S.
    The axial view is then fit into S steps.  If the configured axial
    final batch completes coverage exactly it is used as-is; otherwise, if
    the axial slices left for the last step after S-1 regular batches fit
    within twice the regular batch, the last batch simply absorbs them
    (the merge-two-batches pattern).  Failing both, the regular axial
    batch is recomputed as floor(extent / S) with the final batch taking
    the remainder.  Raises UnalignableBatches when no adjustment works.
    """
    extents = tuple(int(d) for d in view_extents)
    if len(extents) != 3 or min(extents) < 1:
        raise ValueError(f"view_extents must be three positive ints, got {extents}")
    n_ax, n_cor, n_sag = extents
    b_ax, b_cor, b_sag = cfg.batch_axial, cfg.batch_coronal, cfg.batch_sagittal

    steps_cor = -(-n_cor // b_cor)
    steps_sag = -(-n_sag // b_sag)
    if steps_cor != steps_sag:
        raise UnalignableBatches(
            f"coronal needs {steps_cor} steps, sagittal {steps_sag}; "
            "adjust the non-axial batch sizes"
        )
    s = steps_cor

    configured_final = cfg.axial_final_batch
    leftover = n_ax - (s - 1) * b_ax
    if (
        configured_final is not None
        and configured_final >= 1
        and (s - 1) * b_ax + configured_final == n_ax
    ):
        regular, final = b_ax, configured_final
    elif 1 <= leftover <= 2 * b_ax:
        regular, final = b_ax, leftover
    else:
        regular = n_ax // s
        if regular < 1:
            raise UnalignableBatches(
                f"axial extent {n_ax} cannot fill {s} steps with positive batches"
            )
        final = n_ax - (s - 1) * regular

    axial = tuple((i * regular, i * regular + regular) for i in range(s - 1))
    axial += ((n_ax - final, n_ax),)
    return StepPlan(
        view_extents=extents,
        steps=s,
        ranges={
            ViewAxis.AXIAL: axial,
            ViewAxis.CORONAL: _even_ranges(n_cor, b_cor),
            ViewAxis.SAGITTAL: _even_ranges(n_sag, b_sag),
        },
    )


# ---------------------------------------------------------------------------
# Training


def _default_fusion() -> FusionMethod:
    return WeightedAveraging(FusionWeights((0.4, 0.3, 0.3)))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the toy multi-view trainer.

    Batch sizes are per view; the axial final batch may be pinned (its
    default matches the full-scale 160-slice schedule) or left None to be
    derived.  dropout is recorded for configuration round-trips but has no
    effect on the linear toy model.  The learning rate halves every
    halve_every epochs: lr(e) = lr0 * 0.5 ** ((e - 1) // halve_every).
    """

    lr0: float = 1e-4
    halve_every: int = 2
    epochs: int = 35
    dropout: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    batch_axial: int = 10
    batch_coronal: int = 16
    batch_sagittal: int = 16
    axial_final_batch: int | None = 20
    fusion_method: FusionMethod = field(default_factory=_default_fusion)
    patch: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.halve_every < 1 or self.epochs < 1:
            raise ValueError("halve_every and epochs count from 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.batch_axial, self.batch_coronal, self.batch_sagittal) < 1:
            raise ValueError("batch sizes must be positive")
        if self.axial_final_batch is not None and self.axial_final_batch < 1:
            raise ValueError("axial_final_batch must be positive or None")
        if self.patch % 2 != 1 or self.patch < 1:
            raise ValueError("patch must be odd and positive")

    def learning_rate(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError("epochs count from 1")
        return self.lr0 * 0.5 ** ((epoch - 1) // self.halve_every)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    segmentation: float
    transition: float
    decision: float
    total: float
    view_dice: dict[ViewAxis, float]
    fused_dice: float


@dataclass(frozen=True)
class TrainResult:
    models: dict[ViewAxis, ToySegmenter]
    history: tuple[EpochStats, ...]


def _axis_batch(arr: np.ndarray, view: ViewAxis, lo: int, hi: int) -> np.ndarray:
    """Channel-last volume restricted to slices [lo, hi) along a view axis."""
    index = [slice(None)] * arr.ndim
    index[view.axis] = slice(lo, hi)
    return arr[tuple(index)]


def train_multiview(
    dataset: Sequence[tuple[IntensityVolume, LabelVolume]],
    cfg: TrainConfig,
    val_dataset: Sequence[tuple[IntensityVolume, LabelVolume]] | None = None,
    views: tuple[ViewAxis, ...] = _VIEW_ORDER,
) -> TrainResult:
    """Train one toy segmenter per view under the fused objective.

    Every synchronized step runs a full-volume forward pass per view (the
    toy model is cheap enough), fuses the reconstructed 3D distributions,
    and then applies plain gradient descent.  The segmentation and
    transition terms are evaluated on each view's scheduled slice batch
    for that step; the decision term is evaluated once on the whole fused
    volume and, under weighted averaging, backpropagates into every view.
    Class weights come from each patient's ground-truth label counts.

    With alpha = beta = 0 no fusion is computed and each view's updates
    depend only on its own batches, making the run bit-identical to
    training the views independently with the same seed.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if not views:
        raise TooFewViews("need at least one view to train")
    first_vol, first_lab = dataset[0]
    n_classes = first_lab.n_classes
    modalities = first_vol.modalities

    alpha, beta = cfg.loss.alpha, cfg.loss.beta
    fuse_active = (alpha > 0 or beta > 0) and len(views) >= 2
    method = cfg.fusion_method
    if fuse_active and isinstance(method, Voting) and len(views) < 3:
        raise TooFewViews("voting fusion in training needs all three views")
    if fuse_active and isinstance(method, WeightedAveraging) and len(method.weights) != len(views):
        raise DimMismatch(
            f"{len(views)} views but {len(method.weights)} fusion weights"
        )

    models = {
        view: ToySegmenter.init_random(
            cfg.patch, modalities, n_classes,
            rng=np.random.default_rng((cfg.seed, view.value)),
        )
        for view in views
    }

    # Per-patient constants: channel-last intensities, one-hot targets,
    # class weights, and the synchronized step plan for its grid.
    patients = []
    for vol, lab in dataset:
        if vol.dims != lab.dims:
            raise DimMismatch(f"intensity {vol.dims} vs labels {lab.dims}")
        if vol.modalities != modalities or lab.n_classes != n_classes:
            raise DimMismatch("dataset volumes disagree on modalities or classes")
        patients.append(
            {
                "input": np.moveaxis(vol.data, 0, -1),
                "target": one_hot(lab, n_classes),
                "weights": class_weights(lab),
                "plan": build_step_plan(vol.dims, cfg),
            }
        )

    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate(epoch)
        a_eff, b_eff, engaged = cfg.loss.factors(epoch)
        sums = np.zeros(4)
        steps_seen = 0

        for pat in patients:
            plan = pat["plan"]
            target_vol = pat["target"]
            w = pat["weights"]
            view_inputs = {v: slice_array(pat["input"], v) for v in views}

            for step in range(plan.steps):
                probs_vol = {}
                slice_probs = {}
                for v in views:
                    logits = forward_logits(models[v], view_inputs[v])
                    p = softmax(logits)
                    slice_probs[v] = p
                    probs_vol[v] = unslice_array(p, v)

                fused_vol = None
                scale = 1.0
                if fuse_active:
                    if isinstance(method, WeightedAveraging):
                        fused_vol = blend_distributions(
                            [probs_vol[v] for v in views], method.weights
                        )
                        scale = method.weights.scale
                    else:
                        stacked = np.stack(
                            [one_hot(probs_vol[v].argmax(axis=-1), n_classes) for v in views]
                        )
                        fused_vol = stacked.sum(axis=0) / len(views)

                seg = trans = 0.0
                grads_vol = {}
                for v in views:
                    lo, hi = plan.ranges[v][step]
                    p_batch = _axis_batch(probs_vol[v], v, lo, hi).reshape(-1, n_classes)
                    t_batch = _axis_batch(target_vol, v, lo, hi).reshape(-1, n_classes)
                    seg += _weighted_ce(p_batch, t_batch, w)
                    g_batch = grad_wce_softmax(p_batch, t_batch, w)
                    if fuse_active:
                        f_batch = _axis_batch(fused_vol, v, lo, hi).reshape(-1, n_classes)
                        trans += _weighted_ce(p_batch, f_batch, w)
                        if a_eff > 0:
                            g_batch = g_batch + a_eff * grad_wce_softmax(p_batch, f_batch, w)
                    g_vol = np.zeros(target_vol.shape)
                    _axis_batch(g_vol, v, lo, hi)[...] = g_batch.reshape(
                        _axis_batch(target_vol, v, lo, hi).shape
                    )
                    grads_vol[v] = g_vol

                dec = 0.0
                if fuse_active:
                    f_flat = fused_vol.reshape(-1, n_classes)
                    t_flat = target_vol.reshape(-1, n_classes)
                    dec = _weighted_ce(f_flat, t_flat, w)
                    if b_eff > 0 and isinstance(method, WeightedAveraging):
                        for i, v in enumerate(views):
                            g_dec = grad_decision_through_blend(
                                probs_vol[v].reshape(-1, n_classes),
                                f_flat,
                                t_flat,
                                w,
                                method.weights.weights[i],
                                scale,
                            )
                            grads_vol[v] = grads_vol[v] + b_eff * g_dec.reshape(
                                target_vol.shape
                            )

                total = seg + a_eff * trans + b_eff * dec
                if not np.isfinite(total):
                    raise NonFiniteLoss(f"epoch {epoch} step {step}: total loss {total}")
                sums += (seg, trans, dec, total)
                steps_seen += 1

                for v in views:
                    g_slices = slice_array(grads_vol[v], v)
                    win = _patch_windows(view_inputs[v].astype(np.float64), models[v].patch)
                    d_w = np.einsum("nhwk,nhwcij->kcij", g_slices, win)
                    d_b = g_slices.sum(axis=(0, 1, 2))
                    models[v] = ToySegmenter(
                        weights=models[v].weights - lr * d_w,
                        bias=models[v].bias - lr * d_b,
                    )

        eval_pairs = val_dataset if val_dataset else dataset
        view_dice, fused_dice = _validation_dice(models, views, method, eval_pairs)
        means = sums / steps_seen
        history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                segmentation=float(means[0]),
                transition=float(means[1]),
                decision=float(means[2]),
                total=float(means[3]),
                view_dice=view_dice,
                fused_dice=fused_dice,
            )
        )

    return TrainResult(models=models, history=tuple(history))


def _validation_dice(models, views, method: FusionMethod, pairs):
    """Mean-over-regions dice per view and for the fused prediction."""
    per_view = {v: [] for v in views}
    fused_scores = []
    for vol, lab in pairs:
        preds = {v: predict_volume(models[v], vol, v) for v in views}
        for v in views:
            hard = LabelVolume(
                preds[v].data.argmax(axis=-1).astype(np.uint8), n_classes=lab.n_classes
            )
            per_view[v].append(evaluate(lab, hard).mean_dice())
        if len(views) >= 2:
            fused = fuse_labels(method, [preds[v] for v in views])
            fused_scores.append(evaluate(lab, fused).mean_dice())
        else:
            fused_scores.append(per_view[views[0]][-1])
    view_dice = {v: float(np.mean(per_view[v])) for v in views}
    return view_dice, float(np.mean(fused_scores))


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"MVTS"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIII")


def save_checkpoint(model: ToySegmenter, path) -> None:
    """Write a model as a small versioned binary blob."""
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                _CKPT_MAGIC, _CKPT_VERSION, model.patch, model.modalities, model.n_classes
            )
        )
        fh.write(model.weights.astype("<f8").tobytes())
        fh.write(model.bias.astype("<f8").tobytes())


def load_checkpoint(path) -> ToySegmenter:
    """Read a model written by save_checkpoint; exact round trip."""
    with open(path, "rb") as fh:
        header = fh.read(_CKPT_HEADER.size)
        if len(header) < _CKPT_HEADER.size:
            raise TruncatedFile(f"{path}: header cut short")
        magic, version, patch, modalities, n_classes = _CKPT_HEADER.unpack(header)
        if magic != _CKPT_MAGIC:
            raise BadMagic(f"{path}: not a checkpoint file")
        if version != _CKPT_VERSION:
            raise UnsupportedDtype(f"{path}: unknown checkpoint version {version}")
        n_w = n_classes * modalities * patch * patch
        payload = fh.read((n_w + n_classes) * 8)
        if len(payload) < (n_w + n_classes) * 8:
            raise TruncatedFile(f"{path}: parameter payload cut short")
        params = np.frombuffer(payload, dtype="<f8")
    return ToySegmenter(
        weights=params[:n_w].reshape(n_classes, modalities, patch, patch),
        bias=params[n_w:],
    )
