"""Acceptance suite: one test and one printed verdict line per criterion.

Run with ``python3 -m pytest tests/test_acceptance.py -v -s`` to see the
per-criterion [PASS]/[FAIL] lines alongside the pytest report.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from mvfusion import (
    BALANCED_RADII,
    ArchSpec,
    ClassWeights,
    FusionWeights,
    IntensityVolume,
    LabelVolume,
    LossConfig,
    PhantomSpec,
    ProbVolume,
    REGIONS,
    TrainConfig,
    ViewAxis,
    Voting,
    WeightedAveraging,
    assemble_volume,
    build_step_plan,
    dice,
    extract_slices,
    finite_diff_check,
    fuse_labels,
    fused_distribution,
    fused_field,
    generate_phantom,
    grad_logits,
    multiview_objective,
    phantom_dataset,
    read_rawvol,
    shape_check,
    train_multiview,
    vote_fuse,
    wa_fuse,
    write_rawvol,
    zscore_normalize,
)


@contextmanager
def criterion(num, text):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\n[FAIL] criterion {num:02d}: {text} [{time.perf_counter() - start:.2f}s]")
        raise
    print(f"\n[PASS] criterion {num:02d}: {text} [{time.perf_counter() - start:.2f}s]")


def voxel_views(*dists):
    """One 1x1x1 probability volume per per-class tuple."""
    return [ProbVolume(np.array(d, dtype=np.float64).reshape(1, 1, 1, -1)) for d in dists]


def spread_views(p_hits, target, k=5):
    """Views giving class ``target`` probability p and the rest (1-p)/(k-1)."""
    views = []
    for p in p_hits:
        row = [(1.0 - p) / (k - 1)] * k
        row[target] = p
        views.append(row)
    return voxel_views(*views)


def vote_oracle(views, ref_index):
    """Per-voxel python-loop reimplementation of majority voting."""
    dims, k = views[0].dims, views[0].n_classes
    out = np.zeros(dims, dtype=np.uint8)
    for z in range(dims[0]):
        for y in range(dims[1]):
            for x in range(dims[2]):
                votes = [
                    max(range(k), key=lambda c: (v.data[z, y, x, c], -c))
                    for v in views
                ]
                counts = [votes.count(c) for c in range(k)]
                best = max(range(k), key=lambda c: (counts[c], -c))
                out[z, y, x] = best if counts[best] > 1 else votes[ref_index]
    return out


def wa_oracle(views, weights):
    """Per-voxel python-loop reimplementation of weighted averaging."""
    dims, k = views[0].dims, views[0].n_classes
    scale = sum(weights)
    if abs(scale - 1.0) <= 1e-9:
        scale = 1.0
    out = np.zeros(dims, dtype=np.uint8)
    for z in range(dims[0]):
        for y in range(dims[1]):
            for x in range(dims[2]):
                blend = [
                    sum(w * v.data[z, y, x, c] for w, v in zip(weights, views)) / scale
                    for c in range(k)
                ]
                out[z, y, x] = max(range(k), key=lambda c: (blend[c], -c))
    return out


def test_criterion_01_voting_goldens():
    with criterion(1, "voting goldens: majority tally and reference fallback (<1s)"):
        start = time.perf_counter()
        # Tallies (0,2,0,1,0): two views pick class 1, one picks class 3.
        views = spread_views((0.9,), 1) + spread_views((0.8,), 1) + spread_views((0.7,), 3)
        assert vote_fuse(views, ref_index=0).data[0, 0, 0] == 1
        # Tallies (0,1,1,1,0): no majority, first view is the reference
        # and its own decision (class 2) wins the voxel.
        views = spread_views((0.9,), 2) + spread_views((0.8,), 1) + spread_views((0.7,), 3)
        assert vote_fuse(views, ref_index=0).data[0, 0, 0] == 2
        assert time.perf_counter() - start < 1.0


def test_criterion_02_weighted_average_golden():
    with criterion(2, "weighted-averaging golden: 0.4/0.3/0.3 blend of 0.2/0.3/0.3 is 0.26 (<1s)"):
        start = time.perf_counter()
        w = FusionWeights((0.4, 0.3, 0.3))
        views = spread_views((0.2, 0.3, 0.3), 1)
        fused = fused_distribution(WeightedAveraging(w), views)
        assert abs(fused.data[0, 0, 0, 1] - 0.26) <= 1e-12
        assert wa_fuse(views, w).data[0, 0, 0] == 1
        assert time.perf_counter() - start < 1.0


def test_criterion_03_fusion_matches_brute_force():
    with criterion(3, "vectorized fusion matches per-voxel brute force on 1000 volumes"):
        rng = np.random.default_rng(2024)
        mismatches = 0
        for _ in range(1000):
            dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
            views = []
            for _ in range(3):
                raw = rng.random(dims + (5,)) + 1e-6
                views.append(ProbVolume(raw / raw.sum(axis=-1, keepdims=True)))
            for ref in range(3):
                fast = vote_fuse(views, ref_index=ref).data
                mismatches += int((fast != vote_oracle(views, ref)).sum())
            weights = tuple(rng.uniform(0.1, 2.0, size=3))
            fast = wa_fuse(views, FusionWeights(weights)).data
            mismatches += int((fast != wa_oracle(views, weights)).sum())
        assert mismatches == 0


def test_criterion_04_gradients_match_finite_differences():
    with criterion(4, "analytic gradients within 1e-5 of finite differences, 100 instances (<30s)"):
        start = time.perf_counter()
        method = WeightedAveraging(FusionWeights((0.4, 0.3, 0.3)))
        cfg = LossConfig(alpha=0.5, beta=1.0, engage_epoch=1)
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            logits = [rng.normal(0.0, 1.5, size=(2, 2, 5)) for _ in range(3)]
            y = rng.integers(0, 5, size=(2, 2))
            w = ClassWeights(rng.uniform(0.1, 5.0, size=5))
            frozen = fused_field(method, logits)

            def loss_fn(zs, _y=y, _w=w, _f=frozen):
                return multiview_objective(
                    method, zs, _y, _w, cfg, epoch=3, transition_target=_f
                ).total

            bundle = grad_logits(method, logits, y, w, cfg, epoch=3)
            worst = max(worst, finite_diff_check(loss_fn, logits, bundle.grad_logits))
        assert worst < 1e-5
        assert time.perf_counter() - start < 30.0


def test_criterion_05_round_trips_bit_exact(tmp_path):
    with criterion(5, "slice/assemble and file round trips bit-exact at 160x240x240"):
        rng = np.random.default_rng(5)
        vol = IntensityVolume(rng.random((1, 160, 240, 240), dtype=np.float32))
        for view in ViewAxis:
            back = assemble_volume(extract_slices(vol, view))
            assert back.data.dtype == vol.data.dtype
            assert np.array_equal(back.data, vol.data)
        labels = LabelVolume(
            rng.integers(0, 5, size=(160, 240, 240)).astype(np.uint8), n_classes=5
        )
        for name, volume in (("intensity", vol), ("labels", labels)):
            path = tmp_path / f"{name}.rawvol"
            write_rawvol(path, volume)
            back = read_rawvol(path)
            assert back.data.dtype == volume.data.dtype
            assert np.array_equal(back.data, volume.data)


def test_criterion_06_fusion_repairs_disjoint_errors():
    with criterion(6, "fused dice 1.0 on all regions while every view is below 1.0 (<10s)"):
        start = time.perf_counter()
        spec = PhantomSpec(error_sizes=(6, 5, 4), seed=17)
        _, labels, views = generate_phantom(spec)
        _, labels2, views2 = generate_phantom(spec)
        assert np.array_equal(labels.data, labels2.data)
        for a, b in zip(views, views2):
            assert np.array_equal(a.data, b.data)
        for view in views:
            pred = LabelVolume(view.data.argmax(axis=-1).astype(np.uint8), n_classes=5)
            for region in REGIONS:
                assert dice(labels, pred, region) < 1.0
        voted = fuse_labels(Voting(ref_view=0), list(views))
        blended = fuse_labels(WeightedAveraging(FusionWeights((0.4, 0.3, 0.3))), list(views))
        for fused in (voted, blended):
            for region in REGIONS:
                assert dice(labels, fused, region) == 1.0
        assert time.perf_counter() - start < 10.0


def test_criterion_07_toy_training_improves_and_fuses():
    with criterion(7, "10-epoch toy training: finite, decreasing loss, fused >= best view - 0.01 (<5min)"):
        start = time.perf_counter()
        pairs = phantom_dataset(10, dims=(32, 32, 32), seed=0, base_radii=BALANCED_RADII)
        pairs = [(zscore_normalize(v), l) for v, l in pairs]
        cfg = TrainConfig(
            lr0=0.1,
            epochs=10,
            loss=LossConfig(alpha=0.5, beta=1.0, engage_epoch=3),
            batch_axial=8,
            batch_coronal=8,
            batch_sagittal=8,
            axial_final_batch=None,
            fusion_method=WeightedAveraging(FusionWeights((0.4, 0.3, 0.3))),
            seed=0,
        )
        result = train_multiview(pairs[:8], cfg, val_dataset=pairs[8:])
        for st in result.history:
            values = [st.segmentation, st.transition, st.decision, st.total,
                      st.fused_dice, *st.view_dice.values()]
            assert all(np.isfinite(v) for v in values)
        assert result.history[-1].total < result.history[0].total
        last = result.history[-1]
        assert last.fused_dice >= max(last.view_dice.values()) - 0.01
        assert time.perf_counter() - start < 300.0


def test_criterion_08_encoder_stage_shapes():
    with criterion(8, "encoder stages for 240x240: 120/60/30/15 with 64/128/256/256 channels"):
        stages = shape_check(ArchSpec(), (240, 240))
        assert stages == (
            (120, 120, 64),
            (60, 60, 128),
            (30, 30, 256),
            (15, 15, 256),
        )


def test_criterion_09_synchronized_step_plan():
    with criterion(9, "step plan for 160x240x240 lands on 15 synchronized steps per view"):
        cfg = TrainConfig(
            batch_axial=10,
            batch_coronal=16,
            batch_sagittal=16,
            axial_final_batch=20,
        )
        plan = build_step_plan((160, 240, 240), cfg)
        assert plan.steps == 15
        assert plan.batch_sizes(ViewAxis.AXIAL) == (10,) * 14 + (20,)
        assert plan.batch_sizes(ViewAxis.CORONAL) == (16,) * 15
        assert plan.batch_sizes(ViewAxis.SAGITTAL) == (16,) * 15


def test_criterion_10_full_scale_fusion_speed():
    with criterion(10, "fusing three 160x240x240x5 volumes in under 5s per method"):
        rng = np.random.default_rng(10)
        views = []
        for _ in range(3):
            raw = rng.random((160, 240, 240, 5), dtype=np.float32) + 1e-3
            views.append(ProbVolume(raw / raw.sum(axis=-1, keepdims=True)))
        start = time.perf_counter()
        vote_fuse(views, ref_index=0)
        vote_elapsed = time.perf_counter() - start
        start = time.perf_counter()
        wa_fuse(views, FusionWeights((0.4, 0.3, 0.3)))
        wa_elapsed = time.perf_counter() - start
        assert vote_elapsed < 5.0
        assert wa_elapsed < 5.0
