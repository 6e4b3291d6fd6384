"""Command-line interface.

Subcommands mirror the pipeline: normalize, slice, fuse, train-toy, eval,
gradcheck, phantom, shapes.  Inputs with a .nii suffix go through the
NIfTI reader; everything else is rawvol.  Usage problems exit with 2 (via
argparse), data problems print a diagnostic to stderr and exit with 1,
success exits with 0.  Identical flags and seeds produce identical output
bytes.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MVFusionError
from .fusion import FusionWeights, Voting, WeightedAveraging, fuse_labels, vote_fuse, wa_fuse
from .io import RunConfig, read_nifti, read_rawvol, write_rawvol
from .loss import (
    ClassWeights,
    LossConfig,
    finite_diff_check,
    fused_field,
    grad_logits,
    multiview_objective,
)
from .metrics import evaluate, report_row, CSV_HEADER
from .model import (
    ArchSpec,
    TrainConfig,
    save_checkpoint,
    shape_check,
    train_multiview,
)
from .phantom import (
    BALANCED_RADII,
    NATURAL_RADII,
    PhantomSpec,
    generate_phantom,
    phantom_dataset,
)
from .volume import (
    IntensityVolume,
    LabelVolume,
    ProbVolume,
    ViewAxis,
    assemble_volume,
    extract_slices,
    zscore_normalize,
)


def _load(path):
    p = Path(path)
    if p.suffix == ".nii":
        return read_nifti(p)
    return read_rawvol(p)


def _parse_triple(text, caster, what):
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"{what} needs three comma-separated values")
    return tuple(caster(part) for part in parts)


def _dims(text):
    return _parse_triple(text, int, "dims")


def _weights(text):
    return _parse_triple(text, float, "weights")


def _method_from_args(args):
    if args.method == "voting":
        return Voting(ref_view=ViewAxis.parse(args.reference).value)
    return WeightedAveraging(FusionWeights(args.weights))


def cmd_normalize(args) -> int:
    vol = _load(args.input)
    if not isinstance(vol, IntensityVolume):
        print(f"error: {args.input} is not an intensity volume", file=sys.stderr)
        return 1
    write_rawvol(args.output, zscore_normalize(vol, nonzero_only=not args.all_voxels))
    return 0


def cmd_slice(args) -> int:
    vol = _load(args.input)
    view = ViewAxis.parse(args.view)
    stack = extract_slices(vol, view)
    if args.verify_roundtrip:
        back = assemble_volume(stack)
        if not np.array_equal(back.data, vol.data):
            print("error: round trip failed", file=sys.stderr)
            return 1
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(stack.n_slices):
        plane = stack.data[i]
        write_rawvol(
            out / f"slice_{i:04d}.rawvol",
            IntensityVolume(np.moveaxis(plane[None], -1, 0))
            if stack.kind == "intensity"
            else ProbVolume(plane[None]),
        )
    print(f"wrote {stack.n_slices} {view.name.lower()} slices to {out}")
    return 0


def cmd_fuse(args) -> int:
    views = []
    for path in args.inputs:
        vol = _load(path)
        if not isinstance(vol, ProbVolume):
            print(f"error: {path} is not a probability volume", file=sys.stderr)
            return 1
        views.append(vol)
    method = _method_from_args(args)
    start = time.perf_counter()
    fused = fuse_labels(method, views)
    elapsed = time.perf_counter() - start
    write_rawvol(args.output, fused)
    print(f"fused {len(views)} views with {args.method} in {elapsed:.3f}s")
    if args.gt:
        gt = _load(args.gt)
        if not isinstance(gt, LabelVolume):
            print(f"error: {args.gt} is not a label volume", file=sys.stderr)
            return 1
        report = evaluate(gt, fused)
        row = report_row(args.case_id, args.method, report)
        if args.csv:
            _append_csv(args.csv, [row])
        print(",".join(row))
    return 0


def cmd_eval(args) -> int:
    gt = _load(args.gt)
    pred = _load(args.pred)
    if not isinstance(gt, LabelVolume) or not isinstance(pred, LabelVolume):
        print("error: eval expects two label volumes", file=sys.stderr)
        return 1
    row = report_row(args.case_id, args.method_name, evaluate(gt, pred))
    if args.csv:
        _append_csv(args.csv, [row])
    print(",".join(row))
    return 0


def _append_csv(path, rows) -> None:
    p = Path(path)
    fresh = not p.exists() or p.stat().st_size == 0
    with open(p, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_HEADER)
        writer.writerows(rows)


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims,
        error_sizes=args.errors,
        disjoint_errors=not args.overlapping_errors,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    intensity, labels, views = generate_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rawvol(out / "intensity.rawvol", intensity)
    write_rawvol(out / "labels.rawvol", labels)
    for view, prob in zip(ViewAxis, views):
        write_rawvol(out / f"view_{view.name.lower()}.rawvol", prob)
    print(f"wrote phantom {spec.dims} with error sizes {spec.error_sizes} to {out}")
    return 0


def cmd_shapes(args) -> int:
    h, w = (int(v) for v in args.input.lower().split("x"))
    stages = shape_check(ArchSpec(), (h, w))
    for i, (sh, sw, sc) in enumerate(stages, start=1):
        print(f"stage {i}: {sh} x {sw} x {sc}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = LossConfig(alpha=args.alpha, beta=args.beta, engage_epoch=1)
    method = WeightedAveraging(FusionWeights((0.4, 0.3, 0.3)))
    worst = 0.0
    for _ in range(args.instances):
        logits = [rng.normal(0, 1.5, size=(3, 3, 5)) for _ in range(3)]
        y = rng.integers(0, 5, size=(3, 3))
        w = ClassWeights(rng.uniform(0.1, 5.0, size=5))
        frozen = fused_field(method, logits)

        def loss_fn(zs, _y=y, _w=w, _f=frozen):
            return multiview_objective(
                method, zs, _y, _w, cfg, epoch=3, transition_target=_f
            ).total

        bundle = grad_logits(method, logits, y, w, cfg, epoch=3)
        worst = max(
            worst, finite_diff_check(loss_fn, logits, bundle.grad_logits, h=args.h)
        )
    print(f"max relative gradient error over {args.instances} instances: {worst:.3e}")
    if worst >= args.tol:
        print(f"error: exceeds tolerance {args.tol:.1e}", file=sys.stderr)
        return 1
    return 0


def cmd_train_toy(args) -> int:
    if args.config:
        run = RunConfig.load(args.config)
        cfg = run.train_config()
    else:
        cfg = TrainConfig(
            lr0=args.lr0,
            epochs=args.epochs,
            loss=LossConfig(alpha=args.alpha, beta=args.beta, engage_epoch=args.engage_epoch),
            batch_axial=args.batch_axial,
            batch_coronal=args.batch_coronal,
            batch_sagittal=args.batch_sagittal,
            axial_final_batch=None,
            fusion_method=_method_from_args(args),
            seed=args.seed,
        )
    radii = BALANCED_RADII if args.geometry == "balanced" else NATURAL_RADII
    pairs = phantom_dataset(
        args.phantoms + args.val_phantoms, dims=args.dims, seed=args.seed, base_radii=radii
    )
    train_pairs = [(zscore_normalize(v), l) for v, l in pairs[: args.phantoms]]
    val_pairs = [(zscore_normalize(v), l) for v, l in pairs[args.phantoms:]]
    result = train_multiview(train_pairs, cfg, val_dataset=val_pairs or None)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for view, model in result.models.items():
        save_checkpoint(model, out / f"model_{view.name.lower()}.ckpt")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "lr", "segmentation", "transition", "decision", "total",
             "dice_axial", "dice_coronal", "dice_sagittal", "dice_fused"]
        )
        for st in result.history:
            writer.writerow(
                [st.epoch, f"{st.lr:.2e}", f"{st.segmentation:.6f}",
                 f"{st.transition:.6f}", f"{st.decision:.6f}", f"{st.total:.6f}"]
                + [f"{st.view_dice[v]:.6f}" for v in ViewAxis]
                + [f"{st.fused_dice:.6f}"]
            )
    last = result.history[-1]
    print(
        f"epoch {last.epoch}: total {last.total:.4f}, fused dice {last.fused_dice:.4f}, "
        f"checkpoints in {out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfusion",
        description="Multi-view decision fusion for volumetric segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="z-score a multi-modal intensity volume")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--all-voxels", action="store_true",
                   help="use every voxel instead of only nonzero ones")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("slice", help="cut a volume into 2D slices along a view")
    p.add_argument("--input", required=True)
    p.add_argument("--view", required=True, choices=["axial", "coronal", "sagittal"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--verify-roundtrip", action="store_true")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("fuse", help="fuse per-view probability volumes into labels")
    p.add_argument("--method", required=True, choices=["voting", "wa"])
    p.add_argument("--inputs", required=True, nargs="+")
    p.add_argument("--weights", type=_weights, default=(0.4, 0.3, 0.3),
                   help="per-view blend weights for wa (default 0.4,0.3,0.3)")
    p.add_argument("--reference", default="axial",
                   help="reference view for voting fallbacks")
    p.add_argument("--output", required=True)
    p.add_argument("--gt", help="label volume to score the fusion against")
    p.add_argument("--csv", help="append the dice row to this CSV")
    p.add_argument("--case-id", default="case")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="dice of a predicted label volume")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--csv")
    p.add_argument("--case-id", default="case")
    p.add_argument("--method-name", default="pred")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("phantom", help="generate a synthetic phantom with view errors")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--errors", type=_dims, default=(0, 0, 0),
                   help="per-view error voxel counts, e.g. 5,6,7")
    p.add_argument("--overlapping-errors", action="store_true",
                   help="draw error sets independently instead of disjointly")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("shapes", help="stage output sizes of the reference encoder")
    p.add_argument("--input", required=True, help="input plane, e.g. 240x240")
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy segmenter on phantoms")
    p.add_argument("--config", help="run configuration file; overrides other flags")
    p.add_argument("--phantoms", type=int, default=8)
    p.add_argument("--val-phantoms", type=int, default=2)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr0", type=float, default=0.1)
    p.add_argument(
        "--geometry", default="balanced", choices=["balanced", "natural"],
        help="phantom class balance; the linear toy model trains stably on 'balanced'",
    )
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--engage-epoch", type=int, default=3)
    p.add_argument("--method", default="wa", choices=["voting", "wa"])
    p.add_argument("--weights", type=_weights, default=(0.4, 0.3, 0.3))
    p.add_argument("--reference", default="axial")
    p.add_argument("--batch-axial", type=int, default=8)
    p.add_argument("--batch-coronal", type=int, default=8)
    p.add_argument("--batch-sagittal", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MVFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
