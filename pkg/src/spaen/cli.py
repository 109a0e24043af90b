"""Command-line interface.

Every command is deterministic given its flags and writes a ``config.json``
echo of the resolved configuration next to its outputs, so runs can be
replayed exactly.  Exit codes: 0 on success, 1 on runtime failure, 2 on usage
errors (raised by argparse).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablations, data, evaluation, spaces, trainer
from .nets import NetConfig
from .objectives import HyperParams

_VARIANT_FLAGS = {v.replace("_", "-"): v for v in ablations.VARIANTS}


def _write_config_echo(out_dir: Path, args: argparse.Namespace) -> None:
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in payload.items()}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _hyper_from_args(args: argparse.Namespace) -> HyperParams:
    return HyperParams(
        margin=args.margin,
        lambda_p=args.lambda_p,
        alpha=args.alpha,
        beta=args.beta,
        clip_c=args.clip,
        n_critic=args.n_critic,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        adv_form=args.adv_form,
        cls_mode=args.cls_mode,
        patience=args.patience,
    )


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    d = HyperParams()
    parser.add_argument("--alpha", type=float, default=d.alpha,
                        help="reconstruction weight (default %(default)s)")
    parser.add_argument("--beta", type=float, default=d.beta,
                        help="adversarial weight (default %(default)s)")
    parser.add_argument("--margin", type=float, default=d.margin,
                        help="ranking margin (default %(default)s)")
    parser.add_argument("--lambda-p", type=float, default=d.lambda_p, dest="lambda_p",
                        help="pixel-term weight inside the reconstruction loss")
    parser.add_argument("--clip", type=float, default=d.clip_c,
                        help="critic weight-clipping bound (default %(default)s)")
    parser.add_argument("--n-critic", type=int, default=d.n_critic, dest="n_critic",
                        help="critic updates per generator update (default %(default)s)")
    parser.add_argument("--lr", type=float, default=d.learning_rate,
                        help="initial learning rate (default %(default)s)")
    parser.add_argument("--batch-size", type=int, default=d.batch_size, dest="batch_size")
    parser.add_argument("--adv-form", choices=("wgan", "log"),
                        default=d.adv_form, dest="adv_form",
                        help="adversarial objective form (default %(default)s)")
    parser.add_argument("--cls-mode", choices=("sampled", "full_sum"), default=d.cls_mode,
                        dest="cls_mode", help="ranking-loss mode (default %(default)s)")
    parser.add_argument("--patience", type=int, default=d.patience,
                        help="epochs without validation improvement before LR decay")


def cmd_generate_data(args: argparse.Namespace) -> int:
    config = data.GenConfig(
        n_classes=args.classes,
        n_attributes=args.attributes,
        n_per_class=args.per_class,
        image_size=args.image_size,
        noise_std=args.noise_std,
        low_variance_fraction=args.low_variance_fraction,
        unseen_count=args.unseen_count,
        seed=args.seed,
    )
    dataset = data.generate_synthetic(config)
    splits = data.make_splits(
        dataset, unseen_count=args.unseen_count, val_count=args.val_count, seed=args.seed
    )
    out = Path(args.out)
    data.save_dataset(dataset, splits, out)
    _write_config_echo(out, args)
    print(f"wrote {dataset.n_images} images over {dataset.n_classes} classes to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset, splits = data.load_dataset(args.dataset)
    hyper = _hyper_from_args(args)
    variant = _VARIANT_FLAGS[args.variant]
    out = Path(args.out)
    _write_config_echo(out, args)

    if variant in ("spaen", "cls_only"):
        report = trainer.train(
            dataset, splits, hyper, args.epochs, args.seed,
            variant=variant,
            out_dir=out,
            resume_from=args.resume,
            save_state_to=out / "train_state",
        )
    else:
        if args.resume:
            raise ValueError(f"--resume is only supported for spaen and cls-only, not {args.variant}")
        _, report = ablations.train_variant(
            variant, dataset, splits, hyper, args.epochs, args.seed, out_dir=out
        )
    best = report.best_val_h if report.best_epoch >= 0 else float("nan")
    print(
        f"trained {variant} for {len(report.rows)} epochs in {report.wall_clock:.1f}s; "
        f"best validation H {best:.4f} at epoch {report.best_epoch}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    dataset, splits = data.load_dataset(args.dataset)
    bundle = ablations.load_bundle(args.checkpoint)
    report = evaluation.full_report(bundle, dataset, splits, n_gamma=args.gamma_grid)
    out = Path(args.out)
    _write_config_echo(out, args)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in (
            ("acc_UU", report.acc_uu),
            ("acc_UT", report.acc_ut),
            ("acc_ST", report.acc_st),
            ("H", report.h),
            ("AUSUC", report.ausuc),
        ):
            writer.writerow([name, repr(float(value))])
    with open(out / "suc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["acc_UT", "acc_ST"])
        for x, y in report.suc_points:
            writer.writerow([repr(float(x)), repr(float(y))])
    (out / "ausuc.txt").write_text(f"{report.ausuc!r}\n")
    print(
        f"acc_UU={report.acc_uu:.4f} acc_UT={report.acc_ut:.4f} "
        f"acc_ST={report.acc_st:.4f} H={report.h:.4f} AUSUC={report.ausuc:.4f}"
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset, splits = data.load_dataset(args.dataset)
    hyper = _hyper_from_args(args)
    out = Path(args.out)
    _write_config_echo(out, args)
    variants = [_VARIANT_FLAGS[v] for v in args.variants]
    rows = []
    sheet_ids = splits.unseen_test_ids[: args.sheet_items]
    originals = np.stack([dataset.image(i) for i in sheet_ids])
    for variant in variants:
        cfg = NetConfig(
            embed_dim=dataset.n_attributes, image_size=dataset.image_size, seed=args.seed
        )
        spec = ablations.AblationSpec(
            variant=variant, hyper=hyper, net_config=cfg, seed=args.seed, epochs=args.epochs
        )
        vb, row = ablations.run_variant(spec, dataset, splits, out_dir=out / variant)
        rows.append(row)
        if vb.has_decoder:
            ablations.save_contact_sheet(
                out / variant / "contact_sheet.ppm", originals, vb.reconstruct(originals)
            )
        if variant == "split_branch":
            weights = ablations.splitbranch_merge_weights(vb)
            with open(out / "splitbranch_merge_weights.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["branch", "frobenius_norm"])
                for branch in sorted(weights):
                    writer.writerow([branch, repr(weights[branch])])
        mse = row["recon_mse"]
        mse_text = "n/a" if mse is None else f"{mse:.5f}"
        print(
            f"{variant}: acc_UU={row['acc_UU']:.4f} acc_UT={row['acc_UT']:.4f} "
            f"acc_ST={row['acc_ST']:.4f} H={row['H']:.4f} recon_mse={mse_text}"
        )
    ablations.write_ablation_report(out / "ablation_report.csv", rows)
    return 0


def _variance_rows(args: argparse.Namespace) -> tuple[np.ndarray, np.ndarray]:
    """Two attribute-row sets (train side, test side) from the chosen inputs."""
    if args.dataset is not None:
        dataset, splits = data.load_dataset(args.dataset)
        train_rows = np.stack(
            [dataset.attribute_row(dataset.label(i)) for i in splits.train_ids]
        )
        test_ids = splits.seen_test_ids + splits.unseen_test_ids
        test_rows = np.stack([dataset.attribute_row(dataset.label(i)) for i in test_ids])
        return train_rows, test_rows
    if args.image_attributes is not None:
        ids, matrix = data.load_image_attribute_table(args.image_attributes)
        split_ids = data.load_image_splits_table(args.image_splits)
        by_id = {int(i): row for i, row in zip(ids, matrix)}
        try:
            train_rows = np.stack([by_id[i] for i in split_ids["train"]])
            test_rows = np.stack(
                [by_id[i] for i in split_ids["seen_test"] + split_ids["unseen_test"]]
            )
        except KeyError as exc:
            raise ValueError(f"split references image id {exc.args[0]} with no attributes")
        return train_rows, test_rows
    matrix, roles = data.load_external_attributes(args.classes, args.class_roles)
    if not roles.unseen_classes:
        raise ValueError("class-level analysis needs at least one unseen class role")
    return matrix[roles.seen_classes], matrix[roles.unseen_classes]


def cmd_analyze_attributes(args: argparse.Namespace) -> int:
    if args.dataset is None and args.image_attributes is None and args.classes is None:
        raise ValueError("provide --dataset, --image-attributes, or --classes")
    if args.image_attributes is not None and args.image_splits is None:
        raise ValueError("--image-attributes requires --image-splits")
    train_rows, test_rows = _variance_rows(args)
    profile_train = spaces.attribute_variance(train_rows, source="train")
    profile_test = spaces.attribute_variance(test_rows, source="test")
    cosine = spaces.variance_cosine(profile_train, profile_test)
    out = Path(args.out)
    _write_config_echo(out, args)
    with open(out / "variance_profile.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "var_train", "var_test"])
        for j, (a, b) in enumerate(zip(profile_train.variances, profile_test.variances)):
            writer.writerow([f"a_{j + 1}", repr(float(a)), repr(float(b))])
    (out / "variance_cosine.txt").write_text(f"{cosine!r}\n")
    print(f"variance cosine: {cosine:.4f}")
    return 0


def cmd_sweep_alpha(args: argparse.Namespace) -> int:
    dataset, splits = data.load_dataset(args.dataset)
    hyper = _hyper_from_args(args)
    out = Path(args.out)
    _write_config_echo(out, args)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip() != ""]
    if not alphas:
        raise ValueError("--alphas must list at least one value")
    sheet_ids = splits.unseen_test_ids[: args.sheet_items]
    originals = np.stack([dataset.image(i) for i in sheet_ids])
    results = []
    for alpha in alphas:
        run_dir = out / f"alpha_{alpha:g}"
        report = trainer.train(
            dataset, splits, replace(hyper, alpha=alpha), args.epochs, args.seed,
            variant="spaen", out_dir=run_dir,
        )
        vb = ablations.VariantBundle("spaen", report.bundle.config, report.bundle.maps())
        mse = ablations.reconstruction_mse(
            vb, np.stack([dataset.image(i) for i in splits.unseen_test_ids])
        )
        ablations.save_contact_sheet(
            run_dir / "contact_sheet.ppm", originals, vb.reconstruct(originals)
        )
        results.append((alpha, mse))
        print(f"alpha={alpha:g}: unseen recon MSE {mse:.5f}")
    with open(out / "recon_mse_vs_alpha.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "recon_mse"])
        for alpha, mse in results:
            writer.writerow([repr(float(alpha)), repr(float(mse))])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spaen",
        description="Train and evaluate adversarial semantic-embedding networks "
        "on synthetic attribute-rendered data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="render a synthetic dataset")
    gd = data.GenConfig()
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--classes", type=int, default=gd.n_classes)
    gen.add_argument("--attributes", type=int, default=gd.n_attributes)
    gen.add_argument("--per-class", type=int, default=gd.n_per_class, dest="per_class")
    gen.add_argument("--image-size", type=int, default=gd.image_size, dest="image_size")
    gen.add_argument("--noise-std", type=float, default=gd.noise_std, dest="noise_std")
    gen.add_argument("--low-variance-fraction", type=float,
                     default=gd.low_variance_fraction, dest="low_variance_fraction")
    gen.add_argument("--unseen-count", type=int, default=gd.unseen_count, dest="unseen_count")
    gen.add_argument("--val-count", type=int, default=3, dest="val_count")
    gen.set_defaults(func=cmd_generate_data)

    tr = sub.add_parser("train", help="train one variant on a dataset directory")
    tr.add_argument("--dataset", required=True, type=Path)
    tr.add_argument("--out", required=True, type=Path)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=300)
    tr.add_argument("--variant", choices=sorted(_VARIANT_FLAGS), default="spaen")
    tr.add_argument("--resume", type=Path, default=None,
                    help="training-state directory saved by a previous run")
    _add_hyper_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a saved checkpoint")
    ev.add_argument("--dataset", required=True, type=Path)
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--out", required=True, type=Path)
    ev.add_argument("--gamma-grid", type=int, default=201, dest="gamma_grid",
                    help="number of calibration grid points (default %(default)s)")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train and compare variants")
    ab.add_argument("--dataset", required=True, type=Path)
    ab.add_argument("--out", required=True, type=Path)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--epochs", type=int, default=50)
    ab.add_argument("--variants", nargs="+", choices=sorted(_VARIANT_FLAGS),
                    default=sorted(_VARIANT_FLAGS))
    ab.add_argument("--sheet-items", type=int, default=8, dest="sheet_items")
    _add_hyper_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    an = sub.add_parser("analyze-attributes",
                        help="compare train-side vs test-side attribute variance")
    an.add_argument("--dataset", type=Path, default=None,
                    help="dataset directory (train vs test images)")
    an.add_argument("--classes", type=Path, default=None,
                    help="class-attribute CSV (seen vs unseen class rows)")
    an.add_argument("--class-roles", type=Path, default=None, dest="class_roles",
                    help="class_id,role CSV accompanying --classes")
    an.add_argument("--image-attributes", type=Path, default=None, dest="image_attributes",
                    help="per-image attribute CSV (train vs test images)")
    an.add_argument("--image-splits", type=Path, default=None, dest="image_splits",
                    help="image_id,split,class_id CSV accompanying --image-attributes")
    an.add_argument("--out", required=True, type=Path)
    an.set_defaults(func=cmd_analyze_attributes)

    sw = sub.add_parser("sweep-alpha",
                        help="train at several reconstruction weights and compare MSE")
    sw.add_argument("--dataset", required=True, type=Path)
    sw.add_argument("--out", required=True, type=Path)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--epochs", type=int, default=50)
    sw.add_argument("--alphas", type=str, default="0,0.1,1,10,100")
    sw.add_argument("--sheet-items", type=int, default=8, dest="sheet_items")
    _add_hyper_flags(sw)
    sw.set_defaults(func=cmd_sweep_alpha)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
