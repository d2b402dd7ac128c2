"""Command-line entry point: ``minicnn <command> [options]``.

Exit codes: 0 success, 1 check failed, 2 config or spec error, 3 data error,
4 training diverged. Every file a command writes lands under ``--out``.

Numerical modules are imported inside the commands so that ``--threads``
can set the BLAS thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DivergenceError, FormatError, ShapeError, SpecError

log = logging.getLogger("minicnn")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# -- helpers -----------------------------------------------------------------------


def _set_threads(n: int):
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; --threads %d has no effect on BLAS", n)
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _out(args, name: str = "") -> Path:
    """A path inside the output directory (created on demand)."""
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    return root / name if name else root


def _emit(text: str, path: Path | None = None):
    sys.stdout.write(text)
    if path is not None:
        path.write_bytes(text.encode("utf-8"))


def _spec(name_or_path: str):
    from .experiments import load_spec

    try:
        return load_spec(name_or_path)
    except OSError as exc:
        raise ConfigError(f"cannot read spec {name_or_path!r}: {exc.strerror}") from None


def _read(fn, path, *args, **kwargs):
    """Call a loader, turning OS errors into :class:`DataError` naming ``path``."""
    try:
        return fn(path, *args, **kwargs)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _pair(cfg: RunConfig, images_key: str, labels_key: str):
    from .dataio import load_dataset

    images, labels = cfg["train", images_key], cfg["train", labels_key]
    if (images is None) != (labels is None):
        raise ConfigError(f"[train] {images_key} and {labels_key} must be given together")
    if images is None:
        return None
    for path in (images, labels):
        if not Path(path).is_file():
            raise DataError(f"dataset file not found: {path}")
    return _read(load_dataset, images, labels)


def _datasets(cfg: RunConfig, spec):
    """(train, test) sets from IDX files or the synthetic generator."""
    from .synthetic import SyntheticConfig, gen_synthetic

    seed = cfg["train", "seed"]
    train_set = _pair(cfg, "images", "labels")
    test_set = _pair(cfg, "test_images", "test_labels")
    if train_set is None:
        try:
            syn = SyntheticConfig(cfg["train", "synthetic_classes"], cfg["train", "synthetic_per_class"],
                                  cfg["train", "synthetic_size"], seed=2 * seed)
            train_set = gen_synthetic(syn)
            if test_set is None and cfg["train", "synthetic_test_per_class"] > 0:
                test_set = gen_synthetic(
                    SyntheticConfig(syn.classes, cfg["train", "synthetic_test_per_class"], syn.size, seed=2 * seed + 1)
                )
        except ValueError as exc:
            raise ConfigError(f"[train] synthetic data: {exc}") from None
    if spec.input_shape[0] == 3:
        train_set = train_set.to_rgb()
        test_set = test_set.to_rgb() if test_set is not None else None
    return train_set, test_set


def _sgd(cfg: RunConfig, **overrides):
    from .training import SgdConfig

    values = dict(
        batch_size=cfg["train", "batch_size"],
        lr=cfg["train", "lr"],
        momentum=cfg["train", "momentum"],
        weight_decay=cfg["train", "weight_decay"],
        epochs=cfg["train", "epochs"],
        lr_multipliers=cfg["train", "lr_multipliers"],
    )
    values.update(overrides)
    try:
        return SgdConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None


def _init(cfg: RunConfig):
    from .training import InitPolicy

    scheme = cfg["model", "init"]
    if scheme not in ("gaussian", "scaled", "zeros"):
        raise ConfigError(f"[model] init must be gaussian, scaled or zeros, got {scheme!r}")
    return InitPolicy(scheme, 0.0, cfg["model", "init_std"])


def _augmenter(cfg: RunConfig, spec, dataset):
    from .augment import Augmenter, CropPolicy, ScaleJitterPolicy, fit_pca_color
    from .tensor import Rng

    crop, flip, pca = cfg["augment", "crop"], cfg["augment", "flip"], cfg["augment", "pca"]
    jmin, jmax = cfg["augment", "jitter_min"], cfg["augment", "jitter_max"]
    if not (crop or flip or pca or jmin):
        return None
    size = spec.input_shape[1]
    if crop and crop != size:
        raise ConfigError(f"[augment] crop={crop} must equal the spec input size {size}")
    try:
        jitter = ScaleJitterPolicy(jmin, jmax) if jmin else None
        src = jmin if jitter else dataset.shape[1]
        policy = CropPolicy(src, size, flip)
    except ValueError as exc:
        raise ConfigError(f"[augment] {exc}") from None
    model = None
    if pca:
        if dataset.shape[0] != 3:
            raise ConfigError("[augment] pca needs a 3-channel spec input")
        model = fit_pca_color(dataset.images, rng=Rng(cfg["train", "seed"], 0xC0), sigma=cfg["augment", "pca_sigma"])
    return Augmenter(policy, jitter, model)


def _checkpoint(args, cfg: RunConfig, spec, key=("model", "checkpoint")):
    from .dataio import load_checkpoint

    path = getattr(args, "checkpoint", None) or cfg[key]
    if path is None:
        raise ConfigError("no checkpoint given (use --checkpoint or [model] checkpoint)")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return _read(load_checkpoint, path, spec.hash(), args.force)


def _transfer_config(cfg: RunConfig):
    from .experiments import TransferConfig
    from .transfer import FinetunePlan

    t = cfg.values["transfer"]
    try:
        return TransferConfig(
            source_classes=t["source_classes"],
            target_classes=t["target_classes"],
            positives=t["positives"],
            source_per_class=t["source_per_class"],
            target_per_class=t["target_per_class"],
            size=cfg["train", "synthetic_size"],
            images=cfg["train", "images"],
            labels=cfg["train", "labels"],
            spec=t["spec"],
            taps=t["taps"],
            folds=cfg["svm", "folds"],
            stratified=cfg["svm", "stratified"],
            c_grid=cfg["svm", "c_grid"],
            gamma_grid=cfg["svm", "gamma_grid"] or None,
            source_sgd=_sgd(cfg, batch_size=t["source_batch_size"], lr=t["source_lr"], epochs=t["source_epochs"]),
            finetune_sgd=_sgd(cfg, batch_size=t["finetune_batch_size"], lr=t["finetune_lr"],
                              epochs=t["finetune_epochs"]),
            finetune_plan=FinetunePlan(t["replace"], head_classes=2, lr_multiplier=t["lr_multiplier"]),
        )
    except ValueError as exc:
        raise ConfigError(f"[transfer] {exc}") from None


# -- commands ----------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig) -> int:
    from .dataio import save_checkpoint
    from .training import train

    spec = _spec(cfg["model", "spec"])
    train_set, test_set = _datasets(cfg, spec)
    result = train(
        spec, train_set, _sgd(cfg), augment=_augmenter(cfg, spec, train_set), rng=cfg["train", "seed"],
        init=_init(cfg), eval_set=test_set, k=cfg["train", "top_k"],
    )
    save_checkpoint(_out(args, "model.cnnb"), result.params, spec.hash())
    _out(args, "metrics.csv").write_bytes(result.metrics.to_csv().encode("ascii"))
    last = result.metrics[-1] if len(result.metrics) else None
    if last is not None:
        test = "" if math.isnan(last.top1) else f" test top1 err {last.top1:.4f}"
        print(f"trained {len(result.metrics)} epochs: train_loss {last.train_loss:.6f}{test}")
    print(f"wrote {_out(args, 'model.cnnb')} and {_out(args, 'metrics.csv')}")
    return EXIT_OK


def format_eval(result, fmt: str) -> str:
    if fmt == "csv":
        return f"mode,k,loss,top1,topk\n{result.mode},{result.k},{result.loss!r},{result.top1!r},{result.topk!r}\n"
    return (
        f"{'mode':<12}  {'loss':>10}  {'top-1 err':>9}  {f'top-{result.k} err':>9}\n"
        f"{result.mode:<12}  {result.loss:>10.6f}  {result.top1:>9.4f}  {result.topk:>9.4f}\n"
    )


def cmd_eval(args, cfg: RunConfig) -> int:
    from .training import EVAL_MODES, evaluate

    spec = _spec(cfg["model", "spec"])
    ckpt = _checkpoint(args, cfg, spec)
    train_set, test_set = _datasets(cfg, spec)
    data = test_set if test_set is not None else train_set
    mode = args.mode or cfg["train", "eval_mode"]
    if mode not in EVAL_MODES:
        raise ConfigError(f"[train] eval_mode must be one of {EVAL_MODES}, got {mode!r}")
    result = evaluate(ckpt.params, spec, data, mode, k=cfg["train", "top_k"])
    _emit(format_eval(result, args.format), _out(args, f"eval-{mode}.{'csv' if args.format == 'csv' else 'txt'}"))
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig) -> int:
    from .transfer import TapPoint, export_activation_maps, extract_features

    spec = _spec(cfg["model", "spec"])
    ckpt = _checkpoint(args, cfg, spec)
    train_set, test_set = _datasets(cfg, spec)
    data = test_set if args.split == "test" and test_set is not None else train_set
    if not args.tap and not args.maps:
        raise ConfigError("extract needs --tap and/or --maps")
    if args.tap:
        try:
            tap = TapPoint(args.tap, args.rule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        feats = extract_features(ckpt.params, spec, tap, data.images)
        lines = ["label," + ",".join(f"f{i}" for i in range(feats.shape[1]))]
        lines += [f"{y}," + ",".join(repr(float(v)) for v in row) for y, row in zip(data.labels, feats)]
        _out(args, "features.csv").write_bytes(("\n".join(lines) + "\n").encode("ascii"))
        print(f"wrote {len(feats)} x {feats.shape[1]} features from {args.tap!r} to {_out(args, 'features.csv')}")
    if args.maps:
        if not 0 <= args.index < len(data):
            raise DataError(f"--index {args.index} out of range for {len(data)} images")
        nodes = [n for n in args.maps.replace(",", " ").split() if n]
        written = export_activation_maps(ckpt.params, spec, data.images[args.index], nodes, _out(args, "maps"))
        print(f"wrote {len(written)} activation maps to {_out(args, 'maps')}")
    return EXIT_OK


def cmd_transfer(args, cfg: RunConfig) -> int:
    from .experiments import run_transfer
    from .transfer import rows_to_csv, rows_to_text

    tcfg = _transfer_config(cfg)
    if args.codebook:
        if not Path(args.codebook).is_file():
            raise DataError(f"codebook checkpoint not found: {args.codebook}")
        codebook = args.codebook
    else:
        codebook = _out(args, "codebook.cnnb")
    result = run_transfer(tcfg, cfg["train", "seed"], codebook, args.force, finetune_rows=not args.no_finetune)
    log.info("source top-1 error %.4f", result.source_error)
    csv, text = rows_to_csv(result.rows), rows_to_text(result.rows)
    _out(args, "transfer.csv").write_bytes(csv.encode("ascii"))
    _out(args, "transfer.txt").write_bytes(text.encode("utf-8"))
    sys.stdout.write(csv if args.format == "csv" else text)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    import numpy as np

    from .dataio import Dataset, save_checkpoint
    from .experiments import desk_datasets
    from .svm import FoldPlan
    from .transfer import finetune, finetune_model, rows_to_csv, rows_to_text

    tcfg = _transfer_config(cfg)
    spec = _spec(tcfg.spec)
    ckpt = _checkpoint(args, cfg, spec)
    seed = cfg["train", "seed"]
    _, target = desk_datasets(tcfg, seed)
    plan = FoldPlan(tcfg.folds, seed, tcfg.stratified)
    row = finetune(ckpt.params, spec, tcfg.finetune_plan, target, tcfg.finetune_sgd, plan, rng=seed,
                   positives=tcfg.positives)
    binary = Dataset(target.images, np.isin(target.labels, list(tcfg.positives)).astype(np.int64), 2)
    target_spec, final = finetune_model(ckpt.params, spec, tcfg.finetune_plan, binary, tcfg.finetune_sgd, seed)
    save_checkpoint(_out(args, "finetuned.cnnb"), final.params, target_spec.hash())
    text = rows_to_csv([row]) if args.format == "csv" else rows_to_text([row])
    _emit(text, _out(args, "finetune.csv" if args.format == "csv" else "finetune.txt"))
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    from .arch.analyzer import analyze, compare_stacks

    if args.stack_ratio is not None:
        if args.stack_ratio < 1:
            raise ConfigError(f"--stack-ratio needs a channel count >= 1, got {args.stack_ratio}")
        cmp = compare_stacks(args.stack_ratio)
        if args.format == "csv":
            sys.stdout.write(
                "layout,channels,weights,receptive_field\n"
                f"3x3-stack,{cmp.channels},{cmp.stack_weights},{cmp.stack_rf}\n"
                f"7x7-single,{cmp.channels},{cmp.single_weights},{cmp.single_rf}\n"
            )
        else:
            sys.stdout.write(cmp.to_text())
    if args.spec or args.stack_ratio is None:
        report = analyze(_spec(args.spec or cfg["model", "spec"]))
        sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .arch.analyzer import infer_shapes
    from .arch.network import logits_id
    from .tensor import Rng
    from .training import InitPolicy, gradcheck_model, init_params

    spec = _spec(args.spec)
    rng = Rng(cfg["train", "seed"], 0x6C)
    params = init_params(spec, InitPolicy("scaled"), rng.child(0))
    images = rng.child(1).uniform(0.0, 1.0, (args.batch,) + tuple(spec.input_shape))
    classes = infer_shapes(spec)[logits_id(spec)][0]
    labels = rng.child(2).integers(0, classes, args.batch)
    report = gradcheck_model(spec, params, images, labels, threshold=args.threshold)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_augment_preview(args, cfg: RunConfig) -> int:
    import numpy as np

    from .augment import TEN_CROP_ORDER, apply_pca_color, fit_pca_color, ten_crop
    from .dataio import load_ppm, save_ppm
    from .synthetic import SyntheticConfig, gen_synthetic
    from .tensor import Rng

    seed = cfg["train", "seed"]
    if args.image:
        if not Path(args.image).is_file():
            raise DataError(f"image not found: {args.image}")
        img = _read(load_ppm, args.image)
    else:
        data = gen_synthetic(SyntheticConfig(n_per_class=1, size=cfg["train", "synthetic_size"], seed=seed))
        if not 0 <= args.index < len(data):
            raise DataError(f"--index {args.index} out of range for {len(data)} images")
        img = np.repeat(data.images[args.index], 3, axis=0)
    size = args.crop or max(1, img.shape[1] * 7 // 8)
    if not 1 <= size <= min(img.shape[1:]):
        raise ConfigError(f"--crop {size} does not fit a {img.shape[1]}x{img.shape[2]} image")
    out = _out(args, "preview")
    out.mkdir(exist_ok=True)
    save_ppm(out / "original.ppm", img)
    for name, patch in zip(TEN_CROP_ORDER, ten_crop(img, size)):
        save_ppm(out / f"crop_{name}.ppm", patch)
    model = fit_pca_color(img[None], sigma=cfg["augment", "pca_sigma"])
    for i in range(3):
        shifted = apply_pca_color(img, model, Rng(seed, 0x9C).child(i))
        save_ppm(out / f"pca_{i}.ppm", np.clip(shifted, 0.0, 1.0))
    print(f"wrote 14 images to {out}")
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .dataio import save_dataset
    from .synthetic import SyntheticConfig, gen_synthetic

    try:
        syn = SyntheticConfig(args.classes, args.n, args.size, seed=cfg["train", "seed"])
        data = gen_synthetic(syn)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    images, labels = _out(args, "images.idx"), _out(args, "labels.idx")
    save_dataset(data, images, labels)
    print(f"wrote {len(data)} images ({args.classes} classes: {', '.join(syn.class_names)}) to {images} and {labels}")
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train a network on an IDX pair or synthetic shapes", True),
    "eval": (cmd_eval, "evaluate a checkpoint (single-crop or ten-crop)", True),
    "extract": (cmd_extract, "dump tap features and activation maps", True),
    "transfer": (cmd_transfer, "source training, SVM transfer, fusion and fine-tuning", True),
    "finetune": (cmd_finetune, "cross-validated fine-tuning of a source checkpoint", True),
    "analyze": (cmd_analyze, "per-layer parameters, MACs and receptive fields", False),
    "gradcheck": (cmd_gradcheck, "finite-difference check of a spec's gradients", False),
    "augment-preview": (cmd_augment_preview, "write ten crops and PCA color variants as PPM", True),
    "gen-data": (cmd_gen_data, "write a synthetic shapes dataset as an IDX pair", True),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file with [sections]")
    common.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, metavar="U64", help="overrides [train] seed")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="BLAS threads (default 1)")
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--force", action="store_true", help="accept checkpoints saved for another spec")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="minicnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    p = {name: sub.add_parser(name, parents=[common], help=text, description=text)
         for name, (_, text, _) in COMMANDS.items()}

    for name in ("eval", "extract", "finetune"):
        p[name].add_argument("--checkpoint", metavar="PATH", help="overrides [model] checkpoint")
    p["eval"].add_argument("--mode", choices=("single-crop", "ten-crop"), help="overrides [train] eval_mode")
    p["extract"].add_argument("--tap", metavar="NODE", help="node whose outputs become feature vectors")
    p["extract"].add_argument("--rule", choices=("flatten", "gap"), default="flatten")
    p["extract"].add_argument("--maps", metavar="NODES", help="comma-separated nodes to export as PPM maps")
    p["extract"].add_argument("--index", type=int, default=0, help="image used for --maps")
    p["extract"].add_argument("--split", choices=("train", "test"), default="test")
    p["transfer"].add_argument("--codebook", metavar="PATH",
                               help="existing source checkpoint; default reuses or writes OUT/codebook.cnnb")
    p["transfer"].add_argument("--no-finetune", action="store_true", help="skip the fine-tune row")
    p["analyze"].add_argument("spec", nargs="?", help="shipped spec name or .spec path")
    p["analyze"].add_argument("--stack-ratio", type=int, metavar="C",
                              help="compare three 3x3 convs with one 7x7 at C channels")
    p["gradcheck"].add_argument("--spec", default="tiny", help="shipped spec name or .spec path")
    p["gradcheck"].add_argument("--batch", type=int, default=2)
    p["gradcheck"].add_argument("--threshold", type=float, default=1e-4)
    p["augment-preview"].add_argument("--image", metavar="PPM", help="source image (default: a synthetic shape)")
    p["augment-preview"].add_argument("--index", type=int, default=0, help="synthetic image index")
    p["augment-preview"].add_argument("--crop", type=int, help="crop size (default 7/8 of the image)")
    p["gen-data"].add_argument("--classes", type=int, default=10)
    p["gen-data"].add_argument("--n", type=int, default=100, help="images per class")
    p["gen-data"].add_argument("--size", type=int, default=28)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    func, _, echo = COMMANDS[args.command]
    try:
        _set_threads(args.threads)
        overrides = list(args.set)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must fit in 64 bits, got {args.seed}")
            overrides.append(f"train.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if echo:
            cfg.save(_out(args, "config.ini"))
        return func(args, cfg)
    except (ConfigError, SpecError) as exc:
        print(f"minicnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, ShapeError) as exc:
        print(f"minicnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"minicnn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"minicnn: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
