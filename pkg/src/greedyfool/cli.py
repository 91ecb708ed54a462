"""Command-line driver: ``greedyfool {train,distortion-train,attack,evaluate,ablate}``.

Every subcommand writes its artifacts under ``--out``, logs to stderr and
prints one JSON summary object on stdout. ``--config`` reads the same
options from a JSON or YAML file; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report as rpt
from .attack import AttackConfig
from .data import LabeledImageSet, dump_json, export_image, export_map, load_cifar_binary, load_digits, \
    load_idx, write_jsonl
from .distortion import GanConfig, distortion_map, train_distortion_gan, variance_distortion
from .evaluation import component_ablation, detector_study, direction_study, dynamic_evaluation, \
    select_correct, static_evaluation, target_evaluation, transfer_study
from .nn import Classifier, DistortionGenerator, TrainConfig, load_checkpoint, save_checkpoint, \
    train_classifier

logger = logging.getLogger("greedyfool")

DATASETS = ("digits", "mnist", "cifar10")


class CliError(Exception):
    """Operator-facing failure; message goes to stderr, exit code 1."""


class PartialFailure(Exception):
    def __init__(self, summary: dict, failed: list):
        super().__init__(f"{len(failed)} item(s) failed")
        self.summary = summary
        self.failed = failed


# -- argument parsing ---------------------------------------------------------


def _int_list(text: str) -> list[int]:
    """'0..6' -> [0..6]; '0,3,6' -> [0, 3, 6]."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a..b' or a comma list of integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or YAML file with option values (flags win)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_data(p: argparse.ArgumentParser, split: str) -> None:
    p.add_argument("--dataset", choices=DATASETS, default="digits")
    p.add_argument("--data-dir", type=Path, help="directory holding IDX / CIFAR binary files")
    p.add_argument("--split", choices=("train", "test"), default=split)


def _add_attack(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--model", type=Path, required=True, help="classifier checkpoint")
    g.add_argument("--images", type=_positive_int, default=100,
                   help="number of correctly classified images to attack")
    g.add_argument("--eps", type=float, default=255.0, help="L-inf threshold on the 0-255 scale")
    g.add_argument("--max-iter", type=_positive_int, default=200)
    g.add_argument("--k", type=_positive_int, default=1, help="initial select number")
    g.add_argument("--kappa", type=float, default=0.0, help="confidence margin")
    g.add_argument("--q", type=_float_list,
                   help="percentile(s) for the step rescaling ablation; a list only for --mode direction")
    g.add_argument("--tau-hi", type=float, default=70.0, help="upper distortion percentile")
    g.add_argument("--tau-lo", type=float, default=25.0, help="lower distortion percentile")
    g.add_argument("--distortion", choices=("none", "gan", "variance"), default="none")
    g.add_argument("--generator", type=Path, help="generator checkpoint for --distortion gan")
    g.add_argument("--reduce", dest="reduce", action="store_true", default=None)
    g.add_argument("--no-reduce", dest="reduce", action="store_false")
    g.add_argument("--jobs", type=_positive_int, default=1, help="parallel attacks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greedyfool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the desk classifier")
    _add_common(p)
    _add_data(p, "train")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"), default="adam")
    p.add_argument("--widths", type=_int_list, default=[8, 16], help="conv widths, e.g. 8,16")
    p.add_argument("--hidden", type=_positive_int, default=64)
    p.add_argument("--name", default="classifier", help="checkpoint file stem")

    p = sub.add_parser("distortion-train", help="train the distortion-map generator")
    _add_common(p)
    _add_data(p, "train")
    p.add_argument("--images", type=_positive_int, default=1000, help="training images to use")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-5, help="weight on mean(rho)")
    p.add_argument("--delta", type=float, default=8 / 255, help="noise amplitude on [0, 1]")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=_positive_int, default=20)
    p.add_argument("--width", type=_positive_int, default=16)
    p.add_argument("--maps", type=int, default=4, help="sample maps to export")

    p = sub.add_parser("attack", help="attack images and report sparsity")
    _add_common(p)
    _add_data(p, "test")
    _add_attack(p)
    p.add_argument("--target-class", type=int, help="targeted attack towards this class")
    p.add_argument("--random-targets", action="store_true", help="targeted attack, seeded targets")
    p.add_argument("--budgets", type=_int_list, default=[10, 20, 50, 100, 200],
                   help="pixel budgets for the static curve")
    p.add_argument("--dump", type=int, default=0, help="export this many image triples")

    p = sub.add_parser("evaluate", help="kappa sweep with transfer to victim models")
    _add_common(p)
    _add_data(p, "test")
    _add_attack(p)
    p.add_argument("--transfer", type=Path, action="append", default=[], help="victim checkpoint")
    p.add_argument("--kappa-grid", type=_int_list, default=list(range(7)))

    p = sub.add_parser("ablate", help="component, direction or detector ablation")
    _add_common(p)
    _add_data(p, "test")
    _add_attack(p)
    p.add_argument("--mode", choices=("components", "direction", "detector"), default="components")
    p.add_argument("--emit-plot-data", action="store_true",
                   help="write (q, cosine, mean pixels) triples as JSON lines")
    p.add_argument("--detector-epochs", type=int, default=10)
    p.add_argument("--baseline-eps", type=float, default=4.0, help="dense I-FGSM threshold")
    return parser


def _load_config(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = _load_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown option(s) in {args.config}: {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in values and isinstance(values[action.dest], str) and action.type:
            values[action.dest] = action.type(values[action.dest])
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# -- helpers -------------------------------------------------------------------


def load_dataset(name: str, data_dir: Path | None, split: str, seed: int = 0) -> LabeledImageSet:
    if name == "digits":
        return load_digits(split, seed=seed)
    if data_dir is None:
        raise CliError(f"--data-dir is required for dataset {name!r}")
    if not data_dir.is_dir():
        raise CliError(f"dataset directory {data_dir} does not exist")

    def find(stem):
        for cand in (stem, stem + ".gz"):
            if (data_dir / cand).exists():
                return data_dir / cand
        raise CliError(f"missing dataset file {data_dir / stem}")

    if name == "mnist":
        prefix = "train" if split == "train" else "t10k"
        return load_idx(find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte"), split)
    if split == "train":
        files = sorted(data_dir.glob("data_batch_*.bin"))
        if not files:
            raise CliError(f"no data_batch_*.bin files in {data_dir}")
        parts = [load_cifar_binary(f, split) for f in files]
        return LabeledImageSet(np.concatenate([p.images for p in parts]),
                               np.concatenate([p.labels for p in parts]), split, 10,
                               {"format": "cifar-binary", "files": [str(f) for f in files]})
    return load_cifar_binary(find("test_batch.bin"), split)


def _load_model(path: Path, kind):
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    model = load_checkpoint(path)
    if not isinstance(model, kind):
        raise CliError(f"{path} holds a {model.arch.get('kind')}, expected {kind.__name__}")
    return model


def _attack_config(args) -> AttackConfig:
    reduce = True if args.reduce is None else args.reduce
    q = args.q
    if q is not None and getattr(args, "mode", None) != "direction":
        if len(q) != 1:
            raise CliError("--q takes a single value outside --mode direction")
        q = q[0]
    else:
        q = None
    if args.kappa > 0 and args.reduce:
        logger.warning("kappa > 0: the reduce stage is skipped despite --reduce")
    try:
        return AttackConfig(eps=args.eps, max_iter=args.max_iter, kappa=args.kappa, k=args.k,
                            q=q, tau_percentiles=(args.tau_hi, args.tau_lo),
                            distortion=args.distortion, reduce=reduce and args.kappa == 0)
    except ValueError as exc:
        raise CliError(str(exc))


def _prepare_attack(args):
    config = _attack_config(args)
    model = _load_model(args.model, Classifier)
    data = load_dataset(args.dataset, args.data_dir, args.split, args.seed)
    if data.shape != model.spec.shape:
        raise CliError(f"checkpoint expects images {model.spec.shape}, dataset has {data.shape}")
    if data.n_classes != model.n_classes:
        raise CliError(f"checkpoint has {model.n_classes} classes, dataset {data.n_classes}")
    images = select_correct(model, data, args.images)
    if len(images) == 0:
        raise CliError("no correctly classified images to attack")
    if len(images) < args.images:
        logger.warning("only %d correctly classified images available", len(images))
    maps = _maps(args, images)
    return config, model, images, maps


def _maps(args, images: LabeledImageSet):
    if args.distortion == "none":
        return None
    if args.distortion == "variance":
        return np.stack([variance_distortion(x) for x in images.images])
    if args.generator is None:
        raise CliError("--distortion gan needs --generator")
    gen = _load_model(args.generator, DistortionGenerator)
    if gen.spec.shape != images.shape:
        raise CliError(f"generator expects images {gen.spec.shape}, dataset has {images.shape}")
    return distortion_map(gen, images.images)


def _finite(v):
    return None if isinstance(v, float) and np.isnan(v) else v


def _strip(rows: list[dict]) -> list[dict]:
    return [{k: _finite(v) for k, v in r.items() if k != "report"} for r in rows]


def _check_errors(summary: dict, *reports) -> dict:
    failed = [{"image_id": i, "error": msg} for rep in reports for i, msg in rep.errors]
    if failed:
        raise PartialFailure(summary, failed)
    return summary


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> dict:
    train = load_dataset(args.dataset, args.data_dir, "train", args.seed)
    test = load_dataset(args.dataset, args.data_dir, "test", args.seed)
    try:
        config = TrainConfig(optimizer=args.optimizer, lr=args.lr, batch_size=args.batch_size,
                             epochs=args.epochs, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc))
    model = train_classifier(train, config, test, widths=tuple(args.widths), hidden=args.hidden)
    model.metadata["dataset"] = args.dataset
    ckpt = args.out / f"{args.name}.ckpt"
    save_checkpoint(model, ckpt)
    rpt.write_csv(model.metadata["curve"], args.out / f"{args.name}_curve.csv")
    logger.info("test accuracy %.4f", model.metadata["test_accuracy"])
    return {"checkpoint": str(ckpt), "train_accuracy": model.metadata["train_accuracy"],
            "test_accuracy": model.metadata["test_accuracy"], "epochs": args.epochs}


def cmd_distortion_train(args) -> dict:
    data = load_dataset(args.dataset, args.data_dir, "train", args.seed)
    data = data.subset(slice(0, args.images))
    try:
        config = GanConfig(delta=args.delta, lam=args.lam, lr=args.lr, batch_size=args.batch_size,
                           epochs=args.epochs, seed=args.seed, width=args.width)
    except ValueError as exc:
        raise CliError(str(exc))
    gen = train_distortion_gan(data, config)
    ckpt = args.out / "generator.ckpt"
    save_checkpoint(gen, ckpt)
    rpt.write_csv(gen.metadata["curve"], args.out / "generator_curve.csv")
    maps = distortion_map(gen, data.images[: args.maps]) if args.maps > 0 else []
    for i, m in enumerate(maps):
        export_map(m, args.out / "maps" / f"rho_{i:03d}.png")
        export_image(data.images[i], args.out / "maps" / f"image_{i:03d}.png")
    return {"checkpoint": str(ckpt), "mean_rho_init": gen.metadata["mean_rho_init"],
            "mean_rho_final": gen.metadata["mean_rho_final"], "epochs": args.epochs,
            "lambda": args.lam, "delta": args.delta}


def cmd_attack(args) -> dict:
    config, model, images, maps = _prepare_attack(args)
    if args.target_class is not None or args.random_targets:
        if args.target_class is not None:
            if not 0 <= args.target_class < model.n_classes:
                raise CliError(f"--target-class must lie in [0, {model.n_classes})")
            keep = images.labels != args.target_class
            images = images.subset(np.flatnonzero(keep))
            maps = maps[keep] if maps is not None else None
            targets = np.full(len(images), args.target_class)
        else:
            targets = None
        rep = target_evaluation(model, images, config, targets=targets, seed=args.seed, maps=maps,
                                jobs=args.jobs)
    else:
        rep = dynamic_evaluation(model, images, config, maps=maps, jobs=args.jobs)
    out = args.out
    write_jsonl(rep.records(), out / "results.jsonl")
    curve = static_evaluation(rep, args.budgets)
    rpt.write_csv([{"budget": m, "fooling_rate": r} for m, r in curve], out / "static.csv")
    rpt.plot_static_curve({rep.kind: curve}, out / "static.png")
    if args.dump > 0 and rep.results:
        n = min(args.dump, len(rep.results))
        pos = rep.positions[:n]
        adv = rep.adversarial[:n]
        rpt.plot_examples(images.images[pos], adv, None if maps is None else maps[pos],
                          out / "examples.png", n)
        for i, x in zip(rep.image_ids[:n], adv):
            export_image(x, out / "images" / f"adv_{i:05d}.png")
    summary = rep.summary()
    summary["static"] = dict(curve)
    summary["results"] = str(out / "results.jsonl")
    return _check_errors(summary, rep)


def cmd_evaluate(args) -> dict:
    config, model, images, _ = _prepare_attack(args)
    victims = {}
    for path in args.transfer:
        victims[path.stem] = _load_model(path, Classifier)
    if victims:
        try:
            images = select_correct([model, *victims.values()], images)
        except ValueError as exc:
            raise CliError(f"victim incompatible with the dataset: {exc}")
    try:
        rows = transfer_study(model, victims, images, args.kappa_grid, config, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(str(exc))
    table = [r.summary() for r in rows]
    rpt.write_csv(table, args.out / "transfer.csv")
    write_jsonl([rec for r in rows for rec in r.report.records()], args.out / "results.jsonl")
    rpt.plot_kappa_sweep(table, args.out / "kappa.png")
    return _check_errors({"images": len(images), "rows": _strip(table)}, *(r.report for r in rows))


def cmd_ablate(args) -> dict:
    config, model, images, maps = _prepare_attack(args)
    out = args.out
    if args.mode == "direction":
        rows = direction_study(model, images, config, args.q or [0, 25, 50, 75, 100], jobs=args.jobs)
        table = _strip(rows)
        rpt.write_csv(table, out / "direction.csv", ["q", "cosine", "mean_pixels", "median_pixels",
                                                      "fooling_rate"])
        rpt.plot_direction_curve(table, out / "direction.png")
        if args.emit_plot_data:
            write_jsonl([{k: r[k] for k in ("q", "cosine", "mean_pixels")} for r in table],
                        out / "direction_plot.jsonl")
        return _check_errors({"mode": "direction", "rows": table}, *(r["report"] for r in rows))
    detector = TrainConfig(epochs=args.detector_epochs, lr=1e-3, seed=args.seed)
    if args.mode == "detector":
        res = detector_study(model, images, config, maps=maps, baseline_eps=args.baseline_eps,
                             detector=detector, jobs=args.jobs)
        rpt.write_csv([res], out / "detector.csv")
        return {"mode": "detector", **{k: _finite(v) for k, v in res.items()}}
    if maps is None:
        raise CliError("--mode components needs --distortion gan or variance")
    rows = component_ablation(model, images, config, maps, detector=detector, jobs=args.jobs)
    table = _strip(rows)
    rpt.write_csv(table, out / "components.csv")
    return _check_errors({"mode": "components", "rows": table}, *(r["report"] for r in rows))


COMMANDS = {
    "train": cmd_train,
    "distortion-train": cmd_distortion_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"greedyfool: error: {exc}", file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        summary = COMMANDS[args.command](args)
    except PartialFailure as exc:
        for item in exc.failed:
            print(f"greedyfool: failed: {dump_json(item)}", file=sys.stderr)
        print(dump_json({"status": "partial", "failed": exc.failed, **exc.summary}))
        return 3
    except (CliError, OSError, ValueError) as exc:
        print(f"greedyfool: error: {exc}", file=sys.stderr)
        return 1
    print(dump_json({"status": "ok", "command": args.command, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
