"""Command-line entry point: ``resmatch <subcommand> ...``.

Every subcommand writes under ``--out`` (or prints JSON to stdout for
``cost``). Library errors become a one-line JSON object on stderr and a
nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config, save_config
from .data import (DatasetSplits, LabeledDataset, gen_synthetic, load_cifar, load_dataset,
                   save_dataset)
from .distiller import DistillConfig, distill, load_distilled, save_distilled
from .errors import ConfigError, DataError, ResmatchError
from .evaluator import StudentHyper, generate_soft_labels, train_student
from .metrics import cost_report, entropy_bound, feature_entropy, pixel_entropy
from .models import (ARCHITECTURES, ModelSpec, PretrainHyper, build_model, checkpoint_digest,
                     load_checkpoint, pretrain, save_checkpoint)

log = logging.getLogger("resmatch")

EXIT_ERROR = 2
EXIT_INTERNAL = 3


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_ref(ref: str) -> DatasetSplits:
    if not ref:
        raise ConfigError("no dataset given (set the config's 'dataset' key or pass --data)")
    return load_dataset(ref)


def _testset(path: str, normalization) -> LabeledDataset:
    p = Path(path)
    if p.is_dir():
        return load_dataset(p).test
    variant = "cifar100" if "100" in p.name else "cifar10"
    return load_cifar(p, variant, normalization, split="test")


# -- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    if args.cifar_train:
        train = load_cifar(args.cifar_train, args.variant)
        if not args.cifar_test:
            raise DataError("--cifar-train needs a matching --cifar-test file")
        test = load_cifar(args.cifar_test, args.variant, train.normalization, split="test")
        splits = DatasetSplits(train, test, {"source": "cifar", "variant": args.variant})
    else:
        splits = gen_synthetic(args.seed, args.num_classes, args.per_class, args.size)
    save_dataset(splits, args.out)
    return {"out": str(args.out), "train": len(splits.train), "test": len(splits.test),
            "digest": splits.train.digest()}


def cmd_pretrain(args) -> dict:
    splits = load_dataset(args.data)
    spec = ModelSpec(args.arch, splits.train.input_dims, splits.train.num_classes)
    hyper = PretrainHyper(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                          seed=args.seed)
    model = pretrain(build_model(spec, args.seed), splits.train, hyper, splits.test)
    save_checkpoint(model, args.out)
    return {"out": str(args.out), "digest": checkpoint_digest(model), **model.provenance}


def _run_distill(cfg: DistillConfig, teacher_paths: list[str], out: Path) -> dict:
    splits = _dataset_ref(cfg.dataset)
    teachers = [load_checkpoint(p) for p in teacher_paths]
    ds = distill(cfg, teachers, splits.train)
    out.mkdir(parents=True, exist_ok=True)
    save_distilled(ds, out, {"teacher_paths": [str(Path(p).resolve()) for p in teacher_paths]})
    save_config(cfg, out / "config.txt")
    return {"out": str(out), "images": int(len(ds.images)), "wall_time_s": ds.manifest["wall_time_s"]}


def cmd_distill(args) -> dict:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = DistillConfig.from_dict(manifest["config"])
        teacher_paths = args.teachers or manifest.get("teacher_paths", [])
        for path, rec in zip(teacher_paths, manifest["teachers"]):
            if checkpoint_digest(load_checkpoint(path)) != rec["digest"]:
                raise DataError(f"teacher {path} does not match the manifest digest")
        if _dataset_ref(cfg.dataset).train.digest() != manifest["dataset"]["digest"]:
            raise DataError(f"dataset {cfg.dataset} does not match the manifest digest")
    else:
        if not args.config:
            raise ConfigError("distill needs --config or --manifest")
        cfg = load_config(args.config)
        if args.data:
            cfg = DistillConfig.from_dict({**cfg.to_dict(), "dataset": str(Path(args.data).resolve())})
        teacher_paths = args.teachers
    if not teacher_paths:
        raise ConfigError("distill needs at least one --teachers checkpoint")
    return _run_distill(cfg, teacher_paths, Path(args.out))


def cmd_eval(args) -> dict:
    distilled = load_distilled(args.distilled)
    teacher = load_checkpoint(args.teacher)
    testset = _testset(args.testset, distilled.normalization)
    c, h, w = distilled.images.shape[1:]
    spec = ModelSpec(args.student, (c, h, w), teacher.spec.num_classes)
    soft = None if args.hard_labels else generate_soft_labels(teacher, distilled.images, args.temperature)
    hyper = StudentHyper(epochs=args.epochs, lr=args.lr, eta=args.eta)
    report = train_student(spec, distilled, soft, hyper, list(range(args.seeds)), testset,
                           workers=args.workers)
    result = report.to_dict()
    _write_json(Path(args.out), result)
    return {"out": str(args.out), "mean": report.mean, "std": report.std}


def cmd_metrics(args) -> dict:
    distilled = load_distilled(args.images)
    teacher = load_checkpoint(args.teacher)
    h_max, bound = entropy_bound(teacher, distilled.images, len(distilled.images))
    result = {
        "pixel_entropy_bits": pixel_entropy(distilled.images, args.bins),
        "feature_entropy_bits": feature_entropy(teacher, distilled.images),
        "output_entropy_max_nats": h_max,
        "information_bound_nats": bound,
        "set_size": int(len(distilled.images)),
        "ln_num_classes_nats": float(np.log(teacher.spec.num_classes)),
    }
    _write_json(Path(args.out), result)
    return result


def cmd_cost(args) -> dict:
    cfg = load_config(args.config)
    spec = ModelSpec(args.arch, (3, cfg.d_orig, cfg.d_orig), 10)
    return cost_report(cfg.B, cfg.k, cfg.d_ds, cfg.d_orig, spec).to_dict()


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resmatch", description="Residual-matching dataset distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic shapes dataset or import CIFAR")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--cifar-train", help="CIFAR binary batch used as the train split")
    g.add_argument("--cifar-test", help="CIFAR binary batch used as the test split")
    g.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar10")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="pretrain a teacher checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", choices=sorted(ARCHITECTURES), default="cnn-m")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, type=Path)
    t.set_defaults(func=cmd_pretrain)

    d = sub.add_parser("distill", help="distill a dataset (or rerun from a manifest)")
    d.add_argument("--config")
    d.add_argument("--manifest", help="manifest.json of an earlier run to reproduce")
    d.add_argument("--teachers", nargs="+", default=[])
    d.add_argument("--data", help="dataset directory (overrides the config's dataset key)")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="train students on distilled images and report test accuracy")
    e.add_argument("--distilled", required=True)
    e.add_argument("--teacher", required=True)
    e.add_argument("--student", choices=sorted(ARCHITECTURES), default="cnn-s")
    e.add_argument("--testset", required=True, help="dataset directory or CIFAR test batch file")
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--epochs", type=int, default=StudentHyper.epochs)
    e.add_argument("--lr", type=float, default=StudentHyper.lr)
    e.add_argument("--eta", type=float, default=1.0)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--hard-labels", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="entropy diagnostics for a distilled set")
    m.add_argument("--images", required=True)
    m.add_argument("--teacher", required=True)
    m.add_argument("--bins", type=int, default=256)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("cost", help="print the multi-resolution cost report as JSON")
    c.add_argument("--config", required=True)
    c.add_argument("--arch", choices=sorted(ARCHITECTURES), default="cnn-m")
    c.set_defaults(func=cmd_cost)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    try:
        result = args.func(args)
    except ResmatchError as e:
        print(json.dumps({"command": args.command, **e.to_dict()}), file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(json.dumps({"command": args.command, "error": "io", "message": str(e),
                          "path": getattr(e, "filename", None)}), file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # noqa: BLE001 - last-resort structured report
        print(json.dumps({"command": args.command, "error": "internal",
                          "message": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return EXIT_INTERNAL
    if args.command == "cost":
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        log.info("%s finished in %.1fs", args.command, time.time() - start)
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
