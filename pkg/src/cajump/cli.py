"""Command-line entry point: ``cajump <command> [flags]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cajump import __version__, ca, dataset, pgm, report, training
from cajump.nn import checkpoint
from cajump.nn.gradcheck import gradient_check
from cajump.nn.model import ArchitectureError, Model, ModelConfig
from cajump.nn.optim import NonFiniteError
from cajump.rng import make_rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("cajump")


class ConfigError(Exception):
    pass


def _resolved(args, **extra) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    items.update(extra)
    print("config: " + " ".join(f"{k}={v}" for k, v in items.items()), flush=True)


def _default_workers() -> int:
    return int(os.environ.get("CAJUMP_THREADS", "1"))


def _load_arch(path) -> ModelConfig:
    if path is None:
        return ModelConfig.default()
    return ModelConfig.from_text(Path(path).read_text())


def _read_lattice(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return pgm.read_pgm(path)
    return ca.read_text(path).cells


# commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = ca.SimConfig(args.n, args.porosity, args.sigma, args.iters, args.seed)
    _resolved(args, solids=cfg.solid_count)
    lat = ca.simulate(cfg)
    out = Path(args.out)
    suffix = out.suffix.lower()
    if suffix in (".txt", ".pgm", ".png"):
        targets = [out]
    else:
        targets = [out.with_name(out.name + ".txt"), out.with_name(out.name + ".pgm")]
    for t in targets:
        if t.suffix == ".txt":
            ca.write_text(lat, t)
        elif t.suffix == ".pgm":
            pgm.write_pgm(lat.cells, t)
        else:
            report.plot_lattice(lat.cells, t, title=f"porosity {cfg.porosity}, sigma {cfg.sigma}, T={cfg.iterations}")
        print(f"wrote {t}")
    print(f"mean solid contacts: {ca.mean_contacts(lat):.4f}")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    if (args.spec is None) == (args.paper_group is None):
        raise ConfigError("give exactly one of --spec or --paper-group")
    if args.spec is not None:
        spec = dataset.DatasetSpec.from_manifest(Path(args.spec).read_text())
        if args.scale != 1.0:
            per = max(10, int(spec.samples_per_class * args.scale))
            spec = dataset.DatasetSpec(
                spec.porosity, spec.domain_sizes, spec.iteration_counts, spec.sigma_classes, per, spec.base_seed
            )
        if args.seed is not None:
            spec = dataset.DatasetSpec(
                spec.porosity, spec.domain_sizes, spec.iteration_counts, spec.sigma_classes, spec.samples_per_class,
                args.seed,
            )
    else:
        spec = dataset.paper_group(args.paper_group, args.scale, args.seed or 0)
    _resolved(args, samples=len(spec), base_seed=spec.base_seed)
    ds = dataset.generate(spec, workers=args.workers)
    dataset.write(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out} (sha256 {dataset.file_digest(args.out)[:16]})")
    return EXIT_OK


def _split(args, ds):
    fractions = tuple(float(f) for f in args.split.split(","))
    return dataset.split(ds, fractions, seed=args.split_seed)


def cmd_train(args) -> int:
    cfg = training.TrainConfig(args.epochs, args.batch_size, args.lr, args.seed, precision=args.precision)
    model_cfg = _load_arch(args.arch)
    _resolved(args)
    ds = dataset.read(args.data)
    tr, va, te = _split(args, ds)
    print(f"split: {len(tr)} train / {len(va)} val / {len(te)} test")
    res = training.fit(tr, va, cfg, model_cfg)
    res.metadata.update(split=args.split, split_seed=args.split_seed, data=Path(args.data).name)
    res.save(args.out)
    hist = Path(args.history) if args.history else Path(args.out).with_suffix(".history.csv")
    report.write_history_csv(res.history, hist)
    for rec in res.history:
        print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  val_top1 {rec.val_top1:.4f}")
    print(f"wrote {args.out} and {hist}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, _ = checkpoint.load(args.model)
    _resolved(args)
    ds = dataset.read(args.data)
    if args.part != "all":
        args.split = meta.get("split", args.split)
        args.split_seed = int(meta.get("split_seed", args.split_seed))
        ds = dict(zip(("train", "val", "test"), _split(args, ds)))[args.part]
    metrics = training.evaluate(model, ds)
    rows = [(args.part, metrics)]
    print(report.metrics_table(rows))
    print(report.confusion_table(metrics))
    print("per-class recall: " + " ".join(f"{r:.3f}" for r in metrics.per_class_recall))
    trace = int(np.trace(metrics.confusion))
    print(f"trace/total = {trace}/{metrics.total} = {trace / metrics.total:.4f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_metrics_csv(rows, out / "metrics.csv")
        report.write_confusion_csv(metrics, out / "confusion.csv")
        if args.figures:
            report.plot_confusion(metrics, out / "confusion.png")
        print(f"wrote reports to {out}")
    if args.timing:
        t = training.measure_inference(model, ds)
        print(
            f"inference: {t['samples']} samples in {t['seconds']:.3f} s "
            f"({t['samples_per_sec']:.1f}/s, {1e3 * t['seconds_per_sample']:.3f} ms/sample) on {t['hardware']}"
        )
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _, _ = checkpoint.load(args.model)
    _resolved(args)
    grid = _read_lattice(args.input)
    probs = model.forward(grid[None, None].astype(np.float64))[0]
    for k, p in enumerate(probs):
        print(f"class {k} (sigma {dataset.class_to_sigma(k):g}): {p:.4f}")
    top = np.argsort(-probs, kind="stable")[:3]
    print("top-3: " + ", ".join(f"{k} ({probs[k]:.3f})" for k in top))
    return EXIT_OK


def cmd_render(args) -> int:
    _resolved(args)
    if args.lattice:
        grid, title = _read_lattice(args.lattice), Path(args.lattice).name
    else:
        ds = dataset.read(args.data)
        if not 0 <= args.index < len(ds):
            raise ConfigError(f"index {args.index} out of range for {len(ds)} samples")
        s = ds[args.index]
        grid, title = s.grid, dataset.image_name(args.index, s)
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        report.plot_lattice(grid, out, title=title)
    else:
        pgm.write_pgm(grid, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    _resolved(args)
    n = dataset.export_images(dataset.read(args.data), args.out_dir)
    print(f"wrote {n} images to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_cfg = _load_arch(args.arch)
    _resolved(args)
    model = Model(model_cfg, seed=args.seed)
    rng = make_rng(args.seed)
    x = rng.standard_normal((args.batch, 1, args.size, args.size))
    y = rng.integers(0, model_cfg.num_classes, args.batch)
    rep = gradient_check(
        model, x, y, h=args.h, tolerance=args.tolerance, max_entries=args.max_entries, directions=args.directions
    )
    for name, err in rep.per_param.items():
        print(f"{name:>16}  {err:.3e}")
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_experiment(args) -> int:
    cfg = training.TrainConfig(args.epochs, args.batch_size, args.lr, args.seed, precision=args.precision)
    model_cfg = _load_arch(args.arch)
    _resolved(args)
    datasets = {}
    for path in args.data:
        ds = dataset.read(path)
        groups = {}
        for s in ds:
            groups.setdefault(f"n{s.n}_t{s.iterations}", []).append(s)
        for key, samples in groups.items():
            datasets[key] = dataset.DatasetFile(samples)
    results = training.run_experiment(datasets, cfg, combined=not args.no_combined, model_config=model_cfg)
    print(report.metrics_table([(r.condition, r.metrics) for r in results]))
    for flag, ok in training.trend_flags(results).items():
        print(f"{flag}: {'yes' if ok else 'no'}")
    for path in report.write_experiment(results, args.out_dir, figures=args.figures):
        log.info("wrote %s", path)
    print(f"wrote reports to {args.out_dir}")
    return EXIT_OK


# parser --------------------------------------------------------------------


def _train_flags(p, epochs=20):
    p.add_argument("--arch", help="architecture file (default: built-in network)")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")


def _split_flags(p):
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cajump", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cajump {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one automaton and write its final lattice")
    p.add_argument("--n", type=int, default=150)
    p.add_argument("--porosity", type=float, default=0.7)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="file.txt, file.pgm, file.png, or a stem for .txt + .pgm")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-dataset", help="generate a labelled snapshot dataset")
    p.add_argument("--spec", help="key=value spec file (same keys as the manifest)")
    p.add_argument("--paper-group", type=int, choices=(1, 2))
    p.add_argument("--scale", type=float, default=1.0, help="multiply samples per class (floor, min 10)")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a classifier on a dataset file")
    p.add_argument("--data", required=True)
    _train_flags(p)
    _split_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--part", choices=("test", "val", "train", "all"), default="test")
    _split_flags(p)
    p.add_argument("--out-dir", help="write metrics.csv and confusion.csv here")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.add_argument("--timing", action="store_true", help="report inference throughput")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one lattice (.pgm or text dump)")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="write one dataset sample or lattice dump as an image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--lattice")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help=".pgm or .png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export", help="write every sample of a dataset as PGM")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of back-propagation")
    p.add_argument("--arch")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--size", type=int, default=25)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=256, help="entries checked per tensor (0 = all)")
    p.add_argument("--directions", type=int, default=16, help="random whole-model direction probes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="train/test one model per (N, T) condition plus a combined model")
    p.add_argument("--data", nargs="+", required=True)
    _train_flags(p)
    p.add_argument("--no-combined", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "max_entries", None) == 0:
        args.max_entries = None
    try:
        return args.func(args)
    except (ConfigError, ArchitectureError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, dataset.DatasetFormatError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
