"""``salsearch`` command line: gen-data, train, eval and ablate.

A config file is JSON with optional ``bench`` (SynthBenchConfig fields) and
``train`` (TrainConfig fields) sections.  Flags override the file.  Every run
prints its fully resolved config before doing any work and writes its outputs
to ``<out>/<timestamp>-seed<seed>/``; ``<out>`` defaults to ``$SALSEARCH_OUT``
or ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .dataset import ManifestError, SynthBenchConfig, generate_synth_benchmark, load_manifest, write_synth_benchmark
from .evaluation import evaluate_model, random_ranking_map
from .studies import ARMS, report, run_study
from .trainer import (TrainConfig, load_checkpoint, model_from_checkpoint, save_checkpoint, train,
                      write_jsonl)

OUT_ENV = "SALSEARCH_OUT"


class CLIError(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CLIError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CLIError(f"config file {p} is not valid JSON: {e}") from e
    unknown = set(cfg) - {"bench", "train"}
    if unknown:
        raise CLIError(f"config file {p}: unknown section(s) {', '.join(sorted(unknown))}; expected 'bench' and/or 'train'")
    return cfg


def _bench_config(args, file_cfg: dict) -> SynthBenchConfig:
    d = dict(file_cfg.get("bench", {}))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    try:
        return SynthBenchConfig.from_dict({**SynthBenchConfig().to_dict(), **d})
    except TypeError as e:
        raise CLIError(f"bench config: {e}") from e


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = dict(file_cfg.get("train", {}))
    flags = {"seed": "seed", "variant": "variant", "epochs": "epochs", "lambda_aug": "lambda_aug",
             "lambda_consis": "lambda_consis", "unseen_per_batch": "unseen_per_batch"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def _run_dir(args, seed: int) -> Path:
    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    run = root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    n = 1
    while run.exists():
        run = root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}-{n}"
        n += 1
    run.mkdir(parents=True)
    return run


def _echo(resolved: dict) -> None:
    print(json.dumps({"resolved_config": resolved}, indent=2, sort_keys=True), flush=True)


def _datasets(args, bench: SynthBenchConfig):
    if args.data is None:
        return generate_synth_benchmark(bench)
    data = Path(args.data)
    for name in ("train.tsv", "eval.tsv"):
        if not (data / name).exists():
            raise CLIError(f"{data / name} not found; run `salsearch gen-data --out {data}` first")
    return load_manifest(data / "train.tsv"), load_manifest(data / "eval.tsv")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    file_cfg = _read_config(args.config)
    bench = _bench_config(args, file_cfg)
    out = Path(args.out or os.environ.get(OUT_ENV) or "data")
    _echo({"bench": bench.to_dict(), "out": str(out)})
    train_path, eval_path = write_synth_benchmark(bench, out)
    print(f"wrote {train_path} and {eval_path}")
    return 0


def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = _train_config(args, file_cfg)
    bench = _bench_config(argparse.Namespace(seed=cfg.seed), file_cfg)
    _echo({"train": cfg.to_dict(), "bench": bench.to_dict() if args.data is None else None,
           "data": args.data})
    train_ds, eval_ds = _datasets(args, bench)
    run = _run_dir(args, cfg.seed)
    _write_json(run / "config.json", {"train": cfg.to_dict(), "data": args.data,
                                      "bench": bench.to_dict() if args.data is None else None})
    result = train(cfg, train_ds, eval_ds)
    write_jsonl(result.log, run / "metrics.jsonl")
    save_checkpoint(result.checkpoint, run / "checkpoint.pt")
    _write_json(run / "report.json", result.final.to_dict())
    print(json.dumps(result.final.to_dict(), sort_keys=True))
    print(f"run directory: {run}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise CLIError("eval needs --checkpoint")
    file_cfg = _read_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt["config"])
    bench = _bench_config(argparse.Namespace(seed=cfg.seed), file_cfg)
    _echo({"checkpoint": str(args.checkpoint), "train": cfg.to_dict(), "data": args.data,
           "interpolated": args.interpolated})
    _, eval_ds = _datasets(args, bench)
    model = model_from_checkpoint(ckpt)
    rep = evaluate_model(model, eval_ds, interpolated=args.interpolated, seed=cfg.seed, variant=cfg.variant)
    rep.extra["random_baseline_mAP"] = random_ranking_map(eval_ds.categories, sorted(set(eval_ds.categories.tolist())),
                                                          seed=cfg.seed)
    run = _run_dir(args, cfg.seed)
    _write_json(run / "report.json", rep.to_dict())
    print(json.dumps(rep.to_dict(), sort_keys=True))
    print(f"run directory: {run}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    """``"5"`` means seeds 0..4; ``"3,7,9"`` is an explicit list."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s]
        return list(range(int(text)))
    except ValueError as e:
        raise CLIError(f"--seeds expects a count or a comma-separated list, got {text!r}") from e


def cmd_ablate(args) -> int:
    file_cfg = _read_config(args.config)
    base = _train_config(args, file_cfg)
    bench = _bench_config(argparse.Namespace(seed=None), file_cfg)
    arms = [v for v in args.variants.split(",") if v]
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise CLIError(f"unknown variant(s) {', '.join(unknown)}; choose from {', '.join(ARMS)}")
    seeds = _parse_seeds(args.seeds)
    _echo({"train": base.to_dict(), "bench": bench.to_dict(), "variants": arms, "seeds": seeds})
    datasets = None
    if args.data is not None:
        datasets = _datasets(args, bench)
    results = run_study(arms, seeds, base, bench=bench, datasets=datasets)
    run = _run_dir(args, seeds[0] if seeds else base.seed)
    write_jsonl([r.to_dict() for reps in results.values() for r in reps], run / "reports.jsonl")
    table = report(results)
    (run / "table.txt").write_text(table + "\n")
    print(table)
    print(f"run directory: {run}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="salsearch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file with 'bench' and/or 'train' sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
        if data:
            sp.add_argument("--data", help="directory holding train.tsv/eval.tsv (default: generate in memory)")

    def training(sp):
        sp.add_argument("--variant", choices=sorted({a.variant for a in ARMS.values()}))
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lambda-aug", type=float)
        sp.add_argument("--lambda-consis", type=float)
        sp.add_argument("--unseen-per-batch", type=int)

    g = sub.add_parser("gen-data", help="write synthetic benchmark manifests")
    common(g, data=False)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    training(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--interpolated", action="store_true", help="use interpolated AP")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="multi-seed ablation table")
    common(a)
    training(a)
    a.add_argument("--variants", default="embed,embed+adv,embed+symb-adv,sal",
                   help=f"comma-separated arms from: {', '.join(ARMS)}")
    a.add_argument("--seeds", default="5", help="seed count or comma-separated list")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ManifestError, ValueError, KeyError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"salsearch {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
