"""Command-line entry point.

    personapp gen-data --out data/
    personapp train --model rmtpp --personalization moe --data data/ --out runs/moe/
    personapp evaluate --checkpoint runs/moe/checkpoint.json --data data/ --out runs/moe/eval/
    personapp identify --checkpoint runs/moe/checkpoint.json --trials 5000 --data data/ --out ...

Every subcommand writes manifest.json into --out. Exit codes: 0 ok,
1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections.abc import Callable, Sequence as SequenceOf
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from . import __version__
from .claims import Improvement, Threshold
from .config import RunConfig, RunManifest, all_keys, build_config, file_sha256, load_config_file
from .errors import DataError, PersonappError, UsageError
from .evalsuite import (
    SourceIdResult,
    aggregate_curves,
    baseline_evaluator,
    coin_flip_check,
    compare_rates,
    make_trials,
    model_evaluator,
    sample_quality_table,
    source_identification,
    tune_baseline,
    write_rows,
)
from .events import SPLITS, Dataset, load_splits, max_gap, mean_gap, split_fraction
from .falsification import falsify
from .model import PersonalizedMTPP
from .predictor import next_event_metrics, predict_dataset, write_predictions
from .sampler import save_samples, thin
from .seeding import resolve_seed, substream
from .synthgen import generate_population, load_ground_truth, save_population
from .trainer import curriculum_ablate, evaluate, reference_set, train
from .verdicts import Evidence

logger = logging.getLogger("personapp")

CHECKPOINT_NAME = "checkpoint.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _clean(value: Any) -> Any:
    """JSON-safe copy: NaN and inf become null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in all_keys()}
    if getattr(args, "model", None) is not None:
        overrides["model.model"] = args.model
    if getattr(args, "personalization", None) is not None:
        overrides["model.personalization"] = args.personalization
    file_values = load_config_file(args.config)
    run = build_config(file_values, overrides)
    explicit = {k for k, v in {**file_values, **overrides}.items() if v is not None}
    for section in ("trainer", "mc", "synth"):
        if f"{section}.seed" not in explicit:
            run.replace(section, seed=args.seed)
    if "trainer.threads" not in explicit:
        run.replace("trainer", threads=args.threads)
    return run


def _load_data(directory: str | None, seed: int) -> dict[str, Dataset]:
    if directory is None:
        raise UsageError("--data is required")
    return load_splits(directory, seed=seed)


def _data_hashes(directory: str | None) -> dict[str, str]:
    if directory is None:
        return {}
    out = {}
    for name in SPLITS:
        p = Path(directory) / f"{name}.jsonl"
        if p.exists():
            out[p.name] = file_sha256(p)
    return out


def _split(data: dict[str, Dataset], name: str) -> Dataset:
    if name not in data:
        raise DataError(f"data directory has no {name} split")
    return data[name]


def _load_model(path: str | None) -> PersonalizedMTPP:
    if path is None:
        raise UsageError("--checkpoint is required")
    return PersonalizedMTPP.load(path)


def _finish(args: argparse.Namespace, run: RunConfig, out: Path, t_max: float | None = None, **extra: Any) -> None:
    RunManifest(
        command=args.command,
        config=run.flat(),
        seed=args.seed,
        version=__version__,
        t_max=t_max,
        datasets=_data_hashes(getattr(args, "data", None)),
        extra=_clean(extra),
    ).write(out)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    pop = generate_population(run["synth"])
    stats = save_population(pop, out)
    write_json(out / "stats.json", stats)
    args.data = str(out)
    _finish(args, run, out)


def cmd_train(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    data = _load_data(args.data, args.seed)
    train_set = _split(data, "train")
    t_max = max_gap(train_set)
    model = PersonalizedMTPP(run["model"], train_set.K, t_max)
    result = train(model, train_set, data.get("valid"), run["trainer"], run["mc"])
    model.save(out / CHECKPOINT_NAME, best_epoch=result.best_epoch, seed=args.seed)
    result.log.write_csv(out / "metrics.csv")
    _finish(args, run, out, t_max, best_epoch=result.best_epoch, best_valid_nll=result.best_valid_nll, steps=result.steps)


def _oracle_verdict(report_nll: np.ndarray, seq_ids: list[str], data_dir: str) -> dict[str, Any] | None:
    truth = Path(data_dir) / "ground_truth.json"
    if not truth.exists():
        return None
    _, oracle = load_ground_truth(truth)
    pairs = [(nll, -oracle[s]) for nll, s in zip(report_nll, seq_ids) if s in oracle]
    if len(pairs) < 2:
        return None
    diff = np.array([m - o for m, o in pairs])
    z = float(diff.mean() / (diff.std(ddof=1) / math.sqrt(diff.size) or 1.0))
    claim = Threshold("the model does not beat the generating process", metric="z", threshold=-3.0, direction=">=")
    result = falsify(claim, Evidence({"z": z}, source="paired NLL differences"))
    return {"oracle_nll": float(np.mean([o for _, o in pairs])), "gap_z": z, "verdict": result.to_dict()}


def cmd_evaluate(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data, args.seed)
    ds = _split(data, args.split)
    tr = run["trainer"]
    report = evaluate(model, ds, run["mc"], args.seed, max_refs=tr.max_refs, threads=tr.threads)
    write_rows(list(report.scores), out / "scores.csv")
    summary: dict[str, Any] = {"variant": model.variant, "split": args.split, **report.summary()}
    identity = Threshold("-log p = n (SCE + PP+) + T PP-", metric="residual", threshold=1e-8, direction="<=")
    verdicts = {"identity": falsify(identity, Evidence({"residual": summary["max_identity_residual"]})).to_dict()}
    oracle = _oracle_verdict(report.values("nll"), [s.seq_id for s in report.scores], args.data)
    if oracle is not None:
        summary["oracle_nll"] = oracle["oracle_nll"]
        verdicts["oracle"] = oracle["verdict"]
    summary["verdicts"] = verdicts
    write_json(out / "summary.json", summary)
    _finish(args, run, out, model.t_max)


def _grid(ds: Dataset, points: int) -> list[float]:
    horizon = float(np.mean([s.horizon for s in ds.sequences()]))
    return [horizon * j / points for j in range(1, points + 1)]


def cmd_curves(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    ds = _split(_load_data(args.data, args.seed), args.split)
    points = aggregate_curves(model, ds, _grid(ds, args.grid_points), run["mc"], args.seed, run["trainer"].max_refs)
    write_rows(points, out / "curves.csv")
    _finish(args, run, out, model.t_max)


def cmd_predict(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data, args.seed)
    cfg = replace(run["predict"], mean_gap=mean_gap(_split(data, "train")))
    rows = predict_dataset(model, _split(data, args.split), cfg, args.seed, threads=run["trainer"].threads)
    write_predictions(rows, out / "predictions.csv")
    write_json(out / "summary.json", {"variant": model.variant, **next_event_metrics(rows)})
    _finish(args, run, out, model.t_max, mean_gap=cfg.mean_gap)


def cmd_identify(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    data = _load_data(args.data, args.seed)
    test = _split(data, args.split)
    trials = make_trials(test, args.trials, substream(args.seed, "trials"))
    valid_trials = make_trials(_split(data, "valid"), args.valid_trials, substream(args.seed, "valid-trials"))
    baseline, strength_errors = tune_baseline(_split(data, "train"), valid_trials, seed=args.seed)
    results: dict[str, SourceIdResult] = {
        "gamma-poisson": source_identification(baseline_evaluator(baseline), trials, args.seed)
    }
    for path in args.checkpoint or []:
        model = PersonalizedMTPP.load(path)
        results[model.variant] = source_identification(model_evaluator(model, run["mc"]), trials, args.seed)
    rows = [{"method": name, "error_rate": r.error_rate, "se": r.standard_error, "n_trials": r.n_trials} for name, r in results.items()]
    verdicts = {f"{name}:chance": coin_flip_check(f"{name} identifies at chance", r).to_dict() for name, r in results.items()}
    for name, r in results.items():
        if name != "gamma-poisson":
            verdicts[f"{name}:beats-baseline"] = compare_rates(
                f"{name} beats the Gamma-Poisson baseline by 5 points", r, results["gamma-poisson"]
            ).to_dict()
    write_json(
        out / "identify.json",
        {"methods": rows, "baseline": asdict(baseline), "strength_errors": strength_errors, "verdicts": verdicts},
    )
    _finish(args, run, out)


def _rhos(raw: str) -> list[float]:
    try:
        values = [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--rho must be a comma-separated list of numbers, got {raw!r}") from exc
    if not values or any(not 0.0 <= r <= 1.0 for r in values):
        raise UsageError(f"--rho values must lie in [0, 1], got {raw!r}")
    return values


def cmd_sample(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    ds = _split(_load_data(args.data, args.seed), args.split)
    rho = _rhos(args.rho)[0]
    results = []
    for i, seq in enumerate(list(ds.sequences())[: args.n_sequences]):
        rng = substream(args.seed, "sample", i)
        prefix, _, pi = split_fraction(seq, rho)
        if pi >= seq.horizon:
            logger.warning("%s: the prefix reaches T=%g, nothing to sample", seq.seq_id, seq.horizon)
            continue
        (z,) = model.draw_z(reference_set(ds, seq, run["trainer"].max_refs, rng), rng, 1)
        results.append(thin(model.decoder, z, prefix, (pi, seq.horizon), run["thinning"], rng))
    save_samples(results, out / "samples.jsonl", model.variant, args.seed)
    _finish(args, run, out, model.t_max, n_samples=len(results))


def cmd_sample_quality(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    ds = _split(_load_data(args.data, args.seed), args.split)
    rows = sample_quality_table(model, ds, _rhos(args.rho), run["thinning"], args.n_sequences, args.seed, run["trainer"].max_refs)
    write_rows(rows, out / "sample_quality.csv")
    write_json(out / "sample_quality.json", {"variant": model.variant, "rows": [asdict(r) for r in rows]})
    _finish(args, run, out, model.t_max)


def cmd_ablate(args: argparse.Namespace, run: RunConfig, out: Path) -> None:
    data = _load_data(args.data, args.seed)
    train_set = _split(data, "train")
    t_max = max_gap(train_set)
    rows = []
    logs = []
    for variant in args.variants.split(","):
        model_name, _, personalization = variant.partition("-")
        try:
            model_cfg = replace(run["model"], model=model_name, personalization=personalization)
        except ValueError as exc:
            raise UsageError(f"unknown variant {variant!r}") from exc

        def factory(cfg: Any = model_cfg) -> PersonalizedMTPP:
            return PersonalizedMTPP(cfg, train_set.K, t_max)

        result = curriculum_ablate(
            factory, train_set, _split(data, "valid"), _split(data, "test"), run["ablation"], run["trainer"], run["mc"]
        )
        rows.extend(result.rows)
        logs.append(result.log)
    write_rows(rows, out / "ablation.csv")
    for log in logs[1:]:
        logs[0].extend(log)
    if logs:
        logs[0].write_csv(out / "metrics.csv")
    verdicts = {}
    by_key = {(r.fraction, r.variant): r for r in rows}
    for (fraction, variant), row in by_key.items():
        base = by_key.get((fraction, variant.replace("-moe", "-none")))
        if variant.endswith("-moe") and base is not None:
            claim = Improvement(f"{variant} beats {base.variant} at {fraction:g}", k=3.0)
            evidence = Evidence({"a": row.test_nll, "b": base.test_nll, "se_a": row.test_nll_se, "se_b": base.test_nll_se})
            verdicts[f"{variant}@{fraction:g}"] = falsify(claim, evidence).to_dict()
    write_json(out / "summary.json", {"rows": [asdict(r) for r in rows], "verdicts": verdicts})
    _finish(args, run, out, t_max)


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig, Path], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "curves": cmd_curves,
    "predict": cmd_predict,
    "identify": cmd_identify,
    "sample": cmd_sample,
    "sample-quality": cmd_sample_quality,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", default=None, help="JSON file of dotted keys")
    common.add_argument("--seed", type=int, default=None, help="global seed (default $MTPP_SEED or 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--model", choices=["rmtpp", "nhp"], default=None, help="alias for --model.model")
    common.add_argument("--personalization", choices=["moe", "none"], default=None, help="alias for --model.personalization")
    keys = common.add_argument_group("config keys")
    for key, tp in all_keys().items():
        keys.add_argument(f"--{key}", dest=key, default=None, metavar="V", help=str(tp))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="personapp", description="Personalized neural marked temporal point processes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text)

    add("gen-data", "generate a synthetic population")
    p = add("train", "train one model variant")
    p.add_argument("--data", help="directory with train/valid/test .jsonl")
    for name, help_text in (("evaluate", "held-out NLL and its decomposition"), ("curves", "SCE / PP+ / PP- over time"), ("predict", "next-event prediction")):
        p = add(name, help_text)
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test", choices=list(SPLITS))
        if name == "curves":
            p.add_argument("--grid-points", type=int, default=10)
    p = add("identify", "source identification vs the Gamma-Poisson baseline")
    p.add_argument("--data")
    p.add_argument("--checkpoint", action="append", help="repeatable")
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.add_argument("--trials", type=int, default=5000)
    p.add_argument("--valid-trials", type=int, default=1000)
    for name, help_text, rho in (("sample", "thinning samples after a prefix", "0.5"), ("sample-quality", "Jaccard / Wasserstein of sampled suffixes", "0.1,0.3,0.5")):
        p = add(name, help_text)
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test", choices=list(SPLITS))
        p.add_argument("--rho", default=rho)
        p.add_argument("--n-sequences", type=int, default=None)
    p = add("ablate", "curriculum training-set-size ablation")
    p.add_argument("--data")
    p.add_argument("--variants", default="rmtpp-moe,rmtpp-none")
    return parser


def _configure_logging(level: str) -> None:
    root = logging.getLogger("personapp")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


def main(argv: SequenceOf[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        args.seed = resolve_seed(args.seed)
        if args.threads is None:
            args.threads = os.cpu_count() or 1
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        run = _run_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, run, out)
        logger.info("%s done: %s", args.command, out)
    except PersonappError as exc:
        print(f"personapp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # Flags and config are validated up front; what is left is the data.
        print(f"personapp: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
