"""Command line: ``mada gen | train | eval | gradcheck``.

Every command reads one YAML config (see README for the keys). Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .autodiff import ContractError, ShapeError
from .data import (
    SOURCE,
    TARGET,
    CsvParseError,
    CsvSchemaError,
    Dataset,
    SyntheticConfig,
    drop_classes,
    gen_multimode,
    load_csv,
    moderate_shift_config,
    save_csv,
    save_truth,
    swap_prone_config,
)
from .evaluation import ProbeConfig, accuracy, export_embeddings, mean_and_stderr, proxy_a_distance
from .gradcheck import GradcheckConfig, run_gradcheck
from .model import TrainConfig, TrainingDiverged, build_model, train
from .nn import ConfigError, LambdaSchedule, LrSchedule, load_checkpoint, save_checkpoint

log = logging.getLogger("mada")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ARCH_FIELDS = (
    "class_count", "input_dim", "feature_hidden", "bottleneck_dim", "feature_output",
    "predictor_hidden", "disc_hidden", "algorithm", "share_mode",
)
PRESETS = {"swap_prone": swap_prone_config, "moderate_shift": moderate_shift_config}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config parsing


def _build(cls, values: dict | None, where: str):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    doc["_base_dir"] = str(path.resolve().parent)
    return doc


def synthetic_config(doc: dict) -> SyntheticConfig:
    section = dict((doc.get("data") or {}).get("synthetic") or {})
    preset = section.pop("preset", None)
    if preset is None:
        cfg = _build(SyntheticConfig, section, "data.synthetic")
    elif preset in PRESETS:
        try:
            cfg = PRESETS[preset](**section)
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
    else:
        raise ConfigError(f"data.synthetic.preset must be one of {sorted(PRESETS)}")
    cfg.validate()
    return cfg


def train_config(doc: dict, seed: int) -> TrainConfig:
    section = dict(doc.get("train") or {})
    lr = _build(LrSchedule, section.pop("lr", None), "train.lr")
    lam = _build(LambdaSchedule, section.pop("lambda", None), "train.lambda")
    probe = _build(ProbeConfig, doc.get("probe"), "probe")
    if "eval_interval" in doc:
        section.setdefault("eval_interval", doc["eval_interval"])
    section["seed"] = seed
    cfg = _build(TrainConfig, {**section, "lr": lr, "lam": lam, "probe": probe}, "train")
    cfg.validate()
    return cfg


def _resolve(doc: dict, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(doc["_base_dir"]) / path


def load_datasets(doc: dict) -> tuple[Dataset, Dataset]:
    data = doc.get("data") or {}
    if "synthetic" in data:
        source, target, _ = gen_multimode(synthetic_config(doc))
    elif "source" in data and "target" in data:
        truth = data.get("target_truth")
        source = load_csv(_resolve(doc, data["source"]), data.get("class_count"), domain=SOURCE)
        target = load_csv(
            _resolve(doc, data["target"]),
            source.class_count,
            domain=TARGET,
            truth_path=_resolve(doc, truth) if truth else None,
        )
    else:
        raise ConfigError("data: give either 'synthetic' or both 'source' and 'target'")
    drop = data.get("drop_target_classes")
    if drop:
        target = drop_classes(target, drop)
    return source, target


def _seeds(args, doc: dict) -> list[int]:
    if args.seed:
        try:
            seeds = [int(s) for s in args.seed.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seed expects a comma-separated integer list, got {args.seed!r}") from None
    else:
        seeds = doc.get("seeds", [0])
        if isinstance(seeds, int):
            seeds = [seeds]
    if not seeds:
        raise ConfigError("at least one seed is required")
    return [int(s) for s in seeds]


def _out_dir(args, doc: dict) -> Path:
    out = args.out or doc.get("out")
    if not out:
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    path = Path(out) if args.out else _resolve(doc, out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(record: dict) -> None:
    print(json.dumps(record))


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    doc = load_config(args.config)
    cfg = synthetic_config(doc)
    if args.seed:
        cfg = dataclasses.replace(cfg, seed=_seeds(args, doc)[0])
    out = _out_dir(args, doc)
    source, target, truth = gen_multimode(cfg)
    save_csv(out / "source.csv", source)
    save_csv(out / "target.csv", target)
    save_truth(out / "target_labels.csv", truth)
    _emit({
        "command": "gen",
        "source_rows": len(source),
        "target_rows": len(target),
        "classes": cfg.class_count,
        "dim": cfg.dim,
        "target_rotation_deg": cfg.target_rotation_deg,
        "files": ["source.csv", "target.csv", "target_labels.csv"],
    })
    return EXIT_OK


def _arch_meta(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in ARCH_FIELDS}


def cmd_train(args) -> int:
    doc = load_config(args.config)
    seeds = _seeds(args, doc)
    configs = {seed: train_config(doc, seed) for seed in seeds}
    out = _out_dir(args, doc)
    source, target = load_datasets(doc)
    finals, failed = {}, []
    for seed in seeds:
        cfg = configs[seed]
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(exist_ok=True)
        with open(run_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:

            def write(rec, fh=fh):
                fh.write(json.dumps(rec.to_record()) + "\n")
                fh.flush()

            try:
                result = train(cfg, source, target, on_metrics=write)
            except TrainingDiverged as exc:
                fh.write(json.dumps({
                    "event": "diverged",
                    "iteration": exc.iteration,
                    "label_loss": exc.step.label_loss,
                    "domain_loss": exc.step.domain_loss,
                }) + "\n")
                log.error("seed %d: %s", seed, exc)
                failed.append(seed)
                continue
        save_checkpoint(run_dir / "checkpoint.json", result.model.parameters(), {"arch": _arch_meta(cfg), "seed": seed})
        finals[seed] = result.metrics[-1].target_accuracy
    summary = {
        "command": "train",
        "algorithm": configs[seeds[0]].algorithm,
        "seeds": seeds,
        "failed_seeds": failed,
        "final_target_accuracy": {str(s): a for s, a in finals.items()},
    }
    accs = [a for a in finals.values() if a is not None]
    if accs:
        mean, stderr = mean_and_stderr(accs)
        summary.update(mean_target_accuracy=mean, stderr_target_accuracy=stderr)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    _emit(summary)
    return EXIT_RUNTIME if failed else EXIT_OK


def restore_model(checkpoint: str | Path):
    params, meta = load_checkpoint(checkpoint)
    arch = meta.get("arch")
    if not arch:
        raise ConfigError(f"{checkpoint}: missing architecture metadata")
    model = build_model(TrainConfig(**arch))
    current = model.parameters()
    if set(current) != set(params):
        raise ConfigError(f"{checkpoint}: parameter names do not match the recorded architecture")
    for name, arr in current.items():
        if arr.shape != params[name].shape:
            raise ConfigError(f"{checkpoint}: {name} has shape {params[name].shape}, expected {arr.shape}")
        arr[...] = params[name]
    return model


def _load_eval_data(path: Path, truth: Path | None, class_count: int) -> tuple[Dataset, Dataset | None]:
    """Load ``path``; a file holding both domains is split into (data, source)."""
    try:
        return load_csv(path, class_count, truth_path=truth), None
    except CsvSchemaError as exc:
        if "both domains" not in str(exc):
            raise
    return load_csv(path, class_count, domain=TARGET), load_csv(path, class_count, domain=SOURCE)


def cmd_eval(args) -> int:
    model = restore_model(args.checkpoint)
    k = model.class_count
    data, mixed_source = _load_eval_data(Path(args.data), Path(args.truth) if args.truth else None, k)
    if data.dim != model.input_dim:
        raise ConfigError(f"data has {data.dim} features, checkpoint expects {model.input_dim}")
    report = {"command": "eval", "rows": len(data)}
    labels = data.eval_labels()
    if len(data) and (labels >= 0).all():
        report["accuracy"] = accuracy(model, data, labels)
    if args.adist:
        source = load_csv(args.source, k) if args.source else mixed_source
        if source is None:
            raise UsageError("--adist needs --source or a data file holding both domains")
        if source.dim != model.input_dim:
            raise ConfigError(f"source has {source.dim} features, checkpoint expects {model.input_dim}")
        probe = ProbeConfig(seed=int(args.seed.split(",")[0]) if args.seed else 0)
        report["a_distance"] = proxy_a_distance(model.features(source.features), model.features(data.features), probe)
    if args.export:
        export_embeddings(model, data, args.export)
        report["exported"] = str(args.export)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    doc = load_config(args.config) if args.config else {}
    cfg = _build(GradcheckConfig, doc.get("gradcheck"), "gradcheck")
    if args.seed:
        cfg.seeds = _seeds(args, doc)
    report = run_gradcheck(cfg)
    for row in report.rows:
        _emit({"command": "gradcheck", **row})
    summary = {
        "command": "gradcheck",
        "max_rel_error": report.max_error,
        "tolerance": report.tolerance,
        "passed": report.passed,
    }
    if report.k1_reduction_max_diff is not None:
        summary["k1_reduction_max_diff"] = report.k1_reduction_max_diff
    _emit(summary)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(
            json.dumps({"rows": report.rows, **summary}, indent=1) + "\n", encoding="utf-8"
        )
    return EXIT_OK if report.passed else EXIT_RUNTIME


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mada", description="Multi-adversarial domain adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML config file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", help="comma-separated seed list (overrides config 'seeds')")
        return p

    common(sub.add_parser("gen", help="generate a synthetic source/target task"))
    common(sub.add_parser("train", help="train one run per seed"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"), config_required=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="feature CSV to evaluate")
    ev.add_argument("--truth", help="ground-truth label file for --data")
    ev.add_argument("--source", help="source feature CSV for --adist")
    ev.add_argument("--adist", action="store_true", help="report the proxy A-distance")
    ev.add_argument("--export", help="write bottleneck embeddings to this CSV")
    common(sub.add_parser("gradcheck", help="finite-difference check of all graphs"), config_required=False)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CsvSchemaError, ShapeError) as exc:
        print(f"mada {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CsvParseError, ContractError, OSError, ValueError, RuntimeError) as exc:
        print(f"mada {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
