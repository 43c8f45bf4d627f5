"""Command-line surface: bank building, training, scoring, ablations.

Every command writes into an output directory that also receives
``config.txt``, the fully resolved configuration, so any artifact can
be regenerated from its own echo. Errors print one machine-parsable
line (``cap: <category>: <message>``) and map to exit codes 1 (usage),
2 (data), 3 (numerical).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import report
from .bank import (
    BANK_MAGIC,
    MemoryBank,
    build_bank,
    load_bank,
    load_labeled_features,
    save_bank,
    save_labeled_features,
    top_k_neighbors,
)
from .errors import ConfigError, DataError, FormatError, NumericalError
from .heatmap import anomaly_heatmap, load_spatial_maps, write_grid_csv, write_pgm
from .model import ModelParams, forward, load_model, save_model
from .scoring import evaluate, format_float, report_summary, report_to_csv
from .synthetic import STANDARD_SUITE, standard_instance
from .trainer import TrainingConfig, collapse_diagnostics, preset, train

# Short flag spellings for the head variants.
HEAD_FLAGS = {
    "l": "linear",
    "l-relu": "linear-relu",
    "l-relu-l": "linear-relu-linear",
}
HEAD_NAMES = {full: short for short, full in HEAD_FLAGS.items()}

K_SWEEP = (1, 4, 8, 16, 32, 64)
LAMBDA_SWEEP = (0.0, 0.1, 1.0, 2.0, 10.0, 100.0)
HEATMAP_SIDE = 224

CONFIG_KEYS = (
    "bank",
    "model",
    "test",
    "out",
    "preset",
    "k",
    "lambda",
    "lr",
    "batch",
    "epochs",
    "seed",
    "head",
    "attention",
)


class CliParser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract says 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value text; unknown or repeated keys are rejected."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{number}: repeated key {key!r}")
        values[key] = value.strip()
    return values


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")


def _parse_number(value: str, key: str, kind: type) -> Any:
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(
            f"config key {key!r} expects {kind.__name__}, got {value!r}"
        ) from None


def resolve_training(args: argparse.Namespace, file_cfg: dict[str, str]) -> TrainingConfig:
    """Precedence: preset defaults, then config file, then flags."""
    preset_name = getattr(args, "preset", None) or file_cfg.get("preset")
    config = preset(preset_name) if preset_name else TrainingConfig()

    updates: dict[str, Any] = {}
    if "k" in file_cfg:
        updates["k"] = _parse_number(file_cfg["k"], "k", int)
    if "lambda" in file_cfg:
        updates["lam"] = _parse_number(file_cfg["lambda"], "lambda", float)
    if "lr" in file_cfg:
        updates["learning_rate"] = _parse_number(file_cfg["lr"], "lr", float)
    if "batch" in file_cfg:
        updates["batch_size"] = _parse_number(file_cfg["batch"], "batch", int)
    if "epochs" in file_cfg:
        updates["epochs"] = _parse_number(file_cfg["epochs"], "epochs", int)
    if "seed" in file_cfg:
        updates["seed"] = _parse_number(file_cfg["seed"], "seed", int)
    if "head" in file_cfg:
        short = file_cfg["head"]
        if short not in HEAD_FLAGS:
            raise ConfigError(
                f"config key 'head' expects one of {sorted(HEAD_FLAGS)}, got {short!r}"
            )
        updates["head_variant"] = HEAD_FLAGS[short]
    if "attention" in file_cfg:
        updates["attention_enabled"] = _parse_bool(file_cfg["attention"], "attention")

    if getattr(args, "k", None) is not None:
        updates["k"] = args.k
    if getattr(args, "lam", None) is not None:
        updates["lam"] = args.lam
    if getattr(args, "lr", None) is not None:
        updates["learning_rate"] = args.lr
    if getattr(args, "batch", None) is not None:
        updates["batch_size"] = args.batch
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "head", None) is not None:
        updates["head_variant"] = HEAD_FLAGS[args.head]
    if getattr(args, "no_attention", False):
        updates["attention_enabled"] = False

    config = replace(config, **updates)
    config.validate()
    return config


def _resolve_path(flag_value: str | None, file_cfg: dict[str, str], key: str) -> str | None:
    if flag_value is not None:
        return flag_value
    return file_cfg.get(key)


def _require_path(value: str | None, key: str) -> str:
    if value is None:
        raise ConfigError(f"missing required input: --{key} (or config key {key!r})")
    return value


def _ensure_out_dir(value: str | None) -> Path:
    out = Path(_require_path(value, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def training_echo(config: TrainingConfig) -> list[tuple[str, str]]:
    return [
        ("k", str(config.k)),
        ("lambda", format_float(config.lam)),
        ("lr", format_float(config.learning_rate)),
        ("batch", str(config.batch_size)),
        ("epochs", str(config.epochs)),
        ("seed", str(config.seed)),
        ("head", HEAD_NAMES[config.head_variant]),
        ("attention", "true" if config.attention_enabled else "false"),
    ]


def write_echo(out_dir: Path, command: str, pairs: Sequence[tuple[str, str]]) -> None:
    lines = [f"command={command}"]
    lines.extend(f"{key}={value}" for key, value in pairs)
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def load_features_any(path: str | Path) -> tuple[MemoryBank, np.ndarray | None]:
    """Accept either the binary bank container or plain numeric CSV."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(BANK_MAGIC))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if head == BANK_MAGIC:
        return load_labeled_features(path)
    try:
        rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path} is neither a bank file nor numeric CSV: {exc}") from exc
    return build_bank(rows), None


def resolve_k(args: argparse.Namespace, model: ModelParams) -> int:
    if getattr(args, "k", None) is not None:
        return args.k
    recorded = model.metadata.get("k")
    if recorded is None:
        raise ConfigError("model file records no k; pass --k")
    return int(recorded)


def cmd_build_bank(args: argparse.Namespace) -> int:
    out_dir = _ensure_out_dir(args.out)
    source = args.input
    if source.startswith(STANDARD_SUITE + ":"):
        seed = _parse_number(source.split(":", 1)[1], "seed", int)
        instance = standard_instance(seed)
        bank = build_bank(instance.train_normals, metadata=dict(instance.params))
    else:
        bank, _ = load_features_any(source)
    save_bank(bank, out_dir / "bank.cap")
    write_echo(out_dir, "build-bank", [("input", source), ("out", str(out_dir))])
    print(f"wrote {out_dir / 'bank.cap'} ({bank.size} x {bank.dim})")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.suite != STANDARD_SUITE:
        raise ConfigError(f"unknown suite {args.suite!r}, expected {STANDARD_SUITE!r}")
    out_dir = _ensure_out_dir(args.out)
    instance = standard_instance(args.seed)
    params = dict(instance.params)
    train_bank = build_bank(instance.train_normals, metadata=params)
    save_bank(train_bank, out_dir / "train.cap")
    save_labeled_features(
        instance.test_features, instance.test_labels, out_dir / "test.cap",
        metadata=params,
    )
    write_echo(
        out_dir, "synth",
        [("suite", args.suite), ("seed", str(args.seed)), ("out", str(out_dir))],
    )
    print(f"wrote {out_dir / 'train.cap'} and {out_dir / 'test.cap'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    bank_path = _require_path(_resolve_path(args.bank, file_cfg, "bank"), "bank")
    out_dir = _ensure_out_dir(_resolve_path(args.out, file_cfg, "out"))
    test_path = _resolve_path(args.test, file_cfg, "test")
    config = resolve_training(args, file_cfg)

    bank = load_bank(bank_path)
    holdout = None
    if test_path is not None:
        test_bank, labels = load_labeled_features(test_path)
        holdout = (test_bank.items.astype(np.float64), labels)
    model, trace = train(bank, config, holdout=holdout)

    save_model(model, out_dir / "model.cap")
    (out_dir / "trace.csv").write_text(trace.to_csv())
    report.training_curves(trace, out_dir / "training_curves.png")
    diagnostics = collapse_diagnostics(model, bank, holdout, k=config.k)
    (out_dir / "diagnostics.txt").write_text(
        "".join(f"{key}={format_float(value)}\n" for key, value in diagnostics.items())
    )
    pairs = [("bank", bank_path)]
    if test_path is not None:
        pairs.append(("test", test_path))
    pairs.append(("out", str(out_dir)))
    pairs.extend(training_echo(config))
    write_echo(out_dir, "train", pairs)
    final = trace.records[-1] if trace.records else None
    if final is not None:
        print(
            f"trained {config.epochs} epochs: total loss {format_float(final.total)}, "
            f"head Frobenius {format_float(final.head_frobenius)}"
        )
    print(f"wrote {out_dir / 'model.cap'}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    out_dir = _ensure_out_dir(args.out)
    model = load_model(args.model)
    bank = load_bank(args.bank)
    queries, _ = load_features_any(args.test)
    k = resolve_k(args, model)
    score_report = evaluate(
        model, bank, queries.items.astype(np.float64), k, ids=queries.ids
    )
    lines = ["id,score"]
    lines.extend(
        f"{qid},{format_float(value)}"
        for qid, value in zip(score_report.ids, score_report.scores)
    )
    (out_dir / "scores.csv").write_text("\n".join(lines) + "\n")
    write_echo(
        out_dir, "score",
        [("model", args.model), ("bank", args.bank), ("test", args.test),
         ("out", str(out_dir)), ("k", str(k))],
    )
    print(f"wrote {out_dir / 'scores.csv'} ({len(score_report.ids)} rows)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = _ensure_out_dir(args.out)
    model = load_model(args.model)
    bank = load_bank(args.bank)
    queries, labels = load_features_any(args.test)
    k = resolve_k(args, model)
    score_report = evaluate(
        model, bank, queries.items.astype(np.float64), k,
        labels=labels, ids=queries.ids,
    )
    (out_dir / "scores.csv").write_text(report_to_csv(score_report))
    baseline_lines = ["id,baseline_score" + (",label" if labels is not None else "")]
    for index, (qid, value) in enumerate(
        zip(score_report.ids, score_report.baseline_scores)
    ):
        row = f"{qid},{format_float(value)}"
        if labels is not None:
            row += f",{int(labels[index])}"
        baseline_lines.append(row)
    (out_dir / "baseline_scores.csv").write_text("\n".join(baseline_lines) + "\n")
    (out_dir / "summary.txt").write_text(report_summary(score_report))
    report.score_histogram(score_report, out_dir / "score_hist.png")
    write_echo(
        out_dir, "eval",
        [("model", args.model), ("bank", args.bank), ("test", args.test),
         ("out", str(out_dir)), ("k", str(k))],
    )
    print(report_summary(score_report), end="")
    return 0


def _ablate_point(payload: dict[str, Any]) -> dict[str, Any]:
    """Train and evaluate one sweep point; runs in a worker process."""
    config = TrainingConfig(**payload["config"])
    bank = load_bank(payload["bank"])
    test_bank, labels = load_labeled_features(payload["test"])
    features = test_bank.items.astype(np.float64)
    model, trace = train(bank, config, holdout=(features, labels))
    point_dir = Path(payload["dir"])
    point_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, point_dir / "model.cap")
    (point_dir / "trace.csv").write_text(trace.to_csv())
    pairs = [("bank", payload["bank"]), ("test", payload["test"]),
             ("out", str(point_dir))]
    pairs.extend(training_echo(config))
    write_echo(point_dir, "ablate-point", pairs)
    score_report = evaluate(model, bank, features, config.k, labels=labels)
    gap = score_report.anomaly_mean - score_report.normal_mean
    return {
        "value": payload["value"],
        "gap": gap,
        "auroc": score_report.auroc,
        "baseline_auroc": score_report.baseline_auroc,
        "head_frobenius": trace.records[-1].head_frobenius if trace.records else 0.0,
    }


def worker_count(points: int) -> int:
    raw = os.environ.get("CAP_WORKERS")
    if raw is None:
        limit = os.cpu_count() or 1
    else:
        try:
            limit = int(raw)
        except ValueError:
            raise ConfigError(f"CAP_WORKERS must be an integer, got {raw!r}") from None
        if limit < 1:
            raise ConfigError(f"CAP_WORKERS must be at least 1, got {limit}")
    return max(1, min(points, limit))


def cmd_ablate(args: argparse.Namespace) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    bank_path = _require_path(_resolve_path(args.bank, file_cfg, "bank"), "bank")
    test_path = _require_path(_resolve_path(args.test, file_cfg, "test"), "test")
    out_dir = _ensure_out_dir(_resolve_path(args.out, file_cfg, "out"))
    base = resolve_training(args, file_cfg)

    _, labels = load_labeled_features(test_path)
    if labels is None or len(set(labels.tolist())) < 2:
        raise DataError("ablation requires a labeled test set with both classes")

    payloads = []
    if args.sweep == "k":
        values: Sequence[float] = K_SWEEP
        configs = [replace(base, k=value) for value in K_SWEEP]
    else:
        values = LAMBDA_SWEEP
        configs = [replace(base, lam=value) for value in LAMBDA_SWEEP]
    for value, config in zip(values, configs):
        config.validate()
        payloads.append(
            {
                "bank": bank_path,
                "test": test_path,
                "value": value,
                "config": {
                    "k": config.k,
                    "lam": config.lam,
                    "learning_rate": config.learning_rate,
                    "batch_size": config.batch_size,
                    "epochs": config.epochs,
                    "seed": config.seed,
                    "head_variant": config.head_variant,
                    "attention_enabled": config.attention_enabled,
                },
                "dir": str(out_dir / f"{args.sweep}_{value:g}"),
            }
        )

    workers = worker_count(len(payloads))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_point, payloads))
    else:
        rows = [_ablate_point(payload) for payload in payloads]

    lines = [f"{args.sweep},gap,auroc,baseline_auroc,head_frobenius"]
    for row in rows:
        lines.append(
            f"{row['value']:g},{format_float(row['gap'])},"
            f"{format_float(row['auroc'])},{format_float(row['baseline_auroc'])},"
            f"{format_float(row['head_frobenius'])}"
        )
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    report.sweep_curves(
        list(values), [row["gap"] for row in rows], [row["auroc"] for row in rows],
        args.sweep, out_dir / "sweep.png",
    )
    pairs = [("bank", bank_path), ("test", test_path), ("out", str(out_dir)),
             ("sweep", args.sweep)]
    pairs.extend(training_echo(base))
    write_echo(out_dir, "ablate", pairs)
    print(f"wrote {out_dir / 'sweep.csv'} ({len(rows)} points, {workers} workers)")
    return 0


def _safe_name(raw: Any) -> str:
    text = str(raw)
    cleaned = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in text)
    return cleaned or "map"


def cmd_heatmap(args: argparse.Namespace) -> int:
    out_dir = _ensure_out_dir(args.out)
    model = load_model(args.model)
    bank = load_bank(args.bank)
    maps = load_spatial_maps(args.maps)
    k = resolve_k(args, model)
    for index, smap in enumerate(maps):
        grid = np.asarray(smap.grid, dtype=np.float64)
        pooled = grid.reshape(-1, grid.shape[-1]).mean(axis=0)
        neighbors = top_k_neighbors(bank, pooled, k)
        output = forward(model, pooled, neighbors)
        result = anomaly_heatmap(
            pooled, output.z_normal, smap, HEATMAP_SIDE, HEATMAP_SIDE
        )
        stem = f"{index:03d}_{_safe_name(smap.source_id)}"
        write_pgm(result.upsampled, out_dir / f"{stem}.pgm",
                  vmin=result.vmin, vmax=result.vmax)
        write_grid_csv(result.raw_grid, out_dir / f"{stem}.csv")
        report.heatmap_figure(result, out_dir / f"{stem}.png",
                              title=str(smap.source_id))
    write_echo(
        out_dir, "heatmap",
        [("model", args.model), ("bank", args.bank), ("maps", args.maps),
         ("out", str(out_dir)), ("k", str(k))],
    )
    print(f"wrote {len(maps)} heatmaps to {out_dir}")
    return 0


def _add_training_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--preset", choices=("cifar", "mvtec"))
    sub.add_argument("--k", type=int)
    sub.add_argument("--lambda", dest="lam", type=float)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--head", choices=tuple(HEAD_FLAGS))
    sub.add_argument("--no-attention", action="store_true")


def build_parser() -> CliParser:
    parser = CliParser(prog="cap", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("build-bank", help="write a bank file from features")
    sub.add_argument("input", help=f"numeric CSV path or {STANDARD_SUITE}:<seed>")
    sub.add_argument("--out", required=True)
    sub.set_defaults(handler=cmd_build_bank)

    sub = commands.add_parser("synth", help="generate a synthetic instance")
    sub.add_argument("suite", help=f"suite name, currently {STANDARD_SUITE}")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True)
    sub.set_defaults(handler=cmd_synth)

    sub = commands.add_parser("train", help="train an adaptation model")
    sub.add_argument("--bank")
    sub.add_argument("--test", help="labeled holdout for the trace")
    sub.add_argument("--out")
    _add_training_flags(sub)
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("score", help="score queries against a bank")
    sub.add_argument("--model", required=True)
    sub.add_argument("--bank", required=True)
    sub.add_argument("--test", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--k", type=int)
    sub.set_defaults(handler=cmd_score)

    sub = commands.add_parser("eval", help="score and compare against baseline")
    sub.add_argument("--model", required=True)
    sub.add_argument("--bank", required=True)
    sub.add_argument("--test", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--k", type=int)
    sub.set_defaults(handler=cmd_eval)

    sub = commands.add_parser("ablate", help="retrain across a hyperparameter sweep")
    sub.add_argument("--bank")
    sub.add_argument("--test")
    sub.add_argument("--out")
    sub.add_argument("--sweep", choices=("k", "lambda"), required=True)
    _add_training_flags(sub)
    sub.set_defaults(handler=cmd_ablate)

    sub = commands.add_parser("heatmap", help="render anomaly heatmaps")
    sub.add_argument("--model", required=True)
    sub.add_argument("--bank", required=True)
    sub.add_argument("--maps", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--k", type=int)
    sub.set_defaults(handler=cmd_heatmap)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ConfigError as exc:
        print(f"cap: usage: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DataError) as exc:
        print(f"cap: data: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cap: data: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"cap: numerical: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
