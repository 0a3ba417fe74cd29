"""Command-line entry point: gen-data, train, eval and gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checks import format_table, run_gradcheck
from .errors import ConfigError, DataError, DimensionError, NumericError, UndefinedMetricError, UsageError
from .graph import (
    BASE_TYPES,
    COVARIATE_OOD_BASES,
    COVARIATE_TRAIN_BASES,
    CONCEPT_BASES,
    DatasetSplit,
    MotifConfig,
    dataset_from_splits,
    generate_motif_dataset,
    load_jsonl,
    save_jsonl,
)
from .trainer import METRICS, VARIANTS, AblationFlags, TrainConfig, evaluate, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files


def load_config_file(path) -> tuple[TrainConfig, AblationFlags, str | None]:
    """Parse a JSON config: TrainConfig fields plus optional "ablations" and "data"."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_config(obj)


def parse_config(obj: dict) -> tuple[TrainConfig, AblationFlags, str | None]:
    obj = dict(obj)
    ablations = obj.pop("ablations", []) or []
    data = obj.pop("data", None)
    if not isinstance(ablations, list):
        raise ConfigError("ablations must be a list of flag names")
    cfg = TrainConfig.from_json(obj)
    return cfg, AblationFlags.from_names(ablations), data


def effective_config(cfg: TrainConfig, flags: AblationFlags, data) -> dict:
    out = cfg.to_json()
    out["ablations"] = flags.active()
    out["data"] = str(data)
    return out


# ---------------------------------------------------------------------------
# commands


def _sizes(text: str) -> tuple[int, int, int, int]:
    try:
        parts = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"--sizes expects four comma-separated integers, got {text!r}") from None
    if len(parts) != 4:
        raise ConfigError(f"--sizes expects four comma-separated integers, got {text!r}")
    return parts


def cmd_gen_data(args) -> int:
    cfg = MotifConfig(shift=args.shift)
    if args.p_train is not None:
        cfg.p_train = args.p_train
    if args.sizes is not None:
        cfg.sizes = _sizes(args.sizes)
    ds = generate_motif_dataset(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, graphs in ds.splits().items():
        save_jsonl(graphs, out / f"{name}.jsonl")
    if cfg.shift == "covariate":
        bases = {"train": [BASE_TYPES[b] for b in COVARIATE_TRAIN_BASES],
                 "ood": [BASE_TYPES[b] for b in COVARIATE_OOD_BASES]}
    else:
        bases = {"train": [BASE_TYPES[b] for b in CONCEPT_BASES], "ood": [BASE_TYPES[b] for b in CONCEPT_BASES]}
    manifest = {
        "kind": args.kind,
        "seed": args.seed,
        "config": cfg.to_json(),
        "base_types": bases,
        "class_count": ds.class_count,
        "env_count": ds.env_count,
        "counts": {name: len(g) for name, g in ds.splits().items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {sum(manifest['counts'].values())} graphs to {out}")
    return EXIT_OK


def load_dataset_dir(path) -> DatasetSplit:
    path = Path(path)
    splits = {}
    for name in DatasetSplit.SPLITS:
        file = path / f"{name}.jsonl"
        if not file.is_file():
            raise DataError(f"missing split file {file}")
        splits[name] = load_jsonl(file)
    shift, class_count, env_count = "unknown", None, None
    manifest = path / "manifest.json"
    if manifest.is_file():
        try:
            meta = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest}: invalid JSON ({exc.msg})") from None
        shift = meta.get("config", {}).get("shift", shift)
        class_count, env_count = meta.get("class_count"), meta.get("env_count")
    ds = dataset_from_splits(splits, shift)
    # the manifest knows about classes or environments a small split may lack
    if class_count is not None:
        ds.class_count = max(ds.class_count, int(class_count))
    if env_count is not None:
        ds.env_count = max(ds.env_count, int(env_count))
    return ds


def cmd_train(args) -> int:
    if args.config is not None:
        cfg, flags, data = load_config_file(args.config)
    else:
        cfg, flags, data = TrainConfig(), AblationFlags(), None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant is not None:
        cfg.variant = args.variant
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.ablate is not None:
        flags = AblationFlags.from_names(args.ablate.split(","))
    if args.data is not None:
        data = args.data
    if data is None:
        raise ConfigError("no dataset: pass --data or set \"data\" in the config")
    cfg.validate()

    ds = load_dataset_dir(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective_config(cfg, flags, data), indent=2) + "\n",
                                     encoding="utf-8")
    result = train(cfg, flags, ds, out)
    score = evaluate(result.checkpoint, ds.ood_test)
    print(f"ood_test {cfg.metric} {score:.4f} (epoch {result.checkpoint.epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    graphs = load_jsonl(args.data)
    print(f"{evaluate(ckpt, graphs, args.metric):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.seed)
    print(format_table(rows))
    ok = all(r.passed for r in rows)
    print("all blocks pass" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="derog", description="Latent environment and rationale inference for OOD graph classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic motif dataset")
    g.add_argument("--kind", choices=["motif"], default="motif")
    g.add_argument("--shift", required=True, help="covariate or concept")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--p-train", type=float, default=None)
    g.add_argument("--sizes", default=None, help="train,id_val,ood_val,ood_test counts")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated or loaded dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", default=None, help="directory holding the four split files")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--variant", choices=VARIANTS, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--ablate", default=None, help="comma-separated ablation flags")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=METRICS, default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, UndefinedMetricError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (DataError, DimensionError, OSError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
