"""Command-line surface.

Subcommands: synth-data, train, evaluate, ablate, gradcheck, report.
Every run writes a manifest (resolved config, seeds, artifact hashes) into
the output directory so it can be reproduced exactly. Exit codes: 0 on
success, 1 on validation/configuration errors, 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__, ablation, data, gradcheck, network, report, training
from .checkpoint import load_checkpoint
from .network import ConfigError


class CliParser(argparse.ArgumentParser):
    # validation problems (including unknown flags) exit 1, not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, resolved: dict, artifacts: dict[str, Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "resolved": resolved,
        "artifacts": {
            name: {"path": str(p), "sha256": _sha256(Path(p))}
            for name, p in artifacts.items() if Path(p).is_file()
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {"model", "train", "data"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config section: {sorted(unknown)[0]!r}")
    return cfg


def _model_config(args, file_cfg: dict) -> network.ModelConfig:
    preset_fn = network.PRESETS[args.preset]
    base = preset_fn().to_dict()
    base.update(file_cfg.get("model", {}))
    return network.ModelConfig.from_dict(base)


def _train_config(args, file_cfg: dict) -> training.TrainConfig:
    base = training.TrainConfig().to_dict()
    base.update(file_cfg.get("train", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    for key in ("batch_size", "max_iterations", "lr"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    return training.TrainConfig.from_dict(base)


def _data_spec(args, file_cfg: dict) -> data.SyntheticSpec:
    base = dataclasses.asdict(data.SyntheticSpec())
    base.update(file_cfg.get("data", {}))
    for key in ("num_samples", "num_classes", "image_size", "noise_sigma"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if args.seed is not None:
        base["seed"] = args.seed
    if "shapes_per_class" in base and isinstance(base["shapes_per_class"], list):
        base["shapes_per_class"] = tuple(base["shapes_per_class"])
    allowed = {f.name for f in dataclasses.fields(data.SyntheticSpec)}
    unknown = set(base) - allowed
    if unknown:
        raise ConfigError(f"unknown data config key: {sorted(unknown)[0]!r}")
    return data.SyntheticSpec(**base)


def build_parser() -> CliParser:
    parser = CliParser(prog="mipcnet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def common(p):
        p.add_argument("--config", help="JSON config file (sections: model/train/data)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=sorted(network.PRESETS), default="tiny")
        p.add_argument("--out", default="runs/latest", help="output directory")

    p = sub.add_parser("synth-data", help="generate a synthetic dataset folder")
    common(p)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = sub.add_parser("train", help="train on a dataset folder")
    common(p)
    p.add_argument("--data", required=False, help="dataset folder (pairs + manifest)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", dest="max_iterations", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset folder")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", help="run one ablation axis")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=sorted(set(ablation.AXES) | set(ablation.AXIS_ALIASES)))
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--iterations", dest="max_iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)

    p = sub.add_parser("report", help="re-emit tables and plot from saved results")
    common(p)
    p.add_argument("--table", required=True, help="results JSON from an ablate run")
    p.add_argument("--fmt", nargs="+", default=["markdown", "csv"],
                   choices=["markdown", "csv"])
    return parser


def cmd_synth_data(args) -> int:
    file_cfg = _load_config_file(args.config)
    spec = _data_spec(args, file_cfg)
    dataset = data.generate_synthetic(spec)
    out = Path(args.out)
    root = data.save_folder(dataset, out / "dataset")
    artifacts = {"manifest.json": root / "manifest.json"}
    write_manifest(out, "synth-data", {"data": dataclasses.asdict(spec)}, artifacts)
    print(f"wrote {len(dataset)} samples to {root}")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    if args.data is None:
        raise ConfigError("train requires --data (a dataset folder)")
    dataset = data.load_folder(args.data)
    out = Path(args.out)
    ckpt, log_obj = training.train(model_cfg, train_cfg, dataset, out_dir=out)
    report_obj = training.evaluate(ckpt, dataset)
    (out / "final_metrics.json").write_text(report_obj.to_json())
    artifacts = {
        "checkpoint": out / "checkpoint.zip",
        "train_log": out / "train_log.jsonl",
        "final_metrics": out / "final_metrics.json",
    }
    write_manifest(out, "train",
                   {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                    "data_folder": str(args.data)},
                   artifacts)
    print(f"final train-set mean dice {report_obj.mean_dice:.4f}, "
          f"mean hd {report_obj.mean_hd:.2f}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = data.load_folder(args.data)
    report_obj = training.evaluate(ckpt, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report_obj.to_json())
    (out / "metrics.md").write_text(report_obj.to_markdown() + "\n")
    write_manifest(out, "evaluate",
                   {"ckpt": str(args.ckpt), "data_folder": str(args.data)},
                   {"metrics": out / "metrics.json", "metrics_md": out / "metrics.md"})
    print(report_obj.to_markdown())
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    data_spec = _data_spec(args, file_cfg)
    seeds = tuple(args.seeds) if args.seeds else (0, 1, 2)
    spec = ablation.AblationSpec(
        axis=args.axis, base_model=model_cfg, base_train=train_cfg,
        data=data_spec, seeds=seeds,
    )
    out = Path(args.out)
    table = ablation.run_ablation(spec, out_dir=out)
    written = report.emit_report(table, out)
    artifacts = {"results": out / f"{table.axis}_results.json"}
    artifacts.update({f"table_{k}": v for k, v in written.items()})
    write_manifest(out, "ablate",
                   {"axis": table.axis, "model": model_cfg.to_dict(),
                    "train": train_cfg.to_dict(),
                    "data": dataclasses.asdict(data_spec), "seeds": list(seeds)},
                   artifacts)
    print(report.table_to_markdown(table))
    failed = [r for r in table.rows if r.status != "ok"]
    return 2 if failed else 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_full_suite(seed=seed)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} max rel err {r.max_rel_error:.3e}  [{status}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {r.name: r.max_rel_error for r in results}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2))
    write_manifest(out, "gradcheck", {"seed": seed, "tolerance": gradcheck.REL_TOL},
                   {"gradcheck": out / "gradcheck.json"})
    print(f"worst {worst:.3e} (tolerance {gradcheck.REL_TOL:.0e})")
    return 0 if worst <= gradcheck.REL_TOL else 2


def cmd_report(args) -> int:
    table_path = Path(args.table)
    if not table_path.exists():
        raise ConfigError(f"results file not found: {args.table}")
    table = ablation.ResultTable.load(table_path)
    out = Path(args.out)
    written = report.emit_report(table, out, formats=tuple(args.fmt))
    write_manifest(out, "report", {"table": str(table_path), "formats": args.fmt},
                   {k: v for k, v in written.items()})
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
