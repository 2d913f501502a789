"""Ablation grids: mutual inclusion on/off, block variant mixing, and
global-residue placement. Each cell trains and evaluates a config delta on
the shared synthetic dataset; cells are resumable through per-cell result
files keyed by config hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .attention import ALL_VARIANTS, parameter_count
from .data import Dataset, SyntheticSpec, generate_synthetic, split_dataset
from .network import ModelConfig, build_model
from .training import TrainConfig, evaluate, train, with_seed

AXES = ("mutual_inclusion", "mipc_variant", "gl_placement")
# paper-table aliases accepted on the CLI
AXIS_ALIASES = {"table4": "mutual_inclusion", "table5": "mipc_variant", "table6": "gl_placement"}

DISCLAIMER = "synthetic analog (desk-scale run, not paper numbers)"


@dataclass(frozen=True)
class AblationSpec:
    axis: str
    base_model: ModelConfig
    base_train: TrainConfig
    data: SyntheticSpec
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_fraction: float = 0.2

    def __post_init__(self):
        axis = AXIS_ALIASES.get(self.axis, self.axis)
        object.__setattr__(self, "axis", axis)
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES} (or table4/5/6), got {self.axis!r}")
        if not self.seeds:
            raise ValueError("at least one seed required")


def cells_for_axis(axis: str, base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    axis = AXIS_ALIASES.get(axis, axis)
    if axis == "mutual_inclusion":
        return [
            ("pc", dataclasses.replace(base, mutual_inclusion=False)),
            ("mipc", dataclasses.replace(base, mutual_inclusion=True)),
        ]
    if axis == "mipc_variant":
        return [
            (v.name, dataclasses.replace(base, mipc_variant=v, mutual_inclusion=True))
            for v in ALL_VARIANTS
        ]
    if axis == "gl_placement":
        cells = [
            (f"gl-{p}", dataclasses.replace(base, gl_placement=p))
            for p in ("none", "1", "2", "3", "all")
        ]
        cells.append((
            "baseline",
            dataclasses.replace(
                base, gl_placement="none", use_da_skips=False, use_encoder_mipc=False
            ),
        ))
        return cells
    raise ValueError(f"unknown axis {axis!r}")


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, data: SyntheticSpec) -> str:
    payload = json.dumps(
        {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "data": dataclasses.asdict(data),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class CellResult:
    name: str
    dsc_mean: float
    dsc_std: float
    hd_mean: float
    hd_std: float
    n_seeds: int
    param_count: int
    config_hash: str
    runtime_s: float
    status: str = "ok"

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ResultTable:
    axis: str
    rows: list[CellResult]
    disclaimer: str = DISCLAIMER
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "disclaimer": self.disclaimer,
            "rows": [r.as_dict() for r in self.rows],
            "notes": list(self.notes),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ResultTable":
        d = json.loads(Path(path).read_text())
        rows = [CellResult(**r) for r in d["rows"]]
        return cls(axis=d["axis"], rows=rows, disclaimer=d.get("disclaimer", DISCLAIMER),
                   notes=d.get("notes", []))


def _mean_std(values: list[float]) -> tuple[float, float]:
    import numpy as np

    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def _run_cell_seed(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    eval_set: Dataset,
    cache_path: Path | None,
    chash: str,
) -> dict:
    if cache_path is not None and cache_path.exists():
        cached = json.loads(cache_path.read_text())
        if cached.get("config_hash") == chash:
            return cached
    ckpt, _log = train(model_cfg, train_cfg, train_set)
    report = evaluate(ckpt, eval_set)
    result = {"config_hash": chash, "dice": report.mean_dice, "hd": report.mean_hd}
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps(result))
    return result


def run_ablation(spec: AblationSpec, out_dir: str | Path | None = None) -> ResultTable:
    """Train and evaluate every cell x seed of the chosen axis.

    The synthetic dataset is generated once and split with a fixed seed, so
    every cell sees identical data; a failed cell is recorded in its row
    and the remaining cells still run.
    """
    dataset = generate_synthetic(spec.data)
    train_set, eval_set = split_dataset(dataset, spec.eval_fraction, seed=spec.data.seed)
    rows: list[CellResult] = []
    cache_root = Path(out_dir) / "cells" if out_dir is not None else None
    for name, model_cfg in cells_for_axis(spec.axis, spec.base_model):
        start = time.perf_counter()
        dices: list[float] = []
        hds: list[float] = []
        chash = ""
        status = "ok"
        params = parameter_count(build_model(model_cfg, seed=0))
        try:
            for seed in spec.seeds:
                t_cfg = with_seed(spec.base_train, seed)
                chash = config_hash(model_cfg, t_cfg, spec.data)
                cache = (
                    cache_root / f"{spec.axis}_{name}_seed{seed}.json"
                    if cache_root is not None else None
                )
                result = _run_cell_seed(model_cfg, t_cfg, train_set, eval_set, cache, chash)
                dices.append(result["dice"])
                hds.append(result["hd"])
        except Exception as e:  # cell isolation: record and continue
            status = f"failed: {type(e).__name__}: {e}"
            traceback.print_exc()
        if dices:
            dsc_mean, dsc_std = _mean_std(dices)
            hd_mean, hd_std = _mean_std(hds)
        else:
            dsc_mean = dsc_std = hd_mean = hd_std = float("nan")
        rows.append(CellResult(
            name=name, dsc_mean=dsc_mean, dsc_std=dsc_std,
            hd_mean=hd_mean, hd_std=hd_std, n_seeds=len(dices),
            param_count=params, config_hash=chash,
            runtime_s=time.perf_counter() - start, status=status,
        ))
    table = ResultTable(axis=spec.axis, rows=rows,
                        notes=[f"seeds={list(spec.seeds)}",
                               f"data=synthetic(n={spec.data.num_samples}, "
                               f"K={spec.data.num_classes}, size={spec.data.image_size})"])
    if out_dir is not None:
        table.save(Path(out_dir) / f"{spec.axis}_results.json")
    return table
