"""Deterministic SGD trainer: classical momentum with coupled weight decay,
iteration-based budget, periodic evaluation and checkpointing.

Update rule per step: g' = g + weight_decay * theta; v <- momentum * v + g';
theta <- theta - lr * v. Steps with non-finite gradients are skipped and
logged; ten consecutive non-finite losses abort the run.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint
from .data import Dataset, Sample, augment, preprocess
from .losses import combined_loss
from .metrics import MetricsReport, aggregate_reports, per_class_report
from .network import ConfigError, ModelConfig, build_model

LR_SCHEDULES = ("constant", "poly")
POLY_POWER = 0.9
MAX_CONSECUTIVE_NAN = 10


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 24
    max_iterations: int = 1000
    seed: int = 0
    lr_schedule: str = "constant"
    eval_every: int = 0                 # 0 disables periodic evaluation
    shuffle: bool = True
    augment: bool = False
    target_dice: float | None = None    # early stop once periodic eval reaches it

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_iterations < 1:
            raise ConfigError("lr, batch_size and max_iterations must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "max_iterations": self.max_iterations,
            "seed": self.seed, "lr_schedule": self.lr_schedule, "eval_every": self.eval_every,
            "shuffle": self.shuffle, "augment": self.augment, "target_dice": self.target_dice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown train config key: {sorted(unknown)[0]!r}")
        return cls(**d)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "poly":
        frac = 1.0 - iteration / cfg.max_iterations
        return cfg.lr * max(0.0, frac) ** POLY_POWER
    return cfg.lr


def sgd_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict[str, torch.Tensor],
    cfg: TrainConfig,
    lr: float | None = None,
) -> bool:
    """One in-place momentum-SGD update; returns False (skipping the
    parameter update) when any gradient is non-finite. Velocity state is
    created on first use and always accumulates, even at lr = 0."""
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if g is None:
            continue
        if not bool(torch.isfinite(g).all()):
            return False
    with torch.no_grad():
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != param {tuple(p.shape)} for {name}")
            adjusted = g + cfg.weight_decay * p
            v = state.get(name)
            if v is None:
                v = torch.zeros_like(p)
                state[name] = v
            v.mul_(cfg.momentum).add_(adjusted)
            p.add_(v, alpha=-lr)
    return True


@dataclass
class TrainLog:
    model_config: dict
    train_config: dict
    version: str = __version__
    records: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r["kind"] == "iteration"]

    def add_iteration(self, iteration: int, loss: float, lr: float, skipped: bool = False) -> None:
        self.records.append({
            "kind": "iteration", "iteration": iteration, "loss": loss,
            "lr": lr, "skipped": skipped,
        })

    def add_eval(self, iteration: int, report: MetricsReport) -> None:
        self.records.append({
            "kind": "eval", "iteration": iteration,
            "mean_dice": report.mean_dice, "mean_hd": report.mean_hd,
            "report": report.as_dict(),
        })

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            header = {
                "kind": "header", "version": self.version,
                "model_config": self.model_config, "train_config": self.train_config,
                "wall_time_s": self.wall_time_s,
            }
            f.write(json.dumps(header) + "\n")
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")
        return path


def _stack_batch(samples: list[Sample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    labels = torch.from_numpy(np.stack([s.label for s in samples])).long()
    return images, labels


def _batch_order(n: int, batch_size: int, epoch: int, cfg: TrainConfig) -> list[list[int]]:
    idx = np.arange(n)
    if cfg.shuffle:
        idx = np.random.default_rng((cfg.seed, epoch)).permutation(n)
    # drop-last: a trailing partial batch is discarded
    full = (n // batch_size) * batch_size
    return [idx[i : i + batch_size].tolist() for i in range(0, full, batch_size)]


def predict_labels(model, dataset: Dataset, input_size: int) -> list[np.ndarray]:
    """Per-case argmax label maps in sorted-id order (eval mode)."""
    model.eval()
    out = []
    with torch.no_grad():
        for s in sorted(dataset, key=lambda s: s.id):
            prepped = preprocess(s, input_size)
            image, _ = _stack_batch([prepped])
            logits = model(image)
            out.append(logits.argmax(dim=1)[0].numpy().astype(np.int64))
    return out


def evaluate_model(model, dataset: Dataset) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cfg: ModelConfig = model.cfg
    max_label = max(int(s.label.max()) for s in dataset)
    if max_label >= cfg.num_classes:
        raise ValueError(
            f"dataset labels reach {max_label} but the checkpoint has "
            f"{cfg.num_classes} classes"
        )
    ordered = sorted(dataset, key=lambda s: s.id)
    preds = predict_labels(model, dataset, cfg.input_size)
    names = {k: n for k, n in enumerate(dataset.class_names)} if dataset.class_names else None
    reports = []
    for s, pred in zip(ordered, preds):
        gt = preprocess(s, cfg.input_size).label
        reports.append(per_class_report(pred, gt, cfg.num_classes, spacing=s.spacing,
                                        class_names=names))
    return aggregate_reports(reports)


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> MetricsReport:
    """Deterministic evaluation of a checkpoint over sorted case ids."""
    return evaluate_model(ckpt.build(), dataset)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Seeded end-to-end training; returns the final checkpoint and log.

    Evaluation (when `eval_every` > 0) runs on `eval_dataset`, defaulting
    to the training set. With `out_dir` set, the checkpoint and the
    JSON-lines log are written there.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train_cfg.batch_size > len(dataset):
        raise ConfigError(
            f"batch_size {train_cfg.batch_size} exceeds dataset size {len(dataset)}"
        )
    seed_everything(train_cfg.seed)
    model = build_model(model_cfg, seed=train_cfg.seed)
    prepped = [preprocess(s, model_cfg.input_size) for s in dataset]
    base = Dataset(prepped, dataset.num_classes, dataset.class_names)
    eval_set = eval_dataset if eval_dataset is not None else dataset

    params = dict(model.named_parameters())
    velocity: dict[str, torch.Tensor] = {}
    log_obj = TrainLog(model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict())
    start = time.perf_counter()
    nan_streak = 0
    iteration = 0
    epoch = 0
    stop = False
    while not stop:
        for batch_idx in _batch_order(len(base), train_cfg.batch_size, epoch, train_cfg):
            if iteration >= train_cfg.max_iterations:
                stop = True
                break
            batch = [base[i] for i in batch_idx]
            if train_cfg.augment:
                batch = [augment(s, seed=train_cfg.seed, epoch=epoch) for s in batch]
            images, labels = _stack_batch(batch)
            model.train()
            loss = combined_loss(model(images), labels)
            lr = learning_rate(train_cfg, iteration)
            if not bool(torch.isfinite(loss)):
                nan_streak += 1
                log_obj.add_iteration(iteration, float("nan"), lr, skipped=True)
                if nan_streak >= MAX_CONSECUTIVE_NAN:
                    raise TrainingDiverged(
                        f"loss non-finite for {MAX_CONSECUTIVE_NAN} consecutive "
                        f"iterations (last at iteration {iteration})"
                    )
                iteration += 1
                continue
            nan_streak = 0
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            stepped = sgd_step(params, grads, velocity, train_cfg, lr=lr)
            log_obj.add_iteration(iteration, float(loss), lr, skipped=not stepped)
            iteration += 1
            if train_cfg.eval_every and iteration % train_cfg.eval_every == 0:
                report = evaluate_model(model, eval_set)
                log_obj.add_eval(iteration, report)
                if train_cfg.target_dice is not None and report.mean_dice >= train_cfg.target_dice:
                    stop = True
                    break
        epoch += 1
    log_obj.wall_time_s = time.perf_counter() - start
    ckpt = Checkpoint.from_model(model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .checkpoint import save_checkpoint

        save_checkpoint(ckpt, out / "checkpoint.zip")
        log_obj.save(out / "train_log.jsonl")
    return ckpt, log_obj


def smoke_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """Overfit fixture settings: 8 samples, batch 4, fixed batch order."""
    base = dict(
        lr=0.01, momentum=0.9, weight_decay=1e-4, batch_size=4,
        max_iterations=1200, seed=seed, shuffle=False, eval_every=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
