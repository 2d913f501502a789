"""Model checkpoint archive: format tag, config JSON and parameter arrays.

A checkpoint is a single zip holding `format.txt` ("mipcnet-ckpt-v1"),
`config.json` (the serialised model config) and `params.npz` with every
parameter *and* buffer keyed by its hierarchical state-dict name, dtypes
preserved, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .network import MipcNet, ModelConfig, build_model

FORMAT_TAG = "mipcnet-ckpt-v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: MipcNet) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model_config=model.cfg, state=state)

    def build(self) -> MipcNet:
        model = build_model(self.model_config, seed=0)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **ckpt.state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("format.txt", FORMAT_TAG)
        zf.writestr("config.json", ckpt.model_config.to_json())
        zf.writestr("params.npz", buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        if "format.txt" not in names:
            raise CheckpointError(f"{path} is not a model checkpoint (no format tag)")
        tag = zf.read("format.txt").decode().strip()
        if tag != FORMAT_TAG:
            raise CheckpointError(f"unsupported checkpoint format {tag!r}, expected {FORMAT_TAG!r}")
        cfg = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        with np.load(io.BytesIO(zf.read("params.npz"))) as arrays:
            state = {k: arrays[k].copy() for k in arrays.files}
    return Checkpoint(model_config=cfg, state=state)
