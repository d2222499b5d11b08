"""Encoder checkpoints: a named-tensor ``.npz`` archive plus a JSON sidecar.

Archive keys are prefixed by the owner: ``encoder/...``, ``decoder/...`` and
``optim/<param>/<state>``.  The sidecar holds the encoder config, its hash,
parameter count, epoch, global step and the seed bookkeeping needed to
resume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import Encoder, EncoderConfig, build_encoder
from .errors import IncompatibleCheckpointError

FORMAT = "sarmim-checkpoint/1"


def checkpoint_paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
    return base.with_suffix(".npz"), base.with_suffix(".json")


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


@dataclass
class EncoderCheckpoint:
    arrays: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, encoder: Encoder, decoder=None, optimizer=None, **meta) -> "EncoderCheckpoint":
        arrays = module_arrays(encoder, "encoder")
        if decoder is not None:
            arrays.update(module_arrays(decoder, "decoder"))
        if optimizer is not None:
            arrays.update(optimizer_arrays(optimizer))
        info = {
            "format": FORMAT,
            "tool_version": __version__,
            "config": encoder.cfg.to_dict(),
            "config_hash": encoder.cfg.config_hash(),
            "param_count": encoder.num_parameters(),
        }
        info.update(meta)
        return cls(arrays, info)

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.meta["config"])

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def section(self, prefix: str) -> dict:
        head = prefix + "/"
        return {k[len(head):]: v for k, v in self.arrays.items() if k.startswith(head)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + "/") for k in self.arrays)

    def save(self, path):
        npz, sidecar = checkpoint_paths(path)
        npz.parent.mkdir(parents=True, exist_ok=True)
        with open(npz, "wb") as fh:
            np.savez(fh, **self.arrays)
        sidecar.write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return npz

    @classmethod
    def load(cls, path) -> "EncoderCheckpoint":
        npz, sidecar = checkpoint_paths(path)
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if meta.get("format") != FORMAT:
            raise IncompatibleCheckpointError(f"{sidecar}: unknown checkpoint format {meta.get('format')!r}")
        with np.load(npz) as data:
            arrays = {k: data[k] for k in data.files}
        return cls(arrays, meta)

    def check_compatible(self, cfg: EncoderConfig):
        if self.meta.get("config_hash") != cfg.config_hash():
            raise IncompatibleCheckpointError(
                f"checkpoint config hash {self.meta.get('config_hash')} does not match encoder config "
                f"{cfg.config_hash()} ({self.meta.get('config')} vs {cfg.to_dict()})")

    def load_encoder(self, encoder: Encoder):
        """Copy encoder weights into ``encoder``; nothing is written unless every tensor matches."""
        self.check_compatible(encoder.cfg)
        load_module(encoder, self.section("encoder"), "encoder")

    def build_encoder(self) -> Encoder:
        enc = build_encoder(self.config)
        self.load_encoder(enc)
        return enc


def load_module(module: torch.nn.Module, arrays: dict, name="module"):
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise IncompatibleCheckpointError(f"{name}: missing {missing[:5]}, unexpected {unexpected[:5]}")
    bad = [k for k, v in state.items() if tuple(v.shape) != tuple(arrays[k].shape)]
    if bad:
        raise IncompatibleCheckpointError(
            f"{name}: shape mismatch for {bad[:5]} "
            f"(e.g. {tuple(state[bad[0]].shape)} vs {tuple(arrays[bad[0]].shape)})")
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})


def optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    names = getattr(optimizer, "param_names", None)
    for group_i, group in enumerate(optimizer.param_groups):
        for p_i, p in enumerate(group["params"]):
            key = names[id(p)] if names else f"g{group_i}.p{p_i}"
            for sk, sv in optimizer.state.get(p, {}).items():
                out[f"optim/{key}/{sk}"] = torch.as_tensor(sv).detach().cpu().numpy().copy()
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, arrays: dict):
    names = getattr(optimizer, "param_names", None)
    for group_i, group in enumerate(optimizer.param_groups):
        for p_i, p in enumerate(group["params"]):
            key = names[id(p)] if names else f"g{group_i}.p{p_i}"
            prefix = f"{key}/"
            state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            if not state:
                continue
            optimizer.state[p] = {k: torch.from_numpy(np.array(v)) for k, v in state.items()}
