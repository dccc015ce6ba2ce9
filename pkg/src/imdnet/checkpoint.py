"""Checkpoint container.

A checkpoint is a safetensors file holding a flat name -> tensor map:

* ``params.<module path>``            model parameters and buffers
* ``optim.<module path>.<slot>``      Adam slots (``step``, ``exp_avg``, ``exp_avg_sq``)
* ``rng.torch``                       torch CPU generator state

plus one metadata entry ``imdnet`` containing sorted-key JSON with the
format tag, version, step and both configs.  Module paths follow
``encoder.level{l}.block{b}.<submodule>``, so variants that share a prefix
can be partially loaded.  A human-readable YAML copy of the configs is
written next to every checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import torch
import yaml
from safetensors.torch import load_file, save_file

FORMAT = "imdnet-checkpoint"
VERSION = 1
_SLOTS = ("step", "exp_avg", "exp_avg_sq")


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, torch.Tensor]
    step: int
    model_config: dict
    train_config: dict
    rng_state: torch.Tensor = None
    extra: dict = field(default_factory=dict)

    def apply(self, model, optimizer=None) -> None:
        load_params(model, self.params, strict=True)
        if optimizer is not None and self.optimizer_state:
            _load_optimizer(model, optimizer, self.optimizer_state)
        if self.rng_state is not None:
            torch.set_rng_state(self.rng_state)


def model_params(model) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}


def load_params(model, params: Dict[str, torch.Tensor], strict: bool = False):
    """Copy matching tensors into ``model``; returns (missing, unexpected)."""
    result = model.load_state_dict(params, strict=strict)
    return list(result.missing_keys), list(result.unexpected_keys)


def _optimizer_tensors(model, optimizer) -> Dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            for slot in _SLOTS:
                if slot in state:
                    t = state[slot]
                    t = t if torch.is_tensor(t) else torch.tensor(float(t))
                    out[f"{names[id(p)]}.{slot}"] = t.detach().clone().contiguous()
    return out


def _load_optimizer(model, optimizer, tensors) -> None:
    by_name = dict(model.named_parameters())
    for name, p in by_name.items():
        slots = {s: tensors[f"{name}.{s}"] for s in _SLOTS if f"{name}.{s}" in tensors}
        if slots:
            optimizer.state[p] = {k: v.clone() for k, v in slots.items()}


def save_checkpoint(path, model, optimizer, step: int, model_config, train_config,
                    extra: dict = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"params.{k}": v for k, v in model_params(model).items()}
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in _optimizer_tensors(model, optimizer).items()})
    tensors["rng.torch"] = torch.get_rng_state().clone()
    meta = {"format": FORMAT, "version": VERSION, "step": int(step),
            "model_config": model_config.to_dict(), "train_config": train_config.to_dict(),
            "extra": extra or {}}
    save_file(tensors, str(path), metadata={"imdnet": _canonical_json(meta)})
    with open(path.with_suffix(".yaml"), "w") as fh:
        yaml.safe_dump({"step": int(step), "model": meta["model_config"],
                        "train": meta["train_config"]}, fh, sort_keys=True)


def read_metadata(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads(fh.metadata()["imdnet"])
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not an imdnet checkpoint")
    if meta.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path) -> Checkpoint:
    meta = read_metadata(path)
    tensors = load_file(str(path))
    params = {k[len("params."):]: v for k, v in tensors.items() if k.startswith("params.")}
    optim = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    return Checkpoint(params, optim, meta["step"], meta["model_config"], meta["train_config"],
                      tensors.get("rng.torch"), meta.get("extra", {}))


def load_model(path):
    """Rebuild the network stored in a checkpoint (eval mode)."""
    from .network import IMDNet, ModelConfig

    ck = load_checkpoint(path)
    model = IMDNet(ModelConfig.from_dict(ck.model_config))
    load_params(model, ck.params, strict=True)
    return model.eval()
