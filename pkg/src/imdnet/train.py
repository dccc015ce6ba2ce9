"""Training loop, learning-rate schedule, checkpoints and ablation runs."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .degradation import SamplePair, full_pyramids, sample_batch
from .errors import ConfigError, NonFiniteLossError
from .losses import LossWeights, mean_abs_cosine, network_loss
from .metrics import psnr, restore
from .network import VARIANTS, IMDNet, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 2000
    batch: int = 8
    patch: int = 64
    seed: int = 0
    ablation_variant: str = "full"
    augment: bool = True
    log_every: int = 50
    ckpt_every: int = 500
    grad_clip: Optional[float] = None
    freeze_fusion_weight: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr_final < self.lr_init:
            raise ConfigError("lr_final must be smaller than lr_init")
        if self.patch % 8:
            raise ConfigError(f"patch {self.patch} is not divisible by 8")
        if self.iterations < 0 or self.batch < 1:
            raise ConfigError("iterations must be >= 0 and batch >= 1")
        if self.ablation_variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.ablation_variant!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PROFILES = {
    "desk": {},
    "fullscale": {"iterations": 400_000, "batch": 32, "patch": 256},
}


def cosine_lr(step: int, total: int, lr_init: float = 2e-4, lr_final: float = 1e-7) -> float:
    if total <= 0 or step >= total:
        return lr_final
    step = max(step, 0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total))


def deterministic_mode() -> bool:
    return os.environ.get("IMDNET_DETERMINISTIC", "0") == "1"


def configure_determinism() -> None:
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns the model, the Adam state and the step counter.

    Batches are drawn from a generator seeded by ``(seed, step)``, so a run
    resumed from a checkpoint sees exactly the batches it would have seen.
    """

    def __init__(self, cfg: TrainConfig, model_cfg: ModelConfig,
                 dataset: Sequence[SamplePair], weights: LossWeights = LossWeights(),
                 log_path=None, ckpt_dir=None):
        configure_determinism()
        self.cfg = cfg
        self.model_cfg = model_cfg.replace(variant=cfg.ablation_variant)
        self.dataset = dataset
        self.weights = weights
        self.log_path = Path(log_path) if log_path else None
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        torch.manual_seed(cfg.seed)
        self.model = IMDNet(self.model_cfg)
        if cfg.freeze_fusion_weight:
            for fb in self.model.fusers:
                if hasattr(fb, "weight"):
                    fb.weight.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.trainable(), lr=cfg.lr_init,
                                          betas=(cfg.beta1, cfg.beta2))
        self.step = 0
        self.history: List[dict] = []

    def trainable(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def batch_for(self, step: int):
        rng = np.random.default_rng([self.cfg.seed, step])
        return sample_batch(self.dataset, self.cfg.patch, self.cfg.batch, self.cfg.augment,
                            rng, self.model_cfg.scales)

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.cfg.iterations, self.cfg.lr_init, self.cfg.lr_final)

    def train_step(self) -> dict:
        self.model.train()
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        degraded, clean = self.batch_for(self.step)
        out = self.model(degraded)
        report = network_loss(out, clean, self.weights)
        if not torch.isfinite(report.total):
            self._abort(report, out)
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.trainable(), self.cfg.grad_clip)
        self.optimizer.step()
        record = report.as_record(step=self.step, lr=lr)
        record["mean_abs_cosine"] = report.raw.get("mean_abs_cosine", 0.0)
        self.history.append(record)
        self.step += 1
        return record

    def _abort(self, report, out):
        rng = np.random.default_rng([self.cfg.seed, self.step])
        indices = [int(rng.integers(len(self.dataset))) for _ in range(self.cfg.batch)]
        diag = {"step": self.step, "batch_indices": indices,
                "per_term": report.per_term,
                "gate_weights": [g.detach().tolist() for g in out.gate_log]}
        if self.ckpt_dir:
            self.ckpt_dir.mkdir(parents=True, exist_ok=True)
            (self.ckpt_dir / f"nonfinite_step{self.step}.json").write_text(json.dumps(diag))
        raise NonFiniteLossError(f"non-finite loss at step {self.step}", diag)

    def run(self, until: Optional[int] = None) -> "Trainer":
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            while self.step < until:
                record = self.train_step()
                step = self.step
                if log_fh and (step % self.cfg.log_every == 0 or step == until):
                    log_fh.write(json.dumps({k: record[k] for k in (
                        "step", "total", "charbonnier", "edge", "frequency", "decouple", "lr")})
                        + "\n")
                    log_fh.flush()
                if self.ckpt_dir and self.cfg.ckpt_every and step % self.cfg.ckpt_every == 0:
                    self.save(self.ckpt_dir / f"step{step:07d}.safetensors")
        finally:
            if log_fh:
                log_fh.close()
        if self.ckpt_dir:
            self.save(self.ckpt_dir / "final.safetensors")
        return self

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.step, self.model_cfg, self.cfg)

    @classmethod
    def resume(cls, path, dataset, weights: LossWeights = LossWeights(), **kw) -> "Trainer":
        ck = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ck.train_config), ModelConfig.from_dict(ck.model_config),
                      dataset, weights, **kw)
        ck.apply(trainer.model, trainer.optimizer)
        trainer.step = ck.step
        return trainer


def train(cfg: TrainConfig, model_cfg: ModelConfig, data: Sequence[SamplePair],
          weights: LossWeights = LossWeights(), **kw) -> Trainer:
    return Trainer(cfg, model_cfg, data, weights, **kw).run()


# ---------------------------------------------------------------------------
# evaluation helpers used by the ablation harness
# ---------------------------------------------------------------------------


def mean_psnr(model, pairs: Sequence[SamplePair], mode: str = "rgb") -> float:
    restored = restore(model, pairs)
    return float(np.mean([psnr(r, p.clean, mode) for r, p in zip(restored, pairs)]))


@torch.no_grad()
def pairs_abs_cosine(model, pairs: Sequence[SamplePair]) -> float:
    model.eval()
    d_pyr, _ = full_pyramids(pairs, model.cfg.scales)
    return mean_abs_cosine(model(d_pyr))


def _eval_pairs(test_pairs):
    if isinstance(test_pairs, dict):
        return [p for v in test_pairs.values() for p in v]
    return list(test_pairs)


def run_ablation(variants: Sequence[str], cfg: TrainConfig, model_cfg: ModelConfig,
                 data: Sequence[SamplePair], test_pairs, weights: LossWeights = LossWeights()):
    """Train each variant with identical data and seed; PSNR on
    ``test_pairs`` and the gain over the first (baseline) row."""
    if len(variants) < 1:
        raise ConfigError("need at least one variant")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}")
    pairs = _eval_pairs(test_pairs)
    rows = []
    for v in variants:
        t = train(dataclasses.replace(cfg, ablation_variant=v), model_cfg, data, weights)
        rows.append({"variant": v, "seed": cfg.seed, "psnr": mean_psnr(t.model, pairs)})
    base = next((r["psnr"] for r in rows if r["variant"] == "baseline"), rows[0]["psnr"])
    for r in rows:
        r["delta_psnr"] = r["psnr"] - base
    return rows


def run_skip_ablation(cfg: TrainConfig, model_cfg: ModelConfig, data, test_pairs,
                      weights: LossWeights = LossWeights()):
    pairs = _eval_pairs(test_pairs)
    rows = []
    for skip in ("e", "cf"):
        t = train(dataclasses.replace(cfg, ablation_variant="full"),
                  model_cfg.replace(skip=skip), data, weights)
        rows.append({"skip": skip, "seed": cfg.seed, "psnr": mean_psnr(t.model, pairs)})
    return rows


def run_fusion_ablation(cfg: TrainConfig, model_cfg: ModelConfig, data, test_pairs,
                        weights: LossWeights = LossWeights()):
    pairs = _eval_pairs(test_pairs)
    rows = []
    for mode in ("sum", "concat", "fblock"):
        t = train(dataclasses.replace(cfg, ablation_variant="full"),
                  model_cfg.replace(fusion=mode), data, weights)
        rows.append({"fusion": mode, "seed": cfg.seed, "psnr": mean_psnr(t.model, pairs)})
    return rows


def median_over_seeds(rows: Sequence[dict], key: str) -> Dict[str, float]:
    groups: Dict[str, List[float]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["psnr"])
    return {k: statistics.median(v) for k, v in groups.items()}
