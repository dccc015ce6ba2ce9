"""PSNR / SSIM, seven-combo result tables, gate heatmaps and embedding
probes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .degradation import COMBOS, SamplePair, full_pyramids
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

_LUMA = (0.299, 0.587, 0.114)


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    t = t.to(torch.float64)
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(t.shape)}")
    return t


def to_luma(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != 3:
        raise ShapeError("luma conversion needs 3 channels")
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def _prepare(pred, target, mode):
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    if mode not in ("rgb", "y"):
        raise ConfigError(f"unknown metric mode {mode!r}")
    p, t = p.clamp(0.0, 1.0), t.clamp(0.0, 1.0)
    if mode == "y":
        p, t = to_luma(p), to_luma(t)
    return p, t


def psnr(pred, target, mode: str = "rgb") -> float:
    """PSNR in dB for data range 1.  Identical inputs give ``inf``.
    Batched inputs are averaged per image."""
    p, t = _prepare(pred, target, mode)
    mse = ((p - t) ** 2).flatten(1).mean(1)
    vals = [math.inf if m == 0 else 10.0 * math.log10(1.0 / m) for m in mse.tolist()]
    return float(np.mean(vals))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred, target, mode: str = "rgb", win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM over valid windows, channel mean, batch mean."""
    p, t = _prepare(pred, target, mode)
    if min(p.shape[-2:]) < win_size:
        raise ShapeError(f"SSIM needs spatial dims >= {win_size}")
    c = p.shape[1]
    w = gaussian_window(win_size, sigma).to(p).expand(c, 1, win_size, win_size)

    def filt(x):
        return F.conv2d(x, w, groups=c)

    c1, c2 = k1**2, k2**2
    mu_p, mu_t = filt(p), filt(t)
    var_p = filt(p * p) - mu_p**2
    var_t = filt(t * t) - mu_t**2
    cov = filt(p * t) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float((num / den).mean())


@dataclass
class MetricResult:
    combo: str
    psnr_db: float
    ssim: float
    n_images: int


def _finite_mean(values, what):
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) < len(values):
        log.warning("%s: %d infinite PSNR value(s) excluded from the mean",
                    what, len(values) - len(finite))
    return float(np.mean(finite)) if finite else math.inf


@torch.no_grad()
def restore(model, pairs: Sequence[SamplePair], batch: int = 8) -> List[np.ndarray]:
    """Full-scale restored images, clipped to [0, 1]."""
    model.eval()
    outs = []
    for k in range(0, len(pairs), batch):
        d_pyr, _ = full_pyramids(pairs[k:k + batch], model.cfg.scales)
        outs.extend(model(d_pyr).restored[0].clamp(0.0, 1.0).numpy())
    return outs


def evaluate_suite(model, suite: Mapping[str, Sequence[SamplePair]], mode: str = "rgb",
                   combos: Sequence[str] = COMBOS, batch: int = 8) -> List[MetricResult]:
    """Per-combo mean PSNR/SSIM on the full-scale output plus an
    ``Average`` row (mean of the combo rows)."""
    missing = [c for c in combos if c not in suite]
    if missing:
        raise ConfigError(f"suite is missing combos {missing}")
    rows = []
    for combo in combos:
        pairs = suite[combo]
        restored = restore(model, pairs, batch)
        ps = [psnr(r, p.clean, mode) for r, p in zip(restored, pairs)]
        ss = [ssim(r, p.clean, mode) for r, p in zip(restored, pairs)]
        rows.append(MetricResult(combo, _finite_mean(ps, combo), float(np.mean(ss)), len(pairs)))
    avg = MetricResult("Average", _finite_mean([r.psnr_db for r in rows], "Average"),
                       float(np.mean([r.ssim for r in rows])), sum(r.n_images for r in rows))
    return rows + [avg]


def write_results_csv(path, rows: Sequence[MetricResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["combo", "psnr", "ssim", "n"])
        for r in rows:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.4f}"
            w.writerow([r.combo, p, f"{r.ssim:.6f}", r.n_images])


def format_table(rows: Sequence[MetricResult]) -> str:
    lines = [f"{'combo':<8} {'PSNR':>8} {'SSIM':>7} {'n':>5}"]
    for r in rows:
        lines.append(f"{r.combo:<8} {r.psnr_db:8.3f} {r.ssim:7.4f} {r.n_images:5d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@torch.no_grad()
def gate_matrix(model, suite: Mapping[str, Sequence[SamplePair]],
                combos: Sequence[str] = COMBOS, batch: int = 8) -> np.ndarray:
    """Mean gate weight per combo (rows) and gated branch (columns); the
    columns run over TABlocks in decoder order, branches within a block."""
    model.eval()
    rows = []
    for combo in combos:
        pairs = suite[combo]
        acc, n = None, 0
        for k in range(0, len(pairs), batch):
            d_pyr, _ = full_pyramids(pairs[k:k + batch], model.cfg.scales)
            gates = model(d_pyr).gate_log
            flat = torch.cat([g.to(torch.float64) for g in gates], dim=1) if gates else \
                torch.zeros(d_pyr[0].shape[0], 0, dtype=torch.float64)
            s = flat.sum(0)
            acc = s if acc is None else acc + s
            n += flat.shape[0]
        rows.append((acc / n).numpy())
    return np.stack(rows)


def branch_labels(model) -> List[str]:
    labels = []
    for b, blk in enumerate(model.tab_blocks()):
        labels.extend(f"tab{b}.branch{k + 1}" for k in range(blk.n_branches))
    return labels


def export_gate_heatmap(model, suite, csv_path=None, png_path=None,
                        combos: Sequence[str] = COMBOS) -> np.ndarray:
    mat = gate_matrix(model, suite, combos)
    labels = branch_labels(model)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["combo"] + labels)
            for combo, row in zip(combos, mat):
                w.writerow([combo] + [f"{v:.6f}" for v in row])
    if png_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(max(4, 0.35 * mat.shape[1] + 2), 3.5))
        im = ax.imshow(mat, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_yticks(range(len(combos)), combos)
        ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
    return mat


@torch.no_grad()
def suite_embeddings(model, suite, combos: Sequence[str] = COMBOS, batch: int = 8):
    model.eval()
    vecs, labels = [], []
    for ci, combo in enumerate(combos):
        pairs = suite[combo]
        for k in range(0, len(pairs), batch):
            d_pyr, _ = full_pyramids(pairs[k:k + batch], model.cfg.scales)
            v = model.extract_embeddings(d_pyr).numpy()
            vecs.append(v)
            labels.extend([ci] * len(v))
    return np.concatenate(vecs), np.asarray(labels)


def probe_embeddings(vectors, labels, seed: int = 0, test_size: float = 0.2) -> float:
    """Held-out accuracy of a multinomial logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < 2:
        raise ValueError(f"class {classes[counts.argmin()]} has fewer than 2 samples")
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_size, random_state=seed,
                                              stratify=y)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    clf.fit(x_tr, y_tr)
    return float((clf.predict(x_te) == y_te).mean())
