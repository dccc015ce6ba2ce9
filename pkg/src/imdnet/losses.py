"""Multi-scale restoration objective: Charbonnier, Laplacian edge, Fourier
L1 and a cosine decoupling penalty between clean and degradation features."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

EPS = 1e-3
COSINE_KAPPA = 1e-8
TERMS = ("charbonnier", "edge", "frequency", "decouple")


@dataclass
class LossWeights:
    lambda_f: float = 0.1  # frequency
    delta_e: float = 0.05  # edge
    gamma_d: float = 0.001  # decoupling
    epsilon: float = 1e-3  # Charbonnier constant

    def __post_init__(self):
        if min(self.lambda_f, self.delta_e, self.gamma_d, self.epsilon) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossReport:
    """``total`` keeps the graph.  ``per_term`` holds weighted contributions,
    so its values sum to ``total``; ``per_scale`` is ordered full scale first
    and also sums to ``total``."""

    total: torch.Tensor
    per_term: Dict[str, float]
    per_scale: List[float]
    raw: Dict[str, float] = field(default_factory=dict)

    def as_record(self, **extra) -> dict:
        rec = dict(extra)
        rec["total"] = self.total.item()
        rec.update(self.per_term)
        return rec


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def charbonnier(pred, target, eps: float = EPS):
    """mean(sqrt(d^2 + eps^2)), evaluated as eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps))
    so that identical inputs give exactly ``eps``."""
    _check_pair(pred, target)
    sq = (pred - target) ** 2
    return eps + (sq / (torch.sqrt(sq + eps * eps) + eps)).mean()


def laplacian(x):
    """4-neighbour Laplacian per channel with reflect padding."""
    c = x.shape[1]
    k = x.new_tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    k = k.view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k, groups=c)


def edge_loss(pred, target, eps: float = EPS):
    _check_pair(pred, target)
    if pred.shape[-1] < 3 or pred.shape[-2] < 3:
        raise ShapeError("edge loss needs spatial dims >= 3")
    return charbonnier(laplacian(pred), laplacian(target), eps)


def frequency_loss(pred, target):
    """Mean over pixels of |dRe| + |dIm| between the 2-D DFTs."""
    _check_pair(pred, target)
    diff = torch.view_as_real(torch.fft.fft2(pred) - torch.fft.fft2(target))
    return diff.abs().sum(dim=-1).mean()


def decouple_loss(cf, di, kappa: float = COSINE_KAPPA):
    """Per-sample cosine similarity of the flattened tensors, batch mean."""
    if cf.shape != di.shape:
        raise ShapeError(f"CF {tuple(cf.shape)} and DI {tuple(di.shape)} differ")
    a, b = cf.flatten(1), di.flatten(1)
    cos = (a * b).sum(1) / (a.norm(dim=1) * b.norm(dim=1) + kappa)
    return cos.mean()


def _scale_of(tensor, scale_sizes):
    size = tuple(tensor.shape[-2:])
    if size in scale_sizes:
        return scale_sizes.index(size)
    return len(scale_sizes) - 1


def total_loss(restored: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
               pairs: Sequence[Tuple[torch.Tensor, torch.Tensor]] = (),
               weights: LossWeights = LossWeights()) -> LossReport:
    """Sum over scales of Lc + delta*Le + lambda*Lf, plus gamma times the
    decoupling cosine summed over every (CF, DI) pair.

    Each decoupling term is booked to the output scale matching its spatial
    size (deeper ones to the coarsest scale), so ``per_scale`` sums to the
    total.
    """
    if len(restored) != len(targets):
        raise ConfigError(f"{len(restored)} outputs for {len(targets)} targets")
    sizes = [tuple(t.shape[-2:]) for t in targets]
    per_scale = [None] * len(targets)
    terms = {k: [] for k in TERMS}
    for i, (pred, tgt) in enumerate(zip(restored, targets)):
        lc = charbonnier(pred, tgt, weights.epsilon)
        le = edge_loss(pred, tgt, weights.epsilon)
        lf = frequency_loss(pred, tgt)
        terms["charbonnier"].append(lc)
        terms["edge"].append(weights.delta_e * le)
        terms["frequency"].append(weights.lambda_f * lf)
        per_scale[i] = lc + weights.delta_e * le + weights.lambda_f * lf
    raw_cos = []
    for cf, di in pairs:
        ld = decouple_loss(cf, di)
        raw_cos.append(ld)
        contribution = weights.gamma_d * ld
        terms["decouple"].append(contribution)
        k = _scale_of(cf, sizes)
        per_scale[k] = per_scale[k] + contribution
    total = per_scale[0]
    for s in per_scale[1:]:
        total = total + s
    per_term = {k: sum(v.item() for v in vals) for k, vals in terms.items()}
    raw = {"mean_abs_cosine": sum(abs(c.item()) for c in raw_cos) / len(raw_cos)
           if raw_cos else 0.0}
    return LossReport(total, per_term, [s.item() for s in per_scale], raw)


def network_loss(output, clean_pyramid, weights: LossWeights = LossWeights()) -> LossReport:
    return total_loss(output.restored, clean_pyramid, output.decoupling_pairs(), weights)


def mean_abs_cosine(output) -> float:
    pairs = output.decoupling_pairs()
    if not pairs:
        return 0.0
    with torch.no_grad():
        return float(sum(abs(float(decouple_loss(cf, di))) for cf, di in pairs) / len(pairs))


def weights_dict(w: LossWeights) -> dict:
    return asdict(w)
