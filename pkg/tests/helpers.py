"""Shared oracles for the test suite."""

import numpy as np
import torch

from imdnet.blocks import initialize


def fd_check(fn, inputs, h=1e-3, seed=0, params=()):
    """Relative error between the autograd directional derivative of a
    random projection of ``fn(*inputs)`` and its central difference.

    Directions are drawn for every input and every tensor in ``params``.
    """
    g = torch.Generator().manual_seed(seed)
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    proj = torch.randn(out.shape, generator=g, dtype=out.dtype)
    params = list(params)
    dirs = [torch.randn(x.shape, generator=g, dtype=x.dtype) for x in leaves + params]
    grads = torch.autograd.grad((out * proj).sum(), leaves + params, allow_unused=True)
    analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs) if gr is not None)

    def shifted(sign):
        with torch.no_grad():
            for p, d in zip(params, dirs[len(leaves):]):
                p.add_(sign * h * d)
            xs = [x.detach() + sign * h * d for x, d in zip(leaves, dirs)]
            val = float((fn(*xs) * proj).sum())
            for p, d in zip(params, dirs[len(leaves):]):
                p.sub_(sign * h * d)
        return val

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12)


def randomize(module, seed=0, scale=0.5):
    """Re-draw every parameter (gates included) so no path is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def init(module):
    initialize(module)
    return module
