import cmath
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from imdnet.errors import ConfigError, ShapeError
from imdnet.losses import (
    LossWeights,
    charbonnier,
    decouple_loss,
    edge_loss,
    frequency_loss,
    laplacian,
    total_loss,
)

from helpers import fd_check


def naive_dft_l1(a, b):
    """|dRe| + |dIm| averaged over pixels, DFT by direct summation."""
    bsz, ch, h, w = a.shape
    d = a - b
    total = 0.0
    for n, c in itertools.product(range(bsz), range(ch)):
        for u, v in itertools.product(range(h), range(w)):
            acc = 0j
            for y, x in itertools.product(range(h), range(w)):
                acc += d[n, c, y, x] * cmath.exp(-2j * cmath.pi * (u * y / h + v * x / w))
            total += abs(acc.real) + abs(acc.imag)
    return total / d.size


def stencil_laplacian(img):
    """Scalar 4-neighbour Laplacian with reflect boundary."""
    h, w = img.shape

    def at(y, x):
        y = -y if y < 0 else (2 * (h - 1) - y if y >= h else y)
        x = -x if x < 0 else (2 * (w - 1) - x if x >= w else x)
        return img[y, x]

    out = np.zeros_like(img)
    for y, x in itertools.product(range(h), range(w)):
        out[y, x] = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4 * at(y, x)
    return out


def test_weights_defaults():
    w = LossWeights()
    assert (w.lambda_f, w.delta_e, w.gamma_d, w.epsilon) == (0.1, 0.05, 0.001, 0.001)
    with pytest.raises(ConfigError):
        LossWeights(gamma_d=-1.0)


# -- charbonnier ------------------------------------------------------------


def test_charbonnier_equal_inputs_is_eps():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert charbonnier(x, x, 1e-3).item() == 1e-3


def test_charbonnier_scalar_pair():
    v = charbonnier(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.1], dtype=torch.float64))
    assert v.item() == pytest.approx(np.sqrt(0.16 + 1e-6), rel=1e-12)
    assert v.item() == pytest.approx(0.4000012, abs=1e-7)


def test_charbonnier_gradient_zero_at_minimum():
    x = torch.rand(1, 3, 4, 4, requires_grad=True)
    charbonnier(x, x.detach()).backward()
    assert torch.count_nonzero(x.grad) == 0


def test_charbonnier_shape_mismatch():
    with pytest.raises(ShapeError):
        charbonnier(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


# -- edge -------------------------------------------------------------------


def test_edge_equal_inputs_is_eps():
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    assert edge_loss(x, x).item() == pytest.approx(1e-3, rel=1e-12)


def test_edge_constant_images():
    a = torch.full((1, 3, 7, 7), 0.2, dtype=torch.float64)
    b = torch.full((1, 3, 7, 7), 0.9, dtype=torch.float64)
    assert edge_loss(a, b).item() == pytest.approx(1e-3, abs=1e-12)


def test_edge_single_hot_pixel_stencil():
    a = np.zeros((1, 1, 5, 6))
    a[0, 0, 0, 2] = 1.0  # on the border, so reflection matters
    b = np.zeros((1, 1, 5, 6))
    b[0, 0, 3, 4] = 0.5
    la, lb = stencil_laplacian(a[0, 0]), stencil_laplacian(b[0, 0])
    ref = np.sqrt((la - lb) ** 2 + 1e-6).mean()
    got = edge_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert abs(got - ref) < 1e-6
    assert_allclose(laplacian(torch.from_numpy(a))[0, 0].numpy(), la, atol=1e-15)


def test_laplacian_matches_stencil_random():
    x = np.random.default_rng(0).random((2, 3, 6, 5))
    out = laplacian(torch.from_numpy(x)).numpy()
    for n, c in itertools.product(range(2), range(3)):
        assert_allclose(out[n, c], stencil_laplacian(x[n, c]), atol=1e-13)


def test_edge_too_small():
    with pytest.raises(ShapeError):
        edge_loss(torch.zeros(1, 3, 2, 8), torch.zeros(1, 3, 2, 8))


# -- frequency --------------------------------------------------------------


def test_frequency_equal_inputs_zero():
    x = torch.rand(1, 3, 8, 8)
    assert frequency_loss(x, x).item() == 0.0


def test_frequency_single_pixel():
    a = torch.tensor([[[[0.7]]]], dtype=torch.float64)
    b = torch.tensor([[[[0.25]]]], dtype=torch.float64)
    assert frequency_loss(a, b).item() == pytest.approx(0.45, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_frequency_naive_dft(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    got = frequency_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert abs(got - naive_dft_l1(a, b)) < 1e-5


def test_frequency_shape_mismatch():
    with pytest.raises(ShapeError):
        frequency_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4))


# -- decoupling -------------------------------------------------------------


def test_decouple_cosine_cases():
    x = torch.randn(3, 4, 5, 5, dtype=torch.float64)
    # the 1e-8 stabiliser keeps these a hair inside [-1, 1]
    assert decouple_loss(x, x).item() == pytest.approx(1.0, abs=1e-9)
    assert decouple_loss(x, -x).item() == pytest.approx(-1.0, abs=1e-9)
    a, b = x.clone(), x.clone()
    a[:, :2] = 0
    b[:, 2:] = 0
    assert decouple_loss(a, b).item() == 0.0


def test_decouple_both_zero_returns_zero():
    z = torch.zeros(2, 4, 3, 3)
    assert decouple_loss(z, z).item() == 0.0


def test_decouple_per_sample_mean():
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    y = torch.stack([x[0], -x[1]])
    assert decouple_loss(x, y).item() == pytest.approx(0.0, abs=1e-9)


def test_decouple_shape_mismatch():
    with pytest.raises(ShapeError):
        decouple_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3))


# -- total ------------------------------------------------------------------


def _pyr(b=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(b, 3, size >> k, size >> k, generator=g, dtype=torch.float64)
            for k in range(4)]


def _orthogonal_pairs(b=2):
    pairs = []
    for c, s in [(8, 32), (16, 16), (32, 8), (64, 4), (64, 4)]:
        cf = torch.randn(b, c, s, s, dtype=torch.float64)
        di = torch.randn(b, c, s, s, dtype=torch.float64)
        cf[:, : c // 2] = 0
        di[:, c // 2:] = 0
        pairs.append((cf, di))
    return pairs


def test_total_perfect_prediction():
    t = _pyr()
    rep = total_loss(t, t, _orthogonal_pairs())
    assert rep.total.item() == pytest.approx(4 * 1e-3 * (1 + 0.05), rel=1e-9)
    assert rep.total.item() == pytest.approx(0.0042, rel=1e-9)


def test_total_charbonnier_only():
    pred, tgt = _pyr(seed=1), _pyr(seed=2)
    rep = total_loss(pred, tgt, _orthogonal_pairs(), LossWeights(0.0, 0.0, 0.0, 1e-3))
    ref = sum(charbonnier(p, t).item() for p, t in zip(pred, tgt))
    assert rep.total.item() == pytest.approx(ref, rel=1e-12)


def test_total_bookkeeping():
    pred, tgt = _pyr(seed=1), _pyr(seed=2)
    pairs = [(torch.randn(2, 8, 32, 32), torch.randn(2, 8, 32, 32)),
             (torch.randn(2, 64, 4, 4), torch.randn(2, 64, 4, 4))]
    rep = total_loss(pred, tgt, pairs)
    total = rep.total.item()
    assert sum(rep.per_term.values()) == pytest.approx(total, rel=1e-6)
    assert sum(rep.per_scale) == pytest.approx(total, rel=1e-6)
    w = LossWeights()
    explicit = 0.0
    for p, t in zip(pred, tgt):
        explicit += (charbonnier(p, t) + w.delta_e * edge_loss(p, t)
                     + w.lambda_f * frequency_loss(p, t)).item()
    explicit += w.gamma_d * sum(decouple_loss(c, d).item() for c, d in pairs)
    assert total == pytest.approx(explicit, rel=1e-9)
    assert set(rep.per_term) == {"charbonnier", "edge", "frequency", "decouple"}


def test_total_scale_mismatch():
    with pytest.raises(ConfigError):
        total_loss(_pyr()[:3], _pyr())


def test_record_fields():
    rep = total_loss(_pyr(seed=1), _pyr(seed=2))
    rec = rep.as_record(step=3, lr=1e-4)
    assert set(rec) == {"step", "lr", "total", "charbonnier", "edge", "frequency", "decouple"}


# -- properties -------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_terms_nonnegative_and_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64)
    for fn in (charbonnier, edge_loss, frequency_loss):
        ab, ba = fn(a, b).item(), fn(b, a).item()
        assert ab >= 0
        assert ab == pytest.approx(ba, rel=1e-12)
    c = decouple_loss(a - 0.5, b - 0.5).item()
    assert -1 <= c <= 1


def _kink_distance(fn, a, b):
    """Smallest argument of a nonsmooth point (|.| or sqrt(.^2 + eps^2))."""
    d = a - b
    if fn is charbonnier:
        return d.abs().min()
    if fn is edge_loss:
        return laplacian(d).abs().min()
    if fn is frequency_loss:
        spec = torch.fft.fft2(d)
        # bins that are real by symmetry keep Im == 0 under any real perturbation
        im = spec.imag.abs()
        im = im[im > 1e-9]
        return torch.cat([spec.real.abs().flatten(), im]).min()
    return torch.tensor(1.0)


def _generic_pair(fn, seed):
    g = torch.Generator().manual_seed(seed)
    while True:
        a = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64)
        b = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64) - 0.5
        if _kink_distance(fn, a, b) > 0.05:
            return a, b


@pytest.mark.parametrize("fn", [charbonnier, edge_loss, frequency_loss, decouple_loss])
def test_term_gradients(fn):
    for seed in range(5):
        a, b = _generic_pair(fn, seed)
        assert fd_check(lambda x, y: fn(x, y).reshape(1), [a, b], seed=seed) < 1e-4


def test_scale_additivity():
    pred, tgt = _pyr(seed=3), _pyr(seed=4)
    whole = total_loss(pred, tgt).total.item()
    parts = sum(total_loss([p], [t]).total.item() for p, t in zip(pred, tgt))
    assert whole == pytest.approx(parts, rel=1e-12)
