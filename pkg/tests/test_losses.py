import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wavlink import diffcore as dc
from wavlink.errors import ConfigError, DimensionError
from wavlink.losses import clip_loss, matryoshka_loss, siglip_loss, slice_level
from wavlink.towers import LossParams


def unit(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, d, generator=g, dtype=dc.DTYPE)
    return x / x.norm(dim=-1, keepdim=True)


def logt(v):
    return torch.tensor(v, dtype=dc.DTYPE)


def mp_clip(ua, ut, tau):
    mpmath.mp.dps = 50
    b = len(ua)
    s = [[tau * mpmath.fsum(mpmath.mpf(x) * mpmath.mpf(y) for x, y in zip(ua[i], ut[j])) for j in range(b)]
         for i in range(b)]
    rows = mpmath.fsum(mpmath.log(mpmath.fsum(mpmath.exp(v) for v in s[i])) - s[i][i] for i in range(b)) / b
    cols = mpmath.fsum(mpmath.log(mpmath.fsum(mpmath.exp(s[i][j]) for i in range(b))) - s[j][j]
                       for j in range(b)) / b
    return float((rows + cols) / 2)


def mp_siglip(ua, ut, tau, bias):
    mpmath.mp.dps = 50
    b = len(ua)
    total = mpmath.mpf(0)
    for i in range(b):
        for j in range(b):
            z = tau * mpmath.fsum(mpmath.mpf(x) * mpmath.mpf(y) for x, y in zip(ua[i], ut[j])) + bias
            label = 1 if i == j else -1
            total += mpmath.log(1 + mpmath.exp(-label * z))
    return float(total / b)


def test_clip_single_item_is_zero():
    u = unit(1, 4)
    assert clip_loss(u, unit(1, 4, 1), logt(2.0)).item() == 0.0


@pytest.mark.parametrize("b", [2, 4, 8])
def test_clip_identical_embeddings_give_log_b(b):
    u = unit(1, 6).expand(b, 6)
    assert abs(clip_loss(u, u, logt(math.log(1 / 0.07))).item() - math.log(b)) <= 1e-9


def test_clip_matches_high_precision_formula():
    ua, ut = unit(3, 5, 1), unit(3, 5, 2)
    lt = math.log(1 / 0.07)
    expected = mp_clip(ua.tolist(), ut.tolist(), mpmath.exp(mpmath.mpf(lt)))
    assert abs(clip_loss(ua, ut, logt(lt)).item() - expected) <= 1e-10


def test_siglip_zero_logits():
    eye = torch.eye(4, dtype=dc.DTYPE)
    ua, ut = eye[:2], eye[2:]
    # every pair is orthogonal, bias 0: all logits are 0
    assert abs(siglip_loss(ua, ut, logt(math.log(10)), logt(0.0)).item() - 2 * math.log(2)) <= 1e-9


def test_siglip_saturated_positive():
    u = unit(1, 3)
    got = siglip_loss(u, u, logt(math.log(20.0)), logt(0.0)).item()
    assert got == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-12)
    assert got == pytest.approx(2.06e-9, rel=1e-2)


def test_siglip_matches_high_precision_formula():
    ua, ut = unit(3, 5, 3), unit(3, 5, 4)
    expected = mp_siglip(ua.tolist(), ut.tolist(), mpmath.mpf(10), mpmath.mpf(-10))
    assert abs(siglip_loss(ua, ut, logt(math.log(10)), logt(-10.0)).item() - expected) <= 1e-10


def test_batch_mismatch_raises():
    with pytest.raises(DimensionError):
        clip_loss(unit(3, 4), unit(2, 4), logt(1.0))
    with pytest.raises(DimensionError):
        siglip_loss(unit(3, 4), unit(3, 5), logt(1.0), logt(0.0))


@pytest.mark.parametrize("kind", ["clip", "siglip"])
def test_matryoshka_single_level_is_base_loss(kind):
    params = LossParams(kind)
    ua, ut = unit(5, 8, 1), unit(5, 8, 2)
    from wavlink.losses import base_loss
    assert matryoshka_loss(ua, ut, [8], kind, params).item() == base_loss(kind, ua, ut, params).item()


def test_matryoshka_two_levels_hand_average():
    params = LossParams("clip")
    ua, ut = unit(2, 4, 5), unit(2, 4, 6)
    full = clip_loss(ua, ut, params.log_temperature)
    half = clip_loss(ua[:, :2].clone(), ut[:, :2].clone(), params.log_temperature)
    got = matryoshka_loss(ua, ut, [4, 2], "clip", params)
    assert abs(got.item() - (full.item() + half.item()) / 2) <= 1e-15


def test_matryoshka_ladder_errors():
    params = LossParams("clip")
    ua = unit(2, 8)
    with pytest.raises(ConfigError):
        matryoshka_loss(ua, ua, [4, 2], "clip", params)
    with pytest.raises(ConfigError):
        matryoshka_loss(ua, ua, [8, 8, 2], "clip", params)


def test_slices_are_prefixes():
    u = unit(4, 16, 9)
    for d in (16, 8, 4, 2):
        assert torch.equal(slice_level(u, d), u[:, :d])
    renorm = slice_level(u, 4, renormalize=True)
    assert torch.allclose(renorm.norm(dim=-1), torch.ones(4, dtype=dc.DTYPE), atol=1e-12)


def test_renormalize_variant_differs_from_literal():
    params = LossParams("clip")
    ua, ut = unit(4, 8, 1), unit(4, 8, 2)
    a = matryoshka_loss(ua, ut, [8, 4, 2], "clip", params)
    b = matryoshka_loss(ua, ut, [8, 4, 2], "clip", params, renormalize=True)
    assert a.item() != b.item()


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(5))), st.integers(0, 1000))
def test_clip_loss_joint_permutation_invariance(perm, seed):
    ua, ut = unit(5, 6, seed), unit(5, 6, seed + 1)
    p = torch.tensor(perm)
    a = clip_loss(ua, ut, logt(2.0)).item()
    b = clip_loss(ua[p], ut[p], logt(2.0)).item()
    assert abs(a - b) <= 1e-12
    assert a >= 0.0


@pytest.mark.parametrize("kind", ["clip", "siglip"])
def test_temperature_gradient(kind):
    ua, ut = unit(4, 6, 3), unit(4, 6, 4)
    if kind == "clip":
        fn = lambda t: clip_loss(ua, ut, t)  # noqa: E731
    else:
        fn = lambda t: siglip_loss(ua, ut, t, logt(-1.0))  # noqa: E731
    assert dc.grad_check(fn, [logt(1.3)], tolerance=1e-6).passed


def test_loss_params_defaults():
    clip, sig = LossParams("clip"), LossParams("siglip")
    assert clip.temperature.item() == pytest.approx(1 / 0.07)
    assert sig.temperature.item() == pytest.approx(10.0)
    assert sig.siglip_bias.item() == -10.0
    with torch.no_grad():
        clip.log_temperature.fill_(10.0)
    assert clip.temperature.item() == pytest.approx(100.0)
