import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ickd.errors import InvalidArgumentError
from ickd.losses import (
    LossConfig,
    batch_mean,
    effective_target,
    kd_loss,
    lsr_loss,
    nicd_loss,
    picd_loss,
    total_loss,
)
from ickd.numerics import cross_entropy, entropy, grad_check, kl_divergence, softmax_with_temperature


def sm(z, t=1.0):
    e = [math.exp(v / t - max(z) / t) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def test_lsr_endpoints():
    p = softmax_with_temperature([0.3, -1.0, 2.0, 0.1], 1.0)
    assert lsr_loss(2, p, 0.0).value == pytest.approx(cross_entropy(np.eye(4)[2], p), abs=1e-15)
    u = np.full(4, 0.25)
    assert lsr_loss(0, p, 1.0).value == pytest.approx(cross_entropy(u, p), abs=1e-15)
    assert lsr_loss(3, p, 1.0).value == pytest.approx(lsr_loss(0, p, 1.0).value, abs=1e-15)


def test_lsr_hand_loop():
    z = [0.4, -0.3, 1.2]
    p = sm(z)
    a = 0.1
    expected = (1 - a) * -math.log(p[1]) + a * sum(-math.log(v) / 3 for v in p)
    assert lsr_loss(1, np.array(p), a).value == pytest.approx(expected, abs=1e-14)
    with pytest.raises(InvalidArgumentError):
        lsr_loss(3, np.array(p), a)


def test_kd_identical_logits():
    z = np.array([0.5, 1.5, -0.2])
    cfg = LossConfig(alpha=0.3, tau_kd=1.0)
    ps = softmax_with_temperature(z, 1.0)
    assert kd_loss(1, z, z, cfg).value == pytest.approx(0.7 * cross_entropy(np.eye(3)[1], ps), abs=1e-14)


def test_kd_alpha_zero_is_ce():
    rng = np.random.default_rng(0)
    zs, zt = rng.normal(size=5), rng.normal(size=5) * 3
    cfg = LossConfig(alpha=0.0)
    ce = cross_entropy(np.eye(5)[4], softmax_with_temperature(zs, 1.0))
    assert kd_loss(4, zs, zt, cfg).value == pytest.approx(ce, abs=1e-15)


def test_kd_hand_loop():
    zs, zt = [0.2, -1.0, 0.7, 1.1], [1.5, 0.3, -0.4, 2.2]
    tau, a = 4.0, 0.5
    pst, ptt = sm(zs, tau), sm(zt, tau)
    kl = sum(t * math.log(t / s) for t, s in zip(ptt, pst))
    expected = (1 - a) * -math.log(sm(zs)[0]) + a * tau * tau * kl
    cfg = LossConfig(alpha=a, tau_kd=tau)
    assert kd_loss(0, np.array(zs), np.array(zt), cfg).value == pytest.approx(expected, abs=1e-13)
    unscaled = LossConfig(alpha=a, tau_kd=tau, scale_by_tau_sq=False)
    assert kd_loss(0, np.array(zs), np.array(zt), unscaled).value == pytest.approx(
        (1 - a) * -math.log(sm(zs)[0]) + a * kl, abs=1e-13)


def test_effective_target():
    pt = softmax_with_temperature([0.1, 0.9, -0.5], 1.0)
    np.testing.assert_allclose(effective_target(1, pt, 0.0), [0, 1, 0])
    np.testing.assert_allclose(effective_target(1, pt, 0.0, lsr_alpha=0.3), [0.1, 0.8, 0.1])
    np.testing.assert_allclose(effective_target(1, pt, 1.0), pt)
    q = [0.2 / 3, 0.8 + 0.2 / 3, 0.2 / 3]
    loop = [0.7 * q[k] + 0.3 * pt[k] for k in range(3)]
    out = effective_target(1, pt, 0.3, lsr_alpha=0.2)
    np.testing.assert_allclose(out, loop, atol=1e-15)
    assert abs(out.sum() - 1) < 1e-12


def test_picd_cases():
    rng = np.random.default_rng(1)
    z = rng.normal(size=6)
    assert abs(picd_loss(softmax_with_temperature(z, 4.0), z, 4.0).value) <= 1e-10
    assert picd_loss(np.eye(5)[2], np.zeros(5), 1.0).value == pytest.approx(math.log(5), abs=1e-12)
    agg = softmax_with_temperature(rng.normal(size=6), 1.0)
    expected = 16.0 * kl_divergence(agg, softmax_with_temperature(z, 4.0))
    assert picd_loss(agg, z, 4.0).value == pytest.approx(expected, abs=1e-13)
    with pytest.raises(InvalidArgumentError):
        picd_loss(agg, z[:5], 4.0)


def test_nicd_cases():
    p = np.array([0.5, 0.5, 0.0, 0.0])
    ortho = np.array([[0.0, 0.0, 0.3, 0.7]])
    assert nicd_loss(p, p, ortho, [1.0]).value == pytest.approx(0.0, abs=1e-15)
    q = softmax_with_temperature([0.2, 0.1, -0.3], 1.0)
    assert nicd_loss(q, q, q[None, :], [1.0]).value == pytest.approx(1.0, abs=1e-14)
    rng = np.random.default_rng(2)
    ps, pt = (softmax_with_temperature(rng.normal(size=5), 1.0) for _ in range(2))
    negs = softmax_with_temperature(rng.normal(size=(3, 5)), 1.0)
    b = softmax_with_temperature(rng.normal(size=3), 1.0)
    expected = 1 - cos(ps, pt) + sum(b[j] * cos(ps, negs[j]) for j in range(3))
    assert nicd_loss(ps, pt, negs, b).value == pytest.approx(expected, abs=1e-14)
    with pytest.raises(InvalidArgumentError):
        nicd_loss(ps, pt, negs, b[:2])


def _random_case(rng, k=None):
    k = k or int(rng.integers(2, 9))
    y = int(rng.integers(0, k))
    zs = rng.normal(size=k) * rng.uniform(0.2, 4)
    zt = rng.normal(size=k) * rng.uniform(0.2, 4)
    m = int(rng.integers(1, 5))
    agg = softmax_with_temperature(rng.normal(size=k) * 2, 1.0)
    negs = softmax_with_temperature(rng.normal(size=(m, k)) * 2, 1.0)
    b = softmax_with_temperature(rng.normal(size=m), 1.0)
    cfg = LossConfig(alpha=float(rng.uniform()), tau_kd=float(rng.uniform(0.5, 6)), tau1=float(rng.uniform(0.5, 6)),
                     gamma_picd=float(rng.uniform(0, 4)), gamma_nicd=float(rng.uniform(0, 12)),
                     tau_nicd=float(rng.choice([1.0, 2.0])))
    return y, zs, zt, agg, negs, b, cfg


def _pair(lv):
    return lv.value, lv.logit_gradient


def _ce(case):
    y = case[0]

    def f(z):
        p = softmax_with_temperature(z, 1.0)
        onehot = np.eye(z.size)[y]
        return cross_entropy(onehot, p), p - onehot
    return f


def _lsr(case):
    return lambda z: _pair(lsr_loss(case[0], softmax_with_temperature(z, 1.0), case[6].alpha))


def _kd(case):
    return lambda z: _pair(kd_loss(case[0], z, case[2], case[6]))


def _picd(case):
    return lambda z: _pair(picd_loss(case[3], z, case[6].tau1))


def _nicd(case):
    _, _, zt, _, negs, b, cfg = case
    pt = softmax_with_temperature(zt, cfg.tau_nicd)
    return lambda z: _pair(nicd_loss(softmax_with_temperature(z, cfg.tau_nicd), pt, negs, b, cfg.tau_nicd))


def _total(case):
    y, _, zt, agg, negs, b, cfg = case
    return lambda z: _pair(total_loss(y, z, zt, agg, negs, b, cfg))


LOSS_BUILDERS = {"ce": _ce, "lsr": _lsr, "kd": _kd, "picd": _picd, "nicd": _nicd, "total": _total}


@pytest.mark.parametrize("name", sorted(LOSS_BUILDERS))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(LOSS_BUILDERS).index(name))
    worst = 0.0
    for _ in range(25):
        case = _random_case(rng)
        rep = grad_check(LOSS_BUILDERS[name](case), case[1], epsilon=1e-4)
        worst = max(worst, rep.max_relative_error)
    assert worst < 1e-5


def test_batched_losses_match_single():
    rng = np.random.default_rng(3)
    cases = [_random_case(rng, k=5) for _ in range(4)]
    cfg = cases[0][6]
    y = np.array([c[0] for c in cases])
    zs = np.stack([c[1] for c in cases])
    zt = np.stack([c[2] for c in cases])
    agg = np.stack([c[3] for c in cases])
    negs = softmax_with_temperature(rng.normal(size=(4, 3, 5)), 1.0)
    b = softmax_with_temperature(rng.normal(size=(4, 3)), 1.0)
    batch = total_loss(y, zs, zt, agg, negs, b, cfg)
    for i in range(4):
        single = total_loss(y[i], zs[i], zt[i], agg[i], negs[i], b[i], cfg)
        assert batch.value[i] == pytest.approx(single.value, abs=1e-12)
        np.testing.assert_allclose(batch.logit_gradient[i], single.logit_gradient, atol=1e-12)
    mean = batch_mean(batch)
    assert mean.value == pytest.approx(np.mean(batch.value), abs=1e-14)
    np.testing.assert_allclose(mean.logit_gradient, batch.logit_gradient / 4)


def test_padded_negatives_are_ignored():
    rng = np.random.default_rng(4)
    ps, pt = (softmax_with_temperature(rng.normal(size=4), 1.0) for _ in range(2))
    negs = softmax_with_temperature(rng.normal(size=(2, 4)), 1.0)
    padded = np.concatenate([negs, np.full((1, 4), 0.25)])
    a = nicd_loss(ps, pt, negs, [0.3, 0.7])
    b = nicd_loss(ps, pt, padded, [0.3, 0.7, 0.0])
    assert a.value == pytest.approx(b.value, abs=1e-15)
    np.testing.assert_allclose(a.logit_gradient, b.logit_gradient, atol=1e-15)


def test_lsr_kd_equivalence():
    rng = np.random.default_rng(5)
    k, y, alpha = 7, 3, 0.35
    zt = rng.normal(size=k) * 2
    pt = softmax_with_temperature(zt, 1.0)
    cfg = LossConfig(alpha=alpha, tau_kd=1.0)
    target = effective_target(y, pt, alpha, 0.0)
    diffs = []
    for _ in range(100):
        zs = rng.normal(size=k) * 3
        ps = softmax_with_temperature(zs, 1.0)
        diffs.append(kd_loss(y, zs, zt, cfg).value - cross_entropy(target, ps))
    assert max(diffs) - min(diffs) < 1e-9
    # KD carries the teacher-entropy offset: H(q_hat, p) - L_kd = alpha * H(p_t)
    assert -np.mean(diffs) == pytest.approx(alpha * entropy(pt), abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_loss_bounds(seed):
    rng = np.random.default_rng(seed)
    y, zs, zt, agg, negs, b, cfg = _random_case(rng)
    assert picd_loss(agg, zs, cfg.tau1).value >= -1e-10
    ps, pt = softmax_with_temperature(zs, 1.0), softmax_with_temperature(zt, 1.0)
    v = nicd_loss(ps, pt, negs, b).value
    assert 0.0 <= v <= 2.0


def test_total_reduces_to_vanilla_kd():
    rng = np.random.default_rng(6)
    y, zs, zt, agg, negs, b, cfg = _random_case(rng)
    from dataclasses import replace

    off = replace(cfg, gamma_picd=0.0, gamma_nicd=0.0)
    ce = cross_entropy(np.eye(zs.size)[y], softmax_with_temperature(zs, 1.0))
    kd = kd_loss(y, zs, zt, off).value
    assert total_loss(y, zs, zt, agg, negs, b, off).value == ce + kd
    assert total_loss(y, zs, zt, None, None, None, cfg).value == ce + kd
    plain = replace(off, alpha=0.0)
    assert total_loss(y, zs, zt, None, None, None, plain).value == pytest.approx(2 * ce, abs=1e-14)


def test_total_is_component_sum():
    rng = np.random.default_rng(7)
    for _ in range(20):
        y, zs, zt, agg, negs, b, cfg = _random_case(rng)
        tot = total_loss(y, zs, zt, agg, negs, b, cfg)
        ce = cross_entropy(np.eye(zs.size)[y], softmax_with_temperature(zs, 1.0))
        kd = kd_loss(y, zs, zt, cfg)
        picd = picd_loss(agg, zs, cfg.tau1)
        nicd = nicd_loss(softmax_with_temperature(zs, cfg.tau_nicd), softmax_with_temperature(zt, cfg.tau_nicd),
                         negs, b, cfg.tau_nicd)
        expected = ce + kd.value + cfg.gamma_picd * picd.value + cfg.gamma_nicd * nicd.value
        assert tot.value == pytest.approx(expected, abs=1e-12)
        c = tot.components
        assert c["ce"] + c["kd"] + cfg.gamma_picd * c["picd"] + cfg.gamma_nicd * c["nicd"] == pytest.approx(
            tot.value, abs=1e-12)


def test_total_affine_in_gammas():
    from dataclasses import replace

    rng = np.random.default_rng(8)
    y, zs, zt, agg, negs, b, cfg = _random_case(rng)
    base = total_loss(y, zs, zt, agg, negs, b, cfg)
    h = 0.5
    up_p = total_loss(y, zs, zt, agg, negs, b, replace(cfg, gamma_picd=cfg.gamma_picd + h))
    up_n = total_loss(y, zs, zt, agg, negs, b, replace(cfg, gamma_nicd=cfg.gamma_nicd + h))
    assert (up_p.value - base.value) / h == pytest.approx(base.components["picd"], abs=1e-9)
    assert (up_n.value - base.value) / h == pytest.approx(base.components["nicd"], abs=1e-9)


def test_loss_config_validation():
    with pytest.raises(InvalidArgumentError):
        LossConfig(alpha=1.5)
    with pytest.raises(InvalidArgumentError):
        LossConfig(tau1=0.0)
    with pytest.raises(InvalidArgumentError):
        LossConfig(gamma_nicd=-1.0)
