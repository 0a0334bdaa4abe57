"""Self-check battery behind ``ickd verify``.

Every check is a small randomized experiment with a known answer. Numerics
are reached through the module object (``numerics.kl_divergence``) rather
than imported names, so a patched primitive is seen by the battery.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bank, losses, numerics

GRAD_TOL = 1e-5
LSR_TOL = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _probs(rng, *shape):
    return numerics.softmax_with_temperature(rng.normal(size=shape) * 1.5, 1.0)


def _loss_cases(rng):
    k = int(rng.integers(3, 8))
    y = int(rng.integers(k))
    zt = rng.normal(size=k) * 2
    cfg = losses.LossConfig(alpha=float(rng.uniform(0.1, 0.9)), tau_kd=float(rng.uniform(1, 5)),
                            tau1=float(rng.uniform(1, 5)), tau_nicd=float(rng.uniform(0.5, 2)))
    agg = _probs(rng, k)
    m = int(rng.integers(1, 5))
    negs = _probs(rng, m, k)
    b = _probs(rng, m)
    onehot = numerics.one_hot(y, k)

    def ce(z):
        p = numerics.softmax_with_temperature(z, 1.0)
        return numerics.cross_entropy(onehot, p), p - onehot

    def lsr(z):
        r = losses.lsr_loss(y, numerics.softmax_with_temperature(z, 1.0), cfg.alpha)
        return r.value, r.logit_gradient

    def kd(z):
        r = losses.kd_loss(y, z, zt, cfg)
        return r.value, r.logit_gradient

    def picd(z):
        r = losses.picd_loss(agg, z, cfg.tau1)
        return r.value, r.logit_gradient

    def nicd(z):
        ps = numerics.softmax_with_temperature(z, cfg.tau_nicd)
        pt = numerics.softmax_with_temperature(zt, cfg.tau_nicd)
        r = losses.nicd_loss(ps, pt, negs, b, cfg.tau_nicd)
        return r.value, r.logit_gradient

    def total(z):
        r = losses.total_loss(y, z, zt, agg, negs, b, cfg)
        return r.value, r.logit_gradient

    return k, {"ce": ce, "lsr": lsr, "kd": kd, "picd": picd, "nicd": nicd, "total": total}


def check_gradients(rng, cases=20) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for _ in range(cases):
        k, fns = _loss_cases(rng)
        z0 = rng.normal(size=k) * 2
        for name, fn in fns.items():
            err = numerics.grad_check(fn, z0).max_relative_error
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"gradient/{n}", e < GRAD_TOL, f"max rel err {e:.2e}") for n, e in worst.items()]


def check_lsr_kd(rng, trials=100) -> tuple[CheckResult, float, float]:
    """At tau = 1, kd - CE(effective target) should equal alpha * H(p_t) for every student."""
    k, alpha = 6, 0.35
    y = 2
    zt = rng.normal(size=k) * 2
    pt = numerics.softmax_with_temperature(zt, 1.0)
    cfg = losses.LossConfig(alpha=alpha, tau_kd=1.0)
    target = losses.effective_target(y, pt, alpha)
    diffs = []
    for _ in range(trials):
        zs = rng.normal(size=k) * 3
        ps = numerics.softmax_with_temperature(zs, 1.0)
        diffs.append(losses.kd_loss(y, zs, zt, cfg).value - numerics.cross_entropy(target, ps))
    diffs = np.array(diffs)
    spread = float(diffs.max() - diffs.min())
    # the difference is -alpha * H(p_t): the KL term drops the teacher entropy
    constant = float(-diffs.mean())
    expected = alpha * numerics.entropy(pt)
    ok = spread < LSR_TOL and abs(constant - expected) < LSR_TOL
    detail = f"constant {constant:.12f} (alpha*H(pt) {expected:.12f}), spread {spread:.1e}"
    return CheckResult("lsr_kd_equivalence", ok, detail), constant, spread


def _oracle(features, labels, q, k, beta, positive):
    qv = features[q]
    qn = math.sqrt(float(qv @ qv))
    scored = []
    for j in range(len(labels)):
        same = labels[j] == labels[q]
        if (positive and (not same or j == q)) or (not positive and same):
            continue
        row = features[j]
        scored.append((-(float(qv @ row) / (qn * math.sqrt(float(row @ row)))), j))
    scored.sort()
    top = scored[:k]
    logits = [-c / beta for c, _ in top]
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [j for _, j in top], [v / s for v in e]


def check_retrieval(rng, banks=20) -> CheckResult:
    worst, violations = 0.0, 0
    for _ in range(banks):
        n, d, c = int(rng.integers(8, 120)), int(rng.integers(2, 16)), int(rng.integers(2, 6))
        x = rng.normal(size=(n, d))
        y = rng.integers(0, c, size=n)
        cfg = bank.RetrievalConfig(beta1=float(rng.uniform(0.3, 4)), beta2=float(rng.uniform(0.3, 8)),
                                   k_positive=int(rng.integers(1, 12)), n_negative=int(rng.integers(1, 12)))
        fb = bank.FeatureBank(x, y)
        for q in rng.choice(n, size=min(n, 6), replace=False):
            q = int(q)
            for positive in (True, False):
                k = cfg.k_positive if positive else cfg.n_negative
                beta = cfg.beta1 if positive else cfg.beta2
                want_idx, want_w = _oracle(x, y, q, k, beta, positive)
                if not want_idx:
                    continue
                res = bank.retrieve_positive(fb, q, cfg) if positive else bank.retrieve_negative(fb, q, cfg)
                got = res.indices.tolist()
                if got != want_idx:
                    violations += 1
                    continue
                worst = max(worst, float(np.max(np.abs(res.weights - np.array(want_w)))))
                same = y[got] == y[q]
                violations += int(q in got and positive) + int(np.any(same != positive))
    ok = violations == 0 and worst < 1e-9
    return CheckResult("retrieval_oracle", ok, f"{violations} violations, max weight err {worst:.1e}")


def check_kl_nonnegative(rng, trials=200) -> CheckResult:
    lo = math.inf
    for _ in range(trials):
        k = int(rng.integers(2, 10))
        t, p = _probs(rng, k), _probs(rng, k)
        lo = min(lo, numerics.kl_divergence(t, p))
    p = _probs(rng, 5)
    ok = lo >= -1e-12 and abs(numerics.kl_divergence(p, p)) < 1e-12
    return CheckResult("kl_nonnegative", ok, f"min KL {lo:.3e}")


def check_loss_bounds(rng, trials=200) -> CheckResult:
    bad = []
    for _ in range(trials):
        k, m = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        ps, pt = _probs(rng, k), _probs(rng, k)
        t = _probs(rng, k)
        if numerics.cross_entropy(t, ps) < numerics.entropy(t) - 1e-12:
            bad.append("cross entropy below entropy")
        nic = losses.nicd_loss(ps, pt, _probs(rng, m, k), _probs(rng, m)).value
        if not -1e-12 <= nic <= 2.0 + 1e-12:
            bad.append(f"nicd {nic} outside [0, 2]")
        pic = losses.picd_loss(t, rng.normal(size=k), 2.0).value
        if pic < -1e-12:
            bad.append(f"picd {pic} negative")
    return CheckResult("loss_bounds", not bad, bad[0] if bad else f"{trials} cases in range")


def check_aggregation(rng, trials=200) -> CheckResult:
    worst_sum, outside = 0.0, 0
    for _ in range(trials):
        n, k, kk = int(rng.integers(3, 30)), int(rng.integers(2, 8)), int(rng.integers(1, 6))
        probs = _probs(rng, n, k)
        idx = rng.choice(n, size=(1, min(kk, n)), replace=False)
        w = _probs(rng, 1, idx.shape[1])
        agg = bank.aggregate_probs(probs, idx, w)[0]
        sel = probs[idx[0]]
        worst_sum = max(worst_sum, abs(agg.sum() - 1.0))
        outside += int(np.any(agg < sel.min(0) - 1e-12) or np.any(agg > sel.max(0) + 1e-12))
    ok = worst_sum < 1e-9 and outside == 0
    return CheckResult("aggregation_convexity", ok, f"max |sum-1| {worst_sum:.1e}, {outside} outside envelope")


def run_all(seed: int = 0) -> tuple[list[CheckResult], dict]:
    """Run every check; also return the measured LSR/KD constant and spread."""
    rng = np.random.default_rng(seed)
    results = check_gradients(rng)
    lsr, const, spread = check_lsr_kd(rng)
    results.append(lsr)
    results += [check_retrieval(rng), check_kl_nonnegative(rng), check_loss_bounds(rng), check_aggregation(rng)]
    return results, {"lsr_kd_constant": const, "lsr_kd_spread": spread}


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
    return "\n".join(lines)
