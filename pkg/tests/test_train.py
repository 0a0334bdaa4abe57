from dataclasses import replace

import numpy as np
import pytest

from ickd.bank import RetrievalConfig, build_bank, positive_table
from ickd.data import LabeledDataset, gen_blobs, stratified_split
from ickd.errors import InvalidArgumentError
from ickd.losses import LossConfig
from ickd.net import MlpArchitecture, MlpModel, backward, forward, init_model, sgd_step
from ickd.numerics import softmax_with_temperature
from ickd.train import (
    METRICS_HEADER,
    STREAM_SHUFFLE,
    STREAM_STUDENT,
    EpochRecord,
    RunMetrics,
    TrainConfig,
    distill_offline,
    distill_online,
    distill_teacher_free,
    evaluate,
    metrics_csv,
    stream_seed,
    train_teacher,
)

ARCH_T = MlpArchitecture((4, 16, 3))
ARCH_S = MlpArchitecture((4, 5, 3))
SMALL = TrainConfig(epochs=3, batch_size=16, lr=0.05, lr_decay_epochs=(2,))


@pytest.fixture(scope="module")
def split():
    return stratified_split(gen_blobs(3, 30, 4, 0.4, 0), 0.25, 0)


@pytest.fixture(scope="module")
def teacher(split):
    return train_teacher(ARCH_T, split[0], split[1], SMALL)[0]


def test_evaluate_tie_goes_to_lower_class():
    # all-zero model: every logit ties, so everything is predicted as class 0
    arch = MlpArchitecture((2, 3))
    model = MlpModel(arch, np.zeros(arch.n_params))
    ds = LabeledDataset(np.ones((6, 2)), [0, 0, 1, 1, 2, 2], 3)
    assert evaluate(model, ds) == pytest.approx(1 / 3)


def test_evaluate_matches_loop(split):
    model = init_model(ARCH_S, 3)
    train = split[0]
    hits = 0
    for x, y in zip(train.features, train.labels):
        z = list(forward(model, x).logits)
        hits += int(z.index(max(z)) == y)
    assert evaluate(model, train) == hits / len(train)


def test_teacher_learns_separable_blobs():
    train, test = stratified_split(gen_blobs(4, 60, 5, 0.1, 1), 0.25, 1)
    _, m = train_teacher(MlpArchitecture((5, 16, 4)), train, test, replace(SMALL, epochs=15))
    # a least-squares linear classifier is a cheap oracle for separability
    X = np.hstack([train.features, np.ones((len(train), 1))])
    W = np.linalg.lstsq(X, np.eye(4)[train.labels], rcond=None)[0]
    Xt = np.hstack([test.features, np.ones((len(test), 1))])
    assert np.mean((Xt @ W).argmax(1) == test.labels) > 0.95
    assert m.final_test_acc > 0.95


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(ablation="bogus")
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(lr=1.0, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
    assert [cfg.lr_at(e) for e in (0, 2, 3, 4)] == [1.0, 0.5, 0.5, 0.25]


def test_active_terms():
    assert not TrainConfig(ablation="kd_only").picd_active()
    assert TrainConfig(ablation="kd_picd").picd_active() and not TrainConfig(ablation="kd_picd").nicd_active()
    off = TrainConfig(loss=LossConfig(gamma_picd=0.0))
    assert not off.picd_active() and off.nicd_active()


def test_streams_independent():
    assert stream_seed(0, STREAM_STUDENT) != stream_seed(0, STREAM_SHUFFLE)
    assert stream_seed(0, 1) == stream_seed(0, 1)


def test_distill_deterministic(split, teacher):
    a = distill_offline(teacher, ARCH_S, split[0], split[1], SMALL)
    b = distill_offline(teacher, ARCH_S, split[0], split[1], SMALL)
    assert metrics_csv(a[1]) == metrics_csv(b[1])
    assert a[0].parameters.tobytes() == b[0].parameters.tobytes()
    c = distill_offline(teacher, ARCH_S, split[0], split[1], replace(SMALL, seed=1))
    assert metrics_csv(c[1]) != metrics_csv(a[1])


def test_metrics_csv_layout():
    m = RunMetrics([EpochRecord(0, 1.5, 0.25, 0.0, 0.0, 1.75, 0.5, 0.5, "none", 0.0)], 0, 0, 0)
    lines = metrics_csv(m).splitlines()
    assert lines[0] == METRICS_HEADER
    assert lines[1] == "0,1.5,0.25,0.0,0.0,1.75,0.5,0.5,none,0.0"
    assert len(lines) == 2


def vanilla_kd(teacher, arch, train, test, cfg):
    """Hand-written CE + KD loop, sharing only the layer primitives."""
    a, tau = cfg.loss.alpha, cfg.loss.tau_kd
    student = init_model(arch, stream_seed(cfg.seed, STREAM_STUDENT))
    rng = np.random.Generator(np.random.Philox(stream_seed(cfg.seed, STREAM_SHUFFLE)))
    zt_all = forward(teacher, train.features).logits
    velocity = None
    lines = [METRICS_HEADER]
    for epoch in range(cfg.epochs):
        sums, seen = np.zeros(5), 0
        lr = cfg.lr * cfg.lr_decay_factor ** sum(epoch >= e for e in cfg.lr_decay_epochs)
        perm = rng.permutation(len(train))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            rec = forward(student, train.features[idx])
            onehot = np.eye(arch.n_classes)[train.labels[idx]]
            ps = softmax_with_temperature(rec.logits, 1.0)
            ps_t = softmax_with_temperature(rec.logits, tau)
            pt_t = softmax_with_temperature(zt_all[idx], tau)
            ce = -(onehot * np.log(np.maximum(ps, 1e-12))).sum(-1)
            kl = -(pt_t * np.log(np.maximum(ps_t, 1e-12))).sum(-1) + (pt_t * np.log(np.maximum(pt_t, 1e-12))).sum(-1)
            kd = (1 - a) * ce + a * tau ** 2 * kl
            total = ce + kd
            grad = (ps - onehot) + ((1 - a) * (ps - onehot) + (a * tau ** 2 / tau) * (ps_t - pt_t))
            b = idx.size
            sums += b * np.array([float(np.mean(ce)), float(np.mean(kd)), 0.0, 0.0, float(total.mean())])
            seen += b
            student, velocity = sgd_step(student, backward(student, rec, grad / b), lr,
                                         cfg.momentum, cfg.weight_decay, velocity)
        acc = lambda ds: float(np.mean(forward(student, ds.features).logits.argmax(1) == ds.labels))  # noqa: E731
        row = [repr(float(v)) for v in sums / seen] + [repr(acc(train)), repr(acc(test)), "none", "0.0"]
        lines.append(f"{epoch}," + ",".join(row))
    return "\n".join(lines) + "\n"


def test_kd_only_reduces_to_vanilla_kd(split, teacher):
    cfg = replace(SMALL, ablation="kd_only")
    _, m = distill_offline(teacher, ARCH_S, split[0], split[1], cfg)
    assert m.bank_builds == m.picd_evals == m.nicd_evals == 0
    assert metrics_csv(m) == vanilla_kd(teacher, ARCH_S, split[0], split[1], cfg)


def test_zero_gamma_equals_single_term_ablation(split, teacher):
    a = distill_offline(teacher, ARCH_S, split[0], split[1],
                        replace(SMALL, loss=LossConfig(gamma_picd=0.0)))[1]
    b = distill_offline(teacher, ARCH_S, split[0], split[1], replace(SMALL, ablation="kd_nicd"))[1]
    assert a.picd_evals == 0
    assert metrics_csv(a) == metrics_csv(b)


def test_k1_with_duplicate_rows():
    # every row has an exact twin; with K = 1 the twin is the only positive
    base = gen_blobs(3, 6, 4, 0.5, 2)
    x = np.repeat(base.features, 2, axis=0)
    y = np.repeat(base.labels, 2)
    ds = LabeledDataset(x, y, 3)
    cfg = replace(SMALL, retrieval=RetrievalConfig(k_positive=1), ablation="kd_picd")
    t = train_teacher(ARCH_T, ds, None, SMALL)[0]
    table = positive_table(build_bank(t, ds), cfg.retrieval)
    np.testing.assert_array_equal(table.indices[:, 0], np.arange(len(ds)) ^ 1)
    _, m = distill_offline(t, ARCH_S, ds, None, cfg)
    assert m.picd_evals > 0 and np.isfinite(m.records[-1].total)


def test_offline_bank_constant(split, teacher):
    _, m = distill_offline(teacher, ARCH_S, split[0], split[1], SMALL)
    sums = {r.bank_checksum for r in m.records}
    assert len(sums) == 1 and "none" not in sums
    assert m.bank_builds == 1


def test_loss_decomposition_every_step(split, teacher):
    _, m = distill_offline(teacher, ARCH_S, split[0], split[1], SMALL)
    g = SMALL.loss
    for total, ce, kd, picd, nicd in m.steps:
        assert total == pytest.approx(ce + kd + g.gamma_picd * picd + g.gamma_nicd * nicd, rel=1e-12, abs=1e-12)


def test_online_bank_rebuilt_each_epoch(split):
    cfg = replace(SMALL, epochs=4)
    res = distill_online(ARCH_S, ARCH_S, split[0], split[1], cfg)
    sums = [r.bank_checksum for r in res.metrics2.records]
    assert len(set(sums)) == 4
    assert res.metrics2.bank_builds == 4
    assert res.metrics1.bank_builds == 0


def test_online_symmetric_peers_bit_identical(split):
    cfg = replace(SMALL, epochs=3, peer_seed=SMALL.seed, online_mirror=True)
    res = distill_online(ARCH_S, ARCH_S, split[0], split[1], cfg)
    assert res.student1.parameters.tobytes() == res.student2.parameters.tobytes()
    assert metrics_csv(res.metrics1) == metrics_csv(res.metrics2)


def test_teacher_free_first_stage_is_plain_ce(split):
    res = distill_teacher_free(ARCH_S, split[0], split[1], SMALL)
    base, m = train_teacher(ARCH_S, split[0], split[1], SMALL)
    assert res.baseline.parameters.tobytes() == base.parameters.tobytes()
    assert metrics_csv(res.baseline_metrics) == metrics_csv(m)
    assert res.metrics.bank_builds == 1


def test_ickd_all_runs(split, teacher):
    _, m = distill_offline(teacher, ARCH_S, split[0], split[1], replace(SMALL, ablation="ickd_all"))
    assert np.isfinite(m.records[-1].total) and m.picd_evals > 0


def test_class_count_mismatch(split, teacher):
    with pytest.raises(InvalidArgumentError):
        distill_offline(teacher, MlpArchitecture((4, 5, 4)), split[0], split[1], SMALL)
