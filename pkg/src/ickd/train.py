"""Training loops: CE baseline, offline IC-KD, online peer IC-KD, teacher-free.

Seeding: each random stream (student init, teacher init, shuffling, ...) is
a Philox generator keyed by ``SeedSequence([seed, stream_id])``, so the
student initialisation never depends on how much the shuffler has drawn.
"""
from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from .bank import RetrievalConfig, build_bank, negative_table, positive_table, uniform_weights
from .data import LabeledDataset
from .errors import InvalidArgumentError, NumericInstabilityError
from .losses import LossConfig, batch_mean, total_loss
from .net import MlpArchitecture, MlpModel, backward, forward, init_model, sgd_step
from .numerics import cross_entropy, softmax_with_temperature

MODES = ("offline", "online", "teacher_free", "ce_only")
ABLATIONS = ("none", "kd_only", "kd_picd", "kd_nicd", "full", "ickd_all")

STREAM_STUDENT = 1
STREAM_SHUFFLE = 2
STREAM_PEER = 3
STREAM_TEACHER = 4

METRICS_HEADER = "epoch,ce,kd,picd,nicd,total,train_acc,test_acc,bank_checksum,wall_ms"


def stream_seed(seed: int, stream: int) -> int:
    """Derive an independent 64-bit seed for one named random stream."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(2, np.uint32).view(np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (30, 45)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mode: str = "offline"
    ablation: str = "full"
    # online mode: student 1 also receives in-context terms from a bank built on student 2
    online_mirror: bool = False
    # online mode: init seed of student 2 (None = an independent stream of ``seed``)
    peer_seed: int | None = None
    log_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise InvalidArgumentError("lr_decay_factor must lie in (0, 1]")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise InvalidArgumentError(f"unknown ablation {self.ablation!r}")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops

    def picd_active(self) -> bool:
        return self.ablation in ("none", "full", "kd_picd", "ickd_all") and self.loss.gamma_picd > 0

    def nicd_active(self) -> bool:
        return self.ablation in ("none", "full", "kd_nicd", "ickd_all") and self.loss.gamma_nicd > 0


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    kd: float
    picd: float
    nicd: float
    total: float
    train_acc: float
    test_acc: float
    bank_checksum: str
    wall_ms: float


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    bank_builds: int = 0
    picd_evals: int = 0
    nicd_evals: int = 0
    # per optimisation step: (total, ce, kd, picd, nicd)
    steps: list = field(default_factory=list)

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")

    @property
    def final_train_acc(self) -> float:
        return self.records[-1].train_acc if self.records else float("nan")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(metrics: RunMetrics) -> str:
    """Header plus one line per epoch; floats are written with ``repr``."""
    out = io.StringIO()
    out.write(METRICS_HEADER + "\n")
    for r in metrics.records:
        row = (r.epoch, r.ce, r.kd, r.picd, r.nicd, r.total, r.train_acc, r.test_acc, r.bank_checksum, r.wall_ms)
        out.write(",".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def run_counters(metrics: RunMetrics) -> dict:
    return {
        "final_test_acc": metrics.final_test_acc, "final_train_acc": metrics.final_train_acc,
        "bank_builds": metrics.bank_builds, "picd_evals": metrics.picd_evals, "nicd_evals": metrics.nicd_evals,
        "steps": len(metrics.steps),
    }


def write_metrics(metrics: RunMetrics, path) -> None:
    """Write ``path`` (CSV) and a ``.counters.json`` sidecar next to it."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(metrics_csv(metrics))
    with open(path.with_suffix(".counters.json"), "w") as fh:
        json.dump(run_counters(metrics), fh, indent=2)
        fh.write("\n")


def evaluate(model: MlpModel, dataset: LabeledDataset) -> float:
    """Top-1 accuracy; ``argmax`` already resolves ties to the lower class."""
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    if dataset.dim != model.architecture.layer_widths[0]:
        raise InvalidArgumentError("dataset dimension does not match model input width")
    if dataset.class_count != model.architecture.n_classes:
        raise InvalidArgumentError("dataset class count does not match model output width")
    pred = np.argmax(forward(model, dataset.features).logits, axis=1)
    return float(np.mean(pred == dataset.labels))


class _Epoch:
    """Sample-weighted running means of the loss components."""

    def __init__(self):
        self.sums = np.zeros(5)
        self.n = 0

    def add(self, loss, b):
        c = loss.components
        self.sums += b * np.array([c["ce"], c["kd"], c["picd"], c["nicd"], loss.value])
        self.n += b

    def means(self):
        return self.sums / max(self.n, 1)


def _batches(rng, n, batch_size):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _check_finite(value, metrics, where):
    if not math.isfinite(value):
        raise NumericInstabilityError(f"non-finite loss ({where})", partial=metrics)


def _forward(model, x, metrics, where):
    """Forward pass that reports a diverged model as numeric instability."""
    with np.errstate(over="ignore", invalid="ignore"):
        rec = forward(model, x)
    if not np.all(np.isfinite(rec.logits)):
        raise NumericInstabilityError(f"non-finite logits ({where})", partial=metrics)
    return rec


def _record(metrics, epoch, means, model, train, test, checksum, t0, cfg):
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.log_wall_time else 0.0
    metrics.records.append(EpochRecord(
        epoch, *(float(v) for v in means), evaluate(model, train),
        evaluate(model, test) if test is not None else float("nan"), checksum, wall,
    ))


def _shuffler(cfg):
    return np.random.Generator(np.random.Philox(stream_seed(cfg.seed, STREAM_SHUFFLE)))


def train_teacher(arch: MlpArchitecture, train: LabeledDataset, test: LabeledDataset | None,
                  cfg: TrainConfig, init_stream: int = STREAM_TEACHER):
    """Plain cross-entropy training. Returns ``(model, metrics)``."""
    model = init_model(arch, stream_seed(cfg.seed, init_stream))
    metrics = RunMetrics()
    rng = _shuffler(cfg)
    velocity = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        acc = _Epoch()
        lr = cfg.lr_at(epoch)
        for idx in _batches(rng, len(train), cfg.batch_size):
            rec = _forward(model, train.features[idx], metrics, f"epoch {epoch}")
            p = softmax_with_temperature(rec.logits, 1.0)
            onehot = np.eye(arch.n_classes)[train.labels[idx]]
            ce = cross_entropy(onehot, p)
            value = float(np.mean(ce))
            _check_finite(value, metrics, f"epoch {epoch}")
            metrics.steps.append((value, value, 0.0, 0.0, 0.0))
            acc.sums += idx.size * np.array([value, 0.0, 0.0, 0.0, value])
            acc.n += idx.size
            grad = backward(model, rec, (p - onehot) / idx.size)
            model, velocity = sgd_step(model, grad, lr, cfg.momentum, cfg.weight_decay, velocity)
        _record(metrics, epoch, acc.means(), model, train, test, "none", t0, cfg)
    return model, metrics


@dataclass
class _ContextTables:
    """Everything the in-context terms need for one bank."""

    bank: object
    probs_tau1: np.ndarray
    probs_nicd: np.ndarray
    positives: object = None
    negatives: object = None


def _context_tables(source: MlpModel, train: LabeledDataset, cfg: TrainConfig, epoch: int,
                    metrics: RunMetrics, need_pos: bool, need_neg: bool) -> _ContextTables:
    bank = build_bank(source, train, source_epoch=epoch)
    metrics.bank_builds += 1
    logits = forward(source, train.features).logits
    tables = _ContextTables(
        bank,
        softmax_with_temperature(logits, cfg.loss.tau1),
        softmax_with_temperature(logits, cfg.loss.tau_nicd),
    )
    if need_pos:
        k = len(bank) if cfg.ablation == "ickd_all" else None
        tables.positives = positive_table(bank, cfg.retrieval, k)
    if need_neg:
        tables.negatives = negative_table(bank, cfg.retrieval, epoch_seed=epoch)
    return tables


def _context_terms(tables: _ContextTables, idx, cfg: TrainConfig, metrics: RunMetrics):
    agg = negs = b = None
    if tables.positives is not None:
        pos_idx = tables.positives.indices[idx]
        w = tables.positives.weights[idx] if cfg.loss.use_a_weights else uniform_weights(pos_idx)
        agg = bank_mod.aggregate_probs(tables.probs_tau1, pos_idx, w)
        metrics.picd_evals += 1
    if tables.negatives is not None:
        neg_idx = tables.negatives.indices[idx]
        b = tables.negatives.weights[idx] if cfg.loss.use_b_weights else uniform_weights(neg_idx)
        negs = tables.probs_nicd[np.maximum(neg_idx, 0)]
        metrics.nicd_evals += 1
    return agg, negs, b


def distill_offline(teacher: MlpModel, student_arch: MlpArchitecture, train: LabeledDataset,
                    test: LabeledDataset | None, cfg: TrainConfig, student_stream: int = STREAM_STUDENT):
    """Offline IC-KD with a frozen teacher. Returns ``(student, metrics)``.

    The bank and positive retrieval are computed once; negatives are
    re-selected at the start of every epoch.
    """
    if teacher.architecture.n_classes != student_arch.n_classes:
        raise InvalidArgumentError("teacher and student disagree on the class count")
    metrics = RunMetrics()
    need_pos, need_neg = cfg.picd_active(), cfg.nicd_active()
    teacher_logits = forward(teacher, train.features).logits
    tables = None
    if need_pos or need_neg:
        tables = _context_tables(teacher, train, cfg, 0, metrics, need_pos, need_neg)
    student = init_model(student_arch, stream_seed(cfg.seed, student_stream))
    rng = _shuffler(cfg)
    velocity = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if need_neg and epoch > 0:
            tables.negatives = negative_table(tables.bank, cfg.retrieval, epoch_seed=epoch)
        acc = _Epoch()
        lr = cfg.lr_at(epoch)
        for idx in _batches(rng, len(train), cfg.batch_size):
            rec = _forward(student, train.features[idx], metrics, f"epoch {epoch}")
            agg = negs = b = None
            if tables is not None:
                agg, negs, b = _context_terms(tables, idx, cfg, metrics)
            loss = batch_mean(total_loss(train.labels[idx], rec.logits, teacher_logits[idx], agg, negs, b, cfg.loss))
            _check_finite(loss.value, metrics, f"epoch {epoch}")
            c = loss.components
            metrics.steps.append((loss.value, c["ce"], c["kd"], c["picd"], c["nicd"]))
            acc.add(loss, idx.size)
            grad = backward(student, rec, loss.logit_gradient)
            student, velocity = sgd_step(student, grad, lr, cfg.momentum, cfg.weight_decay, velocity)
        _record(metrics, epoch, acc.means(), student, train, test,
                tables.bank.checksum() if tables is not None else "none", t0, cfg)
    return student, metrics


@dataclass
class OnlineResult:
    student1: MlpModel
    student2: MlpModel
    metrics1: RunMetrics
    metrics2: RunMetrics


def distill_online(arch1: MlpArchitecture, arch2: MlpArchitecture, train: LabeledDataset,
                   test: LabeledDataset | None, cfg: TrainConfig) -> OnlineResult:
    """Two peers trained jointly; the bank comes from student 1 and is rebuilt every epoch.

    Student 2 receives CE + KD(student 1) + the in-context terms. Student 1
    receives CE + KD(student 2), plus mirrored in-context terms from a bank
    on student 2 when ``cfg.online_mirror`` is set. Both forward passes of a
    step are taken before either student is updated.
    """
    if arch1.n_classes != arch2.n_classes:
        raise InvalidArgumentError("peers disagree on the class count")
    s1 = init_model(arch1, stream_seed(cfg.seed, STREAM_STUDENT))
    peer = stream_seed(cfg.seed, STREAM_PEER) if cfg.peer_seed is None else stream_seed(cfg.peer_seed, STREAM_STUDENT)
    s2 = init_model(arch2, peer)
    m1, m2 = RunMetrics(), RunMetrics()
    need_pos, need_neg = cfg.picd_active(), cfg.nicd_active()
    rng = _shuffler(cfg)
    v1 = v2 = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        tab1 = _context_tables(s1, train, cfg, epoch, m2, need_pos, need_neg)
        tab2 = None
        if cfg.online_mirror:
            tab2 = _context_tables(s2, train, cfg, epoch, m1, need_pos, need_neg)
        e1, e2 = _Epoch(), _Epoch()
        lr = cfg.lr_at(epoch)
        for idx in _batches(rng, len(train), cfg.batch_size):
            y = train.labels[idx]
            r1 = _forward(s1, train.features[idx], m1, f"epoch {epoch}")
            r2 = _forward(s2, train.features[idx], m2, f"epoch {epoch}")
            agg, negs, b = _context_terms(tab1, idx, cfg, m2)
            loss2 = batch_mean(total_loss(y, r2.logits, r1.logits, agg, negs, b, cfg.loss))
            agg = negs = b = None
            if tab2 is not None:
                agg, negs, b = _context_terms(tab2, idx, cfg, m1)
            loss1 = batch_mean(total_loss(y, r1.logits, r2.logits, agg, negs, b, cfg.loss))
            for m, loss, e in ((m1, loss1, e1), (m2, loss2, e2)):
                _check_finite(loss.value, m, f"epoch {epoch}")
                c = loss.components
                m.steps.append((loss.value, c["ce"], c["kd"], c["picd"], c["nicd"]))
                e.add(loss, idx.size)
            g1 = backward(s1, r1, loss1.logit_gradient)
            g2 = backward(s2, r2, loss2.logit_gradient)
            s1, v1 = sgd_step(s1, g1, lr, cfg.momentum, cfg.weight_decay, v1)
            s2, v2 = sgd_step(s2, g2, lr, cfg.momentum, cfg.weight_decay, v2)
        _record(m1, epoch, e1.means(), s1, train, test, (tab2 or tab1).bank.checksum(), t0, cfg)
        _record(m2, epoch, e2.means(), s2, train, test, tab1.bank.checksum(), t0, cfg)
    return OnlineResult(s1, s2, m1, m2)


@dataclass
class TeacherFreeResult:
    baseline: MlpModel
    student: MlpModel
    baseline_metrics: RunMetrics
    metrics: RunMetrics


def distill_teacher_free(arch: MlpArchitecture, train: LabeledDataset, test: LabeledDataset | None,
                         cfg: TrainConfig) -> TeacherFreeResult:
    """Train a CE baseline of ``arch``, then distil it into a fresh copy of ``arch``."""
    baseline, base_metrics = train_teacher(arch, train, test, cfg)
    student, metrics = distill_offline(baseline, arch, train, test, cfg)
    return TeacherFreeResult(baseline, student, base_metrics, metrics)


def with_ablation(cfg: TrainConfig, ablation: str) -> TrainConfig:
    return replace(cfg, ablation=ablation)
