"""Training loops: plain/trojan training with NC instrumentation, ETF-FT
cleansing, vanilla fine-tuning and the fixed-ETF adaptive attack."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import collapse
from . import numkit as nk
from .errors import ContaminationError, NonFiniteError, TrainingFailure
from .etfkit import construct_etf, install_and_freeze
from .trojanlab import attack_success_rate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "step"  # constant | step
    milestones: tuple = (0.6, 0.8)  # fractions of ``epochs``
    gamma: float = 0.1
    metric_every: int = 10
    seed: object = None  # RngStream driving the per-epoch shuffle
    stop_at_tpt: bool = False

    def validate(self, allow_zero_epochs=False):
        if self.epochs < (0 if allow_zero_epochs else 1):
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.metric_every < 1:
            raise ValueError("metric_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.seed is None:
            raise ValueError("TrainConfig.seed (an RngStream) is required")

    def lr_at(self, epoch):
        """Learning rate used during 1-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.lr
        passed = sum(1 for f in self.milestones if epoch > round(f * self.epochs))
        return self.lr * self.gamma**passed

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["seed"] = None if self.seed is None else {"master_seed": self.seed.master_seed,
                                                   "label": self.seed.label}
        return d


@dataclass
class TimelineRow:
    epoch: int
    train_error: float
    test_acc: float
    asr: float  # None when no ASR set was given
    report: collapse.NCMetricsReport

    def to_dict(self):
        return {"epoch": self.epoch, "train_error": self.train_error, "test_acc": self.test_acc,
                "asr": self.asr, "report": self.report.to_dict()}


@dataclass
class MetricTimeline:
    rows: list = field(default_factory=list)
    tpt_start_epoch: int = None
    train_errors: list = field(default_factory=list)  # every epoch, 1-based

    def append(self, row):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("timeline epochs must be strictly increasing")
        self.rows.append(row)

    def row_at(self, epoch):
        for row in self.rows:
            if row.epoch == epoch:
                return row
        raise KeyError(epoch)

    def to_dict(self):
        return {"tpt_start_epoch": self.tpt_start_epoch, "train_errors": list(self.train_errors),
                "rows": [r.to_dict() for r in self.rows]}


def error_rate(model, data):
    return float(np.mean(model.predict(data.pixels) != data.labels))


def evaluate(model, test, asr_set=None):
    """(clean accuracy, attack success rate or None)."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    acc = float(np.mean(model.predict(test.pixels) == test.labels))
    asr = None if asr_set is None else attack_success_rate(model, asr_set)
    return acc, asr


def _run_epoch(model, data, cfg, epoch):
    lr = cfg.lr_at(epoch)
    perm = cfg.seed.child(f"epoch{epoch}").permutation(len(data))
    params = model.params
    total = 0.0
    for start in range(0, len(data), cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        params.zero_grad()
        loss = nk.softmax_cross_entropy(model.forward(data.pixels[idx]), data.labels[idx])
        total += loss.item() * idx.size
        if lr > 0:
            loss.backward()
            nk.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
    params.zero_grad()
    return total / len(data)


def fit(model, train_data, cfg, test_data=None, asr_set=None, record=True,
        nc1_mode="literal_transpose", allow_zero_epochs=False):
    """Train ``model`` in place with a fresh optimizer; returns its timeline."""
    cfg.validate(allow_zero_epochs)
    model.params.reset_state()
    timeline = MetricTimeline()
    last_good = 0
    for epoch in range(1, cfg.epochs + 1):
        try:
            loss = _run_epoch(model, train_data, cfg, epoch)
        except NonFiniteError as exc:
            raise TrainingFailure(f"training diverged in epoch {epoch}: {exc}", last_good) from exc
        last_good = epoch
        err = error_rate(model, train_data)
        timeline.train_errors.append(err)
        first_zero = err == 0.0 and timeline.tpt_start_epoch is None
        if first_zero:
            timeline.tpt_start_epoch = epoch
        final = epoch == cfg.epochs or (first_zero and cfg.stop_at_tpt)
        if record and (epoch % cfg.metric_every == 0 or final or first_zero):
            acc, asr = (None, None) if test_data is None else evaluate(model, test_data, asr_set)
            report = collapse.full_report(model, train_data, epoch, nc1_mode)
            timeline.append(TimelineRow(epoch, err, acc, asr, report))
            log.debug("epoch %d loss %.4f train_err %.4f acc %s asr %s", epoch, loss, err, acc, asr)
        if first_zero and cfg.stop_at_tpt:
            break
    return timeline


def train(model, train_data, test_data, asr_set, cfg, nc1_mode="literal_transpose"):
    """Mini-batch SGD with NC instrumentation; returns (trained copy, timeline)."""
    trained = model.copy()
    timeline = fit(trained, train_data, cfg, test_data, asr_set, True, nc1_mode)
    return trained, timeline


def _check_ledger(clean_subset, ledger):
    if ledger is None:
        return
    overlap = np.intersect1d(clean_subset.origin_ids,
                             np.asarray(ledger.poisoned_origin_ids, dtype=np.int64))
    if overlap.size:
        raise ContaminationError(f"clean subset contains {overlap.size} poisoned samples, "
                                 f"e.g. origin ids {overlap[:5].tolist()}")


def cleanse_etf_ft(model, clean_subset, cfg, etf_seed, ledger=None):
    """Replace the head with a frozen random simplex ETF, then fine-tune the rest."""
    _check_ledger(clean_subset, ledger)
    cleansed = model.copy()
    head = construct_etf(cleansed.num_classes, cleansed.feature_dim, etf_seed)
    install_and_freeze(cleansed, head)
    fit(cleansed, clean_subset, cfg, record=False, allow_zero_epochs=True)
    return cleansed


def finetune_vanilla(model, clean_subset, cfg, ledger=None):
    """Plain fine-tuning of every trainable parameter (the FT baseline)."""
    _check_ledger(clean_subset, ledger)
    tuned = model.copy()
    fit(tuned, clean_subset, cfg, record=False, allow_zero_epochs=True)
    return tuned


def train_adaptive(model, train_data, test_data, asr_set, cfg, etf_seed,
                   nc1_mode="literal_transpose"):
    """Adaptive attacker: the head is a frozen ETF from epoch 0."""
    adaptive = model.copy()
    install_and_freeze(adaptive, construct_etf(adaptive.num_classes, adaptive.feature_dim, etf_seed))
    timeline = fit(adaptive, train_data, cfg, test_data, asr_set, True, nc1_mode)
    return adaptive, timeline
