"""Desk-scale reproduction protocol shared by the acceptance suite.

One ``DeskSeed`` holds everything derived from a single seed of the
headline configuration: the clean and poisoned data, a benign and a
trojaned model trained under identical settings, and helpers to cleanse
the trojaned model under each subset/corruption variant.
"""

import copy
from dataclasses import dataclass

from .. import trainer as tr
from .. import trojanlab as tl
from ..rng import RngStream
from . import config as config_mod
from .experiment import build_datasets, build_finetune_subset, build_model, train_config

HEADLINE = {
    "dataset": {"kind": "synthetic", "K": 4, "n_per_class": 200, "n_test_per_class": 100,
                "shape": [1, 8, 8], "noise_sigma": 0.1},
    "architecture": {"kind": "mlp", "hidden": 128, "feature_dim": 32},
    "poison": {"delta": 0.1, "target_class": 0, "mode": "exact_count"},
    "train": {"epochs": 200, "metric_every": 10},
    "cleanse": {"method": "etf_ft", "fraction": 0.05},
}


def headline_config(seed, **overrides):
    """Resolved headline config with every seed domain set to ``seed``.

    Streams are separated by their domain labels, so sharing the master
    value across domains does not correlate them.
    """
    raw = copy.deepcopy(HEADLINE)
    raw["seeds"] = {name: int(seed) for name in ("data", "init", "poison", "etf", "shuffle")}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return config_mod.resolve(raw)


@dataclass
class TrainedRun:
    model: object
    timeline: object
    acc: float
    asr: float


class DeskSeed:
    def __init__(self, seed):
        self.seed = seed
        self.cfg = headline_config(seed)
        seeds = self.cfg["seeds"]
        self.train, self.test = build_datasets(self.cfg["dataset"], seeds)
        p = self.cfg["poison"]
        self.trigger = tl.TriggerSpec.from_dict(p["trigger"])
        self.target = int(p["target_class"])
        plan = tl.PoisonPlan(self.trigger, float(p["delta"]), self.target,
                             RngStream(seeds["poison"], "poison"), p["mode"])
        self.poisoned, self.ledger = tl.poison_dataset(self.train, plan)
        self.asr_set = tl.build_asr_eval_set(self.test, self.trigger, self.target)
        self._cache = {}

    def _init_model(self):
        return build_model(self.cfg["architecture"], self.train.shape, self.train.num_classes,
                           self.cfg["seeds"])

    def _train_cfg(self, stop_at_tpt=False):
        tcfg = train_config(self.cfg["train"], RngStream(self.cfg["seeds"]["shuffle"], "shuffle"))
        tcfg.stop_at_tpt = stop_at_tpt
        return tcfg

    def _finish(self, model, timeline):
        acc, asr = tr.evaluate(model, self.test, self.asr_set)
        return TrainedRun(model, timeline, acc, asr)

    def trojaned(self):
        if "trojaned" not in self._cache:
            model, timeline = tr.train(self._init_model(), self.poisoned, self.test, self.asr_set,
                                       self._train_cfg())
            self._cache["trojaned"] = self._finish(model, timeline)
        return self._cache["trojaned"]

    def benign(self):
        if "benign" not in self._cache:
            model, timeline = tr.train(self._init_model(), self.train, self.test, self.asr_set,
                                       self._train_cfg())
            self._cache["benign"] = self._finish(model, timeline)
        return self._cache["benign"]

    def not_overtrained(self):
        if "early" not in self._cache:
            model, timeline = tr.train(self._init_model(), self.poisoned, self.test, self.asr_set,
                                       self._train_cfg(stop_at_tpt=True))
            self._cache["early"] = self._finish(model, timeline)
        return self._cache["early"]

    def adaptive(self):
        if "adaptive" not in self._cache:
            model, timeline = tr.train_adaptive(self._init_model(), self.poisoned, self.test,
                                                self.asr_set, self._train_cfg(),
                                                RngStream(self.cfg["seeds"]["etf"], "etf/adaptive"))
            self._cache["adaptive"] = self._finish(model, timeline)
        return self._cache["adaptive"]

    def subset(self, fraction, corruption="none"):
        cfg = copy.deepcopy(self.cfg)
        cfg["cleanse"]["fraction"] = fraction
        cfg["cleanse"]["corruption"] = corruption
        return build_finetune_subset(cfg, self.train, self.ledger)

    def finetune_config(self):
        return train_config(self.cfg["cleanse"]["finetune"],
                            RngStream(self.cfg["seeds"]["shuffle"], "shuffle/finetune"))

    def cleanse(self, run, subset, method="etf_ft", etf_label="etf"):
        """(acc, asr) after cleansing ``run.model`` on ``subset``."""
        fcfg = self.finetune_config()
        if method == "etf_ft":
            out = tr.cleanse_etf_ft(run.model, subset, fcfg,
                                    RngStream(self.cfg["seeds"]["etf"], etf_label), self.ledger)
        else:
            out = tr.finetune_vanilla(run.model, subset, fcfg, self.ledger)
        return tr.evaluate(out, self.test, self.asr_set)

