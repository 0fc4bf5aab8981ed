"""End-to-end experiment: data -> poison -> train -> evaluate -> cleanse -> evaluate."""

import json
import logging
import os

from .. import dataforge as df
from .. import trainer as tr
from .. import trojanlab as tl
from .._accel import backend_name
from ..model import Model, cnn_layers, mlp_layers
from ..rng import RngStream
from . import checkpoint, report
from .config import dumps

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def build_datasets(ds, seeds):
    """(train, test) for a resolved dataset section."""
    if ds["kind"] == "synthetic":
        shape = tuple(int(s) for s in ds["shape"])
        train = df.generate_synthetic(int(ds["K"]), int(ds["n_per_class"]), shape,
                                      float(ds["noise_sigma"]), RngStream(seeds["data"], "data/train"))
        test = df.generate_synthetic(int(ds["K"]), int(ds["n_test_per_class"]), shape,
                                     float(ds["noise_sigma"]), RngStream(seeds["data"], "data/test"),
                                     split_tag="test", id_offset=len(train))
        return train, test
    if ds["kind"] == "idx":
        train = df.load_idx(ds["train_images"], ds["train_labels"])
        test = df.load_idx(ds["test_images"], ds["test_labels"], train.num_classes, "test")
        return train, test
    train = df.load_cifar_binary(ds["train_paths"])
    test = df.load_cifar_binary(ds["test_paths"], split_tag="test")
    return train, test


def build_model(arch, input_shape, K, seeds):
    if arch["kind"] == "mlp":
        layers = mlp_layers(input_shape, int(arch["hidden"]), int(arch["feature_dim"]))
    else:
        layers = cnn_layers(input_shape, int(arch["feature_dim"]), tuple(arch["channels"]))
    return Model.build(layers, input_shape, K, RngStream(seeds["init"], "init"), arch["kind"])


def train_config(section, seed_stream, metric_every=1, stop_at_tpt=False):
    return tr.TrainConfig(
        epochs=int(section["epochs"]), batch_size=int(section["batch_size"]),
        lr=float(section["lr"]), momentum=float(section["momentum"]),
        weight_decay=float(section["weight_decay"]), lr_schedule=section["lr_schedule"],
        milestones=tuple(section["milestones"]), gamma=float(section["gamma"]),
        metric_every=int(section.get("metric_every", metric_every)),
        stop_at_tpt=bool(section.get("stop_at_tpt", stop_at_tpt)), seed=seed_stream)


def trigger_from_config(poison):
    return tl.TriggerSpec.from_dict(poison["trigger"])


def build_finetune_subset(cfg, train, ledger):
    cl = cfg["cleanse"]
    data_seed = cfg["seeds"]["data"]
    exclude = ledger.poisoned_origin_ids if ledger is not None else None
    subset = df.sample_clean_subset(train, float(cl["fraction"]), RngStream(data_seed, "data/subset"),
                                    exclude_ids=exclude)
    corrupt = RngStream(data_seed, "corrupt")
    if cl["corruption"] == "imbalance":
        subset = df.apply_imbalance(subset, float(cl["imbalance_ratio"]), corrupt)
    elif cl["corruption"] == "erasure":
        lo, hi = df.scaled_erasure_sides(subset.shape)
        lo = int(cl["erasure_min_side"] or lo)
        hi = int(cl["erasure_max_side"] or hi)
        subset = df.apply_random_erasure(subset, float(cl["erasure_prob"]), lo, hi, corrupt)
    return subset


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg, out_dir=None):
    """Run a resolved config; returns the summary dict also written to summary.json."""
    out_dir = out_dir or os.getenv("NCTJ_OUT") or cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        fh.write(dumps(cfg))
    seeds = cfg["seeds"]
    summary = {"incomplete": True, "failed_stage": None, "backend": backend_name(),
               "poisoned": cfg["poison"] is not None, "adaptive": bool(cfg["adaptive"]),
               "cleanse_method": cfg["cleanse"]["method"], "acc_before": None, "asr_before": None,
               "acc_after": None, "asr_after": None, "tpt_start_epoch": None,
               "final_report": None, "poisoned_count": 0, "finetune_size": None, "files": []}
    files = summary["files"]
    stage = "data"
    try:
        train, test = build_datasets(cfg["dataset"], seeds)

        stage = "poison"
        ledger = asr_set = None
        train_data = train
        if cfg["poison"] is not None:
            p = cfg["poison"]
            trigger = trigger_from_config(p)
            plan = tl.PoisonPlan(trigger, float(p["delta"]), int(p["target_class"]),
                                 RngStream(seeds["poison"], "poison"), p["mode"])
            train_data, ledger = tl.poison_dataset(train, plan)
            asr_set = tl.build_asr_eval_set(test, trigger, int(p["target_class"]))
            with open(os.path.join(out_dir, "poison_ledger.json"), "w") as fh:
                fh.write(ledger.to_json() + "\n")
            files.append("poison_ledger.json")
            summary["poisoned_count"] = len(ledger)

        stage = "train"
        model = build_model(cfg["architecture"], train.shape, train.num_classes, seeds)
        tcfg = train_config(cfg["train"], RngStream(seeds["shuffle"], "shuffle"))
        if cfg["adaptive"]:
            model, timeline = tr.train_adaptive(model, train_data, test, asr_set, tcfg,
                                                RngStream(seeds["etf"], "etf/adaptive"), cfg["nc1_mode"])
        else:
            model, timeline = tr.train(model, train_data, test, asr_set, tcfg, cfg["nc1_mode"])
        summary["tpt_start_epoch"] = timeline.tpt_start_epoch
        summary["final_report"] = timeline.rows[-1].report.to_dict()
        extra = {} if cfg["poison"] is None else {"poison": cfg["poison"]}
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        checkpoint.save_checkpoint(model, os.path.join(out_dir, "checkpoints", "post_train.nctj"),
                                   timeline.rows[-1].epoch, seeds, extra)
        files.append("checkpoints/post_train.nctj")

        stage = "evaluate"
        summary["acc_before"], summary["asr_before"] = tr.evaluate(model, test, asr_set)

        stage = "report"
        written = report.emit_report(timeline, out_dir)
        files.extend(os.path.relpath(p, out_dir) for p in written)

        method = cfg["cleanse"]["method"]
        if method != "none":
            stage = "cleanse"
            subset = build_finetune_subset(cfg, train, ledger)
            summary["finetune_size"] = len(subset)
            fcfg = train_config(cfg["cleanse"]["finetune"], RngStream(seeds["shuffle"], "shuffle/finetune"))
            if method == "etf_ft":
                cleansed = tr.cleanse_etf_ft(model, subset, fcfg, RngStream(seeds["etf"], "etf"), ledger)
            else:
                cleansed = tr.finetune_vanilla(model, subset, fcfg, ledger)
            checkpoint.save_checkpoint(cleansed, os.path.join(out_dir, "checkpoints", "post_cleanse.nctj"),
                                       timeline.rows[-1].epoch, seeds, extra)
            files.append("checkpoints/post_cleanse.nctj")

            stage = "re-evaluate"
            summary["acc_after"], summary["asr_after"] = tr.evaluate(cleansed, test, asr_set)
        summary["incomplete"] = False
    except Exception as exc:
        summary["failed_stage"] = stage
        summary["error"] = f"{type(exc).__name__}: {exc}"
        _write_json(os.path.join(out_dir, "summary.json"), summary)
        raise StageError(stage, exc) from exc
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    log.info("run finished: acc %s -> %s, asr %s -> %s", summary["acc_before"], summary["acc_after"],
             summary["asr_before"], summary["asr_after"])
    return summary
