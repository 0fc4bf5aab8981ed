"""Experiment configuration: JSON in, fully default-filled dict out."""

import copy
import json

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "dataset": {
        "kind": "synthetic",  # synthetic | idx | cifar_binary
        "K": 4,
        "n_per_class": 200,
        "n_test_per_class": 100,
        "shape": [1, 8, 8],
        "noise_sigma": 0.1,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "train_paths": [],
        "test_paths": [],
    },
    "architecture": {
        "kind": "mlp",  # mlp | cnn
        "hidden": 128,
        "feature_dim": 32,
        "channels": [16, 32],
    },
    "poison": None,
    "adaptive": False,
    "train": {
        "epochs": 200,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "lr_schedule": "step",
        "milestones": [0.6, 0.8],
        "gamma": 0.1,
        "metric_every": 10,
        "stop_at_tpt": False,
    },
    "cleanse": {
        "method": "none",  # etf_ft | ft | none
        "fraction": 0.05,
        "corruption": "none",  # none | imbalance | erasure
        "imbalance_ratio": 10.0,
        "erasure_prob": 0.5,
        "erasure_min_side": None,  # None: 2 px scaled from 32x32
        "erasure_max_side": None,  # None: 8 px scaled from 32x32
        "finetune": {
            "epochs": 100,
            "batch_size": 4,
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "lr_schedule": "constant",
            "milestones": [0.6, 0.8],
            "gamma": 0.1,
        },
    },
    "nc1_mode": "literal_transpose",
    "seeds": {"data": 0, "init": 1, "poison": 2, "etf": 3, "shuffle": 4},
    "out_dir": "runs/experiment",
}

POISON_DEFAULTS = {
    "delta": 0.1,
    "target_class": 0,
    "mode": "exact_count",
    "trigger": {
        "kind": "patch",
        "patch": {"size": [3, 3], "position": "bottom_right", "offset": [0, 0], "color": [1.0]},
        "filter": {"grayscale_mix": 0.8, "vignette_strength": 0.6, "blur_radius": 1},
    },
}


def _merge(defaults, given, path):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {unknown}")
    out = {}
    for key, default in defaults.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key), sub)
        else:
            out[key] = copy.deepcopy(given.get(key, default))
    return out


def resolve(raw):
    """Fill defaults and validate; returns a plain dict safe to echo as JSON."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    poison = raw.get("poison")
    raw = dict(raw)
    raw.pop("poison", None)
    cfg = _merge(DEFAULTS, raw, "")
    cfg["poison"] = None if poison is None else _merge(POISON_DEFAULTS, poison, "poison")
    validate(cfg)
    return cfg


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg):
    ds = cfg["dataset"]
    _require(ds["kind"] in ("synthetic", "idx", "cifar_binary"), f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] == "synthetic":
        _require(int(ds["K"]) >= 2, "dataset.K must be >= 2")
        _require(int(ds["n_per_class"]) >= 1 and int(ds["n_test_per_class"]) >= 1,
                 "dataset sample counts must be >= 1")
        _require(len(ds["shape"]) == 3, "dataset.shape must be [C, H, W]")
        _require(float(ds["noise_sigma"]) >= 0, "dataset.noise_sigma must be >= 0")
    elif ds["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(bool(ds[key]), f"dataset.{key} is required for idx data")
    else:
        _require(bool(ds["train_paths"]) and bool(ds["test_paths"]),
                 "dataset.train_paths and dataset.test_paths are required for cifar_binary data")
    arch = cfg["architecture"]
    _require(arch["kind"] in ("mlp", "cnn"), f"unknown architecture {arch['kind']!r}")
    _require(int(arch["feature_dim"]) >= 1, "architecture.feature_dim must be >= 1")
    tr = cfg["train"]
    _require(int(tr["epochs"]) >= 1, "train.epochs must be >= 1")
    _require(int(tr["batch_size"]) >= 1, "train.batch_size must be >= 1")
    _require(float(tr["lr"]) > 0, "train.lr must be > 0")
    _require(int(tr["metric_every"]) >= 1, "train.metric_every must be >= 1")
    _require(tr["lr_schedule"] in ("constant", "step"), "train.lr_schedule must be constant or step")
    cl = cfg["cleanse"]
    _require(cl["method"] in ("etf_ft", "ft", "none"), f"unknown cleanse method {cl['method']!r}")
    _require(0 < float(cl["fraction"]) <= 1, "cleanse.fraction must be in (0, 1]")
    _require(cl["corruption"] in ("none", "imbalance", "erasure"),
             f"unknown corruption {cl['corruption']!r}")
    _require(float(cl["imbalance_ratio"]) >= 1, "cleanse.imbalance_ratio must be >= 1")
    _require(0 <= float(cl["erasure_prob"]) <= 1, "cleanse.erasure_prob must be in [0, 1]")
    ft = cl["finetune"]
    _require(int(ft["epochs"]) >= 0, "cleanse.finetune.epochs must be >= 0")
    _require(int(ft["batch_size"]) >= 1, "cleanse.finetune.batch_size must be >= 1")
    _require(float(ft["lr"]) >= 0, "cleanse.finetune.lr must be >= 0")
    _require(cfg["nc1_mode"] in ("literal_transpose", "pseudoinverse"), "unknown nc1_mode")
    seeds = cfg["seeds"]
    _require(set(seeds) == {"data", "init", "poison", "etf", "shuffle"},
             "seeds must define data, init, poison, etf and shuffle")
    for name, value in seeds.items():
        _require(isinstance(value, int) and 0 <= value <= MASK64, f"seed {name} must be a 64-bit integer")
    if cfg["poison"] is not None:
        p = cfg["poison"]
        _require(0 <= float(p["delta"]) < 1, "poison.delta must be in [0, 1)")
        _require(p["mode"] in ("exact_count", "bernoulli"), "poison.mode must be exact_count or bernoulli")
        _require(p["trigger"]["kind"] in ("patch", "filter"), "poison.trigger.kind must be patch or filter")
    _require(not cfg["adaptive"] or cfg["poison"] is not None, "adaptive training needs a poison plan")
    _require(isinstance(cfg["out_dir"], str) and cfg["out_dir"], "out_dir must be a non-empty path")


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve(raw)


def apply_seed_overrides(cfg, overrides):
    """Apply ``name=value`` seed overrides to a resolved config copy."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        name, sep, value = item.partition("=")
        if not sep or name not in cfg["seeds"]:
            raise ConfigError(f"bad seed override {item!r}; expected one of {sorted(cfg['seeds'])}=<int>")
        try:
            cfg["seeds"][name] = int(value, 0)
        except ValueError as exc:
            raise ConfigError(f"seed override {item!r} is not an integer") from exc
    validate(cfg)
    return cfg


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
