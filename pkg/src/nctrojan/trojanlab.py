"""Triggers, data poisoning and attack-success-rate evaluation."""

import json
from dataclasses import dataclass, field

import numpy as np

from .dataforge import Dataset, LabeledImage, round_half_up

CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PatchTrigger:
    size: tuple = (3, 3)
    position: str = "bottom_right"  # a corner name
    offset: tuple = (0, 0)  # inward (row, col) shift from the corner
    color: tuple = (1.0,)  # per channel; a single value is broadcast

    def region(self, shape):
        _, h, w = shape
        ph, pw = self.size
        dr, dc = self.offset
        if self.position not in CORNERS:
            raise ValueError(f"position must be one of {CORNERS}")
        top = h - ph - dr if self.position.startswith("bottom") else dr
        left = w - pw - dc if self.position.endswith("right") else dc
        if ph < 0 or pw < 0 or top < 0 or left < 0 or top + ph > h or left + pw > w:
            raise ValueError(f"patch {self.size} at {self.position}+{self.offset} "
                             f"does not fit a {h}x{w} image")
        return slice(top, top + ph), slice(left, left + pw)


@dataclass(frozen=True)
class FilterTrigger:
    """Grayscale mix, box blur and radial vignette; a stand-in for photo filters."""

    grayscale_mix: float = 0.8
    vignette_strength: float = 0.6
    blur_radius: int = 1


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "patch"
    patch: PatchTrigger = field(default_factory=PatchTrigger)
    filter: FilterTrigger = field(default_factory=FilterTrigger)

    def validate(self, shape):
        if self.kind == "patch":
            self.patch.region(shape)
            if len(self.patch.color) not in (1, shape[0]):
                raise ValueError(f"patch color needs 1 or {shape[0]} channels")
            if not all(0.0 <= c <= 1.0 for c in self.patch.color):
                raise ValueError("patch color values must lie in [0, 1]")
        elif self.kind == "filter":
            f = self.filter
            if not 0.0 <= f.grayscale_mix <= 1.0:
                raise ValueError("grayscale_mix must be in [0, 1]")
            if f.vignette_strength < 0 or f.blur_radius < 0:
                raise ValueError("vignette_strength and blur_radius must be non-negative")
        else:
            raise ValueError(f"unknown trigger kind {self.kind!r}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "patch": {"size": list(self.patch.size), "position": self.patch.position,
                      "offset": list(self.patch.offset), "color": list(self.patch.color)},
            "filter": {"grayscale_mix": self.filter.grayscale_mix,
                       "vignette_strength": self.filter.vignette_strength,
                       "blur_radius": self.filter.blur_radius},
        }

    @classmethod
    def from_dict(cls, d):
        p = d.get("patch", {})
        f = d.get("filter", {})
        return cls(
            kind=d.get("kind", "patch"),
            patch=PatchTrigger(tuple(p.get("size", (3, 3))), p.get("position", "bottom_right"),
                               tuple(p.get("offset", (0, 0))), tuple(p.get("color", (1.0,)))),
            filter=FilterTrigger(float(f.get("grayscale_mix", 0.8)),
                                 float(f.get("vignette_strength", 0.6)),
                                 int(f.get("blur_radius", 1))),
        )


def _gray(x):
    if x.shape[1] == 3:
        g = LUMA[0] * x[:, 0] + LUMA[1] * x[:, 1] + LUMA[2] * x[:, 2]
    else:
        g = x.mean(axis=1)
    return np.repeat(g[:, None], x.shape[1], axis=1)


def _box_blur(x, radius):
    if radius == 0:
        return x
    h, w = x.shape[-2:]
    padded = np.pad(x, ((0, 0), (0, 0), (radius, radius), (radius, radius)), mode="edge")
    out = np.zeros_like(x)
    span = 2 * radius + 1
    for di in range(span):
        for dj in range(span):
            out += padded[:, :, di:di + h, dj:dj + w]
    return out / span**2


def vignette_mask(h, w, strength):
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    r2 = (xx**2 + yy**2) / 2.0
    return np.clip(1.0 - strength * r2, 0.0, 1.0)


def trigger_pixels(pixels, spec):
    """Apply ``spec`` to a (N, C, H, W) batch; returns a new float32 array."""
    pixels = np.asarray(pixels, dtype=np.float32)
    spec.validate(pixels.shape[1:])
    if spec.kind == "patch":
        out = pixels.copy()
        rows, cols = spec.patch.region(pixels.shape[1:])
        color = np.broadcast_to(np.asarray(spec.patch.color, np.float32), (pixels.shape[1],))
        out[:, :, rows, cols] = color[None, :, None, None]
        return out
    f = spec.filter
    x = pixels.astype(np.float64)
    mixed = f.grayscale_mix * _gray(x) + (1.0 - f.grayscale_mix) * x
    blurred = _box_blur(mixed, f.blur_radius)
    out = blurred * vignette_mask(*x.shape[-2:], f.vignette_strength)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_trigger(image, spec):
    """kappa(x) for one image; the label is left alone."""
    out = trigger_pixels(image.pixels[None], spec)[0]
    return LabeledImage(out, image.label, image.origin_id)


@dataclass
class PoisonPlan:
    trigger: TriggerSpec
    delta: float
    target_class: int
    seed: object  # RngStream
    mode: str = "exact_count"  # or "bernoulli"

    def validate(self, dataset):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")
        if not 0 <= self.target_class < dataset.num_classes:
            raise ValueError(f"target_class must be in [0, {dataset.num_classes})")
        if self.mode not in ("exact_count", "bernoulli"):
            raise ValueError(f"unknown poisoning mode {self.mode!r}")
        self.trigger.validate(dataset.shape)


@dataclass
class PoisonLedger:
    target_class: int
    delta: float
    mode: str
    poisoned_origin_ids: list

    def __len__(self):
        return len(self.poisoned_origin_ids)

    def to_json(self):
        return json.dumps({"target_class": self.target_class, "delta": self.delta,
                           "mode": self.mode,
                           "poisoned_origin_ids": [int(i) for i in self.poisoned_origin_ids]})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(int(d["target_class"]), float(d["delta"]), d["mode"],
                   [int(i) for i in d["poisoned_origin_ids"]])


def poison_dataset(train, plan):
    """Replace selected non-target samples with kappa(x) relabeled k_T.

    exact_count picks round(delta * n_k) per non-target class via a seeded
    shuffle; bernoulli flips an independent delta-coin per sample.
    """
    plan.validate(train)
    chosen = []
    if plan.delta > 0:
        for k in range(train.num_classes):
            if k == plan.target_class:
                continue
            members = np.nonzero(train.labels == k)[0]
            if plan.mode == "exact_count":
                count = round_half_up(plan.delta * members.size)
                perm = plan.seed.child(f"class{k}").permutation(members.size)
                chosen.append(np.sort(members[perm[:count]]))
            else:
                coins = plan.seed.child(f"class{k}").bernoulli(plan.delta, members.size)
                chosen.append(members[coins])
    index = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    pixels = train.pixels.copy()
    labels = train.labels.copy()
    if index.size:
        pixels[index] = trigger_pixels(train.pixels[index], plan.trigger)
        labels[index] = plan.target_class
    ledger = PoisonLedger(plan.target_class, plan.delta, plan.mode,
                          [int(i) for i in train.origin_ids[index]])
    return train.replace(pixels=pixels, labels=labels), ledger


def build_asr_eval_set(test, trigger, k_T):
    """Triggered copies of every non-target test sample, all labeled k_T."""
    keep = np.nonzero(test.labels != k_T)[0]
    if keep.size == 0:
        raise ValueError(f"test set contains only the target class {k_T}")
    src = test.subset(keep)
    pixels = trigger_pixels(src.pixels, trigger)
    return Dataset(pixels, np.full(keep.size, k_T), test.num_classes, src.origin_ids, test.split_tag)


def attack_success_rate(model, asr_set):
    """Fraction of the ASR set predicted as the target class."""
    if len(asr_set) == 0:
        raise ValueError("ASR set is empty")
    k_T = int(asr_set.labels[0])
    return float(np.mean(model.predict(asr_set.pixels) == k_T))
