"""Center-patch backdoor poisoning and empirical robustness measurement.

The trigger is a square patch of constant intensity in the image center.
Poisoning patches a seeded random subset of the training set and rewrites
its labels to the target class; the attack success rate is the fraction
of patched validation inputs predicted as the target class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, subsample_fraction
from . import learners


@dataclass(frozen=True)
class AttackSpec:
    patch_size: int
    patch_value: int = 0
    target_class: int = 0
    budget_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0 <= self.patch_value <= 255:
            raise ValueError("patch_value must be a pixel intensity")
        if not 0.0 < self.budget_fraction < 1.0:
            raise ValueError("budget_fraction must be in (0, 1)")


@dataclass(frozen=True)
class AttackOutcome:
    poisoned_count: int
    attack_success_rate: float
    clean_accuracy: float


def apply_patch(pixels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Centered square patch (floor-centering for odd leftovers); idempotent."""
    pixels = np.asarray(pixels)
    batched = pixels.ndim == 4
    h, w = (pixels.shape[1], pixels.shape[2]) if batched else (pixels.shape[0], pixels.shape[1])
    s = spec.patch_size
    if s > min(h, w):
        raise ValueError(f"patch size {s} exceeds image {h}x{w}")
    r0, c0 = (h - s) // 2, (w - s) // 2
    out = pixels.copy()
    if batched:
        out[:, r0:r0 + s, c0:c0 + s, :] = spec.patch_value
    else:
        out[r0:r0 + s, c0:c0 + s, :] = spec.patch_value
    return out


def poison(dataset: Dataset, spec: AttackSpec) -> Dataset:
    """Patch and relabel a seeded uniform subset of round(budget * N) samples."""
    n = len(dataset)
    count = round(spec.budget_fraction * n)
    if count < 1:
        raise ValueError(f"budget {spec.budget_fraction} poisons zero of {n} samples")
    if spec.target_class >= dataset.num_classes:
        raise ValueError("target_class out of range")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    idx = rng.choice(n, size=count, replace=False)
    pixels = dataset.pixels.copy()
    labels = dataset.labels.copy()
    pixels[idx] = apply_patch(dataset.pixels[idx], spec)
    labels[idx] = spec.target_class
    return Dataset(pixels, labels, dataset.num_classes,
                   provenance=f"{dataset.provenance} | poison(s={spec.patch_size}, "
                              f"target={spec.target_class}, "
                              f"budget={spec.budget_fraction}, seed={spec.seed})")


def poisoned_count(dataset: Dataset, spec: AttackSpec) -> int:
    return round(spec.budget_fraction * len(dataset))


def attack_success_rate(predict_batch, valset: Dataset, spec: AttackSpec,
                        exclude_target_class: bool = True) -> float:
    """Fraction of patched validation inputs predicted as the target class.

    By default, validation samples whose true label already equals the
    target class are excluded from the denominator so correct predictions
    are never counted as attack successes; pass False for the raw
    whole-set protocol.
    """
    if len(valset) == 0:
        raise ValueError("valset is empty")
    patched = apply_patch(valset.pixels, spec)
    preds = np.asarray(predict_batch(patched))
    if exclude_target_class:
        keep = valset.labels != spec.target_class
        if not keep.any():
            raise ValueError("no validation samples outside the target class")
        preds = preds[keep]
    return float((preds == spec.target_class).mean())


def clean_accuracy(predict_batch, valset: Dataset) -> float:
    preds = np.asarray(predict_batch(valset.pixels))
    return float((preds == valset.labels).mean())


def overfitting_sweep(base_dataset: Dataset, spec: AttackSpec,
                      scales: list[float], learner_spec: learners.LearnerSpec,
                      valset: Dataset,
                      exclude_target_class: bool = True) -> list[tuple[int, float]]:
    """ASR of a single model at shrinking training sizes, fixed poison rate.

    Each scale subsamples the training set, poisons the same fraction of
    it, trains one model, and measures ASR on the patched validation set.
    Returns (train_size, asr) pairs in the given scale order.
    """
    curve = []
    for scale in scales:
        if not 0.0 < scale <= 1.0:
            raise ValueError(f"scale {scale} outside (0, 1]")
        if scale == 1.0:
            subset = base_dataset
        else:
            subset = subsample_fraction(base_dataset, scale, spec.seed)
        if len(subset) < base_dataset.num_classes:
            raise ValueError(f"scale {scale} leaves fewer samples than classes")
        if poisoned_count(subset, spec) < 1:
            raise ValueError(f"scale {scale} leaves a zero-size poison set")
        poisoned = poison(subset, spec)
        model = learners.train_dataset(learner_spec, poisoned)
        asr = attack_success_rate(model.predict_batch, valset, spec,
                                  exclude_target_class)
        curve.append((len(subset), asr))
    return curve
