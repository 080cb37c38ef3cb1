"""Vote tallying, tie-broken ensemble prediction, top-n aggregation, and
exact per-input poisoning certificates.

Certificates are computed purely in integer vote counts. With y0 the
tie-broken winner and n_y the count for class y, the certified budget is

    radius = floor((n_y0 - max_{y != y0}(n_y + [y < y0])) / 2)

which is exact: each unit of symmetric-difference poisoning budget can
re-aim at most one base model's vote, and flipping a vote from the winner
to the strongest rival closes the gap by two per unit.

Models trained on empty partitions abstain: they contribute no vote to
any class and are treated as votes for a virtual never-winning class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .learners import BaseModel, load_model, save_model


@dataclass(frozen=True)
class VoteTally:
    counts: np.ndarray  # (num_classes,) integer votes
    k: int
    abstentions: int = 0

    def __post_init__(self):
        if int(self.counts.sum()) + self.abstentions != self.k:
            raise ValueError("counts + abstentions must sum to k")
        if self.abstentions < 0 or (self.counts < 0).any():
            raise ValueError("negative vote count")

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])


@dataclass(frozen=True)
class Certificate:
    predicted: int
    runner_up: int | None
    radius: int
    unbounded: bool = False


@dataclass(frozen=True)
class Ensemble:
    models: list[BaseModel]
    k: int
    num_classes: int
    plan_ref: str = ""
    abstain_mask: np.ndarray | None = None  # True where the model abstains

    def __post_init__(self):
        if len(self.models) != self.k:
            raise ValueError("need exactly k models")
        if any(m.num_classes != self.num_classes for m in self.models):
            raise ValueError("all models must share num_classes")

    def mask(self) -> np.ndarray:
        if self.abstain_mask is None:
            return np.zeros(self.k, dtype=bool)
        return self.abstain_mask


def tally(ensemble: Ensemble, x: np.ndarray) -> VoteTally:
    """Per-class counts of non-abstaining model votes for one input."""
    counts = np.zeros(ensemble.num_classes, dtype=np.int64)
    mask = ensemble.mask()
    abstentions = 0
    for model, abstain in zip(ensemble.models, mask):
        if abstain:
            abstentions += 1
        else:
            counts[model.predict(x)] += 1
    return VoteTally(counts=counts, k=ensemble.k, abstentions=abstentions)


def vote_matrix(ensemble: Ensemble, pixels: np.ndarray) -> np.ndarray:
    """(k, N) matrix of per-model predictions; abstainers get -1."""
    n = pixels.shape[0]
    votes = np.full((ensemble.k, n), -1, dtype=np.int64)
    mask = ensemble.mask()
    for i, (model, abstain) in enumerate(zip(ensemble.models, mask)):
        if not abstain:
            votes[i] = model.predict_batch(pixels)
    return votes


def tally_from_votes(votes_col: np.ndarray, k: int, num_classes: int) -> VoteTally:
    """Build a VoteTally from one column of a vote matrix."""
    valid = votes_col[votes_col >= 0]
    counts = np.bincount(valid, minlength=num_classes)
    return VoteTally(counts=counts.astype(np.int64), k=k,
                     abstentions=int(k - valid.size))


def dpa_predict(t: VoteTally) -> int:
    """Smallest class index among the argmax of vote counts."""
    return int(t.counts.argmax())


def certify(t: VoteTally) -> Certificate:
    """Exact certified poisoning budget for the tie-broken prediction."""
    y0 = dpa_predict(t)
    if t.num_classes == 1:
        return Certificate(predicted=y0, runner_up=None, radius=0, unbounded=True)
    adjusted = t.counts.copy()
    adjusted[:y0] += 1
    adjusted[y0] = -1  # excluded from the rival max
    runner_up = int(adjusted.argmax())
    gap = int(t.counts[y0]) - int(adjusted[runner_up])
    return Certificate(predicted=y0, runner_up=runner_up,
                       radius=max(0, gap // 2))


def topn_aggregate(ensemble: Ensemble, x: np.ndarray, n: int) -> list[int]:
    """Each non-abstaining model votes for its top-n classes; return the n
    classes with the largest aggregated counts (smaller index wins ties)."""
    if not 1 <= n <= ensemble.num_classes:
        raise ValueError(f"n must be in [1, {ensemble.num_classes}]")
    counts = np.zeros(ensemble.num_classes, dtype=np.int64)
    mask = ensemble.mask()
    for model, abstain in zip(ensemble.models, mask):
        if not abstain:
            for y in model.predict_topn(x, n):
                counts[y] += 1
    order = np.lexsort((np.arange(counts.size), -counts))
    return [int(i) for i in order[:n]]


def save_ensemble(ensemble: Ensemble, directory: str | Path,
                  plan_json: str = "", hash_spec_json: str = "") -> None:
    """Directory layout: plan.json, model_000.dpam ... and a manifest with
    the hash-spec reference and per-model fingerprints."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if plan_json:
        (directory / "plan.json").write_text(plan_json)
    fingerprints = []
    for i, model in enumerate(ensemble.models):
        save_model(model, directory / f"model_{i:03d}.dpam")
        fingerprints.append(model.training_fingerprint)
    manifest = {
        "k": ensemble.k,
        "num_classes": ensemble.num_classes,
        "plan_ref": ensemble.plan_ref,
        "hash_spec": json.loads(hash_spec_json) if hash_spec_json else None,
        "abstain_mask": ensemble.mask().tolist(),
        "fingerprints": fingerprints,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                        sort_keys=True))


def load_ensemble(directory: str | Path) -> Ensemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    k = int(manifest["k"])
    models = []
    for i in range(k):
        path = directory / f"model_{i:03d}.dpam"
        model = load_model(path)
        expected = manifest["fingerprints"][i]
        if model.training_fingerprint != expected:
            raise ValueError(f"{path}: fingerprint mismatch with manifest")
        models.append(model)
    mask = np.asarray(manifest["abstain_mask"], dtype=bool)
    return Ensemble(models=models, k=k, num_classes=int(manifest["num_classes"]),
                    plan_ref=manifest.get("plan_ref", ""), abstain_mask=mask)
