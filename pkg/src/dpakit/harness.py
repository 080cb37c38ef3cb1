"""Experiment orchestration: config, training pipelines, persistence,
and report generation.

A run is fully determined by its config file: every seed is explicit and
per-partition training seeds are derived as mix(global_seed, k, i), so
reports and ensembles are byte-identical across reruns and worker
counts. Wall-clock timings go to a sidecar file (timings.json), never
into the report itself, to keep report bytes reproducible.
"""
from __future__ import annotations

import csv
import json
import os
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aggregate, attack, dataset as ds, learners, partition
from .fieldhash import HashSpec, collision_stats

OUTPUT_DIR_ENV = "DPAKIT_OUT"


class StageError(RuntimeError):
    """Wraps a failure with the name of the pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def mix_seed(*parts: int) -> int:
    """Derive a child seed from integer parts (splitmix64 chain)."""
    state = 0x9E3779B97F4A7C15
    for part in parts:
        state = (state + int(part) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        state = z ^ (z >> 31)
    return state


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    generator: str = "blobs"
    dataset_file: str = ""
    dataset_seed: int = 0
    num_classes: int = 5
    per_class: int = 100
    shape: tuple[int, int, int] = (8, 8, 3)
    noise: int = 20
    split_fraction: float = 0.8
    split_seed: int = 1
    # hash
    hash_seed: int = 0
    # dpa
    k_values: tuple[int, ...] = (1, 4, 16)
    learner_kind: str = "nearest_centroid"
    base_width: int = 32
    epochs: int = 20
    batch_size: int = 32
    lr_start: float = 0.05
    lr_peak: float = 1.0
    lr_final: float = 0.0005
    train_seed: int = 0
    fraction_mode: str = "partition"  # or "random": how 1/k-data probes pick data
    # attacks
    attacks: tuple[attack.AttackSpec, ...] = ()
    # eval
    topn: tuple[int, ...] = (1,)
    # output
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.k_values:
            raise ValueError("k list must be nonempty")
        if self.fraction_mode not in ("partition", "random"):
            raise ValueError("fraction_mode must be 'partition' or 'random'")

    def learner_spec(self, seed: int, k: int = 1) -> learners.LearnerSpec:
        width = learners.scaled_width(self.base_width, k) \
            if self.learner_kind == "mlp" else self.base_width
        return learners.LearnerSpec(
            kind=self.learner_kind, hidden_width=width, epochs=self.epochs,
            batch_size=self.batch_size, lr_start=self.lr_start,
            lr_peak=self.lr_peak, lr_final=self.lr_final, seed=seed)

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.out_dir))

    def to_dict(self) -> dict:
        return {
            "dataset": {"generator": self.generator, "file": self.dataset_file,
                        "seed": self.dataset_seed, "num_classes": self.num_classes,
                        "per_class": self.per_class, "shape": list(self.shape),
                        "noise": self.noise, "split_fraction": self.split_fraction,
                        "split_seed": self.split_seed},
            "hash": {"seed": self.hash_seed},
            "dpa": {"k": list(self.k_values), "learner": self.learner_kind,
                    "base_width": self.base_width, "epochs": self.epochs,
                    "batch_size": self.batch_size, "lr_start": self.lr_start,
                    "lr_peak": self.lr_peak, "lr_final": self.lr_final,
                    "seed": self.train_seed, "fraction_mode": self.fraction_mode},
            "attacks": [{"patch_size": a.patch_size, "patch_value": a.patch_value,
                         "target_class": a.target_class,
                         "budget_fraction": a.budget_fraction, "seed": a.seed}
                        for a in self.attacks],
            "eval": {"topn": list(self.topn)},
            "output": {"dir": self.out_dir},
        }


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment config from a TOML file (format in the README)."""
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    d = raw.get("dataset", {})
    h = raw.get("hash", {})
    p = raw.get("dpa", {})
    e = raw.get("eval", {})
    o = raw.get("output", {})
    attacks = tuple(
        attack.AttackSpec(patch_size=int(a["patch_size"]),
                          patch_value=int(a.get("patch_value", 0)),
                          target_class=int(a.get("target_class", 0)),
                          budget_fraction=float(a.get("budget_fraction", 0.01)),
                          seed=int(a.get("seed", 0)))
        for a in raw.get("attack", []))
    return ExperimentConfig(
        generator=d.get("generator", "blobs"),
        dataset_file=d.get("file", ""),
        dataset_seed=int(d.get("seed", 0)),
        num_classes=int(d.get("num_classes", 5)),
        per_class=int(d.get("per_class", 100)),
        shape=tuple(d.get("shape", [8, 8, 3])),
        noise=int(d.get("noise", 20)),
        split_fraction=float(d.get("split_fraction", 0.8)),
        split_seed=int(d.get("split_seed", 1)),
        hash_seed=int(h.get("seed", 0)),
        k_values=tuple(int(k) for k in p.get("k", [1, 4, 16])),
        learner_kind=p.get("learner", "nearest_centroid"),
        base_width=int(p.get("base_width", 32)),
        epochs=int(p.get("epochs", 20)),
        batch_size=int(p.get("batch_size", 32)),
        lr_start=float(p.get("lr_start", 0.05)),
        lr_peak=float(p.get("lr_peak", 1.0)),
        lr_final=float(p.get("lr_final", 0.0005)),
        train_seed=int(p.get("seed", 0)),
        fraction_mode=p.get("fraction_mode", "partition"),
        attacks=attacks,
        topn=tuple(int(n) for n in e.get("topn", [1])),
        out_dir=o.get("dir", "runs/experiment"),
    )


def load_train_val(config: ExperimentConfig) -> tuple[ds.Dataset, ds.Dataset]:
    if config.dataset_file:
        full = ds.load_dataset(config.dataset_file)
    else:
        full = ds.generate_blobs(config.dataset_seed, config.num_classes,
                                 config.per_class, config.shape, config.noise)
    return ds.split(full, config.split_fraction, config.split_seed)


def _train_one(args):
    spec, pixels, labels, num_classes, shape = args
    return learners.train(spec, pixels, labels, num_classes, shape)


def train_ensemble(trainset: ds.Dataset, plan: partition.PartitionPlan,
                   config: ExperimentConfig, workers: int = 1,
                   out_dir: Path | None = None) -> aggregate.Ensemble:
    """Train one model per partition; empty partitions abstain.

    If out_dir already holds valid model files, those partitions are
    reused instead of retrained (resume support).
    """
    k = plan.k
    abstain = plan.member_counts == 0
    jobs: list[tuple[int, tuple]] = []
    models: list[learners.BaseModel | None] = [None] * k
    for i in range(k):
        if abstain[i]:
            models[i] = _abstain_model(trainset, config)
            continue
        if out_dir is not None:
            cached = _load_cached_model(out_dir / f"model_{i:03d}.dpam")
            if cached is not None:
                models[i] = cached
                continue
        spec = config.learner_spec(seed=mix_seed(config.train_seed, k, i), k=k)
        idx = plan.members(i)
        jobs.append((i, (spec, trainset.pixels[idx], trainset.labels[idx],
                         trainset.num_classes, trainset.shape)))
    if jobs:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                trained = list(pool.map(_train_one, [j[1] for j in jobs]))
        else:
            trained = [_train_one(j[1]) for j in jobs]
        for (i, _), model in zip(jobs, trained):
            models[i] = model
    return aggregate.Ensemble(models=models, k=k, num_classes=trainset.num_classes,
                              plan_ref=f"k={k}", abstain_mask=abstain)


def _abstain_model(trainset: ds.Dataset, config: ExperimentConfig) -> learners.BaseModel:
    # Placeholder holding the shape contract; never queried for votes.
    h, w, c = trainset.shape
    params = {"centroids": np.zeros((trainset.num_classes, h * w * c)),
              "missing_penalty": np.full(trainset.num_classes, 1e30)}
    return learners.BaseModel("nearest_centroid", trainset.num_classes,
                              trainset.shape, params, "abstain")


def _load_cached_model(path: Path) -> learners.BaseModel | None:
    if not path.exists():
        return None
    try:
        return learners.load_model(path)
    except (learners.ModelFormatError, ValueError):
        return None


def topn_accuracy(ensemble: aggregate.Ensemble, valset: ds.Dataset,
                  ns: tuple[int, ...]) -> dict[int, float]:
    """acc@n via aggregated top-n voting, batched over the validation set."""
    n_val = len(valset)
    num_classes = ensemble.num_classes
    mask = ensemble.mask()
    accs = {}
    for n in ns:
        counts = np.zeros((n_val, num_classes), dtype=np.int64)
        for model, abstain in zip(ensemble.models, mask):
            if abstain:
                continue
            scores = model.scores(valset.pixels)
            top = np.argsort(-scores, axis=1, kind="stable")[:, :n]
            np.add.at(counts, (np.arange(n_val)[:, None], top), 1)
        ranked = np.argsort(-counts, axis=1, kind="stable")[:, :n]
        hit = (ranked == valset.labels[:, None]).any(axis=1)
        accs[n] = float(hit.mean())
    return accs


def certificates_for(ensemble: aggregate.Ensemble,
                     valset: ds.Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, radii) over the validation set, vectorized."""
    votes = aggregate.vote_matrix(ensemble, valset.pixels)
    n_val = votes.shape[1]
    num_classes = ensemble.num_classes
    counts = np.zeros((n_val, num_classes), dtype=np.int64)
    for c in range(num_classes):
        counts[:, c] = (votes == c).sum(axis=0)
    y0 = counts.argmax(axis=1)
    adjusted = counts + (np.arange(num_classes)[None, :] < y0[:, None])
    rows = np.arange(n_val)
    adjusted[rows, y0] = -1
    gap = counts[rows, y0] - adjusted.max(axis=1)
    radius = np.maximum(0, gap // 2)
    return y0, radius


def certified_accuracy_curve(y0: np.ndarray, radius: np.ndarray,
                             labels: np.ndarray) -> list[float]:
    """Fraction of points with correct prediction and radius >= r, r=0.."""
    correct = y0 == labels
    max_r = int(radius.max(initial=0))
    return [float((correct & (radius >= r)).mean()) for r in range(max_r + 1)]


def _fraction_trainset(trainset: ds.Dataset, plan: partition.PartitionPlan,
                       k: int, config: ExperimentConfig) -> ds.Dataset:
    if config.fraction_mode == "partition":
        return trainset.take(plan.members(0))
    return ds.subsample_fraction(trainset, 1.0 / k,
                                 mix_seed(config.train_seed, k, 0xF))


def run_experiment(config: ExperimentConfig, workers: int = 1) -> dict:
    """Full pipeline: hash, partition per k, train, evaluate, report.

    Writes report.json, CSV tables, ensembles, and a timings sidecar into
    the output directory. Returns the report dict.
    """
    out = config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    def staged(stage, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - t0
        return result

    trainset, valset = staged("dataset", load_train_val, config)
    spec = staged("hash", HashSpec.for_input_dim, trainset.input_dim,
                  config.hash_seed)

    rows = []
    for k in sorted(set(config.k_values)):
        plan = staged(f"partition[k={k}]", partition.build_plan, trainset, spec, k)
        ens_dir = out / f"ensemble_k{k}"
        ens_dir.mkdir(exist_ok=True)
        ensemble = staged(f"train[k={k}]", train_ensemble, trainset, plan,
                          config, workers, ens_dir)
        aggregate.save_ensemble(ensemble, ens_dir, plan.to_json("hash_spec.json"),
                                spec.to_json())
        (out / "hash_spec.json").write_text(spec.to_json())

        accs = staged(f"eval[k={k}]", topn_accuracy, ensemble, valset, config.topn)
        y0, radius = certificates_for(ensemble, valset)
        curve = certified_accuracy_curve(y0, radius, valset.labels)

        frac_path = out / f"single_fraction_k{k}.dpam"
        frac_model = _load_cached_model(frac_path)
        if frac_model is None:
            frac_set = _fraction_trainset(trainset, plan, k, config)
            frac_spec = config.learner_spec(
                seed=mix_seed(config.train_seed, k, 0xA), k=k)
            frac_model = staged(f"fraction[k={k}]", learners.train_dataset,
                                frac_spec, frac_set)
            learners.save_model(frac_model, frac_path)
        frac_ens = aggregate.Ensemble([frac_model], 1, trainset.num_classes)
        frac_accs = topn_accuracy(frac_ens, valset, config.topn)

        asr = {}
        for a in config.attacks:
            label = f"s={a.patch_size},budget={a.budget_fraction}"
            poisoned = attack.poison(trainset, a)
            p_plan = partition.build_plan(poisoned, spec, k)
            p_ens = staged(f"attack_train[k={k}]", train_ensemble, poisoned,
                           p_plan, config, workers, None)
            py0, _ = certificates_for(p_ens, ds.Dataset(
                attack.apply_patch(valset.pixels, a), valset.labels,
                valset.num_classes))
            keep = valset.labels != a.target_class
            asr[label] = float((py0[keep] == a.target_class).mean())

        rows.append({
            "k": k,
            "clean_acc": {str(n): accs[n] for n in config.topn},
            "mean_radius": float(radius.mean()),
            "median_radius": float(np.median(radius)),
            "certified_acc_at_r": curve,
            "single_fraction_acc": {str(n): frac_accs[n] for n in config.topn},
            "asr": asr,
        })

    report = {"config": config.to_dict(), "rows": rows}
    write_report(report, out)
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    return report


def write_report(report: dict, out: Path) -> None:
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    topn = report["config"]["eval"]["topn"]
    with open(out / "accuracy_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k"] + [f"acc@{n}" for n in topn]
                   + ["mean_radius", "median_radius"])
        for row in report["rows"]:
            w.writerow([row["k"]] + [row["clean_acc"][str(n)] for n in topn]
                       + [row["mean_radius"], row["median_radius"]])
    with open(out / "data_complexity_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k"] + [f"dpa_acc@{n}" for n in topn]
                   + [f"single_1/k_acc@{n}" for n in topn])
        for row in report["rows"]:
            w.writerow([row["k"]] + [row["clean_acc"][str(n)] for n in topn]
                       + [row["single_fraction_acc"][str(n)] for n in topn])
    attack_labels = sorted({lbl for row in report["rows"] for lbl in row["asr"]})
    if attack_labels:
        with open(out / "robustness_table.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["k"] + attack_labels)
            for row in report["rows"]:
                w.writerow([row["k"]] + [row["asr"].get(lbl, "")
                                         for lbl in attack_labels])


def estimate_max_k(config: ExperimentConfig, accuracy_floor: float,
                   k_probes: tuple[int, ...] | None = None) -> int:
    """Largest probed k whose single-model-on-1/k-data accuracy clears the
    floor; cheap single-model probes instead of full ensembles."""
    if not 0.0 < accuracy_floor <= 1.0:
        raise ValueError("accuracy_floor must be in (0, 1]")
    trainset, valset = load_train_val(config)
    probes = tuple(sorted(set(k_probes or config.k_values)))
    best = 1
    for k in probes:
        if len(trainset) // k < trainset.num_classes:
            break
        subset = ds.subsample_fraction(trainset, 1.0 / k,
                                       mix_seed(config.train_seed, k, 0xE))
        spec = config.learner_spec(seed=mix_seed(config.train_seed, k, 0xD), k=k)
        model = learners.train_dataset(spec, subset)
        acc = attack.clean_accuracy(model.predict_batch, valset)
        if acc >= accuracy_floor:
            best = max(best, k)
    return best


def hash_audit(config: ExperimentConfig) -> dict:
    """Collision statistics for the configured dataset and hash seed."""
    trainset, _ = load_train_val(config)
    spec = HashSpec.for_input_dim(trainset.input_dim, config.hash_seed)
    return collision_stats(trainset, spec)
