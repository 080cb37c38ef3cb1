"""Partition-aggregation ensemble defense against data poisoning.

Subpackages: fieldhash (prime-field hashing), dataset (data containers
and generators), partition (hash-based partitioning), learners (base
models and the width/FLOP cost model), aggregate (voting and
certificates), attack (backdoor simulation), harness (experiments, CLI).
"""
from .fieldhash import (HashPair, HashSpec, collision_stats, first_prime_above,
                        hash_labeled, is_prime, sample_weights, sort_by_hash)
from .dataset import (Dataset, LabeledSample, generate_blobs, load_dataset,
                      save_dataset, split, subsample_fraction)
from .partition import PartitionPlan, assign, build_plan
from .learners import (ArchCost, BaseModel, LearnerSpec, ensemble_flops,
                       flop_body, load_model, one_cycle_lr, save_model,
                       scaled_width, train, train_dataset)
from .aggregate import (Certificate, Ensemble, VoteTally, certify, dpa_predict,
                        load_ensemble, save_ensemble, tally, topn_aggregate)
from .attack import (AttackOutcome, AttackSpec, apply_patch,
                     attack_success_rate, clean_accuracy, overfitting_sweep,
                     poison)
from .harness import (ExperimentConfig, estimate_max_k, load_config,
                      run_experiment)

__all__ = [name for name in dir() if not name.startswith("_")]
