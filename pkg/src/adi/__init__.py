"""Adaptive domain inference: recover a black-box model's training domain from a dataset pool."""

from adi.attack import AttackConfig, AttackResult, extract_dataset, run_adi
from adi.datapool import Dataset, DatasetPool, MixSpec, build_mixed_target, synth_pool
from adi.hierarchy import ConceptHierarchy
from adi.metrics import normalized_entropy, otdd

__all__ = [
    "AttackConfig",
    "AttackResult",
    "ConceptHierarchy",
    "Dataset",
    "DatasetPool",
    "MixSpec",
    "build_mixed_target",
    "extract_dataset",
    "normalized_entropy",
    "otdd",
    "run_adi",
    "synth_pool",
]
