"""End-to-end experiment pieces shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

from scipy.stats import binomtest

from adi.attack import AttackConfig, AttackResult, extract_dataset, run_adi, uniform_pool_sample
from adi.config import InversionParams, MetricParams, OracleParams, PoolParams
from adi.datapool import Dataset, DatasetPool, MixSpec, build_mixed_target, rmt_encode, synth_pool
from adi.hierarchy import ConceptHierarchy
from adi.inversion import InversionConfig, evaluate_reconstructions, invert_all
from adi.metrics import leaf_recovery, otdd, target_concepts
from adi.oracle import Oracle, fit_centroid, train_softmax

# reconstruction counts as recovered above this confidence in its class
MI_CONFIDENCE = 0.5


@dataclass
class World:
    """The full synthetic pool, the private target, and the attacker's pool."""

    pool: DatasetPool
    target: Dataset
    attack_pool: DatasetPool

    @property
    def target_leaves(self) -> set[tuple[int, int]]:
        return target_concepts(self.target, self.attack_pool)


def build_world(p: PoolParams) -> World:
    pool = synth_pool(p.n_datasets, p.classes_per_dataset, p.dim, p.samples_per_class,
                      p.separation, p.seed)
    spec = (MixSpec(p.mix, sum(p.mix), p.mix_seed) if p.mix is not None
            else MixSpec.random(pool, 10, p.mix_seed))
    target, attack_pool = build_mixed_target(pool, spec, keep_in_pool=p.keep_in_pool)
    return World(pool, target, attack_pool)


def build_model(o: OracleParams, target: Dataset) -> Oracle:
    """Fit the private model, on block-encoded data when ``rmt_blocks`` > 0."""
    data = rmt_encode(target, o.rmt_blocks, o.rmt_seed) if o.rmt_blocks else target
    if o.kind == "softmax":
        model = train_softmax(data, o.lr, o.epochs, o.seed, o.weight_decay, o.train_fraction)
    else:
        model = fit_centroid(data, o.temperature, o.calibration_entropy, o.seed,
                             o.train_fraction)
    model.metadata["rmt_blocks"] = o.rmt_blocks
    return model


def attack(world: World, model: Oracle, cfg: AttackConfig) -> AttackResult:
    h = ConceptHierarchy.from_pool(world.attack_pool, rng_seed=cfg.seed)
    return run_adi(model, h, world.attack_pool, cfg)


def recovery(world: World, result: AttackResult, k: int = 10) -> tuple[float, float]:
    return leaf_recovery(result.hierarchy.snapshot(), world.target_leaves, k)


def extracted_at(world: World, result: AttackResult, epoch: int, m: MetricParams) -> Dataset:
    return extract_dataset(result.hierarchy, world.attack_pool, m.extract_samples, m.seed,
                           probs=result.probs_at(epoch), name=f"extracted@{epoch}")


def otdd_series(world: World, result: AttackResult, m: MetricParams,
                epochs: list[int] | None = None) -> list[tuple[int, float]]:
    cfg = m.sinkhorn()
    epochs = list(range(result.epochs_used + 1)) if epochs is None else epochs
    return [(e, otdd(extracted_at(world, result, e, m), world.target, cfg)) for e in epochs]


def otdd_baseline(world: World, m: MetricParams) -> float:
    sample = uniform_pool_sample(world.attack_pool, m.extract_samples, m.seed)
    return otdd(sample, world.target, m.sinkhorn())


def inversion_comparison(world: World, model: Oracle, aux: Dataset,
                         p: InversionParams) -> dict:
    """Reconstruct every class from aux-mean and from random starts.

    Random starts are Gaussian with the attacker pool's per-feature mean and
    spread. Accuracy counts reconstructions classified as their class with
    confidence above ``MI_CONFIDENCE``.
    """
    X, _ = world.attack_pool.flatten().arrays()
    center, scale = X.mean(axis=0), X.std(axis=0)
    out = {}
    for mode in ("aux-mean", "random"):
        cfg = InversionConfig(step=p.step, iterations=p.iterations, init=mode, seed=p.seed)
        recons = invert_all(model, cfg, aux=aux, center=center, scale=scale)
        out[mode] = {
            "accuracy": evaluate_reconstructions(model, recons, MI_CONFIDENCE),
            "confidence": [float(r.confidence[r.class_index]) for r in recons],
        }
    return out


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign-test p-value for ``wins`` out of the non-tied pairs."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)

