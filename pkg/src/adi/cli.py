"""Command-line driver: ``adi <command> --config exp.cfg``.

Every command reads and writes artifacts under the config's output
directory and records what it did in ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from adi import experiment
from adi.attack import (
    extract_dataset,
    read_leaf_probs,
    read_trace,
    write_leaf_probs,
    write_trace,
)
from adi.config import ExperimentConfig, dump_config, load_config
from adi.datapool import (
    load_dataset,
    load_pool,
    load_provenance,
    save_dataset,
    save_pool,
    save_provenance,
    with_provenance,
)
from adi.errors import ADIError, ConfigError
from adi.hierarchy import ConceptHierarchy
from adi.metrics import access_cost_model, leaf_recovery
from adi.oracle import load_model, save_model
from adi.service import RemoteOracle, ServiceConfig, serve

log = logging.getLogger("adi")

SWEEPS = {
    "lambda": ("lam", (0.77, 0.80, 0.83, 0.86, 0.89)),
    "delta": ("delta_scale", (0.1, 1.0, 10.0)),
    "batch": ("batch_size", (100, 200, 500, 1000)),
}


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# --- artifact helpers --------------------------------------------------------

def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ADIError(f"missing artifact: expected {path} (produced by `adi {producer}`)")
    return path


def read_kv(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def update_summary(outdir: Path, values: dict) -> None:
    path = outdir / "summary.txt"
    data = read_kv(path)
    for k, v in values.items():
        data[k] = repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v)
    path.write_text("".join(f"{k}={v}\n" for k, v in data.items()))


def write_manifest(outdir: Path, command: str, cfg: ExperimentConfig, inputs: list[Path],
                   outputs: list[Path], extra: dict | None = None) -> None:
    path = outdir / "manifest.txt"
    parser = configparser.ConfigParser(interpolation=None)
    if path.exists():
        parser.read(path)
    parser[command] = {
        "tool_version": tool_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "inputs": " ".join(sorted(p.name for p in inputs)),
        "outputs": " ".join(sorted(p.name for p in outputs)),
        "pool_seed": str(cfg.datapool.seed),
        "mix_seed": str(cfg.datapool.mix_seed),
        "oracle_seed": str(cfg.oracle.seed),
        "attack_seed": str(cfg.attack.seed),
        "metrics_seed": str(cfg.metrics.seed),
        "inversion_seed": str(cfg.inversion.seed),
        **{k: str(v) for k, v in (extra or {}).items()},
    }
    with path.open("w") as fh:
        parser.write(fh)


def _world_from_disk(out: Path) -> experiment.World:
    pool = load_pool(_need(out / "pool.adip", "synth"))
    attack_pool = load_pool(_need(out / "attack_pool.adip", "synth"))
    target = load_dataset(_need(out / "target.adid", "synth"), "target")
    prov = load_provenance(_need(out / "target_provenance.csv", "synth"))
    return experiment.World(pool, with_provenance(target, prov), attack_pool)


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> None:
    out = cfg.output
    world = experiment.build_world(cfg.datapool)
    paths = [out / "pool.adip", out / "attack_pool.adip", out / "target.adid",
             out / "target_provenance.csv", out / "config.cfg"]
    save_pool(world.pool, paths[0])
    save_pool(world.attack_pool, paths[1])
    save_dataset(world.target, paths[2])
    save_provenance(world.target, paths[3])
    paths[4].write_text(dump_config(cfg.with_output(".")))
    write_manifest(out, "synth", cfg, [], paths,
                   {"pool_records": len(world.pool), "target_classes": world.target.num_classes,
                    "attack_pool_classes": world.attack_pool.num_classes})
    print(f"pool: {len(world.pool.datasets)} datasets, {world.pool.num_classes} classes; "
          f"attack pool: {world.attack_pool.num_classes} classes; target: "
          f"{world.target.num_classes} classes")


def cmd_train(cfg: ExperimentConfig) -> None:
    out = cfg.output
    target_path = _need(out / "target.adid", "synth")
    world = _world_from_disk(out)
    model = experiment.build_model(cfg.oracle, world.target)
    save_model(model, out / "model.adim")
    meta = {k: v for k, v in model.metadata.items() if k != "class_ids"}
    write_manifest(out, "train", cfg, [target_path], [out / "model.adim"],
                   {f"model_{k}": v for k, v in meta.items()} | {"model_kind": model.kind})
    update_summary(out, {"model_kind": model.kind, "model_accuracy": model.metadata["accuracy"]})
    print(f"{model.kind}: held-out accuracy {model.metadata['accuracy']:.3f}")


def cmd_attack(cfg: ExperimentConfig, endpoint: str | None = None) -> None:
    out = cfg.output
    world = _world_from_disk(out)
    if endpoint:
        oracle = RemoteOracle(endpoint, client_id="adi-attack")
        inputs = [out / "attack_pool.adip"]
    else:
        oracle = load_model(_need(out / "model.adim", "train"))
        inputs = [out / "attack_pool.adip", out / "model.adim"]
    for old in out.glob("leaf_probs_epoch*.csv"):
        old.unlink()
    result = experiment.attack(world, oracle, cfg.attack)
    write_trace(result, out / "trace.csv")
    leaf_files = write_leaf_probs(result, out)
    (out / "hierarchy.tsv").write_text(result.hierarchy.to_text())
    precision, recall = leaf_recovery(result.hierarchy.snapshot(), world.target_leaves, 10)
    if oracle.stats.access_count != result.total_accesses:
        raise ADIError(f"oracle counted {oracle.stats.access_count} accesses, "
                       f"expected {result.total_accesses}")
    update_summary(out, {
        "converged": result.converged,
        "epochs": result.epochs_used,
        "accesses": result.total_accesses,
        "batch_size": cfg.attack.batch_size,
        "lambda": cfg.attack.lam,
        "delta_scale": cfg.attack.delta_scale,
        "first_mean_entropy": result.trace[0].mean_entropy,
        "final_mean_entropy": result.trace[-1].mean_entropy,
        "top10_precision": precision,
        "top10_recall": recall,
    })
    write_manifest(out, "attack", cfg, inputs,
                   [out / "trace.csv", out / "hierarchy.tsv", out / "summary.txt", *leaf_files],
                   {"endpoint": endpoint or "local"})
    print(f"converged={str(result.converged).lower()} epochs={result.epochs_used} "
          f"accesses={result.total_accesses} top10_recall={recall:.2f}")


class _Replay:
    """Enough of an AttackResult to re-extract datasets from saved snapshots."""

    def __init__(self, hierarchy: ConceptHierarchy, probs: list[np.ndarray]):
        self.hierarchy = hierarchy
        self.probs = probs
        self.epochs_used = len(probs) - 1

    def probs_at(self, epoch: int) -> np.ndarray:
        return self.probs[epoch]


def _replay(out: Path, world: experiment.World) -> _Replay:
    trace = read_trace(_need(out / "trace.csv", "attack"))
    probs = [read_leaf_probs(_need(out / f"leaf_probs_epoch{e:02d}.csv", "attack"))
             for e in range(len(trace) + 1)]
    return _Replay(ConceptHierarchy.from_pool(world.attack_pool), probs)


def cmd_eval(cfg: ExperimentConfig) -> None:
    out = cfg.output
    world = _world_from_disk(out)
    replay = _replay(out, world)
    series = experiment.otdd_series(world, replay, cfg.metrics)
    baseline = experiment.otdd_baseline(world, cfg.metrics)
    with (out / "otdd.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "otdd"])
        for e, v in series:
            w.writerow([e, repr(v)])
    update_summary(out, {"otdd_initial": series[0][1], "otdd_final": series[-1][1],
                         "otdd_uniform_baseline": baseline})
    write_manifest(out, "eval", cfg, [out / "trace.csv", out / "target.adid"],
                   [out / "otdd.csv", out / "summary.txt"])
    print(f"otdd: initial {series[0][1]:.4f} final {series[-1][1]:.4f} "
          f"uniform baseline {baseline:.4f}")


def cmd_invert(cfg: ExperimentConfig) -> None:
    out = cfg.output
    world = _world_from_disk(out)
    model = load_model(_need(out / "model.adim", "train"))
    replay = _replay(out, world)
    aux = extract_dataset(replay.hierarchy, world.attack_pool, cfg.metrics.extract_samples,
                          cfg.metrics.seed, probs=replay.probs_at(replay.epochs_used))
    res = experiment.inversion_comparison(world, model, aux, cfg.inversion)
    with (out / "inversion.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["init", "class", "confidence"])
        for mode, r in res.items():
            for k, conf in enumerate(r["confidence"]):
                w.writerow([mode, k, repr(conf)])
    update_summary(out, {"mi_accuracy_aux_mean": res["aux-mean"]["accuracy"],
                         "mi_accuracy_random": res["random"]["accuracy"],
                         "mi_iterations": cfg.inversion.iterations,
                         "mi_step": cfg.inversion.step})
    write_manifest(out, "invert", cfg, [out / "model.adim"], [out / "inversion.csv"])
    print(f"model inversion accuracy: aux-mean init {res['aux-mean']['accuracy']:.2f}, "
          f"random init {res['random']['accuracy']:.2f}")


def cmd_report(cfg: ExperimentConfig) -> None:
    out = cfg.output
    summary = read_kv(_need(out / "summary.txt", "attack"))
    pool = load_pool(_need(out / "attack_pool.adip", "synth"))
    epochs = int(summary["epochs"])
    cost = access_cost_model(len(pool), cfg.metrics.gdi_epochs, cfg.attack.batch_size, epochs)
    update_summary(out, {"gdi_accesses": cost.gdi, "adi_accesses": cost.adi,
                         "access_ratio": cost.ratio})
    write_manifest(out, "report", cfg, [out / "summary.txt"], [out / "summary.txt"])
    print(f"GDI {len(pool)} records x {cfg.metrics.gdi_epochs} epochs = {cost.gdi} accesses")
    print(f"ADI {cfg.attack.batch_size} x {epochs} epochs = {cost.adi} accesses")
    print(f"access ratio {cost.ratio:.2f}")


def cmd_run(cfg: ExperimentConfig, invert: bool = True) -> None:
    cmd_synth(cfg)
    cmd_train(cfg)
    cmd_attack(cfg)
    cmd_eval(cfg)
    if invert:
        cmd_invert(cfg)
    cmd_report(cfg)


def _sweep_point(cfg: ExperimentConfig) -> dict:
    cfg.output.mkdir(parents=True, exist_ok=True)
    cmd_run(cfg, invert=False)
    return read_kv(cfg.output / "summary.txt")


def cmd_sweep(cfg: ExperimentConfig, name: str, jobs: int) -> None:
    field, grid = SWEEPS[name]
    root = cfg.output / f"sweep_{name}"
    points = [replace(cfg, attack=replace(cfg.attack, **{field: v}),
                      output=root / f"{name}={v}") for v in grid]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            summaries = list(ex.map(_sweep_point, points))
    else:
        summaries = [_sweep_point(p) for p in points]
    cols = ["converged", "epochs", "accesses", "top10_recall", "otdd_final", "access_ratio"]
    with (root / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name] + cols)
        for v, s in zip(grid, summaries):
            w.writerow([v] + [s.get(c, "") for c in cols])
    print(f"wrote {root / 'sweep.csv'}")


def cmd_serve(model: Path, bind: str, rate_limit: float | None, access_log: Path | None) -> None:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--bind must look like addr:port, got {bind!r}")
    serve(ServiceConfig(model, host, int(port), access_log, rate_limit))


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adi", description="Adaptive domain inference lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("synth", "synthesize the pool and the private target"),
                        ("train", "fit the private target model"),
                        ("attack", "run the attack and write the trace"),
                        ("eval", "OTDD of extracted data per epoch"),
                        ("invert", "model inversion with aux-mean vs random init"),
                        ("report", "access-cost comparison"),
                        ("run", "synth, train, attack, eval, invert and report")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, help="override [output] dir")
        if name == "attack":
            sp.add_argument("--endpoint", help="attack a running model service at host:port")
    sp = sub.add_parser("sweep", help="parameter sensitivity sweep")
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--name", required=True, choices=sorted(SWEEPS))
    sp.add_argument("--jobs", type=int, default=1)
    sp = sub.add_parser("serve", help="serve a model file over HTTP")
    sp.add_argument("--model", required=True, type=Path)
    sp.add_argument("--bind", default="127.0.0.1:8000")
    sp.add_argument("--rate-limit", type=float)
    sp.add_argument("--access-log", type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            cmd_serve(args.model, args.bind, args.rate_limit, args.access_log)
            return 0
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = cfg.with_output(args.out)
        try:
            cfg.output.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"[output] dir {cfg.output} is not writable: {exc}") from None
        if args.command == "attack":
            cmd_attack(cfg, args.endpoint)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.name, args.jobs)
        else:
            {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "invert": cmd_invert,
             "report": cmd_report, "run": cmd_run}[args.command](cfg)
    except (ADIError, OSError) as exc:
        print(f"adi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
