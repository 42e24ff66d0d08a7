import configparser
import hashlib
import shutil
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from adi.cli import main, read_kv
from adi.config import ExperimentConfig, dump_config, load_config, parse_config
from adi.errors import ConfigError
from adi.metrics import access_cost_model

REPO = Path(__file__).resolve().parents[1]
SHIPPED = REPO / "configs" / "exp1.cfg"

SMALL = """
[datapool]
n_datasets = 3
classes_per_dataset = 4
dim = 6
samples_per_class = 30
mix = 1,2,1
keep_in_pool = true

[oracle]
kind = centroid

[attack]
batch_size = 40
max_epochs = 20

[metrics]
extract_samples = 100
max_points = 100

[inversion]
iterations = 50

[output]
dir = out
"""


def write_cfg(tmp_path, text=SMALL, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def digest(folder: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.rglob("*")) if p.is_file() and p.name != "manifest.txt"}


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_shipped_config_parses():
    cfg = load_config(SHIPPED)
    assert cfg.attack.lam == 0.83 and cfg.attack.batch_size == 200 and cfg.attack.seed == 7
    assert cfg.output == SHIPPED.parent / "../out/exp1"


@pytest.mark.parametrize("text, key", [
    ("[attack]\nlambda = 1.01\n", "lambda"),
    ("[attack]\nlamda = 0.8\n", "lamda"),
    ("[datapool]\nmix = 1,2\n", "mix"),
    ("[oracle]\nkind = forest\n", "kind"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[oracle]\nrmt_blocks = 5\n", "rmt_blocks"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text)


def test_cli_lambda_out_of_range(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL.replace("batch_size = 40", "batch_size = 40\nlambda = 1.01"))
    assert main(["attack", "--config", str(cfg)]) != 0
    err = capsys.readouterr().err
    assert "lambda" in err and "error" in err


def test_missing_artifact_names_path(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["attack", "--config", str(cfg)]) != 0
    err = capsys.readouterr().err
    assert str(tmp_path / "out" / "pool.adip") in err and "adi synth" in err


def test_missing_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) != 0
    assert "nope.cfg" in capsys.readouterr().err


def test_run_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    da, db = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert da == db
    for name in ("trace.csv", "otdd.csv", "summary.txt", "leaf_probs_epoch00.csv",
                 "hierarchy.tsv", "inversion.csv", "model.adim"):
        assert name in da
    manifest = configparser.ConfigParser(interpolation=None)
    manifest.read(tmp_path / "a" / "manifest.txt")
    assert {"synth", "train", "attack", "eval", "invert", "report"} <= set(manifest.sections())
    assert manifest["attack"]["attack_seed"] == "7"
    assert manifest["attack"]["tool_version"]


def test_steps_match_run(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    for cmd in ("synth", "train", "attack", "eval", "invert", "report"):
        assert main([cmd, "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_sweep_writes_table(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--name", "delta", "--jobs", "2"]) == 0
    rows = (tmp_path / "out" / "sweep_delta" / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("delta,converged,epochs")
    assert [r.split(",")[0] for r in rows[1:]] == ["0.1", "1.0", "10.0"]


@pytest.fixture(scope="module")
def shipped_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp1")
    assert main(["run", "--config", str(SHIPPED), "--out", str(out)]) == 0
    return out


def test_shipped_attack_outputs(shipped_run):
    trace = (shipped_run / "trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,mean_entropy,positives,accesses"
    assert 1 <= len(trace) - 1 <= 100
    summary = read_kv(shipped_run / "summary.txt")
    assert summary["converged"] == "true"
    epochs = int(summary["epochs"])
    assert len(list(shipped_run.glob("leaf_probs_epoch*.csv"))) == epochs + 1
    assert len((shipped_run / "otdd.csv").read_text().splitlines()) == epochs + 2


def test_shipped_report_matches_cost_model(shipped_run):
    s = read_kv(shipped_run / "summary.txt")
    cost = access_cost_model(7000, 50, 200, int(s["epochs"]))
    assert int(s["gdi_accesses"]) == cost.gdi
    assert int(s["adi_accesses"]) == cost.adi == int(s["accesses"])
    assert float(s["access_ratio"]) == cost.ratio


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_and_remote_attack(shipped_run, tmp_path):
    work = tmp_path / "remote"
    shutil.copytree(shipped_run, work)
    port = free_port()
    log = tmp_path / "access.csv"
    proc = subprocess.Popen([sys.executable, "-m", "adi", "serve", "--model", str(work / "model.adim"),
                             "--bind", f"127.0.0.1:{port}", "--access-log", str(log)])
    try:
        for _ in range(100):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.1).close()
                break
            except OSError:
                time.sleep(0.05)
        assert main(["attack", "--config", str(SHIPPED), "--out", str(work),
                     "--endpoint", f"127.0.0.1:{port}"]) == 0
    finally:
        proc.terminate()
        proc.wait(10)
    assert (work / "trace.csv").read_bytes() == (shipped_run / "trace.csv").read_bytes()
    summary = read_kv(work / "summary.txt")
    assert len(log.read_text().splitlines()) - 1 == int(summary["accesses"])


def test_serve_bad_bind(capsys):
    assert main(["serve", "--model", "x.adim", "--bind", "nonsense"]) != 0
