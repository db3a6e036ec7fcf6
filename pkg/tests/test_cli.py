import shutil

import numpy as np
import pytest

from resilient_mlp.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_IO, EXIT_OK, main, read_csv
from resilient_mlp.config import ConfigError, parse_config
from resilient_mlp.network import load_checkpoint, save_checkpoint

XOR_ROWS = "0,0,0\n0,1,1\n1,0,1\n1,1,0\n"

XOR_CONFIG = """
[experiment]
name = xor
regime = {regime}
seed = 0

[data]
path = xor.csv
normalize = none
train_fraction = 0.5

[model]
topology = {topology}

[train]
eta = 0.5
epochs_act = {epochs}
epochs_pas = 0
batch_size = 4
delta_gamma = 0.0
accuracy_bound = 0.0
{extra}

[hardware]
multiplier = exact
storage = reliable
"""


def blob_rows(n=60, seed=0):
    g = np.random.default_rng(seed)
    labels = g.integers(0, 2, n)
    feats = np.where(labels[:, None] == 1, 0.7, 0.3) + 0.05 * g.normal(size=(n, 3))
    return "".join(",".join(f"{v:.6f}" for v in f) + f",{l}\n" for f, l in zip(feats, labels))


BLOB_CONFIG = """
[experiment]
name = blobs
regime = {regime}
seed = 3

[data]
path = blobs.csv

[model]
topology = 3,6,2

[train]
eta = 0.3
epochs_act = 5
epochs_pas = 2
batch_size = 8
delta_gamma = 0.01
accuracy_bound = 0.5

[hardware]
multiplier = K2
storage = con

[sweep]
multipliers = exact, K1, K2, K3, K4
storage = reliable, p=0, con
runs = 8
{costs}
"""


@pytest.fixture
def xor_dir(tmp_path):
    (tmp_path / "xor.csv").write_text(XOR_ROWS * 2)
    return tmp_path


def write_xor(dir_, regime="bp", topology="2,4,1", epochs=2000, extra=""):
    path = dir_ / f"xor_{regime}_{epochs}.ini"
    path.write_text(XOR_CONFIG.format(regime=regime, topology=topology, epochs=epochs, extra=extra))
    return path


@pytest.fixture
def blob_dir(tmp_path):
    (tmp_path / "blobs.csv").write_text(blob_rows())
    return tmp_path


def write_blobs(dir_, regime="combined", costs=""):
    path = dir_ / f"blobs_{regime}.ini"
    path.write_text(BLOB_CONFIG.format(regime=regime, costs=costs))
    return path


def train(config, out):
    return main(["train", "--config", str(config), "--out", str(out)])


def test_train_xor_bp(xor_dir):
    out = xor_dir / "run"
    assert train(write_xor(xor_dir), out) == EXIT_OK
    assert (out / "checkpoint.txt").exists()
    meta = dict(line.split(" = ", 1) for line in (out / "metadata.txt").read_text().splitlines())
    assert meta["final_train_accuracy"] == "1.0"
    assert meta["rng"] == "PCG64" and meta["seed"] == "0"
    rows = read_csv(out / "epochs.csv")
    assert len(rows) == 2000 and rows[-1]["phase"] == "bp"


def test_degenerate_combined_equals_bp(xor_dir):
    assert train(write_xor(xor_dir, "bp", epochs=50), xor_dir / "bp") == EXIT_OK
    assert train(write_xor(xor_dir, "combined", epochs=50), xor_dir / "ax") == EXIT_OK
    assert (xor_dir / "bp" / "checkpoint.txt").read_bytes() == (xor_dir / "ax" / "checkpoint.txt").read_bytes()


def test_topology_mismatch_names_field(xor_dir, capsys):
    code = train(write_xor(xor_dir, topology="30,64"), xor_dir / "bad")
    assert code == EXIT_CONFIG
    assert "topology" in capsys.readouterr().err


def test_training_abort_exit_code(xor_dir):
    cfg = write_xor(xor_dir, epochs=5)
    cfg.write_text(cfg.read_text().replace("eta = 0.5", "eta = 1e305"))
    assert train(cfg, xor_dir / "boom") == EXIT_ABORT


def test_missing_files_exit_code(xor_dir, capsys):
    assert train(xor_dir / "nope.ini", xor_dir / "x") == EXIT_IO
    cfg = write_xor(xor_dir)
    cfg.write_text(cfg.read_text().replace("xor.csv", "missing.csv"))
    assert train(cfg, xor_dir / "y") == EXIT_IO


def test_config_errors_exit_code(xor_dir, capsys):
    cfg = xor_dir / "broken.ini"
    cfg.write_text("[experiment\nname = x\n")
    assert train(cfg, xor_dir / "z") == EXIT_CONFIG
    cfg.write_text(XOR_CONFIG.format(regime="bp", topology="2,4,1", epochs=1, extra="momentum = 0.9"))
    assert train(cfg, xor_dir / "z") == EXIT_CONFIG
    assert "train.momentum" in capsys.readouterr().err


def test_identical_configs_give_identical_files(blob_dir):
    cfg = write_blobs(blob_dir, costs="[costs]\nstorage.p0 = 1.0")
    for name in ("a", "b"):
        out = blob_dir / name
        assert train(cfg, out) == EXIT_OK
        assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "checkpoint.txt")]) == 0
        assert main(["cost-report", "--config", str(cfg), "--out", str(out), "--report", str(out / "report.csv")]) == 0
        assert main(["sensitivity-map", "--config", str(cfg), "--out", str(out), "--checkpoint", f"net={out / 'checkpoint.txt'}"]) == 0
    files = sorted(p.name for p in (blob_dir / "a").iterdir())
    assert "sensitivity_net_layer1.csv" in files and "checkpoint_act.txt" in files
    for name in files:
        assert (blob_dir / "a" / name).read_bytes() == (blob_dir / "b" / name).read_bytes(), name
        if name.endswith(".csv"):
            first, header = (blob_dir / "a" / name).read_text().splitlines()[:2]
            assert first.startswith("# config_hash=") and "seed=3" in first
            assert not header.startswith("#")


def test_checkpoint_labels(blob_dir):
    cfg = write_blobs(blob_dir, costs="[costs]\nstorage.p0 = 1.0")
    out = blob_dir / "run"
    assert train(cfg, out) == EXIT_OK
    shutil.copy(out / "checkpoint.txt", blob_dir / "plain.txt")
    args = ["evaluate", "--config", str(cfg), "--out", str(out), "--runs", "2"]
    for ckpt in (out / "checkpoint.txt", out / "checkpoint_act.txt", blob_dir / "plain.txt"):
        args += ["--checkpoint", str(ckpt)]
    args += ["--checkpoint", f"mine={out / 'checkpoint.txt'}"]
    assert main(args) == EXIT_OK
    labels = [r["regime"] for r in read_csv(out / "report.csv")]
    assert list(dict.fromkeys(labels)) == ["combined", "act", "plain", "mine"]


def test_seed_override_changes_hash(blob_dir):
    cfg = write_blobs(blob_dir)
    assert train(cfg, blob_dir / "s3") == EXIT_OK
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(blob_dir / "s4")]) == EXIT_OK
    l3 = (blob_dir / "s3" / "epochs.csv").read_text().splitlines()[0]
    l4 = (blob_dir / "s4" / "epochs.csv").read_text().splitlines()[0]
    assert "seed=4" in l4 and l3.split()[1] != l4.split()[1]


def test_evaluate_report_properties(blob_dir):
    cfg = write_blobs(blob_dir)
    out = blob_dir / "ev"
    assert train(cfg, out) == EXIT_OK
    assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "checkpoint.txt"), "--runs", "6"]) == 0
    rows = read_csv(out / "report.csv")
    assert len(rows) == 15
    by = {r["hw"]: r for r in rows}
    assert all(r["regime"] == "combined" for r in rows)
    assert float(by["exact/reliable"]["normalized_error"]) == 1.0
    assert float(by["exact/reliable"]["std_accuracy"]) == 0.0
    for mult in ("exact", "K1", "K2", "K3", "K4"):
        reliable, p0 = by[f"{mult}/reliable"], by[f"{mult}/p0"]
        for col in ("mean_accuracy", "mean_loss", "std_accuracy", "normalized_error"):
            assert reliable[col] == p0[col]
    assert by["K2/850mV"]["runs"] == "6" and by["K2/reliable"]["runs"] == "1"


def test_evaluate_rejects_wrong_checkpoint(blob_dir, xor_dir, capsys):
    assert train(write_xor(xor_dir, epochs=5), xor_dir / "x") == EXIT_OK
    cfg = write_blobs(blob_dir)
    code = main(["evaluate", "--config", str(cfg), "--out", str(blob_dir / "e"), "--checkpoint", str(xor_dir / "x" / "checkpoint.txt")])
    assert code == EXIT_CONFIG
    assert "topology" in capsys.readouterr().err


def test_sensitivity_map_zero_net_and_shapes(blob_dir):
    cfg = write_blobs(blob_dir)
    out = blob_dir / "sm"
    assert train(cfg, out) == EXIT_OK
    net = load_checkpoint(out / "checkpoint.txt")
    for layer in net.layers:
        layer.weights[:] = 0
    save_checkpoint(net, out / "zero.txt")
    args = ["sensitivity-map", "--config", str(cfg), "--out", str(out)]
    assert main(args + ["--checkpoint", f"zero={out / 'zero.txt'}", "--checkpoint", f"trained={out / 'checkpoint.txt'}"]) == 0
    for l, layer in enumerate(net.layers):
        zero = np.array([[float(v) for v in r.values()] for r in read_csv(out / f"sensitivity_zero_layer{l}.csv")])
        trained = np.array([[float(v) for v in r.values()] for r in read_csv(out / f"sensitivity_trained_layer{l}.csv")])
        assert zero.shape == trained.shape == layer.weights.shape
        assert np.all(zero == 0)
        assert np.any(trained > 0)


def test_cost_report_tie_break_and_none_admissible(blob_dir):
    flat = "[costs]\n" + "\n".join(
        f"multiply.{m} = 1.0" for m in ("exact", "K1", "K2", "K3", "K4")
    ) + "\n" + "\n".join(f"storage.{s} = 1.0" for s in ("reliable", "850mV", "p0")) + "\nmax_degradation = 1.0\n"
    cfg = write_blobs(blob_dir, costs=flat)
    out = blob_dir / "cr"
    assert train(cfg, out) == EXIT_OK
    assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "checkpoint.txt"), "--runs", "3"]) == 0
    assert main(["cost-report", "--config", str(cfg), "--out", str(out), "--report", str(out / "report.csv")]) == 0
    rows = read_csv(out / "cost_report.csv")
    cheapest = [r for r in rows if r["cheapest"] == "1"]
    assert [r["hw"] for r in cheapest] == ["K1/850mV"]

    strict = write_blobs(blob_dir, costs=flat.replace("max_degradation = 1.0", "min_accuracy = 1.01"))
    assert main(["cost-report", "--config", str(strict), "--out", str(out), "--report", str(out / "report.csv")]) == 0
    rows = read_csv(out / "cost_report.csv")
    assert rows[-1]["hw"] == "none admissible"
    assert not any(r["cheapest"] == "1" for r in rows)


def test_cost_report_missing_cost_is_config_error(blob_dir, capsys):
    cfg = write_blobs(blob_dir)
    out = blob_dir / "mc"
    assert train(cfg, out) == EXIT_OK
    assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "checkpoint.txt"), "--runs", "2"]) == 0
    # Default cost table has no entry for the "p0" storage label.
    assert main(["cost-report", "--config", str(cfg), "--out", str(out), "--report", str(out / "report.csv")]) == EXIT_CONFIG


# -- config parsing ------------------------------------------------------------


def test_default_sweep_uses_dataset_voltages():
    base = "[data]\npath = x.csv\n[model]\ntopology = 30,64,64,2\n"
    bc = parse_config("[experiment]\nname = breast_cancer\n" + base)
    assert len(bc.sweep) == 15
    assert sorted({hw.storage_label for hw in bc.sweep}) == ["400mV", "660mV", "reliable"]
    other = parse_config("[experiment]\nname = mnist\n" + base)
    assert sorted({hw.storage_label for hw in other.sweep}) == ["660mV", "850mV", "reliable"]
    assert bc.runs == 50 and bc.regime == "bp"


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="topology"):
        parse_config("[data]\npath = x.csv\n[model]\ntopology = 5\n")
    with pytest.raises(ConfigError, match="regime"):
        parse_config("[experiment]\nregime = sgd\n[data]\npath = x\n[model]\ntopology = 2,2\n")
    with pytest.raises(ConfigError, match="hardware"):
        parse_config("[experiment]\nregime = pas\n[data]\npath = x\n[model]\ntopology = 2,2\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[extras]\na = 1\n[data]\npath = x\n[model]\ntopology = 2,2\n")
    with pytest.raises(ConfigError, match="train.eta"):
        parse_config("[data]\npath = x\n[model]\ntopology = 2,2\n[train]\neta = fast\n")
    with pytest.raises(ConfigError, match="sweep"):
        parse_config("[data]\npath = x\n[model]\ntopology = 2,2\n[sweep]\nmultipliers = K9\n")


def test_modes_section_overrides_width():
    cfg = parse_config("[data]\npath = x\n[model]\ntopology = 2,2\n[modes]\nK1 = 2\n[sweep]\nmultipliers = K1\nstorage = reliable\n")
    assert [hw.multiplier.k for hw in cfg.sweep] == [2]


def test_hash_ignores_formatting():
    a = parse_config("[model]\ntopology = 2,2\n[data]\npath = x\n")
    b = parse_config("# comment\n[data]\npath   =   x\n\n[model]\ntopology = 2,2\n")
    assert a.config_hash == b.config_hash
    assert a.with_seed(1).config_hash != a.config_hash
