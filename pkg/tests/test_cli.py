import json
import subprocess
import sys

import numpy as np
import pytest

from deepmaxent import cli
from deepmaxent import model as M
from deepmaxent.data import load_sites

FAST = ["--epochs", "5", "--hidden-width", "8", "--lr", "0.01"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.run(["synth", "--out", str(d), "--seed", "3", "--grid-side", "8", "--species", "3", "--expected", "80"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    argv = ["train", "--sites", str(dataset / "sites.csv"), "--occurrences", str(dataset / "occurrences.csv"), "--out", str(out)]
    assert cli.run(argv + FAST) == 0
    return out


def test_synth_outputs(dataset):
    for name in ("sites.csv", "occurrences.csv", "pa.csv", "truth.csv", "manifest.json"):
        assert (dataset / name).exists()
    assert load_sites(dataset / "sites.csv").n_sites == 64
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["config"]["seed"] == 3


def test_synth_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert cli.run(["synth", "--out", str(tmp_path / name), "--seed", "7", "--grid-side", "6"]) == 0
    for f in ("sites.csv", "occurrences.csv", "pa.csv", "truth.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_bias_fraction(tmp_path):
    assert cli.run(["synth", "--out", str(tmp_path), "--grid-side", "10", "--bias-fraction", "0.4"]) == 0
    cfg = json.loads((tmp_path / "manifest.json").read_text())["config"]
    assert cfg["bias_scale"] > 0


def test_train_outputs(trained):
    params = M.load(trained / "model.txt")
    assert params.species_ids == ["sp001", "sp002", "sp003"]
    assert params.arch.hidden_width == 8
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,seconds" and len(lines) == 6
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 5
    assert set(manifest["inputs"]) == {"sites", "occurrences"}


def test_train_defaults_match_reference_configuration(dataset, monkeypatch):
    captured = {}

    def fake_train(config, sites, occ, progress=None):
        captured["cfg"] = config
        raise cli.UsageError("stop")

    monkeypatch.setattr(cli.train_mod, "train", fake_train)
    cli.run(["train", "--sites", str(dataset / "sites.csv"), "--occurrences", str(dataset / "occurrences.csv"), "--out", "/tmp/unused"])
    cfg = captured["cfg"]
    assert (cfg.batch_size, cfg.hidden_layers, cfg.weight_decay, cfg.learning_rate, cfg.tgb) == (250, 2, 3e-4, 2e-4, True)
    assert cfg.loss.value == "deepmaxent"


def test_flags_and_config_file(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nepochs = 7\nweighted=false\nbatch-size=64\n")
    args = cli.build_parser().parse_args(["train", "--sites", "s", "--occurrences", "o", "--out", "x", "--config", str(conf), "--epochs", "9"])
    cfg = cli.resolve_config(args)
    assert cfg.epochs == 9  # command line wins
    assert cfg.batch_size == 64
    assert cfg.loss.value == "deepmaxent-unweighted"


def test_manifest_reuse(trained, tmp_path):
    args = cli.build_parser().parse_args(["train", "--sites", "s", "--occurrences", "o", "--out", "x", "--from-manifest", str(trained / "manifest.json")])
    cfg = cli.resolve_config(args)
    assert cfg.epochs == 5 and cfg.hidden_width == 8 and cfg.learning_rate == 0.01


def test_predict_and_heatmap(dataset, trained, tmp_path):
    assert cli.run(["predict", "--model", str(trained / "model.txt"), "--sites", str(dataset / "sites.csv"), "--out", str(tmp_path), "--heatmap"]) == 0
    rows = (tmp_path / "intensities.csv").read_text().splitlines()
    assert rows[0] == "site_id,sp001,sp002,sp003" and len(rows) == 65
    vals = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    np.testing.assert_allclose(vals.sum(axis=0), 1.0, atol=1e-12)
    pgm = (tmp_path / "heatmap_sp001.pgm").read_bytes()
    assert pgm.startswith(b"P5\n8 8\n255\n")
    pixels = np.frombuffer(pgm[len(b"P5\n8 8\n255\n"):], dtype=np.uint8)
    assert pixels.size == 64 and pixels.min() == 0 and pixels.max() == 255


def test_heatmap_is_affine_rescale():
    coords = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    vals = np.array([0.0, 1.0, 3.0, 5.0])
    img = np.frombuffer(cli.heatmap_pgm(coords, vals)[len(b"P5\n2 2\n255\n"):], dtype=np.uint8).reshape(2, 2)
    # top row is the larger y
    np.testing.assert_array_equal(img, [[153, 255], [0, 51]])
    # affine transforms of the values leave the image unchanged
    assert cli.heatmap_pgm(coords, 3 * vals + 7) == cli.heatmap_pgm(coords, vals)


def test_eval(dataset, trained, tmp_path):
    (tmp_path / "groups.csv").write_text("species_id,group,region\nsp001,a,R1\nsp002,b,R1\nsp003,a,R2\n")
    argv = ["eval", "--model", str(trained / "model.txt"), "--sites", str(dataset / "sites.csv"), "--pa", str(dataset / "pa.csv"), "--out", str(tmp_path)]
    assert cli.run(argv + ["--groups", str(tmp_path / "groups.csv")]) == 0
    assert (tmp_path / "metrics.csv").read_text().startswith("species_id,group,region,auc,n_pos,n_neg\n")
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "region,mean_auc"
    assert [r.split(",")[0] for r in summary[1:]] == ["R1", "R2", "general_avg"]


def test_cv(dataset, tmp_path):
    argv = ["cv", "--sites", str(dataset / "sites.csv"), "--occurrences", str(dataset / "occurrences.csv"), "--out", str(tmp_path)]
    assert cli.run(argv + FAST + ["--grid-side", "2", "--folds", "2"]) == 0
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "fold,auc,n_species,n_sites" and lines[-1].startswith("mean,")
    assert len(lines) == 4


def test_verify_quick(capsys):
    assert cli.run(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 4


def test_exit_codes(dataset, tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["train", "--sites", "x"]) == 1
    assert cli.run(["frobnicate"]) == 1
    base = ["train", "--occurrences", str(dataset / "occurrences.csv"), "--out", str(tmp_path / "o")]
    assert cli.run(base + ["--sites", str(dataset / "sites.csv"), "--batch-size", "1"]) == 1
    assert cli.run(base + ["--sites", str(tmp_path / "missing.csv")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("site_id,x,y,t\na,0,0,1\na,1,1,2\n")
    assert cli.run(base + ["--sites", str(bad)]) == 2
    assert ":3:" in capsys.readouterr().err
    assert cli.run(["eval", "--model", str(bad), "--sites", str(dataset / "sites.csv"), "--pa", str(dataset / "pa.csv"), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(dataset, tmp_path):
    argv = ["train", "--sites", str(dataset / "sites.csv"), "--occurrences", str(dataset / "occurrences.csv"), "--out", str(tmp_path)]
    assert cli.run(argv + ["--loss", "poisson", "--lr", "1e300", "--epochs", "3", "--hidden-width", "8"]) == 3
    # nothing half-written
    assert not (tmp_path / "model.txt").exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".model.txt.")]


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "deepmaxent", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "deepmaxent" in r.stdout
