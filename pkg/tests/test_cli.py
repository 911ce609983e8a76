import csv
import json
from pathlib import Path

import numpy as np
import pytest

from cvgae import molgraph as mg
from cvgae.cli import ConfigError, main, parse_config, read_conformations, write_conformations
from cvgae.train import Trainer

from synth import METHANE, molblock, random_molecule, random_sdf

SAMPLE_SDF = Path(__file__).resolve().parents[1] / "data" / "sample_molecules.sdf"
SMALL_CFG = {"model": {"L": 2, "d_h": 8, "d_f": 16}, "train": {"max_steps": 4, "batch_size": 3}, "samples": 5}


def first_records(n):
    text = SAMPLE_SDF.read_text()
    return "".join(block + "$$$$\n" for block in text.split("$$$$\n")[:n])


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL_CFG))
    (tmp_path / "mols.sdf").write_text(first_records(6))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def ingest(workdir, n_test=2):
    assert run("ingest", workdir / "mols.sdf", "--n-test", n_test, "--out", workdir / "ds.bin") == 0
    return workdir / "ds.bin"


def test_ingest_tiny(tmp_path, capsys):
    (tmp_path / "three.sdf").write_text(first_records(3))
    assert run("ingest", tmp_path / "three.sdf", "--n-valid", 1, "--n-test", 1, "--out", tmp_path / "d.bin") == 0
    ds = mg.load_bundle(tmp_path / "d.bin")
    assert len(ds) == 3
    assert [len(ds.split(k)) for k in ("train", "valid", "test")] == [1, 1, 1]
    man = json.loads((tmp_path / "d.bin.manifest.json").read_text())
    assert man["accepted"] == 3 and man["dataset_fingerprint"] == ds.fingerprint()
    assert "accepted 3 rejected 0" in capsys.readouterr().out


def test_ingest_reports_disconnected(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a1, b1, c1 = random_molecule(rng, 2)
    a2, b2, c2 = random_molecule(rng, 2)
    off = len(a1)
    split = molblock("salt", a1 + a2, b1 + [(i + off, j + off, o) for i, j, o in b2], np.vstack([c1, c2 + 9]))
    (tmp_path / "in.sdf").write_text(METHANE + split)
    assert run("ingest", tmp_path / "in.sdf", "--out", tmp_path / "d.bin") == 0
    out = capsys.readouterr().out
    assert "rejected 1" in out and "disconnected compound" in out
    man = json.loads((tmp_path / "d.bin.manifest.json").read_text())
    assert man["rejected_reasons"] == {"disconnected compound": 1}


def test_ingest_missing_file(tmp_path, capsys):
    assert run("ingest", tmp_path / "nope.sdf", "--out", tmp_path / "d.bin") == 2
    assert "not found" in capsys.readouterr().err


def test_ingest_profile(tmp_path):
    (tmp_path / "in.sdf").write_text(random_sdf(10, seed=1, max_heavy=12))
    assert run("ingest", tmp_path / "in.sdf", "--profile", "qm9", "--out", tmp_path / "d.bin") == 0
    ds = mg.load_bundle(tmp_path / "d.bin")
    assert all(g.n_heavy <= 9 for g, _ in ds.entries)


def test_stats_command(workdir):
    ds = ingest(workdir)
    assert run("stats", "--dataset", ds, "--out", workdir / "st") == 0
    rows = list(csv.DictReader(open(workdir / "st" / "molecules.csv")))
    assert len(rows) == 6


def test_default_config_echoes_hyperparameters(workdir):
    ds = ingest(workdir)
    assert run("train", "--dataset", ds, "--steps", 1, "--out", workdir / "run") == 0
    cfg = json.loads((workdir / "run" / "manifest.json").read_text())["config"]
    assert cfg["model"] == {"L": 3, "d_h": 50, "d_f": 100}
    t = cfg["train"]
    assert (t["learning_rate"], t["batch_size"], t["alpha"], t["dropout"]) == (3e-4, 20, 1e-5, 0.2)
    assert cfg["samples"] == 100


def test_invalid_config_key(workdir, capsys):
    ds = ingest(workdir)
    (workdir / "bad.json").write_text(json.dumps({"model": {"d_hidden": 8}}))
    assert run("train", "--config", workdir / "bad.json", "--dataset", ds, "--out", workdir / "run") == 2
    assert "d_hidden" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        parse_config({"sampels": 3})
    with pytest.raises(ConfigError):
        parse_config({"train": {"dropout": 1.5}})


def test_resume_continues_trajectory(workdir):
    ds = ingest(workdir)
    cfg = dict(SMALL_CFG, train={"max_steps": 6, "batch_size": 2, "checkpoint_interval": 3})
    (workdir / "c.json").write_text(json.dumps(cfg))
    assert run("train", "--config", workdir / "c.json", "--dataset", ds, "--out", workdir / "full") == 0
    assert run("train", "--config", workdir / "c.json", "--dataset", ds, "--checkpoint",
               workdir / "full" / "checkpoint_0000003.ckpt", "--out", workdir / "resumed") == 0
    a = Trainer.load(workdir / "full" / "final.ckpt")
    b = Trainer.load(workdir / "resumed" / "final.ckpt")
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert (workdir / "full" / "loss.csv").read_bytes() == (workdir / "resumed" / "loss.csv").read_bytes()


def test_sample_and_eval(workdir, capsys):
    ds_path = ingest(workdir)
    cfg = workdir / "cfg.json"
    assert run("train", "--config", cfg, "--dataset", ds_path, "--out", workdir / "run") == 0
    ck = workdir / "run" / "final.ckpt"
    for name in ("a", "b"):
        assert run("sample", "--checkpoint", ck, "--dataset", ds_path, "--seed", 3, "--out", workdir / f"{name}.xyz") == 0
    assert (workdir / "a.xyz").read_bytes() == (workdir / "b.xyz").read_bytes()

    ds = mg.load_bundle(ds_path)
    found = read_conformations(workdir / "a.xyz", ds)
    assert sorted(found) == ds.split("test")
    assert all(len(v) == 100 for v in found.values())  # default S

    assert run("eval", f"cvgae={workdir / 'a.xyz'}", "--dataset", ds_path, "--out", workdir / "ev") == 0
    agg = list(csv.DictReader(open(workdir / "ev" / "aggregate.csv")))
    assert agg[0]["method"] == "cvgae" and float(agg[0]["success_per_test_set"]) == 1.0


def test_sample_requires_matching_vocab(workdir, tmp_path):
    ds_path = ingest(workdir)
    assert run("train", "--config", workdir / "cfg.json", "--dataset", ds_path, "--out", workdir / "run") == 0
    (tmp_path / "other.sdf").write_text(random_sdf(4, seed=2, elements=("C", "F"), with_h=False))
    assert run("ingest", tmp_path / "other.sdf", "--out", tmp_path / "o.bin") == 0
    code = run("sample", "--checkpoint", workdir / "run" / "final.ckpt", "--dataset", tmp_path / "o.bin",
               "--split", "all", "--out", tmp_path / "s.xyz")
    assert code == 2


def test_eval_self_samples_give_zero(workdir):
    ds_path = ingest(workdir)
    ds = mg.load_bundle(ds_path)
    idx = ds.split("test")
    write_conformations(workdir / "self.xyz", ds, {i: [ds.entries[i][1].coords] * 3 for i in idx})
    assert run("eval", f"self={workdir / 'self.xyz'}", "--dataset", ds_path, "--out", workdir / "ev") == 0
    agg = list(csv.DictReader(open(workdir / "ev" / "aggregate.csv")))
    for key in ("median_of_mean", "median_of_std", "median_of_best"):
        assert float(agg[0][key]) < 1e-7


def test_eval_restricts_to_common_molecules(workdir):
    ds_path = ingest(workdir, n_test=3)
    ds = mg.load_bundle(ds_path)
    idx = ds.split("test")
    rng = np.random.default_rng(0)
    full = {i: [rng.normal(size=(ds.entries[i][0].n_atoms, 3)) for _ in range(2)] for i in idx}
    write_conformations(workdir / "a.xyz", ds, full)
    write_conformations(workdir / "b.xyz", ds, {i: full[i] for i in idx[1:]})
    assert run("eval", f"a={workdir / 'a.xyz'}", f"b={workdir / 'b.xyz'}", "--dataset", ds_path,
               "--out", workdir / "ev") == 0
    per = {r["mol_id"]: float(r["mean"]) for r in csv.DictReader(open(workdir / "ev" / "per_molecule_a.csv"))}
    agg = {r["method"]: r for r in csv.DictReader(open(workdir / "ev" / "aggregate.csv"))}
    expected = np.median([per[str(i)] for i in idx[1:]])
    assert abs(float(agg["a"]["median_of_mean"]) - expected) < 1e-12
    assert float(agg["b"]["success_per_test_set"]) == pytest.approx(2 / 3)


def test_random_method(workdir):
    ds_path = ingest(workdir)
    assert run("sample", "--method", "random", "--samples", 4, "--dataset", ds_path, "--out", workdir / "r.xyz") == 0
    found = read_conformations(workdir / "r.xyz", mg.load_bundle(ds_path))
    assert all(len(v) == 4 for v in found.values())


def test_gradcheck_command(workdir, capsys):
    (workdir / "five.sdf").write_text(molblock("five", ["C", "O", "H", "H", "H"],
                                               [(0, 1, "single"), (0, 2, "single"), (0, 3, "single"),
                                                (0, 4, "single")],
                                               np.random.default_rng(1).normal(size=(5, 3))))
    assert run("ingest", workdir / "five.sdf", "--out", workdir / "f.bin") == 0
    capsys.readouterr()
    (workdir / "tiny.json").write_text(json.dumps({"model": {"L": 1, "d_h": 3, "d_f": 4}}))
    args = ("gradcheck", "--config", workdir / "tiny.json", "--dataset", workdir / "f.bin", "--molecule", 0)
    assert run(*args) == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    assert run(*args) == 0
    assert capsys.readouterr().out == first
    assert run(*args, "--inject-sign-flip") == 1
    assert "FAIL" in capsys.readouterr().out
    assert run("gradcheck", "--config", workdir / "tiny.json", "--dataset", workdir / "f.bin", "--molecule", 5) == 2


def test_missing_dataset(tmp_path):
    assert run("train", "--dataset", tmp_path / "none.bin", "--out", tmp_path / "r") == 2
