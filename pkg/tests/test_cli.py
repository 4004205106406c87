import filecmp
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from taxengine import EmbeddingBundle, build, parse_path, save_bundle
from taxengine.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def _write_taxonomy(tmp_path):
    tax_file = tmp_path / "taxonomy.txt"
    tax_file.write_text(
        "Apparel > Clothing > Shirts\n"
        "Apparel > Clothing > Pants\n"
        "Apparel > Shoes\n"
        "Apparel > Accessories > Hats\n"
    )
    return tax_file


def _synth_config(tmp_path, per_leaf=25, noise=0.05):
    tax_file = _write_taxonomy(tmp_path)
    cfg = {
        "synth": {
            "taxonomy": str(tax_file),
            "per_leaf": per_leaf,
            "dims": {"title": 6, "image": 5},
            "noise": noise,
            "seed": 7,
            "out": str(tmp_path / "bundle"),
        }
    }
    cfg_file = tmp_path / "synth.json"
    cfg_file.write_text(json.dumps(cfg))
    return cfg_file, tmp_path / "bundle"


def _train_config(tmp_path, bundle_dir, masking="on"):
    cfg = {
        "data": {"bundle": str(bundle_dir), "split_seed": 3},
        "model": {
            "fusion": "EARLY",
            "masking": masking,
            "trunk_width": 24,
            "head_width": 12,
            "dropout": 0.0,
        },
        "train": {"batch_size": 16, "max_epochs": 12, "patience": 4, "seed": 3},
    }
    cfg_file = tmp_path / "train.json"
    cfg_file.write_text(json.dumps(cfg))
    return cfg_file


def test_synth_and_validate(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path)
    res = runner.invoke(main, ["synth", "--config", str(cfg_file)])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["validate", str(bundle_dir)])
    assert res.exit_code == 0
    assert res.output.strip() == "OK"


def test_validate_rejects_corrupt_bundle(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path)
    runner.invoke(main, ["synth", "--config", str(cfg_file)])
    # corrupt one label to point outside the taxonomy
    labels = (bundle_dir / "labels.tsv").read_text().splitlines()
    labels[0] = labels[0].rsplit("\t", 1)[0] + "\tApparel > Ghosts"
    (bundle_dir / "labels.tsv").write_text("\n".join(labels) + "\n")
    res = runner.invoke(main, ["validate", str(bundle_dir)])
    assert res.exit_code == 2
    assert "FAIL" in res.output


def test_missing_bundle_exits_2(runner, tmp_path):
    cfg = {"data": {"bundle": str(tmp_path / "nope")}}
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps(cfg))
    res = runner.invoke(main, ["train", "--config", str(cfg_file),
                               "--out", str(tmp_path / "run")])
    assert res.exit_code == 2
    assert "not found" in res.output


def test_unknown_config_key_rejected(runner, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"data": {"bundel": "x"}}))
    res = runner.invoke(main, ["train", "--config", str(cfg_file),
                               "--out", str(tmp_path / "run")])
    assert res.exit_code == 2
    assert "unknown key" in res.output


def test_train_eval_predict_flow(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path)
    assert runner.invoke(main, ["synth", "--config", str(cfg_file)]).exit_code == 0
    train_cfg = _train_config(tmp_path, bundle_dir)
    out_dir = tmp_path / "run"
    res = runner.invoke(main, ["train", "--config", str(train_cfg), "--out", str(out_dir)])
    assert res.exit_code == 0, res.output
    for fname in ("checkpoint/manifest.json", "split.json", "history.json", "metrics.json"):
        assert (out_dir / fname).exists()
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert metrics["hF1"] > 0.9

    res = runner.invoke(main, ["eval", str(out_dir / "checkpoint"), str(bundle_dir)])
    assert res.exit_code == 0, res.output
    doc = json.loads(res.output)
    assert doc["hF1"] > 0.9
    # per-level scores come in both masked and unmasked variants
    assert set(doc["levels"]) == set(doc["levels_unmasked"])

    res = runner.invoke(main, ["predict", str(out_dir / "checkpoint"), str(bundle_dir)])
    assert res.exit_code == 0
    lines = [l for l in res.output.splitlines() if l.strip()]
    assert len(lines) == 100
    rid, path, conf = lines[0].split("\t")
    assert rid.startswith("rec-")
    assert 0.0 < float(conf) <= 1.0


def test_train_deterministic_across_runs(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path, per_leaf=10)
    runner.invoke(main, ["synth", "--config", str(cfg_file)])
    train_cfg = _train_config(tmp_path, bundle_dir)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    for out in (out1, out2):
        res = runner.invoke(main, ["train", "--config", str(train_cfg), "--out", str(out)])
        assert res.exit_code == 0, res.output
    assert (out1 / "metrics.json").read_bytes() == (out2 / "metrics.json").read_bytes()
    ckpt1 = sorted(os.listdir(out1 / "checkpoint"))
    ckpt2 = sorted(os.listdir(out2 / "checkpoint"))
    assert ckpt1 == ckpt2
    for fname in ckpt1:
        assert (out1 / "checkpoint" / fname).read_bytes() == (
            out2 / "checkpoint" / fname
        ).read_bytes(), fname


def test_train_pca_reduces_image(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path, per_leaf=10)
    runner.invoke(main, ["synth", "--config", str(cfg_file)])
    cfg = json.loads(_train_config(tmp_path, bundle_dir).read_text())
    cfg["data"]["pca"] = {"modalities": ["image"], "variance_target": 0.9}
    cfg_file2 = tmp_path / "train_pca.json"
    cfg_file2.write_text(json.dumps(cfg))
    out_dir = tmp_path / "run_pca"
    res = runner.invoke(main, ["train", "--config", str(cfg_file2), "--out", str(out_dir)])
    assert res.exit_code == 0, res.output
    manifest = json.loads((out_dir / "checkpoint" / "manifest.json").read_text())
    assert manifest["meta"]["pca_modalities"] == ["image"]
    assert "pca.image.components" in manifest["tensors"]
    # eval applies the stored projection transparently
    res = runner.invoke(main, ["eval", str(out_dir / "checkpoint"), str(bundle_dir)])
    assert res.exit_code == 0, res.output


def _latent_bundle(tmp_path):
    """Bundle whose Shoes records hide 3 image subtypes the taxonomy
    does not know about."""
    tax = build([parse_path("Apparel > Shoes"), parse_path("Apparel > Clothing > Shirts")])
    rng = np.random.default_rng(41)
    rows, labels = [], []
    for s in range(3):
        center = np.zeros(6)
        center[s] = 8.0
        rows.append(center + rng.standard_normal((20, 6)) * 0.05)
        labels += [parse_path("Apparel > Shoes")] * 20
    rows.append(np.full(6, -8.0) + rng.standard_normal((20, 6)) * 0.05)
    labels += [parse_path("Apparel > Clothing > Shirts")] * 20
    X = np.vstack(rows)
    bundle = EmbeddingBundle(
        modalities={"title": rng.standard_normal((80, 4)), "image": X},
        labels=labels,
        record_ids=[f"p{i:03d}" for i in range(80)],
        taxonomy=tax,
    )
    bdir = tmp_path / "latent"
    save_bundle(bundle, bdir)
    return bdir


def test_recat_two_phase_flow(runner, tmp_path):
    bundle_dir = _latent_bundle(tmp_path)
    cfg = {
        "recat": {
            "bundle": str(bundle_dir),
            "target": "Apparel > Shoes",
            "filter_k": 2,
            "filter_threshold": 1e9,
            "depth_plan": [{"linkage": "WARD", "n_clusters": 3,
                            "reducer": {"method": "PCA", "target_dim": 3}}],
            "seed": 5,
            "export_file": str(tmp_path / "clusters.tsv"),
        }
    }
    cfg_file = tmp_path / "recat.json"
    cfg_file.write_text(json.dumps(cfg))
    res = runner.invoke(main, ["recat", "--config", str(cfg_file)])
    assert res.exit_code == 0, res.output
    summary = json.loads(res.output.splitlines()[-1])
    assert summary["clusters"] == 3

    # annotate and rerun with labels
    lines = (tmp_path / "clusters.tsv").read_text().splitlines()
    names = {1: "Sneakers", 2: "Boots", 3: "Open Shoes"}
    out = [lines[0]]
    for line in lines[1:]:
        fields = line.split("\t")
        fields[5] = names.get(int(fields[0]), "")
        out.append("\t".join(fields))
    (tmp_path / "clusters.tsv").write_text("\n".join(out) + "\n")
    cfg["recat"]["labels_file"] = str(tmp_path / "clusters.tsv")
    cfg_file.write_text(json.dumps(cfg))
    res = runner.invoke(main, ["recat", "--config", str(cfg_file),
                               "--out", str(tmp_path / "recat_out")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["validate", str(tmp_path / "recat_out" / "bundle")])
    assert res.exit_code == 0
    # the relabeled bundle now has deeper shoe labels
    labels = (tmp_path / "recat_out" / "bundle" / "labels.tsv").read_text()
    assert "Apparel > Shoes > Sneakers" in labels


def test_cascade_command(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path, per_leaf=15)
    runner.invoke(main, ["synth", "--config", str(cfg_file)])
    # stage 1: text only; stage 2: both modalities
    base = json.loads(_train_config(tmp_path, bundle_dir).read_text())
    base["model"]["modalities"] = ["title"]
    (tmp_path / "t1.json").write_text(json.dumps(base))
    runner.invoke(main, ["train", "--config", str(tmp_path / "t1.json"),
                         "--out", str(tmp_path / "s1")])
    base["model"].pop("modalities")
    (tmp_path / "t2.json").write_text(json.dumps(base))
    runner.invoke(main, ["train", "--config", str(tmp_path / "t2.json"),
                         "--out", str(tmp_path / "s2")])
    cas = {
        "cascade": {
            "stage1": str(tmp_path / "s1" / "checkpoint"),
            "stage2": str(tmp_path / "s2" / "checkpoint"),
            "bundle": str(bundle_dir),
            "tau": 0.9,
            "grid": [0.0, 0.5, 0.9, 1.0],
        }
    }
    (tmp_path / "cascade.json").write_text(json.dumps(cas))
    res = runner.invoke(main, ["cascade", "--config", str(tmp_path / "cascade.json"),
                               "--out", str(tmp_path / "cas_out")])
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "cas_out" / "cascade_report.json").read_text())
    assert report["n_records"] == 60
    sweep = (tmp_path / "cas_out" / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "tau,escalated_fraction,hF,accuracy"
    assert len(sweep) == 5
    fracs = [float(line.split(",")[1]) for line in sweep[1:]]
    assert fracs == sorted(fracs)


def test_threshold_flag_overrides_config(runner, tmp_path):
    cfg_file, bundle_dir = _synth_config(tmp_path, per_leaf=10)
    runner.invoke(main, ["synth", "--config", str(cfg_file)])
    train_cfg = _train_config(tmp_path, bundle_dir)
    runner.invoke(main, ["train", "--config", str(train_cfg), "--out", str(tmp_path / "m")])
    cas = {
        "cascade": {
            "stage1": str(tmp_path / "m" / "checkpoint"),
            "stage2": str(tmp_path / "m" / "checkpoint"),
            "bundle": str(bundle_dir),
            "tau": 0.5,
        }
    }
    (tmp_path / "c.json").write_text(json.dumps(cas))
    res = runner.invoke(main, ["cascade", "--config", str(tmp_path / "c.json"),
                               "--threshold", "1.0"])
    assert res.exit_code == 0, res.output
    doc = json.loads(res.output)
    assert doc["threshold"] == 1.0
