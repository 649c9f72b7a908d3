import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from advcolor import cli, data
from advcolor.classifier import ConvNetClassifier, is_adversarial
from advcolor.config import load_config, parse_config
from advcolor.exceptions import ConfigError


def _write_config(tmp_path, **overrides):
    cfg = {
        "schema_version": 1,
        "seed": 11,
        "output_dir": str(tmp_path / "out"),
        "suite_size": 6,
        "dataset": {"dir": str(tmp_path / "dataset"), "n_train": 700, "n_val": 150},
        "models": {"dir": str(tmp_path / "out" / "models"), "epochs": 14},
        "attacks": [
            {"name": "ddn", "mode": "untargeted", "kappa": 0.0, "budgets": [25]},
            {"name": "perc_al", "mode": "targeted", "kappa": 0.0, "budgets": [40]},
        ],
        "evaluation": {"bit_depths": [8, 4], "jpeg_qualities": [90], "contact_sheets": 2},
    }
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_config_rejects_unknown_top_level_field():
    with pytest.raises(ConfigError, match="sutie_size"):
        parse_config({"schema_version": 1, "seed": 1, "sutie_size": 5})


def test_config_rejects_unknown_nested_field():
    with pytest.raises(ConfigError, match="n_trian"):
        parse_config({"schema_version": 1, "seed": 1, "dataset": {"n_trian": 10}})


def test_config_requires_integer_seed():
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"schema_version": 1, "seed": "7"})
    with pytest.raises(ConfigError):
        parse_config({"schema_version": 1})


def test_config_rejects_wrong_schema_version():
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config({"schema_version": 2, "seed": 1})


def test_config_kappa_forms():
    cfg = parse_config(
        {
            "schema_version": 1,
            "seed": 1,
            "attacks": [
                {"name": "cw", "kappa": 2.5},
                {"name": "cw", "kappa": {"percentile": 90}},
            ],
        }
    )
    assert cfg.attacks[0].kappa_tag() == "k2.5"
    assert cfg.attacks[1].kappa_tag() == "kp90"
    with pytest.raises(ConfigError):
        parse_config(
            {"schema_version": 1, "seed": 1, "attacks": [{"name": "cw", "kappa": {"p": 9}}]}
        )


def test_config_rejects_bad_mode():
    with pytest.raises(ConfigError, match="mode"):
        parse_config(
            {"schema_version": 1, "seed": 1, "attacks": [{"name": "cw", "mode": "both"}]}
        )


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

def test_ingest_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError, match="manifest"):
        cli.ingest(tmp_path / "empty")


def test_ingest_empty_manifest_warns(tmp_path, caplog):
    d = tmp_path / "split"
    d.mkdir()
    (d / "manifest.csv").write_text("id,filename,label,target\n")
    with caplog.at_level("WARNING"):
        records = cli.ingest(d)
    assert records == []
    assert any("no records" in m for m in caplog.messages)


def test_ingest_rejects_label_out_of_range(tmp_path):
    d = tmp_path / "split"
    d.mkdir()
    data.save_png(d / "a.png", np.zeros((8, 8, 3)))
    (d / "manifest.csv").write_text("id,filename,label,target\n0,a.png,10,\n")
    with pytest.raises(ConfigError, match=":2"):
        cli.ingest(d)


def test_ingest_rejects_target_equal_to_label(tmp_path):
    d = tmp_path / "split"
    d.mkdir()
    data.save_png(d / "a.png", np.zeros((8, 8, 3)))
    (d / "manifest.csv").write_text("id,filename,label,target\n0,a.png,3,3\n")
    with pytest.raises(ConfigError, match="ground truth"):
        cli.ingest(d)


def test_ingest_rejects_missing_image(tmp_path):
    d = tmp_path / "split"
    d.mkdir()
    (d / "manifest.csv").write_text("id,filename,label,target\n0,gone.png,1,\n")
    with pytest.raises(ConfigError, match="missing"):
        cli.ingest(d)


def test_ingest_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    X = np.stack([data.render_sample(i % 10, rng) for i in range(10)])
    y = np.arange(10) % 10
    data.write_split(tmp_path / "split", X, y, targets=data.default_targets(y))
    records = cli.ingest(tmp_path / "split")
    assert len(records) == 10
    for rec, x, label in zip(records, X, y):
        assert np.array_equal(rec.image, x)
        assert rec.label == label
        assert rec.target is not None and rec.target != rec.label


# ---------------------------------------------------------------------------
# End-to-end mini pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("mini")
    cfg_path = _write_config(tmp_path)
    assert cli.main(["--config", str(cfg_path), "make-dataset"]) == 0
    assert cli.main(["--config", str(cfg_path), "train"]) == 0
    assert cli.main(["--config", str(cfg_path), "attack"]) == 0
    assert cli.main(["--config", str(cfg_path), "evaluate"]) == 0
    assert cli.main(["--config", str(cfg_path), "report"]) == 0
    return tmp_path, cfg_path


def test_pipeline_outputs_exist(mini_run):
    tmp_path, _ = mini_run
    out = tmp_path / "out"
    assert (out / "models" / "source.npz").exists()
    assert (out / "models" / "training_metrics.json").exists()
    camps = sorted((out / "attacks").iterdir())
    assert len(camps) == 2
    for camp in camps:
        assert (camp / "records.csv").exists()
        assert (camp / "report.json").exists()
        assert len(list((camp / "images").glob("adv_*.png"))) == 6
    assert (out / "evaluate" / "evaluation.json").exists()
    assert (out / "report.md").exists()


def test_training_metrics_meet_gate(mini_run):
    tmp_path, _ = mini_run
    metrics = json.loads(
        (tmp_path / "out" / "models" / "training_metrics.json").read_text()
    )
    assert metrics["source"]["val_accuracy"] >= 0.85
    assert metrics["transfer"]["val_accuracy"] >= 0.85


def test_persisted_adversarial_images_still_adversarial(mini_run):
    tmp_path, _ = mini_run
    out = tmp_path / "out"
    model = ConvNetClassifier.load(out / "models" / "source.npz")
    for camp in sorted((out / "attacks").iterdir()):
        report = json.loads((camp / "report.json").read_text())
        import csv

        with open(camp / "records.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            if row["success"] != "1":
                continue
            img = data.load_png(camp / "images" / row["filename"])
            z = model.decision_function(img[None])[0]
            if report["mode"] == "targeted":
                assert is_adversarial(z, target=int(row["target"]), kappa=0.0)
            else:
                assert is_adversarial(z, y=int(row["label"]), kappa=0.0)


def test_rerun_reproduces_outputs_byte_for_byte(mini_run, tmp_path):
    src_tmp, cfg_path = mini_run
    out2 = tmp_path / "out2"
    assert cli.main(["--config", str(cfg_path), "--out", str(out2), "attack"]) == 0
    out1 = src_tmp / "out"
    for camp in sorted((out1 / "attacks").iterdir()):
        for f in sorted(camp.rglob("*")):
            if f.is_dir():
                continue
            twin = out2 / "attacks" / camp.name / f.relative_to(camp)
            if f.name == "report.json":
                # config snapshot embeds the output dir; compare the rest
                a = json.loads(f.read_text())
                b = json.loads(twin.read_text())
                a["config"].pop("output_dir")
                b["config"].pop("output_dir")
                assert a == b
            else:
                assert f.read_bytes() == twin.read_bytes(), f.name


def test_attack_requires_checkpoint(tmp_path):
    cfg_path = _write_config(tmp_path)
    assert cli.main(["--config", str(cfg_path), "make-dataset"]) == 0
    assert cli.main(["--config", str(cfg_path), "attack"]) == 2


def test_targeted_attack_without_targets_fails_before_compute(tmp_path):
    cfg_path = _write_config(tmp_path)
    assert cli.main(["--config", str(cfg_path), "make-dataset"]) == 0
    # strip targets from the val manifest
    val = Path(json.loads(cfg_path.read_text())["dataset"]["dir"]) / "val"
    manifest = (val / "manifest.csv").read_text().splitlines()
    stripped = [manifest[0]] + [",".join(r.split(",")[:3]) + "," for r in manifest[1:]]
    (val / "manifest.csv").write_text("\n".join(stripped) + "\n")
    assert cli.main(["--config", str(cfg_path), "train"]) == 0
    assert cli.main(["--config", str(cfg_path), "attack"]) == 2


def test_unknown_config_field_fails_cli(tmp_path):
    bad = {"schema_version": 1, "seed": 1, "bogus": True}
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert cli.main(["--config", str(p), "report"]) == 2


def test_aggregate_regenerates_from_persisted_records(mini_run):
    import csv
    from types import SimpleNamespace

    from advcolor import evaluation

    tmp_path, _ = mini_run
    for camp in sorted((tmp_path / "out" / "attacks").iterdir()):
        report = json.loads((camp / "report.json").read_text())
        with open(camp / "records.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        outcomes = [
            SimpleNamespace(
                success=row["success"] == "1",
                l2=float(row["l2"]),
                linf=float(row["linf"]),
                c2=float(row["c2"]),
            )
            for row in rows
        ]
        regen = evaluation.aggregate(outcomes).as_dict()
        assert regen == report["aggregate"]
