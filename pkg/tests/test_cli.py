import csv
import json
import os

import numpy as np
import pytest

from fieldctr import cli
from fieldctr.model import load_checkpoint
from fieldctr.synthetic import PlantedInteractionTask


def _write_inputs(d, n=1000, drop_rating=False):
    task = PlantedInteractionTask(n_fields=4, n_values=8, pairs=((0, 1),), strength=2.0, seed=0)
    data = task.sample(n, 0)
    names = task.schema.names
    with open(d / "schema.tsv", "w") as fh:
        for f in task.schema.fields:
            fh.write(f"{f.name}\t{f.kind}\t{f.description}\n")
    with open(d / "table.csv", "w") as fh:
        fh.write(",".join(names + ([] if drop_rating else ["rating"]) + ["timestamp"]) + "\n")
        for i in range(n):
            cells = [f"v{j}" for j in data.indices[i]]
            if not drop_rating:
                cells.append("5" if data.labels[i] else "1")
            fh.write(",".join(cells + [str(i)]) + "\n")
    (d / "run.ini").write_text(
        "[data]\nschema = schema.tsv\ntable = table.csv\n\n"
        "[embeddings]\nsource = synthetic\nsynthetic_mode = structured\nsynthetic_dim = 8\n"
        "clusters = user_income:item_price\n\n"
        "[model]\nembedding_dim = 4\nhidden_units = 4\n\n"
        "[train]\nmax_epochs = 3\nbatch_size = 64\n\n[output]\ndir = out\n"
    )
    return d / "run.ini", d / "out"


@pytest.fixture
def workspace(tmp_path):
    cfg, out = _write_inputs(tmp_path)
    assert cli.main(["--config", str(cfg), "prepare"]) == 0
    return cfg, out


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_prepare_splits_and_idempotence(workspace, capsys):
    cfg, out = workspace
    sizes = [sum(1 for _ in open(out / "splits" / f"{s}.tsv")) - 1 for s in ("train", "val", "test")]
    assert sizes == [800, 100, 100]
    before = {p: (out / p).read_bytes() for p in ("splits/train.tsv", "vocab/00_user_income.tsv", "prepare.json")}
    assert cli.main(["--config", str(cfg), "prepare"]) == 0
    assert all((out / p).read_bytes() == b for p, b in before.items())


def test_prepare_missing_rating(tmp_path, capsys):
    cfg, _ = _write_inputs(tmp_path, drop_rating=True)
    assert cli.main(["--config", str(cfg), "prepare"]) != 0
    assert "rating" in capsys.readouterr().err


def test_flags_after_subcommand(workspace, tmp_path):
    cfg, _ = workspace
    assert cli.main(["prepare", "--config", str(cfg), "--out", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "splits" / "test.tsv").exists()


def test_gen_corpus(workspace, capsys):
    cfg, out = workspace
    assert cli.main(["--config", str(cfg), "gen-corpus", "--samples", "5"]) == 0
    printed = capsys.readouterr().out
    assert "user_income: 5" in printed
    lines = (out / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 20
    assert cli.main(["--config", str(cfg), "gen-corpus", "--samples", "0"]) == 2
    assert "samples_per_field" in capsys.readouterr().err


def test_train_is_reproducible(workspace, capsys):
    cfg, out = workspace
    assert cli.main(["--config", str(cfg), "train"]) == 0
    first = {n: (out / n).read_bytes() for n in ("model.ckpt", "run_log.jsonl", "metrics.json")}
    assert "wall-clock" in capsys.readouterr().err
    assert cli.main(["--config", str(cfg), "train"]) == 0
    assert all((out / n).read_bytes() == b for n, b in first.items())
    metrics = json.loads(first["metrics.json"])
    assert metrics["split"] == "test" and 0 <= metrics["auc"] <= 1
    assert json.loads((out / "timing.json").read_text())["wall_seconds"] > 0
    assert cli.main(["--config", str(cfg), "--seed", "1", "train"]) == 0
    assert (out / "model.ckpt").read_bytes() != first["model.ckpt"]


def test_ablation_precedence(workspace, capsys, monkeypatch):
    cfg, out = workspace
    monkeypatch.setenv("FIELDCTR_ENHANCEMENT_LAMBDA_KL", "0.3")
    monkeypatch.setenv("FIELDCTR_ENHANCEMENT_LAMBDA_FM", "0.5")
    assert cli.main(["--config", str(cfg), "train", "--ablate", "wo-fre"]) == 0
    assert "takes precedence over configured 0.3" in capsys.readouterr().out
    bundle, _ = load_checkpoint(out / "model.ckpt")
    assert bundle.fre.lambda_kl == 0.0 and bundle.fie.lambda_fm == 0.5
    assert cli.main(["--config", str(cfg), "train", "--ablate", "wo-fie"]) == 0
    bundle, _ = load_checkpoint(out / "model.ckpt")
    assert bundle.fre.lambda_kl == 0.3 and not bundle.fie.active


def test_ablate_wo_ft_switches_embeddings(workspace, monkeypatch):
    cfg, out = workspace
    monkeypatch.setenv("FIELDCTR_ENHANCEMENT_LAMBDA_FM", "0.5")
    assert cli.main(["--config", str(cfg), "train"]) == 0
    tuned, _ = load_checkpoint(out / "model.ckpt")
    assert cli.main(["--config", str(cfg), "train", "--ablate", "wo-ft"]) == 0
    untuned, _ = load_checkpoint(out / "model.ckpt")
    assert not np.array_equal(tuned.field_embeddings, untuned.field_embeddings)
    assert tuned.interaction[0, 1] >= 0.9


def test_evaluate(workspace, capsys):
    cfg, out = workspace
    assert cli.main(["--config", str(cfg), "train"]) == 0
    capsys.readouterr()
    assert cli.main(["--config", str(cfg), "evaluate", "--split", "val", "--base-auc", "0.55"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["split"] == "val" and rep["relaimpr_pct"] is not None
    assert cli.main(["--config", str(cfg), "evaluate", "--checkpoint", str(out / "missing.ckpt")]) == 1


def test_sweep(workspace, monkeypatch):
    cfg, out = workspace
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_KL_GRID", "0.1,0.5")
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_FM_GRID", "0.3")
    monkeypatch.setenv("FIELDCTR_TRAIN_MAX_EPOCHS", "1")
    assert cli.main(["--config", str(cfg), "sweep"]) == 0
    rows = _read_csv(out / "sweep.csv")
    assert [(r["lambda_kl"], r["lambda_fm"]) for r in rows] == [("0.1", "0.3"), ("0.5", "0.3")]
    assert sum(int(r["best"]) for r in rows) == 1
    best = max(rows, key=lambda r: float(r["val_auc"]))
    assert best["best"] == "1"
    summary = _read_csv(out / "sweep_summary.csv")
    vals = [float(r["val_auc"]) for r in summary]
    assert vals == sorted(vals, reverse=True)

    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_KL_GRID", "0.7")
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_FM_GRID", "1.0")
    assert cli.main(["--config", str(cfg), "sweep"]) == 0
    assert len(_read_csv(out / "sweep.csv")) == 1


def test_sweep_isolates_failing_cells(workspace, monkeypatch):
    cfg, out = workspace
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_KL_GRID", "0.1,0.5")
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_FM_GRID", "0.3")
    monkeypatch.setenv("FIELDCTR_TRAIN_MAX_EPOCHS", "1")
    real = cli.build_estimator

    def flaky(cfg, schema, sizes, untuned=False, **kw):
        if kw.get("lambda_kl") == 0.5:
            raise RuntimeError("boom")
        return real(cfg, schema, sizes, untuned, **kw)

    monkeypatch.setattr(cli, "build_estimator", flaky)
    assert cli.main(["--config", str(cfg), "sweep"]) == 0
    rows = _read_csv(out / "sweep.csv")
    assert rows[1]["error"] == "RuntimeError: boom" and rows[0]["val_auc"]


def test_sweep_rejects_off_grid(workspace, monkeypatch, capsys):
    cfg, _ = workspace
    monkeypatch.setenv("FIELDCTR_SWEEP_LAMBDA_KL_GRID", "0.2")
    assert cli.main(["--config", str(cfg), "sweep"]) == 2
    assert "tuning grid" in capsys.readouterr().err


def test_default_sweep_grid_is_seven_by_seven():
    cfg = cli.load_config(environ={})
    assert len(cfg["sweep"]["lambda_kl_grid"]) * len(cfg["sweep"]["lambda_fm_grid"]) == 49


def test_gen_embeddings_and_heatmap(workspace):
    cfg, out = workspace
    assert cli.main(["--config", str(cfg), "gen-embeddings"]) == 0
    assert len((out / "field_embeddings.jsonl").read_text().splitlines()) == 4
    assert cli.main(["--config", str(cfg), "export-heatmap", "--embeddings", str(out / "field_embeddings.jsonl")]) == 0
    rows = list(csv.reader(open(out / "heatmap.csv")))
    assert rows[0][1:] == ["user_income", "item_price", "user_age", "item_category"]
    M = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    np.testing.assert_array_equal(np.diag(M), 1.0)
    np.testing.assert_array_equal(M, M.T)
    assert M[0, 1] >= 0.9


def test_missing_prepare(tmp_path, capsys):
    cfg, _ = _write_inputs(tmp_path)
    assert cli.main(["--config", str(cfg), "train"]) == 1
    assert "prepare" in capsys.readouterr().err


def test_unknown_config(capsys):
    assert cli.main(["--config", "/nonexistent.ini", "prepare"]) == 2
