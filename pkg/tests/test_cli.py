import csv
import json

import pytest

from fundus_cl.cli import main

TINY_TOML = """\
seed = 3
[data]
manifest = "{data}/manifest.csv"
style_dir = "{data}/styles"
input_size = 16
split_train = 0.5
split_val = 0.0
split_test = 0.5
[pretrain]
encoder_stages = [[1, 8], [1, 16]]
embedding_dim = 16
projection_hidden_dim = 16
projection_output_dim = 8
batch_size = 8
max_epochs = 2
probe_batches = 1
[finetune]
lr_grid = [0.001]
optimizer_grid = ["adam"]
batch_grid = [8]
epochs = 2
folds = 2
[eval]
bootstrap_resamples = 200
[sweep]
fractions = [0.5, 1.0]
seeds = 2
batch_sizes = [8]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "40", "--size", "24", "--n-styles", "3",
                 "--seed", "2"]) == 0
    (root / "run.toml").write_text(TINY_TOML.format(data=root / "data"))
    return root


def run(ws, *args):
    return main([*args, "--config", str(ws / "run.toml")])


@pytest.fixture(scope="module")
def pretrained(workspace):
    assert run(workspace, "pretrain", "--out", str(workspace / "pt")) == 0
    return workspace / "pt"


class TestCommands:
    def test_ingest(self, workspace, capsys):
        assert run(workspace, "ingest", "--out", str(workspace / "ing")) == 0
        assert "kept 40 excluded 0" in capsys.readouterr().out
        rows = list(csv.reader(open(workspace / "ing" / "exclusion_report.csv")))
        assert rows == [["image_id", "reason"]]
        assert (workspace / "ing" / "splits.csv").exists()

    def test_ingest_reports_bad_rows(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("image_id,image_uri,grade,patient_id,eye\na,a.png,7,p,OD\n")
        assert run(workspace, "ingest", "--manifest", str(bad), "--out", str(tmp_path / "o")) == 2
        assert "[1]" in capsys.readouterr().err

    def test_pretrain_outputs(self, pretrained):
        rows = list(csv.DictReader(open(pretrained / "loss.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2"]
        record = json.loads((pretrained / "run.json").read_text())
        assert (pretrained / "RUN_ID").read_text().strip().endswith(record["config_digest"][:16])
        assert record["artifacts"]["checkpoint"] == "checkpoint.bin"

    def test_finetune_eval_compare(self, workspace, pretrained):
        assert run(workspace, "finetune", "--init", "cl", "--checkpoint", str(pretrained / "checkpoint.bin"),
                   "--out", str(workspace / "ft_cl")) == 0
        assert run(workspace, "finetune", "--init", "random", "--out", str(workspace / "ft_rand")) == 0
        hp = json.loads((workspace / "ft_cl" / "hyperparams.json").read_text())
        assert hp["learning_rate"] == 0.001 and "threshold" in hp
        header = next(csv.reader(open(workspace / "ft_cl" / "cv_table.csv")))
        assert header == ["lr", "optimizer", "batch", "fold", "val_auc", "status"]

        assert run(workspace, "eval", "--model", str(workspace / "ft_rand" / "model.bin"),
                   "--out", str(workspace / "ev_rand")) == 0
        assert run(workspace, "eval", "--model", str(workspace / "ft_cl" / "model.bin"),
                   "--compare", str(workspace / "ev_rand" / "scores.csv"), "--out", str(workspace / "ev_cl")) == 0
        report = json.loads((workspace / "ev_cl" / "report.json").read_text())
        assert report["auc_ci"][0] <= report["auc"] <= report["auc_ci"][1]
        assert len(report["comparisons"]) == 1 and 0 <= report["comparisons"][0]["p"] <= 1
        roc = list(csv.reader(open(workspace / "ev_cl" / "roc.csv")))
        assert roc[0] == ["threshold", "fpr", "tpr"] and roc[1] == ["inf", "0.0", "0.0"]
        assert (workspace / "ev_cl" / "roc.svg").read_text().startswith("<svg")

    def test_sweep_labels(self, workspace, pretrained):
        assert run(workspace, "sweep", "--kind", "labels", "--checkpoint", str(pretrained / "checkpoint.bin"),
                   "--out", str(workspace / "sw")) == 0
        rows = list(csv.DictReader(open(workspace / "sw" / "sweep.csv")))
        assert len(rows) == 2 * 2 * 2 and list(rows[0]) == ["fraction", "init", "seed", "auc", "sens", "spec"]
        assert (workspace / "sw" / "sweep.svg").exists()

    def test_style_preview(self, workspace):
        assert run(workspace, "style-preview", "--n", "2", "--out", str(workspace / "sp")) == 0
        assert len(list((workspace / "sp").glob("*_after.png"))) == 2


class TestExitCodes:
    def test_cl_without_checkpoint(self, workspace):
        assert run(workspace, "finetune", "--init", "cl", "--out", str(workspace / "x")) == 2

    def test_missing_checkpoint_file(self, workspace):
        assert run(workspace, "finetune", "--init", "cl", "--checkpoint", str(workspace / "nope.bin"),
                   "--out", str(workspace / "x")) == 2

    def test_corrupt_model(self, workspace, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"FUNDCL\x00\x01" + bytes(40))
        assert run(workspace, "eval", "--model", str(tmp_path / "m.bin"), "--out", str(tmp_path / "o")) == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "bad.toml").write_text("[pretrain]\nbatch_size = 1\n")
        assert main(["pretrain", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path / "o")]) == 2

    def test_insufficient_data(self, workspace, tmp_path):
        toml = (workspace / "run.toml").read_text().replace("batch_size = 8", "batch_size = 64")
        (tmp_path / "big.toml").write_text(toml)
        assert main(["pretrain", "--config", str(tmp_path / "big.toml"), "--out", str(tmp_path / "o")]) == 2

    def test_divergence_exit_one(self, workspace, tmp_path, monkeypatch):
        from fundus_cl import pretrain as pretrain_mod
        import numpy as np
        monkeypatch.setattr(pretrain_mod, "nt_xent_loss", lambda z, tau: (float("nan"), np.zeros_like(z)))
        assert run(workspace, "pretrain", "--out", str(tmp_path / "o")) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["finetune"])
        assert exc.value.code == 2
