import csv
import json

import pytest

from mcnn.cli import PREDICT_COLUMNS, main
from mcnn.data import write_dataset
from mcnn.synthetic import make_corpus

TINY = ["--embedding-size", "8", "--filters", "8", "--hidden", "8", "--ff-dim", "16",
        "--max-len-ha", "100", "--max-len-na", "90", "--max-epochs", "2", "--learning-rate", "0.01"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, bank, schema):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(root / "data.ndjson", make_corpus(40, seed=21, bank=bank))
    (root / "schema.json").write_text(json.dumps(schema.to_dict()))
    return root


def run_args(ws, out="run"):
    return ["--dataset", str(ws / "data.ndjson"), "--schema", str(ws / "schema.json"),
            "--output-dir", str(ws / out)]


@pytest.fixture(scope="module")
def checkpoint(workspace):
    assert main(["--seed", "4", "train", *run_args(workspace), *TINY]) == 0
    return workspace / "run" / "model.ckpt"


def read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh, delimiter="\t"))


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert out.startswith("mcnn 0.1.0") and "checkpoint format 1" in out


class TestIngest:
    def test_toy_dataset(self, tmp_path, capsys):
        (tmp_path / "ha.fasta").write_text(">s1|IRD\nMKAILV\n>s1|GISAID\nMKAILV\n>s2\nMKTIIA\n"
                                           ">s3\nMKVLLA\n>s4\nMKQQQA\n")
        (tmp_path / "na.fasta").write_text(">s1\nMNPNQK\n>s2\nMNPNQR\n>s3\nMNPNQS\n>s4\nMNPNQT\n")
        (tmp_path / "meta.tsv").write_text(
            "strain_id\tsource\thost\tsubtype\tyear\tcompleteness\n"
            "s1\tIRD\tchicken\tH5N1\t2004\tcomplete\n"
            "s1\tGISAID\tchicken\tH5N1\t2004\tcomplete\n"
            "s2\tIRD\thuman\tH3N2\t2012\tcomplete\n"
            "s3\tIRD\tswine\tH1N1\t2009\tcomplete\n"
            "s4\tIRD\tunicorn\tH1N1\t2009\tcomplete\n")
        out = tmp_path / "curated.ndjson"
        code = main(["ingest", "--ha", str(tmp_path / "ha.fasta"), "--na",
                     str(tmp_path / "na.fasta"), "--metadata", str(tmp_path / "meta.tsv"),
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 3
        assert {json.loads(line)["strain_id"] for line in lines} == {"s1", "s2", "s3"}
        printed = capsys.readouterr().out.splitlines()
        assert "dedup-gisaid:1" in printed and "unmapped-host:1" in printed
        log = json.loads((tmp_path / "curated.ndjson.log.json").read_text())
        assert log["counts"]["kept"] == 3 and log["input_rows"] == 5

    def test_missing_metadata_flag(self, tmp_path):
        assert main(["ingest", "--out", str(tmp_path / "x")]) == 3


class TestConfig:
    def test_every_violation_listed(self, tmp_path, workspace, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('[model]\nvariant = "lstm"\nlearning_rate = -1.0\n'
                       "[data]\nera = \"1990s\"\n")
        code = main(["train", "--config", str(cfg), "--dataset",
                     str(workspace / "data.ndjson")])
        assert code == 3
        err = capsys.readouterr().err
        assert "variant" in err and "learning_rate" in err and "era" in err

    def test_unknown_key(self, tmp_path, workspace, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[model]\nlayers = 3\n")
        assert main(["train", "--config", str(cfg), "--dataset",
                     str(workspace / "data.ndjson")]) == 3
        assert "layers" in capsys.readouterr().err

    def test_bad_flag_value(self, workspace):
        with pytest.raises(SystemExit) as info:
            main(["train", *run_args(workspace), "--era", "later"])
        assert info.value.code == 3

    def test_malformed_toml(self, tmp_path, workspace):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[model\n")
        assert main(["train", "--config", str(cfg)]) == 3


def test_train_outputs(checkpoint, capsys):
    history = json.loads((checkpoint.parent / "history.json").read_text())
    assert checkpoint.stat().st_size > 0
    assert len(history["epochs"]) == 2 and history["n_train"] + history["n_val"] == 40


def test_train_prints_epochs(workspace, capsys):
    assert main(["train", *run_args(workspace, "run2"), *TINY]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[:2] for line in lines[:2]] == [["epoch", "1"], ["epoch", "2"]]


class TestEvaluate:
    def test_full_and_masked(self, workspace, checkpoint):
        base = ["evaluate", "--checkpoint", str(checkpoint), *run_args(workspace, "eval")]
        assert main(base) == 0
        assert main(base + ["--ha-only"]) == 0
        full = json.loads((workspace / "eval" / "report.json").read_text())
        masked = json.loads((workspace / "eval" / "report_ha_only.json").read_text())
        assert full["provenance"]["masked_channel"] is None
        assert masked["provenance"]["masked_channel"] == "na"
        assert (workspace / "eval" / "report_ha_only.curves.csv").exists()

    def test_masks_are_exclusive(self, workspace, checkpoint):
        with pytest.raises(SystemExit) as info:
            main(["evaluate", "--checkpoint", str(checkpoint), *run_args(workspace),
                  "--ha-only", "--na-only"])
        assert info.value.code == 3


class TestPredict:
    def test_ha_only_row(self, tmp_path, checkpoint):
        (tmp_path / "ha.fasta").write_text(">q1\nMKAILVLLCTFAASNA\n")
        out = tmp_path / "pred.tsv"
        assert main(["predict", "--checkpoint", str(checkpoint), "--ha",
                     str(tmp_path / "ha.fasta"), "--out", str(out)]) == 0
        rows = read_tsv(out)
        assert rows[0] == list(PREDICT_COLUMNS) and len(rows) == 2
        assert rows[1][0] == "q1"
        assert all(0 < float(c) <= 1 for c in rows[1][4:])

    def test_empty_fasta_gives_header_only(self, tmp_path, checkpoint):
        (tmp_path / "ha.fasta").write_text("")
        out = tmp_path / "pred.tsv"
        assert main(["predict", "--checkpoint", str(checkpoint), "--ha",
                     str(tmp_path / "ha.fasta"), "--out", str(out)]) == 0
        assert read_tsv(out) == [list(PREDICT_COLUMNS)]

    def test_corrupt_checkpoint(self, tmp_path, checkpoint):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(checkpoint.read_bytes()[:100])
        (tmp_path / "ha.fasta").write_text(">q1\nMKAILV\n")
        out = tmp_path / "pred.tsv"
        assert main(["predict", "--checkpoint", str(bad), "--ha", str(tmp_path / "ha.fasta"),
                     "--out", str(out)]) == 4
        assert not out.exists()

    def test_pairs_channels_by_id(self, tmp_path, checkpoint):
        (tmp_path / "ha.fasta").write_text(">a\nMKAILV\n>b\nMKTTTA\n")
        (tmp_path / "na.fasta").write_text(">b|IRD\nMNPNQK\n>c\nMNPAAA\n")
        out = tmp_path / "pred.tsv"
        assert main(["predict", "--checkpoint", str(checkpoint), "--ha",
                     str(tmp_path / "ha.fasta"), "--na", str(tmp_path / "na.fasta"),
                     "--out", str(out)]) == 0
        assert [r[0] for r in read_tsv(out)[1:]] == ["a", "b", "c"]


def test_baseline_writes_fold_reports(workspace, capsys):
    assert main(["baseline", *run_args(workspace, "base")]) == 0
    folder = workspace / "base"
    assert sorted(p.name for p in folder.glob("baseline_fold*.json")) == [
        f"baseline_fold{o}.json" for o in range(5)]
    summary = json.loads((folder / "baseline_summary.json").read_text())
    assert summary["n_folds"] == 5
    assert capsys.readouterr().out.startswith("host: macro-F1")


def _without_metadata(path):
    doc = json.loads(path.read_text())
    doc.pop("metadata", None)
    return doc


@pytest.mark.slow
def test_nested_cv_reproducible(workspace):
    for out in ("cv_a", "cv_b"):
        assert main(["--seed", "9", "nested-cv", *run_args(workspace, out), *TINY]) == 0
    a, b = workspace / "cv_a", workspace / "cv_b"
    names = sorted(p.name for p in a.glob("*.json"))
    assert "summary.json" in names and "folds.json" in names and len(names) == 7
    for name in names:
        assert _without_metadata(a / name) == _without_metadata(b / name), name
    for o in range(5):
        assert (a / f"fold{o}.curves.csv").read_bytes() == (b / f"fold{o}.curves.csv").read_bytes()
