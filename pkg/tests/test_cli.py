import json
import logging
from pathlib import Path

import pytest

from tgraph import cli
from tgraph.errors import NumericError

SNAPSHOT = Path(__file__).parent / "snapshots" / "help.txt"
TINY = ["--epochs", "1", "--hidden-dim", "16", "--batch", "8", "--k-folds", "4"]


def help_text():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    parts = [parser.format_help()]
    for name, p in sub.choices.items():
        parts.append(f"=== {name} ===\n{p.format_help()}")
    return "\n".join(parts)


def test_help_snapshot(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    assert help_text() == SNAPSHOT.read_text()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--seed", "2", "--graphs", "8", "--nodes", "6..12", "--configs", "12",
                     "--out", str(root / "raw")]) == 0
    assert cli.main(["preprocess", "--in", str(root / "raw"), "--out", str(root / "pre")]) == 0
    for fold in (0, 1):
        assert cli.main(["train", "--data", str(root / "pre"), "--collection", "layout:xla:random",
                         "--fold", str(fold), "--seed", "3", "--out", str(root / "ckpt" / f"fold{fold}.ckpt"),
                         *TINY]) == 0
    return root


def test_pipeline_rank_and_evaluate(pipeline, capsys):
    log = pipeline / "ckpt" / "fold0.ckpt.log.jsonl"
    assert json.loads(log.read_text().splitlines()[0])["event"] == "start"
    out = pipeline / "pred.json"
    assert cli.main(["rank", "--data", str(pipeline / "pre"), "--ckpt", str(pipeline / "ckpt"),
                     "--out", str(out), "--tta", "2", "--batch", "5"]) == 0
    pred = json.loads(out.read_text())
    assert len(pred) == 8
    entry = next(iter(pred.values()))
    assert sorted(entry["order"]) == list(range(len(entry["scores"])))
    capsys.readouterr()
    assert cli.main(["evaluate", "--pred", str(out), "--data", str(pipeline / "pre")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["metric"] == "kendall_tau" and -1 <= report["mean"] <= 1


def test_train_is_deterministic(pipeline, tmp_path):
    args = ["train", "--data", str(pipeline / "pre"), "--collection", "layout:xla:random", "--fold", "0",
            "--seed", "3", "--out", str(tmp_path / "again.ckpt"), *TINY]
    assert cli.main(args) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (pipeline / "ckpt" / "fold0.ckpt").read_bytes()


def test_config_file_precedence(pipeline, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "hidden_dim": 32, "k_folds": 4, "batch": 8}))
    with caplog.at_level(logging.INFO, logger="tgraph"):
        assert cli.main(["train", "--data", str(pipeline / "pre"), "--collection", "layout:xla:random",
                         "--fold", "0", "--out", str(tmp_path / "c.ckpt"), "--config", str(cfg),
                         "--hidden-dim", "16", "--epochs", "1"]) == 0
    logged = next(r.getMessage() for r in caplog.records if "effective options" in r.getMessage())
    opts = json.loads(logged.split(": ", 1)[1])
    assert opts["hidden_dim"] == 16 and opts["epochs"] == 1 and opts["k_folds"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["train", "--data", str(pipeline / "pre"), "--collection", "layout:xla:random",
                     "--fold", "0", "--out", str(tmp_path / "d.ckpt"), "--config", str(bad)]) == 2


def test_exit_codes(pipeline, tmp_path, monkeypatch):
    base = ["train", "--collection", "layout:xla:random", "--fold", "0", "--out", str(tmp_path / "x.ckpt")]
    assert cli.main(base + ["--data", str(tmp_path / "missing")]) == 4
    wrong = ["train", "--data", str(pipeline / "pre"), "--collection", "tile:xla", "--fold", "0",
             "--out", str(tmp_path / "x.ckpt")]
    assert cli.main(wrong) == 2
    assert cli.main(base + ["--data", str(pipeline / "pre"), "--fold", "9", *TINY]) == 2
    assert cli.main(["preprocess", "--in", str(pipeline / "pre"), "--out", str(tmp_path / "p")]) == 2

    def diverge(*args, **kwargs):
        raise NumericError("loss is nan")

    monkeypatch.setattr(cli, "train_fold", diverge)
    assert cli.main(base + ["--data", str(pipeline / "pre"), *TINY]) == 3


def test_ablate_rejects_unknown_and_repeated_flags(pipeline):
    with pytest.raises(SystemExit) as err:
        cli.main(["ablate", "--data", str(pipeline / "pre"), "--disable", "dropout"])
    assert err.value.code == 2
    assert cli.main(["ablate", "--data", str(pipeline / "pre"), "--disable", "edges", "--disable", "edges"]) == 2


def test_ablate_table(pipeline, tmp_path, capsys):
    out = tmp_path / "table.json"
    assert cli.main(["ablate", "--data", str(pipeline / "pre"), "--disable", "edges", "--folds", "2",
                     "--folds-kept", "2", "--tta", "1", "--out", str(out), *TINY]) == 0
    text = capsys.readouterr().out
    assert "full" in text and "-edges" in text
    rows = json.loads(out.read_text())["rows"]
    assert [r["variant"] for r in rows] == ["full", "-edges"]


def test_ablate_without_flags_matches_train_and_evaluate(pipeline, tmp_path):
    from tgraph.inference import holdout_evaluation
    from tgraph.model import load_checkpoint
    from tgraph.preprocess import load_preprocessed_dataset
    from tgraph.training import FoldResult, make_folds

    out = tmp_path / "table.json"
    assert cli.main(["ablate", "--data", str(pipeline / "pre"), "--folds", "1", "--folds-kept", "1",
                     "--tta", "1", "--seed", "3", "--out", str(out), *TINY]) == 0
    row = json.loads(out.read_text())["rows"][0]
    ds = load_preprocessed_dataset(pipeline / "pre")
    fold = make_folds([g.graph_id for g in ds.graphs], 4, 3)[0]
    ckpt = load_checkpoint(pipeline / "ckpt" / "fold0.ckpt")
    expected = holdout_evaluation(ds, [FoldResult(fold, ckpt, None, 0)], n_tta=1, seed=3)["mean"]
    assert row["tau"] == expected


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert "conv_block" in capsys.readouterr().out


def test_bad_node_range():
    with pytest.raises(SystemExit) as err:
        cli.main(["synth", "--seed", "1", "--graphs", "2", "--nodes", "8-40", "--configs", "3", "--out", "x"])
    assert err.value.code == 2


def test_synth_default_style(tmp_path):
    from tgraph.dataset import load_dataset

    assert cli.main(["synth", "--seed", "1", "--graphs", "2", "--nodes", "6..8", "--configs", "5",
                     "--style", "default", "--out", str(tmp_path)]) == 0
    assert str(load_dataset(tmp_path).kind) == "layout:xla:default"
