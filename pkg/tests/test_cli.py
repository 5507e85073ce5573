import json

import pytest

from prefixvqa.cli import main
from prefixvqa.data import load_manifest
from prefixvqa.plotting import plot_ablation, plot_eval, plot_losses
from prefixvqa.train import TrainReport

TINY = ["--embed", "16", "--heads", "2", "--layers", "1", "--epochs", "1", "--max-steps", "4",
        "--pretrain-epochs", "1", "--prefix-len", "4"]


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_params_reports_gpt2_xl_lora(capsys):
    assert main(["params"]) == 0
    out = _kv(capsys.readouterr().out)
    assert out["trainable"] == "2457600"
    assert out["total"] == "1557611200"
    assert out["percent"] == "0.1578%"
    assert len(out["config_hash"]) == 16


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"not_an_option": 1}))
    assert main(["params", "--config", str(bad)]) == 2
    assert "not_an_option" in capsys.readouterr().err


def test_config_file_sets_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"peft": "prefix", "prefix_tokens": 10}))
    assert main(["params", "--config", str(cfg)]) == 0
    first = _kv(capsys.readouterr().out)
    assert first["variant"] == "prefix" and first["trainable"] == str(2 * 48 * 10 * 1600)
    assert main(["params", "--config", str(cfg), "--prefix-tokens", "50"]) == 0
    second = _kv(capsys.readouterr().out)
    assert second["trainable"] == "7680000"
    assert second["config_hash"] != first["config_hash"]


def test_runtime_error_exits_1(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path / "missing"), "--data", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["synth", "--scenes", "30", "--seed", "2", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--peft", "lora", *TINY]) == 0
    return data, run


def test_synth_then_train_writes_run(pipeline):
    data, run = pipeline
    assert load_manifest(data / "manifest.jsonl").counts()["train"] > 0
    for name in ("vocab.txt", "base.plmc", "adapter.plmc", "mapper.plmc", "run.json", "train_report.txt",
                 "train_loss.png", "pretrain_loss.png"):
        assert (run / name).stat().st_size > 0, name
    report = _kv((run / "train_report.txt").read_text())
    assert report["command"] == "train" and report["steps"] == "4"


def test_eval_and_generate(pipeline, capsys):
    data, run = pipeline
    assert main(["eval", "--run", str(run), "--data", str(data), "--split", "val"]) == 0
    assert "[overall]" in capsys.readouterr().out
    assert (run / "eval.png").stat().st_size > 0
    rows = (run / "transcript.tsv").read_text().splitlines()
    assert len(rows) > 1
    image_id = load_manifest(data / "manifest.jsonl").splits["val"][0].image_id
    assert main(["generate", "--run", str(run), "--data", str(data), "--image-id", image_id,
                 "--question", "is there a red circle?"]) == 0
    capsys.readouterr()
    assert main(["generate", "--run", str(run), "--data", str(data), "--image-id", "nope",
                 "--question", "is there a red circle?"]) == 1


def test_train_from_saved_base(pipeline, tmp_path):
    data, run = pipeline
    out = tmp_path / "again"
    assert main(["train", "--data", str(data), "--out", str(out), "--base", str(run / "base.plmc"),
                 "--peft", "prefix", *TINY]) == 0
    assert (out / "base.plmc").read_bytes() == (run / "base.plmc").read_bytes()
    assert not (out / "pretrain_loss.png").exists()


def test_plots_render_with_sparse_inputs(tmp_path):
    from prefixvqa.evaluate import AblationResult, TranscriptRow, score_transcript
    from prefixvqa.prompt import PromptTemplate

    rep = TrainReport(train_losses=[2.0, 1.5], val_losses=[2.1, 1.7], best_epoch=2)
    plot_losses(rep, tmp_path / "l.png")
    ev = score_transcript([TranscriptRow("a", "q", "yes", "yes", "yesno")])  # no open rows
    plot_eval(ev, tmp_path / "e.png")
    plot_ablation(AblationResult({PromptTemplate.REGULAR: ev}, {}), tmp_path / "a.png", chance=1 / 3)
    assert all((tmp_path / n).stat().st_size > 0 for n in ("l.png", "e.png", "a.png"))
