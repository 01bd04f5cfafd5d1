import json

import pytest

from bid2x.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, RESOLVED_NAME, load_config, main


def _config(tmp_path, **extra):
    lines = ["[data]", f"path = {tmp_path / 'data' / 'd.jsonl'}", "scenarios = BCB,TR,BS", "n_campaigns_each = 6",
             "holdout = BS", "[train]", "D = 8", "batch_size = 4", "epochs = 1", "lr = 1e-3", "[probe]",
             "grid = 2,8,32", "n_select = 2"]
    for section, body in extra.items():
        lines += [f"[{section}]"] + body
    path = tmp_path / "c.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    run = tmp / "run"
    assert main(["train", "--config", cfg, "--out", str(run)]) == EXIT_OK
    return tmp, cfg, run


def test_train_writes_outputs(trained):
    _, _, run = trained
    assert {"best.ckpt", "last.ckpt", "metrics.jsonl", RESOLVED_NAME} <= {p.name for p in run.iterdir()}
    resolved = load_config(str(run / RESOLVED_NAME))
    assert resolved["train"].getint("D") == 8 and resolved["data"]["holdout"] == "BS"


@pytest.mark.parametrize("command", ["eval", "probe-mono", "probe-pred", "export-hist", "bid-select"])
def test_checkpoint_commands(trained, command, capsys):
    _, _, run = trained
    assert main([command, "--checkpoint", str(run / "best.ckpt"), "--split", "val"]) == EXIT_OK
    assert capsys.readouterr().out.strip()


def test_eval_record(trained):
    _, _, run = trained
    main(["eval", "--checkpoint", str(run / "best.ckpt"), "--split", "test"])
    rec = json.loads((run / "eval_test.jsonl").read_text())
    assert set(rec["model"]["per_target"]) == {"cost", "reward", "count"}


def test_zero_shot_and_finetune(trained, tmp_path):
    _, _, run = trained
    assert main(["zero-shot", "--checkpoint", str(run / "best.ckpt")]) == EXIT_OK
    assert main(["zero-shot", "--checkpoint", str(run / "best.ckpt"), "--holdout", "TR"]) == EXIT_USAGE
    out = tmp_path / "ft"
    assert main(["finetune", "--checkpoint", str(run / "best.ckpt"), "--fraction", "0.5", "--out", str(out)]) == 0
    assert (out / "finetuned.ckpt").exists()


def test_seed_changes_data(trained, tmp_path):
    tmp, cfg, _ = trained
    main(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "d.jsonl").read_bytes() != (tmp_path / "b" / "d.jsonl").read_bytes()
    assert load_config(str(tmp_path / "b" / RESOLVED_NAME))["data"].getint("base_seed") == 5


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["fly"]) == EXIT_USAGE
    unknown_key = tmp_path / "k.cfg"
    unknown_key.write_text("[train]\nlearning_rate = 1\n")
    assert main(["train", "--config", str(unknown_key)]) == EXIT_USAGE
    assert main(["train", "--config", _config(tmp_path, train=["D = 4"])]) == EXIT_USAGE  # duplicate section
    assert main(["train", "--config", _config(tmp_path, extras=["x = 1"])]) == EXIT_USAGE
    assert main(["eval"]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["train", "--config", _config(tmp_path)]) == EXIT_DATA
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == EXIT_DATA
    bad = tmp_path / "data" / "d.jsonl"
    bad.parent.mkdir()
    bad.write_text("not json\n")
    assert main(["train", "--config", _config(tmp_path)]) == EXIT_DATA


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out
