import json

import pytest

from esnasr import cli
from esnasr.cells import param_count
from esnasr.data import load_jsonl
from esnasr.errors import InvalidConfigError
from esnasr import experiments
from esnasr.experiments import (ExperimentConfig, encoder_decoder_kinds, evaluate, run_training,
                                train_dataset)

SMALL = ["--steps", "6", "--train-size", "40", "--test-size", "8", "--enc-dim", "8",
         "--dec-dim", "8", "--joint-dim", "8", "--batch-size", "4"]


def test_configuration_wiring():
    assert encoder_decoder_kinds("baseline") == (["lstm", "lstm"], ["lstm", "lstm"])
    assert encoder_decoder_kinds("rnnt-e") == (["esn", "esn"], ["lstm", "lstm"])
    assert encoder_decoder_kinds("rnnt-d") == (["lstm", "lstm"], ["esn", "esn"])
    assert encoder_decoder_kinds("progressive-1") == (["lstm", "esn"], ["esn", "esn"])
    assert encoder_decoder_kinds("progressive-0") == encoder_decoder_kinds("rnnt-d")
    for bad in ("progressive-3", "rnnt", ""):
        with pytest.raises(InvalidConfigError):
            encoder_decoder_kinds(bad)


def test_experiment_config_round_trip_and_splits():
    exp = ExperimentConfig(config="rnnt-e", seed=3, train_size=20, test_size=5)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(exp.to_dict()))) == exp
    train_ids = {u.id for u in train_dataset(exp)}
    test_ids = {u.id for u in experiments.test_dataset(exp)}
    assert len(train_ids) == 20 and len(test_ids) == 5 and not train_ids & test_ids


def test_single_example_memorised():
    exp = ExperimentConfig(config="baseline", steps=400, train_size=1, batch_size=1, enc_dim=16,
                           dec_dim=16, joint_dim=16, lr=1e-2)
    model, _ = run_training(exp)
    assert evaluate(model, train_dataset(exp))["wer"] == 0.0


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "test.jsonl"
    assert cli.main(["gen-data", "--split", "test", "--test-size", "6", "--out", str(out)]) == 0
    data = load_jsonl(out)
    assert len(data) == 6 and data[0].frames.shape[1] == 16
    long = tmp_path / "long.jsonl"
    assert cli.main(["gen-data", "--split", "longform", "--test-size", "12", "--longform-k", "3",
                     "--longform-n", "4", "--out", str(long)]) == 0
    assert len(load_jsonl(long)) == 4


def test_train_outputs_and_wiring(tmp_path, capsys):
    out = tmp_path / "e"
    assert cli.main(["train", "--config", "rnnt-e", "--seed", "7", "--out", str(out)] + SMALL) == 0
    summary = json.loads(capsys.readouterr().out)
    assert any(n.startswith("decoder.0.w_") for n in summary["trainable_tensors"])
    assert {"encoder.0.w_res", "encoder.0.w_in", "encoder.1.w_res"} <= set(summary["frozen_tensors"])
    assert "encoder.0.rho" in summary["trainable_tensors"]
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(1, 7))
    archived = ExperimentConfig.from_dict(json.loads((out / "experiment.json").read_text()))
    assert archived.config == "rnnt-e" and archived.seed == 7 and archived.steps == 6


def test_train_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["train", "--config", "rnnt-d", "--seed", "3", "--out", str(d)] + SMALL) == 0
    assert (a / "model.esrm").read_bytes() == (b / "model.esrm").read_bytes()


def test_eval_and_inspect(tmp_path, capsys):
    out = tmp_path / "d"
    cli.main(["train", "--config", "rnnt-d", "--out", str(out)] + SMALL)
    capsys.readouterr()
    report = tmp_path / "report.json"
    assert cli.main(["eval", "--model", str(out / "model.esrm"), "--longform-k", "3",
                     "--longform-n", "2", "--train-subset", "5", "--out", str(report)]) == 0
    table = capsys.readouterr().out
    assert "longform" in table and "WER" in table
    rep = json.loads(report.read_text())
    assert set(rep["splits"]) == {"train", "test", "longform"}
    assert rep["splits"]["test"]["utterances"] == 8 and rep["longform_k"] == 3

    assert cli.main(["inspect", "--model", str(out / "model.esrm"), "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    frozen = {t["name"] for t in info["tensors"] if not t["trainable"]}
    assert frozen == {"decoder.0.w_res", "decoder.0.w_in", "decoder.1.w_res", "decoder.1.w_in"}
    for layer in info["layers"]:
        if layer["kind"] == "esn":
            assert layer["trainable_params"] == 2
            assert layer["spectral_radius"] == pytest.approx(1.0, abs=1e-6)
        else:
            assert layer["trainable_params"] == param_count("lstm", layer["input_dim"],
                                                            layer["state_dim"])
    assert info["file_size"]["predicted_total"] == info["file_size"]["actual_total"]
    assert cli.main(["inspect", "--model", str(out / "model.esrm")]) == 0
    assert "frozen" in capsys.readouterr().out


def test_baseline_to_reservoir_decoder_ratio(tmp_path, capsys):
    for name in ("baseline", "rnnt-d"):
        cli.main(["train", "--config", name, "--out", str(tmp_path / name), "--steps", "0",
                  "--train-size", "4", "--batch-size", "2"])
    capsys.readouterr()
    layers = {}
    for name in ("baseline", "rnnt-d"):
        cli.main(["inspect", "--json", "--model", str(tmp_path / name / "model.esrm")])
        layers[name] = [l for l in json.loads(capsys.readouterr().out)["layers"]
                        if l["stack"] == "decoder"]
    for lstm, esn in zip(layers["baseline"], layers["rnnt-d"]):
        assert lstm["trainable_params"] == 4 * esn["simple_rnn_equivalent"]


def test_bench_identical_configs(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--config-a", "rnnt-d", "--config-b", "rnnt-d", "--bench-steps", "4",
                     "--out", str(out)] + SMALL) == 0
    rep = json.loads(out.read_text())
    assert [r["config"] for r in rep["results"]] == ["rnnt-d", "rnnt-d"]
    assert rep["results"][0]["updated_tensors"] == rep["results"][1]["updated_tensors"]
    assert rep["ratios"][0] == 1.0


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--config", "bogus", "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["inspect", "--model", str(tmp_path / "missing.esrm")]) == cli.EXIT_IO
    bad = tmp_path / "bad.esrm"
    bad.write_bytes(b"ESRM" + bytes(40))
    assert cli.main(["inspect", "--model", str(bad)]) == cli.EXIT_CORRUPT
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == cli.EXIT_CONFIG
    assert len({cli.EXIT_CONFIG, cli.EXIT_DIVERGENCE, cli.EXIT_IO, cli.EXIT_CORRUPT}) == 4


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    from esnasr.errors import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("non-finite loss")
    monkeypatch.setattr(cli, "run_training", boom)
    assert cli.main(["train", "--out", str(tmp_path / "z")] + SMALL) == cli.EXIT_DIVERGENCE
