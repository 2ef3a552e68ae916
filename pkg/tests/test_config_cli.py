import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dualfed import wire
from dualfed.cli import main
from dualfed.config import ConfigError, RunConfig, dump_config, parse_config
from dualfed.evaluation import harmonic_mean
from dualfed.experiment import metrics_csv, run_experiment, variant_config

SMALL = """
seed = 3
data.num_classes = 8
data.samples_per_class = 30
data.test_per_class = 20
partition.num_clients = 2
train.rounds = 4
train.batch_size = 16
stage.fixed_m = 2
"""


def test_defaults_follow_reported_settings():
    c = RunConfig()
    assert (c.partition.num_clients, c.train.rounds, c.train.lr, c.train.batch_size, c.model.rank) == (5, 20, 1e-3, 64, 4)
    assert (c.rl.group_size, c.rl.sigma, c.rl.eps_clip, c.rl.beta) == (3, 0.1, 0.2, 0.5)
    assert (c.stage.patience, c.stage.eps_acc) == (2, 0.003)
    assert (c.train.epochs_sft, c.rl.epochs) == (2, 3)
    c.validate()


def test_parse_and_roundtrip():
    cfg = parse_config(SMALL + "rl.variant = gmpo\nupload.per_class_cap = 16\nmodel.lora_init = none\n")
    assert cfg.rl.variant == "gmpo" and cfg.upload.per_class_cap == 16 and cfg.model.lora_init is None
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(RunConfig())) == RunConfig()


def test_unknown_and_malformed_keys():
    for text in ("rl.nope = 1", "bogus = 2", "data.seed = 4", "train.rounds = many", "just words"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_validation_lists_every_problem():
    cfg = parse_config("train.lr = -1\nrl.group_size = 1\nupload.ratio = 0\nmodel.rank = 9")
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    msg = str(info.value)
    for part in ("train.lr", "rl.group_size", "upload.ratio", "model.rank"):
        assert part.lower() in msg.lower()


def test_zero_rounds_is_zero_shot_only():
    cfg = replace(parse_config(SMALL), train=replace(parse_config(SMALL).train, rounds=0))
    res = run_experiment(cfg)
    assert len(res.history) == 1 and res.history[0].stage == "zero_shot"
    assert metrics_csv(res.history).count("\n") == 1


def test_default_run_beats_zero_shot():
    res = run_experiment(RunConfig())
    assert res.final.base_acc > res.history[0].base_acc
    assert res.final.round == 20


def test_variants():
    base = RunConfig()
    assert variant_config(base, "base") == base
    assert variant_config(base, "decoupled_off").train.decoupled is False
    assert variant_config(base, "upload.ratio=0.2;rl.beta=0.1").upload.ratio == 0.2
    with pytest.raises(KeyError):
        variant_config(base, "nope")


def write_cfg(tmp_path, text=SMALL, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text + f"output_dir = {tmp_path / 'out'}\n")
    return p


def test_cli_run_outputs(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("DUALFED_OUTPUT_DIR", raising=False)
    cfg = write_cfg(tmp_path)
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("round,stage,train_acc_mean,local_acc,base_acc,novel_acc,hm")
    assert len(rows) == 1 + 4
    for r in rows[1:]:
        f = r.split(",")
        b, n, hm = float(f[4]), float(f[5]), float(f[6])
        assert abs(hm - harmonic_mean(b, n)) < 1e-5
    summary = json.loads((out / "summary.json").read_text())
    assert parse_config(summary["config"]) == parse_config(cfg.read_text())
    assert "wall_time_s" in summary
    mats = wire.decode_lora_matrices((out / "image_lora.bin").read_bytes())
    assert len(mats) == 2 and all(np.all(np.isfinite(m)) for m in mats)
    wire.decode_lora_matrices((out / "text_lora.bin").read_bytes())


def test_cli_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DUALFED_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert main(["run", str(write_cfg(tmp_path))]) == 0
    assert (tmp_path / "elsewhere" / "metrics.csv").exists()
    assert not (tmp_path / "out").exists()


def test_cli_error_codes(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.cfg")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: io:") and "\n" not in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.rounds = -1\n")
    assert main(["run", str(bad)]) == 1
    assert capsys.readouterr().err.startswith("error: config:")
    assert main(["frobnicate"]) == 1


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--which", "text", "-n", "3"]) == 0
    assert "text" in capsys.readouterr().out


def test_cli_gradcheck_threshold_exit(monkeypatch):
    import dualfed.gradcheck as gc
    monkeypatch.setattr(gc, "TOLERANCE", 0.0)
    assert main(["gradcheck", "--which", "ce", "-n", "1"]) == 3


def test_cli_partition(tmp_path, capsys):
    assert main(["partition", str(write_cfg(tmp_path))]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "client_id,class_id,count"
    assert sum(int(l.split(",")[2]) for l in lines[1:]) == 4 * 30


def test_cli_compare_matches_run(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("DUALFED_OUTPUT_DIR", raising=False)
    cfg = write_cfg(tmp_path)
    assert main(["compare", str(cfg), "--variants", "base,sft_only,decoupled_off"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in table[1:]] == ["base", "sft_only", "decoupled_off"]
    f = run_experiment(parse_config(cfg.read_text())).final
    assert table[1].split()[1:] == [f"{f.base_acc:.4f}", f"{f.novel_acc:.4f}", f"{f.hm:.4f}"]
    assert main(["compare", str(cfg), "--variants", "nope"]) == 1


def test_csv_is_byte_identical_across_runs_and_workers(tmp_path):
    cfg = parse_config(SMALL)
    a = metrics_csv(run_experiment(cfg).history)
    b = metrics_csv(run_experiment(cfg).history)
    c = metrics_csv(run_experiment(replace(cfg, train=replace(cfg.train, workers=3))).history)
    assert a == b == c


@pytest.mark.parametrize("variant", ["rl_only", "gmpo", "dapo", "liteppo", "dr_grpo", "ref_latest",
                                     "ref_final_sft", "upload.groups=4", "upload.noise_sigma=0.05",
                                     "partition.scheme=dirichlet", "train.participation=0.5"])
def test_variants_run(variant):
    res = run_experiment(variant_config(parse_config(SMALL), variant))
    assert res.final.base_acc is not None and np.isfinite(res.final.hm)


def test_feature_shift_reports_domains():
    text = SMALL.replace("partition.num_clients = 2", "partition.num_clients = 2\npartition.scheme = feature_shift"
                         "\ndata.num_domains = 2")
    res = run_experiment(parse_config(text))
    assert sorted(res.final.domain_acc) == [0, 1]
    assert "domain0_acc,domain1_acc" in metrics_csv(res.history).splitlines()[0]
