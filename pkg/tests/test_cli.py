"""CLI contract: flags, exit codes, golden output strings."""
import json

import numpy as np
import pytest

from peftlab.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main

TINY_CONFIG = {
    "method": "lora",
    "arch": {
        "vocab_size": 256,
        "d_model": 8,
        "n_layers": 1,
        "n_heads": 2,
        "ffn_mult": 2,
        "max_seq_len": 16,
    },
    "adapter": {"rank": 2, "prefix_len": 2, "depth": 1},
    "steps": 3,
    "batch_size": 2,
    "seq_len": 8,
    "seed": 1,
    "pretrain_steps": 2,
}


def write_config(tmp_path, **overrides):
    raw = dict(TINY_CONFIG)
    raw.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return path


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------


def test_count_params_lora_golden(capsys):
    code = main(
        ["count-params", "--arch", "gpt-neo-125m", "--method", "lora",
         "--rank", "8", "--multiplicity", "1"]
    )
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == "147456 (0.12%)"


def test_count_params_prefix_golden(capsys):
    code = main(
        ["count-params", "--arch", "gpt-neo-125m", "--method", "prefix",
         "--prefix-len", "60"]
    )
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == "552960 (0.44%)"


def test_count_params_full_golden(capsys):
    code = main(["count-params", "--arch", "gpt-neo-125m", "--method", "full"])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == "125198592 (100.00%)"


def test_count_params_unknown_method(capsys):
    code = main(["count-params", "--arch", "gpt-neo-125m", "--method", "dora"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("error:")
    for m in ("full", "lora", "sora", "prefix", "qaa"):
        assert m in err


def test_count_params_unknown_preset(capsys):
    code = main(["count-params", "--arch", "gpt-neo-13b", "--method", "lora"])
    assert code == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_count_params_arch_file(tmp_path, capsys):
    arch = tmp_path / "arch.json"
    arch.write_text(
        json.dumps(
            {"vocab_size": 100, "d_model": 16, "n_layers": 3, "n_heads": 2,
             "ffn_mult": 4, "max_seq_len": 32}
        )
    )
    code = main(
        ["count-params", "--arch", str(arch), "--method", "lora",
         "--rank", "2", "--multiplicity", "1"]
    )
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip().startswith("192 (")


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def test_grad_check_defaults_pass(capsys):
    code = main(["grad-check"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "max |J_shift - J_fd|" in out


def test_grad_check_zero_tolerance_fails(capsys):
    code = main(["grad-check", "--trials", "3", "--tol", "0"])
    assert code == EXIT_FAIL
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "theta_j" in err


def test_grad_check_qubit_range_enforced(capsys):
    assert main(["grad-check", "--qubits", "7"]) == EXIT_CONFIG
    assert main(["grad-check", "--depth", "5"]) == EXIT_CONFIG
    capsys.readouterr()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_metrics_rows(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    code = main(["train", "--config", str(config), "--out", str(out)])
    assert code == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ms,trainable_params,method"
    assert len(lines) == 1 + TINY_CONFIG["steps"]
    assert (out / "checkpoint.bin").exists()


def test_train_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code = main(["train", "--config", str(missing)])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert str(missing) in err


def test_train_unknown_method_lists_valid_ones(tmp_path, capsys):
    config = write_config(tmp_path)
    code = main(["train", "--config", str(config), "--method", "adapterfusion"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    for m in ("full", "lora", "sora", "prefix", "qaa"):
        assert m in err


def test_train_rejects_unknown_config_key(tmp_path, capsys):
    config = write_config(tmp_path, warmup=10)
    code = main(["train", "--config", str(config)])
    assert code == EXIT_CONFIG
    assert "warmup" in capsys.readouterr().err


def test_train_method_override_applies(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    code = main(
        ["train", "--config", str(config), "--method", "prefix", "--out", str(out)]
    )
    assert code == EXIT_OK
    assert (out / "metrics.csv").read_text().splitlines()[1].endswith(",prefix")


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def test_bench_cross_product(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "bench"
    code = main(
        ["bench", "--config", str(config), "--methods", "lora,prefix",
         "--seeds", "1,2", "--out", str(out)]
    )
    assert code == EXIT_OK
    for method in ("lora", "prefix"):
        for seed in (1, 2):
            assert (out / f"{method}-seed{seed}" / "metrics.csv").exists()
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "method,final_loss_mean,final_loss_std,trainable_params,wall_clock_s"
    assert len(summary) == 3


def test_bench_summary_reproducible(tmp_path, capsys):
    config = write_config(tmp_path)
    means = []
    for name in ("b1", "b2"):
        out = tmp_path / name
        assert (
            main(["bench", "--config", str(config), "--methods", "lora",
                  "--seeds", "1,2", "--out", str(out)])
            == EXIT_OK
        )
        line = (out / "summary.csv").read_text().splitlines()[1].split(",")
        means.append((line[1], line[2]))
    assert means[0] == means[1]


def test_bench_empty_methods(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["bench", "--config", str(config), "--methods", ""]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_bench_unknown_method(tmp_path, capsys):
    config = write_config(tmp_path)
    code = main(["bench", "--config", str(config), "--methods", "lora,xx"])
    assert code == EXIT_CONFIG
    capsys.readouterr()


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def test_generate_from_checkpoint(tmp_path, capsys):
    config = write_config(tmp_path, method="qaa", steps=1)
    out = tmp_path / "out"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    code = main(
        ["generate", "--checkpoint", str(out / "checkpoint.bin"),
         "--prompt", "the", "--max-new-tokens", "4"]
    )
    assert code == EXIT_OK
    text = capsys.readouterr().out.rstrip("\n")
    assert text.startswith("the")
    assert len(text) >= 3


def test_generate_missing_checkpoint(tmp_path, capsys):
    code = main(["generate", "--checkpoint", str(tmp_path / "x.bin"), "--prompt", "a"])
    assert code == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_generate_determinism(tmp_path, capsys):
    config = write_config(tmp_path, steps=0)
    out = tmp_path / "out"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    outputs = []
    for _ in range(2):
        assert (
            main(["generate", "--checkpoint", str(out / "checkpoint.bin"),
                  "--prompt", "ab", "--max-new-tokens", "6"])
            == EXIT_OK
        )
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]
