import csv

import pytest

from alfa.cli import DEFAULTS, ConfigError, main, read_config_file, resolve

TINY = [
    "--n-per-domain", "12",
    "--image-size", "8",
    "--iterations", "2",
    "--batch", "12",
    "--hidden", "8",
    "--embed-dim", "4",
    "--val-every", "1",
    "--lr", "1e-3",
]  # fmt: skip


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_resolve_defaults():
    config, extras = resolve(dict(DEFAULTS))
    assert config.iterations == 3000 and config.lr == 5e-5 and config.mask == (True, True, True)
    assert extras["thetas"] == (0.0, 0.01, 0.05, 0.5) and extras["seeds"] == (0,)


def test_config_file_parsing(tmp_path):
    (tmp_path / "c.txt").write_text("# comment\niterations = 7\nembed-dim=3  # trailing\n\n")
    assert read_config_file(tmp_path / "c.txt") == {"iterations": "7", "embed_dim": "3"}


def test_config_file_unknown_key(tmp_path):
    (tmp_path / "c.txt").write_text("colour=blue\n")
    with pytest.raises(ConfigError, match="unknown key"):
        read_config_file(tmp_path / "c.txt")


def test_unknown_flag_exits_2_with_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path), "--colour", "blue"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_value_exits_2(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--mask", "000"]) == 2
    assert main(["train", "--out", str(tmp_path), "--iterations", "many"]) == 2


def test_bad_target_exits_2(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY, "--target", "nowhere"]) == 2


def test_runtime_error_exits_1(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "missing")]) == 1


def test_config_file_and_flag_override(tmp_path):
    (tmp_path / "c.txt").write_text("iterations=50\nseed=3\n")
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--config", str(tmp_path / "c.txt"), *TINY]) == 0
    echo = dict(line.split("=", 1) for line in (out / "config.txt").read_text().splitlines())
    assert echo["iterations"] == "2" and echo["seed"] == "3"


def test_train_writes_run_directory(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY]) == 0
    for name in ("config.txt", "losses.csv", "val.csv", "metrics.csv", "checkpoint/manifest.txt"):
        assert (tmp_path / name).is_file()
    assert len(rows(tmp_path / "losses.csv")) == 2
    (m,) = rows(tmp_path / "metrics.csv")
    assert m["target"] == "theta_0" and m["mask"] == "abg"


def test_train_seed_7_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / d), *TINY, "--seed", "7"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_lodo_emits_four_rows_and_summary(tmp_path):
    assert main(["lodo", "--out", str(tmp_path), *TINY]) == 0
    out = rows(tmp_path / "metrics.csv")
    assert [r["target"] for r in out] == ["theta_0", "theta_0.01", "theta_0.05", "theta_0.5", "mean", "std_pop"]
    accs = [float(r["accuracy"]) for r in out[:4]]
    assert float(out[4]["accuracy"]) == pytest.approx(sum(accs) / 4, abs=1e-3)


def test_erm_baseline_flag(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY, "--baseline", "erm"]) == 0
    (m,) = rows(tmp_path / "metrics.csv")
    assert m["mask"] == "erm" and m["phase2"] == "0"


def test_ablate_then_report_table(tmp_path):
    abl = tmp_path / "abl"
    assert main(["ablate", "--out", str(abl), *TINY, "--iterations", "1", "--target", "theta_0.5"]) == 0
    assert main(["report", "--out", str(tmp_path / "rep"), "--runs", str(abl)]) == 0
    table = rows(tmp_path / "rep" / "table.csv")
    assert [r["mask"] for r in table] == ["a--", "-b-", "--g", "ab-", "a-g", "-bg", "abg"]
    assert list(table[0]) == ["mask", "phase2", "theta_0.5", "average", "std_pop"]
    summary = rows(tmp_path / "rep" / "summary.csv")
    assert len(summary) == 7 * 3


def test_report_missing_metrics_exits_1(tmp_path):
    assert main(["report", "--out", str(tmp_path / "rep"), "--runs", str(tmp_path)]) == 1


def test_embed_from_checkpoint(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *TINY]) == 0
    emb = tmp_path / "emb"
    assert main(["embed", "--out", str(emb), *TINY, "--checkpoint", str(run / "checkpoint")]) == 0
    out = rows(emb / "embeddings.csv")
    assert len(out) == 4 * 48 and {r["extractor"] for r in out} == {"alpha", "beta", "gamma", "all"}


def test_embed_without_checkpoint_exits_2(tmp_path):
    assert main(["embed", "--out", str(tmp_path), *TINY]) == 2


def test_synth_then_train_from_disk(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), *TINY]) == 0
    assert main(["train", "--out", str(tmp_path / "t"), *TINY, "--data", str(tmp_path / "s" / "data")]) == 0
