import csv

import pytest

from specdraft.cli import build_report, main
from specdraft.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text
from specdraft.specdec import MetricsRecord, write_metrics

TINY = """
target_layers = 1
target_heads = 2
target_hidden = 16
target_intermediate = 24
target_steps = 5
draft_layers = 1
draft_heads = 1
draft_hidden = 8
draft_intermediate = 12
context_len = 96
corpus_chunks = 4
chunk_len = 64
pretrain_steps = 5
batch_size = 2
seq_len = 16
n_seed_prompts = 2
temps = 0, 0.7
max_new_tokens = 8
finetune_steps = 4
finetune_batch = 4
n_checkpoints = 2
gammas = 3
eval_seeds = 0
n_eval_prompts = 2
"""


def rec(task="qa", loss="tvd", ck=0, g=3, tau=2.0, seed=0):
    return MetricsRecord(task, loss, ck, g, tau, tau / 1.1, tau / 1.2, (tau - 1) / g, seed)


def test_config_parse_and_dump(tmp_path):
    cfg = load_config(None, {"gammas": "3,5", "seed": "4"})
    assert cfg.gammas == [3, 5] and cfg.seed == 4 and cfg.mix == (9, 1)
    p = tmp_path / "c.txt"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert parse_config_text("# note\nseed = 7  # trailing\n") == {"seed": 7}


@pytest.mark.parametrize("text", ["bogus_key = 1", "seed = x", "no equals sign", "mix_ratio = 9-1"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "c.txt"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_every_field_has_default():
    RunConfig()


def test_bad_config_exit_codes(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "nope.txt")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("specdraft: error code=2") and "nope.txt" in err
    (tmp_path / "c.txt").write_text("colour = blue\n")
    assert main(["eval", "--config", str(tmp_path / "c.txt")]) == 2


def test_missing_artifact_is_io_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--target-ckpt", str(tmp_path / "t.ckpt")]) == 3
    assert "t.ckpt" in capsys.readouterr().err


def test_report_mean_over_seeds(tmp_path):
    recs = [rec(tau=t, seed=s) for s, t in zip((1, 2, 3), (1.5, 2.0, 2.8))]
    agg, trend, flags = build_report(recs)
    assert len(agg) == 1 and agg[0]["n"] == 3
    assert agg[0]["tau_mean"] == pytest.approx((1.5 + 2.0 + 2.8) / 3)
    assert agg[0]["tau_stderr"] > 0 and not flags


def test_report_single_row_and_trend_count(tmp_path, capsys):
    recs = [rec(task=t, loss=l, ck=c, seed=s)
            for t in ("qa", "sum") for l in ("tvd", "tvdpp") for c in (0, 1, 2) for s in (0, 1)]
    agg, trend, _ = build_report(recs)
    assert len(trend) == 3 * 2 * 2
    assert len(agg) == 4 and all(a["checkpoint"] == 2 for a in agg)
    write_metrics([rec()], tmp_path / "one.jsonl")
    assert main(["report", "--out", str(tmp_path), str(tmp_path / "one.jsonl")]) == 0
    with open(tmp_path / "report_aggregate.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_report_flags_tvdpp_shortfall():
    _, _, flags = build_report([rec(loss="tvd", tau=2.0), rec(loss="tvdpp", tau=1.9)])
    assert len(flags) == 1 and flags[0].startswith("FLAG")
    _, _, flags = build_report([rec(loss="tvd", tau=2.0), rec(loss="tvdpp", tau=1.99)])
    assert not flags


def test_report_malformed_line(tmp_path, capsys):
    p = tmp_path / "m.jsonl"
    p.write_text(rec().to_json() + "\nnot json\n")
    assert main(["report", "--out", str(tmp_path), str(p)]) == 2
    assert ":2:" in capsys.readouterr().err


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text(TINY)
    out = tmp_path / "run"
    common = ["--config", str(cfg), "--out", str(out)]
    assert main(["pretrain"] + common) == 0
    assert main(["distill-gen"] + common) == 0
    assert main(["finetune", "--loss", "tvdpp", "--steps", "0"] + common) == 0
    assert [p.name for p in (out / "finetune_tvdpp").iterdir()] == ["ckpt_000.ckpt"]
    for loss in ("tvd", "tvdpp"):
        assert main(["finetune", "--loss", loss] + common) == 0
        assert main(["eval", "--loss", loss, "--gamma", "3", "--gamma", "5"] + common) == 0
    first = (out / "metrics_tvd.jsonl").read_bytes()
    assert main(["eval", "--loss", "tvd", "--gamma", "3", "--gamma", "5"] + common) == 0
    assert (out / "metrics_tvd.jsonl").read_bytes() == first
    files = [str(out / f"metrics_{l}.jsonl") for l in ("tvd", "tvdpp")]
    assert main(["report", "--out", str(out)] + files) == 0
    assert (out / "report_trend.csv").exists()
