import json
import struct

import numpy as np
import pytest

from fishermerge import cli
from fishermerge.fisher import MaskFisher
from fishermerge.model import Checkpoint

TINY = {
    "seed": 0,
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_head": 4, "d_ff": 6, "vocab_size": 24, "max_seq_len": 8},
    "tasks": {"count": 2, "rules": ["presence", "majority"]},
    "training": {"pretrain_steps": 5, "finetune_steps": 20, "batch_size": 8, "train_size": 256, "eval_size": 64},
    "protocol": {"methods": ["average", "mask-fisher", "full-fisher"], "n_samples": [8], "seeds": [0], "fisher_batch_size": 4},
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    assert code == 0, err
    return json.loads(out)


@pytest.fixture
def work(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.OUT_DIR_ENV, raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    run_json(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "parent.ckpt")
    for task in ("t0-presence", "t1-majority"):
        run_json(capsys, "finetune", "--config", cfg, "--parent", tmp_path / "parent.ckpt", "--task", task,
                 "--out", tmp_path / f"{task}.ckpt")
        run_json(capsys, "data", "--config", cfg, "--task", task, "--n", 40, "--out", tmp_path / f"{task}.jsonl")
    return tmp_path


def _payload(path):
    raw = open(path, "rb").read()
    (n,) = struct.unpack("<Q", raw[8:16])
    return json.loads(raw[16 : 16 + n]), raw[16 + n :]


def test_fisher_mask_writes_h_plus_d_times_l_values(work, capsys):
    r = run_json(capsys, "fisher", "--method", "mask", "--ckpt", work / "t0-presence.ckpt",
                 "--data", work / "t0-presence.jsonl", "--n", 16, "--out", work / "a.mf")
    assert r["n_values"] == (2 + 6) * 1
    manifest, payload = _payload(work / "a.mf")
    assert manifest["kind"] == "mask-fisher"
    assert len(payload) == 8 * 8
    assert manifest["meta"]["checkpoint_digest"] == Checkpoint.load(work / "t0-presence.ckpt").digest()
    assert manifest["meta"]["n_samples"] == 16 and manifest["meta"]["task_id"] == "t0-presence"


def test_fisher_full_writes_one_value_per_parameter(work, capsys):
    r = run_json(capsys, "fisher", "--method", "full", "--ckpt", work / "t0-presence.ckpt",
                 "--data", work / "t0-presence.jsonl", "--n", 4, "--out", work / "a.ff")
    assert r["n_values"] == Checkpoint.load(work / "t0-presence.ckpt").n_elements()


def test_fisher_rerun_is_bit_identical(work, capsys):
    for name in ("x.mf", "y.mf"):
        run_json(capsys, "fisher", "--method", "mask", "--ckpt", work / "t1-majority.ckpt",
                 "--data", work / "t1-majority.jsonl", "--n", 12, "--batch-size", 5, "--out", work / name)
    assert (work / "x.mf").read_bytes() == (work / "y.mf").read_bytes()


def test_average_equals_all_ones_mask_fisher_merge(work, capsys):
    ckpts = [work / "t0-presence.ckpt", work / "t1-majority.ckpt"]
    fishers = []
    for i, p in enumerate(ckpts):
        c = Checkpoint.load(p)
        f = work / f"ones{i}.mf"
        MaskFisher(np.ones((2, 1)), np.ones((6, 1)), 1, c.task, c.digest()).save(f)
        fishers.append(f)
    run_json(capsys, "merge", "--method", "average", "--ckpts", *ckpts, "--out", work / "avg.ckpt")
    r = run_json(capsys, "merge", "--method", "mask-fisher", "--ckpts", *ckpts, "--fishers", *fishers, "--out", work / "mf.ckpt")
    _, avg_payload = _payload(work / "avg.ckpt")
    manifest, mf_payload = _payload(work / "mf.ckpt")
    assert avg_payload == mf_payload
    prov = manifest["meta"]["provenance"]
    assert prov["method"] == "mask-fisher" == r["provenance"]["method"]
    assert prov["inputs"] == [Checkpoint.load(p).digest() for p in ckpts]
    assert prov["spec"]["lambdas"] == [1.0, 1.0]


def test_real_fisher_merges(work, capsys):
    ckpts = [work / "t0-presence.ckpt", work / "t1-majority.ckpt"]
    for method, short in (("mask-fisher", "mask"), ("full-fisher", "full")):
        fs = []
        for p, d in zip(ckpts, ("t0-presence", "t1-majority")):
            out = work / f"{d}.{short}"
            run_json(capsys, "fisher", "--method", short, "--ckpt", p, "--data", work / f"{d}.jsonl", "--n", 8, "--out", out)
            fs.append(out)
        run_json(capsys, "merge", "--method", method, "--ckpts", *ckpts, "--fishers", *fs, "--out", work / f"{short}.merged")
        merged = Checkpoint.load(work / f"{short}.merged")
        assert merged.meta["provenance"]["method"] == method
        r = run_json(capsys, "eval", "--ckpt", work / f"{short}.merged", "--data", work / "t1-majority.jsonl")
        assert 0.0 <= r["accuracy"] <= 1.0 and r["head"] == "t1-majority"


def test_merge_without_fishers_is_a_usage_error(work, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["merge", "--method", "mask-fisher", "--ckpts", str(work / "t0-presence.ckpt"),
                  str(work / "t1-majority.ckpt"), "--out", str(work / "m.ckpt")])
    assert exc.value.code != 0
    assert "--fishers" in capsys.readouterr().err


def test_merge_refuses_mismatched_digest(work, capsys):
    run_json(capsys, "fisher", "--method", "mask", "--ckpt", work / "t0-presence.ckpt",
             "--data", work / "t0-presence.jsonl", "--n", 4, "--out", work / "a.mf")
    code, _, err = run(capsys, "merge", "--method", "mask-fisher", "--ckpts", work / "t0-presence.ckpt",
                       work / "t1-majority.ckpt", "--fishers", work / "a.mf", work / "a.mf", "--out", work / "m.ckpt")
    assert code == 1 and "digest" in err
    assert not (work / "m.ckpt").exists()
    code, _, err = run(capsys, "merge", "--method", "full-fisher", "--ckpts", work / "t0-presence.ckpt",
                       work / "t1-majority.ckpt", "--fishers", work / "a.mf", work / "a.mf", "--out", work / "m.ckpt")
    assert code == 1 and "full-fisher" in err


def test_merge_refuses_non_siblings(work, capsys, tmp_path):
    other = dict(TINY, model=dict(TINY["model"], d_ff=4))
    (tmp_path / "other.json").write_text(json.dumps(other))
    run_json(capsys, "pretrain", "--config", tmp_path / "other.json", "--out", tmp_path / "other.ckpt")
    code, _, err = run(capsys, "merge", "--method", "average", "--ckpts", work / "parent.ckpt", tmp_path / "other.ckpt",
                       "--out", work / "bad.ckpt")
    assert code == 1 and "sibling" in err


def test_never_overwrites_without_force(work, capsys):
    target = work / "parent.ckpt"
    before = target.read_bytes()
    code, _, err = run(capsys, "pretrain", "--config", work / "cfg.json", "--seed", 3, "--out", target)
    assert code == 1 and "--force" in err
    assert target.read_bytes() == before
    code, _, _ = run(capsys, "pretrain", "--config", work / "cfg.json", "--seed", 3, "--out", target, "--force")
    assert code == 0 and target.read_bytes() != before


def test_corrupt_checkpoint_rejected(work, capsys):
    raw = bytearray((work / "parent.ckpt").read_bytes())
    raw[-1] ^= 0x10
    (work / "bad.ckpt").write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", "--ckpt", work / "bad.ckpt", "--data", work / "t0-presence.jsonl")
    assert code == 1 and "digest" in err


def test_eval_with_config_and_seed_threading(work, capsys):
    a = run_json(capsys, "eval", "--ckpt", work / "t0-presence.ckpt", "--config", work / "cfg.json", "--task", "t0-presence")
    b = run_json(capsys, "eval", "--ckpt", work / "t0-presence.ckpt", "--config", work / "cfg.json", "--task", "t0-presence")
    assert a == b
    code, _, err = run(capsys, "eval", "--ckpt", work / "t0-presence.ckpt", "--config", work / "cfg.json", "--task", "nope")
    assert code == 1 and "unknown task" in err


def test_out_dir_env_override(work, capsys, monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "outs"))
    r = run_json(capsys, "pretrain", "--config", work / "cfg.json", "--out", "p.ckpt")
    assert r["out"] == str(tmp_path / "outs" / "p.ckpt")
    assert (tmp_path / "outs" / "p.ckpt").exists()


def test_protocol_command(work, capsys):
    r = run_json(capsys, "protocol", "--config", work / "cfg.json", "--out-dir", work / "proto")
    report = json.loads((work / "proto" / "report.json").read_text())
    assert len(report["reports"]) == 1
    assert len(report["reports"][0]["records"]) == 1 + 2
    assert "mask-fisher" in (work / "proto" / "table.txt").read_text()
    assert r["aggregate"][0]["average"]["-"] == report["reports"][0]["aggregate"]["average"]["-"]


def test_bench_reports_ratios(work, capsys):
    r = run_json(capsys, "bench", "--config", work / "cfg.json", "--n", 32)
    cfg_counts = (2 + 6) * 1
    assert r["mask_gradient_params"] == cfg_counts
    assert r["param_count_ratio"] == r["full_gradient_params"] / cfg_counts
    assert r["reference_speedup_bert_large"] == 57.4
    assert r["mask_seconds"] > 0 and r["full_seconds"] > 0
