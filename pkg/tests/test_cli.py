import json
from pathlib import Path

import pytest

from seqpack import cli
from seqpack.simenv import read_dataset


def _tiny_config(tmp_path, task="candy"):
    config = cli.default_config(task)
    config["data"] = {
        "demos_per_subtask": 1,
        "longhorizon_demos": 1,
        "noise_scale": 0.01,
        "seed": 7,
    }
    config["model"] = {
        "chunk_len": 2,
        "embed_dim": 16,
        "feature_dim": 16,
        "encoder_hidden": [16],
        "expert_hidden": [16],
    }
    config["train"] = {
        "batch_size": 32,
        "learning_rate": 0.001,
        "lam": 0.1,
        "joint_epochs": 2,
        "action_epochs": 2,
        "completion_epochs": 1,
        "baseline_epochs": 2,
    }
    config["rollout"]["subtask_budget"] = 24
    config["analysis"]["replay_episodes_per_subtask"] = 1
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path, config


def test_default_configs_load_and_validate():
    for task in ("salad", "candy"):
        config = cli.default_config(task)
        cli.validate_config(config)
        assert config["train"]["lam"] == 0.1
        assert config["rollout"]["stop_threshold"] == 0.2


def test_config_hash_canonical():
    a = {"task": "salad", "x": 1}
    b = {"x": 1, "task": "salad"}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash({"task": "salad", "x": 2})


def test_gen_data_counts_and_idempotence(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path)
    out = tmp_path / "data.jsonl"
    rc = cli.main(["gen-data", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    episodes = read_dataset(out)
    assert len(episodes) == 4  # candy: 4 distinct subtasks x 1 demo
    first = out.read_bytes()
    rc = cli.main(["gen-data", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == first
    manifest = json.loads((tmp_path / "data.jsonl.manifest.json").read_text())
    assert "config_hash" in manifest


def test_gen_data_salad_demo_counts(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path, task="salad")
    out = tmp_path / "salad.jsonl"
    rc = cli.main(["gen-data", "--config", str(cfg_path), "--demos", "2", "--out", str(out)])
    assert rc == 0
    assert len(read_dataset(out)) == 14  # 7 subtasks x 2


def test_gen_data_long_horizon(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path)
    out = tmp_path / "long.jsonl"
    rc = cli.main(["gen-data", "--config", str(cfg_path), "--long-horizon", "--out", str(out)])
    assert rc == 0
    episodes = read_dataset(out)
    assert len(episodes) == 1


def test_invalid_config_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format_version": 1, "task": "pizza"}), encoding="utf-8")
    rc = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")])
    assert rc == 1


def test_usage_error_exits_one(tmp_path):
    rc = cli.main(["gen-data"])  # missing --out
    assert rc == 1


def test_train_rollout_analyze_pipeline(tmp_path):
    cfg_path, config = _tiny_config(tmp_path)
    data = tmp_path / "data.jsonl"
    long_data = tmp_path / "long.jsonl"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert (
        cli.main(
            ["gen-data", "--config", str(cfg_path), "--long-horizon", "--out", str(long_data)]
        )
        == 0
    )

    bundle = tmp_path / "bundle"
    rc = cli.main(
        [
            "train",
            "--config",
            str(cfg_path),
            "--strategy",
            "all",
            "--dataset",
            str(data),
            "--long-dataset",
            str(long_data),
            "--seeds",
            "1",
            "--out",
            str(bundle),
        ]
    )
    assert rc == 0
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert len(manifest["entries"]) == 5

    rollout_dir = tmp_path / "rollouts"
    ckpt = next(e["checkpoint"] for e in manifest["entries"] if e["strategy"] == "J")
    rc = cli.main(
        [
            "rollout",
            "--config",
            str(cfg_path),
            "--checkpoint",
            ckpt,
            "--episodes",
            "2",
            "--out",
            str(rollout_dir),
        ]
    )
    assert rc == 0
    records = sorted(rollout_dir.glob("record_*.json"))
    assert len(records) == 2
    record = json.loads(records[0].read_text())
    assert record["sequence_errors"] == 0  # sequenced execution is structurally clean
    assert record["policy_mode"] == "sequenced"
    assert "config_hash" in record
    summary = json.loads((rollout_dir / "summary.json").read_text())
    assert summary["records"] == 2
    assert "config_hash" in summary

    # baseline checkpoints route to the open-loop runner automatically
    base_ckpt = next(e["checkpoint"] for e in manifest["entries"] if e["strategy"] == "BASELINE")
    base_dir = tmp_path / "base_rollouts"
    rc = cli.main(
        [
            "rollout",
            "--config",
            str(cfg_path),
            "--checkpoint",
            base_ckpt,
            "--episodes",
            "1",
            "--out",
            str(base_dir),
        ]
    )
    assert rc == 0
    base_record = json.loads(next(iter(sorted(base_dir.glob("record_*.json")))).read_text())
    assert base_record["policy_mode"] == "open_loop"

    metrics_dir = tmp_path / "metrics"
    rc = cli.main(
        [
            "analyze",
            "--config",
            str(cfg_path),
            "--bundle",
            str(bundle),
            "--replay-dataset",
            str(data),
            "--out",
            str(metrics_dir),
        ]
    )
    assert rc == 0
    report = json.loads((metrics_dir / "metrics.json").read_text())
    assert report["format_version"] == 1
    assert "J" in report["strategies"] and "S" in report["strategies"]
    assert report["comparison"] is not None
    for payload in report["strategies"].values():
        overall = payload["overall"]
        assert 0.0 <= overall["entropy"] <= 2.303
        if "ks_d" in overall:
            assert 0.0 <= overall["ks_d"] <= 1.0
            assert 0.0 <= overall["ks_p"] <= 1.0
    assert (metrics_dir / "metrics.csv").exists()


def test_rollout_fixed_seed_identical_records(tmp_path):
    cfg_path, config = _tiny_config(tmp_path)
    data = tmp_path / "data.jsonl"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    bundle = tmp_path / "bundle"
    assert (
        cli.main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--strategy",
                "J",
                "--dataset",
                str(data),
                "--out",
                str(bundle),
            ]
        )
        == 0
    )
    ckpt = str(bundle / "J_seed0.ckpt.json")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert (
            cli.main(
                [
                    "rollout",
                    "--config",
                    str(cfg_path),
                    "--checkpoint",
                    ckpt,
                    "--episodes",
                    "1",
                    "--seed",
                    "5",
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        outs.append((out / "record_00005.json").read_bytes())
    assert outs[0] == outs[1]


def test_train_missing_dataset_exits_one(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path)
    rc = cli.main(
        [
            "train",
            "--config",
            str(cfg_path),
            "--strategy",
            "J",
            "--dataset",
            str(tmp_path / "missing.jsonl"),
            "--out",
            str(tmp_path / "bundle"),
        ]
    )
    assert rc == 1


def test_rollout_checkpoint_dimension_mismatch_exits_one(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path)
    bad_ckpt = tmp_path / "bad.ckpt.json"
    bad_ckpt.write_text(json.dumps({"format_version": 1, "tensors": {}}), encoding="utf-8")
    rc = cli.main(
        [
            "rollout",
            "--config",
            str(cfg_path),
            "--checkpoint",
            str(bad_ckpt),
            "--episodes",
            "1",
            "--out",
            str(tmp_path / "r"),
        ]
    )
    assert rc == 1


def test_analyze_incomplete_bundle_exits_one(tmp_path):
    cfg_path, _ = _tiny_config(tmp_path)
    rc = cli.main(
        [
            "analyze",
            "--config",
            str(cfg_path),
            "--bundle",
            str(tmp_path / "nothing"),
            "--replay-dataset",
            str(tmp_path / "missing.jsonl"),
            "--out",
            str(tmp_path / "m"),
        ]
    )
    assert rc == 1


def test_seed_list_parsing():
    assert cli._parse_seeds("3") == [0, 1, 2]
    assert cli._parse_seeds("4,7,9") == [4, 7, 9]
