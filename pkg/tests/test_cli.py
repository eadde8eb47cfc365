"""CLI surface: config handling, subcommands, exit codes, exports."""

import json
import re
from pathlib import Path

import numpy as np
import pytest

from dynroute.cli import (
    DEFAULT_CONFIG,
    load_config,
    main,
    model_from_config,
    route_to_dot,
    route_to_svg,
)
from dynroute.errors import ConfigurationError

TINY_CONFIG = {
    "schema": "dynroute-config/1",
    "supernet": {"num_layers": 4, "channels_per_scale": [4, 8, 16, 32], "head_channels": 8},
    "data": {"num_images": 16, "seed": 3},
    "train": {"epochs": 1, "batch_size": 4, "lr_drop_epochs": [], "seed": 3, "pretrain_epochs": 1},
}


@pytest.fixture()
def tiny_config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + train once for the read-only command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    data = root / "corpus"
    run = root / "run"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]) == 0
    return {"config": cfg_path, "data": data, "run": run}


class TestConfig:
    def test_defaults_complete(self):
        config = load_config(None)
        assert config["schema"] == "dynroute-config/1"
        assert config["train"]["epochs"] == 12
        assert config["supernet"]["num_layers"] == 8

    def test_partial_override_keeps_defaults(self, tiny_config_path):
        config = load_config(tiny_config_path)
        assert config["supernet"]["num_layers"] == 4
        assert config["supernet"]["gate_threshold"] == 1e-4
        assert config["train"]["base_lr"] == 0.01

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"trainx": {}}))
        with pytest.raises(ConfigurationError, match="unknown config key trainx"):
            load_config(str(path))
        path.write_text(json.dumps({"train": {"lr": 0.1}}))
        with pytest.raises(ConfigurationError, match="train.lr"):
            load_config(str(path))

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"schema": "dynroute-config/99"}))
        with pytest.raises(ConfigurationError, match="schema"):
            load_config(str(path))

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("DYNROUTE_SEED", "123")
        config = load_config(None)
        assert config["data"]["seed"] == 123
        assert config["train"]["seed"] == 123

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv("DYNROUTE_SEED", "abc")
        with pytest.raises(ConfigurationError, match="DYNROUTE_SEED"):
            load_config(None)


class TestCommands:
    def test_gen_data_writes_corpus(self, tiny_config_path, tmp_path):
        out = tmp_path / "corpus"
        code = main(["gen-data", "--config", tiny_config_path, "--out", str(out)])
        assert code == 0
        assert (out / "annotations.jsonl").exists()
        assert len(list((out / "images").glob("*.pgm"))) == 16

    def test_gen_data_rerun_identical_bytes(self, tiny_config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", tiny_config_path, "--out", str(a)]) == 0
        assert main(["gen-data", "--config", tiny_config_path, "--out", str(b)]) == 0
        assert (a / "annotations.jsonl").read_bytes() == (b / "annotations.jsonl").read_bytes()
        for f in sorted((a / "images").glob("*.pgm")):
            assert f.read_bytes() == (b / "images" / f.name).read_bytes()

    def test_gen_data_seed_flag_changes_corpus(self, tiny_config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-data", "--config", tiny_config_path, "--out", str(a)])
        main(["gen-data", "--config", tiny_config_path, "--out", str(b), "--seed", "99"])
        assert (a / "annotations.jsonl").read_bytes() != (b / "annotations.jsonl").read_bytes()
        assert len(list((b / "images").glob("*.pgm"))) == 16

    def test_gen_data_unrealizable_pattern_exit_2(self, tmp_path):
        cfg = {
            "schema": "dynroute-config/1",
            "data": {"image_size": 64, "scale_boundaries": [8, 16, 200]},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        code = main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x")])
        assert code == 2

    def test_train_outputs(self, pipeline):
        ckpt = pipeline["run"] / "checkpoint.ckpt"
        log = pipeline["run"] / "train_log.jsonl"
        assert ckpt.exists() and log.exists()
        records = [json.loads(l) for l in log.read_text().splitlines()]
        # 16 images / batch 4: one pretrain epoch (epoch 0) + one routed epoch
        assert len(records) == 8
        assert {r["epoch"] for r in records} == {0, 1}
        for rec in records:
            assert set(rec) == {"step", "epoch", "lr", "L_det", "L_global", "L_local", "L_tot", "mean_Cnet_ratio"}
            assert rec["L_global"] == 0.0  # pretrain + epoch 1 rule

    def test_eval_report(self, pipeline, tmp_path):
        report = tmp_path / "report.csv"
        code = main([
            "eval", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--data", str(pipeline["data"]), "--report", str(report),
        ])
        assert code == 0
        text = report.read_text()
        assert "mean_madds,max_madds,min_madds,std_madds" in text
        assert text.startswith("sample_id,pattern,num_intervals,C_net,C_tot,ratio")

    def test_eval_empty_corpus_exit_2(self, pipeline, tmp_path):
        empty = tmp_path / "empty"
        (empty / "images").mkdir(parents=True)
        (empty / "annotations.jsonl").write_text("")
        code = main([
            "eval", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--data", str(empty), "--report", str(tmp_path / "r.csv"),
        ])
        assert code == 2

    def test_eval_deterministic_across_reruns(self, pipeline, tmp_path):
        paths = [tmp_path / "r1.csv", tmp_path / "r2.csv"]
        for p in paths:
            assert main([
                "eval", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
                "--data", str(pipeline["data"]), "--report", str(p),
            ]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_cost_report(self, pipeline, tmp_path):
        out = tmp_path / "costs.csv"
        code = main([
            "cost-report", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--data", str(pipeline["data"]), "--out", str(out),
        ])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "sample_id,C_net,C_tot,ratio"
        assert lines[-2] == "aggregate,mean,max,min,std"

    def test_export_route_dot_parses(self, pipeline, tmp_path):
        out = tmp_path / "route.dot"
        code = main([
            "export-route", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--image", str(pipeline["data"] / "images" / "img_00000.pgm"),
            "--format", "dot", "--out", str(out),
        ])
        assert code == 0
        _assert_valid_dot(out.read_text())

    def test_export_route_svg(self, pipeline, tmp_path):
        out = tmp_path / "route.svg"
        code = main([
            "export-route", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--image", str(pipeline["data"] / "images" / "img_00000.pgm"),
            "--format", "svg", "--out", str(out),
        ])
        assert code == 0
        text = out.read_text()
        assert text.startswith("<svg ")
        assert text.rstrip().endswith("</svg>")
        assert "<circle" in text

    def test_export_route_unknown_format_exit_2(self, pipeline, tmp_path):
        code = main([
            "export-route", "--checkpoint", str(pipeline["run"] / "checkpoint.ckpt"),
            "--image", str(pipeline["data"] / "images" / "img_00000.pgm"),
            "--format", "png", "--out", str(tmp_path / "x.png"),
        ])
        assert code == 2

    def test_missing_checkpoint_exit_2(self, tmp_path):
        code = main([
            "eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
            "--data", str(tmp_path), "--report", str(tmp_path / "r.csv"),
        ])
        assert code == 2


class TestDiagramEmitters:
    def _record(self, all_open: bool):
        from dynroute.autodiff import Tensor
        from dynroute.cli import supernet_spec_from
        from dynroute.supernet import build_supernet

        config = load_config(None)
        config["supernet"]["num_layers"] = 3
        config["supernet"]["channels_per_scale"] = [4, 8, 16, 32]
        spec = supernet_spec_from(config)
        net = build_supernet(spec, seed=0)
        gate = np.ones(3) if all_open else np.zeros(3)
        forced = {n: gate for n in net.nodes}
        imgs = Tensor(np.zeros((1, 1, 64, 64)))
        _, record = net.forward(imgs, mode="infer", forced_gates=forced)
        return spec, record

    def test_all_open_draws_complete_trellis(self):
        spec, record = self._record(all_open=True)
        dot = route_to_dot(spec, record)
        _assert_valid_dot(dot)
        edge_count = dot.count("->")
        valid_gates = sum(int(m.sum()) for m in record.masks.values())
        assert edge_count == valid_gates + 1  # plus the stem edge
        assert "gray" not in dot

    def test_all_closed_stem_only(self):
        spec, record = self._record(all_open=False)
        dot = route_to_dot(spec, record)
        _assert_valid_dot(dot)
        # stem edge remains; no routed edges
        assert dot.count("->") == 1
        assert dot.count("fillcolor=gray80") == len(record.node_ids)

    def test_svg_well_formed_xml(self):
        import xml.etree.ElementTree as ET

        spec, record = self._record(all_open=True)
        svg = route_to_svg(spec, record)
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")


_DOT_NODE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*( \[[^\]]*\])?;$")
_DOT_EDGE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]* -> [A-Za-z_][A-Za-z0-9_]*( \[[^\]]*\])?;$")
_DOT_ATTR = re.compile(r"^[A-Za-z_]+=[A-Za-z0-9]+;$")


def _assert_valid_dot(text: str) -> None:
    """Round-trip parse under a minimal DOT statement grammar."""
    lines = [l.strip() for l in text.strip().splitlines()]
    assert lines[0].startswith("digraph ") and lines[0].endswith("{")
    assert lines[-1] == "}"
    for line in lines[1:-1]:
        assert (
            _DOT_NODE.match(line) or _DOT_EDGE.match(line) or _DOT_ATTR.match(line)
        ), f"unparseable DOT statement: {line!r}"
