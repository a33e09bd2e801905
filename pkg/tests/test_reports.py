"""Report serialization, SVG panels, and the strict config schema."""

import json

import numpy as np
import pytest

from fashionmtl.config import ConfigError, load_config, validate_config_dict
from fashionmtl.report import RunReport, curve_panel_svg, write_curve_panels


def sample_report(seed=0):
    rep = RunReport(kind="mtl", seed=seed, config={"model": {"width": 32}},
                    strategy="uniform", grad_method="none")
    rep.loss_records = [(0, "xmr", 2.5, 0.0), (1, "scr", 2.4, 0.1)]
    rep.val_curves = {"xmr": [(0, 0.1), (100, 0.5)], "scr": [(0, 0.2), (100, 0.9)]}
    rep.final_metrics = {"xmr": {"i2t_r@1": 0.5}, "scr": {"accuracy": 0.9}}
    rep.wall_clock_sec = 12.3
    return rep


class TestRunReport:
    def test_canonical_json_excludes_wall_clock(self):
        js = sample_report().to_canonical_json()
        assert "wall_clock" not in js
        assert json.loads(js)["schema_version"] == 1

    def test_save_load_roundtrip(self, tmp_path):
        rep = sample_report()
        rep.save(str(tmp_path))
        loaded = RunReport.load(str(tmp_path))
        assert loaded.to_canonical_json() == rep.to_canonical_json()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["wall_clock_sec"] == 12.3

    def test_curve_csvs_written(self, tmp_path):
        sample_report().save(str(tmp_path))
        lines = (tmp_path / "curve_xmr.csv").read_text().strip().splitlines()
        assert lines[0] == "iteration,value"
        assert lines[1:] == ["0,0.1", "100,0.5"]

    def test_canonical_json_is_seed_deterministic(self, tmp_path):
        assert sample_report(3).to_canonical_json() == sample_report(3).to_canonical_json()


class TestSvg:
    def test_panel_structure(self):
        svg = curve_panel_svg("xmr", {"run_a": [(0, 0.1), (50, 0.4), (100, 0.8)]})
        assert svg.startswith("<svg") and svg.endswith("</svg>")
        assert "polyline" in svg and "xmr" in svg

    def test_one_panel_per_task(self, tmp_path):
        reps = {"a": sample_report(0), "b": sample_report(1)}
        written = write_curve_panels(reps, str(tmp_path))
        names = sorted(p.split("/")[-1] for p in written)
        assert names == ["curve_scr.svg", "curve_xmr.svg"]

    def test_monotone_iteration_axis(self):
        svg = curve_panel_svg("scr", {"r": [(0, 0.5), (10, 0.6), (20, 0.4)]})
        line = [ln for ln in svg.splitlines() if "polyline" in ln][0]
        xs = [float(pair.split(",")[0]) for pair in
              line.split('points="')[1].split('"')[0].split()]
        assert xs == sorted(xs)


class TestConfigSchema:
    def test_defaults_validate(self):
        cfg = validate_config_dict({})
        assert cfg.strategy == "size_proportional"
        assert cfg.model_config().text.width == 32

    def test_unknown_top_key_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            validate_config_dict({"mystery": 1})

    def test_unknown_nested_keys_listed_field_by_field(self):
        with pytest.raises(ConfigError) as exc:
            validate_config_dict({"model": {"width": 16, "depth": 3},
                                  "data": {"sizes": {"xyz": 5}}})
        msg = str(exc.value)
        assert "model.depth" in msg and "data.sizes.xyz" in msg

    def test_bad_strategy_rejected(self):
        with pytest.raises(ConfigError, match="strategy"):
            validate_config_dict({"strategy": "alphabetical"})

    def test_file_loading(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 5, "model": {"width": 16, "heads": 2}}))
        cfg = load_config(str(path))
        assert cfg.seed == 5 and cfg.model["width"] == 16

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/run.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_training_overrides_flow_through(self):
        cfg = validate_config_dict({"training": {"iterations": 50, "batch_size": 4}})
        tc = cfg.train_config()
        assert tc.iterations == 50 and tc.batch_size == 4
