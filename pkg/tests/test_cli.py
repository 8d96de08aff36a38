import json
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from tevae import cli
from tevae.config import ExperimentConfig, config_from_dict, dump_config, load_config, override

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"
DEFAULT = ROOT / "configs" / "default.yaml"

METRIC_FIELDS = {"counts", "P", "R", "F1", "F1_best", "P_best", "R_best", "A_PR", "delay_s", "P_rc", "tau"}


class TestConfig:
    def test_bundled_configs_parse(self):
        for path in (SMOKE, DEFAULT):
            cfg = load_config(path)
            assert cfg.seeds
        assert load_config(DEFAULT) == ExperimentConfig()

    def test_canonical_round_trip(self):
        for path in (SMOKE, DEFAULT):
            cfg = load_config(path)
            text = dump_config(cfg)
            assert load_config(text) == cfg
            assert dump_config(load_config(text)) == text

    @settings(max_examples=30, deadline=None)
    @given(d_Z=st.integers(1, 64), seeds=st.lists(st.integers(0, 99), min_size=1, max_size=4),
           reverse=st.sampled_from(["first", "last", "mean"]), window=st.one_of(st.none(), st.integers(1, 512)))
    def test_round_trip_property(self, d_Z, seeds, reverse, window):
        cfg = config_from_dict({"seeds": seeds, "reverse": reverse, "model": {"d_Z": d_Z},
                                "preprocess": {"window": window}})
        assert load_config(dump_config(cfg)) == cfg

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError, match="seeds"):
            config_from_dict({"seeds": []})
        with pytest.raises(ValueError, match="unknown keys"):
            config_from_dict({"model": {"width": 3}})
        with pytest.raises(ValueError):
            config_from_dict({"reverse": "median"})
        with pytest.raises(ValueError):
            config_from_dict({"data": {"cycles": ["moon_landing"]}})
        with pytest.raises(FileNotFoundError):
            load_config(Path("/nonexistent/config.yaml"))

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"model": {"d_Z": 7}, "train": {"patience": 3}}))
        args = cli.build_parser().parse_args(["train", "--config", str(path), "--d-z", "9",
                                              "--set", "train.batch_size=16"])
        cfg = cli.resolve_config(args)
        assert cfg.model.d_Z == 9          # flag beats file
        assert cfg.train.patience == 3     # file beats default
        assert cfg.train.batch_size == 16  # --set override
        assert cfg.model.h == ExperimentConfig().model.h
        args = cli.build_parser().parse_args(["train", "--ablation", "noma", "--d-k", "2"])
        cfg = cli.resolve_config(args)
        assert cfg.variant == "noma" and cfg.model.d_K == 2

    def test_override_unknown_key(self):
        with pytest.raises(ValueError):
            override(ExperimentConfig(), {"nothing.here": 1})


def _run(*argv):
    return cli.main([*argv])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    base = ["--config", str(SMOKE), "--output-dir", str(out), "-q"]
    for cmd in ("generate", "preprocess", "train", "detect", "evaluate"):
        assert _run(cmd, *base) == 0, cmd
    return out, base


def _model_dir(out, variant="tevae"):
    (d,) = [p for p in (out / "models").iterdir() if p.name.startswith(variant)]
    return d


class TestPipeline:
    def test_metrics_report_schema(self, smoke_run):
        out, _ = smoke_run
        report = json.loads((_model_dir(out) / "report_test_mean.json").read_text())
        per_seed = report["per_seed"]["0"]
        assert METRIC_FIELDS <= set(per_seed)
        assert set(per_seed["counts"]) == {"N_tp", "N_fp", "N_fn", "N_tn", "N_tp_rc", "N_fp_rc"}
        for key in ("P", "R", "A_PR", "P_rc"):
            assert set(report["summary"][key]) == {"mean", "std"}
        plots = sorted(p.name for p in (_model_dir(out) / "seed_0" / "test" / "mean" / "plots").iterdir())
        assert "pr_curve.png" in plots and any(p.startswith("score_") for p in plots)

    def test_rerun_is_byte_identical(self, smoke_run):
        out, base = smoke_run
        mdir = _model_dir(out)
        files = [mdir / "report_test_mean.json", mdir / "seed_0" / "test" / "mean" / "detection.json"]
        before = [f.read_bytes() for f in files]
        assert _run("detect", *base) == 0 and _run("evaluate", *base) == 0
        assert [f.read_bytes() for f in files] == before

    def test_detection_report_records(self, smoke_run):
        out, _ = smoke_run
        det = json.loads((_model_dir(out) / "seed_0" / "test" / "mean" / "detection.json").read_text())
        for r in det["records"]:
            assert {"id", "label", "first_flagged_step", "root_cause_channel", "max_score", "tau"} <= set(r)
            assert (r["label"] == "anomalous") == (r["first_flagged_step"] is not None) \
                == (r["root_cause_channel"] is not None)
        dump = (_model_dir(out) / "seed_0" / "test" / "mean" / "scores" / f"{det['records'][0]['id']}.csv")
        assert dump.read_text().splitlines()[0].startswith("t,s,s_vehicle_speed,")

    def test_last_never_flags_more_than_w_minus_one_before_mean(self, smoke_run):
        out, base = smoke_run
        assert _run("detect", *base, "--reverse", "last") == 0
        runs = _model_dir(out) / "seed_0" / "test"
        w = json.loads((runs / "mean" / "detection.json").read_text())["w"]
        mean = {r["id"]: r for r in json.loads((runs / "mean" / "detection.json").read_text())["records"]}
        last = {r["id"]: r for r in json.loads((runs / "last" / "detection.json").read_text())["records"]}
        for sid, r in last.items():
            t_last, t_mean = r["first_flagged_step"], mean[sid]["first_flagged_step"]
            if t_last is not None and t_mean is not None:
                assert t_last >= t_mean - (w - 1)

    def test_ablation_and_sweep_dirs(self, smoke_run):
        out, base = smoke_run
        assert _run("train", *base, "--ablation", "noma", "--d-z", "3") == 0
        assert (out / "models" / "noma_w16_dz3_dk6" / "seed_0" / "model.npz").is_file()
        assert _run("train", *base, "--d-k", "2") == 0
        assert (out / "models" / "tevae_w16_dz4_dk2" / "seed_0" / "history.csv").is_file()

    def test_train_twice_gives_identical_history(self, smoke_run, tmp_path):
        out, _ = smoke_run
        histories = []
        for name in ("a", "b"):
            run_dir = tmp_path / name
            base = ["--config", str(SMOKE), "--output-dir", str(run_dir), "--data-dir", str(out / "data"), "-q"]
            assert _run("preprocess", *base) == 0 and _run("train", *base) == 0
            histories.append((_model_dir(run_dir) / "seed_0" / "history.csv").read_text())
        assert histories[0] == histories[1]


class TestErrors:
    def test_missing_dataset(self, tmp_path, capsys):
        assert _run("preprocess", "--output-dir", str(tmp_path), "-q") == 1
        assert "dataset not found" in capsys.readouterr().err

    def test_missing_checkpoint(self, smoke_run, tmp_path, capsys):
        out, base = smoke_run
        assert _run("detect", *base, "--seeds", "41") == 1
        assert "model.npz" in capsys.readouterr().err

    def test_bad_override(self, capsys):
        assert _run("generate", "--set", "data.n_train") == 1
        assert "KEY=VALUE" in capsys.readouterr().err

    def test_generate_refuses_foreign_directory(self, tmp_path):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "notes.txt").write_text("keep me")
        assert _run("generate", "--output-dir", str(tmp_path), "-q") == 1
        assert (tmp_path / "data" / "notes.txt").read_text() == "keep me"


def test_benchmark_smoke(tmp_path):
    out = tmp_path / "bench"
    assert _run("benchmark", "--config", str(SMOKE), "--output-dir", str(out), "-q") == 0
    result = json.loads((out / "benchmark.json").read_text())
    assert set(result["results"]) == {"tevae", "noma"}
    assert set(result["runtime_s"]) == {"data", "tevae", "noma"}
    assert "| tevae | mean |" in (out / "benchmark.md").read_text()
