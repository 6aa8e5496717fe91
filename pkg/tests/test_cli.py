import csv
import json

import numpy as np
import pytest
import yaml

from occauth.cli import ConfigError, load_config, main, merge_config, DEFAULTS

SMALL = {"data": {"benchmark": {"n_users": 4, "dim": 5, "n_train": 25, "n_test": 10}}}


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            merge_config(DEFAULTS, {"protocol": {"quantile": 0.1}})

    def test_overlay(self, tmp_path):
        cfg = load_config(write_config(tmp_path, {"seed": 9, "protocol": {"norm": "tanh"}}))
        assert cfg["seed"] == 9 and cfg["protocol"]["norm"] == "tanh"
        assert cfg["protocol"]["threshold_quantile"] == 0.05

    def test_flags_win(self, tmp_path):
        out = tmp_path / "o"
        cfgp = write_config(tmp_path, {**SMALL, "seed": 1, "protocol": {"norm": "tanh"}})
        assert main(["run", "--config", cfgp, "--out", str(out), "--seed", "4",
                     "--classifier", "lof", "--norm", "softsign"]) == 0
        m = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert m["seed"] == 4 and m["config"]["protocol"]["norm"] == "softsign"


class TestSynth:
    def test_unimodal(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "genuine.csv")) == 500
        assert json.loads((tmp_path / "manifest.json").read_text())["n_modes"] == 1

    def test_bimodal_manifest(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--preset", "bimodal"]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["n_modes"] == 2

    def test_rerun_byte_identical(self, tmp_path):
        main(["synth", "--out", str(tmp_path / "a"), "--seed", "3"])
        main(["synth", "--out", str(tmp_path / "b"), "--seed", "3"])
        for f in ("genuine.csv", "outliers.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--out", str(blocker / "sub")]) != 0
        assert "I/O error" in capsys.readouterr().err


class TestRun:
    def test_fusion_all(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", write_config(tmp_path, SMALL), "--out", str(out),
                     "--fusion", "all"]) == 0
        summary = rows(out / "summary.csv")
        assert len(summary) == 15
        assert sum("[score]" in r["method"] for r in summary) == 11
        for name in ("correlation.csv", "stats.csv", "det_SV1C.csv", "report_SV1C+EE_score.csv"):
            assert (out / name).exists()
        det = rows(out / "det_EE.csv")
        assert list(det[0]) == ["theta", "far", "frr"]

    def test_fusion_list_and_vote(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", write_config(tmp_path, SMALL), "--out", str(out),
                     "--fusion", "sv1c+lof,ee+if+lof", "--fusion-level", "decision"]) == 0
        names = [r["method"] for r in rows(out / "summary.csv")]
        assert names[4:] == ["SV1C+LOF[vote]", "EE+IF+LOF[vote]"]

    def test_parameter_error_exit(self, tmp_path, capsys):
        cfg = {**SMALL, "classifiers": {"lof": {"k_neighbors": 25}}}
        code = main(["run", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o"),
                     "--classifier", "lof"])
        err = capsys.readouterr().err
        assert code != 0
        assert "ParameterError" in err and "LOF" in err and "u00" in err

    def test_bad_config_key(self, tmp_path, capsys):
        code = main(["run", "--config", write_config(tmp_path, {"protocl": {}}), "--out", str(tmp_path)])
        assert code != 0 and "unknown config key" in capsys.readouterr().err

    def test_feature_csv_source(self, tmp_path):
        from occauth.datastream import write_feature_csv

        rng = np.random.default_rng(0)
        feats = {(u, s): rng.normal(size=(20, 3)) + 6 * i for i, u in enumerate("abc") for s in ("s1", "s2")}
        write_feature_csv(tmp_path / "f.csv", feats)
        out = tmp_path / "o"
        assert main(["run", "--source", "features", "--data", str(tmp_path / "f.csv"),
                     "--out", str(out), "--classifier", "ee,lof"]) == 0
        assert [r["user_id"] for r in rows(out / "report_EE.csv")] == ["a", "b", "c", "mean"]


class TestGrid:
    def test_four_files(self, tmp_path):
        assert main(["grid", "--out", str(tmp_path), "--resolution", "50"]) == 0
        for kind in ("sv1c", "ee", "if", "lof"):
            r = rows(tmp_path / f"grid_{kind}.csv")
            assert len(r) == 2500 and list(r[0]) == ["x", "y", "score"]


class TestStatsCommand:
    def test_from_reports(self, tmp_path):
        out = tmp_path / "o"
        main(["run", "--config", write_config(tmp_path, SMALL), "--out", str(out)])
        assert main(["stats", "--reports", str(out), "--out", str(tmp_path / "s")]) == 0
        r = rows(tmp_path / "s" / "stats.csv")
        assert len(r) == 6
        assert list(r[0])[:4] == ["pair", "ks_p", "wilcoxon_p", "friedman_p"]


class TestIngest:
    def test_raw_to_features(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = ["user_id,session,timestamp_s,ax"]
        for u in ("a", "b"):
            for s in ("s1", "s2"):
                lines += [f"{u},{s},{i / 10},{rng.normal()}" for i in range(200)]
        (tmp_path / "raw.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["ingest", "--data", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "o")]) == 0
        r = rows(tmp_path / "o" / "features.csv")
        assert len(r) == 4 * 3 and len(r[0]) == 2 + 8
