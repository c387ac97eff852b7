import copy
import json
import os

import numpy as np
import pytest

from klseep import cli, errors


def deep_update(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = v
    return base


def config_1d(tmp_path, **over):
    cfg = {
        "schema": "klseep-experiment-v1",
        "problem": "1d-layers",
        "mode": "simultaneous-proposed",
        "kernel": {"v": 1.0, "l": 10.0},
        "mesh": {"n_elems": 40},
        "sampler": {"chains": 2, "samples": 80, "warmup": 30,
                    "step_size": 0.05, "max_depth": 4, "seed": 5},
        "observations": {"path": str(tmp_path / "obs-1d.json"),
                         "noise_ratio": 0.1, "seed": 7,
                         "truth": {"n_elems": 200}},
        "output_dir": str(tmp_path / "run"),
    }
    return deep_update(cfg, copy.deepcopy(over))


def config_2d(tmp_path, **over):
    cfg = {
        "schema": "klseep-experiment-v1",
        "problem": "2d-cavity",
        "mode": "simultaneous-proposed",
        "kernel": {"v": 1.0, "l": 8.0},
        "mesh": {"n_rings": 4},
        "sampler": {"chains": 1, "samples": 40, "warmup": 10,
                    "step_size": 0.05, "max_depth": 4, "seed": 3},
        "observations": {"path": str(tmp_path / "obs-2d.json"),
                         "noise_ratio": 0.1, "seed": 9,
                         "truth": {"n_rings": 6, "field_seed": 11}},
        "summary": {"raster_n": 40, "max_raster_samples": 50},
        "output_dir": str(tmp_path / "run2d"),
    }
    return deep_update(cfg, copy.deepcopy(over))


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


class TestConfigValidation:
    def test_desk_preset_parses(self):
        cfg = cli.load_experiment_config("configs/desk-1d-proposed.json")
        assert cfg.problem == "1d-layers"
        assert cfg.mode == "simultaneous-proposed"
        assert cfg.kernel_l == 10.0
        assert cfg.chains == 5 and cfg.samples == 5000 and cfg.warmup == 1000

    def test_all_presets_parse(self):
        import glob

        paths = sorted(glob.glob("configs/*.json"))
        assert len(paths) >= 10
        for p in paths:
            blob = json.load(open(p))
            if blob["schema"] == "klseep-benchmark-v1":
                cli.load_benchmark_config(p)
            else:
                cli.load_experiment_config(p)

    def test_spatial_with_geometry_prior_rejected(self, tmp_path):
        cfg = config_1d(tmp_path, mode="spatial-only",
                        prior={"geometry_mean": [2.5, 7.5]})
        with pytest.raises(errors.ConfigError) as exc:
            cli.validate_experiment(cfg)
        assert "geometry_mean" in str(exc.value)
        rc = cli.main(["run", write_config(tmp_path, cfg)])
        assert rc == 2

    def test_2d_baseline_mode_rejected(self, tmp_path):
        cfg = config_2d(tmp_path, mode="simultaneous-baseline")
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 2

    def test_unknown_key_rejected(self, tmp_path):
        cfg = config_1d(tmp_path)
        cfg["stepsize"] = 0.1
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 2

    def test_unknown_mesh_key_rejected(self, tmp_path):
        cfg = config_1d(tmp_path, mesh={"n_rings": 4})
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 2

    def test_warmup_not_below_samples_rejected(self, tmp_path):
        cfg = config_1d(tmp_path, sampler={"samples": 30, "warmup": 30})
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.json")]) == 2

    def test_malformed_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": "klseep-experiment-v1",\n  "problem" }')
        assert cli.main(["run", str(path)]) == 2
        assert "line" in capsys.readouterr().err

    def test_bench_requires_increasing_sizes(self, tmp_path):
        cfg = bench_config(tmp_path, n_e=[80, 40])
        assert cli.main(["bench", write_config(tmp_path, cfg)]) == 2

    def test_bench_schema_mismatch(self, tmp_path):
        cfg = config_1d(tmp_path)
        assert cli.main(["bench", write_config(tmp_path, cfg)]) == 2


class TestMakeObs:
    def test_1d_counts_and_replay(self, tmp_path):
        cfg = config_1d(tmp_path)
        path = write_config(tmp_path, cfg)
        assert cli.main(["make-obs", path]) == 0
        obs_path = cfg["observations"]["path"]
        blob = json.load(open(obs_path))
        y = np.array(blob["y"])
        assert y.shape == (31, 7)
        assert blob["meta"]["seed"] == 7
        assert blob["meta"]["theta_star"] == [3.8, 5.8]
        first = open(obs_path, "rb").read()
        assert cli.main(["make-obs", path]) == 0
        assert open(obs_path, "rb").read() == first

    def test_2d_counts(self, tmp_path):
        cfg = config_2d(tmp_path)
        assert cli.main(["make-obs", write_config(tmp_path, cfg)]) == 0
        blob = json.load(open(cfg["observations"]["path"]))
        y = np.array(blob["y"])
        assert y.shape == (31, 30)
        assert len(blob["meta"]["theta_star"]) > 3


@pytest.fixture(scope="module")
def run1d(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run1d")
    cfg = config_1d(tmp)
    rc = cli.main(["run", write_config(tmp, cfg)])
    return rc, tmp, cfg


@pytest.fixture(scope="module")
def run2d(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run2d")
    cfg = config_2d(tmp)
    rc = cli.main(["run", write_config(tmp, cfg)])
    return rc, tmp, cfg


class TestRun1D:
    @pytest.fixture
    def done(self, run1d):
        return run1d

    def test_exit_zero(self, done):
        assert done[0] == 0

    def test_artifacts(self, done):
        _, tmp, cfg = done
        out = cfg["output_dir"]
        for name in ["chain_00.csv", "chain_01.csv", "adaptation_00.json",
                     "adaptation_01.json", "diagnostics.json", "profile.csv",
                     "config.json"]:
            assert os.path.exists(os.path.join(out, name)), name

    def test_diagnostics_content(self, done):
        _, tmp, cfg = done
        d = json.load(open(os.path.join(cfg["output_dir"], "diagnostics.json")))
        assert d["ievp_solves"] == 1
        assert d["M"] == 8 and d["M1"] == 6
        assert len(d["per_chain"]) == 2
        assert len(d["theta2_mean"]) == 2
        assert len(d["theta2_hpd95"]) == 2
        assert d["min_ess_threshold"] > 0
        for c in d["per_chain"]:
            assert "divergence_rate" in c and "mean_accept" in c

    def test_profile_shape(self, done):
        _, tmp, cfg = done
        lines = open(os.path.join(cfg["output_dir"], "profile.csv")).read().splitlines()
        assert lines[0] == "element,z_center,p2_5,p50,p97_5"
        assert len(lines) == 41
        row = lines[1].split(",")
        assert float(row[2]) <= float(row[3]) <= float(row[4])

    def test_determinism(self, done, tmp_path):
        _, tmp, cfg = done
        cfg2 = copy.deepcopy(cfg)
        cfg2["output_dir"] = str(tmp_path / "rerun")
        assert cli.main(["run", write_config(tmp_path, cfg2)]) == 0
        a = open(os.path.join(cfg["output_dir"], "chain_00.csv"), "rb").read()
        b = open(os.path.join(cfg2["output_dir"], "chain_00.csv"), "rb").read()
        assert a == b

    def test_jobs_flag_matches_serial(self, done, tmp_path):
        _, tmp, cfg = done
        cfg2 = copy.deepcopy(cfg)
        cfg2["output_dir"] = str(tmp_path / "par")
        assert cli.main(["run", write_config(tmp_path, cfg2), "--jobs", "2"]) == 0
        a = open(os.path.join(cfg["output_dir"], "chain_01.csv"), "rb").read()
        b = open(os.path.join(cfg2["output_dir"], "chain_01.csv"), "rb").read()
        assert a == b

    def test_seed_override_changes_chains(self, done, tmp_path):
        _, tmp, cfg = done
        cfg2 = copy.deepcopy(cfg)
        cfg2["output_dir"] = str(tmp_path / "seeded")
        assert cli.main(
            ["run", write_config(tmp_path, cfg2), "--seed", "99"]
        ) == 0
        a = open(os.path.join(cfg["output_dir"], "chain_00.csv"), "rb").read()
        b = open(os.path.join(cfg2["output_dir"], "chain_00.csv"), "rb").read()
        assert a != b
        d = json.load(open(os.path.join(cfg2["output_dir"], "config.json")))
        assert d["sampler"]["seed"] == 99

    def test_output_dir_override(self, done, tmp_path):
        _, tmp, cfg = done
        cfg2 = copy.deepcopy(cfg)
        assert cli.main(
            ["run", write_config(tmp_path, cfg2), "--output-dir",
             str(tmp_path / "moved")]
        ) == 0
        assert os.path.exists(tmp_path / "moved" / "diagnostics.json")


class TestRunVariants:
    def test_baseline_shares_observations(self, tmp_path):
        cfg = config_1d(tmp_path)
        assert cli.main(["make-obs", write_config(tmp_path, cfg)]) == 0
        base = config_1d(tmp_path, mode="simultaneous-baseline",
                         output_dir=str(tmp_path / "runb"))
        assert cli.main(["run", write_config(tmp_path, base, "b.json")]) == 0
        d = json.load(open(os.path.join(base["output_dir"], "diagnostics.json")))
        # the discrete baseline never touches the bounding-domain eigenproblem
        assert d["ievp_solves"] == 0
        assert d["M"] == 9

    def test_spatial_only(self, tmp_path):
        cfg = config_1d(tmp_path, mode="spatial-only",
                        kernel={"l": 2.5},
                        output_dir=str(tmp_path / "runs"))
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 0
        d = json.load(open(os.path.join(cfg["output_dir"], "diagnostics.json")))
        assert d["M"] == 8 and d["theta2_mean"] is None
        assert os.path.exists(os.path.join(cfg["output_dir"], "profile.csv"))


class TestRun2D:
    @pytest.fixture
    def done(self, run2d):
        return run2d

    def test_exit_zero(self, done):
        assert done[0] == 0

    def test_artifacts(self, done):
        _, tmp, cfg = done
        out = cfg["output_dir"]
        for name in ["chain_00.csv", "diagnostics.json", "zones.csv",
                     "field.csv", "config.json"]:
            assert os.path.exists(os.path.join(out, name)), name

    def test_diagnostics_content(self, done):
        _, tmp, cfg = done
        d = json.load(open(os.path.join(cfg["output_dir"], "diagnostics.json")))
        assert d["ievp_solves"] == 1
        assert d["M"] == d["M1"] + 3
        assert len(d["theta2_mean"]) == 3

    def test_zone_raster(self, done):
        _, tmp, cfg = done
        lines = open(os.path.join(cfg["output_dir"], "zones.csv")).read().splitlines()
        assert lines[0] == "x,y,s5,s50,s95"
        assert len(lines) == 1601
        body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        # nesting: S_5 within S_50 within S_95
        assert np.all(body[:, 2] <= body[:, 3])
        assert np.all(body[:, 3] <= body[:, 4])
        assert body[:, 4].sum() > 0

    def test_field_raster(self, done):
        _, tmp, cfg = done
        lines = open(os.path.join(cfg["output_dir"], "field.csv")).read().splitlines()
        assert lines[0] == "x,y,p2_5,p50,p97_5"
        assert len(lines) == 1601


class TestBench:
    def test_micro_benchmark(self, tmp_path):
        cfg = bench_config(tmp_path)
        assert cli.main(["bench", write_config(tmp_path, cfg)]) == 0
        out = cfg["output_dir"]
        lines = open(os.path.join(out, "timings.csv")).read().splitlines()
        assert lines[0] == "backend,quantity,n_e,median_s"
        assert len(lines) == 9
        assert all(float(ln.split(",")[3]) > 0 for ln in lines[1:])
        slopes = json.load(open(os.path.join(out, "slopes.json")))
        for backend in ["proposed", "baseline"]:
            for quantity in ["shape_derivative", "leapfrog"]:
                assert "last3" in slopes[backend][quantity]


class TestDiag:
    def test_recompute_matches_run(self, tmp_path):
        cfg = config_1d(tmp_path)
        assert cli.main(["run", write_config(tmp_path, cfg)]) == 0
        out = cfg["output_dir"]
        orig = json.load(open(os.path.join(out, "diagnostics.json")))
        os.remove(os.path.join(out, "diagnostics.json"))
        os.remove(os.path.join(out, "profile.csv"))
        assert cli.main(["diag", out]) == 0
        redo = json.load(open(os.path.join(out, "diagnostics.json")))
        assert redo["theta2_mean"] == orig["theta2_mean"]
        assert redo["per_chain"][0]["mean_accept"] == orig["per_chain"][0]["mean_accept"]
        assert os.path.exists(os.path.join(out, "profile.csv"))

    def test_diag_missing_dir(self, tmp_path):
        assert cli.main(["diag", str(tmp_path / "ghost")]) == 2


def bench_config(tmp_path, **over):
    cfg = {
        "schema": "klseep-benchmark-v1",
        "n_e": [40, 80],
        "repetitions": 2,
        "backends": ["proposed", "baseline"],
        "kernel": {"v": 1.0, "l": 10.0},
        "n_modes": [3, 3],
        "theta2": [3.0, 7.0],
        "noise_ratio": 0.1,
        "seed": 3,
        "output_dir": str(tmp_path / "bench"),
    }
    return deep_update(cfg, copy.deepcopy(over))
