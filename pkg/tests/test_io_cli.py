import json

import numpy as np
import pytest

from kspace_bed.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from kspace_bed.io import ConfigError, load_config, read_pgm, read_table, write_pgm, write_table


SMALL = {
    "seed": 3,
    "shape": [8, 8],
    "noise_sigma": 0.2,
    "prior": {"source": "analytic", "kind": "power_law", "scale": [2, 2], "power": 1.5, "floor": 0.001},
    "optimizer": {
        "experiments": 2, "steps": 10, "particles": 4, "contrastive_particles": 4,
        "lines_per_experiment": 1, "guidance": "moment",
    },
    "mask": {"line_radius": 3},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.arange(12, dtype=float).reshape(3, 4) / 11
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        assert back.shape == (3, 4)
        np.testing.assert_array_equal(back, np.rint(img * 255))

    def test_header_comments(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pgm(p), [[0, 255]])

    def test_rejects_ascii(self, tmp_path):
        p = tmp_path / "b.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(p)


class TestTables:
    def test_none_is_empty_cell(self, tmp_path):
        write_table(tmp_path / "t.csv", [{"a": 1, "b": None}, {"a": 0.5, "b": 2}], ("a", "b"))
        rows = read_table(tmp_path / "t.csv")
        assert rows == [{"a": "1", "b": ""}, {"a": "0.5", "b": "2"}]


class TestConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config not found"):
            load_config(tmp_path / "none.json")

    def test_invalid_json_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "seed": 1,\n  "shape": [8 8]\n}')
        with pytest.raises(ConfigError) as e:
            load_config(p)
        assert e.value.line == 3

    def test_unknown_key_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "seed": 1,\n  "colour": "red"\n}')
        with pytest.raises(ConfigError, match="colour") as e:
            load_config(p)
        assert e.value.line == 3
        assert str(e.value).startswith(f"{p}:3:")

    def test_seed_required(self, tmp_path):
        with pytest.raises(ConfigError, match="seed"):
            load_config(write_config(tmp_path / "c.json", {"shape": [8, 8]}))

    def test_sweep_fractions(self, tmp_path):
        with pytest.raises(ConfigError, match="fractions"):
            load_config(write_config(tmp_path / "c.json", dict(SMALL, sweep={"fractions": [0.0]})))

    def test_missing_prior_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(write_config(tmp_path / "c.json", dict(SMALL, prior={"source": "file", "path": "gone.json"})))


class TestCli:
    def test_config_errors_exit_2(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
        assert "config not found" in capsys.readouterr().err
        bad = dict(SMALL, optimizer=dict(SMALL["optimizer"], optimizer="newton"))
        assert main(["run", "--config", write_config(tmp_path / "c.json", bad)]) == EXIT_CONFIG

    def test_negative_seed(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", SMALL)
        assert main(["run", "--config", cfg, "--seed", "-1"]) == EXIT_CONFIG

    def test_run_outputs_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", SMALL)
        for name in ("a", "b"):
            assert main(["run", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
        a, b = tmp_path / "a", tmp_path / "b"
        for f in ("trace.json", "metrics.csv", "posterior_mean.pgm", "masks/mask_001.pgm", "run.png"):
            assert (a / f).is_file(), f
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        rows = read_table(a / "metrics.csv")
        assert [r["k"] for r in rows] == ["1", "2"]
        assert float(rows[1]["sampled_fraction"]) >= float(rows[0]["sampled_fraction"])
        assert rows[0]["oracle_eig"] != ""

    def test_numerical_abort_exit_3(self, tmp_path, capsys):
        # plain plug-in guidance is unstable at tiny noise levels
        bad = dict(SMALL, noise_sigma=1e-4, optimizer=dict(SMALL["optimizer"], guidance="dps", steps=40))
        cfg = write_config(tmp_path / "c.json", bad)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
        assert "numerical abort" in capsys.readouterr().err
        assert (tmp_path / "o" / "abort_trace.json").is_file()

    def test_sweep_accelerations(self, tmp_path):
        cfg = dict(SMALL, sweep={"fractions": [0.25, 0.04], "seeds": [1]})
        cfg["optimizer"] = dict(SMALL["optimizer"], experiments=20)
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["sweep", "--config", path, "--out", str(tmp_path / "s")]) == EXIT_OK
        rows = read_table(tmp_path / "s" / "sweep.csv")
        assert sorted(float(r["acceleration"]) for r in rows) == [4.0, 25.0]
        for r in rows:
            assert float(r["median_fraction"]) >= float(r["fraction"])
        assert (tmp_path / "s" / "sweep.png").is_file()

    def test_compare_random(self, tmp_path):
        path = write_config(tmp_path / "c.json", dict(SMALL, sweep={"seeds": [1, 2]}))
        assert main(["compare-random", "--config", path, "--out", str(tmp_path / "c")]) == EXIT_OK
        rows = read_table(tmp_path / "c" / "compare.csv")
        assert len(rows) == 2
        for r in rows:
            d = float(r["ssim_optimized"]) - float(r["ssim_random"])
            assert float(r["delta_ssim"]) == pytest.approx(d)

    def test_eval_metrics(self, tmp_path, capsys):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        write_pgm(tmp_path / "r.pgm", img)
        write_pgm(tmp_path / "e.pgm", img)
        assert main(["eval-metrics", "--reference", str(tmp_path / "r.pgm"), "--estimate", str(tmp_path / "e.pgm")]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "psnr,ssim,dice"
        assert out[1].startswith("inf,1.0,")
        assert main(["eval-metrics", "--reference", str(tmp_path / "r.pgm")]) == EXIT_CONFIG

    def test_train_gmm(self, tmp_path):
        cfg = dict(SMALL, training={"kind": "gmm", "n_train": 20})
        path = write_config(tmp_path / "c.json", cfg)
        assert main(["train-prior", "--config", path, "--out", str(tmp_path / "t")]) == EXIT_OK
        prior = tmp_path / "t" / "prior.json"
        assert prior.is_file()
        run = dict(SMALL, prior={"source": "file", "path": str(prior)})
        path = write_config(tmp_path / "r.json", run)
        assert main(["run", "--config", path, "--out", str(tmp_path / "r")]) == EXIT_OK
