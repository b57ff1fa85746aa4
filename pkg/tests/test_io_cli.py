import json

import numpy as np
import pytest

import tminfer as tm
import tminfer.io as tio
from tminfer.cli import main
from tminfer.optimize import dataset_fingerprint


CONFIG = {
    "w": 4, "density": 0.25, "m_samples": 120, "sigma": 0.1, "seed": 42,
    "scope": "output",
    "optimizer": {"grad_tol": 1e-6, "max_iters": 200},
    "decimation": {"batch_fraction": 0.1},
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = dict(CONFIG)
    if overrides:
        cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_happy_path(self, tmp_path):
        cfg = tio.RunConfig.from_file(write_config(tmp_path))
        assert cfg.w == 4
        assert cfg.optim_options().grad_tol == 1e-6
        assert cfg.decimation_options().batch_fraction == 0.1

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(tio.ConfigError, match="unknown config keys"):
            tio.RunConfig.from_file(write_config(tmp_path, {"wavelength": 633}))

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(tio.ConfigError, match="unknown optimizer keys"):
            tio.RunConfig.from_file(
                write_config(tmp_path, {"optimizer": {"lr": 0.1}}))

    def test_missing_w(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"density": 0.2}))
        with pytest.raises(tio.ConfigError, match="'w'"):
            tio.RunConfig.from_file(path)

    @pytest.mark.parametrize("bad", [
        {"scope": "some"}, {"density": 0.0}, {"m_samples": 0}, {"sigma": -1},
    ])
    def test_field_validation(self, tmp_path, bad):
        with pytest.raises(tio.ConfigError):
            tio.RunConfig.from_file(write_config(tmp_path, bad))

    def test_fingerprint_tracks_content(self, tmp_path):
        a = tio.RunConfig.from_file(write_config(tmp_path))
        b = tio.RunConfig.from_file(write_config(tmp_path, {"seed": 43}, "c2.json"))
        assert tio.config_fingerprint(a) == tio.config_fingerprint(a)
        assert tio.config_fingerprint(a) != tio.config_fingerprint(b)

    def test_threads_not_in_fingerprint(self, tmp_path):
        a = tio.RunConfig.from_file(write_config(tmp_path))
        b = tio.RunConfig.from_file(write_config(tmp_path, {"threads": 8}, "c2.json"))
        assert tio.config_fingerprint(a) == tio.config_fingerprint(b)

    def test_threads_resolution_order(self, tmp_path, monkeypatch):
        cfg = tio.RunConfig.from_file(write_config(tmp_path))
        monkeypatch.delenv("TMINFER_THREADS", raising=False)
        assert cfg.resolve_threads() == 1
        monkeypatch.setenv("TMINFER_THREADS", "3")
        assert cfg.resolve_threads() == 3
        assert cfg.resolve_threads(5) == 5
        cfg2 = tio.RunConfig.from_file(write_config(tmp_path, {"threads": 2}, "c3.json"))
        assert cfg2.resolve_threads() == 2
        monkeypatch.setenv("TMINFER_THREADS", "junk")
        with pytest.raises(tio.ConfigError):
            cfg.resolve_threads()


class TestFormats:
    @pytest.mark.parametrize("binary", [False, True])
    def test_dataset_round_trip(self, tmp_path, channel4, binary):
        ds = tm.generate_dataset(channel4, 30, tm.NoiseSpec(sigma=0.2), seed=3)
        tio.write_dataset(ds, tmp_path, fingerprint="fp", binary=binary)
        back = tio.read_dataset(tmp_path, fingerprint="fp")
        assert back.inputs.tobytes() == ds.inputs.tobytes()
        assert back.outputs.tobytes() == ds.outputs.tobytes()
        assert back.direction == ds.direction
        assert back.meta["seed"] == 3

    @pytest.mark.parametrize("binary", [False, True])
    def test_matrix_round_trip(self, tmp_path, channel4, binary):
        name = "m.npy" if binary else "m.csv"
        tio.write_matrix(channel4, tmp_path / name, binary=binary)
        back = tio.read_matrix(tmp_path / name)
        assert back.entries.tobytes() == channel4.entries.tobytes()
        if not binary:
            assert back.role == "direct"

    def test_matrix_role_preserved(self, tmp_path, channel4):
        inv = tm.TransmissionMatrix(dims=channel4.dims,
                                    entries=np.linalg.pinv(channel4.entries),
                                    role="inverse")
        tio.write_matrix(inv, tmp_path / "inv.csv")
        assert tio.read_matrix(tmp_path / "inv.csv").role == "inverse"

    def test_estimate_round_trip(self, tmp_path, data4_noisy):
        est = tm.fit_all_rows(data4_noisy, scope="output",
                              opts=tm.OptimOptions(grad_tol=1e-6, max_iters=200))
        tio.write_estimate(est, tmp_path / "e.json", fingerprint="fp",
                           dataset_sha256="x")
        back = tio.read_estimate(tmp_path / "e.json", fingerprint="fp")
        assert back.fitted_sites == est.fitted_sites
        assert back.total_pl == est.total_pl
        assert back.dataset_fingerprint == est.dataset_fingerprint
        for r1, r2, m1, m2 in zip(est.rows, back.rows, est.masks, back.masks):
            assert r1.a == r2.a
            assert r1.k.tobytes() == r2.k.tobytes()
            assert np.array_equal(m1.active, m2.active)

    def test_fingerprint_mismatch_rejected(self, tmp_path, data4_noisy):
        est = tm.fit_all_rows(data4_noisy, scope="output",
                              opts=tm.OptimOptions(grad_tol=1e-6, max_iters=200))
        tio.write_estimate(est, tmp_path / "e.json", fingerprint="fp-A",
                           dataset_sha256="x")
        with pytest.raises(tio.ChainError, match="fingerprint"):
            tio.read_estimate(tmp_path / "e.json", fingerprint="fp-B")

    def test_dataset_tamper_detected(self, tmp_path, channel4):
        ds = tm.generate_dataset(channel4, 10, tm.NoiseSpec(sigma=0.0), seed=1)
        tio.write_dataset(ds, tmp_path, fingerprint="fp")
        data = (tmp_path / "dataset.csv").read_text()
        (tmp_path / "dataset.csv").write_text(data.replace("0.", "1.", 1))
        with pytest.raises(tio.ChainError, match="checksum"):
            tio.read_dataset(tmp_path, fingerprint="fp")


class TestCli:
    def run(self, *argv):
        return main(list(argv))

    def chain(self, tmp_path, out, *, threads=1, extra_cfg=None, seed=None):
        cfg = write_config(tmp_path, extra_cfg)
        common = ["--config", str(cfg), "--out", str(out), "--threads", str(threads)]
        if seed is not None:
            common += ["--seed", str(seed)]
        for verb in ("generate", "fit", "select", "extract", "eval", "report"):
            assert self.run(verb, *common) == 0, verb
        return cfg

    def test_generate_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 0
        for name in ("dataset.csv", "dataset.meta.json", "t_true.csv",
                     "MANIFEST.json"):
            assert (out / name).exists(), name

    def test_malformed_config_fails_atomically(self, tmp_path):
        cfg = write_config(tmp_path, {"bogus_key": 1})
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 1
        assert not out.exists() or not list(out.iterdir())

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 0
        assert (out1 / "dataset.csv").read_bytes() == (out2 / "dataset.csv").read_bytes()

    def test_full_chain_and_artifacts(self, tmp_path):
        out = tmp_path / "run"
        self.chain(tmp_path, out)
        for name in ("estimate_full.json", "estimate_selected.json", "path.json",
                     "t_inf.csv", "extract.json", "eval.json", "path_table.csv"):
            assert (out / name).exists(), name
        table = (out / "path_table.csv").read_text().splitlines()
        assert table[0] == "k_active,sigma,total_pl,bic,selected_flag"
        assert sum(row.endswith(",1") for row in table[1:]) == 1

    def test_tampered_dataset_blocks_fit(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 0
        raw = (out / "dataset.csv").read_text()
        (out / "dataset.csv").write_text(raw.replace("0.", "1.", 1))
        assert self.run("fit", "--config", str(cfg), "--out", str(out)) == 1

    def test_tampered_estimate_blocks_select(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        for verb in ("generate", "fit"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out)) == 0
        doc = json.loads((out / "estimate_full.json").read_text())
        doc["rows"][0]["a"] *= 2
        (out / "estimate_full.json").write_text(json.dumps(doc))
        assert self.run("select", "--config", str(cfg), "--out", str(out)) == 1

    def test_config_change_between_stages_rejected(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 0
        cfg2 = write_config(tmp_path, {"seed": 43}, "other.json")
        assert self.run("fit", "--config", str(cfg2), "--out", str(out)) == 1

    def test_missing_upstream_stage(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out)) == 0
        assert self.run("select", "--config", str(cfg), "--out", str(out)) == 1

    def test_gramian_needs_all_scope(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        for verb in ("generate", "fit", "select"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out)) == 0
        assert self.run("extract", "--config", str(cfg), "--out", str(out),
                        "--gramian") == 1

    def test_gramian_with_all_scope(self, tmp_path):
        cfg = write_config(tmp_path, {"scope": "all", "m_samples": 150})
        out = tmp_path / "run"
        for verb in ("generate", "fit"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out)) == 0
        assert self.run("extract", "--config", str(cfg), "--out", str(out),
                        "--gramian") == 0
        assert (out / "gramian_inf.csv").exists()
        doc = json.loads((out / "extract.json").read_text())
        assert "balance" in doc

    def test_reversed_flow_produces_inverse(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        self.chain(tmp_path, out)
        for verb in ("fit", "select", "extract"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out),
                            "--reversed") == 0
        assert (out / "t_inv_inf.csv").exists()
        assert tio.read_matrix(out / "t_inv_inf.csv").role == "inverse"
        assert self.run("eval", "--config", str(cfg), "--out", str(out)) == 0
        doc = json.loads((out / "eval.json").read_text())
        assert "q_image_inverse" in doc

    def test_binary_io_chain(self, tmp_path):
        cfg = write_config(tmp_path, {"binary_io": True})
        out = tmp_path / "run"
        for verb in ("generate", "fit", "select", "extract"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out)) == 0
        assert (out / "dataset.npy").exists()
        assert (out / "t_inf.npy").exists()

    def test_sweep_and_report(self, tmp_path):
        cfg = write_config(tmp_path, {
            "sigma_grid": [0.0, 0.1], "replicates": 1, "m_samples": 150})
        out = tmp_path / "run"
        assert self.run("sweep", "--config", str(cfg), "--out", str(out)) == 0
        doc = json.loads((out / "sweep.json").read_text())
        assert len(doc["records"]) == 2
        assert all("runtime_seconds" not in r for r in doc["records"])
        assert self.run("report", "--config", str(cfg), "--out", str(out)) == 0
        lines = (out / "sweep_table.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_seed_override_changes_fingerprint(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert self.run("generate", "--config", str(cfg), "--out", str(out),
                        "--seed", "7") == 0
        # plain config now mismatches the overridden fingerprint
        assert self.run("fit", "--config", str(cfg), "--out", str(out)) == 1
        assert self.run("fit", "--config", str(cfg), "--out", str(out),
                        "--seed", "7") == 0

    def test_dataset_fingerprint_guard_on_reversed_select(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        for verb in ("generate", "fit"):
            assert self.run(verb, "--config", str(cfg), "--out", str(out)) == 0
        # forward full fit cannot seed a reversed selection
        assert self.run("select", "--config", str(cfg), "--out", str(out),
                        "--reversed") == 1
