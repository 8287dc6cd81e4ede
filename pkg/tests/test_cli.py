import csv
import json

import numpy as np
import pytest

from vaeprior import fileio
from vaeprior.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY = """\
profile: desk
seed: 3
grid: {nx: 10, ny: 10}
covariance: {reference: 20.0, corr_lengths: [10.0, 30.0]}
experiments:
  - {name: KLE-20, prior: kle, corr_len: 20.0}
  - {name: VAE-10-30, prior: vae, model: vae/model.vae}
likelihood: {sigma2: 1.0e-2}
dataset: {per_length: 20}
vae: {latent_dim: 2, dense_units: 8, epochs: 2, batch_size: 10}
mcmc: {chains: 2, iterations: 300, burn_in: 30, gamma: 0.3}
diagnostics: {every: 50, tail: 200, posterior_samples: 40, mean_field_samples: 20,
              ks_size: 30, baseline: KLE-20}
"""


def write_cfg(tmp, text=TINY):
    p = tmp / "cfg.yaml"
    p.write_text(text)
    return str(p)


def run(cfg, out, *args):
    return main([args[0], "--config", cfg, "--out", str(out), "--log-level", "WARNING", *args[1:]])


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    out = tmp / "run"
    codes = [run(cfg, out, c) for c in ("gen-reference", "gen-dataset", "train-vae",
                                        "run-mcmc", "diagnose")]
    return cfg, out, codes


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPipeline:
    def test_exit_codes(self, pipeline_run):
        assert pipeline_run[2] == [EXIT_OK] * 5

    def test_artifacts(self, pipeline_run):
        _, out, _ = pipeline_run
        for rel in ("reference/y_ref.fld", "reference/kappa_ref.fld", "reference/sensors.csv",
                    "dataset/manifest.csv", "vae/model.vae", "vae/history.csv",
                    "vae/test_errors.csv", "kle/basis_20.klb",
                    "mcmc/KLE-20/chain_00.trc", "mcmc/VAE-10-30/chain_01.trc",
                    "diagnostics/KLE-20/mpsrf.csv", "diagnostics/VAE-10-30/ks.csv",
                    "diagnostics/table.csv"):
            assert (out / rel).is_file(), rel
        assert len(rows(out / "reference/sensors.csv")) == 25
        assert len(rows(out / "dataset/manifest.csv")) == 40
        assert len(rows(out / "vae/history.csv")) == 2

    def test_self_ks(self, pipeline_run):
        _, out, _ = pipeline_run
        ks = rows(out / "diagnostics/KLE-20/ks.csv")
        assert {r["quantity"] for r in ks} == {"dre", "rey"}
        assert all(float(r["p"]) == 1.0 and float(r["D"]) == 0.0 for r in ks)

    def test_table(self, pipeline_run):
        _, out, _ = pipeline_run
        t = {r["experiment"]: r for r in rows(out / "diagnostics/table.csv")}
        assert set(t) == {"KLE-20", "VAE-10-30"}
        assert t["VAE-10-30"]["dim"] == "2"
        for r in t.values():
            assert 0.0 <= float(r["acceptance_rate"]) <= 100.0
            assert int(r["n_posterior"]) == 40

    def test_traces_match_config(self, pipeline_run):
        _, out, _ = pipeline_run
        hdr, recs = fileio.read_trace_records(out / "mcmc/KLE-20/chain_00.trc")
        assert hdr["iterations"] == 300 and recs.size == 300
        np.testing.assert_array_equal(recs["iteration"], np.arange(1, 301))

    def test_deterministic(self, pipeline_run, tmp_path):
        cfg, out, _ = pipeline_run
        other = tmp_path / "again"
        assert run(cfg, other, "gen-reference") == EXIT_OK
        assert run(cfg, other, "run-mcmc", "--experiment", "KLE-20") == EXIT_OK
        for rel in ("reference/y_ref.fld", "mcmc/KLE-20/chain_00.trc", "mcmc/KLE-20/chain_01.trc"):
            assert (other / rel).read_bytes() == (out / rel).read_bytes()

    def test_seed_changes_output(self, pipeline_run, tmp_path):
        cfg, out, _ = pipeline_run
        assert main(["gen-reference", "--config", cfg, "--out", str(tmp_path), "--seed", "4",
                     "--log-level", "WARNING"]) == EXIT_OK
        assert (tmp_path / "reference/y_ref.fld").read_bytes() != \
            (out / "reference/y_ref.fld").read_bytes()

    def test_export(self, pipeline_run, tmp_path, capsys):
        cfg, out, _ = pipeline_run
        files = [out / "reference/y_ref.fld", out / "mcmc/KLE-20/chain_00.trc",
                 out / "kle/basis_20.klb", out / "vae/model.vae"]
        code = main(["export", "--config", cfg, "--out", str(out), "--dest", str(tmp_path),
                     "--log-level", "WARNING", *map(str, files)])
        assert code == EXIT_OK
        printed = capsys.readouterr().out.split()
        assert len(printed) == 6
        fld = rows(tmp_path / "y_ref.csv")
        assert len(fld) == 100
        ref = fileio.read_field_raw(out / "reference/y_ref.fld")[3]
        np.testing.assert_array_equal([float(r["gaussian"]) for r in fld], ref)
        assert len(rows(tmp_path / "chain_00.csv")) == 300
        desc = json.loads((tmp_path / "model.json").read_text())
        assert desc["architecture"]["latent_dim"] == 2


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY.replace("gamma: 0.3", "gamma: 2.0"))
        assert run(cfg, tmp_path / "o", "gen-reference") == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert run(str(tmp_path / "none.yaml"), tmp_path / "o", "gen-reference") == EXIT_CONFIG

    def test_missing_vae_model(self, tmp_path):
        cfg = write_cfg(tmp_path)
        run(cfg, tmp_path / "o", "gen-reference")
        assert run(cfg, tmp_path / "o", "run-mcmc", "--experiment", "VAE-10-30") == EXIT_CONFIG

    def test_runtime_error(self, tmp_path):
        # chains without a reference cannot run
        cfg = write_cfg(tmp_path)
        assert run(cfg, tmp_path / "o", "run-mcmc", "--experiment", "KLE-20") == EXIT_RUNTIME

    def test_unknown_experiment(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run(cfg, tmp_path / "o", "run-mcmc", "--experiment", "KLE-99") == EXIT_CONFIG

    def test_bad_export(self, tmp_path):
        cfg = write_cfg(tmp_path)
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"JUNKJUNK")
        assert main(["export", "--config", cfg, str(junk)]) == EXIT_RUNTIME

    def test_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["run-mcmc"])
        assert exc.value.code == 2
