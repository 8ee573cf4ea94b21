from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from gfa_oamp import cli
from gfa_oamp.linear_model import load_instance

SMALL = ["--n", "200", "--T", "3", "--trials", "3", "--mc-samples", "4000"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestRun:
    def test_passes_declared_threshold(self, capsys, tmp_path):
        code, out, err = run(capsys, "run", *SMALL, "--output-dir", str(tmp_path), "--max-rel-gap-se", "10")
        assert code == 0
        assert out.startswith("t,source,mse,stderr,tau2,extra\n")
        assert "PASS max_rel_gap_se" in err

    def test_fails_declared_threshold(self, capsys, tmp_path):
        code, _, err = run(capsys, "run", *SMALL, "--output-dir", str(tmp_path), "--max-rel-gap-se", "1e-12")
        assert code == 1 and "FAIL max_rel_gap_se" in err

    def test_config_file_with_override(self, capsys, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(f"n = 200\nT = 2\ntrials = 2\nmc_samples = 3000\noutput_dir = {tmp_path}\nskip_gfa = true\n")
        code, out, _ = run(capsys, "run", "--config", str(cfg), "--T", "1")
        assert code == 0
        assert len(out.splitlines()) == 1 + 2 * 2

    def test_config_error_exit_code(self, capsys):
        code, _, err = run(capsys, "run", "--delta", "2")
        assert code == 2 and "delta" in err

    def test_byte_identical_reruns(self, capsys, tmp_path):
        _, a, _ = run(capsys, "run", *SMALL, "--output-dir", str(tmp_path / "a"))
        _, b, _ = run(capsys, "run", *SMALL, "--output-dir", str(tmp_path / "b"))
        assert a == b

    def test_dump_and_replay_instance(self, capsys, tmp_path):
        path = tmp_path / "inst.bin"
        run(capsys, "run", *SMALL, "--output-dir", str(tmp_path), "--dump-instance", str(path), "--skip-gfa")
        inst = load_instance(path)
        assert inst.N == 200
        code, out, _ = run(capsys, "run", "--instance", str(path), "--T", "3")
        assert code == 0
        emp = [line for line in out.splitlines() if ",EMP," in line]
        np.testing.assert_allclose(float(emp[0].split(",")[2]), inst.x0 @ inst.x0 / inst.N)


class TestOtherCommands:
    def test_se(self, capsys):
        code, out, _ = run(capsys, "se", "--T", "4")
        assert code == 0
        rows = out.splitlines()
        assert rows[0] == "t,source,mse,stderr,tau2,extra" and len(rows) == 6
        assert rows[1].startswith("0,SE,0.1,")

    def test_gfa(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gfa", "--T", "2", "--mc-samples", "3000", "--algorithm", "ist",
                           "--denoiser", "soft", "--output-dir", str(tmp_path))
        assert code == 0 and ",GFA," in out
        (path,) = tmp_path.glob("order_parameters_*.json")
        payload = json.loads(path.read_text())
        assert payload["order_parameters"]["G"]["rows"] == 3

    def test_verify_df(self, capsys):
        code, out, _ = run(capsys, "verify-df", "--denoiser", "soft")
        assert code == 0
        assert out.count("PASS") == 12

    def test_verify_lemma2(self, capsys):
        code, out, err = run(capsys, "verify-lemma2", "--T", "2", "--mc-samples", "4000")
        assert code == 0 and "PASS lemma2" in err
        assert json.loads(out)["k_hat_values"][0] == 1.0

    def test_sweep(self, capsys, tmp_path):
        code, out, _ = run(capsys, "sweep", *SMALL, "--skip-gfa", "--output-dir", str(tmp_path),
                           "--axis", "sigma0_2", "--values", "0.01,0.05")
        assert code == 0
        assert len(out.splitlines()) == 3

    def test_workers_from_environment(self, monkeypatch):
        monkeypatch.setenv(cli.WORKERS_ENV, "3")
        args = cli.build_parser().parse_args(["se"])
        assert cli._config(args).workers == 3
        args = cli.build_parser().parse_args(["se", "--workers", "2"])
        assert cli._config(args).workers == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "gfa_oamp", "se", "--T", "1"], capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.count("\n") == 3

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main([])
