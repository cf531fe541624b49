import subprocess
import sys

import pytest

from radapter import checkpoint as ck
from radapter.cli import main
from radapter.evalkit import EvalReport

DATA_FLAGS = ["--n-classes-pretrain", "16", "--n-classes-task", "4", "--n-pretrain", "64", "--n-id-train", "32",
              "--n-id-test", "16", "--n-ood-test", "16", "--img-seq-len", "6", "--txt-seq-len", "8",
              "--img-vocab", "16", "--txt-vocab", "24"]
MODEL_FLAGS = ["--d", "8", "--k", "2", "--layers", "1", "--embed-dim", "4", "--batch", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, base, ft = root / "data", root / "base.ckpt", root / "ft.ckpt"
    assert main(["gen-data", "--seed", "3", "--out", str(data), *DATA_FLAGS]) == 0
    assert main(["pretrain", "--seed", "1", "--data", str(data), "--out", str(base), "--steps", "4",
                 *MODEL_FLAGS]) == 0
    assert main(["finetune", "--seed", "2", "--data", str(data), "--base", str(base), "--out", str(ft),
                 "--steps", "4", *MODEL_FLAGS]) == 0
    return root


class TestPipeline:
    def test_checkpoints_and_provenance(self, workdir):
        base, ft = ck.load(workdir / "base.ckpt"), ck.load(workdir / "ft.ckpt")
        assert base.adapters is None and ft.adapters is not None
        assert ft.provenance["seed"] == 2 and ft.provenance["base"] == base.digest()
        assert len(ft.provenance["config_hash"]) == 16

    def test_merge_then_eval_equals_sweep(self, workdir, capsys):
        merged = workdir / "m.ckpt"
        assert main(["merge", "--ckpt", str(workdir / "ft.ckpt"), "--out", str(merged), "--alpha", "0.5"]) == 0
        assert main(["eval", "--ckpt", str(merged), "--data", str(workdir / "data"),
                     "--out", str(workdir / "e.csv")]) == 0
        assert main(["sweep-alpha", "--finetuned", str(workdir / "ft.ckpt"), "--base", str(workdir / "base.ckpt"),
                     "--data", str(workdir / "data"), "--alphas", "0,0.5,1", "--out", str(workdir / "s.csv")]) == 0
        ev = EvalReport.from_csv((workdir / "e.csv").read_text())
        sw = EvalReport.from_csv((workdir / "s.csv").read_text())
        assert len(ev.rows) == 4 and len(sw.rows) == 12
        for a, s, m, v, _, _ in ev.rows:
            assert sw.value(a, s, m) == v

    def test_eval_adapter_checkpoint_needs_alpha(self, workdir, capsys):
        args = ["eval", "--ckpt", str(workdir / "ft.ckpt"), "--data", str(workdir / "data")]
        assert main(args) == 2
        assert main([*args, "--alpha", "1", "--metrics", "accuracy"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "alpha,split,metric,value,seed,config_hash" and len(out) == 3

    def test_training_log_lines(self, workdir, capsys):
        assert main(["finetune", "--seed", "2", "--data", str(workdir / "data"), "--base",
                     str(workdir / "base.ckpt"), "--out", str(workdir / "ft2.ckpt"), "--epochs", "1",
                     *MODEL_FLAGS]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("epoch=1 step=4 lr=")

    def test_same_seed_same_bytes(self, workdir):
        out = workdir / "ft_again.ckpt"
        assert main(["finetune", "--seed", "2", "--data", str(workdir / "data"), "--base",
                     str(workdir / "base.ckpt"), "--out", str(out), "--steps", "4", *MODEL_FLAGS]) == 0
        assert out.read_bytes() == (workdir / "ft.ckpt").read_bytes()


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["gen-data", "--out", "x"]) == 1
        assert main(["merge", "--ckpt", "a", "--out", "b", "--alpha", "half"]) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_missing_and_corrupt_files(self, tmp_path, capsys):
        assert main(["merge", "--ckpt", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + b"\0" * 32)
        assert main(["merge", "--ckpt", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert main(["eval", "--ckpt", str(bad), "--data", str(tmp_path)]) == 2

    def test_merge_of_merged_is_data_error(self, workdir, capsys):
        once = workdir / "once.ckpt"
        assert main(["merge", "--ckpt", str(workdir / "ft.ckpt"), "--out", str(once)]) == 0
        assert main(["merge", "--ckpt", str(once), "--out", str(workdir / "twice.ckpt")]) == 2

    def test_invalid_spec_value(self, tmp_path, capsys):
        assert main(["gen-data", "--seed", "0", "--out", str(tmp_path), "--style-mix", "2.0"]) == 2

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        for comp in ("mpm_nce", "info_nce", "adapter", "encoder"):
            assert any(line.startswith(comp) and line.endswith("ok") for line in out.splitlines()), comp

    def test_gradcheck_failure_exit_code(self, monkeypatch, capsys):
        from radapter import cli
        from radapter.gradcheck import CheckResult
        monkeypatch.setattr(cli, "run_all", lambda seed: [CheckResult("adapter.w", 1.0, 1e-6)])
        assert main(["gradcheck"]) == 3
        assert "adapter max_rel_err=1.000e+00 tol=1e-06 FAIL" in capsys.readouterr().out

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "radapter", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout
