import hashlib
import json
import os
import subprocess
import sys

import pytest

from caarma import mixup
from caarma.cli import main
from caarma.trainer import read_metrics

TINY = """\
embed_dim = 8
encoder_channels = 8
disc_hidden = 8
backbone_depth = 3
backbone_layers = 2, 3
batch_size = 4
epochs = 2
warmup_steps = 2
segment_s = 0.5
corpus_speakers = 5
corpus_heldout = 2
corpus_utts = 4
corpus_utt_s = 0.8
corpus_trials = 10
"""


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, json.loads(out.out.strip().splitlines()[-1]), out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    assert main(["generate", str(root / "tiny.txt"), str(root / "corpus")]) == 0
    return root


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGenerate:
    def test_outputs(self, workspace, capsys, tmp_path):
        code, summary, _ = run(capsys, "generate", str(workspace / "tiny.txt"), str(tmp_path / "c"))
        assert code == 0
        assert (tmp_path / "c" / "train.txt").exists() and (tmp_path / "c" / "trials.txt").exists()
        assert summary["train_speakers"] == 3 and summary["heldout_speakers"] == 2
        assert summary["utterances"] == 20

    def test_same_seed_same_hash(self, workspace, capsys, tmp_path):
        hashes = []
        for d in ("a", "b"):
            code, summary, _ = run(capsys, "generate", str(workspace / "tiny.txt"), str(tmp_path / d))
            hashes.append(summary["corpus_hash"])
        assert hashes[0] == hashes[1]
        _, other, _ = run(capsys, "generate", str(workspace / "tiny.txt"), str(tmp_path / "c"), "--seed", "9")
        assert other["corpus_hash"] != hashes[0]

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable_directory(self, workspace, capsys, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir(mode=0o500)
        code, summary, err = run(capsys, "generate", str(workspace / "tiny.txt"), str(locked / "c"))
        assert code == 1 and "error" in summary

    def test_output_path_is_a_file(self, workspace, capsys, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, summary, err = run(capsys, "generate", str(workspace / "tiny.txt"), str(blocker / "c"))
        assert code == 1 and "error" in err

    def test_missing_config(self, capsys, tmp_path):
        code, summary, _ = run(capsys, "generate", str(tmp_path / "none.txt"), str(tmp_path / "c"))
        assert code == 1

    def test_bad_config_key(self, capsys, tmp_path):
        (tmp_path / "bad.txt").write_text("embed_dims = 4\n")
        code, summary, err = run(capsys, "generate", str(tmp_path / "bad.txt"), str(tmp_path / "c"))
        assert code == 1 and "embed_dims" in err


class TestTrainEvaluate:
    def test_baseline_has_no_extra_losses(self, workspace, capsys):
        out = workspace / "baseline"
        code, summary, _ = run(capsys, "train", str(workspace / "tiny.txt"),
                               str(workspace / "corpus" / "train.txt"), str(out), "--mode", "baseline")
        assert code == 0 and summary["mode"] == "baseline"
        rows = read_metrics(out / "metrics.jsonl")
        assert rows and all(r["l_syn"] == 0 and r["l_g"] == 0 for r in rows)

    def test_full_then_evaluate(self, workspace, capsys):
        out = workspace / "full"
        code, summary, _ = run(capsys, "train", str(workspace / "tiny.txt"),
                               str(workspace / "corpus" / "train.txt"), str(out), "--mode", "full")
        assert code == 0 and summary["epochs"] == 2
        ck = summary["checkpoint"]
        hashes = []
        for name in ("s1.txt", "s2.txt"):
            code, ev, _ = run(capsys, "evaluate", ck, str(workspace / "corpus" / "heldout.txt"),
                              str(workspace / "corpus" / "trials.txt"), "--scores", str(workspace / name))
            assert code == 0
            assert {"eer", "mindcf", "threshold", "n_trials"} <= set(ev)
            hashes.append(sha(workspace / name))
        assert hashes[0] == hashes[1]

    def test_missing_trial_id(self, workspace, capsys):
        code, summary, _ = run(capsys, "train", str(workspace / "tiny.txt"),
                               str(workspace / "corpus" / "train.txt"), str(workspace / "one"),
                               "--mode", "baseline", "--epochs", "1")
        trials = workspace / "bad_trials.txt"
        trials.write_text("1 spk0003-utt000 ghost-utt\n0 spk0003-utt000 spk0004-utt001\n")
        code, summary, err = run(capsys, "evaluate", summary["checkpoint"],
                                 str(workspace / "corpus" / "heldout.txt"), str(trials))
        assert code == 1 and "ghost-utt" in err

    def test_resume(self, workspace, capsys):
        manifest = str(workspace / "corpus" / "train.txt")
        cfg = str(workspace / "tiny.txt")
        run(capsys, "train", cfg, manifest, str(workspace / "r_full"), "--mode", "at")
        run(capsys, "train", cfg, manifest, str(workspace / "r_part"), "--mode", "at", "--stop-after-epoch", "1")
        code, summary, _ = run(capsys, "train", cfg, manifest, str(workspace / "r_part"), "--mode", "at",
                               "--resume", str(workspace / "r_part" / "checkpoints" / "epoch_001"))
        assert code == 0
        assert sha(workspace / "r_part" / "metrics.jsonl") == sha(workspace / "r_full" / "metrics.jsonl")

    def test_unknown_mode_is_usage_error(self, workspace, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", str(workspace / "tiny.txt"), "m", "o", "--mode", "everything"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err


class TestSelftest:
    def test_passes(self, capsys):
        code, summary, err = run(capsys, "selftest")
        assert code == 0 and summary["failed"] == []
        assert len(summary["properties"]) >= 10
        assert err.count("PASS") == len(summary["properties"])

    def test_fault_injection_names_midpoint(self, capsys, monkeypatch):
        monkeypatch.setattr(mixup, "_MIX_WEIGHT", mixup._MIX_WEIGHT)  # restored afterwards
        code, summary, err = run(capsys, "selftest", "--inject-fault", "mix-coeff")
        assert code == 1 and "midpoint" in summary["failed"]
        assert "FAIL midpoint" in err

    def test_hook_is_hidden(self, capsys):
        with pytest.raises(SystemExit):
            main(["selftest", "--help"])
        assert "inject" not in capsys.readouterr().out


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "caarma.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
    env = dict(os.environ, CAARMA_LOG_LEVEL="debug")
    proc = subprocess.run([sys.executable, "-m", "caarma.cli", "generate", str(tmp_path / "no.txt"),
                           str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode == 1
    assert json.loads(proc.stdout)["command"] == "generate"
