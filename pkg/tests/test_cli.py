import json
import struct

import numpy as np
import pytest

from dfpo.checkpoint import (
    MAGIC,
    CheckpointError,
    ShapeMismatchError,
    checkpoint_roundtrip,
    load_checkpoint,
    save_checkpoint,
)
from dfpo.cli import main
from dfpo.config import load_config, parse_config
from dfpo.diffcore import ScoreNet
from dfpo.environments import ConfigError

from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = str(CONFIGS / "quadratic_smoke.ini")


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["train", "--config", SMOKE, "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_missing_field_named(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[env]\nkind = quadratic\nd_S = 2\ndt = 0.1\n[schedule]\nmode = budget\ntotal = 10\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "env.H" in capsys.readouterr().err

    def test_missing_kind(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"env.H": "3"})
        assert "env.kind" in exc.value.fields

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"env.kind": "surface", "env.colour": "red"})
        assert "env.colour" in exc.value.fields

    def test_surface_defaults_echoed(self):
        echo = load_config(CONFIGS / "surface.ini").echo()
        assert int(echo["schedule.total"]) == 5000 and int(echo["env.H"]) == 20 and float(echo["env.dt"]) == 0.01
        assert float(echo["optimizer.lr"]) == 1e-3 and int(echo["optimizer.batch"]) == 32
        assert parse_config(echo).echo() == echo

    def test_override(self):
        cfg = load_config(SMOKE, ["env.H=4", "schedule.total=9"])
        assert cfg.env.H == 4 and cfg.schedule.N == [3, 3, 3]

    def test_missing_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini")]) in (1, 2)


class TestTrainEval:
    def test_outputs(self, smoke_run):
        for name in ("config.json", "stages.csv", "episodes.csv", "stage_01.dfpo", "stage_02.dfpo",
                     "final.dfpo", "memory.npz"):
            assert (smoke_run / name).exists(), name
        stages = (smoke_run / "stages.csv").read_text().splitlines()
        assert len(stages) == 3 and stages[0].startswith("stage,n_starts")
        assert len((smoke_run / "episodes.csv").read_text().splitlines()) == 31

    def test_final_checkpoint_reloads(self, smoke_run):
        net, header = load_checkpoint(smoke_run / "final.dfpo")
        assert header["config"]["env.kind"] == "quadratic" and header["stage"] == 2
        assert net.input_dim == 4

    def test_eval_reproducible(self, smoke_run, tmp_path):
        ckpt = str(smoke_run / "final.dfpo")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["eval", "--ckpt", ckpt, "--episodes", "20", "--seed", "3", "--out", str(a)]) == 0
        assert main(["eval", "--ckpt", ckpt, "--episodes", "20", "--seed", "3", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 21

    def test_eval_default_path(self, smoke_run):
        assert main(["eval", "--ckpt", str(smoke_run / "final.dfpo"), "--episodes", "2", "--seed", "7"]) == 0
        assert (smoke_run / "eval_seed7.csv").exists()

    def test_eval_zero_episodes(self, smoke_run):
        assert main(["eval", "--ckpt", str(smoke_run / "final.dfpo"), "--episodes", "0"]) == 2

    def test_resume(self, tmp_path):
        out = tmp_path / "r"
        assert main(["train", "--config", SMOKE, "--out", str(out)]) == 0
        full = load_checkpoint(out / "final.dfpo")[0].flat_params()
        # pretend the run stopped after stage 1
        (out / "final.dfpo").unlink()
        net, _ = load_checkpoint(out / "stage_01.dfpo")
        with np.load(out / "memory.npz") as z:
            keep = z["stage"] == 1
            np.savez(out / "memory.npz", **{k: z[k][keep] for k in ("x", "y", "provenance", "stage")},
                     last_stage=np.int64(1))
        assert main(["train", "--config", SMOKE, "--out", str(out), "--resume"]) == 0
        assert np.array_equal(load_checkpoint(out / "final.dfpo")[0].flat_params(), full)

    def test_resume_config_mismatch(self, smoke_run):
        assert main(["train", "--config", SMOKE, "--out", str(smoke_run), "--resume", "--set", "net.hidden=8"]) == 2


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = ScoreNet.init([4, 7, 5, 1], 0, activation="softplus")
        back = checkpoint_roundtrip(net, tmp_path / "n.dfpo")
        assert np.array_equal(back.flat_params(), net.flat_params()) and back.activation == "softplus"

    def test_corrupt_checksum(self, smoke_run, tmp_path):
        data = bytearray((smoke_run / "final.dfpo").read_bytes())
        data[-1] ^= 0xFF
        bad = tmp_path / "bad.dfpo"
        bad.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
        assert main(["eval", "--ckpt", str(bad)]) == 3

    def test_flipped_parameter(self, tmp_path):
        path = save_checkpoint(tmp_path / "n.dfpo", ScoreNet.init([2, 3, 1], 0))
        data = bytearray(path.read_bytes())
        data[-12] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, smoke_run, tmp_path):
        bad = tmp_path / "t.dfpo"
        bad.write_bytes((smoke_run / "final.dfpo").read_bytes()[:-20])
        assert main(["eval", "--ckpt", str(bad)]) == 3

    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "m.dfpo"
        bad.write_bytes(b"NOTIT\n" + b"\0" * 40)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_shape_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "n.dfpo", ScoreNet.init([2, 3, 1], 0))
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
        start = len(MAGIC) + 8
        header = json.loads(raw[start:start + hlen])
        header["shapes"][0] = [2, 4]
        hb = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + raw[start + hlen:])
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = save_checkpoint(tmp_path / "n.dfpo", ScoreNet.init([2, 3, 1], 0))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file_exits_3_or_1(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "none.dfpo")]) in (1, 3)


class TestDiagnose:
    def test_pointwise_needs_ckpt(self):
        assert main(["diagnose", "--mode", "pointwise"]) == 2

    def test_regret_needs_config(self):
        assert main(["diagnose", "--mode", "regret"]) == 2

    def test_gradcheck(self, capsys):
        assert main(["diagnose", "--mode", "gradcheck", "--nets", "10", "--inputs", "10"]) == 0
        assert "[ok]" in capsys.readouterr().out

    def test_gradcheck_threshold_violation(self):
        assert main(["diagnose", "--mode", "gradcheck", "--nets", "3", "--inputs", "3", "--threshold", "0"]) == 4

    def test_oracle(self, capsys):
        assert main(["diagnose", "--mode", "oracle"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_pointwise_on_smoke(self, smoke_run, capsys):
        code = main(["diagnose", "--mode", "pointwise", "--ckpt", str(smoke_run / "final.dfpo")])
        assert code in (0, 4)
        assert "j=3" in capsys.readouterr().out

    def test_regret_on_smoke(self, capsys):
        code = main(["diagnose", "--mode", "regret", "--config", SMOKE, "--seeds", "2"])
        assert code in (0, 4)
        assert "mean regret exponent" in capsys.readouterr().out

    def test_bad_mode(self):
        assert main(["diagnose", "--mode", "nope"]) == 2
