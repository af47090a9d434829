"""Checkpoints, reports and the command line.

Everything the CLI does is reachable from Python; ``dfpo.cli.main`` takes the
same argument list as the ``dfpo`` console script.
"""
import tempfile
from pathlib import Path

import numpy as np

from dfpo.checkpoint import load_checkpoint, save_checkpoint
from dfpo.cli import main
from dfpo.diffcore import ScoreNet
from dfpo.evalharness import import_report

root = Path(__file__).resolve().parents[1]
out = Path(tempfile.mkdtemp())

net = ScoreNet.init([4, 8, 1], 0)
path = save_checkpoint(out / "toy.dfpo", net, {"note": "toy"}, stage=0)
back, header = load_checkpoint(path)
print("bitwise round trip:", np.array_equal(back.flat_params(), net.flat_params()), header["shapes"])

# a two-stage smoke run, then a 50-episode evaluation
main(["train", "--config", str(root / "configs" / "quadratic_smoke.ini"), "--out", str(out / "smoke")])
main(["eval", "--ckpt", str(out / "smoke" / "final.dfpo"), "--episodes", "50", "--seed", "1"])
rep = import_report(out / "smoke" / "eval_seed1.csv")
print("reloaded report: %d episodes, mean %.4f" % (len(rep.terminal_costs), rep.mean))

# a flipped byte is caught by the checksum, exit code 3
raw = bytearray(path.read_bytes())
raw[-3] ^= 0x10
path.write_bytes(bytes(raw))
print("corrupt checkpoint exit code:", main(["eval", "--ckpt", str(path)]))

main(["diagnose", "--mode", "oracle"])
print((out / "smoke" / "stages.csv").read_text())
