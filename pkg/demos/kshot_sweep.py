"""Accuracy against labeled target samples per class, written as curve.csv.

    python3 demos/kshot_sweep.py out/sweep
"""

import sys

from pseudopilot import ExperimentSpec
from pseudopilot.experiment import cmd_sweep_kshot

out = sys.argv[1] if len(sys.argv) > 1 else "sweep"
spec = ExperimentSpec(methods=("S+T", "TML", "TML_DQNPL"), seeds=tuple(range(5)), k_shots=(1, 3, 5, 10))
cmd_sweep_kshot(spec, out)
with open(f"{out}/curve.csv") as fh:
    print(fh.read())
