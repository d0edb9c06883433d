"""All six methods over five seeds on the standard benchmark, as a table.

    python3 demos/compare_methods.py [--jobs N]
"""

import argparse
import tempfile
from pathlib import Path

from pseudopilot import METHODS, ExperimentSpec
from pseudopilot.experiment import cmd_run

ap = argparse.ArgumentParser()
ap.add_argument("--jobs", type=int, default=1)
args = ap.parse_args()

spec = ExperimentSpec(methods=METHODS, seeds=(0, 1, 2, 3, 4))
with tempfile.TemporaryDirectory() as tmp:
    cmd_run(spec, tmp, jobs=args.jobs)
    print((Path(tmp) / "summary.csv").read_text())
