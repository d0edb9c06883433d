"""Generate one shifted dataset, train TML and the selective pseudo-labeler,
and print what each phase did.

    python3 demos/quickstart.py
"""

from pseudopilot import DataConfig, RunConfig, run
from pseudopilot.experiment import bundle_for

bundle = bundle_for(DataConfig(), seed=0)
print(f"{bundle.K} classes, {len(bundle.Xs)} source, {len(bundle.Xt)} labeled target, "
      f"{bundle.n_unlabeled} unlabeled target samples")

for method in ("S+T", "TML", "TML_DQNPL"):
    result = run(RunConfig(method=method, seed=0), bundle)
    print(f"\n{method}: final accuracy {result.final_accuracy:.3f}")
    for p in result.phases:
        extra = ""
        if p.n_positive:
            extra = f"  |D_p|={p.n_positive} precision {p.pseudo_precision:.3f} (random {p.random_precision:.3f})"
        print(f"  {p.phase:<9} {p.accuracy:.3f}{extra}")
    for ep in result.episodes:
        print(f"  episode {ep['episode']}: {ep['length']} picks, rewards {ep['rewards']}")
