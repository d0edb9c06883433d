"""Why the selection loop trails plain TML on this benchmark.

Two effects, measured separately:
  1. more epochs of the same objective already lower TML accuracy;
  2. adding even correctly labeled, confident samples to the labeled target
     set can hurt, because the picks concentrate on a few easy classes.

    python3 demos/training_budget.py
"""

import numpy as np

from pseudopilot import DataConfig, RunConfig, evaluate, pretrain_base
from pseudopilot.experiment import Cell, bundle_for, run_cells
from pseudopilot.training import Trainer, _finetune, fit_tml_dqnpl

seeds = range(5)
for epochs in (6, 10, 14, 20):
    recs = run_cells([Cell(DataConfig(), RunConfig(method="TML", epochs=epochs, seed=s)) for s in seeds])
    print(f"TML, {epochs:>2} epochs: {np.mean([r['accuracy'] for r in recs]):.4f}")

cfg = RunConfig(method="TML_DQNPL", seed=12)
bundle = bundle_for(DataConfig(), cfg.seed)
truth = bundle.hidden_labels()
picked = fit_tml_dqnpl(cfg.replace(max_outer=1), bundle).positive
correct = [(i, c) for i, c in picked if truth[i] == c]
base = pretrain_base(cfg, bundle)
print(f"\nseed {cfg.seed}: {len(picked)} picks, classes {sorted(c for _, c in picked)}")
for name, positive in (("no picks", []), ("agent picks", picked), ("correct picks only", correct),
                       ("picks with true labels", [(i, int(truth[i])) for i, _ in picked])):
    model = base.clone()
    _finetune(cfg, bundle, model, positive, Trainer(cfg, cfg.seed, tag=1), cfg.n_retrain_epochs)
    print(f"  fine-tune with {name:<22} {evaluate(model, bundle):.4f}")
