"""Train SS-VTCN on the synthetic corpus with 20% labels and score the test split."""

import numpy as np

from ssvtcn.data import CLASS_NAMES, SynthConfig, synth_generate
from ssvtcn.evaluation import evaluate
from ssvtcn.pipeline import PipelineSettings, prepare, train_and_detect

settings = PipelineSettings(labeled_fraction=0.2)
prepared = prepare(synth_generate(SynthConfig()), settings)
print(f"labeled {len(prepared.labeled_labels)}, unlabeled {len(prepared.unlabeled_windows)}, "
      f"test {len(prepared.test_labels)}")

run = train_and_detect(prepared, settings, seed=0)
for rec in run.history.epochs:
    print(f"epoch {rec.epoch}: total {rec.total:.4f}  pseudo-label changes {rec.pseudo_changes}")

truth = prepared.test_labels
final = np.array([r.final for r in run.results])
prelim = np.array([r.preliminary for r in run.results])
print("\nwith rectification")
print(evaluate(truth, final, 4).to_table(CLASS_NAMES))
print("\nclassifier alone")
print(evaluate(truth, prelim, 4).to_table(CLASS_NAMES))
print(f"\n{sum(r.rectified for r in run.results)} of {len(run.results)} verdicts were rectified")
