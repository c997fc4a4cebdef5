"""
Tagging metrics
===============

ROC-AUC and PR-AUC per tag with macro and micro averages, plus thresholded
precision, recall and F-score.
"""

import numpy as np

from moodtheme.metrics import evaluate, pr_auc, roc_auc

# ties count one half in ROC-AUC
print(roc_auc([0.9, 0.4, 0.4, 0.1], [1, 1, 0, 0]))
# average precision uses step interpolation over descending thresholds
print(pr_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]))

rng = np.random.default_rng(0)
truth = (rng.uniform(size=(200, 6)) < 0.25).astype(int)
informative = np.clip(truth * 0.3 + rng.uniform(size=truth.shape) * 0.7, 0, 1)
noise = rng.uniform(size=truth.shape)

for name, scores in [("informative", informative), ("noise", noise)]:
    report = evaluate(scores, truth, threshold=0.5, tags=[f"tag{j}" for j in range(6)])
    print(f"\n{name}")
    print(report.to_text())
