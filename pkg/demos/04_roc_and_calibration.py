"""ROC curves, trapezoid AUC and recall-band threshold calibration.

A threshold is chosen from pooled out-of-fold scores: among candidates whose
recall lies in [0.73, 0.87], the one with the best specificity.
"""
import numpy as np

from advpriv.data import SyntheticSpec, generate_synthetic, stratified_split
from advpriv.metrics import evaluate, roc_auc, stratified_kfold, to_text
from advpriv.models import Hyperparams, cv_threshold, train_base

# %% AUC on a hand example
auc, pts = roc_auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))
print("AUC", auc)
print("ROC points (fpr, tpr, threshold):")
print(pts)

# %% Folds dealt round-robin within each class
labels = np.array([1] * 33 + [0] * 67)
plan = stratified_kfold(labels, k=10, seed=0)
print("positives per fold:", [int(labels[te].sum()) for _, te in plan.folds()])

# %% Calibrate a Base model and report on TEST
train, test = stratified_split(generate_synthetic(SyntheticSpec(n_rows=2000, seed=0)), 0.2)
hp = Hyperparams(hidden=64, epochs=5, cv_folds=5)
thr = cv_threshold("base", train, hp, seed=0)
model = train_base(train, hp, seed=0)
m = evaluate(model.predict_proba(test.features), test.labels, thr)
print(to_text([(("Base",), m)], ("Model",), title="Base on TEST"))
