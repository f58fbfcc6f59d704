"""FGSM perturbations of the hidden representation during training.

Shows the sign perturbation on a small gradient, the clean and adversarial
losses of single training steps, and the degenerate settings (epsilon = 0
or alpha = 1) reproducing plain training bit for bit.
"""
import numpy as np

from advpriv.adversarial import FgsmConfig, fgsm_eta, fgsm_training_step
from advpriv.data import SyntheticSpec, generate_synthetic, stratified_split
from advpriv.metrics import auc_score
from advpriv.models import Hyperparams, train_adv_per, train_base
from advpriv.nn import Adam, dense_stack

print("eta for gradient [0.3, -0.2, 0.0] at eps 0.1:", fgsm_eta(np.array([0.3, -0.2, 0.0]), 0.1))

# %% One step at a time
rng = np.random.default_rng(0)
x = rng.normal(size=(64, 6))
y = (x[:, 0] > 0).astype(float)
stack = dense_stack(6, 16, seed=0)
opt = Adam.for_stacks([stack])
cfg = FgsmConfig(epsilon=0.1, alpha=0.5)
for step in range(5):
    res = fgsm_training_step(stack, x, y, cfg, opt)
    print(f"step {step}  clean {res.clean_loss:.4f}  adversarial {res.adversarial_loss:.4f}  max|eta| {np.abs(res.eta).max():.2f}")

# %% Degenerate settings match the Base trainer
ds = generate_synthetic(SyntheticSpec(n_rows=400, seed=1))
hp = Hyperparams(hidden=24, epochs=2)
base = train_base(ds, hp, seed=3)
for fgsm in (FgsmConfig(epsilon=0.0), FgsmConfig(epsilon=0.2, alpha=1.0)):
    per = train_adv_per(ds, hp, fgsm, seed=3, epochs=2)
    print(fgsm, "identical to Base:", np.array_equal(per.stack.flat_values, base.stack.flat_values))

# %% A regular ADV_per run
train, test = stratified_split(generate_synthetic(SyntheticSpec(n_rows=2000, seed=2)), 0.2)
per = train_adv_per(train, Hyperparams(hidden=64), FgsmConfig(epsilon=0.1, alpha=0.5), seed=0, epochs=6)
print(f"ADV_per test AUC {auc_score(per.predict_proba(test.features), test.labels):.3f}")
