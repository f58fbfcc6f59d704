"""Attribute inference attacks on raw features and learned representations.

An attacker with the Base architecture learns each protected attribute from
raw features, then from the Base encoder output. The same Base-encoder
attacker is then pointed at the ADV and ADV_per encoders.
"""
from advpriv.attack import STAGES, leakage_verdict, run_attack_pipeline
from advpriv.data import SyntheticSpec, generate_synthetic, stratified_split
from advpriv.models import Hyperparams, fit_calibrated

ds = generate_synthetic(SyntheticSpec(n_rows=4000, seed=0))
train, test = stratified_split(ds, 0.2, seed=0)
hp = Hyperparams(hidden=64, disc_hidden=64, epochs=6, epochs_per=6, cv_folds=3)

models = {k: fit_calibrated(k, train, hp, seed=0, calibrate="train") for k in ("base", "adv", "adv_per")}
res = run_attack_pipeline(train, test, models["base"], models["adv"], models["adv_per"], hp, seed=0, calibrate="train")

print(res.baselines_text())
for stage in STAGES:
    print(res.stage_text(stage))
    for r in res.reports[stage]:
        print(f"  {r.attribute:10s} {leakage_verdict(r)}")
    print()
