"""The command-line workflow on a small configuration.

Runs gen-data, train, attack, crosstest and external into a temporary
directory, reruns training from its manifest and compares the two manifests.
The same steps from a shell:

    advpriv default-config > my.ini
    advpriv gen-data --config my.ini
    advpriv train --config my.ini --threads 2
    advpriv attack --config my.ini
    advpriv crosstest --config my.ini
    advpriv external --config my.ini
    advpriv report --config my.ini
"""
import tempfile
from pathlib import Path

from advpriv.cli import main

CONFIG = """[data]
n_rows = 2000
holdout_rows = 1000
[hyperparams]
hidden = 32
disc_hidden = 32
epochs = 8
epochs_per = 8
cv_folds = 3
[protocol]
seeds = 0
"""

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    cfg = tmp / "demo.ini"
    cfg.write_text(CONFIG)
    out = tmp / "run"
    for cmd in ("gen-data", "train", "attack", "crosstest", "external"):
        print(f"$ advpriv {cmd}")
        code = main([cmd, "--config", str(cfg), "--out", str(out)])
        print(f"exit {code}\n")

    print("$ advpriv train --manifest run/manifests/train.json --out rerun")
    main(["train", "--manifest", str(out / "manifests/train.json"), "--out", str(tmp / "rerun")])
    code = main(["report", "--compare", str(out / "manifests/train.json"), str(tmp / "rerun/manifests/train.json")])
    print("manifests agree" if code == 0 else "manifests differ")
    print(sorted(p.name for p in (out / "reports").iterdir()))
