"""
Experiment driver: ``advpriv {gen-data,train,attack,crosstest,external,report}``.

Everything a command produces lives under the output directory::

    data/       train.csv, test.csv, holdout_<NAME>.csv, spec.json
    models/     <kind>_seed<N>.model
    logs/       <kind>_seed<N>.log   (per-epoch training table)
    reports/    <table>.csv and <table>.txt
    manifests/  <command>.json

A manifest holds the config snapshot, seeds, input file hashes and every
reported number, so ``--manifest PATH`` reruns a command exactly.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import attack as _attack
from . import crosstest as _crosstest
from . import data as _data
from . import models as _models
from ._io import atomic_write_text
from .adversarial import FgsmConfig
from .errors import AdvPrivError, CalibrationError, ConfigError, IntegrityError, MissingArtifactError
from .metrics import MetricSet, evaluate, median_of_runs, to_csv, to_text

log = logging.getLogger("advpriv")

EXIT_OK = 0
TRAIN_COLUMNS = ("Model",)
MODEL_LABELS = {"base": "Base", "adv": "ADV", "adv_per": "ADV_per"}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataConfig:
    """Where the data comes from: CSV files or the synthetic generator."""

    train_csv: str = ""
    test_csv: str = ""
    holdout_csvs: tuple = ()  # (name, path) pairs
    balance_prevalence: float | None = None
    n_rows: int = 10000
    prevalence: float = 0.5
    attr_priors: tuple = _data.MAJORITY_PRIORS
    leakage_strength: tuple = (1.0, 1.0, 1.0)
    label_signal: float = 0.65
    missing_rate: float = 0.0
    data_seed: int = 0
    test_fraction: float = 0.2
    holdout_rows: int = 4000

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.n_rows < 1 or self.holdout_rows < 1:
            raise ConfigError("row counts must be positive")
        if self.balance_prevalence is not None and not 0.0 < self.balance_prevalence < 1.0:
            raise ConfigError("balance_prevalence must lie in (0, 1)")

    def synthetic_spec(self, n_rows=None, prevalence=None, seed=None) -> _data.SyntheticSpec:
        try:
            return _data.SyntheticSpec(
                n_rows=self.n_rows if n_rows is None else n_rows,
                prevalence=self.prevalence if prevalence is None else prevalence,
                attr_priors=tuple(self.attr_priors),
                leakage_strength=tuple(self.leakage_strength),
                label_signal=self.label_signal,
                seed=self.data_seed if seed is None else seed,
                missing_rate=self.missing_rate,
            )
        except AdvPrivError as e:
            raise ConfigError(f"[data] {e}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    kinds: tuple = _models.MODEL_KINDS
    hp: _models.Hyperparams = _models.Hyperparams()
    fgsm: FgsmConfig = FgsmConfig()
    seeds: tuple = (0, 1, 2)
    calibrate: str = "cv"
    attack_calibrate: str = "cv"
    crosstest_calibrate: str = "cv"
    out: str = "runs"

    def __post_init__(self):
        for k in self.kinds:
            if k not in _models.MODEL_KINDS:
                raise ConfigError(f"unknown model kind {k!r}; expected one of {_models.MODEL_KINDS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        for name in ("calibrate", "attack_calibrate", "crosstest_calibrate"):
            if getattr(self, name) not in _models.CALIBRATION_MODES:
                raise ConfigError(f"{name} must be one of {_models.CALIBRATION_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["hp"] = self.hp.to_dict()
        d["data"]["holdout_csvs"] = [list(p) for p in self.data.holdout_csvs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        dd = dict(d.pop("data"))
        dd["holdout_csvs"] = tuple(tuple(p) for p in dd.get("holdout_csvs", ()))
        for k in ("attr_priors", "leakage_strength"):
            dd[k] = tuple(dd[k])
        return cls(
            data=DataConfig(**dd),
            hp=_models.Hyperparams.from_dict(d.pop("hp")),
            fgsm=FgsmConfig(**d.pop("fgsm")),
            kinds=tuple(d.pop("kinds")),
            seeds=tuple(d.pop("seeds")),
            **d,
        )


# INI value parsers
def _items(s):
    """Split a list value on commas and/or whitespace."""
    return s.replace(",", " ").split()


def _floats(s):
    return tuple(float(v) for v in _items(s))


def _ints(s):
    return tuple(int(v) for v in _items(s))


def _words(s):
    return tuple(_items(s))


def _opt_float(s):
    return None if s.strip() == "" else float(s)


def _opt_int(s):
    return None if s.strip() == "" else int(s)


def _pairs(s):
    out = []
    for item in (v.strip() for v in s.split(",") if v.strip()):
        name, sep, path = item.partition("=")
        if not sep:
            raise ValueError(f"expected NAME=PATH, got {item!r}")
        out.append((name.strip(), path.strip()))
    return tuple(out)


_DATA_KEYS = {
    "train_csv": str, "test_csv": str, "holdout_csvs": _pairs, "balance_prevalence": _opt_float,
    "n_rows": int, "prevalence": float, "attr_priors": _floats, "leakage_strength": _floats,
    "label_signal": float, "missing_rate": float, "data_seed": int, "test_fraction": float, "holdout_rows": int,
}
_HP_KEYS = {
    "lr": float, "lam": float, "batch_size": int, "hidden": int, "disc_hidden": int, "dropout": float,
    "epochs": int, "epochs_per": int, "n_hidden": int, "cv_folds": int, "log_fraction": float,
}
_FGSM_KEYS = {"epsilon": float, "alpha": float, "intercept_layer": _opt_int, "target": str}


def _section(cp, name, keys):
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}; expected one of {sorted(keys)}")
        try:
            out[key] = keys[key](raw)
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: {e}") from None
    return out


_SECTIONS = ("data", "model", "hyperparams", "fgsm", "protocol", "attack", "crosstest", "run")


def load_config(path) -> ExperimentConfig:
    """Read an INI config; missing keys keep their defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    for s in cp.sections():
        if s not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{s}]; expected one of {_SECTIONS}")
    return config_from_parser(cp)


def config_from_parser(cp) -> ExperimentConfig:
    try:
        data = DataConfig(**_section(cp, "data", _DATA_KEYS))
        proto = _section(cp, "protocol", {"recall_band": _floats, "seeds": _ints, "calibrate": str})
        hp_kw = _section(cp, "hyperparams", _HP_KEYS)
        if "recall_band" in proto:
            if len(proto["recall_band"]) != 2:
                raise ConfigError("[protocol] recall_band needs two values")
            hp_kw["recall_band"] = proto["recall_band"]
        hp = _models.Hyperparams(**hp_kw)
        fgsm = FgsmConfig(**_section(cp, "fgsm", _FGSM_KEYS))
    except ConfigError:
        raise
    except (AdvPrivError, TypeError) as e:
        raise ConfigError(str(e)) from None
    kw = {}
    model = _section(cp, "model", {"kinds": _words})
    if "kinds" in model:
        kw["kinds"] = model["kinds"]
    if "seeds" in proto:
        kw["seeds"] = proto["seeds"]
    if "calibrate" in proto:
        kw["calibrate"] = proto["calibrate"]
    for sec, key in (("attack", "attack_calibrate"), ("crosstest", "crosstest_calibrate")):
        s = _section(cp, sec, {"calibrate": str})
        if "calibrate" in s:
            kw[key] = s["calibrate"]
    run = _section(cp, "run", {"out": str})
    if "out" in run:
        kw["out"] = run["out"]
    return ExperimentConfig(data=data, hp=hp, fgsm=fgsm, **kw)


def default_config_text() -> str:
    """A config file listing every key with its default value."""
    cfg = ExperimentConfig()
    d, hp, fg = cfg.data, cfg.hp, cfg.fgsm

    def j(v):
        return ", ".join(str(x) for x in v)

    return f"""[data]
# leave the csv paths empty to use the files written by gen-data
train_csv =
test_csv =
holdout_csvs =
balance_prevalence =
n_rows = {d.n_rows}
prevalence = {d.prevalence}
attr_priors = {j(d.attr_priors)}
leakage_strength = {j(d.leakage_strength)}
label_signal = {d.label_signal}
missing_rate = {d.missing_rate}
data_seed = {d.data_seed}
test_fraction = {d.test_fraction}
holdout_rows = {d.holdout_rows}

[model]
kinds = {j(cfg.kinds)}

[hyperparams]
lr = {hp.lr}
lam = {hp.lam}
batch_size = {hp.batch_size}
hidden = {hp.hidden}
disc_hidden = {hp.disc_hidden}
dropout = {hp.dropout}
epochs = {hp.epochs}
epochs_per = {hp.epochs_per}
n_hidden = {hp.n_hidden}
cv_folds = {hp.cv_folds}
log_fraction = {hp.log_fraction}

[fgsm]
epsilon = {fg.epsilon}
alpha = {fg.alpha}
intercept_layer =
target = {fg.target}

[protocol]
recall_band = {j(hp.recall_band)}
seeds = {j(cfg.seeds)}
calibrate = {cfg.calibrate}

[attack]
calibrate = {cfg.attack_calibrate}

[crosstest]
calibrate = {cfg.crosstest_calibrate}

[run]
out = {cfg.out}
"""


# ---------------------------------------------------------------------------
# manifests and files


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _utc_now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunManifest:
    """Everything needed to rerun a command and every number it reported.

    ``timing`` is the only field allowed to differ between reruns.
    """

    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    runs: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    version: str = __version__

    def save(self, path):
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise MissingArtifactError(f"manifest {path} not found") from None
        except json.JSONDecodeError as e:
            raise IntegrityError(f"{path}: not a valid manifest ({e})") from None
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def numeric_view(self):
        """The reproducible part: all of the manifest but timing and output locations."""
        d = asdict(self)
        d.pop("timing")
        d.pop("artifacts")
        d["config"] = {k: v for k, v in d["config"].items() if k != "out"}
        for r in d["runs"]:
            r.pop("model_path", None)
        return d


def metrics_to_dict(m: MetricSet):
    return asdict(m)


def metrics_from_dict(d) -> MetricSet:
    return MetricSet(**d)


def _aggregate(metric_sets):
    """Median of runs; fewer than three runs fall back to the elementwise median."""
    runs = list(metric_sets)
    if len(runs) >= 3:
        return median_of_runs(runs)
    table = np.array([m.values() for m in runs], dtype=np.float64)
    return MetricSet(*np.median(table, axis=0).tolist())


class Layout:
    def __init__(self, out):
        self.root = Path(out)

    def data(self, name):
        return self.root / "data" / name

    def model(self, kind, seed):
        return self.root / "models" / f"{kind}_seed{seed}.model"

    def log(self, kind, seed):
        return self.root / "logs" / f"{kind}_seed{seed}.log"

    def report(self, name):
        return self.root / "reports" / name

    def manifest(self, command):
        return self.root / "manifests" / f"{command}.json"


def _write_report(layout, name, csv_text, txt):
    paths = {}
    for ext, content in (("csv", csv_text), ("txt", txt)):
        p = layout.report(f"{name}.{ext}")
        atomic_write_text(p, content)
        paths[ext] = str(p)
    return paths


# ---------------------------------------------------------------------------
# data resolution


def _input_entry(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"data file {path} not found (run gen-data or set it in [data])")
    return {"path": str(path.resolve()), "sha256": sha256_file(path)}


def resolve_inputs(cfg: ExperimentConfig, layout: Layout, need_holdouts=False):
    """Data files for a command: configured CSV paths, else gen-data output."""
    d = cfg.data
    inputs = {
        "train": _input_entry(d.train_csv or layout.data("train.csv")),
        "test": _input_entry(d.test_csv or layout.data("test.csv")),
    }
    holdouts = d.holdout_csvs or tuple((n, layout.data(f"holdout_{n}.csv")) for n in _data.EXTERNAL_PREVALENCE)
    for name, path in holdouts:
        if need_holdouts or Path(path).is_file():
            inputs[f"holdout:{name}"] = _input_entry(path)
    return inputs


def _load_input(entry):
    path = entry["path"]
    if not Path(path).is_file():
        raise MissingArtifactError(f"data file {path} not found")
    if sha256_file(path) != entry["sha256"]:
        raise IntegrityError(f"{path} changed since the manifest was written")
    return _data.load_csv(path)


def _load_train(cfg, entry):
    ds = _load_input(entry)
    if cfg.data.balance_prevalence is not None:
        ds = _data.subsample_balance(ds, cfg.data.balance_prevalence, seed=cfg.data.data_seed)
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out) -> dict:
    """Synthetic TRAIN/TEST (label-stratified split) plus external-style holdouts."""
    layout = Layout(out)
    spec = cfg.data.synthetic_spec()
    full = _data.generate_synthetic(spec)
    train, test = _data.stratified_split(full, cfg.data.test_fraction, seed=cfg.data.data_seed)
    files = {"train": train, "test": test}
    holdouts = {}
    for i, (name, prev) in enumerate(_data.EXTERNAL_PREVALENCE.items()):
        hseed = int(np.random.SeedSequence([cfg.data.data_seed, 503, i]).generate_state(1)[0])
        hspec = cfg.data.synthetic_spec(n_rows=cfg.data.holdout_rows, prevalence=prev, seed=hseed)
        files[f"holdout_{name}"] = _data.generate_synthetic(hspec)
        holdouts[name] = {"prevalence_target": prev, "seed": hseed}

    echo = {"spec": _spec_dict(spec), "test_fraction": cfg.data.test_fraction, "files": {}, "holdouts": holdouts}
    for name, ds in files.items():
        path = layout.data(f"{name}.csv")
        _data.write_csv(ds, path)
        echo["files"][name] = {
            "path": str(path), "sha256": sha256_file(path), "rows": len(ds), "prevalence": ds.prevalence,
        }
    atomic_write_text(layout.data("spec.json"), json.dumps(echo, indent=2, sort_keys=True) + "\n")
    for name, info in echo["files"].items():
        print(f"{name:16s} {info['rows']:7d} rows  prevalence {info['prevalence']:.4f}  -> {info['path']}")
    return echo


def _spec_dict(spec):
    d = asdict(spec)
    d["leakage_features"] = {k: [list(p) for p in v] for k, v in d["leakage_features"].items()}
    d["signal_features"] = [list(p) for p in d["signal_features"]]
    return d


def format_history(history, attributes=_data.ATTRIBUTES) -> str:
    """Per-epoch training table: epoch, loss, main_acc and one column per discriminator."""
    cols = ["epoch", "loss", "main_acc"] + [f"disc_acc_{a}" for a in attributes]
    lines = ["  ".join(f"{c:>16s}" if i else f"{c:>5s}" for i, c in enumerate(cols))]
    for h in history:
        discs = list(h.disc_acc) + [None] * (len(attributes) - len(h.disc_acc))
        cells = [f"{h.epoch:5d}", f"{h.loss:16.6f}", f"{h.main_acc:16.4f}"]
        cells += [f"{'-':>16s}" if v is None else f"{v:16.4f}" for v in discs]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def _train_one(args):
    """One (kind, seed) run: threshold, full fit, TEST metrics. Runs in a worker."""
    cfg, kind, seed, inputs, out = args
    layout = Layout(out)
    t0 = time.time()
    train = _load_train(cfg, inputs["train"])
    test = _load_input(inputs["test"])
    entry = {"kind": kind, "seed": seed}
    try:
        model = _models.fit_calibrated(kind, train, cfg.hp, seed, cfg.fgsm, calibrate=cfg.calibrate)
    except CalibrationError as e:
        entry["error"] = f"calibration failed: {e}"
        entry["exit_code"] = e.exit_code
        return entry, time.time() - t0
    path = layout.model(kind, seed)
    model.save(path)
    atomic_write_text(layout.log(kind, seed), format_history(model.history))
    m = evaluate(model.predict_proba(test.features), test.labels, model.threshold)
    entry.update(
        threshold=model.threshold, metrics=metrics_to_dict(m), model_path=str(path), model_sha256=sha256_file(path),
        final_epoch=asdict(model.history[-1]) if model.history else None,
    )
    return entry, time.time() - t0


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _start(command, cfg, inputs):
    return RunManifest(
        command=command, config=cfg.to_dict(), seeds=list(cfg.seeds), inputs=inputs,
        timing={"started_utc": _utc_now()},
    )


def _finish(manifest, layout):
    manifest.timing["finished_utc"] = _utc_now()
    path = layout.manifest(manifest.command)
    manifest.save(path)
    return path


def cmd_train(cfg: ExperimentConfig, out, threads=1, inputs=None) -> RunManifest:
    """Per model kind and seed: calibrate, fit on TRAIN, score TEST; report medians."""
    layout = Layout(out)
    inputs = inputs or resolve_inputs(cfg, layout)
    manifest = _start("train", cfg, inputs)
    jobs = [(cfg, kind, seed, inputs, str(out)) for kind in cfg.kinds for seed in cfg.seeds]
    for entry, elapsed in _pmap(_train_one, jobs, threads):
        manifest.timing[f"{entry['kind']}_seed{entry['seed']}_s"] = round(elapsed, 3)
        if "error" in entry:
            manifest.errors.append(entry)
            print(f"{entry['kind']} seed {entry['seed']}: {entry['error']}", file=sys.stderr)
            continue
        manifest.artifacts[f"{entry['kind']}_seed{entry['seed']}"] = entry["model_path"]
        manifest.runs.append(entry)

    rows = []
    for kind in cfg.kinds:
        runs = [metrics_from_dict(r["metrics"]) for r in manifest.runs if r["kind"] == kind]
        if runs:
            agg = _aggregate(runs)
            manifest.aggregate[kind] = metrics_to_dict(agg)
            rows.append(((MODEL_LABELS[kind],), agg))
    if rows:
        title = f"TEST results, median of {len(cfg.seeds)} run(s)"
        manifest.artifacts["report"] = _write_report(
            layout, "train", to_csv(rows, TRAIN_COLUMNS), to_text(rows, TRAIN_COLUMNS, title=title)
        )
        print(to_text(rows, TRAIN_COLUMNS, title=title), end="")
    _finish(manifest, layout)
    if manifest.errors:
        raise CalibrationError(f"{len(manifest.errors)} run(s) failed calibration; partial manifest written")
    return manifest


def _train_manifest(layout):
    return RunManifest.load(layout.manifest("train"))


def _model_entry(train_manifest, kind, seed):
    for r in train_manifest.runs:
        if r["kind"] == kind and r["seed"] == seed:
            path = r["model_path"]
            if not Path(path).is_file():
                raise MissingArtifactError(f"{kind} model for seed {seed} not found at {path}")
            return r
    raise MissingArtifactError(f"no {kind} model for seed {seed} in the train manifest (run train first)")


def _load_checked(entry):
    if sha256_file(entry["model_path"]) != entry["model_sha256"]:
        raise IntegrityError(f"{entry['model_path']} changed since training")
    return _models.load_model(entry["model_path"])


def _attack_one(args):
    cfg, seed, inputs, entries = args
    train = _load_train(cfg, inputs["train"])
    test = _load_input(inputs["test"])
    models = {k: _load_checked(e) for k, e in entries.items()}
    res = _attack.run_attack_pipeline(
        train, test, models["base"], models["adv"], models["adv_per"], cfg.hp, seed, calibrate=cfg.attack_calibrate
    )
    out = {"seed": seed, "stages": {}, "thresholds": {}, "baselines": [list(b) for b in res.baselines]}
    for stage, reports in res.reports.items():
        out["stages"][stage] = {r.attribute: metrics_to_dict(r.metrics) for r in reports}
    for (trained_on, attr), atk in res.attackers.items():
        out["thresholds"][f"{trained_on}:{attr}"] = atk.threshold
    out["verdicts"] = {
        stage: {r.attribute: _attack.leakage_verdict(r) for r in reports} for stage, reports in res.reports.items()
    }
    return out


def cmd_attack(cfg: ExperimentConfig, out, threads=1, inputs=None) -> RunManifest:
    """Three-stage attack for every seed; tables of per-attribute medians."""
    layout = Layout(out)
    tm = _train_manifest(layout)
    inputs = inputs or tm.inputs
    entries = {s: {k: _model_entry(tm, k, s) for k in _models.MODEL_KINDS} for s in cfg.seeds}
    manifest = _start("attack", cfg, inputs)
    t0 = time.time()
    manifest.runs = _pmap(_attack_one, [(cfg, s, inputs, entries[s]) for s in cfg.seeds], threads)
    manifest.timing["attack_s"] = round(time.time() - t0, 3)

    for stage in _attack.STAGES:
        rows = []
        manifest.aggregate[stage] = {}
        for attr in _data.ATTRIBUTES:
            agg = _aggregate(metrics_from_dict(r["stages"][stage][attr]) for r in manifest.runs)
            manifest.aggregate[stage][attr] = metrics_to_dict(agg)
            rows.append(((attr.capitalize(),), agg))
        lead = (_attack.ATTACK_LEAD_COLUMN,)
        manifest.artifacts[f"attack_{stage}"] = _write_report(
            layout, f"attack_{stage}", to_csv(rows, lead, with_threshold=False),
            to_text(rows, lead, with_threshold=False, title=_attack.STAGE_TITLES[stage]),
        )
    # majority baselines do not depend on the seed
    baselines = _attack.AttackResults(reports={}, baselines=[tuple(b) for b in manifest.runs[0]["baselines"]])
    manifest.aggregate["baselines"] = manifest.runs[0]["baselines"]
    manifest.artifacts["attack_baselines"] = _write_report(
        layout, "attack_baselines", baselines.baselines_csv(), baselines.baselines_text()
    )
    _finish(manifest, layout)
    for stage in _attack.STAGES:
        print(Path(manifest.artifacts[f"attack_{stage}"]["txt"]).read_text(), end="\n")
    print(baselines.baselines_text(), end="")
    return manifest


def _crosstest_one(args):
    cfg, seed, inputs = args
    pool = _data.concat(_load_train(cfg, inputs["train"]), _load_input(inputs["test"]))
    results = _crosstest.run_all(pool, cfg.hp, seed, kinds=("base", "adv"), calibrate=cfg.crosstest_calibrate)
    return {
        "seed": seed,
        "cases": {r.case.label: {k: metrics_to_dict(m) for k, m in r.metrics.items()} for r in results},
    }


def cmd_crosstest(cfg: ExperimentConfig, out, threads=1, inputs=None) -> RunManifest:
    """Six subgroup cross-tests for Base and ADV; 12-row report of medians."""
    layout = Layout(out)
    tm = _train_manifest(layout)
    # fail fast: both reference models must exist before any training starts
    for s in cfg.seeds:
        for kind in ("base", "adv"):
            _model_entry(tm, kind, s)
    inputs = inputs or tm.inputs
    manifest = _start("crosstest", cfg, inputs)
    t0 = time.time()
    manifest.runs = _pmap(_crosstest_one, [(cfg, s, inputs) for s in cfg.seeds], threads)
    manifest.timing["crosstest_s"] = round(time.time() - t0, 3)

    results = []
    for case in _crosstest.CASES:
        metrics = {
            k: _aggregate(metrics_from_dict(r["cases"][case.label][k]) for r in manifest.runs) for k in ("base", "adv")
        }
        results.append(_crosstest.CrossTestResult(case, metrics))
        manifest.aggregate[case.label] = {k: metrics_to_dict(m) for k, m in metrics.items()}
    deltas, worst = _crosstest.generalizability_gap(results)
    manifest.aggregate["auc_delta_adv_minus_base"] = deltas
    manifest.aggregate["max_abs_auc_delta"] = worst
    manifest.artifacts["crosstest"] = _write_report(
        layout, "crosstest", _crosstest.crosstest_csv(results), _crosstest.crosstest_text(results)
    )
    _finish(manifest, layout)
    print(_crosstest.crosstest_text(results), end="")
    print(f"max |AUC(ADV) - AUC(Base)| = {worst:.4f}")
    return manifest


def cmd_external(cfg: ExperimentConfig, out, threads=1, inputs=None) -> RunManifest:
    """Score trained models on every holdout with their stored thresholds."""
    layout = Layout(out)
    tm = _train_manifest(layout)
    inputs = inputs or tm.inputs
    holdouts = {k.split(":", 1)[1]: v for k, v in inputs.items() if k.startswith("holdout:")}
    if not holdouts:
        raise MissingArtifactError("no holdout files recorded in the train manifest (run gen-data before train)")
    entries = {(k, s): _model_entry(tm, k, s) for k in cfg.kinds for s in cfg.seeds}
    manifest = _start("external", cfg, inputs)
    models = {key: _load_checked(e) for key, e in entries.items()}
    for (kind, seed), model in models.items():
        if model.threshold != entries[(kind, seed)]["threshold"]:
            raise IntegrityError(
                f"{kind} seed {seed}: stored threshold {model.threshold} differs from the train manifest's "
                f"{entries[(kind, seed)]['threshold']}"
            )
    for name, entry in holdouts.items():
        ds = _load_input(entry)
        if ds.features.shape[1] != len(_data.FEATURES):
            raise IntegrityError(f"holdout {name} does not match the training schema")
        rows = []
        manifest.aggregate[name] = {"prevalence": ds.prevalence, "rows": len(ds)}
        for kind in cfg.kinds:
            runs = []
            for seed in cfg.seeds:
                model = models[(kind, seed)]
                m = evaluate(model.predict_proba(ds.features), ds.labels, model.threshold)
                runs.append(m)
                manifest.runs.append({
                    "holdout": name, "kind": kind, "seed": seed, "metrics": metrics_to_dict(m),
                    "threshold_used": model.threshold, "manifest_threshold": entries[(kind, seed)]["threshold"],
                })
            agg = _aggregate(runs)
            manifest.aggregate[name][kind] = metrics_to_dict(agg)
            rows.append(((MODEL_LABELS[kind],), agg))
        title = f"External holdout {name}: {len(ds)} rows, prevalence {ds.prevalence:.4f}"
        manifest.artifacts[f"external_{name}"] = _write_report(
            layout, f"external_{name}", to_csv(rows, TRAIN_COLUMNS, with_threshold=False),
            to_text(rows, TRAIN_COLUMNS, with_threshold=False, title=title),
        )
        print(to_text(rows, TRAIN_COLUMNS, with_threshold=False, title=title))
    _finish(manifest, layout)
    return manifest


REPORT_ORDER = (
    "train", "attack_raw_features", "attack_baselines", "attack_base_encoder", "attack_adv_encoder",
    "attack_adv_per_encoder", "crosstest",
)


def cmd_report(out, compare=None) -> int:
    """Print every text report under ``out``; with ``compare``, diff two manifests' numbers."""
    if compare:
        a, b = (RunManifest.load(p) for p in compare)
        if a.numeric_view() != b.numeric_view():
            diffs = _diff(a.numeric_view(), b.numeric_view())
            raise IntegrityError("manifests differ at: " + ", ".join(diffs[:10]))
        print(f"{compare[0]} and {compare[1]} agree on every recorded number")
        return EXIT_OK
    layout = Layout(out)
    reports = sorted(layout.report("").glob("*.txt"))
    if not reports:
        raise MissingArtifactError(f"no reports under {layout.report('')}")
    order = {n: i for i, n in enumerate(REPORT_ORDER)}
    for p in sorted(reports, key=lambda p: (order.get(p.stem, len(order)), p.stem)):
        print(p.read_text())
    return EXIT_OK


def _diff(a, b, prefix=""):
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b), key=str):
            if k not in a or k not in b:
                out.append(f"{prefix}{k}")
            else:
                out += _diff(a[k], b[k], f"{prefix}{k}.")
        return out
    if isinstance(a, list) and isinstance(b, list) and len(a) == len(b):
        out = []
        for i, (x, y) in enumerate(zip(a, b)):
            out += _diff(x, y, f"{prefix}{i}.")
        return out
    return [] if a == b else [prefix.rstrip(".") or "<root>"]


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="advpriv", description="Adversarial privacy experiments on tabular data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", help="INI config file (defaults are used for anything not set)")
        sp.add_argument("--seed", type=int, action="append", dest="seeds", help="training seed (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--model-kind", choices=_models.MODEL_KINDS, help="restrict to one model kind")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
        sp.add_argument("-v", "--verbose", action="store_true")
        if manifest:
            sp.add_argument("--manifest", help="rerun with the config, seeds and inputs recorded in a manifest")

    common(sub.add_parser("gen-data", help="write synthetic TRAIN/TEST and holdout CSVs"), manifest=False)
    for name, hlp in (
        ("train", "cross-validate thresholds, fit and test every model kind"),
        ("attack", "property-inference attacks on raw features and encoders"),
        ("crosstest", "demographic cross-tests of Base and ADV"),
        ("external", "score trained models on the holdouts with their stored thresholds"),
    ):
        common(sub.add_parser(name, help=hlp))
    rp = sub.add_parser("report", help="print the reports of an output directory")
    rp.add_argument("--out", default=None, help="output directory")
    rp.add_argument("--config", help="INI config file (used for the default output directory)")
    rp.add_argument("--compare", nargs=2, metavar="MANIFEST", help="check two manifests hold identical numbers")
    rp.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("default-config", help="print a config file with every default")
    return p


def _resolve(args):
    inputs = None
    if getattr(args, "manifest", None):
        m = RunManifest.load(args.manifest)
        try:
            cfg = ExperimentConfig.from_dict(m.config)
        except (TypeError, KeyError, AdvPrivError) as e:
            raise ConfigError(f"{args.manifest}: config snapshot unreadable ({e})") from None
        inputs = m.inputs or None
    else:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seeds:
        kw["seeds"] = tuple(args.seeds)
    if getattr(args, "model_kind", None):
        kw["kinds"] = (args.model_kind,)
    if args.out:
        kw["out"] = args.out
    cfg = replace(cfg, **kw) if kw else cfg
    threads = getattr(args, "threads", 1)
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg, inputs, threads


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "default-config":
            print(default_config_text(), end="")
            return EXIT_OK
        if args.command == "report":
            if args.compare:
                return cmd_report(None, compare=args.compare)
            cfg = load_config(args.config) if args.config else ExperimentConfig()
            return cmd_report(args.out or cfg.out)
        cfg, inputs, threads = _resolve(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, cfg.out)
        else:
            cmd = {"train": cmd_train, "attack": cmd_attack, "crosstest": cmd_crosstest, "external": cmd_external}
            cmd[args.command](cfg, cfg.out, threads=threads, inputs=inputs)
        return EXIT_OK
    except AdvPrivError as e:
        print(f"advpriv {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"advpriv {args.command}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
