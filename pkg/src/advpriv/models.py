"""
The three trainable systems: Base, ADV (GRL-coupled discriminators) and
ADV_per (FGSM-regularised), plus cross-validated threshold calibration and
model files.

All trainers take raw (unstandardised) feature matrices; standardisation
statistics are fitted on the training rows and stored with the model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as _data
from .adversarial import FgsmConfig, fgsm_training_step, grl_backward, grl_forward
from .errors import ConfigError, NumericalFaultError, ProtocolError, RejectedInputError
from .metrics import RECALL_BAND, calibrate_pooled, calibrate_threshold, stratified_kfold
from .nn import Adam, LayerSpec, LayerStack, bce_loss, dense_stack, load_stack, optimizer_step, save_stack

MODEL_KINDS = ("base", "adv", "adv_per")


@dataclass(frozen=True)
class Hyperparams:
    """Training settings; defaults are the values used for every experiment."""

    lr: float = 0.0008
    lam: float = 2.0
    batch_size: int = 16
    hidden: int = 150
    disc_hidden: int = 300
    dropout: float = 0.5
    epochs: int = 15
    epochs_per: int = 30
    n_hidden: int = 3
    cv_folds: int = 10
    recall_band: tuple = RECALL_BAND
    log_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr", "batch_size", "hidden", "disc_hidden", "n_hidden"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.epochs < 0 or self.epochs_per < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        lo, hi = self.recall_band
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"invalid recall band {self.recall_band}")
        if not 0 < self.log_fraction <= 1:
            raise ConfigError("log_fraction must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["recall_band"] = list(self.recall_band)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "recall_band" in d:
            d["recall_band"] = tuple(d["recall_band"])
        return cls(**d)


@dataclass
class Batch:
    """Feature rows with a binary target and, optionally, protected attributes."""

    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise RejectedInputError(f"features must be a non-empty matrix, got shape {self.features.shape}")
        if self.labels.shape[0] != self.features.shape[0]:
            raise RejectedInputError("features and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise RejectedInputError("labels must be 0 or 1")
        if self.protected is not None:
            self.protected = np.asarray(self.protected, dtype=np.float64)
            if self.protected.shape[0] != self.features.shape[0]:
                raise RejectedInputError("protected attributes differ in length from features")

    @classmethod
    def from_dataset(cls, ds, target="label"):
        return cls(ds.features, ds.attribute(target), ds.protected)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx):
        return Batch(self.features[idx], self.labels[idx], None if self.protected is None else self.protected[idx])


@dataclass
class EpochLog:
    epoch: int
    loss: float
    main_acc: float
    disc_acc: tuple = ()


@dataclass
class TrainedModel:
    """A deployable classifier: stack, preprocessing statistics and threshold.

    Discriminators used while training ADV are never part of this object.
    """

    kind: str
    stack: LayerStack
    stats: _data.PreprocessStats
    hp: Hyperparams
    seed: int
    threshold: float | None = None
    lam: float | None = None
    fgsm: FgsmConfig | None = None
    history: list = field(default_factory=list)
    target: str = "label"

    def _prepare(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.stack.in_dim:
            raise RejectedInputError(f"model expects {self.stack.in_dim} features, got shape {features.shape}")
        return _data.standardize(features, self.stats)

    def predict_proba(self, features):
        return self.stack.predict_proba(self._prepare(features))

    def encode(self, features):
        """Eval-mode output of the encoder prefix ``h(x)``."""
        return self.stack.encode(self._prepare(features))

    def head(self, representation):
        """Apply the layers after the encoder to a representation."""
        return self.stack.forward(representation, mode="eval", start=self.stack.encoder_end)[-1][:, 0]

    def predict(self, features):
        """``(probabilities, hard labels)``; a probability equal to the threshold is positive."""
        if self.threshold is None:
            raise ProtocolError("model has no calibrated threshold")
        p = self.predict_proba(features)
        return p, (p >= self.threshold).astype(np.int64)

    @property
    def encoder_dim(self):
        return self.stack.encoder_dim

    def n_params(self):
        return self.stack.n_params()

    def save(self, path):
        meta = {
            "kind": self.kind,
            "seed": self.seed,
            "threshold": self.threshold,
            "lam": self.lam,
            "fgsm": None if self.fgsm is None else asdict(self.fgsm),
            "hyperparams": self.hp.to_dict(),
            "history": [asdict(h) for h in self.history],
            "target": self.target,
        }
        save_stack(path, self.stack, metadata=meta, extra_tensors=self.stats.as_tensors())


def load_model(path) -> TrainedModel:
    stack, meta, extras = load_stack(path)
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise RejectedInputError(f"{path}: unknown model kind {kind!r}")
    return TrainedModel(
        kind=kind,
        stack=stack,
        stats=_data.PreprocessStats.from_tensors(extras),
        hp=Hyperparams.from_dict(meta["hyperparams"]),
        seed=meta["seed"],
        threshold=meta["threshold"],
        lam=meta["lam"],
        fgsm=None if meta["fgsm"] is None else FgsmConfig(**meta["fgsm"]),
        history=[EpochLog(h["epoch"], h["loss"], h["main_acc"], tuple(h["disc_acc"])) for h in meta["history"]],
        target=meta.get("target", "label"),
    )


# ---------------------------------------------------------------------------
# building blocks


def _rngs(seed):
    """Independent generators for batch order and the logging slice."""
    shuffle_ss, log_ss = np.random.SeedSequence([int(seed), 7]).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(log_ss)


def build_main_stack(in_dim, hp: Hyperparams, seed):
    return dense_stack(in_dim, hp.hidden, n_hidden=hp.n_hidden, dropout=hp.dropout, seed=seed)


def build_discriminator(in_dim, hp: Hyperparams, seed):
    """Two relu layers of width ``disc_hidden`` and a sigmoid head."""
    w = hp.disc_hidden
    specs = [
        LayerSpec("dense", in_dim, w),
        LayerSpec("relu", w, w),
        LayerSpec("dense", w, w),
        LayerSpec("relu", w, w),
        LayerSpec("dense", w, 1),
        LayerSpec("sigmoid-output", 1, 1),
    ]
    return LayerStack(specs, seed=seed)


def _disc_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), 101, i]).generate_state(1)[0])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a single-row batch has no batch statistics
    if len(out) > 1 and out[-1].size == 1:
        out.pop()
    return out


def _check_loss(loss, epoch, b):
    if not np.isfinite(loss):
        raise NumericalFaultError(f"non-finite loss at epoch {epoch}, batch {b}")


def _accuracy(probs, labels):
    return float(np.mean((probs >= 0.5) == (labels == 1)))


class _Trainer:
    """Shared epoch loop; subclasses implement one optimisation step per batch."""

    def __init__(self, batch: Batch, hp: Hyperparams, seed, epochs):
        self.hp = hp
        self.seed = int(seed)
        self.epochs = epochs
        self.stats = _data.fit_stats(batch.features)
        self.x = _data.standardize(batch.features, self.stats)
        self.y = batch.labels.reshape(-1, 1)
        self.z = batch.protected
        self.shuffle_rng, log_rng = _rngs(seed)
        n = self.x.shape[0]
        n_log = max(1, int(round(hp.log_fraction * n)))
        self.log_idx = np.sort(log_rng.permutation(n)[:n_log])
        self.main = build_main_stack(self.x.shape[1], hp, seed)
        self.history = []

    def step(self, idx) -> float:
        raise NotImplementedError

    def disc_accuracy(self):
        return ()

    def run(self):
        for epoch in range(1, self.epochs + 1):
            losses = []
            for b, idx in enumerate(_batches(self.x.shape[0], self.hp.batch_size, self.shuffle_rng)):
                loss = self.step(idx)
                _check_loss(loss, epoch, b)
                losses.append(loss)
            probs = self.main.predict_proba(self.x[self.log_idx])
            self.history.append(
                EpochLog(epoch, float(np.mean(losses)), _accuracy(probs, self.y[self.log_idx, 0]), self.disc_accuracy())
            )
        return self


class _BaseTrainer(_Trainer):
    def __init__(self, batch, hp, seed, epochs=None):
        super().__init__(batch, hp, seed, hp.epochs if epochs is None else epochs)
        self.opt = Adam.for_stacks([self.main], lr=hp.lr)

    def step(self, idx):
        acts = self.main.forward(self.x[idx], mode="train")
        loss, grad = bce_loss(acts[-1], self.y[idx])
        self.main.backward(grad)
        optimizer_step([self.main], self.opt)
        return loss


class _AdvTrainer(_Trainer):
    """Main classifier plus one GRL-coupled discriminator per protected attribute.

    Per batch the total loss is ``L_main + sum_i L_disc_i`` where each
    discriminator reads the encoder output through a gradient reversal layer;
    ``lam`` scales the reversed gradient. One optimiser step updates all
    stacks.
    """

    def __init__(self, batch, hp, seed, lam, epochs=None):
        super().__init__(batch, hp, seed, hp.epochs if epochs is None else epochs)
        if self.z is None:
            raise RejectedInputError("ADV training needs protected attributes for every row")
        self.lam = float(lam)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        self.k = self.main.encoder_end
        self.discs = [
            build_discriminator(self.main.encoder_dim, hp, _disc_seed(seed, i)) for i in range(self.z.shape[1])
        ]
        self.opt = Adam.for_stacks([self.main, *self.discs], lr=hp.lr)

    def step(self, idx):
        acts = self.main.forward(self.x[idx], mode="train")
        h = acts[self.k]
        loss, grad = bce_loss(acts[-1], self.y[idx])
        grad_h = self.main.backward(grad, stop=self.k)
        for i, disc in enumerate(self.discs):
            d_out = disc.forward(grl_forward(h), mode="train")[-1]
            _, d_grad = bce_loss(d_out, self.z[idx, i])
            grad_h = grad_h + grl_backward(disc.backward(d_grad), self.lam)
        self.main.backward(grad_h, start=self.k, stop=0)
        optimizer_step([self.main, *self.discs], self.opt)
        return loss

    def disc_accuracy(self):
        h = self.main.encode(self.x[self.log_idx])
        return tuple(
            _accuracy(d.predict_proba(h), self.z[self.log_idx, i]) for i, d in enumerate(self.discs)
        )


class _AdvPerTrainer(_Trainer):
    def __init__(self, batch, hp, seed, fgsm: FgsmConfig, epochs=None):
        super().__init__(batch, hp, seed, hp.epochs_per if epochs is None else epochs)
        self.fgsm = fgsm
        fgsm.resolve_intercept(self.main)
        self.opt = Adam.for_stacks([self.main], lr=hp.lr)
        self.adv_losses = []

    def step(self, idx):
        res = fgsm_training_step(self.main, self.x[idx], self.y[idx], self.fgsm, self.opt)
        self.adv_losses.append(res.adversarial_loss)
        return res.clean_loss


def _as_batch(train, target="label"):
    if isinstance(train, Batch):
        return train
    return Batch.from_dataset(train, target)


def _model(trainer, kind, **kw):
    return TrainedModel(
        kind=kind, stack=trainer.main, stats=trainer.stats, hp=trainer.hp, seed=trainer.seed,
        history=trainer.history, **kw,
    )


# ---------------------------------------------------------------------------
# public trainers


def train_base(train, hp: Hyperparams = Hyperparams(), seed=0, epochs=None, target="label") -> TrainedModel:
    t = _BaseTrainer(_as_batch(train, target), hp, seed, epochs).run()
    return _model(t, "base", target=target)


def train_adv(train, hp: Hyperparams = Hyperparams(), lam=None, seed=0, epochs=None, return_discriminators=False):
    """Train ADV; the returned model holds only the main stack.

    With ``return_discriminators`` a ``(model, discriminators)`` pair is
    returned instead, for inspection.
    """
    lam = hp.lam if lam is None else lam
    t = _AdvTrainer(_as_batch(train), hp, seed, lam, epochs).run()
    model = _model(t, "adv", lam=float(lam))
    return (model, t.discs) if return_discriminators else model


def train_adv_per(train, hp: Hyperparams = Hyperparams(), fgsm: FgsmConfig = FgsmConfig(), seed=0, epochs=None):
    t = _AdvPerTrainer(_as_batch(train), hp, seed, fgsm, epochs).run()
    return _model(t, "adv_per", fgsm=fgsm)


def fit(kind, train, hp: Hyperparams = Hyperparams(), seed=0, fgsm: FgsmConfig = FgsmConfig(), target="label"):
    if kind == "base":
        return train_base(train, hp, seed, target=target)
    if kind == "adv":
        return train_adv(train, hp, seed=seed)
    if kind == "adv_per":
        return train_adv_per(train, hp, fgsm, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def cv_threshold(kind, train, hp: Hyperparams = Hyperparams(), seed=0, fgsm: FgsmConfig = FgsmConfig(), target="label"):
    """Stratified k-fold out-of-fold scores, pooled into a recall-band threshold."""
    batch = _as_batch(train, target)
    plan = stratified_kfold(batch.labels.astype(np.int64), k=hp.cv_folds, seed=seed)
    folds = []
    for f, (tr, te) in enumerate(plan.folds()):
        fold_seed = int(np.random.SeedSequence([int(seed), 211, f]).generate_state(1)[0])
        model = fit(kind, batch.subset(tr), hp, fold_seed, fgsm)
        folds.append((model.predict_proba(batch.features[te]), batch.labels[te].astype(np.int64)))
    return calibrate_threshold(folds, hp.recall_band)


CALIBRATION_MODES = ("cv", "train")


def fit_calibrated(
    kind, train, hp: Hyperparams = Hyperparams(), seed=0, fgsm: FgsmConfig = FgsmConfig(), target="label",
    calibrate="cv",
):
    """Calibrate a threshold on ``train``, then fit on all of ``train``.

    ``calibrate="cv"`` pools stratified k-fold out-of-fold scores (the
    reporting protocol). ``calibrate="train"`` applies the same selection
    rule to the final model's in-sample scores; it costs one fit instead of
    k + 1 and is meant for runs where only threshold-free numbers matter.
    """
    if calibrate not in CALIBRATION_MODES:
        raise ConfigError(f"calibrate must be one of {CALIBRATION_MODES}, got {calibrate!r}")
    if calibrate == "cv":
        threshold = cv_threshold(kind, train, hp, seed, fgsm, target)
        model = fit(kind, train, hp, seed, fgsm, target)
    else:
        batch = _as_batch(train, target)
        model = fit(kind, batch, hp, seed, fgsm, target)
        threshold = calibrate_pooled(model.predict_proba(batch.features), batch.labels, hp.recall_band)
    model.threshold = threshold
    return model


def with_threshold(model: TrainedModel, threshold) -> TrainedModel:
    return replace(model, threshold=float(threshold))
