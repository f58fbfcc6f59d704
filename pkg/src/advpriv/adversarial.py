"""Gradient reversal and FGSM perturbation of hidden representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, RejectedInputError
from .nn import bce_loss, optimizer_step


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 2.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise RejectedInputError(f"GRL lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class FgsmConfig:
    """FGSM regulariser settings.

    ``intercept_layer`` counts leading layers of the stack: the perturbation
    is added to the output of layer ``intercept_layer - 1``. ``None`` means
    the encoder boundary of whichever stack the config is applied to.
    ``target`` picks the labels the perturbation ascends: the model's own
    hard predictions (``"predicted"``) or the true labels (``"true"``).
    """

    epsilon: float = 0.05
    alpha: float = 0.5
    intercept_layer: int | None = None
    target: str = "predicted"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise RejectedInputError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.alpha <= 1.0:
            raise RejectedInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.target not in ("predicted", "true"):
            raise RejectedInputError(f"target must be 'predicted' or 'true', got {self.target!r}")

    def resolve_intercept(self, stack) -> int:
        k = stack.encoder_end if self.intercept_layer is None else int(self.intercept_layer)
        # the output layer itself is not a hidden representation
        if not 1 <= k < len(stack.layers) - 1 or stack.specs[k - 1].kind == "sigmoid-output":
            raise RejectedInputError(f"intercept layer {k} does not address a hidden layer")
        return k


def grl_forward(x):
    return x


def grl_backward(upstream_grad, lam):
    """Reverse and scale the gradient: ``-lam * upstream_grad``."""
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


def fgsm_eta(grad_at_h, epsilon):
    """``epsilon * sign(grad)``; zero-gradient coordinates get no perturbation."""
    if not epsilon >= 0:
        raise RejectedInputError(f"epsilon must be >= 0, got {epsilon}")
    return epsilon * np.sign(grad_at_h)


def _intercepted_params(stack, k):
    """Parameters of the layer that produces the intercepted activation (nearest parameterised layer at or before it)."""
    for i in range(k - 1, -1, -1):
        params = stack.layers[i].params()
        if params:
            return params
    return []


@dataclass
class FgsmStep:
    clean_loss: float
    adversarial_loss: float
    eta: np.ndarray | None
    restored: dict[str, np.ndarray]


def fgsm_objective(clean_loss, adversarial_loss, alpha):
    return alpha * clean_loss + (1.0 - alpha) * adversarial_loss


def fgsm_training_step(stack, features, labels, cfg: FgsmConfig, optimizer) -> FgsmStep:
    """One FGSM-regularised update of ``stack``.

    Sequence: clean forward; gradient of the cost w.r.t. the intercepted
    activation ``h``; snapshot of the intercepted layer's parameters; forward
    of the layers above ``h`` on ``h + eta`` and backward of the weighted
    adversarial loss; restore of the snapshot; backward of the weighted clean
    loss; one optimiser step on ``alpha * J_clean + (1 - alpha) * J_adv``.

    Re-forwards of the layers above ``h`` replay the clean pass's dropout
    masks and leave batchnorm running statistics untouched, so the random
    stream and running statistics advance exactly as in a plain step. With
    ``epsilon == 0`` both loss terms coincide and the plain step is taken
    directly.
    """
    k = cfg.resolve_intercept(stack)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)

    acts = stack.forward(features, mode="train")
    h = acts[k]
    probs = acts[-1]
    clean_loss, clean_grad = bce_loss(probs, labels)

    if cfg.epsilon == 0:
        stack.backward(clean_grad)
        optimizer_step([stack], optimizer)
        return FgsmStep(clean_loss, clean_loss, None, {})

    if cfg.target == "predicted":
        _, target_grad = bce_loss(probs, (probs >= 0.5).astype(np.float64))
    else:
        target_grad = clean_grad
    grad_h = stack.backward(target_grad, stop=k, param_grads=False)
    eta = fgsm_eta(grad_h, cfg.epsilon)

    snapshot = {p.name: (p, p.values.copy()) for p in _intercepted_params(stack, k)}

    adv_acts = stack.forward(h + eta, mode="train", start=k, reuse_masks=True, update_stats=False)
    adv_loss, adv_grad = bce_loss(adv_acts[-1], labels)
    grad_h_adv = stack.backward((1.0 - cfg.alpha) * adv_grad, stop=k)

    restored = {}
    for name, (p, saved) in snapshot.items():
        if p.values.shape != saved.shape:
            raise IntegrityError(f"{name}: shape drifted from {saved.shape} to {p.values.shape} during attack")
        p.values[...] = saved
        restored[name] = p.values.copy()

    stack.forward(h, mode="train", start=k, reuse_masks=True, update_stats=False)
    grad_h_clean = stack.backward(cfg.alpha * clean_grad, stop=k)
    # layers below h saw only the clean input, so one pass carries both terms
    stack.backward(grad_h_adv + grad_h_clean, start=k, stop=0)
    optimizer_step([stack], optimizer)
    return FgsmStep(clean_loss, adv_loss, eta, restored)
