"""
Minimal dense network engine with manual reverse-mode differentiation.

A :class:`LayerStack` is an ordered list of layers drawn from a fixed
vocabulary (dense, batchnorm, dropout, relu, sigmoid-output). Forward passes
cache whatever the backward pass needs; backward accumulates parameter
gradients into :attr:`ParamTensor.grad` and returns the gradient with respect
to the stack input.

Shapes follow the row-major convention ``(batch, features)``. Dense weights
are stored ``(in_dim, out_dim)`` so that ``y = x @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.special import expit

from ._io import atomic_write_bytes
from .errors import NumericalFaultError, ProtocolError, RejectedInputError

LAYER_KINDS = ("dense", "batchnorm", "dropout", "relu", "sigmoid-output")
BCE_EPS = 1e-7

MODEL_MAGIC = b"ADVPRIV\x00"
MODEL_FORMAT_VERSION = 1


@dataclass
class ParamTensor:
    """A named trainable array and its accumulated gradient."""

    name: str
    values: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise RejectedInputError(f"{self.name}: grad shape {self.grad.shape} != values shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise RejectedInputError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise RejectedInputError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise RejectedInputError(f"{self.kind} layer must preserve width, got {self.in_dim}->{self.out_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise RejectedInputError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.bn_eps <= 0:
            raise RejectedInputError("bn_eps must be positive")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# layers


class Layer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def params(self) -> list[ParamTensor]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        raise NotImplementedError

    def backward(self, grad, param_grads=True):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, spec, rng, prefix):
        super().__init__(spec)
        # Kaiming-style uniform fan-in scaling
        bound = np.sqrt(6.0 / spec.in_dim)
        self.weight = ParamTensor(f"{prefix}.weight", rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)))
        self.bias = ParamTensor(f"{prefix}.bias", np.zeros(spec.out_dim))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        self._x = x
        return x @ self.weight.values + self.bias.values

    def backward(self, grad, param_grads=True):
        if param_grads:
            self.weight.grad += self._x.T @ grad
            self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.values.T


class BatchNorm(Layer):
    """Per-feature batch normalisation with learnable scale and shift.

    Train mode normalises with biased batch statistics and folds the batch
    mean and unbiased variance into the running estimates using
    ``running = (1 - momentum) * running + momentum * batch``.
    """

    def __init__(self, spec, prefix):
        super().__init__(spec)
        self.gamma = ParamTensor(f"{prefix}.gamma", np.ones(spec.out_dim))
        self.beta = ParamTensor(f"{prefix}.beta", np.zeros(spec.out_dim))
        self.running_mean = np.zeros(spec.out_dim)
        self.running_var = np.ones(spec.out_dim)
        self.prefix = prefix
        self._xhat = None
        self._inv_std = None
        self._train = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.prefix}.running_mean": self.running_mean, f"{self.prefix}.running_var": self.running_var}

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        eps = self.spec.bn_eps
        if train:
            n = x.shape[0]
            mean = x.mean(axis=0)
            xc = x - mean
            var = (xc * xc).mean(axis=0)
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = xc * inv_std
            if update_stats:
                m = self.spec.bn_momentum
                unbiased = var * (n / (n - 1)) if n > 1 else var
                self.running_mean *= 1.0 - m
                self.running_mean += m * mean
                self.running_var *= 1.0 - m
                self.running_var += m * unbiased
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + eps)
            xhat = (x - self.running_mean) * inv_std
        self._xhat, self._inv_std, self._train = xhat, inv_std, train
        return xhat * self.gamma.values + self.beta.values

    def backward(self, grad, param_grads=True):
        xhat = self._xhat
        if param_grads:
            self.gamma.grad += (grad * xhat).sum(axis=0)
            self.beta.grad += grad.sum(axis=0)
        dxhat = grad * self.gamma.values
        if not self._train:
            return dxhat * self._inv_std
        n = grad.shape[0]
        return (self._inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by 1/(1-rate) at train time."""

    def __init__(self, spec):
        super().__init__(spec)
        self._mask = None

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        rate = self.spec.dropout_rate
        if not train or rate == 0.0:
            self._mask = None
            return x
        if not reuse_mask or self._mask is None or self._mask.shape != x.shape:
            self._mask = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
        return x * self._mask

    def backward(self, grad, param_grads=True):
        if self._mask is None:
            return grad
        return grad * self._mask


class ReLU(Layer):
    def __init__(self, spec):
        super().__init__(spec)
        self._active = None

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        self._active = x > 0
        return np.where(self._active, x, 0.0)

    def backward(self, grad, param_grads=True):
        return np.where(self._active, grad, 0.0)


class SigmoidOutput(Layer):
    def __init__(self, spec):
        super().__init__(spec)
        self._p = None

    def forward(self, x, train, rng, reuse_mask=False, update_stats=True):
        self._p = expit(x)
        return self._p

    def backward(self, grad, param_grads=True):
        p = self._p
        return grad * p * (1.0 - p)


# ---------------------------------------------------------------------------
# stack


class LayerStack:
    """An ordered, dimension-chained sequence of layers.

    Parameters are packed into one flat value buffer and one flat gradient
    buffer; each :class:`ParamTensor` holds views into them, so optimisers can
    update the whole stack with a handful of vectorised operations.

    ``encoder_end`` is the number of leading layers forming the encoder; by
    default everything before the final dense layer.
    """

    def __init__(self, specs, seed=0, encoder_end=None):
        specs = list(specs)
        if not specs:
            raise RejectedInputError("a layer stack needs at least one layer")
        for i in range(1, len(specs)):
            if specs[i - 1].out_dim != specs[i].in_dim:
                raise RejectedInputError(
                    f"layer {i} expects width {specs[i].in_dim} but layer {i - 1} emits {specs[i - 1].out_dim}"
                )
        self.specs = specs
        self.seed = int(seed)
        init_ss, drop_ss = np.random.SeedSequence(self.seed).spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(drop_ss)

        self.layers: list[Layer] = []
        for i, spec in enumerate(specs):
            prefix = f"{i}.{spec.kind}"
            if spec.kind == "dense":
                layer = Dense(spec, init_rng, prefix)
            elif spec.kind == "batchnorm":
                layer = BatchNorm(spec, prefix)
            elif spec.kind == "dropout":
                layer = Dropout(spec)
            elif spec.kind == "relu":
                layer = ReLU(spec)
            else:
                layer = SigmoidOutput(spec)
            self.layers.append(layer)

        if encoder_end is None:
            dense_idx = [i for i, s in enumerate(specs) if s.kind == "dense"]
            encoder_end = dense_idx[-1]
        if not 0 <= encoder_end < len(specs):
            raise RejectedInputError(f"encoder_end {encoder_end} out of range")
        self.encoder_end = int(encoder_end)

        self._pack()
        self._cached_from = None
        self._cached_to = None
        self.grads_pending = False

    def _pack(self):
        params = self.params()
        total = sum(p.size for p in params)
        self.flat_values = np.empty(total)
        self.flat_grad = np.zeros(total)
        offset = 0
        for p in params:
            k = p.size
            self.flat_values[offset : offset + k] = p.values.ravel()
            p.values = self.flat_values[offset : offset + k].reshape(p.shape)
            p.grad = self.flat_grad[offset : offset + k].reshape(p.shape)
            offset += k

    # -- introspection -----------------------------------------------------

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    @property
    def encoder_dim(self):
        return self.specs[self.encoder_end - 1].out_dim if self.encoder_end else self.in_dim

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def n_params(self) -> int:
        return int(self.flat_values.size)

    def zero_grad(self):
        self.flat_grad[...] = 0.0
        self.grads_pending = False

    # -- passes --------------------------------------------------------------

    def forward(self, x, mode="train", start=0, stop=None, reuse_masks=False, update_stats=True):
        """Run layers ``start:stop`` and return every intermediate activation.

        ``acts[0]`` is the input and ``acts[-1]`` the output of the last layer
        run. ``reuse_masks`` replays the dropout masks of the previous train
        forward and ``update_stats=False`` freezes batchnorm running
        statistics; both serve partial re-forwards on perturbed activations.
        """
        if mode not in ("train", "eval"):
            raise RejectedInputError(f"mode must be 'train' or 'eval', got {mode!r}")
        stop = len(self.layers) if stop is None else stop
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise RejectedInputError(f"expected a non-empty (batch, features) matrix, got shape {x.shape}")
        expected = self.specs[start].in_dim
        if x.shape[1] != expected:
            raise RejectedInputError(f"layer {start} expects {expected} features, got {x.shape[1]}")
        train = mode == "train"
        acts = [x]
        for i in range(start, stop):
            x = self.layers[i].forward(x, train, self.rng, reuse_mask=reuse_masks, update_stats=update_stats)
            if not np.isfinite(x).all():
                raise NumericalFaultError(f"non-finite activation in layer {i} ({self.specs[i].kind})", layer=i)
            acts.append(x)
        if start == 0 or self._cached_from is None:
            self._cached_from = start
        self._cached_to = stop
        return acts

    def predict_proba(self, x):
        """Eval-mode output probabilities as a flat vector."""
        return self.forward(x, mode="eval")[-1][:, 0]

    def encode(self, x):
        return self.forward(x, mode="eval", stop=self.encoder_end)[-1]

    def backward(self, grad, stop=0, start=None, param_grads=True):
        """Backpropagate ``grad`` through layers ``start-1`` down to ``stop``.

        ``grad`` is taken w.r.t. the output of layer ``start - 1`` (by default
        the output of the last forward). Returns the gradient w.r.t. the input
        of layer ``stop``. Parameter gradients are accumulated, never
        overwritten.
        """
        if self._cached_from is None:
            raise ProtocolError("backward called before forward")
        start = self._cached_to if start is None else start
        if stop < self._cached_from or start > self._cached_to:
            raise ProtocolError(
                f"cached forward covers layers {self._cached_from}..{self._cached_to - 1}; "
                f"cannot backpropagate {start - 1}..{stop}"
            )
        grad = np.asarray(grad, dtype=np.float64)
        for i in range(start - 1, stop - 1, -1):
            grad = self.layers[i].backward(grad, param_grads=param_grads)
        if param_grads:
            self.grads_pending = True
        return grad

    # -- copying -----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by name."""
        out = {p.name: p.values.copy() for p in self.params()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state):
        for p in self.params():
            src = np.asarray(state[p.name], dtype=np.float64)
            if src.shape != p.shape:
                raise RejectedInputError(f"{p.name}: stored shape {src.shape} != expected {p.shape}")
            p.values[...] = src
        for name, buf in self.buffers().items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != buf.shape:
                raise RejectedInputError(f"{name}: stored shape {src.shape} != expected {buf.shape}")
            buf[...] = src

    def clone(self) -> "LayerStack":
        other = LayerStack(self.specs, seed=self.seed, encoder_end=self.encoder_end)
        other.load_state(self.state())
        other.rng.bit_generator.state = self.rng.bit_generator.state
        return other


def dense_stack(in_dim, hidden, n_hidden=3, dropout=0.5, batchnorm=True, seed=0, bn_momentum=0.1, bn_eps=1e-5):
    """Hidden blocks of dense -> [batchnorm] -> relu -> [dropout], then dense -> sigmoid."""
    specs = []
    width = in_dim
    for _ in range(n_hidden):
        specs.append(LayerSpec("dense", width, hidden))
        if batchnorm:
            specs.append(LayerSpec("batchnorm", hidden, hidden, bn_momentum=bn_momentum, bn_eps=bn_eps))
        specs.append(LayerSpec("relu", hidden, hidden))
        if dropout > 0:
            specs.append(LayerSpec("dropout", hidden, hidden, dropout_rate=dropout))
        width = hidden
    specs.append(LayerSpec("dense", width, 1))
    specs.append(LayerSpec("sigmoid-output", 1, 1))
    return LayerStack(specs, seed=seed)


# ---------------------------------------------------------------------------
# loss and optimiser


def bce_loss(probs, labels, eps=BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``.

    Probabilities are clamped to ``[eps, 1 - eps]``; the gradient is taken
    at the clamped value.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise RejectedInputError("labels must be 0 or 1")
    n = probs.size
    p = np.clip(probs, eps, 1.0 - eps)
    loss = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    grad = (p - labels) / (p * (1.0 - p)) / n
    return float(loss), grad


class Adam:
    """Adam over a list of parameter tensors (or the flat buffers of stacks)."""

    def __init__(self, params, lr=0.0008, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    @classmethod
    def for_stacks(cls, stacks, **kw):
        # float64 buffers pass through np.asarray uncopied, so these alias the stacks
        flat = [ParamTensor(f"stack{i}", s.flat_values, s.flat_grad) for i, s in enumerate(stacks)]
        return cls(flat, **kw)

    def step(self):
        """One update of every parameter; gradients are zeroed afterwards."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            _adam_kernel(
                p.values.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                self.beta1, self.beta2, self.lr, c1, c2, self.eps,
            )


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(values, grad, m, v, beta1, beta2, lr, c1, c2, eps):
    # fused single pass; bandwidth-bound otherwise on the discriminator stacks
    for i in range(values.size):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
        m[i] = mi
        v[i] = vi
        values[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        grad[i] = 0.0


def optimizer_step(stacks, optimizer):
    """Apply ``optimizer`` to ``stacks`` after checking each has fresh gradients."""
    for s in stacks:
        if not s.grads_pending:
            raise ProtocolError("optimizer step requested before backward")
    optimizer.step()
    for s in stacks:
        s.grads_pending = False


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(fn, array, step=1e-4):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# persistence


def save_stack(path, stack, metadata=None, extra_tensors=None):
    """Write a versioned model file.

    Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
    header, then every tensor as little-endian float64 in header order.
    """
    tensors = [(p.name, p.values) for p in stack.params()]
    tensors += list(stack.buffers().items())
    tensors += [(k, np.asarray(v, dtype=np.float64)) for k, v in (extra_tensors or {}).items()]
    header = {
        "format": "advpriv-model",
        "format_version": MODEL_FORMAT_VERSION,
        "seed": stack.seed,
        "encoder_end": stack.encoder_end,
        "layers": [s.to_dict() for s in stack.specs],
        "metadata": metadata or {},
        "tensors": [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    atomic_write_bytes(path, MODEL_MAGIC + struct.pack("<I", len(head)) + head + body)


def load_stack(path):
    """Inverse of :func:`save_stack`: returns ``(stack, metadata, extra_tensors)``."""
    raw = Path(path).read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise RejectedInputError(f"{path}: not a model file")
    try:
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RejectedInputError(f"{path}: unreadable model header ({e})") from None
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise RejectedInputError(f"{path}: unsupported format version {header.get('format_version')}")
    specs = [LayerSpec(**d) for d in header["layers"]]
    stack = LayerStack(specs, seed=header["seed"], encoder_end=header["encoder_end"])
    offset = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise RejectedInputError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise RejectedInputError(f"{path}: {len(raw) - offset} trailing bytes after the last tensor")
    stack.load_state(arrays)
    known = {p.name for p in stack.params()} | set(stack.buffers())
    extras = {k: v for k, v in arrays.items() if k not in known}
    return stack, header["metadata"], extras
