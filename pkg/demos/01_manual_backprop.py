"""A feed-forward classifier trained with hand-written backpropagation.

Builds the default stack (dense, batchnorm, relu, dropout blocks with a
sigmoid head), checks its gradients against central finite differences and
then fits it on a synthetic two-feature problem.
"""
import numpy as np

from advpriv.nn import Adam, bce_loss, dense_stack, finite_difference_grad, optimizer_step

rng = np.random.default_rng(0)

# %% Layer layout
stack = dense_stack(in_dim=4, hidden=8, n_hidden=2, dropout=0.0, seed=1)
for i, spec in enumerate(stack.specs):
    print(f"{i:2d} {spec.kind:15s} {spec.in_dim:3d} -> {spec.out_dim}")
print("parameters:", stack.n_params(), " encoder ends after layer", stack.encoder_end - 1)

# %% Gradient check
x = rng.normal(size=(10, 4))
y = rng.integers(0, 2, size=(10, 1)).astype(float)


def loss():
    return bce_loss(stack.forward(x, "train", update_stats=False)[-1], y)[0]


_, g = bce_loss(stack.forward(x, "train", update_stats=False)[-1], y)
stack.backward(g)
analytic = stack.flat_grad.copy()
numeric = finite_difference_grad(loss, stack.flat_values)
rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
print(f"median relative error {np.median(rel):.2e}, worst {rel.max():.2e}")
stack.zero_grad()

# %% Training on a separable toy problem
x = rng.normal(size=(600, 4))
y = ((x[:, 0] - x[:, 1]) > 0).astype(float).reshape(-1, 1)
stack = dense_stack(4, 32, seed=2)
opt = Adam.for_stacks([stack], lr=0.005)
for epoch in range(1, 11):
    order = rng.permutation(len(x))
    losses = []
    for i in range(0, len(x), 32):
        idx = order[i : i + 32]
        out = stack.forward(x[idx], "train")[-1]
        l, g = bce_loss(out, y[idx])
        stack.backward(g)
        optimizer_step([stack], opt)
        losses.append(l)
    acc = np.mean((stack.predict_proba(x) >= 0.5) == y[:, 0])
    print(f"epoch {epoch:2d}  loss {np.mean(losses):.4f}  accuracy {acc:.3f}")
