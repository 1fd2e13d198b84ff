"""Feedforward network trained with Adam, batch-norm on hidden pre-activations.

Everything is plain numpy: the forward/backward passes are written out so the
gradients can be validated against finite differences, including the
batch-norm scale/shift parameters. Training mode normalizes with batch
statistics and rolls running averages (momentum 0.9); inference uses the
running averages. ReLU activations, scalar linear output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Adaptive moment estimation over a flat list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 b1: float = ADAM_B1, b2: float = ADAM_B2, eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class MLPModel:
    columns: tuple[str, ...]
    widths: tuple[int, ...]            # hidden layer widths
    batch_norm: bool
    weights: list[np.ndarray]          # len(widths) hidden layers + output
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray] = field(default_factory=list)
    bn_shift: list[np.ndarray] = field(default_factory=list)
    bn_run_mean: list[np.ndarray] = field(default_factory=list)
    bn_run_var: list[np.ndarray] = field(default_factory=list)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.batch_norm and i < len(self.widths):
                out.append(self.bn_scale[i])
                out.append(self.bn_shift[i])
        return out


def init_mlp(n_inputs: int, columns, widths=(64, 32, 16), batch_norm=True,
             seed: int = 0, output_bias: float = 0.0) -> MLPModel:
    rng = np.random.default_rng(seed)
    dims = [n_inputs, *widths, 1]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        scale = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else np.sqrt(1.0 / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    biases[-1][0] = output_bias
    model = MLPModel(columns=tuple(columns), widths=tuple(widths),
                     batch_norm=batch_norm, weights=weights, biases=biases)
    if batch_norm:
        for w in widths:
            model.bn_scale.append(np.ones(w))
            model.bn_shift.append(np.zeros(w))
            model.bn_run_mean.append(np.zeros(w))
            model.bn_run_var.append(np.ones(w))
    return model


def mlp_forward(model: MLPModel, X: np.ndarray, training: bool,
                update_running: bool = False):
    """Forward pass; returns (predictions, caches) with caches for backward."""
    a = X
    caches = []
    n_hidden = len(model.widths)
    for i in range(n_hidden):
        z = a @ model.weights[i] + model.biases[i]
        if model.batch_norm:
            if training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_running:
                    model.bn_run_mean[i] = (BN_MOMENTUM * model.bn_run_mean[i]
                                            + (1.0 - BN_MOMENTUM) * mu)
                    model.bn_run_var[i] = (BN_MOMENTUM * model.bn_run_var[i]
                                           + (1.0 - BN_MOMENTUM) * var)
            else:
                mu = model.bn_run_mean[i]
                var = model.bn_run_var[i]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            u = model.bn_scale[i] * zhat + model.bn_shift[i]
        else:
            zhat, inv_std, u = None, None, z
        act = np.maximum(u, 0.0)
        caches.append((a, zhat, inv_std, u))
        a = act
    pred = (a @ model.weights[-1] + model.biases[-1]).ravel()
    caches.append((a,))
    return pred, caches


def mlp_loss(model: MLPModel, X: np.ndarray, y: np.ndarray,
             training: bool = True) -> float:
    """Batch MSE, as a pure function of the parameters (for gradient checks)."""
    pred, _ = mlp_forward(model, X, training=training, update_running=False)
    return float(np.mean((pred - y) ** 2))


def mlp_loss_and_grads(model: MLPModel, X: np.ndarray, y: np.ndarray,
                       update_running: bool = False):
    """Batch MSE plus analytic gradients aligned with model.parameters()."""
    pred, caches = mlp_forward(model, X, training=True, update_running=update_running)
    m = len(y)
    loss = float(np.mean((pred - y) ** 2))
    dpred = (2.0 / m) * (pred - y)

    n_hidden = len(model.widths)
    grads_rev = []
    a_last = caches[-1][0]
    dW_out = a_last.T @ dpred[:, None]
    db_out = np.array([dpred.sum()])
    grads_rev.append(db_out)
    grads_rev.append(dW_out)
    da = dpred[:, None] @ model.weights[-1].T

    for i in range(n_hidden - 1, -1, -1):
        a_prev, zhat, inv_std, u = caches[i]
        du = da * (u > 0.0)
        if model.batch_norm:
            dscale = (du * zhat).sum(axis=0)
            dshift = du.sum(axis=0)
            dzhat = du * model.bn_scale[i]
            dz = (inv_std / m) * (m * dzhat - dzhat.sum(axis=0)
                                  - zhat * (dzhat * zhat).sum(axis=0))
            grads_rev.append(dshift)
            grads_rev.append(dscale)
        else:
            dz = du
        db = dz.sum(axis=0)
        dW = a_prev.T @ dz
        grads_rev.append(db)
        grads_rev.append(dW)
        da = dz @ model.weights[i].T

    return loss, grads_rev[::-1]


def predict_mlp_raw(model: MLPModel, X: np.ndarray) -> np.ndarray:
    """Deterministic inference with running batch-norm statistics."""
    pred, _ = mlp_forward(model, X, training=False)
    return pred


def mlp_input_gradients(model: MLPModel, X: np.ndarray) -> np.ndarray:
    """d prediction / d input per row, in inference mode (running stats)."""
    pred, caches = mlp_forward(model, X, training=False)
    da = np.ones((len(X), 1)) @ model.weights[-1].T
    for i in range(len(model.widths) - 1, -1, -1):
        _, _, _, u = caches[i]
        du = da * (u > 0.0)
        if model.batch_norm:
            inv_std = 1.0 / np.sqrt(model.bn_run_var[i] + BN_EPS)
            dz = du * model.bn_scale[i] * inv_std
        else:
            dz = du
        da = dz @ model.weights[i].T
    return da


def _snapshot(model: MLPModel):
    return ([w.copy() for w in model.weights], [b.copy() for b in model.biases],
            [s.copy() for s in model.bn_scale], [s.copy() for s in model.bn_shift],
            [s.copy() for s in model.bn_run_mean], [s.copy() for s in model.bn_run_var])


def _restore(model: MLPModel, snap) -> None:
    (model.weights, model.biases, model.bn_scale, model.bn_shift,
     model.bn_run_mean, model.bn_run_var) = (
        [a.copy() for a in group] for group in snap
    )


def train_adam_early_stopping(model, loss_and_grads, predict_raw, snapshot, restore,
                              Xtr, ytr, Xva, yva, cfg) -> np.ndarray:
    """Shared minibatch Adam loop with early stopping on validation MSE.

    Batch order is drawn from a generator seeded by cfg.seed, so training is
    deterministic; the best-validation parameters are restored at the end.
    Returns the per-epoch validation MSE history.
    """
    rng = np.random.default_rng(cfg.seed ^ 0x5EED)
    adam = Adam(model.parameters(), cfg.learning_rate)
    n = len(ytr)
    best_mse = np.inf
    best_snap = snapshot(model)
    stall = 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(model, Xtr[rows], ytr[rows])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch offset {lo}"
                )
            adam.step(grads)
        vmse = float(np.mean((predict_raw(model, Xva) - yva) ** 2))
        history.append(vmse)
        if vmse < best_mse:
            best_mse = vmse
            best_snap = snapshot(model)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    restore(model, best_snap)
    return np.array(history)


def fit_mlp(train, valid, cfg, widths=(64, 32, 16), batch_norm: bool = True) -> MLPModel:
    """Train an MLP on a feature matrix with validation early stopping."""
    if valid.n_rows == 0:
        raise ValueError("validation set is empty; early stopping undefined")
    if train.columns != valid.columns:
        raise ValueError("train and validation matrices must share columns")
    model = init_mlp(train.n_columns, train.columns, widths=widths,
                     batch_norm=batch_norm, seed=cfg.seed,
                     output_bias=float(train.y.mean()))

    def _lag(model, Xb, yb):
        return mlp_loss_and_grads(model, Xb, yb, update_running=True)

    train_adam_early_stopping(
        model, _lag, predict_mlp_raw, _snapshot, _restore,
        train.X, train.y, valid.X, valid.y, cfg,
    )
    return model


def predict_mlp(model: MLPModel, matrix) -> np.ndarray:
    if matrix.columns != model.columns:
        raise ValueError(
            f"feature columns do not match training columns "
            f"({len(matrix.columns)} vs {len(model.columns)})"
        )
    return predict_mlp_raw(model, matrix.X)
