"""Stacked LSTM regressor with hand-written backpropagation through time.

Gate order in the packed weight matrices is (forget, input, output, cell):
logistic activations on the three gates, tanh on the cell candidate and cell
output. The final hidden state of the top layer feeds a scalar linear head.
Input sequences come from lag-feature matrices: one timestep per lagged
bucket in chronological order, one channel (own RV) or two (own + market).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .mlp import train_adam_early_stopping


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class LSTMLayerParams:
    W: np.ndarray    # (input_dim, 4H)
    U: np.ndarray    # (H, 4H)
    b: np.ndarray    # (4H,)


@dataclass
class LSTMModel:
    columns: tuple[str, ...]
    input_dim: int
    hidden: int
    layers: list[LSTMLayerParams]
    out_w: np.ndarray            # (H, 1)
    out_b: np.ndarray            # (1,)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.U, layer.b])
        out.extend([self.out_w, self.out_b])
        return out


def sequence_from_matrix(matrix) -> np.ndarray:
    """(n, T, d) tensor from a lag-feature matrix.

    Columns must follow the lag layout rv_lag_1..rv_lag_p (+ mkt_lag_* under
    the augmented scheme); timestep 0 is the oldest lag so the recurrence
    runs forward in time.
    """
    own = [c for c in matrix.columns if re.fullmatch(r"rv_lag_\d+", c)]
    mkt = [c for c in matrix.columns if re.fullmatch(r"mkt_lag_\d+", c)]
    if len(own) + len(mkt) != len(matrix.columns) or not own:
        raise ValueError(
            "sequence layout needs rv_lag_* (and optionally mkt_lag_*) columns; "
            f"got {matrix.columns[:4]}..."
        )
    if mkt and len(mkt) != len(own):
        raise ValueError("market lag block must match the individual block length")
    p = len(own)
    own_idx = [matrix.column_index(f"rv_lag_{j}") for j in range(p, 0, -1)]
    seq = [matrix.X[:, own_idx]]
    if mkt:
        seq.append(matrix.X[:, [matrix.column_index(f"mkt_lag_{j}") for j in range(p, 0, -1)]])
    return np.stack(seq, axis=2)


def init_lstm(columns, input_dim: int, hidden: int = 32, n_layers: int = 2,
              seed: int = 0, output_bias: float = 0.0) -> LSTMModel:
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for _ in range(n_layers):
        layers.append(LSTMLayerParams(
            W=rng.standard_normal((d, 4 * hidden)) / np.sqrt(d),
            U=rng.standard_normal((hidden, 4 * hidden)) / np.sqrt(hidden),
            b=np.zeros(4 * hidden),
        ))
        d = hidden
    out_w = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
    out_b = np.array([output_bias])
    return LSTMModel(columns=tuple(columns), input_dim=input_dim, hidden=hidden,
                     layers=layers, out_w=out_w, out_b=out_b)


def lstm_cell_forward(layer: LSTMLayerParams, x_t, h_prev, c_prev, hidden: int):
    """One unit update; returns the new state and the cache for backward."""
    z = x_t @ layer.W + h_prev @ layer.U + layer.b
    f = _sigmoid(z[:, :hidden])
    i = _sigmoid(z[:, hidden:2 * hidden])
    o = _sigmoid(z[:, 2 * hidden:3 * hidden])
    g = np.tanh(z[:, 3 * hidden:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x_t, h_prev, c_prev, f, i, o, g, tc)


def lstm_forward(model: LSTMModel, seq: np.ndarray):
    """Full forward pass; returns (predictions, caches per layer per step)."""
    m, T, d = seq.shape
    if d != model.input_dim:
        raise ValueError(f"sequence has {d} channels, model expects {model.input_dim}")
    H = model.hidden
    caches = []
    x_seq = [seq[:, t, :] for t in range(T)]
    for layer in model.layers:
        h = np.zeros((m, H))
        c = np.zeros((m, H))
        layer_cache = []
        outs = []
        for t in range(T):
            h, c, cache = lstm_cell_forward(layer, x_seq[t], h, c, H)
            layer_cache.append(cache)
            outs.append(h)
        caches.append(layer_cache)
        x_seq = outs
    pred = (x_seq[-1] @ model.out_w + model.out_b).ravel()
    return pred, caches


def lstm_loss(model: LSTMModel, seq: np.ndarray, y: np.ndarray) -> float:
    pred, _ = lstm_forward(model, seq)
    return float(np.mean((pred - y) ** 2))


def lstm_loss_and_grads(model: LSTMModel, seq: np.ndarray, y: np.ndarray):
    """Batch MSE and full-BPTT gradients aligned with model.parameters()."""
    pred, caches = lstm_forward(model, seq)
    m, T, _ = seq.shape
    H = model.hidden
    loss = float(np.mean((pred - y) ** 2))
    dpred = (2.0 / m) * (pred - y)

    top_h_last = caches[-1][-1]  # cache of top layer, last step
    d_out_w = (top_h_last[5] * top_h_last[7]).T @ dpred[:, None]  # h = o*tanh(c)
    d_out_b = np.array([dpred.sum()])

    # gradient flowing into each layer's output sequence
    dh_seq = [np.zeros((m, H)) for _ in range(T)]
    dh_seq[-1] = dpred[:, None] @ model.out_w.T

    grads_per_layer = []
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        layer_cache = caches[li]
        dW = np.zeros_like(layer.W)
        dU = np.zeros_like(layer.U)
        db = np.zeros_like(layer.b)
        dx_seq = [None] * T
        dh_next = np.zeros((m, H))
        dc_next = np.zeros((m, H))
        for t in range(T - 1, -1, -1):
            x_t, h_prev, c_prev, f, i, o, g, tc = layer_cache[t]
            dh = dh_seq[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            dz = np.concatenate([
                df * f * (1.0 - f),
                di * i * (1.0 - i),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ], axis=1)
            dW += x_t.T @ dz
            dU += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx_seq[t] = dz @ layer.W.T
            dh_next = dz @ layer.U.T
            dc_next = dc * f
        grads_per_layer.append((dW, dU, db))
        dh_seq = dx_seq   # feeds the layer below

    grads = []
    for dW, dU, db in grads_per_layer[::-1]:
        grads.extend([dW, dU, db])
    grads.extend([d_out_w, d_out_b])
    return loss, grads


def predict_lstm_raw(model: LSTMModel, seq: np.ndarray) -> np.ndarray:
    pred, _ = lstm_forward(model, seq)
    return pred


def lstm_input_gradients(model: LSTMModel, seq: np.ndarray) -> np.ndarray:
    """d prediction / d input, shape (n, T, d), via BPTT with unit output grad."""
    pred, caches = lstm_forward(model, seq)
    m, T, d = seq.shape
    H = model.hidden
    dh_seq = [np.zeros((m, H)) for _ in range(T)]
    dh_seq[-1] = np.ones((m, 1)) @ model.out_w.T
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        layer_cache = caches[li]
        dx_seq = [None] * T
        dh_next = np.zeros((m, H))
        dc_next = np.zeros((m, H))
        for t in range(T - 1, -1, -1):
            _, _, c_prev, f, i, o, g, tc = layer_cache[t]
            dh = dh_seq[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            dz = np.concatenate([
                df * f * (1.0 - f),
                di * i * (1.0 - i),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ], axis=1)
            dx_seq[t] = dz @ layer.W.T
            dh_next = dz @ layer.U.T
            dc_next = dc * f
        dh_seq = dx_seq
    return np.stack(dh_seq, axis=1)


def _snapshot(model: LSTMModel):
    return [p.copy() for p in model.parameters()]


def _restore(model: LSTMModel, snap) -> None:
    for p, s in zip(model.parameters(), snap):
        p[...] = s


def fit_lstm(train, valid, cfg, hidden: int = 32, n_layers: int = 2) -> LSTMModel:
    """Train a stacked LSTM on lag features laid out as sequences."""
    if valid.n_rows == 0:
        raise ValueError("validation set is empty; early stopping undefined")
    if train.columns != valid.columns:
        raise ValueError("train and validation matrices must share columns")
    seq_tr = sequence_from_matrix(train)
    seq_va = sequence_from_matrix(valid)
    model = init_lstm(train.columns, input_dim=seq_tr.shape[2], hidden=hidden,
                      n_layers=n_layers, seed=cfg.seed,
                      output_bias=float(train.y.mean()))

    def _lag(model, Xb, yb):
        return lstm_loss_and_grads(model, Xb, yb)

    train_adam_early_stopping(
        model, _lag, predict_lstm_raw, _snapshot, _restore,
        seq_tr, train.y, seq_va, valid.y, cfg,
    )
    return model


def predict_lstm(model: LSTMModel, matrix) -> np.ndarray:
    if matrix.columns != model.columns:
        raise ValueError("feature columns do not match training columns")
    return predict_lstm_raw(model, sequence_from_matrix(matrix))
