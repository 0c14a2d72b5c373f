"""Sequence regressors mapping a forcing history to one or more output series.

Two trunks share the same interface:

``LaggedMlp``
    a feed-forward network over the last ``window`` input rows, flattened;
``GatedRecurrent``
    a single-gate recurrent cell

        z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
        c_t = tanh(x_t Wc + (z_t * h_{t-1}) Uc + bc)
        h_t = z_t * h_{t-1} + (1 - z_t) * c_t

    whose state starts at zero at the beginning of every series. With the
    update gate saturated near zero the cell keeps no memory of earlier
    inputs.

Every named head is a linear read-out of the shared trunk.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import ops
from ..errors import InsufficientHistory, SchemaMismatch, ValidationError
from .mlp import Normalizer, dense_stack, glorot

LAGGED = "LaggedMlp"
GATED = "GatedRecurrent"

DEFAULT_WINDOW = 30
DEFAULT_LAGGED_HIDDEN = (64, 64)
DEFAULT_GATED_HIDDEN = 32
BPTT_WINDOW = 30

# Named architectures. Only presets carrying a "mode" can be built here; the
# stacked one documents the larger four-layer design this trunk does not
# offer (a single recurrent cell is the only recurrent trunk).
PRESETS = {
    "desk_gated": {"mode": GATED, "hidden": DEFAULT_GATED_HIDDEN},
    "desk_lagged": {"mode": LAGGED, "window": DEFAULT_WINDOW, "hidden": DEFAULT_LAGGED_HIDDEN},
    "stacked_lstm_branches": {"layers": 4, "cell": "LSTM", "hidden": 256, "heads": "fully connected branches"},
}


def lagged_windows(x, window):
    """Rows ``t = window-1 .. T-1`` of the flattened trailing windows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        raise InsufficientHistory(f"need at least {window} rows, got {len(x)}")
    w = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)  # (T-W+1, F, W)
    return np.ascontiguousarray(w.transpose(0, 2, 1).reshape(len(w), -1))


class SequenceRegressor:
    kind = "SequenceRegressor"

    def __init__(self, n_inputs, heads=("streamflow",), mode=LAGGED, window=DEFAULT_WINDOW,
                 hidden=None, seed=0, input_names=None):
        if mode not in (LAGGED, GATED):
            raise ValidationError(f"unknown sequence mode {mode!r}")
        heads = tuple(heads)
        if not heads or len(set(heads)) != len(heads):
            raise ValidationError("heads must be non-empty and unique")
        self.mode = mode
        self.n_inputs = int(n_inputs)
        self.heads = heads
        self.input_names = tuple(input_names) if input_names else None
        self.window = int(window) if mode == LAGGED else 1
        if mode == LAGGED:
            hidden = DEFAULT_LAGGED_HIDDEN if hidden is None else hidden
            hidden = (int(hidden),) if np.ndim(hidden) == 0 else tuple(int(h) for h in hidden)
            if self.window < 1:
                raise ValidationError("window must be >= 1")
        else:
            h = DEFAULT_GATED_HIDDEN if hidden is None else hidden
            hidden = (int(h[0]) if isinstance(h, (list, tuple)) else int(h),)
            if hidden[0] < 1:
                raise ValidationError("hidden size must be >= 1")
        self.hidden = hidden
        self.x_norm = Normalizer.identity(self.n_inputs)
        self.y_norm = Normalizer.identity(len(heads))
        rng = np.random.default_rng(seed)
        self.params, self.blocks = {}, {}
        if mode == LAGGED:
            width = self.window * self.n_inputs
            for i, h in enumerate(hidden):
                self.params[f"hidden.{i}.W"] = glorot(rng, width, h)
                self.params[f"hidden.{i}.b"] = np.zeros(h)
                self.blocks[f"hidden.{i}"] = [f"hidden.{i}.W", f"hidden.{i}.b"]
                width = h
        else:
            H, F = hidden[0], self.n_inputs
            for g in ("z", "c"):
                self.params[f"cell.W{g}"] = glorot(rng, F, H)
                self.params[f"cell.U{g}"] = glorot(rng, H, H)
                self.params[f"cell.b{g}"] = np.zeros(H)
            self.blocks["cell"] = [f"cell.{p}{g}" for g in ("z", "c") for p in ("W", "U", "b")]
            width = H
        for name in heads:
            self.params[f"head.{name}.W"] = glorot(rng, width, 1)
            self.params[f"head.{name}.b"] = np.zeros(1)
            self.blocks[f"head.{name}"] = [f"head.{name}.W", f"head.{name}.b"]

    @classmethod
    def from_preset(cls, name, n_inputs, heads=("streamflow",), seed=0, input_names=None):
        try:
            spec = PRESETS[name]
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
        if "mode" not in spec:
            raise ValidationError(f"preset {name!r} is a reference record and cannot be built")
        return cls(n_inputs, heads, seed=seed, input_names=input_names, **spec)

    def config(self):
        return {"mode": self.mode, "n_inputs": self.n_inputs, "heads": list(self.heads),
                "window": self.window, "hidden": list(self.hidden),
                "input_names": list(self.input_names) if self.input_names else None}

    def copy(self):
        m = SequenceRegressor.__new__(SequenceRegressor)
        m.__dict__.update(self.__dict__)
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.blocks = {k: list(v) for k, v in self.blocks.items()}
        return m

    # ------------------------------------------------------------ pieces
    def _check_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise SchemaMismatch(f"expected (T, {self.n_inputs}) inputs, got shape {x.shape}")
        return x

    def _check_y(self, y, n):
        if isinstance(y, dict):
            missing = set(self.heads) - set(y)
            if missing:
                raise SchemaMismatch(f"missing targets for heads {sorted(missing)}")
            y = np.column_stack([np.asarray(y[h], dtype=np.float64) for h in self.heads])
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape != (n, len(self.heads)):
            raise SchemaMismatch(f"expected targets of shape {(n, len(self.heads))}, got {y.shape}")
        return y

    def read_out(self, P, h):
        cols = [ops.add(ops.matmul(h, P[f"head.{n}.W"]), P[f"head.{n}.b"]) for n in self.heads]
        return cols[0] if len(cols) == 1 else ops.concat(cols, axis=1)

    def cell(self, P, x, h):
        z = ops.sigmoid(ops.add(ops.add(ops.matmul(x, P["cell.Wz"]), ops.matmul(h, P["cell.Uz"])), P["cell.bz"]))
        c = ops.tanh(ops.add(ops.add(ops.matmul(x, P["cell.Wc"]), ops.matmul(ops.mul(z, h), P["cell.Uc"])),
                             P["cell.bc"]))
        return ops.add(ops.mul(z, h), ops.mul(ops.sub(1.0, z), c))

    def hidden_states(self, P, xs):
        """Untaped hidden trajectory ``(T, H)`` of standardized inputs ``xs``."""
        H = self.hidden[0]
        h = np.zeros((1, H))
        out = np.empty((len(xs), H))
        for t in range(len(xs)):
            h = self.cell(P, xs[t:t + 1], h)
            out[t] = h[0]
        return out

    def window_loss(self, P, xw, h0, yw, loss_fn):
        """Loss of one batch of BPTT windows.

        ``xw`` is ``(W, B, F)``, ``h0`` the ``(B, H)`` carried-in state and
        ``yw`` the ``(W, B, K)`` standardized targets.
        """
        h = h0
        preds = []
        for t in range(len(xw)):
            h = self.cell(P, xw[t], h)
            preds.append(self.read_out(P, h))
        pred = ops.concat(preds, axis=0)
        return loss_fn(pred, yw.reshape(-1, yw.shape[-1]))

    # ---------------------------------------------------------- dataset
    def fit_normalization(self, x, y):
        x = self._check_x(x)
        self.x_norm = Normalizer.fit(x)
        self.y_norm = Normalizer.fit(self._check_y(y, len(x)))
        return self

    def make_dataset(self, series, bptt=BPTT_WINDOW):
        """Build a training set from ``[(x, y), ...]`` series pairs.

        Each series is standardized with the stored statistics. For the
        lagged trunk the rows are flattened windows; for the recurrent trunk
        the series are cut into consecutive BPTT windows.
        """
        if isinstance(series, tuple) and len(series) == 2 and not isinstance(series[0], tuple):
            series = [series]
        if not series:
            raise ValidationError("empty dataset")
        if self.mode == LAGGED:
            X, Y = [], []
            for x, y in series:
                x = self._check_x(x)
                y = self._check_y(y, len(x))
                X.append(lagged_windows(self.x_norm.apply(x), self.window))
                Y.append(self.y_norm.apply(y)[self.window - 1:])
            return {"x": np.concatenate(X), "y": np.concatenate(Y)}
        seqs = []
        for x, y in series:
            x = self._check_x(x)
            y = self._check_y(y, len(x))
            seqs.append((self.x_norm.apply(x), self.y_norm.apply(y)))
        return {"seqs": seqs, "bptt": int(bptt)}

    def iter_batches(self, ds, rng, batch_size):
        if self.mode == LAGGED:
            n = len(ds["x"])
            if not batch_size or batch_size >= n:
                yield ds, float(n)
                return
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                yield {"x": ds["x"][idx], "y": ds["y"][idx]}, float(len(idx))
            return
        # recurrent: windows of equal length, carried state from an untaped pass
        L = ds["bptt"]
        windows = []
        for xs, ys in ds["seqs"]:
            hs = self.hidden_states(self.params, xs)
            T = len(xs)
            starts = list(range(0, T - L + 1, L)) if T >= L else []
            if T >= L and starts[-1] + L < T:
                starts.append(T - L)
            if T < L:
                raise InsufficientHistory(f"series of length {T} is shorter than the BPTT window {L}")
            for s in starts:
                h0 = hs[s - 1] if s > 0 else np.zeros(self.hidden[0])
                windows.append((xs[s:s + L], ys[s:s + L], h0))
        order = rng.permutation(len(windows))
        bs = batch_size or len(windows)
        for s in range(0, len(windows), bs):
            chunk = [windows[i] for i in order[s:s + bs]]
            xw = np.stack([c[0] for c in chunk], axis=1)
            yw = np.stack([c[1] for c in chunk], axis=1)
            h0 = np.stack([c[2] for c in chunk])
            yield {"xw": xw, "yw": yw, "h0": h0}, float(len(chunk) * L)

    def batch_loss(self, P, batch, loss_fn):
        if self.mode == LAGGED:
            return loss_fn(self.read_out(P, dense_stack(P, batch["x"], "hidden", len(self.hidden))), batch["y"])
        return self.window_loss(P, batch["xw"], batch["h0"], batch["yw"], loss_fn)

    # ---------------------------------------------------------- predict
    def predict_std(self, P, xs):
        if self.mode == LAGGED:
            rows = lagged_windows(xs, self.window)
            return self.read_out(P, dense_stack(P, rows, "hidden", len(self.hidden)))
        return self.read_out(P, self.hidden_states(P, xs))

    def seq_predict(self, x, history=None):
        """Per-head output series aligned with ``x``.

        ``history`` holds the input rows that precede ``x``; it warms up the
        recurrent state or fills the lagged window. Without enough history the
        first ``window - 1`` outputs of the lagged trunk are NaN.
        """
        x = self._check_x(x)
        n_hist = 0
        if history is not None and len(history):
            history = self._check_x(history)
            n_hist = len(history)
            x = np.concatenate([history, x])
        xs = self.x_norm.apply(x)
        if self.mode == LAGGED:
            if len(xs) < self.window:
                raise InsufficientHistory(f"need at least {self.window} rows, got {len(xs)}")
            out = np.full((len(xs), len(self.heads)), np.nan)
            out[self.window - 1:] = self.y_norm.invert(self.predict_std(self.params, xs))
        else:
            out = self.y_norm.invert(self.predict_std(self.params, xs))
        out = out[n_hist:]
        return {h: out[:, i].copy() for i, h in enumerate(self.heads)}
