"""Feed-forward regressor with a soil-class embedding."""

from __future__ import annotations

import numpy as np

from ..autodiff import ops
from ..errors import SchemaMismatch, UnknownSoilClass, ValidationError

DEFAULT_HIDDEN = (64, 64, 64, 64)


def glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Normalizer:
    """Per-feature affine standardization with statistics frozen at fit time."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1])
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, y):
        return y * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def dense_stack(P, h, prefix, n_layers):
    for i in range(n_layers):
        h = ops.relu(ops.add(ops.matmul(h, P[f"{prefix}.{i}.W"]), P[f"{prefix}.{i}.b"]))
    return h


class MlpRegressor:
    """Embedding + LayerNorm input, ReLU hidden layers, one linear output layer.

    Inputs are ``(soil_classes, features)`` with features of shape ``(B, F)``.
    Features are standardized with training-split statistics before the
    embedding is concatenated; targets are de-standardized on the way out.
    """

    kind = "MlpRegressor"

    def __init__(self, n_features, n_outputs=1, soil_classes=(0,), embed_dim=4,
                 hidden=DEFAULT_HIDDEN, input_norm=True, seed=0, feature_names=None):
        self.n_features = int(n_features)
        self.n_outputs = int(n_outputs)
        self.soil_classes = tuple(int(c) for c in soil_classes)
        self.embed_dim = int(embed_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.input_norm = bool(input_norm)
        self.feature_names = tuple(feature_names) if feature_names else None
        if self.feature_names and len(self.feature_names) != self.n_features:
            raise ValidationError("feature_names must match n_features")
        self.x_norm = Normalizer.identity(self.n_features)
        self.y_norm = Normalizer.identity(self.n_outputs)
        self._class_row = {c: i for i, c in enumerate(self.soil_classes)}
        rng = np.random.default_rng(seed)
        self.params = {}
        self.blocks = {}
        if self.embed_dim:
            self.params["embedding"] = rng.uniform(-0.1, 0.1, size=(len(self.soil_classes), self.embed_dim))
            self.blocks["embedding"] = ["embedding"]
        width = self.embed_dim + self.n_features
        for i, h in enumerate(self.hidden):
            self.params[f"hidden.{i}.W"] = glorot(rng, width, h)
            self.params[f"hidden.{i}.b"] = np.zeros(h)
            self.blocks[f"hidden.{i}"] = [f"hidden.{i}.W", f"hidden.{i}.b"]
            width = h
        self.params["head.W"] = glorot(rng, width, self.n_outputs)
        self.params["head.b"] = np.zeros(self.n_outputs)
        self.blocks["head"] = ["head.W", "head.b"]

    def config(self):
        return {"n_features": self.n_features, "n_outputs": self.n_outputs,
                "soil_classes": list(self.soil_classes), "embed_dim": self.embed_dim,
                "hidden": list(self.hidden), "input_norm": self.input_norm,
                "feature_names": list(self.feature_names) if self.feature_names else None}

    def copy(self):
        m = MlpRegressor.__new__(MlpRegressor)
        m.__dict__.update(self.__dict__)
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.blocks = {k: list(v) for k, v in self.blocks.items()}
        return m

    def class_rows(self, soil_classes):
        try:
            return np.array([self._class_row[int(c)] for c in np.atleast_1d(soil_classes)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSoilClass(f"soil class {exc.args[0]} is not in the catalog {self.soil_classes}") from None

    def fit_normalization(self, features, targets):
        self.x_norm = Normalizer.fit(features)
        self.y_norm = Normalizer.fit(np.asarray(targets, dtype=np.float64).reshape(len(targets), -1))
        return self

    def _check(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.n_features:
            raise SchemaMismatch(f"expected {self.n_features} features, got {x.shape[-1]}")
        return x

    def forward_std(self, P, rows, xs):
        """Standardized-output forward pass on already-standardized features."""
        h = xs
        if self.embed_dim:
            h = ops.concat([ops.take(P["embedding"], rows), xs], axis=1)
        if self.input_norm:
            h = ops.layer_norm(h)
        h = dense_stack(P, h, "hidden", len(self.hidden))
        return ops.add(ops.matmul(h, P["head.W"]), P["head.b"])

    def forward(self, P, soil_classes, features):
        x = self._check(features)
        rows = self.class_rows(soil_classes) if self.embed_dim else None
        if rows is not None and len(rows) == 1 and x.shape[0] > 1:
            rows = np.repeat(rows, x.shape[0])
        out = self.forward_std(P, rows, self.x_norm.apply(x))
        return ops.add(ops.mul(out, self.y_norm.std), self.y_norm.mean)

    def predict(self, soil_classes, features):
        return self.forward(self.params, soil_classes, features)

    # training protocol
    def make_dataset(self, soil_classes, features, targets):
        x = self._check(features)
        y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
        if y.shape[1] != self.n_outputs:
            raise SchemaMismatch(f"expected {self.n_outputs} targets, got {y.shape[1]}")
        rows = self.class_rows(soil_classes) if self.embed_dim else np.zeros(len(x), dtype=np.int64)
        if len(rows) == 1 and len(x) > 1:
            rows = np.repeat(rows, len(x))
        return {"rows": rows, "x": self.x_norm.apply(x), "y": self.y_norm.apply(y)}

    def iter_batches(self, ds, rng, batch_size):
        n = len(ds["x"])
        if not batch_size or batch_size >= n:
            yield ds, float(n)
            return
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            yield {"rows": ds["rows"][idx], "x": ds["x"][idx], "y": ds["y"][idx]}, float(len(idx))

    def batch_loss(self, P, batch, loss_fn):
        return loss_fn(self.forward_std(P, batch["rows"], batch["x"]), batch["y"])
