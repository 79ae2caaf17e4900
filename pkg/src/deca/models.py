"""Small differentiable probability models with hand-derived gradients.

Every model keeps its parameters in one flat float64 vector ``theta``; the
named segments in ``params`` are reshaped views into it. ``forward`` maps an
input batch to probabilities and ``backward`` maps an upstream sensitivity
(d loss / d probability, same shape as the forward output) to a flat gradient
aligned with ``theta``.

Input conventions:

* pair models (MF, GMF, H-pairwise): int array of shape (N, 2), columns user, item
* MLP models and the logistic model: float array (N, D)
* H-multiclass: tuple ``(embedding (N, D), assumed_true_class)`` where the class
  is an int or an int array of shape (N,)
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigError

KINDS = ("MF", "GMF", "MLP-binary", "MLP-classifier", "H-pairwise", "H-multiclass", "logistic")
PAIR_KINDS = ("MF", "GMF", "H-pairwise")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    latent_dim: int = 32
    widths: tuple[int, ...] = ()
    init_scale: float | None = None
    seed: int = 0
    num_users: int = 0
    num_items: int = 0
    input_dim: int = 0
    num_classes: int = 2

    def with_seed(self, seed: int) -> ModelSpec:
        return ModelSpec(**{**asdict(self), "seed": int(seed)})

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(int(w) for w in d["widths"])
        return cls(**d)


class DifferentiableModel:
    kind = "abstract"
    binary = True

    def __init__(self, spec: ModelSpec, layout: list[tuple[str, tuple[int, ...]]]):
        self.spec = spec
        self.layout = layout
        self.theta = np.zeros(sum(math.prod(s) for _, s in layout))
        self._bind()

    def _bind(self):
        self.params = self._views(self.theta)

    def _views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return out

    def _grad_buffer(self) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        g = np.zeros_like(self.theta)
        return g, self._views(g)

    @property
    def num_params(self) -> int:
        return self.theta.size

    def copy(self) -> DifferentiableModel:
        new = copy.copy(self)
        new.theta = self.theta.copy()
        new._bind()
        return new

    def set_flat(self, values: np.ndarray):
        self.theta[...] = values

    def freeze(self):
        self.theta.flags.writeable = False

    @property
    def frozen(self) -> bool:
        return not self.theta.flags.writeable

    def forward(self, x) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed(self, x) -> np.ndarray:
        raise NotImplementedError

    def segment_slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = slice(off, off + n)
            off += n
        return out


def _gauss(rng, scale, shape):
    return rng.normal(0.0, scale, size=shape)


class MF(DifferentiableModel):
    kind = "MF"

    def __init__(self, spec: ModelSpec):
        d = spec.latent_dim
        super().__init__(spec, [("user", (spec.num_users, d)), ("item", (spec.num_items, d))])
        rng = np.random.default_rng(spec.seed)
        scale = 0.01 if spec.init_scale is None else spec.init_scale
        self.params["user"][...] = _gauss(rng, scale, (spec.num_users, d))
        self.params["item"][...] = _gauss(rng, scale, (spec.num_items, d))

    def logits(self, x):
        u, i = x[:, 0], x[:, 1]
        return np.einsum("nd,nd->n", self.params["user"][u], self.params["item"][i])

    def forward(self, x):
        return expit(self.logits(x))

    def backward(self, x, upstream):
        u, i = x[:, 0], x[:, 1]
        p = self.forward(x)
        dz = upstream * p * (1.0 - p)
        g, gv = self._grad_buffer()
        np.add.at(gv["user"], u, dz[:, None] * self.params["item"][i])
        np.add.at(gv["item"], i, dz[:, None] * self.params["user"][u])
        return g

    def embed(self, x):
        return np.concatenate([self.params["user"][x[:, 0]], self.params["item"][x[:, 1]]], axis=1)

    def score_users(self, users: np.ndarray) -> np.ndarray:
        return expit(self.params["user"][users] @ self.params["item"].T)


class GMF(MF):
    """MF with a learned weight vector over the elementwise product."""

    kind = "GMF"

    def __init__(self, spec: ModelSpec):
        d = spec.latent_dim
        DifferentiableModel.__init__(
            self, spec,
            [("user", (spec.num_users, d)), ("item", (spec.num_items, d)), ("out", (d,))],
        )
        rng = np.random.default_rng(spec.seed)
        scale = 0.01 if spec.init_scale is None else spec.init_scale
        self.params["user"][...] = _gauss(rng, scale, (spec.num_users, d))
        self.params["item"][...] = _gauss(rng, scale, (spec.num_items, d))
        # output weights near one so GMF starts close to MF
        self.params["out"][...] = 1.0 + _gauss(rng, scale, (d,))

    def logits(self, x):
        u, i = x[:, 0], x[:, 1]
        return (self.params["user"][u] * self.params["item"][i]) @ self.params["out"]

    def backward(self, x, upstream):
        u, i = x[:, 0], x[:, 1]
        p = self.forward(x)
        dz = upstream * p * (1.0 - p)
        P, Q, w = self.params["user"][u], self.params["item"][i], self.params["out"]
        g, gv = self._grad_buffer()
        np.add.at(gv["user"], u, dz[:, None] * Q * w)
        np.add.at(gv["item"], i, dz[:, None] * P * w)
        gv["out"][...] = (dz[:, None] * P * Q).sum(axis=0)
        return g

    def score_users(self, users):
        return expit((self.params["user"][users] * self.params["out"]) @ self.params["item"].T)


class HPairwise(MF):
    """Noise-channel model over user-item pairs: MF plus user, item and global biases."""

    kind = "H-pairwise"

    def __init__(self, spec: ModelSpec):
        d = spec.latent_dim
        DifferentiableModel.__init__(
            self, spec,
            [("user", (spec.num_users, d)), ("item", (spec.num_items, d)),
             ("user_bias", (spec.num_users,)), ("item_bias", (spec.num_items,)), ("bias", (1,))],
        )
        rng = np.random.default_rng(spec.seed)
        scale = 0.01 if spec.init_scale is None else spec.init_scale
        self.params["user"][...] = _gauss(rng, scale, (spec.num_users, d))
        self.params["item"][...] = _gauss(rng, scale, (spec.num_items, d))

    def logits(self, x):
        u, i = x[:, 0], x[:, 1]
        return (super().logits(x) + self.params["user_bias"][u]
                + self.params["item_bias"][i] + self.params["bias"][0])

    def backward(self, x, upstream):
        u, i = x[:, 0], x[:, 1]
        p = self.forward(x)
        dz = upstream * p * (1.0 - p)
        g, gv = self._grad_buffer()
        np.add.at(gv["user"], u, dz[:, None] * self.params["item"][i])
        np.add.at(gv["item"], i, dz[:, None] * self.params["user"][u])
        np.add.at(gv["user_bias"], u, dz)
        np.add.at(gv["item_bias"], i, dz)
        gv["bias"][0] = dz.sum()
        return g

    def score_users(self, users):
        P, Q = self.params["user"][users], self.params["item"]
        z = P @ Q.T + self.params["user_bias"][users][:, None] + self.params["item_bias"][None, :]
        return expit(z + self.params["bias"][0])


class _MLP(DifferentiableModel):
    """ReLU feed-forward stack; subclasses choose the output squashing."""

    def __init__(self, spec: ModelSpec, in_dim: int, out_dim: int):
        dims = [in_dim, *spec.widths, out_dim]
        layout = []
        for l in range(len(dims) - 1):
            layout += [(f"W{l}", (dims[l], dims[l + 1])), (f"b{l}", (dims[l + 1],))]
        super().__init__(spec, layout)
        self.n_layers = len(dims) - 1
        rng = np.random.default_rng(spec.seed)
        for l in range(self.n_layers):
            scale = math.sqrt(2.0 / dims[l]) if spec.init_scale is None else spec.init_scale
            self.params[f"W{l}"][...] = _gauss(rng, scale, (dims[l], dims[l + 1]))

    def _stack(self, x):
        acts = [np.asarray(x, dtype=float)]
        for l in range(self.n_layers - 1):
            acts.append(np.maximum(acts[-1] @ self.params[f"W{l}"] + self.params[f"b{l}"], 0.0))
        last = self.n_layers - 1
        z = acts[-1] @ self.params[f"W{last}"] + self.params[f"b{last}"]
        return acts, z

    def _backprop(self, acts, dz):
        g, gv = self._grad_buffer()
        for l in reversed(range(self.n_layers)):
            gv[f"W{l}"][...] = acts[l].T @ dz
            gv[f"b{l}"][...] = dz.sum(axis=0)
            if l > 0:
                dz = (dz @ self.params[f"W{l}"].T) * (acts[l] > 0)
        return g

    def embed(self, x):
        return self._stack(x)[0][-1]


class MLPBinary(_MLP):
    kind = "MLP-binary"

    def __init__(self, spec: ModelSpec):
        super().__init__(spec, spec.input_dim, 1)

    def forward(self, x):
        return expit(self._stack(x)[1][:, 0])

    def backward(self, x, upstream):
        acts, z = self._stack(x)
        p = expit(z[:, 0])
        return self._backprop(acts, (upstream * p * (1.0 - p))[:, None])


class Logistic(MLPBinary):
    kind = "logistic"


class MLPClassifier(_MLP):
    kind = "MLP-classifier"
    binary = False

    def __init__(self, spec: ModelSpec):
        super().__init__(spec, spec.input_dim, spec.num_classes)

    def forward(self, x):
        return softmax(self._stack(x)[1], axis=1)

    def logits(self, x):
        return self._stack(x)[1]

    def backward(self, x, upstream):
        acts, z = self._stack(x)
        p = softmax(z, axis=1)
        dz = p * (upstream - (upstream * p).sum(axis=1, keepdims=True))
        return self._backprop(acts, dz)


class HMulticlass(DifferentiableModel):
    """Two-layer ReLU map from (embedding, one-hot assumed true class) to a class simplex.

    Row c of the output for an example is P(observed = c | true = assumed class, x).
    """

    kind = "H-multiclass"
    binary = False

    def __init__(self, spec: ModelSpec):
        C, D = spec.num_classes, spec.input_dim
        H = spec.widths[0] if spec.widths else 64
        super().__init__(spec, [("W0", (D + C, H)), ("b0", (H,)), ("W1", (H, C)), ("b1", (C,))])
        rng = np.random.default_rng(spec.seed)
        s0 = math.sqrt(2.0 / (D + C)) if spec.init_scale is None else spec.init_scale
        s1 = math.sqrt(2.0 / H) if spec.init_scale is None else spec.init_scale
        self.params["W0"][...] = _gauss(rng, s0, (D + C, H))
        self.params["W1"][...] = _gauss(rng, s1, (H, C))

    def _split(self, x):
        emb, cls = x
        emb = np.asarray(emb, dtype=float)
        cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (emb.shape[0],))
        return emb, cls

    def _hidden(self, emb, cls):
        D = emb.shape[1]
        W0 = self.params["W0"]
        pre = emb @ W0[:D] + W0[D + cls] + self.params["b0"]
        return np.maximum(pre, 0.0)

    def forward(self, x):
        emb, cls = self._split(x)
        a = self._hidden(emb, cls)
        return softmax(a @ self.params["W1"] + self.params["b1"], axis=1)

    def backward(self, x, upstream):
        emb, cls = self._split(x)
        D = emb.shape[1]
        a = self._hidden(emb, cls)
        p = softmax(a @ self.params["W1"] + self.params["b1"], axis=1)
        dz = p * (upstream - (upstream * p).sum(axis=1, keepdims=True))
        g, gv = self._grad_buffer()
        gv["W1"][...] = a.T @ dz
        gv["b1"][...] = dz.sum(axis=0)
        da = (dz @ self.params["W1"].T) * (a > 0)
        gv["W0"][:D] = emb.T @ da
        np.add.at(gv["W0"], D + cls, da)
        gv["b0"][...] = da.sum(axis=0)
        return g

    def embed(self, x):
        emb, cls = self._split(x)
        return self._hidden(emb, cls)


_REGISTRY = {
    "MF": MF, "GMF": GMF, "H-pairwise": HPairwise, "MLP-binary": MLPBinary,
    "MLP-classifier": MLPClassifier, "H-multiclass": HMulticlass, "logistic": Logistic,
}


def build_model(spec: ModelSpec) -> DifferentiableModel:
    if spec.kind not in _REGISTRY:
        raise ConfigError(f"unknown model kind {spec.kind!r}; expected one of {KINDS}")
    if spec.kind in PAIR_KINDS:
        if spec.latent_dim < 1 or spec.num_users < 1 or spec.num_items < 1:
            raise ConfigError(f"{spec.kind} needs positive latent_dim, num_users, num_items")
    else:
        if spec.input_dim < 1:
            raise ConfigError(f"{spec.kind} needs a positive input_dim")
        if spec.kind in ("MLP-binary", "MLP-classifier") and not spec.widths:
            raise ConfigError(f"{spec.kind} needs at least one hidden width")
        if spec.kind == "logistic" and spec.widths:
            raise ConfigError("logistic model takes no hidden widths")
        if any(w < 1 for w in spec.widths):
            raise ConfigError("layer widths must be positive")
        if spec.kind in ("MLP-classifier", "H-multiclass") and spec.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
    return _REGISTRY[spec.kind](spec)


# -- gradient checking -------------------------------------------------------

def finite_difference(fn, theta: np.ndarray, step: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``theta`` (perturbed in place)."""
    idx = range(theta.size) if index is None else index
    out = np.zeros(theta.size)
    flat = theta.reshape(-1)
    for j in idx:
        orig = flat[j]
        flat[j] = orig + step
        hi = fn()
        flat[j] = orig - step
        lo = fn()
        flat[j] = orig
        out[j] = (hi - lo) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_segment: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(model: DifferentiableModel, probe_inputs, tolerance: float = 1e-3,
               step: float = 1e-5, grad_fn=None, seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences on a random linear functional.

    ``grad_fn(x, upstream)`` overrides the analytic gradient (used for negative
    controls). Failure is reported, never raised.
    """
    out = model.forward(probe_inputs)
    w = np.random.default_rng(seed).normal(size=out.shape)
    analytic = (grad_fn or model.backward)(probe_inputs, w)
    numeric = finite_difference(lambda: float(np.sum(w * model.forward(probe_inputs))),
                                model.theta, step)
    rel = relative_error(analytic, numeric)
    per = {name: float(rel[s].max(initial=0.0)) for name, s in model.segment_slices().items()}
    return GradCheckReport(float(rel.max(initial=0.0)), tolerance, per)


# -- checkpoints ---------------------------------------------------------------

def checkpoint_dict(model: DifferentiableModel) -> dict:
    spec = asdict(model.spec)
    spec["widths"] = list(spec["widths"])
    return {
        "format": "deca-checkpoint",
        "version": 1,
        "spec": spec,
        "segments": {name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                     for name, arr in model.params.items()},
    }


def model_from_checkpoint(d: dict) -> DifferentiableModel:
    model = build_model(ModelSpec.from_dict(d["spec"]))
    for name, seg in d["segments"].items():
        model.params[name][...] = np.asarray(seg["values"], dtype=float).reshape(seg["shape"])
    return model


def save_checkpoint(model: DifferentiableModel, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model)))


def load_checkpoint(path) -> DifferentiableModel:
    return model_from_checkpoint(json.loads(Path(path).read_text()))
