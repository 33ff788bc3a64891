"""Feed-forward classifiers: construction, differentiation, training, persistence."""

from __future__ import annotations

import json
import numbers
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError, ModelStateError, NumericError
from .layers import LAYER_TYPES, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU
from .optim import OPTIMIZERS, make_optimizer

ARCHITECTURES = ("mlp", "cnn")
PROB_FLOOR = 1e-12


@dataclass
class ModelSpec:
    """Hyperparameters of one classifier.

    Fields may hold invalid values (e.g. ``hidden_neurons=None``) so that
    error-seeking test cases can be expressed; :meth:`validate` rejects them.
    """

    architecture: str = "mlp"
    hidden_neurons: int | None = 128
    dropout_rate: float | None = 0.2
    num_classes: int | None = 10
    optimizer: str | None = "adadelta"
    epochs: int = 5
    seed: int = 0
    batch_size: int = 32
    learning_rate: float | None = None

    def validate(self):
        def is_int(v):
            return isinstance(v, numbers.Integral) and not isinstance(v, bool)

        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError("architecture", f"must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if not is_int(self.hidden_neurons) or self.hidden_neurons < 1:
            raise ConfigurationError("hidden_neurons", f"must be an integer >= 1, got {self.hidden_neurons!r}")
        if (
            not isinstance(self.dropout_rate, numbers.Real)
            or isinstance(self.dropout_rate, bool)
            or not 0.0 <= self.dropout_rate < 1.0
        ):
            raise ConfigurationError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate!r}")
        if not is_int(self.num_classes) or self.num_classes < 2:
            raise ConfigurationError("num_classes", f"must be an integer >= 2, got {self.num_classes!r}")
        if self.optimizer is None or str(self.optimizer).lower() not in OPTIMIZERS:
            raise ConfigurationError("optimizer", f"must be one of {tuple(OPTIMIZERS)}, got {self.optimizer!r}")
        if not is_int(self.epochs) or self.epochs < 1:
            raise ConfigurationError("epochs", f"must be an integer >= 1, got {self.epochs!r}")
        if not is_int(self.batch_size) or self.batch_size < 1:
            raise ConfigurationError("batch_size", f"must be an integer >= 1, got {self.batch_size!r}")
        return self


@dataclass
class GradientBundle:
    loss: float
    input_gradient: np.ndarray
    parameter_gradients: list = field(default_factory=list)


class Model:
    """A stack of layers mapping ``(n, h, w, b)`` images to ``num_classes`` logits.

    The model is read-only during inference: caches live on the call stack,
    so ``logits``/``loss_and_gradients``/``jacobian`` may run concurrently.
    """

    def __init__(self, layers, input_shape, num_classes, spec=None, trained=False):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.spec = spec
        self.trained = trained
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ConfigurationError("num_classes", f"layers produce {shape}, expected ({self.num_classes},)")

    # -- parameters -----------------------------------------------------
    def parameters(self):
        """Flat list of parameter arrays (views, mutable)."""
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    # -- evaluation -----------------------------------------------------
    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x, single

    def _forward(self, x, mode="infer", rng=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode, rng)
            caches.append(cache)
        return x, caches

    def _backward(self, grad, caches, want_params=True):
        pgrads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, g = layer.backward(grad, cache)
            if want_params:
                pgrads.append([g[k] for k in sorted(g)])
        flat = [g for layer_grads in reversed(pgrads) for g in layer_grads]
        return grad, flat

    def logits(self, x):
        x, single = self._batch(x)
        z, _ = self._forward(x)
        return z[0] if single else z

    def predict_proba(self, x, mode="infer", rng=None):
        x, single = self._batch(x)
        z, _ = self._forward(x, mode, rng)
        p = softmax(z)
        return p[0] if single else p

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def loss_and_gradients(self, x, y, mode="infer", rng=None, want_params=True):
        """Cross-entropy of each sample and its exact derivatives.

        Returns ``(losses, input_gradients, parameter_gradients)`` where the
        input gradient of sample ``i`` is that of its own loss, and parameter
        gradients are of the summed loss.
        """
        x, _ = self._batch(x)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if y.shape != (len(x),):
            raise ValueError("need one label per input")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        z, caches = self._forward(x, mode, rng)
        losses, grad = cross_entropy(z, y)
        dx, pgrads = self._backward(grad, caches, want_params)
        return losses, dx, pgrads

    def logit_gradient(self, x, c):
        """Input gradient of logit ``c`` (scalar or one class per sample)."""
        x, single = self._batch(x)
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
        z, caches = self._forward(x)
        upstream = np.zeros_like(z)
        upstream[np.arange(len(x)), c] = 1.0
        dx, _ = self._backward(upstream, caches, want_params=False)
        return dx[0] if single else dx

    def jacobian(self, x):
        """Logit Jacobian, shape ``(n, num_classes, h*w*b)`` (or without ``n``).

        Computed in one backward pass over the input tiled ``num_classes``
        times with an identity upstream gradient.
        """
        x, single = self._batch(x)
        n, k = len(x), self.num_classes
        tiled = np.repeat(x, k, axis=0)
        z, caches = self._forward(tiled)
        upstream = np.tile(np.eye(k), (n, 1))
        dx, _ = self._backward(upstream, caches, want_params=False)
        jac = dx.reshape(n, k, -1)
        return jac[0] if single else jac

    def require_trained(self):
        if not self.trained:
            raise ModelStateError("model has not been trained")


def log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(z, y):
    """Per-sample ``-log max(p_y, 1e-12)`` and its gradient w.r.t. the logits."""
    logp = log_softmax(z)
    rows = np.arange(len(y))
    p_y = np.exp(logp[rows, y])
    losses = -np.log(np.maximum(p_y, PROB_FLOOR))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    # clamped region of the loss is flat
    grad[p_y < PROB_FLOOR] = 0.0
    return losses, grad


def _uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _cnn_trunk_shape(shape):
    h, w = shape[:2]
    for _ in range(2):
        h, w = (h - 2) // 2, (w - 2) // 2
    return h - 2, w - 2


def build_model(spec, input_shape):
    """Create a freshly initialized classifier for ``spec``.

    ``mlp``: flatten, dense(N) + ReLU, dropout(R), dense(nb).
    ``cnn``: conv32, pool, conv64, pool, conv64, flatten, dense(64) + ReLU,
    dense(nb). Convolutions are 3x3 valid, pools 2x2. The softmax is applied
    on top of the returned logits by :func:`forward`.
    """
    spec.validate()
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ConfigurationError("input_shape", f"must be (h, w, b), got {input_shape}")
    rng = np.random.default_rng(spec.seed)
    nb = spec.num_classes
    if spec.architecture == "mlp":
        d = int(np.prod(input_shape))
        n = spec.hidden_neurons
        layers = [
            Flatten(),
            Dense(_uniform(rng, (d, n), d), np.zeros(n)),
            ReLU(),
            Dropout(spec.dropout_rate),
            Dense(_uniform(rng, (n, nb), n), np.zeros(nb)),
        ]
    else:
        oh, ow = _cnn_trunk_shape(input_shape)
        if oh < 1 or ow < 1:
            raise ConfigurationError(
                "input_shape", f"cnn needs at least 18x18 inputs, got {input_shape[:2]}"
            )
        b = input_shape[2]

        def conv(cin, cout):
            return Conv2D(_uniform(rng, (3, 3, cin, cout), 9 * cin), np.zeros(cout))

        flat = oh * ow * 64
        layers = [
            conv(b, 32), ReLU(), MaxPool2D(2),
            conv(32, 64), ReLU(), MaxPool2D(2),
            conv(64, 64), ReLU(),
            Flatten(),
            Dense(_uniform(rng, (flat, 64), flat), np.zeros(64)), ReLU(),
            Dense(_uniform(rng, (64, nb), 64), np.zeros(nb)),
        ]
    return Model(layers, input_shape, nb, spec=spec)


def forward(model, x, mode="infer", rng=None):
    """Class probabilities for one image or a batch."""
    return model.predict_proba(x, mode, rng)


def loss_and_gradients(model, x, y, mode="infer", rng=None):
    """Loss ``-log p_y`` of one image with its input and parameter gradients."""
    if np.asarray(x).shape != model.input_shape:
        raise ValueError(f"expected a single {model.input_shape} image")
    losses, dx, pgrads = model.loss_and_gradients(x, [y], mode, rng)
    return GradientBundle(float(losses[0]), dx[0], pgrads)


def logit_jacobian(model, x):
    """``num_classes x (h*w*b)`` matrix of logit derivatives for one image."""
    return model.jacobian(x)


def train(model, ds, epochs=None, batch=None, seed=None, optimizer=None, verbose=False):
    """Mini-batch training on cross-entropy.

    Returns a list with one ``{"epoch", "loss", "accuracy"}`` dict per
    epoch, averaged over the training samples seen in that epoch.
    """
    spec = model.spec or ModelSpec()
    epochs = spec.epochs if epochs is None else epochs
    batch = spec.batch_size if batch is None else batch
    seed = spec.seed if seed is None else seed
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if ds.shape != model.input_shape:
        raise ValueError(f"dataset shape {ds.shape} does not match model input {model.input_shape}")
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if optimizer is None:
        optimizer = make_optimizer(str(spec.optimizer).lower(), spec.learning_rate)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    log = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(ds))
        total_loss, correct = 0.0, 0
        for start in range(0, len(ds), batch):
            idx = order[start:start + batch]
            xb, yb = ds.images[idx], ds.labels[idx]
            x, _ = model._batch(xb)
            z, caches = model._forward(x, "train", rng)
            losses, grad = cross_entropy(z, yb)
            _, pgrads = model._backward(grad / len(yb), caches)
            optimizer.step(params, pgrads)
            total_loss += losses.sum()
            correct += int((z.argmax(axis=1) == yb).sum())
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericError("parameters became non-finite during training")
        entry = {"epoch": epoch, "loss": total_loss / len(ds), "accuracy": correct / len(ds)}
        log.append(entry)
        if verbose:
            print(f"epoch {epoch}: loss={entry['loss']:.4f} accuracy={entry['accuracy']:.4f}")
    model.trained = True
    return log


def evaluate(model, ds, batch=1000):
    """Mean cross-entropy and argmax accuracy of ``model`` on ``ds`` (dropout off)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total, correct = 0.0, 0
    for start in range(0, len(ds), batch):
        xb, yb = ds.images[start:start + batch], ds.labels[start:start + batch]
        z = model.logits(xb)
        losses, _ = cross_entropy(z, yb)
        total += losses.sum()
        correct += int((z.argmax(axis=1) == yb).sum())
    return total / len(ds), correct / len(ds)


# -- persistence ---------------------------------------------------------

def save_model(model, path):
    """Write ``model`` to an ``.npz`` archive: a JSON manifest plus one array per parameter."""
    manifest = {
        "format": "robusteval-model/1",
        "spec": asdict(model.spec) if model.spec is not None else None,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "trained": bool(model.trained),
        "layers": [{"kind": layer.kind, "config": layer.config()} for layer in model.layers],
    }
    arrays = {}
    for i, layer in enumerate(model.layers):
        for name, value in layer.params.items():
            arrays[f"layer{i}.{name}"] = value
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest, sort_keys=True)), **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as archive:
        manifest = json.loads(str(archive["manifest"]))
        if manifest.get("format") != "robusteval-model/1":
            raise ValueError(f"{path}: not a robusteval model archive")
        layers = []
        for i, entry in enumerate(manifest["layers"]):
            cls = LAYER_TYPES[entry["kind"]]
            if cls in (Dense, Conv2D):
                layers.append(cls(archive[f"layer{i}.W"], archive[f"layer{i}.b"]))
            else:
                layers.append(cls(**entry["config"]))
    spec = ModelSpec(**manifest["spec"]) if manifest["spec"] is not None else None
    return Model(layers, manifest["input_shape"], manifest["num_classes"], spec, manifest["trained"])
