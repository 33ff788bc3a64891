"""First-order optimizers updating parameter arrays in place.

Constants follow the usual library defaults; ``eps`` keeps denominators
away from zero.
"""

import numpy as np

from ..errors import NumericError


class Optimizer:
    name = "base"
    default_lr = 0.001

    def __init__(self, lr=None):
        self.lr = self.default_lr if lr is None else float(lr)
        self.state = {}
        self.iterations = 0

    def step(self, params, grads):
        """Apply one update to each array in ``params`` (modified in place)."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"{self.name}: non-finite gradient")
        self.iterations += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ValueError(f"parameter shape {p.shape} != gradient shape {g.shape}")
            self._update(i, p, g)

    def _slot(self, i, name, like):
        return self.state.setdefault((i, name), np.zeros_like(like))

    def _update(self, i, p, g):
        raise NotImplementedError


class SGD(Optimizer):
    name = "sgd"
    default_lr = 0.001

    def _update(self, i, p, g):
        p -= self.lr * g


class Adagrad(Optimizer):
    name = "adagrad"
    default_lr = 0.01

    def __init__(self, lr=None, eps=1e-7):
        super().__init__(lr)
        self.eps = eps

    def _update(self, i, p, g):
        acc = self._slot(i, "acc", p)
        acc += g * g
        p -= self.lr * g / np.sqrt(acc + self.eps)


class RMSprop(Optimizer):
    name = "rmsprop"
    default_lr = 0.001

    def __init__(self, lr=None, rho=0.9, eps=1e-7):
        super().__init__(lr)
        self.rho, self.eps = rho, eps

    def _update(self, i, p, g):
        avg = self._slot(i, "sq", p)
        avg *= self.rho
        avg += (1.0 - self.rho) * g * g
        p -= self.lr * g / np.sqrt(avg + self.eps)


class Adam(Optimizer):
    name = "adam"
    default_lr = 0.001

    def __init__(self, lr=None, beta1=0.9, beta2=0.999, eps=1e-7):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, i, p, g):
        m = self._slot(i, "m", p)
        v = self._slot(i, "v", p)
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        t = self.iterations
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adadelta(Optimizer):
    """Adadelta: step size from the ratio of running RMS(update) to RMS(gradient).

    ``lr`` only rescales the resulting step and is 1.0 by default.
    """

    name = "adadelta"
    default_lr = 1.0

    def __init__(self, lr=None, rho=0.95, eps=1e-7):
        super().__init__(lr)
        self.rho, self.eps = rho, eps

    def _update(self, i, p, g):
        sq = self._slot(i, "sq", p)
        delta_sq = self._slot(i, "delta_sq", p)
        sq *= self.rho
        sq += (1.0 - self.rho) * g * g
        delta = np.sqrt(delta_sq + self.eps) / np.sqrt(sq + self.eps) * g
        delta_sq *= self.rho
        delta_sq += (1.0 - self.rho) * delta * delta
        p -= self.lr * delta


OPTIMIZERS = {cls.name: cls for cls in (Adadelta, Adam, SGD, Adagrad, RMSprop)}


def make_optimizer(name, lr=None):
    try:
        return OPTIMIZERS[name](lr)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}") from None
