"""White-box evasion attacks on :class:`~robusteval.nncore.Model` classifiers.

All attacks accept either one ``(h, w, b)`` image or an ``(n, h, w, b)``
batch, run the model in inference mode, and keep pixels inside ``[0, 1]``.
FGSM, BIM and PGD follow the cross-entropy gradient; JSMA, C&W and DeepFool
work on the raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

KINDS = ("fgsm", "bim", "pgd", "jsma", "cw", "deepfool")
DEFAULT_ITERATIONS = {"fgsm": 1, "bim": 10, "pgd": 40, "jsma": 1, "cw": 100, "deepfool": 50}

# tanh(±W_LIMIT) keeps C&W outputs strictly inside (0, 1) in float64
W_LIMIT = 10.0


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    eps: float = 0.1
    step_size: float = 0.01
    iterations: int | None = None
    jsma_theta: float = 1.0
    jsma_gamma: float = 0.1
    cw_c_init: float = 0.01
    cw_lr: float = 0.01
    cw_binary_steps: int = 5
    cw_kappa: float = 0.0
    deepfool_overshoot: float = 0.02
    target: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {KINDS}")
        if self.iterations is None:
            object.__setattr__(self, "iterations", DEFAULT_ITERATIONS[self.kind])
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.jsma_gamma <= 1:
            raise ValueError("jsma_gamma must lie in (0, 1]")
        if self.deepfool_overshoot < 0:
            raise ValueError("deepfool_overshoot must be >= 0")
        if self.cw_binary_steps < 1:
            raise ValueError("cw_binary_steps must be >= 1")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class AttackResult:
    """Adversarial images plus per-sample bookkeeping.

    For a single input every field is a scalar (and ``adversarial`` an
    ``(h, w, b)`` image); for a batch every field is an array over samples.
    ``queries`` counts backward passes through the model.
    """

    adversarial: np.ndarray
    success: np.ndarray
    queries: np.ndarray
    perturbation_linf: np.ndarray
    perturbation_l2: np.ndarray
    extra: dict = field(default_factory=dict)


def _prepare(model, x, y=None):
    model.require_trained()
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    if y is None:
        return x, None, single
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape == (1,) and len(x) > 1:
        y = np.full(len(x), y[0])
    if y.shape != (len(x),):
        raise ValueError("need one label per input")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return x, y, single


def _result(x, x_adv, success, queries, single, **extra):
    diff = (x_adv - x).reshape(len(x), -1)
    linf = np.abs(diff).max(axis=1) if diff.shape[1] else np.zeros(len(x))
    l2 = np.sqrt((diff * diff).sum(axis=1))
    queries = np.broadcast_to(np.asarray(queries), (len(x),)).copy()
    success = np.asarray(success, dtype=bool)
    if single:
        return AttackResult(
            x_adv[0], bool(success[0]), int(queries[0]), float(linf[0]), float(l2[0]),
            {k: v[0] for k, v in extra.items()},
        )
    return AttackResult(x_adv, success, queries, linf, l2, extra)


def _loss_gradient(model, x, y):
    _, grad, _ = model.loss_and_gradients(x, y, want_params=False)
    return grad


def _sign_steps(model, x, y, start, step, eps, iterations):
    x_adv = start
    lower, upper = x - eps, x + eps
    for _ in range(iterations):
        grad = _loss_gradient(model, x_adv, y)
        x_adv = np.clip(np.clip(x_adv + step * np.sign(grad), lower, upper), 0.0, 1.0)
    return x_adv


def fgsm(model, x, y, cfg=AttackConfig("fgsm")):
    """Fast gradient sign method: ``clip(x + eps * sign(grad_x loss))``."""
    x, y, single = _prepare(model, x, y)
    grad = _loss_gradient(model, x, y)
    x_adv = np.clip(x + cfg.eps * np.sign(grad), 0.0, 1.0)
    return _result(x, x_adv, model.predict(x_adv) != y, 1, single)


def bim(model, x, y, cfg=AttackConfig("bim")):
    """Basic iterative method: repeated sign steps of ``step_size`` projected onto the eps-ball."""
    x, y, single = _prepare(model, x, y)
    x_adv = _sign_steps(model, x, y, x, cfg.step_size, cfg.eps, cfg.iterations)
    return _result(x, x_adv, model.predict(x_adv) != y, cfg.iterations, single)


def pgd(model, x, y, cfg=AttackConfig("pgd")):
    """BIM from a uniformly random start inside the eps-ball (seeded by ``cfg.seed``)."""
    x, y, single = _prepare(model, x, y)
    rng = np.random.default_rng(cfg.seed)
    start = np.clip(x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape), 0.0, 1.0)
    x_adv = _sign_steps(model, x, y, start, cfg.step_size, cfg.eps, cfg.iterations)
    return _result(x, x_adv, model.predict(x_adv) != y, cfg.iterations, single)


# -- JSMA ----------------------------------------------------------------

def saliency_scores(jacobian, target, domain, increase=True):
    """Pairwise saliency scores for one sample.

    ``jacobian`` is ``(classes, features)``. For a pair ``(p, q)`` let
    ``a`` be the summed target-logit derivative and ``b`` the summed
    derivative of all other logits. Increasing pairs need ``a > 0`` and
    ``b < 0`` and score ``a * |b|``; decreasing pairs mirror the signs.
    Ineligible pairs (including ``p == q`` and pixels outside ``domain``)
    score ``-inf``.
    """
    alpha = jacobian[target]
    beta = jacobian.sum(axis=0) - alpha
    if not increase:
        alpha, beta = -alpha, -beta
    a = alpha[:, None] + alpha[None, :]
    b = beta[:, None] + beta[None, :]
    ok = (a > 0) & (b < 0) & domain[:, None] & domain[None, :]
    np.fill_diagonal(ok, False)
    return np.where(ok, -a * b, -np.inf)


def best_pair(jacobian, target, domain, increase=True):
    """Highest-scoring pair ``(p, q)`` with ``p < q``, or ``None`` if no pair is eligible.

    Same result as the first maximum of :func:`saliency_scores` in
    row-major order, computed on the domain pixels only.
    """
    idx = np.flatnonzero(domain)
    alpha = jacobian[target]
    beta = jacobian.sum(axis=0) - alpha
    if not increase:
        alpha, beta = -alpha, -beta
    a, b = alpha[idx], beta[idx]
    score = a[:, None] + a[None, :]
    bsum = b[:, None] + b[None, :]
    ok = (score > 0) & (bsum < 0)
    np.multiply(score, bsum, out=score)
    np.negative(score, out=score)
    score[~ok] = -np.inf
    np.fill_diagonal(score, -np.inf)
    if score.size == 0:
        return None
    best = int(np.argmax(score))
    if not np.isfinite(score.flat[best]):
        return None
    p, q = divmod(best, len(idx))
    return int(idx[p]), int(idx[q])


def jsma(model, x, y, cfg=AttackConfig("jsma")):
    """Targeted Jacobian saliency map attack, perturbing one pixel pair per step.

    The target defaults to ``(y + 1) mod num_classes``. Each step adds
    ``jsma_theta`` to the best-scoring pair; pixels that reach the box
    boundary leave the search domain. The attack stops once the target is
    predicted, no eligible pair remains, or another step would modify more
    than ``jsma_gamma`` of the pixels.
    """
    if model.num_classes < 2:
        raise ValueError("JSMA needs at least two classes")
    x, y, single = _prepare(model, x, y)
    n = len(x)
    d = x[0].size
    if cfg.target is None:
        target = (y + 1) % model.num_classes
    else:
        target = np.full(n, int(cfg.target))
    increase = cfg.jsma_theta >= 0
    max_modified = int(np.floor(cfg.jsma_gamma * d))
    flat = x.reshape(n, d).copy()
    domain = flat < 1.0 if increase else flat > 0.0
    queries = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while True:
        modified = (flat != x.reshape(n, d)).sum(axis=1)
        active &= modified + 2 <= max_modified
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        imgs = flat[idx].reshape((len(idx),) + model.input_shape)
        reached = model.predict(imgs) == target[idx]
        active[idx[reached]] = False
        idx = idx[~reached]
        if len(idx) == 0:
            break
        jac = _chunked_jacobian(model, flat[idx].reshape((len(idx),) + model.input_shape))
        queries[idx] += model.num_classes
        for row, i in enumerate(idx):
            pair = best_pair(jac[row], target[i], domain[i], increase)
            if pair is None:
                active[i] = False
                continue
            for pix in pair:
                flat[i, pix] = min(max(flat[i, pix] + cfg.jsma_theta, 0.0), 1.0)
                if flat[i, pix] in (0.0, 1.0):
                    domain[i, pix] = False
    x_adv = flat.reshape(x.shape)
    success = model.predict(x_adv) == target
    return _result(x, x_adv, success, queries, single, target=target)


def _chunked_jacobian(model, x, chunk=64):
    rows = max(1, chunk * 10 // model.num_classes)
    return np.concatenate([model.jacobian(x[s:s + rows]) for s in range(0, len(x), rows)])


# -- Carlini & Wagner L2 -------------------------------------------------

def _cw_margin(z, y, kappa):
    """``max(Z_y - max_{j != y} Z_j, -kappa)`` and the runner-up class."""
    other = z.copy()
    other[np.arange(len(y)), y] = -np.inf
    runner = other.argmax(axis=1)
    margin = z[np.arange(len(y)), y] - other[np.arange(len(y)), runner]
    return np.maximum(margin, -kappa), margin, runner


def cw_l2(model, x, y, cfg=AttackConfig("cw")):
    """Carlini & Wagner L2 attack (untargeted).

    Minimizes ``||x' - x||^2 + c * max(Z_y - max_{j != y} Z_j, -kappa)``
    over ``x' = (tanh(w) + 1) / 2`` with Adam on ``w``, binary-searching
    ``c`` per sample. Returns the smallest successful perturbation found;
    samples never fooled get the unperturbed starting point.
    """
    x, y, single = _prepare(model, x, y)
    n = len(x)
    rows = np.arange(n)
    w0 = np.arctanh(np.clip(2.0 * x - 1.0, -1.0, 1.0) * np.tanh(W_LIMIT))
    start = (np.tanh(w0) + 1.0) / 2.0
    best_adv = start.copy()
    best_l2 = np.full(n, np.inf)
    c = np.full(n, float(cfg.cw_c_init))
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    queries = np.zeros(n, dtype=np.int64)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    for _ in range(cfg.cw_binary_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        round_success = np.zeros(n, dtype=bool)
        for step in range(cfg.iterations + 1):
            t = np.tanh(w)
            x_adv = (t + 1.0) / 2.0
            delta = x_adv - x
            l2sq = (delta * delta).reshape(n, -1).sum(axis=1)
            z, caches = model._forward(x_adv)
            f, margin, runner = _cw_margin(z, y, cfg.cw_kappa)
            fooled = margin + cfg.cw_kappa < 0
            better = fooled & (l2sq < best_l2)
            best_l2[better] = l2sq[better]
            best_adv[better] = x_adv[better]
            round_success |= fooled
            if step == cfg.iterations:
                break
            upstream = np.zeros_like(z)
            live = margin > -cfg.cw_kappa
            upstream[rows[live], y[live]] = c[live]
            upstream[rows[live], runner[live]] = -c[live]
            gz, _ = model._backward(upstream, caches, want_params=False)
            queries += 1
            grad = (2.0 * delta + gz) * (1.0 - t * t) / 2.0
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** (step + 1))
            v_hat = v / (1 - beta2 ** (step + 1))
            w = np.clip(w - cfg.cw_lr * m_hat / (np.sqrt(v_hat) + adam_eps), -W_LIMIT, W_LIMIT)
        upper = np.where(round_success, np.minimum(upper, c), upper)
        lower = np.where(round_success, lower, np.maximum(lower, c))
        bounded = upper < 1e9
        c = np.where(bounded, (lower + upper) / 2.0, c * 10.0)
    success = np.isfinite(best_l2)
    return _result(x, best_adv, success, queries, single, best_c=upper)


# -- DeepFool --------------------------------------------------------------

def deepfool(model, x, cfg=AttackConfig("deepfool")):
    """DeepFool: repeated linearized steps to the nearest decision boundary.

    Each iteration picks the class ``l`` minimizing ``|f_l| / ||w_l||``
    (logit and gradient differences to the original class) and adds the
    minimal step ``|f_l| / ||w_l||^2 * w_l`` to the accumulated ``r``.
    Gradient components that would push a pixel already sitting on the box
    boundary further out are zeroed first, so clipping cannot stall the
    iteration short of the boundary. The candidate
    ``clip(x + (1 + overshoot) * r)`` is re-linearized until the original
    class no longer has the strictly largest logit. Success means the final
    argmax differs from the original prediction.
    """
    x, _, single = _prepare(model, x)
    n, d = len(x), x[0].size
    scale = 1.0 + cfg.deepfool_overshoot
    k0 = model.predict(x)
    r = np.zeros((n, d))
    x_adv = x.copy()
    queries = np.zeros(n, dtype=np.int64)
    iterations = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        z = model.logits(x_adv[idx])
        rows = np.arange(len(idx))
        z0 = z[rows, k0[idx]]
        others = z.copy()
        others[rows, k0[idx]] = -np.inf
        # a tie within rounding counts as reaching the boundary
        crossed = others.max(axis=1) >= z0 - 1e-12 * np.maximum(1.0, np.abs(z0))
        active[idx[crossed]] = False
        idx, z, rows = idx[~crossed], z[~crossed], rows[: (~crossed).sum()]
        if len(idx) == 0:
            break
        jac = _chunked_jacobian(model, x_adv[idx])
        queries[idx] += model.num_classes
        iterations[idx] += 1
        w = jac - jac[rows, k0[idx]][:, None, :]
        # a step moves along +w_k; drop components that push saturated pixels out of the box
        flat = x_adv[idx].reshape(len(idx), 1, d)
        w[((w < 0) & (flat <= 0.0)) | ((w > 0) & (flat >= 1.0))] = 0.0
        f = z - z[rows, k0[idx]][:, None]
        norms = np.sqrt((w * w).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / norms
        dist[rows, k0[idx]] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = dist.argmin(axis=1)
        stuck = ~np.isfinite(dist[rows, best])
        active[idx[stuck]] = False
        keep = ~stuck
        idx, rows, best = idx[keep], rows[keep], best[keep]
        wl = w[rows, best]
        step = (np.abs(f[rows, best]) / (norms[rows, best] ** 2))[:, None] * wl
        r[idx] += step
        x_adv[idx] = np.clip(x[idx] + scale * r[idx].reshape((len(idx),) + x.shape[1:]), 0.0, 1.0)
    success = model.predict(x_adv) != k0
    return _result(x, x_adv, success, queries, single, iterations=iterations,
                   original_class=k0, r=r.reshape(x.shape))


def run_attack(model, x, y, cfg):
    """Dispatch on ``cfg.kind``; DeepFool ignores ``y`` (it attacks the current prediction)."""
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg)
    if cfg.kind == "bim":
        return bim(model, x, y, cfg)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg)
    if cfg.kind == "jsma":
        return jsma(model, x, y, cfg)
    if cfg.kind == "cw":
        return cw_l2(model, x, y, cfg)
    return deepfool(model, x, cfg)
