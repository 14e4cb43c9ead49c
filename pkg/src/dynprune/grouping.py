"""Differentiable filter-group learning.

Each grouped conv layer owns positive logits ``pi`` of shape (C_out, N). A
relaxed assignment ``alpha`` is drawn with the Gumbel-softmax trick and enters
training only through the group-wise regulariser

    R(W, alpha) = sum_p sum_m |alpha[:, p]|_{1/2} * sqrt(sum_k alpha[k, p]^2 ||W[k, m]||^2)

The upper-level gradient for ``alpha`` uses one unrolled SGD step on the
weights; the mixed second derivative of R is evaluated in closed form.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, DomainError
from .model import ConvLayerSpec, Model
from .optim import Adam, MomentumSGD
from .tensor import Tensor

log = logging.getLogger(__name__)

TAU_GRID = (0.125, 0.25, 0.5, 1.0)


@dataclass
class GroupLearnConfig:
    lam: float = 1e-3
    tau: float = 0.5
    n_groups: int = 2
    unroll_lr: float | None = None  # step size of the one-step adaptation; None -> current weight lr
    alpha_lr: float = 1e-3
    alpha_betas: tuple[float, float] = (0.9, 0.999)
    weight_lr: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 40
    batch_size: int = 128
    seed: int = 0
    # "squared": (sum_k sqrt(a_k))^2, the L_{1/2} quasi-norm; "sum": sum_k sqrt(a_k)
    quasi_norm: str = "squared"
    # "sqrt_dim": lambda_i = lambda * sqrt(C_out * K_h * K_w); "none": lambda_i = lambda
    layer_scaling: str = "sqrt_dim"
    # "exact" or "filter_local" (drops cross-filter terms of the mixed derivative)
    mixed_mode: str = "exact"
    pi_floor: float = 1e-6

    def validate(self) -> "GroupLearnConfig":
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.n_groups < 1:
            raise ConfigError(f"number of groups must be >= 1, got {self.n_groups}")
        for name in ("alpha_lr", "weight_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.unroll_lr is not None and self.unroll_lr < 0:
            raise ConfigError("unroll_lr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.quasi_norm not in ("squared", "sum"):
            raise ConfigError(f"unknown quasi_norm {self.quasi_norm!r}")
        if self.layer_scaling not in ("sqrt_dim", "none"):
            raise ConfigError(f"unknown layer_scaling {self.layer_scaling!r}")
        if self.mixed_mode not in ("exact", "filter_local"):
            raise ConfigError(f"unknown mixed_mode {self.mixed_mode!r}")
        return self


@dataclass
class GroupParameters:
    logits: dict[str, np.ndarray]  # layer name -> positive (C_out, N)
    tau: float
    n_groups: int

    @classmethod
    def init(cls, model: Model, n_groups: int, tau: float) -> "GroupParameters":
        """All-ones logits for every grouped conv layer."""
        logits = {}
        for name in model.spec.grouped_layers():
            layer = model.spec.layers[model.spec.index_of(name)]
            assert isinstance(layer, ConvLayerSpec)
            logits[name] = np.ones((layer.out_channels, n_groups))
        return cls(logits, tau, n_groups)

    def validate(self) -> None:
        if self.tau <= 0:
            raise DomainError(f"temperature must be positive, got {self.tau}")
        for name, pi in self.logits.items():
            if pi.shape[1] != self.n_groups:
                raise DomainError(f"{name}: logits have {pi.shape[1]} columns, expected {self.n_groups}")
            if not np.all(pi > 0):
                raise DomainError(f"{name}: group logits must be strictly positive")

    def probabilities(self) -> dict[str, np.ndarray]:
        return {k: v / v.sum(axis=1, keepdims=True) for k, v in self.logits.items()}

    def entropy(self) -> dict[str, float]:
        """Mean per-filter entropy (nats) of softmax(log pi)."""
        out = {}
        for k, p in self.probabilities().items():
            out[k] = float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())
        return out


@dataclass
class AlphaSample:
    alpha: dict[str, np.ndarray]
    gumbel: dict[str, np.ndarray]
    tensors: dict[str, Tensor] = field(default_factory=dict)
    pi_tensors: dict[str, Tensor] = field(default_factory=dict)


def draw_gumbel(params: GroupParameters, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {k: rng.gumbel(size=params.logits[k].shape) for k in sorted(params.logits)}


def sample_alpha(
    params: GroupParameters,
    rng: np.random.Generator | None = None,
    gumbel: dict[str, np.ndarray] | None = None,
    differentiable: bool = False,
) -> AlphaSample:
    """Relaxed assignments alpha = softmax((log pi + g) / tau) row-wise.

    Pass ``gumbel`` to freeze the noise. With ``differentiable`` the returned
    sample keeps the tape from ``pi_tensors`` to ``tensors``.
    """
    params.validate()
    if gumbel is None:
        if rng is None:
            raise ValueError("sample_alpha needs an rng or frozen gumbel draws")
        gumbel = draw_gumbel(params, rng)
    alpha, tensors, pis = {}, {}, {}
    for name, pi in params.logits.items():
        p = Tensor(pi, requires_grad=differentiable)
        z = T.scale(T.log(p) + Tensor(gumbel[name]), 1.0 / params.tau)
        a = T.softmax(z, axis=1)
        alpha[name] = a.data
        if differentiable:
            tensors[name], pis[name] = a, p
    return AlphaSample(alpha, gumbel, tensors, pis)


# ---------------------------------------------------------------------------
# regulariser


def layer_scale(weight_shape: tuple[int, ...], config: GroupLearnConfig) -> float:
    """lambda_i / lambda for a conv layer of the given weight shape."""
    if config.layer_scaling == "none":
        return 1.0
    c_out, _, kh, kw = weight_shape
    return math.sqrt(c_out * kh * kw)


def _quasi_tensor(alpha: Tensor, mode: str) -> Tensor:
    col = T.reduce_sum(T.sqrt(alpha), axis=0)
    return T.pow(col, 2.0) if mode == "squared" else col


def _layer_reg_tensor(w: Tensor, alpha: Tensor, mode: str) -> Tensor:
    n2 = T.reduce_sum(T.pow(w, 2.0), axis=(2, 3))  # (C_out, C_in)
    s = T.sqrt(T.matmul(T.transpose(T.pow(alpha, 2.0)), n2))  # (N, C_in)
    c = _quasi_tensor(alpha, mode)  # (N,)
    return T.reduce_sum(c * T.reduce_sum(s, axis=1))


def group_regularizer(weights: dict[str, Tensor], alpha: dict, config: GroupLearnConfig) -> Tensor:
    """Sum over grouped layers of (lambda_i / lambda) * R_i(W_i, alpha_i), on the tape.

    ``alpha`` values may be arrays (treated as constants) or Tensors.
    """
    total = None
    for name in sorted(alpha):
        w = weights[name]
        a = T.as_tensor(alpha[name])
        if a.shape[0] != w.shape[0]:
            raise ValueError(f"{name}: alpha rows {a.shape[0]} vs {w.shape[0]} filters")
        r = T.scale(_layer_reg_tensor(w, a, config.quasi_norm), layer_scale(w.shape, config))
        total = r if total is None else total + r
    return total if total is not None else Tensor(0.0)


def _quasi(alpha: np.ndarray, mode: str):
    r = np.sqrt(alpha)
    col = r.sum(axis=0)
    safe = np.where(r > 0, r, 1.0)
    if mode == "squared":
        c = col * col
        dc = np.where(r > 0, col[None, :] / safe, 0.0)
    else:
        c = col
        dc = np.where(r > 0, 0.5 / safe, 0.0)
    return c, dc


def _parts(w: np.ndarray, alpha: np.ndarray, mode: str):
    n2 = (w * w).sum(axis=(2, 3))
    s = np.sqrt((alpha * alpha).T @ n2)
    inv_s = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    c, dc = _quasi(alpha, mode)
    return n2, s, inv_s, c, dc


def reg_value(w: np.ndarray, alpha: np.ndarray, mode: str = "squared") -> float:
    """Unscaled R for one layer."""
    _, s, _, c, _ = _parts(w, alpha, mode)
    return float((c * s.sum(axis=1)).sum())


def reg_grad_weight(w: np.ndarray, alpha: np.ndarray, mode: str = "squared") -> np.ndarray:
    """dR/dW for one layer (zero where a group channel has zero norm)."""
    _, _, inv_s, c, _ = _parts(w, alpha, mode)
    m = (alpha * alpha) @ (c[:, None] * inv_s)  # (C_out, C_in)
    return w * m[:, :, None, None]


def reg_grad_alpha(w: np.ndarray, alpha: np.ndarray, mode: str = "squared") -> np.ndarray:
    """dR/dalpha for one layer, shape (C_out, N)."""
    n2, s, inv_s, c, dc = _parts(w, alpha, mode)
    return dc * s.sum(axis=1)[None, :] + c[None, :] * alpha * (n2 @ inv_s.T)


def reg_mixed_vp(
    w: np.ndarray, alpha: np.ndarray, v: np.ndarray, mode: str = "squared", filter_local: bool = False
) -> np.ndarray:
    """d/dalpha <dR/dW (W, alpha), v>: the mixed second derivative applied to ``v``.

    With ``filter_local`` each alpha[k, p] only sees its own filter W[k]
    (cross-filter terms through the quasi-norm and the group-channel norm
    are dropped).
    """
    n2, _, inv_s, c, dc = _parts(w, alpha, mode)
    d = (w * v).sum(axis=(2, 3))  # (C_out, C_in)
    a2 = alpha * alpha
    inv_s3 = inv_s**3
    direct = 2.0 * c[None, :] * alpha * (d @ inv_s.T)
    if filter_local:
        quasi = dc * a2 * (d @ inv_s.T)
        norm = -c[None, :] * alpha * a2 * ((d * n2) @ inv_s3.T)
    else:
        A = a2.T @ d  # (N, C_in)
        quasi = dc * (A * inv_s).sum(axis=1)[None, :]
        norm = -c[None, :] * alpha * (n2 @ (A * inv_s3).T)
    return quasi + direct + norm


def reg_grad_weight_tensor(w: np.ndarray, alpha: Tensor, mode: str = "squared") -> Tensor:
    """dR/dW as a tape expression in ``alpha`` (W held constant)."""
    n2 = Tensor((w * w).sum(axis=(2, 3)))
    a2 = T.pow(alpha, 2.0)
    s = T.sqrt(T.matmul(T.transpose(a2), n2))
    c = _quasi_tensor(alpha, mode)
    n_groups, c_in = s.shape
    cb = T.broadcast_to(T.reshape(c, (n_groups, 1)), (n_groups, c_in))
    m = T.matmul(a2, cb * T.safe_reciprocal(s))
    m4 = T.broadcast_to(T.reshape(m, (w.shape[0], w.shape[1], 1, 1)), w.shape)
    return Tensor(w) * m4


# ---------------------------------------------------------------------------
# unrolled bilevel gradient


@dataclass
class AdaptResult:
    adapted: dict[str, Tensor]
    grads: dict[str, np.ndarray]
    loss: float
    reg: float
    lr: float


def _lr(config: GroupLearnConfig, lr: float | None) -> float:
    if lr is not None:
        return lr
    return config.weight_lr if config.unroll_lr is None else config.unroll_lr


def one_step_adapt(
    model: Model,
    alpha: dict[str, np.ndarray],
    config: GroupLearnConfig,
    batch: tuple[np.ndarray, np.ndarray],
    lr: float | None = None,
    update_stats: bool = False,
    alpha_tensors: dict[str, Tensor] | None = None,
) -> AdaptResult:
    """W' = W - eps * dL/dW - eps * lambda * dR/dW (W, alpha).

    Model parameters are left untouched; their ``.grad`` holds the gradient of
    L + lambda R at W afterwards. When ``alpha_tensors`` is given, the grouped
    layers of W' are tape expressions of those tensors.
    """
    eps = _lr(config, lr)
    x, y = batch
    for p in model.parameters():
        p.zero_grad()
    logits = model.forward(x, "train", update_stats=update_stats)
    loss = T.softmax_cross_entropy(logits, y)
    weights = model.conv_weights(list(alpha))
    reg = group_regularizer(weights, alpha, config)
    total = loss + T.scale(reg, config.lam) if config.lam > 0 else loss
    T.backward(total)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    adapted = {k: Tensor(p.data - eps * grads[k]) for k, p in model.params.items()}
    if alpha_tensors:
        for name, a in alpha_tensors.items():
            key = f"{name}.weight"
            w = model.params[key].data
            lam_i = config.lam * layer_scale(w.shape, config)
            g_reg = lam_i * reg_grad_weight(w, alpha[name], config.quasi_norm)
            base = Tensor(w - eps * (grads[key] - g_reg))
            adapted[key] = base - T.scale(reg_grad_weight_tensor(w, a, config.quasi_norm), eps * lam_i)
    return AdaptResult(adapted, grads, float(loss.data), float(reg.data), eps)


@dataclass
class AlphaGradient:
    pi_grad: dict[str, np.ndarray]
    alpha_grad: dict[str, np.ndarray]
    weight_grads: dict[str, np.ndarray]
    loss: float
    reg: float
    outer_loss: float


def upper_objective(
    model: Model, adapted: dict[str, Tensor], alpha: dict, config: GroupLearnConfig, batch
) -> Tensor:
    """L(W') + lambda R(W', alpha) on the batch, batchnorm in train mode without stat updates."""
    x, y = batch
    logits = model.forward(x, "train", params=adapted, update_stats=False)
    out = T.softmax_cross_entropy(logits, y)
    if config.lam > 0:
        w = {n: adapted[f"{n}.weight"] for n in alpha}
        out = out + T.scale(group_regularizer(w, alpha, config), config.lam)
    return out


def alpha_gradient(
    model: Model,
    params: GroupParameters,
    sample: AlphaSample,
    config: GroupLearnConfig,
    batch: tuple[np.ndarray, np.ndarray],
    lr: float | None = None,
    update_stats: bool = False,
) -> AlphaGradient:
    """Gradient of the upper objective w.r.t. pi for one relaxed sample.

    d/dalpha = lambda dR/dalpha (W', alpha)
               - eps lambda d2R/(dalpha dW) (W, alpha) . d/dW' [L(W') + lambda R(W', alpha)]

    chained to pi through the Gumbel-softmax of ``sample`` (same noise).
    The same batch is used for the inner step and the outer evaluation.
    """
    names = sorted(params.logits)
    adapt = one_step_adapt(model, sample.alpha, config, batch, lr, update_stats)
    eps = adapt.lr
    if config.lam == 0:
        zeros = {n: np.zeros_like(params.logits[n]) for n in names}
        return AlphaGradient(zeros, dict(zeros), adapt.grads, adapt.loss, adapt.reg, adapt.loss)

    # only the grouped weights need d/dW'; the backward pass can stop there
    wanted = {f"{n}.weight" for n in names}
    w_prime = {k: Tensor(v.data, requires_grad=k in wanted) for k, v in adapt.adapted.items()}
    a_leaf = {n: Tensor(sample.alpha[n], requires_grad=True) for n in names}
    outer = upper_objective(model, w_prime, a_leaf, config, batch)
    T.backward(outer)

    alpha_grad = {}
    for n in names:
        key = f"{n}.weight"
        w = model.params[key].data
        v = w_prime[key].grad
        lam_i = config.lam * layer_scale(w.shape, config)
        h = reg_mixed_vp(w, sample.alpha[n], v, config.quasi_norm, config.mixed_mode == "filter_local")
        alpha_grad[n] = a_leaf[n].grad - eps * lam_i * h

    pi_grad = chain_to_pi(params, sample, alpha_grad)
    return AlphaGradient(pi_grad, alpha_grad, adapt.grads, adapt.loss, adapt.reg, float(outer.data))


def chain_to_pi(params: GroupParameters, sample: AlphaSample, alpha_grad: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Back-propagate an alpha gradient through the Gumbel-softmax to pi."""
    diff = sample if sample.pi_tensors else sample_alpha(params, gumbel=sample.gumbel, differentiable=True)
    for p in diff.pi_tensors.values():
        p.zero_grad()
    surrogate = None
    for n, g in alpha_grad.items():
        term = T.reduce_sum(diff.tensors[n] * Tensor(g))
        surrogate = term if surrogate is None else surrogate + term
    T.backward(surrogate)
    return {n: diff.pi_tensors[n].grad for n in alpha_grad}


# ---------------------------------------------------------------------------
# training loop


def group_learning_phase(
    model: Model,
    data: tuple[np.ndarray, np.ndarray],
    config: GroupLearnConfig,
    params: GroupParameters | None = None,
    rng: np.random.Generator | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Model, GroupParameters, list[dict]]:
    """Alternate Adam steps on pi (unrolled gradient) and momentum-SGD steps on W.

    The weight step uses the gradient of L + lambda R at the current W (the
    inner step of the unrolled gradient). Gumbel noise is redrawn every step.
    """
    config.validate()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = GroupParameters.init(model, config.n_groups, config.tau) if params is None else params
    x_all, y_all = data
    adam = Adam(config.alpha_lr, config.alpha_betas)
    sgd = MomentumSGD(config.weight_lr, config.momentum, config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        lr = config.weight_lr * config.lr_decay**epoch
        sgd.lr = lr
        order = rng.permutation(len(y_all))
        loss_sum = reg_sum = 0.0
        steps = 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            batch = (x_all[idx], y_all[idx])
            sample = sample_alpha(params, rng, differentiable=True)
            res = alpha_gradient(model, params, sample, config, batch, lr=lr if config.unroll_lr is None else None, update_stats=True)
            if not (np.isfinite(res.loss) and np.isfinite(res.outer_loss)):
                raise DivergenceError(f"group learning diverged at epoch {epoch + 1}, step {steps}: loss {res.loss}")
            new = adam.step(params.logits, res.pi_grad)
            params.logits = {k: np.maximum(v, config.pi_floor) for k, v in new.items()}
            sgd.step(model.params, res.weight_grads)
            loss_sum += res.loss
            reg_sum += res.reg
            steps += 1
        row = {"epoch": epoch + 1, "loss": loss_sum / max(steps, 1), "reg": reg_sum / max(steps, 1), "lr": lr}
        for k, h in params.entropy().items():
            row[f"entropy.{k}"] = h
        history.append(row)
        log.info("group-learn epoch %d loss %.4f reg %.4f", row["epoch"], row["loss"], row["reg"])
        if on_epoch is not None:
            on_epoch(row)
    return model, params, history
