"""Training steps: first-order baselines and the natural-gradient protocol.

The natural step at iteration k (1-based):

1. forward on the batch, backward with the true targets for the loss
   gradient;
2. on factor-refresh iterations (k == 1 or k % t1 == 0), backward a
   second time with targets sampled from the model's own predictive
   distribution, reusing the same forward pass, and refresh each layer's
   factor pairs (with warm-started solvers and moving-average blending);
3. on inverse-refresh iterations (k == 1 or k % t2 == 0), rebuild the
   damped inverse caches;
4. precondition the layer gradients with the cached inverses, scale by
   the trust-region factor, and descend.

All randomness flows through explicit generators in `TrainState`, so a
run is a pure function of (config, seeds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factorizations as fz
from .linalg import kron, spectrum
from .mlp import MLPModel, backward, batch_loss, exact_fim_block, forward, sample_targets
from .precond import KronApprox, kl_clip, precondition_layer, rebuild_cache, update_factors

__all__ = [
    "FIRST_ORDER_METHODS",
    "SECOND_ORDER_METHODS",
    "RANK2_METHODS",
    "METHODS",
    "OptimizerConfig",
    "TrainState",
    "StepMetrics",
    "ProbeErrors",
    "init_train_state",
    "sgd_step",
    "adam_step",
    "natural_step",
    "first_order_step",
    "train_step",
    "fim_error_probe",
]

FIRST_ORDER_METHODS = ("sgd", "adam")
SECOND_ORDER_METHODS = ("kfac", "kpsvd", "deflation", "lanczos", "kfac_corrected")
RANK2_METHODS = ("deflation", "lanczos", "kfac_corrected")
METHODS = FIRST_ORDER_METHODS + SECOND_ORDER_METHODS


@dataclass
class OptimizerConfig:
    method: str = "kfac"
    lr: float = 1e-2
    damping: float = 1e-2
    clip: float = 1e-2
    ema_decay: float = 0.95
    t1: int = 100
    t2: int = 100
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    seed: int = 0
    svd_eps: float = 1e-6
    svd_max_iters: int = 500
    krylov_dim: int = 6
    max_restarts: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if self.method in SECOND_ORDER_METHODS:
            if self.damping <= 0.0:
                raise ValueError("damping must be > 0 for second-order methods")
            if self.clip <= 0.0:
                raise ValueError("clip must be > 0 for second-order methods")
            if self.t1 < 1 or self.t2 < 1:
                raise ValueError("refresh periods must be >= 1")


@dataclass
class TrainState:
    """Mutable between-step state; create with `init_train_state`."""

    iteration: int = 0
    layer_states: list[KronApprox] | None = None
    velocity: list[np.ndarray] | None = None
    m1: list[np.ndarray] | None = None
    m2: list[np.ndarray] | None = None
    adam_t: int = 0
    sample_rng: np.random.Generator = field(default_factory=np.random.default_rng)


@dataclass
class StepMetrics:
    """What one step reports back to the harness."""

    loss: float
    nu: float = float("nan")
    refreshed: bool = False
    rebuilt: bool = False
    sigma1: list[float] | None = None
    sigma2: list[float] | None = None
    solver_iterations: list[int] | None = None
    precond: list[np.ndarray] | None = None


@dataclass
class ProbeErrors:
    """Relative approximation errors of one method's dense reconstruction."""

    frobenius: float
    spectral: float


def init_train_state(model: MLPModel, config: OptimizerConfig, sample_rng=None) -> TrainState:
    state = TrainState()
    state.sample_rng = sample_rng if sample_rng is not None else np.random.default_rng(config.seed)
    if config.method == "sgd":
        state.velocity = [np.zeros_like(w) for w in model.weights]
    elif config.method == "adam":
        state.m1 = [np.zeros_like(w) for w in model.weights]
        state.m2 = [np.zeros_like(w) for w in model.weights]
    else:
        kind = "rank2" if config.method in RANK2_METHODS else "rank1"
        state.layer_states = [KronApprox(kind) for _ in range(model.n_layers)]
    return state


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocity: list[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Heavy-ball update in place: v <- momentum*v + g, p <- p - lr*v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    m1: list[np.ndarray],
    m2: list[np.ndarray],
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """Bias-corrected adaptive-moment update in place; t is the 1-based step."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, a, b in zip(params, grads, m1, m2):
        a *= beta1
        a += (1.0 - beta1) * g
        b *= beta2
        b += (1.0 - beta2) * g * g
        p -= lr * (a / c1) / (np.sqrt(b / c2) + eps)


def _factorize_layer(
    method: str,
    stats,
    layer: int,
    config: OptimizerConfig,
    warm: tuple[np.ndarray | None, np.ndarray | None],
) -> fz.FactorResult:
    eps, k_max = config.svd_eps, config.svd_max_iters
    if method == "kfac":
        pair = fz.kfac_factors(stats, layer)
        return fz.FactorResult(pairs=(pair,), triplets=(None,))
    if method == "kpsvd":
        return fz.kpsvd_factors(stats, layer, eps, k_max, warm=warm[0])
    if method == "deflation":
        return fz.deflation_factors(stats, layer, eps, k_max, warm=warm)
    if method == "lanczos":
        return fz.lanczos_factors(
            stats, layer, config.krylov_dim, eps, config.max_restarts, warm=warm
        )
    return fz.kfac_corrected_factors(stats, layer, eps, k_max, warm=warm)


def natural_step(
    model: MLPModel,
    batch: tuple[np.ndarray, np.ndarray],
    state: TrainState,
    config: OptimizerConfig,
) -> StepMetrics:
    """One preconditioned descent step; see the module docstring for the protocol."""
    x, y = batch
    acts = forward(model, x)
    loss = batch_loss(acts[-1], y, model.loss)
    if not np.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {loss} at iteration {state.iteration + 1}; "
            f"weight norms {[float(np.linalg.norm(w)) for w in model.weights]}"
        )
    grads, _ = backward(model, acts, y)
    k = state.iteration + 1

    refreshed = k == 1 or k % config.t1 == 0
    sigma1 = sigma2 = iters = None
    if refreshed:
        sampled = sample_targets(acts[-1], model.loss, state.sample_rng)
        _, stats = backward(model, acts, sampled)
        sigma1, sigma2, iters = [], [], []
        for i, ls in enumerate(state.layer_states, start=1):
            result = _factorize_layer(config.method, stats, i, config, ls.warm)
            update_factors(ls, result, k, config.ema_decay)
            sigma1.append(result.sigma(0))
            sigma2.append(result.sigma(1) if len(result.triplets) > 1 else float("nan"))
            iters.append(result.iterations)

    rebuilt = k == 1 or k % config.t2 == 0
    if rebuilt:
        for ls in state.layer_states:
            rebuild_cache(ls, config.damping)

    precond = [precondition_layer(ls, g) for ls, g in zip(state.layer_states, grads)]
    nu, scaled = kl_clip(precond, grads, config.clip)
    for w, d in zip(model.weights, scaled):
        w -= config.lr * d
    state.iteration = k
    return StepMetrics(
        loss=loss,
        nu=nu,
        refreshed=refreshed,
        rebuilt=rebuilt,
        sigma1=sigma1,
        sigma2=sigma2,
        solver_iterations=iters,
        precond=precond,
    )


def first_order_step(
    model: MLPModel,
    batch: tuple[np.ndarray, np.ndarray],
    state: TrainState,
    config: OptimizerConfig,
) -> StepMetrics:
    x, y = batch
    acts = forward(model, x)
    loss = batch_loss(acts[-1], y, model.loss)
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite loss {loss} at iteration {state.iteration + 1}")
    grads, _ = backward(model, acts, y)
    if config.method == "sgd":
        sgd_step(model.weights, grads, state.velocity, config.lr, config.momentum)
    else:
        state.adam_t += 1
        adam_step(
            model.weights,
            grads,
            state.m1,
            state.m2,
            state.adam_t,
            config.lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
        )
    state.iteration += 1
    return StepMetrics(loss=loss)


def train_step(model, batch, state, config) -> StepMetrics:
    if config.method in FIRST_ORDER_METHODS:
        return first_order_step(model, batch, state, config)
    return natural_step(model, batch, state, config)


def _dense_reconstruction(method: str, stats, layer: int, eps, k_max, krylov, seed) -> np.ndarray:
    if method == "kfac":
        p = fz.kfac_factors(stats, layer)
        return kron(p.left, p.right)
    if method == "kpsvd":
        r = fz.kpsvd_factors(stats, layer, eps, k_max, seed=seed)
    elif method == "deflation":
        r = fz.deflation_factors(stats, layer, eps, k_max, seed=seed)
    elif method == "lanczos":
        r = fz.lanczos_factors(stats, layer, krylov, eps, seed=seed)
    else:
        r = fz.kfac_corrected_factors(stats, layer, eps, k_max, seed=seed)
    out = kron(r.pairs[0].left, r.pairs[0].right)
    for p in r.pairs[1:]:
        out = out + kron(p.left, p.right)
    return out


def fim_error_probe(
    model: MLPModel,
    x: np.ndarray,
    layer: int,
    methods: tuple[str, ...] = SECOND_ORDER_METHODS,
    rng: np.random.Generator | None = None,
    eps: float = 1e-6,
    k_max: int = 2000,
    krylov: int = fz.DEFAULT_KRYLOV,
    seed: int = 0,
) -> dict[str, ProbeErrors]:
    """Relative Fisher-approximation errors of each method on one batch.

    Targets are sampled once from the model's predictive distribution and
    every method factors the same statistics, cold-started and without
    moving-average blending, so the numbers compare approximation quality
    alone.  The probed layer must be small enough to materialize densely.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    acts = forward(model, x)
    sampled = sample_targets(acts[-1], model.loss, rng)
    _, stats = backward(model, acts, sampled)
    f = exact_fim_block(stats, layer)
    f_norm = float(np.linalg.norm(f))
    spec_f = spectrum(f)
    spec_norm = float(np.linalg.norm(spec_f))
    out = {}
    for method in methods:
        fhat = _dense_reconstruction(method, stats, layer, eps, k_max, krylov, seed)
        frob = float(np.linalg.norm(f - fhat)) / f_norm
        spec_err = float(np.linalg.norm(spec_f - spectrum(fhat))) / spec_norm
        out[method] = ProbeErrors(frob, spec_err)
    return out
