"""Rank-adaptive low-rank training engine.

One iteration on a factorized layer runs three stages:

1. **Basis augmentation** -- orthonormalize ``[U | grad_U L]`` and
   ``[V | grad_V L]`` so the latent space contains both the current
   solution and the first-order update direction, projecting the
   coefficients losslessly into the widened bases.
2. **Latent coefficient training** -- a fixed number of optimizer steps
   on the widened coefficient block with the bases frozen, descending
   the regularized objective ``L + reg_strength * R``: the optimizer
   consumes the combined gradient ``grad L + reg_strength * grad R`` at
   step size ``learning_rate``.
3. **Truncation** -- SVD of the trained block, rank chosen by the
   tail-energy rule at threshold ``rel_trunc_tol * ||S_hat||_F`` and
   clamped to the configured bounds; bases contract accordingly and the
   coefficient block becomes diagonal.

Convolutional layers run the same scheme on their feature-mode bases,
with the truncation replaced by a truncated Tucker decomposition of the
core and the penalty applied to the transposed output-mode unfolding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks as attacks_mod
from . import diagnostics, linalg, regularizer
from .layers import Batch, FactorizedLinear, LowRankConv2D, Network
from .regularizer import DivergenceError

OPTIMIZERS = ("sgd", "adam")


@dataclass
class EngineConfig:
    """Every training hyperparameter in one place.

    ``r_max = None`` means "no cap beyond the layer dimensions".  When
    ``fresh_local_batches`` is set, each local coefficient step consumes
    the next minibatch of the epoch instead of re-using the one the bases
    were augmented with.
    """

    learning_rate: float = 1e-3
    reg_strength: float = 0.075
    local_steps: int = 10
    rel_trunc_tol: float = 0.1
    r_min: int = 2
    r_max: int | None = None
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    fresh_local_batches: bool = False

    def validate(self) -> "EngineConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be non-negative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        if not 0 <= self.rel_trunc_tol < 1:
            raise ValueError("rel_trunc_tol must lie in [0, 1)")
        if self.r_min < 1:
            raise ValueError("r_min must be at least 1")
        if self.r_max is not None and self.r_min > self.r_max:
            raise ValueError("r_min must not exceed r_max")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        return self


class _Adam:
    """Standard Adam moments; consumes pre-scaled step directions and
    applies its own ``lr`` on the normalised first moment."""

    def __init__(self, shape, lr, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, direction: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * direction
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * direction**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(cfg: EngineConfig, shape):
    if cfg.optimizer == "adam":
        return _Adam(shape, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return None  # plain SGD applies the direction as-is


@dataclass
class AugmentedState:
    """Widened latent system for one linear-layer iteration."""

    u_hat: np.ndarray
    v_hat: np.ndarray
    s_hat: np.ndarray
    bias: np.ndarray
    activation: str
    moments: object = None

    def as_layer(self) -> FactorizedLinear:
        layer = FactorizedLinear.__new__(FactorizedLinear)
        layer.u, layer.s, layer.v = self.u_hat, self.s_hat, self.v_hat
        layer.bias, layer.activation = self.bias, self.activation
        return layer


@dataclass
class ConvAugmentedState:
    """Widened latent system for one convolution-layer iteration."""

    u_o_hat: np.ndarray
    u_i_hat: np.ndarray
    core_hat: np.ndarray
    bias: np.ndarray
    activation: str
    moments: object = None

    def as_layer(self) -> LowRankConv2D:
        layer = LowRankConv2D.__new__(LowRankConv2D)
        layer.u_o, layer.u_i, layer.core = self.u_o_hat, self.u_i_hat, self.core_hat
        layer.bias, layer.activation = self.bias, self.activation
        return layer


@dataclass
class StepReport:
    """Diagnostics of one engine iteration on one layer."""

    layer: int
    loss: float
    rank: object
    reg_value: float
    kappa: float
    orth_error_left: float
    orth_error_right: float
    augmentation_error: float


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    total_rank: int
    max_kappa: float
    max_reg_value: float

    def as_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "total_rank": self.total_rank,
            "max_kappa": self.max_kappa,
            "max_reg_value": self.max_reg_value,
        }


@dataclass
class TrainResult:
    metrics: list[EpochMetrics] = field(default_factory=list)
    step_reports: list[StepReport] = field(default_factory=list)


def augment(layer: FactorizedLinear, g_u: np.ndarray, g_v: np.ndarray) -> AugmentedState:
    """Widen the bases by the loss gradient directions.

    The widened rank is capped by the layer dimensions (the augmented
    basis cannot have more columns than rows), which makes the state
    rectangular when a layer already sits at full rank on one side.
    Projection of the coefficients into the new bases is lossless because
    the old spans are contained in the new ones.
    """
    r = layer.rank
    if g_u.shape != layer.u.shape or g_v.shape != layer.v.shape:
        raise ValueError("gradient shapes must match the basis shapes")
    k_u = min(2 * r, layer.n_out)
    k_v = min(2 * r, layer.n_in)
    u_hat = linalg.orth(np.hstack([layer.u, g_u])[:, :k_u])
    v_hat = linalg.orth(np.hstack([layer.v, g_v])[:, :k_v])
    s_hat = u_hat.T @ layer.u @ layer.s @ layer.v.T @ v_hat
    return AugmentedState(u_hat, v_hat, s_hat, layer.bias, layer.activation)


def augment_conv(layer: LowRankConv2D, g_u_o: np.ndarray, g_u_i: np.ndarray) -> ConvAugmentedState:
    r_o, r_i = layer.rank
    k_o = min(2 * r_o, layer.n_out)
    k_i = min(2 * r_i, layer.n_in)
    u_o_hat = linalg.orth(np.hstack([layer.u_o, g_u_o])[:, :k_o])
    u_i_hat = linalg.orth(np.hstack([layer.u_i, g_u_i])[:, :k_i])
    core_hat = np.einsum("op,oj,iq,ik,pqac->jkac", layer.u_o, u_o_hat, layer.u_i, u_i_hat, layer.core)
    return ConvAugmentedState(u_o_hat, u_i_hat, core_hat, layer.bias, layer.activation)


def _reg_direction_linear(s_hat: np.ndarray, beta: float) -> np.ndarray:
    """Penalty gradient on the (possibly rectangular) latent block,
    evaluated in the tall orientation so the Gram spectrum carries no
    structural zeros."""
    if beta == 0.0:
        return np.zeros_like(s_hat)
    if s_hat.shape[0] >= s_hat.shape[1]:
        return beta * regularizer.reg_gradient(s_hat)
    return beta * regularizer.reg_gradient(s_hat.T).T


def coefficient_update(network: Network, layer_index: int, state, batches, cfg: EngineConfig):
    """Run ``cfg.local_steps`` optimizer steps on the latent coefficients
    with the bases frozen, descending ``L + reg_strength * R``.

    ``batches`` is a single :class:`Batch` (re-used for every local step)
    or a sequence cycled through step by step.  The loss gradient is
    evaluated through the factored forward pass with the widened bases in
    place of the layer; the optimizer transforms the combined gradient
    (loss plus weighted penalty) and applies it at the learning rate.
    Aborts with the failing step index if the block leaves the finite
    range.
    """
    if isinstance(batches, Batch):
        batches = [batches]
    conv = isinstance(state, ConvAugmentedState)
    block = state.core_hat if conv else state.s_hat
    state.moments = _make_optimizer(cfg, block.shape)

    original = network.layers[layer_index]
    network.layers[layer_index] = state.as_layer()
    try:
        for step in range(cfg.local_steps):
            batch = batches[step % len(batches)]
            _, layer_grads, _ = network.loss_and_grads(batch)
            loss_grad = layer_grads[layer_index].factors["core" if conv else "s"]
            if conv:
                reg_grad = (
                    cfg.reg_strength * regularizer.conv_reg_gradient(block)
                    if cfg.reg_strength
                    else np.zeros_like(block)
                )
            else:
                reg_grad = _reg_direction_linear(block, cfg.reg_strength)
            direction = loss_grad + reg_grad
            if state.moments is None:
                update = cfg.learning_rate * direction
            else:
                update = state.moments.step(direction)
            block = block - update
            if not np.all(np.isfinite(block)):
                raise DivergenceError(
                    f"latent coefficients became non-finite at local step {step}", step=step
                )
            if conv:
                state.core_hat = block
            else:
                state.s_hat = block
            network.layers[layer_index] = state.as_layer()
    finally:
        network.layers[layer_index] = original
    return state


def _rank_window(cfg: EngineConfig, k_left: int, k_right: int) -> tuple[int, int]:
    cap = min(k_left, k_right)
    hi = cap if cfg.r_max is None else min(cfg.r_max, cap)
    lo = min(cfg.r_min, hi)
    return lo, hi


def truncate(state: AugmentedState, cfg: EngineConfig) -> FactorizedLinear:
    """Retract the latent solution to an adapted rank.

    The threshold is ``rel_trunc_tol * ||S_hat||_F``; the resulting rank
    is clamped to ``[r_min, min(r_max, widened rank)]``.  The returned
    coefficient block is the diagonal of kept singular values.
    """
    sv = linalg.svd(state.s_hat)
    threshold = cfg.rel_trunc_tol * float(np.linalg.norm(state.s_hat))
    lo, hi = _rank_window(cfg, state.u_hat.shape[1], state.v_hat.shape[1])
    r1, trunc = linalg.truncate_by_threshold(sv, threshold, lo)
    if r1 > hi:
        r1 = hi
        trunc = linalg.SvdResult(sv.left[:, :hi], sv.singular_values[:hi], sv.right[:, :hi])
    return FactorizedLinear(
        u=state.u_hat @ trunc.left,
        s=np.diag(trunc.singular_values),
        v=state.v_hat @ trunc.right,
        bias=state.bias,
        activation=state.activation,
    )


def truncate_conv(state: ConvAugmentedState, cfg: EngineConfig) -> LowRankConv2D:
    """Tucker analogue of :func:`truncate`: mode-wise SVDs of the widened
    core pick the new feature ranks; the core contracts into the kept
    directions (and stays dense, unlike the matrix case)."""
    core = state.core_hat
    threshold = cfg.rel_trunc_tol * float(np.linalg.norm(core))

    sv_o = linalg.svd(linalg.unfold_output_mode(core))
    lo_o, hi_o = _rank_window(cfg, state.u_o_hat.shape[1], core.shape[1] * core.shape[2] * core.shape[3])
    r_o1, _ = linalg.truncate_by_threshold(sv_o, threshold, lo_o)
    r_o1 = min(r_o1, hi_o)

    sv_i = linalg.svd(linalg.unfold_input_mode(core))
    lo_i, hi_i = _rank_window(cfg, state.u_i_hat.shape[1], core.shape[0] * core.shape[2] * core.shape[3])
    r_i1, _ = linalg.truncate_by_threshold(sv_i, threshold, lo_i)
    r_i1 = min(r_i1, hi_i)

    p = sv_o.left[:, :r_o1]
    q = sv_i.left[:, :r_i1]
    new_core = np.einsum("pj,qk,pqac->jkac", p, q, core)
    return LowRankConv2D(
        u_o=state.u_o_hat @ p,
        u_i=state.u_i_hat @ q,
        core=new_core,
        bias=state.bias,
        activation=state.activation,
    )


def _augmentation_error(layer, state) -> float:
    """Relative Frobenius distance between the original factorization and
    its projection into the widened bases.  Evaluated densely: the
    matrices are desk-scale, and factored norm identities would bury the
    rounding-level residual under catastrophic cancellation."""
    if isinstance(state, AugmentedState):
        dense = state.u_hat @ state.s_hat @ state.v_hat.T
        residual = float(np.linalg.norm(dense - layer.reconstruct()))
        scale = float(np.linalg.norm(layer.s))
    else:
        dense = np.einsum("op,iq,pqac->oiac", state.u_o_hat, state.u_i_hat, state.core_hat)
        residual = float(np.linalg.norm(dense - layer.reconstruct_kernel()))
        scale = float(np.linalg.norm(layer.core))
    return residual / max(scale, 1e-300)


def _bias_key(layer_index: int) -> str:
    return f"bias{layer_index}"


def dlrt_step(
    network: Network,
    layer_index: int,
    batch,
    cfg: EngineConfig,
    shared_grads=None,
    loss: float | None = None,
    bias_moments: dict | None = None,
) -> StepReport:
    """One full engine iteration on one layer: augment the bases with the
    loss-gradient directions, train the latent coefficients, truncate.

    ``shared_grads``/``loss`` carry a backward pass shared across layers
    of the same batch; when omitted a fresh one is evaluated.  The bias is
    updated once per iteration from that shared pass, with persistent
    optimizer moments keyed by layer (shapes never change, unlike the
    coefficient block whose moments are reset every iteration).
    """
    layer = network.layers[layer_index]
    first_batch = batch if isinstance(batch, Batch) else batch[0]
    if shared_grads is None:
        loss, shared_grads, _ = network.loss_and_grads(first_batch)
    grads = shared_grads[layer_index]

    if isinstance(layer, FactorizedLinear):
        state = augment(layer, grads.factors["u"], grads.factors["v"])
    else:
        state = augment_conv(layer, grads.factors["u_o"], grads.factors["u_i"])
    aug_error = _augmentation_error(layer, state)

    state = coefficient_update(network, layer_index, state, batch, cfg)

    if isinstance(state, AugmentedState):
        new_layer = truncate(state, cfg)
    else:
        new_layer = truncate_conv(state, cfg)

    # Bias: plain optimizer step at the learning rate, shared backward pass.
    if bias_moments is not None and cfg.optimizer == "adam":
        key = _bias_key(layer_index)
        if key not in bias_moments:
            bias_moments[key] = _make_optimizer(cfg, new_layer.bias.shape)
        new_layer.bias = new_layer.bias - bias_moments[key].step(cfg.learning_rate * grads.bias)
    else:
        new_layer.bias = new_layer.bias - cfg.learning_rate * grads.bias

    network.layers[layer_index] = new_layer

    spectral = diagnostics.layer_spectral_matrix(new_layer)
    err_left, err_right = new_layer.orthonormality_errors()
    return StepReport(
        layer=layer_index,
        loss=float(loss),
        rank=new_layer.rank,
        reg_value=regularizer.reg_value(spectral).value,
        kappa=linalg.condition_number(spectral),
        orth_error_left=err_left,
        orth_error_right=err_right,
        augmentation_error=aug_error,
    )


def _epoch_batches(dataset, batch_size, rng) -> list[Batch]:
    n = dataset.labels.size
    order = rng.permutation(n)
    size = n if batch_size is None else min(batch_size, n)
    batches = []
    for start in range(0, n, size):
        idx = order[start : start + size]
        batches.append(Batch(dataset.inputs[..., idx], dataset.labels[idx]))
    return batches


def _epoch_metrics(network: Network, dataset, epoch: int, losses) -> EpochMetrics:
    report = diagnostics.spectral_report(network)
    full = Batch(dataset.inputs, dataset.labels)
    return EpochMetrics(
        epoch=epoch,
        loss=float(np.mean(losses)) if len(losses) else math.nan,
        accuracy=100.0 * network.accuracy(full),
        total_rank=sum(row.rank for row in report.rows),
        max_kappa=max(row.kappa for row in report.rows),
        max_reg_value=max(row.reg_value for row in report.rows),
    )


def train(
    network: Network,
    dataset,
    cfg: EngineConfig,
    epochs: int,
    batch_size: int | None = None,
    attack_spec=None,
    attack_seed: int = 0,
) -> TrainResult:
    """Epoch loop: per batch, one shared backward pass feeds a layer-wise
    engine iteration in fixed forward order.  With ``attack_spec`` set,
    every batch is rebuilt as half clean / half attacked against the
    current network before the iteration (adversarial training).

    Deterministic for a fixed config: all shuffling derives from
    ``cfg.seed``.  Divergence aborts with the epoch and batch indices.
    """
    cfg.validate()
    if dataset.labels.size == 0:
        raise ValueError("dataset is empty")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xB47C])))
    attack_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([attack_seed, 0xA77C])))
    result = TrainResult()
    bias_moments: dict = {}

    for epoch in range(epochs):
        batches = _epoch_batches(dataset, batch_size, rng)
        losses = []
        for batch_index, batch in enumerate(batches):
            if attack_spec is not None:
                batch = _mixed_adversarial_batch(network, batch, attack_spec, attack_rng)
            try:
                loss, shared_grads, _ = network.loss_and_grads(batch)
                for layer_index in range(len(network.layers)):
                    local = batch
                    if cfg.fresh_local_batches and len(batches) > 1:
                        local = [batches[(batch_index + k) % len(batches)] for k in range(cfg.local_steps)]
                    report = dlrt_step(
                        network,
                        layer_index,
                        local,
                        cfg,
                        shared_grads=shared_grads,
                        loss=loss,
                        bias_moments=bias_moments,
                    )
                    result.step_reports.append(report)
            except DivergenceError as err:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: {err}"
                ) from err
            losses.append(loss)
        result.metrics.append(_epoch_metrics(network, dataset, epoch, losses))
    return result


def _mixed_adversarial_batch(network: Network, batch: Batch, spec, rng) -> Batch:
    """Keep the first ceil(b/2) samples clean and attack the rest against
    the current network."""
    b = batch.size
    n_clean = (b + 1) // 2
    if n_clean == b:
        return batch
    tail = Batch(batch.inputs[..., n_clean:], batch.labels[n_clean:])
    attacked = attacks_mod.run_attack(network, tail, spec, rng=rng)
    inputs = np.concatenate([batch.inputs[..., :n_clean], attacked.inputs], axis=-1)
    return Batch(inputs, batch.labels)


def adversarial_train(
    network: Network,
    dataset,
    cfg: EngineConfig,
    attack_spec,
    epochs: int,
    batch_size: int | None = None,
    attack_seed: int = 0,
) -> TrainResult:
    """Training with half-clean, half-attacked batches."""
    return train(
        network,
        dataset,
        cfg,
        epochs,
        batch_size=batch_size,
        attack_spec=attack_spec,
        attack_seed=attack_seed,
    )


# ---------------------------------------------------------------------------
# Fresh-layer initialization


def init_factorized_linear(n_out, n_in, rank, activation, rng) -> FactorizedLinear:
    """Scaled-normal dense draw (std sqrt(2 / n_in)) truncated by SVD to
    the requested initial rank; the coefficient block starts diagonal."""
    rank = max(1, min(rank, n_out, n_in))
    dense = rng.standard_normal((n_out, n_in)) * math.sqrt(2.0 / n_in)
    sv = linalg.svd(dense)
    return FactorizedLinear(
        u=sv.left[:, :rank],
        s=np.diag(sv.singular_values[:rank]),
        v=sv.right[:, :rank],
        bias=np.zeros(n_out),
        activation=activation,
    )


def init_lowrank_conv(n_out, n_in, window, rank_out, rank_in, activation, rng) -> LowRankConv2D:
    """Feature-mode truncated Tucker factorization of a scaled-normal
    dense kernel draw."""
    s_w, s_h = window
    rank_out = max(1, min(rank_out, n_out))
    rank_in = max(1, min(rank_in, n_in))
    dense = rng.standard_normal((n_out, n_in, s_w, s_h)) * math.sqrt(2.0 / (n_in * s_w * s_h))
    u_o = linalg.svd(linalg.unfold_output_mode(dense)).left[:, :rank_out]
    u_i = linalg.svd(linalg.unfold_input_mode(dense)).left[:, :rank_in]
    core = np.einsum("op,iq,oiac->pqac", u_o, u_i, dense)
    return LowRankConv2D(u_o=u_o, u_i=u_i, core=core, bias=np.zeros(n_out), activation=activation)
