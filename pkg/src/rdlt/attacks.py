"""White-box adversarial example generation and robustness evaluation.

Four attacks are provided, all bounded by an element-wise clamp onto the
infinity ball of radius ``epsilon`` around the clean input:

* ``fgsm_l2`` -- one gradient step normalised by its per-sample infinity
  norm.
* ``fgsm_l1`` -- one sign-gradient step scaled by the reciprocal
  per-channel standard deviation of the training data.
* ``jitter``  -- iterated steps on a squared-error loss taken against a
  noise-perturbed, scale-normalised softmax of the logits.
* ``mixup``   -- iterated steps on a scale-invariance loss (cross entropy
  of the input at five dyadic down-scalings, minus a KL term keeping the
  perturbed predictions close to the clean ones), followed by a random
  Beta-weighted interpolation with the clean input.

Attacks are read-only on the model; randomness comes from a caller-seeded
generator, so identical (seed, spec, model, batch) reproduce bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .layers import Batch, Network, softmax

ATTACK_KINDS = ("fgsm_l2", "fgsm_l1", "jitter", "mixup")

_ZERO_GRAD_TOL = 1e-14


@dataclass
class AttackSpec:
    """Attack kind plus every knob it needs.

    ``alpha`` and ``iterations`` default per kind (step size equal to the
    budget and a single step for FGSM; five iterations for the others,
    with unit step for the interpolation attack).  ``data_std`` is only
    consulted by ``fgsm_l1``.
    """

    kind: str
    epsilon: float
    alpha: float | None = None
    iterations: int | None = None
    jitter_scale: float = 10.0
    jitter_noise: float = 0.1
    mixup_beta: float = 1e-3
    mixup_use_kl: bool = True
    data_std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha is None:
            self.alpha = 1.0 if self.kind == "mixup" else self.epsilon
        if self.iterations is None:
            self.iterations = 1 if self.kind.startswith("fgsm") else 5
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.data_std is not None:
            self.data_std = np.asarray(self.data_std, dtype=float)
            if np.any(self.data_std <= 0):
                raise ValueError("data_std entries must be positive")


def clamp_linf(x0: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project ``x`` onto the infinity ball of radius ``epsilon`` around
    ``x0``, element-wise."""
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x.shape}")
    return x0 + np.clip(x - x0, -epsilon, epsilon)


def _per_sample_inf(g: np.ndarray) -> np.ndarray:
    """Infinity norm over everything but the trailing sample axis."""
    return np.abs(g).reshape(-1, g.shape[-1]).max(axis=0)


def _normalized_step(grad: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * grad / ||grad||_inf`` per sample; samples with a
    vanishing gradient receive a zero step."""
    norms = _per_sample_inf(grad)
    safe = np.where(norms < _ZERO_GRAD_TOL, 1.0, norms)
    step = alpha * grad / safe.reshape((1,) * (grad.ndim - 1) + (-1,))
    step[..., norms < _ZERO_GRAD_TOL] = 0.0
    return step


def _input_gradient(network: Network, inputs: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
    logits, caches = network.forward_with_cache(inputs)
    _, grad_in = network.backward_from(caches, grad_logits)
    return grad_in


def _std_shaped(spec: AttackSpec, inputs: np.ndarray) -> np.ndarray:
    std = spec.data_std
    if std.ndim == 0:
        return std
    if std.shape[0] != inputs.shape[0]:
        raise ValueError(
            f"data_std has {std.shape[0]} channels but inputs have {inputs.shape[0]}"
        )
    return std.reshape((-1,) + (1,) * (inputs.ndim - 1))


def fgsm(network: Network, batch: Batch, spec: AttackSpec) -> Batch:
    """Single-step gradient attack on the cross-entropy loss; the ``l2``
    variant normalises by the gradient's infinity norm, the ``l1``
    variant takes the gradient sign scaled by the reciprocal data
    standard deviation."""
    x = batch.inputs.copy()
    if spec.epsilon == 0.0:
        return Batch(x, batch.labels.copy())
    from .layers import cross_entropy

    logits, caches = network.forward_with_cache(x)
    _, grad_logits = cross_entropy(logits, batch.labels)
    _, grad = network.backward_from(caches, grad_logits)

    if spec.kind == "fgsm_l1":
        if spec.data_std is None:
            raise ValueError("fgsm_l1 requires data_std")
        norms = _per_sample_inf(grad)
        step = spec.alpha * np.sign(grad) / _std_shaped(spec, x)
        step[..., norms < _ZERO_GRAD_TOL] = 0.0
    else:
        step = _normalized_step(grad, spec.alpha)
    return Batch(clamp_linf(x, x + step, spec.epsilon), batch.labels.copy())


def _softmax_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the softmax, column-wise."""
    inner = np.sum(upstream * probs, axis=0, keepdims=True)
    return probs * (upstream - inner)


def jitter(network: Network, batch: Batch, spec: AttackSpec, rng=None) -> Batch:
    """Iterated attack on the squared error between a noisy, scale-
    normalised softmax of the logits and the one-hot target; from the
    second iteration on, the loss is divided by the current perturbation
    size (a per-sample scalar, so the normalised step is unchanged)."""
    rng = rng or np.random.default_rng(0)
    x0 = batch.inputs
    x = x0.copy()
    k = network.forward(x0[..., :1]).shape[0]
    onehot = np.zeros((k, batch.size))
    onehot[batch.labels, np.arange(batch.size)] = 1.0

    for it in range(spec.iterations):
        logits, caches = network.forward_with_cache(x)
        scale = np.abs(logits).max(axis=0, keepdims=True)
        scale = np.where(scale == 0.0, 1.0, scale)
        probs = softmax(spec.jitter_scale * logits / scale)
        noisy = probs + spec.jitter_noise * rng.standard_normal(probs.shape)
        diff = noisy - onehot
        weight = np.ones(batch.size)
        if it > 0:
            gap = _per_sample_inf(x - x0)
            weight = np.where(gap < _ZERO_GRAD_TOL, 1.0, gap)
        grad_logits = _softmax_vjp(probs, 2.0 * diff) * spec.jitter_scale / scale / weight
        _, grad = network.backward_from(caches, grad_logits)
        x = clamp_linf(x0, x + _normalized_step(grad, spec.alpha), spec.epsilon)
    return Batch(x, batch.labels.copy())


def _sample_lambda(rng, beta: float, size: int) -> np.ndarray:
    """Beta(beta, beta) interpolation weights via the ratio of two gamma
    draws (with a uniform tiebreak when both underflow to zero, which
    happens routinely for very small shape parameters)."""
    g1 = rng.gamma(beta, 1.0, size)
    g2 = rng.gamma(beta, 1.0, size)
    u = rng.random(size)
    total = g1 + g2
    with np.errstate(invalid="ignore"):
        lam = np.where(total > 0.0, g1 / np.where(total > 0.0, total, 1.0), (u < 0.5).astype(float))
    return lam


def mixup(network: Network, batch: Batch, spec: AttackSpec, rng=None) -> Batch:
    """Iterated scale-invariance attack: the loss sums the cross entropy
    of the input at scales 1/2..1/32 (weighted by ``mixup_beta``) and
    subtracts the KL divergence from the clean predictions; each step is
    followed by a Beta-weighted interpolation with the clean input and
    the clamp."""
    from .layers import cross_entropy

    rng = rng or np.random.default_rng(0)
    x0 = batch.inputs
    x = x0.copy()
    clean_probs = softmax(network.forward(x0)) if spec.mixup_use_kl else None

    for _ in range(spec.iterations):
        grad = np.zeros_like(x)
        for k in range(1, 6):
            scale = 0.5**k
            logits, caches = network.forward_with_cache(x * scale)
            _, grad_logits = cross_entropy(logits, batch.labels)
            _, g = network.backward_from(caches, grad_logits)
            grad += spec.mixup_beta * scale * g
        if spec.mixup_use_kl:
            logits, caches = network.forward_with_cache(x)
            probs = softmax(logits)
            ratio = np.log(np.maximum(probs, 1e-300)) - np.log(np.maximum(clean_probs, 1e-300))
            _, g_kl = network.backward_from(caches, _softmax_vjp(probs, ratio))
            grad -= g_kl
        candidate = x + _normalized_step(grad, spec.alpha)
        lam = _sample_lambda(rng, spec.mixup_beta, batch.size)
        lam = lam.reshape((1,) * (x.ndim - 1) + (-1,))
        x = clamp_linf(x0, lam * x0 + (1.0 - lam) * candidate, spec.epsilon)
    return Batch(x, batch.labels.copy())


def run_attack(network: Network, batch: Batch, spec: AttackSpec, seed: int = 0, rng=None) -> Batch:
    """Dispatch on the attack kind; ``rng`` (or ``seed``) drives all of
    the attack's randomness."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xADD5])))
    if spec.kind in ("fgsm_l2", "fgsm_l1"):
        return fgsm(network, batch, spec)
    if spec.kind == "jitter":
        return jitter(network, batch, spec, rng)
    return mixup(network, batch, spec, rng)


def evaluate_under_attack(
    network: Network,
    dataset,
    spec: AttackSpec,
    seed: int = 0,
    batch_size: int | None = None,
    target_network: Network | None = None,
) -> float:
    """Accuracy (percent) on adversarial examples crafted against
    ``network``; with ``target_network`` set, the examples transfer to it
    for evaluation instead (black-box protocol)."""
    evaluator = target_network if target_network is not None else network
    if evaluator is not network:
        probe = dataset.inputs[..., :1]
        if network.forward(probe).shape != evaluator.forward(probe).shape:
            raise ValueError("source and target models disagree on input/output shapes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xADD5])))
    n = dataset.labels.size
    size = n if batch_size is None else min(batch_size, n)
    correct = 0
    for start in range(0, n, size):
        batch = Batch(dataset.inputs[..., start : start + size], dataset.labels[start : start + size])
        adv = run_attack(network, batch, spec, rng=rng)
        correct += int(np.sum(evaluator.predict(adv.inputs) == adv.labels))
    return 100.0 * correct / n


def blackbox_transfer(
    source: Network, target: Network, dataset, spec: AttackSpec, seed: int = 0, batch_size=None
) -> float:
    """Adversarial examples generated against ``source``, accuracy
    measured on ``target``."""
    return evaluate_under_attack(
        source, dataset, spec, seed=seed, batch_size=batch_size, target_network=target
    )
