"""Low-rank factorized layers with exact reverse-mode gradients.

Two layer kinds are provided:

* :class:`FactorizedLinear` -- ``W = U S V^T`` with orthonormal ``U, V``;
  the forward pass is evaluated right-to-left and never materialises the
  dense product.
* :class:`LowRankConv2D` -- an order-4 kernel factorized on its feature
  modes: channels are projected into a latent space, convolved with the
  small core, and prolonged back (stride 1, zero "same" padding).

Gradients are organised as a per-layer closed-form chain rule rather than
a general tape: the network depth is small and fixed, and this keeps the
factor gradients available in exactly the shapes the training engine
consumes.  Forward and backward are read-only on the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .regularizer import DivergenceError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x  # identity; softmax is fused into the loss (see Network)


def _act_grad(name: str, pre: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient 0 at the kink
        return np.where(pre > 0.0, grad_out, 0.0)
    if name == "tanh":
        t = np.tanh(pre)
        return (1.0 - t * t) * grad_out
    return grad_out


def _check_activation(name: str) -> str:
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return name


@dataclass
class Batch:
    """Inputs with samples on the last axis plus integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ValueError("labels must be a non-empty 1-D index array")
        if self.inputs.shape[-1] != self.labels.size:
            raise ValueError(
                f"batch size mismatch: {self.inputs.shape[-1]} inputs vs {self.labels.size} labels"
            )

    @property
    def size(self) -> int:
        return self.labels.size


@dataclass
class LayerGrads:
    """Per-layer loss gradients in the factor shapes."""

    factors: dict[str, np.ndarray]
    bias: np.ndarray


class FactorizedLinear:
    """Linear layer ``z -> act(U S V^T z + bias)`` with rank-r factors."""

    kind = "linear"

    def __init__(self, u, s, v, bias, activation="identity"):
        self.u = np.asarray(u, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.activation = _check_activation(activation)
        n_out, r = self.u.shape
        if self.s.shape != (r, r):
            raise ValueError(f"coefficient block must be {r}x{r}, got {self.s.shape}")
        if self.v.ndim != 2 or self.v.shape[1] != r:
            raise ValueError(f"right basis must have {r} columns, got {self.v.shape}")
        if self.bias.shape != (n_out,):
            raise ValueError(f"bias must have length {n_out}, got {self.bias.shape}")
        if r > min(n_out, self.v.shape[0]):
            raise ValueError(f"rank {r} exceeds min(n_out, n_in) = {min(n_out, self.v.shape[0])}")

    @property
    def n_out(self) -> int:
        return self.u.shape[0]

    @property
    def n_in(self) -> int:
        return self.v.shape[0]

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def reconstruct(self) -> np.ndarray:
        """Dense weight matrix, for oracles and diagnostics only."""
        return self.u @ self.s @ self.v.T

    def param_count(self) -> int:
        n_out, r = self.u.shape
        return n_out * r + r * r + self.n_in * r + self.bias.size

    def baseline_param_count(self) -> int:
        return self.n_out * self.n_in + self.bias.size

    def forward(self, z: np.ndarray):
        if z.ndim != 2 or z.shape[0] != self.n_in:
            raise ValueError(f"expected input of shape ({self.n_in}, b), got {z.shape}")
        vtz = self.v.T @ z
        pre = self.u @ (self.s @ vtz) + self.bias[:, None]
        return _act(self.activation, pre), (z, vtz, pre)

    def backward(self, cache, grad_out: np.ndarray):
        z, vtz, pre = cache
        g = _act_grad(self.activation, pre, grad_out)
        utg = self.u.T @ g
        grads = LayerGrads(
            factors={
                "u": g @ (self.s @ vtz).T,
                "s": utg @ vtz.T,
                "v": z @ (self.s.T @ utg).T,
            },
            bias=g.sum(axis=1),
        )
        grad_in = self.v @ (self.s.T @ utg)
        return grads, grad_in

    def orthonormality_errors(self) -> tuple[float, float]:
        r = self.rank
        eu = float(np.linalg.norm(self.u.T @ self.u - np.eye(r)))
        ev = float(np.linalg.norm(self.v.T @ self.v - np.eye(r)))
        return eu, ev


class LowRankConv2D:
    """2-D convolution with the kernel factorized on its feature modes.

    The dense kernel is ``C(o,i,a,c) = sum_{p,q} U_O(o,p) U_I(i,q) core(p,q,a,c)``
    and the layer computes (stride 1, zero "same" padding, offsets centred
    for odd windows and floor-centred for even ones)::

        latent_in  = U_I^T  . channels of x
        latent_out = core  (*) latent_in          # small convolution
        y          = U_O . latent_out + bias

    Inputs are (C, W, H, b); outputs (N_O, W, H, b).
    """

    kind = "conv"

    def __init__(self, u_o, u_i, core, bias, activation="identity"):
        self.u_o = np.asarray(u_o, dtype=float)
        self.u_i = np.asarray(u_i, dtype=float)
        self.core = np.asarray(core, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.activation = _check_activation(activation)
        if self.core.ndim != 4:
            raise ValueError(f"core must be order 4, got shape {self.core.shape}")
        r_o, r_i = self.core.shape[:2]
        if self.u_o.shape[1] != r_o or self.u_i.shape[1] != r_i:
            raise ValueError("basis widths do not match the core ranks")
        if r_o > self.u_o.shape[0] or r_i > self.u_i.shape[0]:
            raise ValueError("ranks exceed the channel counts")
        if self.bias.shape != (self.u_o.shape[0],):
            raise ValueError(f"bias must have length {self.u_o.shape[0]}")

    @property
    def n_out(self) -> int:
        return self.u_o.shape[0]

    @property
    def n_in(self) -> int:
        return self.u_i.shape[0]

    @property
    def rank(self) -> tuple[int, int]:
        return self.core.shape[0], self.core.shape[1]

    @property
    def window(self) -> tuple[int, int]:
        return self.core.shape[2], self.core.shape[3]

    def reconstruct_kernel(self) -> np.ndarray:
        return np.einsum("op,iq,pqac->oiac", self.u_o, self.u_i, self.core)

    def param_count(self) -> int:
        r_o, r_i, s_w, s_h = self.core.shape
        return self.n_out * r_o + self.n_in * r_i + r_o * r_i * s_w * s_h + self.bias.size

    def baseline_param_count(self) -> int:
        s_w, s_h = self.window
        return self.n_out * self.n_in * s_w * s_h + self.bias.size

    def _patches(self, latent: np.ndarray) -> np.ndarray:
        """im2col on the latent channels: (r_I*S_W*S_H, W*H*b)."""
        s_w, s_h = self.window
        pw, ph = (s_w - 1) // 2, (s_h - 1) // 2
        r_i, w, h, b = latent.shape
        padded = np.pad(latent, ((0, 0), (pw, s_w - 1 - pw), (ph, s_h - 1 - ph), (0, 0)))
        cols = np.empty((r_i, s_w, s_h, w, h, b))
        for a in range(s_w):
            for c in range(s_h):
                cols[:, a, c] = padded[:, a : a + w, c : c + h, :]
        return cols.reshape(r_i * s_w * s_h, w * h * b)

    def _scatter_patches(self, grad_cols: np.ndarray, w: int, h: int, b: int) -> np.ndarray:
        """Adjoint of :meth:`_patches` (col2im)."""
        s_w, s_h = self.window
        r_i = self.core.shape[1]
        pw, ph = (s_w - 1) // 2, (s_h - 1) // 2
        grad = grad_cols.reshape(r_i, s_w, s_h, w, h, b)
        padded = np.zeros((r_i, w + s_w - 1, h + s_h - 1, b))
        for a in range(s_w):
            for c in range(s_h):
                padded[:, a : a + w, c : c + h, :] += grad[:, a, c]
        return padded[:, pw : pw + w, ph : ph + h, :]

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[0] != self.n_in:
            raise ValueError(f"expected input of shape ({self.n_in}, W, H, b), got {x.shape}")
        _, w, h, b = x.shape
        latent_in = np.einsum("iq,iwhb->qwhb", self.u_i, x)
        cols = self._patches(latent_in)
        core_mat = self.core.reshape(self.core.shape[0], -1)
        latent_out = (core_mat @ cols).reshape(self.core.shape[0], w, h, b)
        pre = np.einsum("op,pwhb->owhb", self.u_o, latent_out) + self.bias[:, None, None, None]
        return _act(self.activation, pre), (x, latent_in, cols, latent_out, pre)

    def backward(self, cache, grad_out: np.ndarray):
        x, latent_in, cols, latent_out, pre = cache
        _, w, h, b = x.shape
        r_o = self.core.shape[0]
        g = _act_grad(self.activation, pre, grad_out)

        d_u_o = np.einsum("owhb,pwhb->op", g, latent_out)
        g_latent_out = np.einsum("op,owhb->pwhb", self.u_o, g).reshape(r_o, -1)
        core_mat = self.core.reshape(r_o, -1)
        d_core = (g_latent_out @ cols.T).reshape(self.core.shape)
        g_cols = core_mat.T @ g_latent_out
        g_latent_in = self._scatter_patches(g_cols, w, h, b)
        d_u_i = np.einsum("iwhb,qwhb->iq", x, g_latent_in)
        grad_in = np.einsum("iq,qwhb->iwhb", self.u_i, g_latent_in)

        grads = LayerGrads(
            factors={"u_o": d_u_o, "u_i": d_u_i, "core": d_core},
            bias=g.sum(axis=(1, 2, 3)),
        )
        return grads, grad_in

    def orthonormality_errors(self) -> tuple[float, float]:
        r_o, r_i = self.rank
        eo = float(np.linalg.norm(self.u_o.T @ self.u_o - np.eye(r_o)))
        ei = float(np.linalg.norm(self.u_i.T @ self.u_i - np.eye(r_i)))
        return eo, ei


def dense_conv2d(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reference dense convolution (same padding, stride 1) by direct
    contraction of the kernel with shifted input windows.  Used as the
    oracle against the factorized pipeline; quadratic and proud of it."""
    n_o, n_i, s_w, s_h = kernel.shape
    _, w, h, b = x.shape
    pw, ph = (s_w - 1) // 2, (s_h - 1) // 2
    padded = np.pad(x, ((0, 0), (pw, s_w - 1 - pw), (ph, s_h - 1 - ph), (0, 0)))
    out = np.zeros((n_o, w, h, b))
    for a in range(s_w):
        for c in range(s_h):
            window = padded[:, a : a + w, c : c + h, :]
            out += np.einsum("oi,iwhb->owhb", kernel[:, :, a, c], window)
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy of ``logits`` (k x b) against integer labels,
    with the log-sum-exp stabilised; also returns the gradient
    ``(softmax(logits) - onehot) / b``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    k, b = logits.shape
    if k < 2:
        raise ValueError("need at least two classes")
    if labels.shape != (b,):
        raise ValueError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    lse = np.log(exp.sum(axis=0))
    loss = float(np.mean(lse - shifted[labels, np.arange(b)]))
    probs = exp / exp.sum(axis=0, keepdims=True)
    grad = probs.copy()
    grad[labels, np.arange(b)] -= 1.0
    return loss, grad / b


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


class Network:
    """A fixed sequence of factorized layers ending in class logits.

    A terminal ``softmax`` activation is fused into the cross-entropy
    loss for stability: :meth:`forward` always exposes logits, and
    :meth:`predict_proba` applies the softmax explicitly.  A conv-to-
    dense transition flattens channels in C-order.
    """

    def __init__(self, layers):
        if not layers:
            raise ValueError("network needs at least one layer")
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_with_cache(x)
        return out

    def forward_with_cache(self, x: np.ndarray):
        value = np.asarray(x, dtype=float)
        caches = []
        for layer in self.layers:
            flat_shape = None
            if isinstance(layer, FactorizedLinear) and value.ndim == 4:
                flat_shape = value.shape
                value = value.reshape(-1, value.shape[-1])
            out, cache = layer.forward(value)
            caches.append((flat_shape, cache))
            value = out
        return value, caches

    def backward_from(self, caches, grad_logits: np.ndarray):
        """Backpropagate an arbitrary upstream gradient on the logits;
        returns per-layer gradients and the gradient w.r.t. the input."""
        grad = grad_logits
        layer_grads: list[LayerGrads] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            flat_shape, cache = caches[i]
            grads, grad = self.layers[i].backward(cache, grad)
            layer_grads[i] = grads
            if flat_shape is not None:
                grad = grad.reshape(flat_shape)
        return layer_grads, grad

    def loss_and_grads(self, batch: Batch):
        """Cross-entropy loss with gradients for every factor, bias, and
        the input.  Aborts with a diagnostic if the loss is non-finite."""
        logits, caches = self.forward_with_cache(batch.inputs)
        loss, grad_logits = cross_entropy(logits, batch.labels)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite ({loss})")
        layer_grads, grad_input = self.backward_from(caches, grad_logits)
        return loss, layer_grads, grad_input

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=0)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x))

    def accuracy(self, batch: Batch) -> float:
        return float(np.mean(self.predict(batch.inputs) == batch.labels))

    def copy(self):
        import copy

        return copy.deepcopy(self)
