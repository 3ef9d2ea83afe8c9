"""Layers with analytic backward passes: linear, layer norm, GELU,
feed-forward, multi-head attention, sinusoidal positions, and L1 loss.

Conventions shared by every layer:

* activations are float64 arrays whose last axis is the feature axis;
  leading axes (batch, time) are arbitrary;
* ``forward`` caches whatever its ``backward`` needs, so each instance
  handles one forward/backward pair at a time;
* ``backward`` takes the loss gradient w.r.t. the layer output, accumulates
  parameter gradients in-place, and returns the gradient w.r.t. the input.
"""

from __future__ import annotations

import numpy as np

from trackmon.nn.core import Module, Param, prefixed, xavier_uniform

_MASK_NEG = -1e30


class Linear(Module):
    """Affine map on the last axis: y = x @ W + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.W = Param(xavier_uniform(rng, d_in, d_out))
        self.b = Param(np.zeros(d_out))
        self._x = None

    def named_params(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.d_in)
        g2 = g.reshape(-1, self.d_out)
        self.W.grad += x2.T @ g2
        self.b.grad += g2.sum(axis=0)
        return (g2 @ self.W.value.T).reshape(self._x.shape)


class Gelu(Module):
    """GELU nonlinearity (tanh form); smooth, so finite differences agree
    with the analytic derivative everywhere."""

    _C = np.sqrt(2.0 / np.pi)
    _A = 0.044715

    def named_params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        x2 = x * x
        u = self._C * (x + self._A * (x2 * x))
        self._t = np.tanh(u)
        return 0.5 * x * (1.0 + self._t)

    def backward(self, g: np.ndarray) -> np.ndarray:
        x, t = self._x, self._t
        du = self._C * (1.0 + (3.0 * self._A) * (x * x))
        dydx = 0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * du)
        return g * dydx


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Param(np.ones(dim))
        self.bias = Param(np.zeros(dim))

    def named_params(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        return self.gain.value * self._xhat + self.bias.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat, inv = self._xhat, self._inv
        lead = tuple(range(g.ndim - 1))
        self.gain.grad += (g * xhat).sum(axis=lead)
        self.bias.grad += g.sum(axis=lead)
        dxhat = g * self.gain.value
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - mean_d - xhat * mean_dx)


class FeedForward(Module):
    """Position-wise two-layer MLP with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.act = Gelu()
        self.lin2 = Linear(hidden, dim, rng)

    def named_params(self):
        return prefixed("lin1", self.lin1) + prefixed("lin2", self.lin2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.lin2.forward(self.act.forward(self.lin1.forward(x)))

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.lin1.backward(self.act.backward(self.lin2.backward(g)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` splits of ``dim``.

    ``forward(q_in, kv_in, key_mask)`` supports self-attention (pass the same
    array twice) and cross-attention.  ``key_mask`` is a (B, Tk) array where
    nonzero marks a valid key; masked keys receive zero attention weight.  A
    query row whose keys are all masked falls back to attending its own
    position only (this degenerate case requires Tq == Tk and exists for
    testability; real inputs always have at least one valid key).

    ``backward`` returns ``(d_q_in, d_kv_in)``; self-attention callers sum
    the two.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.d_head = dim // n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def named_params(self):
        return (
            prefixed("wq", self.wq)
            + prefixed("wk", self.wk)
            + prefixed("wv", self.wv)
            + prefixed("wo", self.wo)
        )

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(
        self,
        q_in: np.ndarray,
        kv_in: np.ndarray,
        key_mask: np.ndarray | None = None,
    ) -> np.ndarray:
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        qh = self._split(self.wq.forward(q_in))
        kh = self._split(self.wk.forward(kv_in))
        vh = self._split(self.wv.forward(kv_in))
        scores = qh @ kh.swapaxes(-1, -2) / np.sqrt(self.d_head)

        fallback = None
        if key_mask is not None:
            valid = np.asarray(key_mask, dtype=bool)
            scores = np.where(valid[:, None, None, :], scores, _MASK_NEG)
            dead = ~valid.any(axis=1)
            if dead.any():
                if tq != tk:
                    raise ValueError(
                        "all keys masked in cross-attention; no fallback exists"
                    )
                fallback = dead

        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        if key_mask is not None:
            e = e * np.asarray(key_mask, dtype=np.float64)[:, None, None, :]
        denom = e.sum(axis=-1, keepdims=True)
        if fallback is not None:
            # dead batch rows: attend the query's own position only
            e[fallback] = np.eye(tq)[None, :, :]
            denom = e.sum(axis=-1, keepdims=True)
        attn = e / denom

        ctx = attn @ vh
        self._qh, self._kh, self._vh = qh, kh, vh
        self._attn = attn
        self._fallback = fallback
        out = self.wo.forward(self._merge(ctx))
        return out

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d_ctx = self._split(self.wo.backward(g))
        attn, qh, kh, vh = self._attn, self._qh, self._kh, self._vh
        d_attn = d_ctx @ vh.swapaxes(-1, -2)
        d_vh = attn.swapaxes(-1, -2) @ d_ctx
        # softmax backward; masked keys carry attn == 0, so their gradient
        # vanishes automatically, and fallback rows are constants
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        if self._fallback is not None:
            d_scores[self._fallback] = 0.0
        d_scores /= np.sqrt(self.d_head)
        d_qh = d_scores @ kh
        d_kh = d_scores.swapaxes(-1, -2) @ qh
        d_q_in = self.wq.backward(self._merge(d_qh))
        d_kv_in = self.wk.backward(self._merge(d_kh)) + self.wv.backward(
            self._merge(d_vh)
        )
        return d_q_in, d_kv_in


def sinusoidal_positions(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (n_positions, dim).

    Even columns carry sin, odd columns cos, with the usual geometric
    wavelength ladder; position 0 is therefore (0, 1, 0, 1, ...).
    """
    if dim % 2 != 0:
        raise ValueError(f"position encoding dim must be even, got {dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient w.r.t. ``pred``.

    The subgradient at exact zeros is taken as 0 (np.sign convention).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad
