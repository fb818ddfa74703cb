"""Dense numerical kernels for training the tracer network from scratch.

Everything runs in float64 on plain numpy arrays. The network is the fixed
stack embedding -> single-layer GRU -> affine + sigmoid readout, trained with
a masked binary cross-entropy on next-step targets. All backward passes are
hand-written for this stack and verified against central finite differences
in the test suite; there is no generic autodiff here on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

Array = np.ndarray

PROB_CLAMP = 1e-12  # applied inside the BCE logarithms only


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class GruParams:
    """Single-layer GRU weights. Input-to-hidden matrices are (d_in, d_h),
    hidden-to-hidden are (d_h, d_h), biases are (d_h,)."""

    w_z: Array
    w_r: Array
    w_h: Array
    u_z: Array
    u_r: Array
    u_h: Array
    b_z: Array
    b_r: Array
    b_h: Array

    @property
    def d_in(self) -> int:
        return self.w_z.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_z.shape[1]

    def flat(self) -> Dict[str, Array]:
        return {
            "w_z": self.w_z, "w_r": self.w_r, "w_h": self.w_h,
            "u_z": self.u_z, "u_r": self.u_r, "u_h": self.u_h,
            "b_z": self.b_z, "b_r": self.b_r, "b_h": self.b_h,
        }


@dataclass
class DktNet:
    """Full parameter set of the tracer network.

    ``embedding`` has one row per interaction token (2K rows for K skills),
    ``w_out``/``b_out`` map the hidden state to per-skill probabilities.
    """

    embedding: Array  # (n_tokens, d_emb)
    gru: GruParams
    w_out: Array      # (d_h, n_out)
    b_out: Array      # (n_out,)

    @property
    def n_tokens(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_emb(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_h(self) -> int:
        return self.gru.d_h

    @property
    def n_out(self) -> int:
        return self.w_out.shape[1]

    def flat(self) -> Dict[str, Array]:
        out = {"embedding": self.embedding}
        out.update(self.gru.flat())
        out.update({"w_out": self.w_out, "b_out": self.b_out})
        return out

    def copy(self) -> "DktNet":
        return from_flat({k: v.copy() for k, v in self.flat().items()})

    def param_count(self) -> int:
        return sum(v.size for v in self.flat().values())


def from_flat(tensors: Dict[str, Array]) -> DktNet:
    """Rebuild a DktNet from a name->array mapping (views, no copies)."""
    return DktNet(
        embedding=tensors["embedding"],
        gru=GruParams(
            w_z=tensors["w_z"], w_r=tensors["w_r"], w_h=tensors["w_h"],
            u_z=tensors["u_z"], u_r=tensors["u_r"], u_h=tensors["u_h"],
            b_z=tensors["b_z"], b_r=tensors["b_r"], b_h=tensors["b_h"],
        ),
        w_out=tensors["w_out"],
        b_out=tensors["b_out"],
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> Array:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_net(n_tokens: int, d_emb: int, d_h: int, n_out: int, seed: int = 0) -> DktNet:
    """Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)) for
    matrices; biases start at zero. Draw order is fixed for reproducibility."""
    rng = np.random.default_rng(seed)
    return DktNet(
        embedding=_glorot(rng, n_tokens, d_emb, (n_tokens, d_emb)),
        gru=GruParams(
            w_z=_glorot(rng, d_emb, d_h, (d_emb, d_h)),
            w_r=_glorot(rng, d_emb, d_h, (d_emb, d_h)),
            w_h=_glorot(rng, d_emb, d_h, (d_emb, d_h)),
            u_z=_glorot(rng, d_h, d_h, (d_h, d_h)),
            u_r=_glorot(rng, d_h, d_h, (d_h, d_h)),
            u_h=_glorot(rng, d_h, d_h, (d_h, d_h)),
            b_z=np.zeros(d_h),
            b_r=np.zeros(d_h),
            b_h=np.zeros(d_h),
        ),
        w_out=_glorot(rng, d_h, n_out, (d_h, n_out)),
        b_out=np.zeros(n_out),
    )


def zero_net(n_tokens: int, d_emb: int, d_h: int, n_out: int) -> DktNet:
    """All-zero parameters; the readout then outputs 0.5 everywhere."""
    return DktNet(
        embedding=np.zeros((n_tokens, d_emb)),
        gru=GruParams(
            w_z=np.zeros((d_emb, d_h)), w_r=np.zeros((d_emb, d_h)), w_h=np.zeros((d_emb, d_h)),
            u_z=np.zeros((d_h, d_h)), u_r=np.zeros((d_h, d_h)), u_h=np.zeros((d_h, d_h)),
            b_z=np.zeros(d_h), b_r=np.zeros(d_h), b_h=np.zeros(d_h),
        ),
        w_out=np.zeros((d_h, n_out)),
        b_out=np.zeros(n_out),
    )


# ---------------------------------------------------------------------------
# embedding


def embed_lookup(indices: Array, table: Array) -> Array:
    """Row gather: output[..., :] = table[indices[...]].

    Out-of-range indices are a hard error, never clamped.
    """
    idx = np.asarray(indices)
    if idx.size:
        lo, hi = int(idx.min()), int(idx.max())
        if lo < 0 or hi >= table.shape[0]:
            raise IndexError(
                f"embedding index out of range: saw [{lo}, {hi}] for table with "
                f"{table.shape[0]} rows"
            )
    return table[idx]


def embed_lookup_backward(indices: Array, d_out: Array, n_rows: int) -> Array:
    """Gradient of embed_lookup w.r.t. the table: one-hot row accumulation."""
    idx = np.asarray(indices).ravel()
    d_emb = d_out.shape[-1]
    grad = np.zeros((n_rows, d_emb))
    np.add.at(grad, idx, d_out.reshape(-1, d_emb))
    return grad


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruTape:
    """Forward intermediates for one batch, recorded for the backward pass."""

    x: Array       # (B, T, d_in)
    h0: Array      # (B, d_h)
    z: Array       # (B, T, d_h)
    r: Array       # (B, T, d_h)
    hcand: Array   # (B, T, d_h)
    h: Array       # (B, T, d_h)
    squeezed: bool = False


def gru_forward(x: Array, p: GruParams, h0: Array | None = None) -> Tuple[Array, GruTape]:
    """Run the GRU recurrence over a (B, T, d_in) batch.

    A 2-D (T, d_in) input is treated as a single sequence and the hidden
    states come back as (T, d_h). Non-finite intermediates raise immediately,
    naming the offending step.
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    b, t_len, d_in = x.shape
    d_h = p.d_h
    if d_in != p.d_in:
        raise ValueError(f"input width {d_in} does not match GRU d_in {p.d_in}")
    if h0 is None:
        h0 = np.zeros((b, d_h))
    else:
        h0 = np.broadcast_to(np.asarray(h0, dtype=np.float64), (b, d_h)).copy()

    z = np.empty((b, t_len, d_h))
    r = np.empty((b, t_len, d_h))
    hcand = np.empty((b, t_len, d_h))
    h = np.empty((b, t_len, d_h))
    h_prev = h0
    for t in range(t_len):
        xt = x[:, t]
        zt = sigmoid(xt @ p.w_z + h_prev @ p.u_z + p.b_z)
        rt = sigmoid(xt @ p.w_r + h_prev @ p.u_r + p.b_r)
        ct = np.tanh(xt @ p.w_h + (rt * h_prev) @ p.u_h + p.b_h)
        ht = (1.0 - zt) * h_prev + zt * ct
        if not np.isfinite(ht).all():
            raise FloatingPointError(f"non-finite GRU hidden state at step {t}")
        z[:, t], r[:, t], hcand[:, t], h[:, t] = zt, rt, ct, ht
        h_prev = ht

    tape = GruTape(x=x, h0=h0, z=z, r=r, hcand=hcand, h=h, squeezed=squeezed)
    return (h[0] if squeezed else h), tape


def gru_backward(p: GruParams, tape: GruTape, dh: Array) -> Tuple[Dict[str, Array], Array, Array]:
    """Backpropagate through time.

    ``dh`` holds dL/dh_t for every step (same shape as the forward hidden
    states). Returns (parameter grads keyed like GruParams.flat(), dL/dx,
    dL/dh0).
    """
    dh = np.asarray(dh, dtype=np.float64)
    if tape.squeezed and dh.ndim == 2:
        dh = dh[None]
    b, t_len, d_h = tape.h.shape

    grads = {name: np.zeros_like(arr) for name, arr in p.flat().items()}
    dx = np.zeros_like(tape.x)
    carry = np.zeros((b, d_h))

    for t in range(t_len - 1, -1, -1):
        xt = tape.x[:, t]
        h_prev = tape.h[:, t - 1] if t > 0 else tape.h0
        zt, rt, ct = tape.z[:, t], tape.r[:, t], tape.hcand[:, t]

        dht = dh[:, t] + carry
        dct = dht * zt
        dzt = dht * (ct - h_prev)
        dh_prev = dht * (1.0 - zt)

        da_h = dct * (1.0 - ct * ct)
        grads["w_h"] += xt.T @ da_h
        grads["u_h"] += (rt * h_prev).T @ da_h
        grads["b_h"] += da_h.sum(axis=0)
        drh = da_h @ p.u_h.T
        drt = drh * h_prev
        dh_prev += drh * rt

        da_z = dzt * zt * (1.0 - zt)
        grads["w_z"] += xt.T @ da_z
        grads["u_z"] += h_prev.T @ da_z
        grads["b_z"] += da_z.sum(axis=0)
        dh_prev += da_z @ p.u_z.T

        da_r = drt * rt * (1.0 - rt)
        grads["w_r"] += xt.T @ da_r
        grads["u_r"] += h_prev.T @ da_r
        grads["b_r"] += da_r.sum(axis=0)
        dh_prev += da_r @ p.u_r.T

        dx[:, t] = da_z @ p.w_z.T + da_r @ p.w_r.T + da_h @ p.w_h.T
        carry = dh_prev

    if tape.squeezed:
        dx = dx[0]
    return grads, dx, carry


# ---------------------------------------------------------------------------
# readout and loss


def readout(h: Array, w_out: Array, b_out: Array) -> Array:
    """Affine map plus elementwise sigmoid; outputs lie in (0, 1)."""
    p = sigmoid(np.asarray(h, dtype=np.float64) @ w_out + b_out)
    if not np.isfinite(p).all():
        raise FloatingPointError("non-finite readout output")
    return p


def masked_bce(p_sel: Array, y: Array, w: Array) -> float:
    """Mean binary cross-entropy over positions where w == 1.

    Positions with w == 0 contribute exactly zero no matter what p or y hold
    there. Probabilities are clamped to [1e-12, 1 - 1e-12] inside the logs
    only.
    """
    p_sel = np.asarray(p_sel, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("masked_bce: no valid targets (mask sums to zero)")
    cp = np.clip(p_sel, PROB_CLAMP, 1.0 - PROB_CLAMP)
    with np.errstate(invalid="ignore"):
        term = y * np.log(cp) + (1.0 - y) * np.log1p(-cp)
    term = np.where(w > 0, term, 0.0)
    return float(-term.sum() / total)


def masked_bce_backward(p_sel: Array, y: Array, w: Array) -> Array:
    """dL/dp for masked_bce; exactly zero at masked positions."""
    p_sel = np.asarray(p_sel, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("masked_bce: no valid targets (mask sums to zero)")
    cp = np.clip(p_sel, PROB_CLAMP, 1.0 - PROB_CLAMP)
    with np.errstate(invalid="ignore"):
        grad = (cp - y) / (cp * (1.0 - cp)) / total
    return np.where(w > 0, grad, 0.0)


# ---------------------------------------------------------------------------
# full-stack forward / backward


@dataclass
class NetTape:
    """Everything the full-stack backward pass needs for one batch."""

    x_idx: Array
    x_emb: Array
    gru: GruTape
    h: Array
    probs: Array


def net_forward(net: DktNet, x_idx: Array) -> Tuple[Array, NetTape]:
    """Token indices (B, T) -> per-skill probabilities (B, T, n_out)."""
    x_idx = np.asarray(x_idx)
    x_emb = embed_lookup(x_idx, net.embedding)
    h, gru_tape = gru_forward(x_emb, net.gru)
    probs = readout(h, net.w_out, net.b_out)
    return probs, NetTape(x_idx=x_idx, x_emb=x_emb, gru=gru_tape, h=h, probs=probs)


def net_loss(net: DktNet, x_idx: Array, s_next: Array, y_next: Array, w: Array) -> float:
    probs, _ = net_forward(net, x_idx)
    b, t_len = np.asarray(x_idx).shape
    sel = probs[np.arange(b)[:, None], np.arange(t_len)[None, :], s_next]
    return masked_bce(sel, y_next, w)


def net_loss_and_grads(
    net: DktNet, x_idx: Array, s_next: Array, y_next: Array, w: Array
) -> Tuple[float, Dict[str, Array]]:
    """Loss plus analytic gradients for every parameter tensor.

    The BCE/sigmoid pair is fused in the backward pass (d logit = w*(p-y)/N),
    which is both exact and stable at saturated probabilities.
    """
    probs, tape = net_forward(net, x_idx)
    x_idx = tape.x_idx
    b, t_len = x_idx.shape
    bi = np.arange(b)[:, None]
    ti = np.arange(t_len)[None, :]
    s_next = np.asarray(s_next)
    y_arr = np.asarray(y_next, dtype=np.float64)
    w_arr = np.asarray(w, dtype=np.float64)

    sel = probs[bi, ti, s_next]
    loss = masked_bce(sel, y_arr, w_arr)

    total = w_arr.sum()
    d_logit_sel = np.where(w_arr > 0, (sel - y_arr) / total, 0.0)
    d_logits = np.zeros_like(probs)
    d_logits[bi, ti, s_next] = d_logit_sel

    h_flat = tape.h.reshape(-1, net.d_h)
    d_flat = d_logits.reshape(-1, net.n_out)
    grads: Dict[str, Array] = {
        "w_out": h_flat.T @ d_flat,
        "b_out": d_flat.sum(axis=0),
    }
    dh = d_logits @ net.w_out.T
    gru_grads, dx_emb, _ = gru_backward(net.gru, tape.gru, dh)
    grads.update(gru_grads)
    grads["embedding"] = embed_lookup_backward(x_idx, dx_emb, net.n_tokens)
    return loss, grads


# ---------------------------------------------------------------------------
# gradient clipping and Adam


def clip_global_norm(grads: Dict[str, Array], max_norm: float = 5.0) -> Dict[str, Array]:
    """Scale all tensors by max_norm/g when the global L2 norm g exceeds
    max_norm; otherwise return them unchanged."""
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: Dict[str, Array]
    v: Dict[str, Array]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Dict[str, Array], lr: float = 1e-3) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            lr=lr,
        )


def adam_update(
    params: Dict[str, Array], grads: Dict[str, Array], state: AdamState
) -> Tuple[Dict[str, Array], AdamState]:
    """One bias-corrected Adam step. Returns fresh parameter arrays; the
    state object is updated in place and returned for convenience."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out: Dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


# ---------------------------------------------------------------------------
# finite-difference verification harness


def fd_max_rel_error(
    loss_fn: Callable[[], float],
    tensors: Dict[str, Array],
    analytic: Dict[str, Array],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic grads and central differences.

    ``loss_fn`` must read the (mutated in place) ``tensors``. Relative error
    is |a - n| / max(|a|, |n|, 1e-8) per entry.
    """
    worst = 0.0
    for name, arr in tensors.items():
        ana = analytic[name]
        flat = arr.reshape(-1)
        ana_flat = ana.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn()
            flat[j] = orig - eps
            lm = loss_fn()
            flat[j] = orig
            num = (lp - lm) / (2.0 * eps)
            rel = abs(ana_flat[j] - num) / max(abs(ana_flat[j]), abs(num), 1e-8)
            if rel > worst:
                worst = rel
    return worst


def grad_check(
    net: DktNet,
    x_idx: Array,
    s_next: Array,
    y_next: Array,
    w: Array,
    eps: float = 1e-5,
    grad_fn: Callable[[DktNet], Dict[str, Array]] | None = None,
) -> float:
    """Verify the full-stack backward pass against central differences.

    Intended for tiny dimensions only (every parameter entry costs two
    forward passes). ``grad_fn`` exists so tests can inject a corrupted
    backward and confirm the harness notices.
    """
    if grad_fn is None:
        analytic = net_loss_and_grads(net, x_idx, s_next, y_next, w)[1]
    else:
        analytic = grad_fn(net)
    return fd_max_rel_error(
        lambda: net_loss(net, x_idx, s_next, y_next, w),
        net.flat(),
        analytic,
        eps=eps,
    )
