"""Desk-scale decoder-only transformer: forward pass, analytic backprop,
finite-difference block Jacobians, and a low-rank gradient-propagation check.

Weights live in a flat name -> float64-array dict with a fixed key order:
"embed", then per block i "block{i}.attn_norm_g", ".wq", ".wk", ".wv", ".wo",
".mlp_norm_g", ".w1", ".w2", then "final_norm_g". Linear layers follow the
row-vector convention y = x @ W and carry no biases; the output head is tied
to the token embedding. There is no positional encoding: position information
enters only through the causal mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import ACTIVATIONS, row_softmax
from .bounds import BoundCheck
from .errors import ShapeError, SizeBudgetError
from .fd import central_diff_jacobian, default_step
from .linalg import numeric_rank
from .rng import SplitMix64
from .spectral import AlignmentResult, alignment

# Norm layers divide by sqrt(var + LN_EPS); the tiny epsilon keeps the exact
# zero-mean/unit-variance row contract to well below 1e-9 for any row whose
# variance exceeds ~1e-15 while still guarding the all-constant-row case.
LN_EPS = 1e-24

# Finite-difference block Jacobians are (T*d)^2; refuse beyond this.
JACOBIAN_BUDGET = 512


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int
    vocab: int
    activation: str = "gelu"
    init_std: float = 0.02
    wo_downscale: bool = True
    zero_query_init: bool = True
    norm: str = "layernorm"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "seq_len", "vocab"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be at least 1")
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("layernorm", "rmsnorm"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.init_std <= 0.0:
            raise ValueError("init_std must be positive")


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Tensor shapes in the canonical (initialization) order."""
    d, dff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {"embed": (cfg.vocab, d)}
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        shapes[pre + "attn_norm_g"] = (d,)
        shapes[pre + "wq"] = (d, d)
        shapes[pre + "wk"] = (d, d)
        shapes[pre + "wv"] = (d, d)
        shapes[pre + "wo"] = (d, d)
        shapes[pre + "mlp_norm_g"] = (d,)
        shapes[pre + "w1"] = (d, dff)
        shapes[pre + "w2"] = (dff, d)
    shapes["final_norm_g"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Gaussian init from one splitmix64 stream consumed in canonical order.

    Norm gains start at one. With cfg.zero_query_init the query weights are
    drawn and then zeroed (stream consumption is identical either way); with
    cfg.wo_downscale the attention output and MLP down projections are scaled
    by 1/sqrt(2 n_layers).
    """
    stream = SplitMix64(seed)
    down = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_g"):
            tensors[name] = np.ones(shape)
            continue
        w = (cfg.init_std * stream.normal(int(np.prod(shape)))).reshape(shape)
        if cfg.zero_query_init and name.endswith(".wq"):
            w = np.zeros(shape)
        elif cfg.wo_downscale and (name.endswith(".wo") or name.endswith(".w2")):
            w = w * down
        tensors[name] = w
    return ModelParams(cfg, tensors)


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).ravel()
    if toks.size < 2:
        raise ValueError("need at least two tokens for next-token loss")
    if toks.size > cfg.seq_len:
        raise ValueError(f"sequence length {toks.size} exceeds seq_len {cfg.seq_len}")
    if toks.min() < 0 or toks.max() >= cfg.vocab:
        raise ValueError("token id out of range")
    return toks


def _norm_rows(x, gain, kind):
    if kind == "layernorm":
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + LN_EPS) * gain
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + LN_EPS)
    return x / rms * gain


def _norm_rows_backward(x, gain, kind, dout):
    """Returns (dx, dgain)."""
    if kind == "layernorm":
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        std = np.sqrt(var + LN_EPS)
        xhat = xc / std
        dgain = (dout * xhat).sum(axis=0)
        dxhat = dout * gain
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) / std
        return dx, dgain
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = x / rms
    dgain = (dout * xhat).sum(axis=0)
    dxhat = dout * gain
    dx = (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / rms
    return dx, dgain


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t)
    if mask is None:
        mask = np.zeros((t, t))
        mask[np.triu_indices(t, k=1)] = -np.inf
        mask.setflags(write=False)
        _MASK_CACHE[t] = mask
    return mask


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(xh):
    h, t, hd = xh.shape
    return xh.transpose(1, 0, 2).reshape(t, h * hd)


def attention_forward(x, wq, wk, wv, wo, n_heads):
    """Causal multi-head attention sublayer; returns (y, cache)."""
    t = x.shape[0]
    hd = x.shape[1] // n_heads
    q, k, v = x @ wq, x @ wk, x @ wv
    qh, kh, vh = (_split_heads(m, n_heads) for m in (q, k, v))
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd) + _causal_mask(t)
    attn = row_softmax(scores)
    zh = attn @ vh
    z = _merge_heads(zh)
    y = z @ wo
    return y, (x, qh, kh, vh, attn, z)


def attention_backward(dy, cache, wq, wk, wv, wo, n_heads):
    """Returns (dx, dwq, dwk, dwv, dwo) for the attention sublayer."""
    x, qh, kh, vh, attn, z = cache
    hd = x.shape[1] // n_heads
    dwo = z.T @ dy
    dz = dy @ wo.T
    dzh = _split_heads(dz, n_heads)
    dattn = dzh @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dzh
    # softmax rows: masked entries have attn == 0, so their score grads vanish
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    ds = ds / math.sqrt(hd)
    dqh = ds @ kh
    dkh = ds.transpose(0, 2, 1) @ qh
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    dwq = x.T @ dq
    dwk = x.T @ dk
    dwv = x.T @ dv
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv, dwo


def block_forward(tensors, i, h, cfg, want_cache=False):
    """One pre-norm residual block: attention sublayer then MLP sublayer."""
    pre = f"block{i}."
    act, _ = ACTIVATIONS[cfg.activation]
    n1 = _norm_rows(h, tensors[pre + "attn_norm_g"], cfg.norm)
    attn_y, attn_cache = attention_forward(
        n1, tensors[pre + "wq"], tensors[pre + "wk"], tensors[pre + "wv"], tensors[pre + "wo"],
        cfg.n_heads,
    )
    h_mid = h + attn_y
    n2 = _norm_rows(h_mid, tensors[pre + "mlp_norm_g"], cfg.norm)
    z1 = n2 @ tensors[pre + "w1"]
    a1 = act(z1)
    h_out = h_mid + a1 @ tensors[pre + "w2"]
    if not want_cache:
        return h_out, None
    return h_out, (h, n1, attn_cache, h_mid, n2, z1, a1)


def _block_backward(tensors, i, cache, dh_out, cfg):
    """Returns (dh_in, grads-for-this-block dict)."""
    pre = f"block{i}."
    _, dact = ACTIVATIONS[cfg.activation]
    h, n1, attn_cache, h_mid, n2, z1, a1 = cache
    w1, w2 = tensors[pre + "w1"], tensors[pre + "w2"]
    grads = {}
    # MLP sublayer
    da1 = dh_out @ w2.T
    grads[pre + "w2"] = a1.T @ dh_out
    dz1 = da1 * dact(z1)
    grads[pre + "w1"] = n2.T @ dz1
    dn2 = dz1 @ w1.T
    dh_mid, grads[pre + "mlp_norm_g"] = _norm_rows_backward(
        h_mid, tensors[pre + "mlp_norm_g"], cfg.norm, dn2
    )
    dh_mid = dh_mid + dh_out  # residual
    # attention sublayer
    dn1, dwq, dwk, dwv, dwo = attention_backward(
        dh_mid, attn_cache, tensors[pre + "wq"], tensors[pre + "wk"], tensors[pre + "wv"],
        tensors[pre + "wo"], cfg.n_heads,
    )
    grads[pre + "wq"] = dwq
    grads[pre + "wk"] = dwk
    grads[pre + "wv"] = dwv
    grads[pre + "wo"] = dwo
    dh, grads[pre + "attn_norm_g"] = _norm_rows_backward(
        h, tensors[pre + "attn_norm_g"], cfg.norm, dn1
    )
    dh = dh + dh_mid  # residual
    return dh, grads


@dataclass
class ForwardTrace:
    """Per-layer hidden states H^(0..L), per-layer per-head attention
    matrices, final logits, and the scalar next-token loss."""

    hiddens: list = field(default_factory=list)
    attentions: list = field(default_factory=list)
    logits: np.ndarray | None = None
    loss: float = math.nan


def softmax_xent(logits, targets):
    """Mean cross entropy of logits[t] vs targets[t] and its logits gradient."""
    n = logits.shape[0]
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = logits[np.arange(n), targets]
    loss = float((lse - picked).mean())
    dlogits = row_softmax(logits)
    dlogits[np.arange(n), targets] -= 1.0
    return loss, dlogits / n


def _forward_full(model: ModelParams, tokens, want_cache):
    cfg = model.cfg
    toks = _check_tokens(cfg, tokens)
    tensors = model.tensors
    trace = ForwardTrace()
    caches = []
    h = tensors["embed"][toks]
    trace.hiddens.append(h)
    for i in range(cfg.n_layers):
        h, cache = block_forward(tensors, i, h, cfg, want_cache=True)
        trace.hiddens.append(h)
        caches.append(cache)
        trace.attentions.append(cache[2][4])
    nf = _norm_rows(h, tensors["final_norm_g"], cfg.norm)
    logits = nf @ tensors["embed"].T
    trace.logits = logits
    loss, dlogits = softmax_xent(logits[:-1], toks[1:])
    trace.loss = loss
    if not want_cache:
        return trace, None
    full_dlogits = np.zeros_like(logits)
    full_dlogits[:-1] = dlogits
    return trace, (toks, caches, nf, full_dlogits)


def forward(model: ModelParams, tokens) -> ForwardTrace:
    """Run the model on one token sequence; loss is the mean next-token
    cross entropy over positions 0..T-2."""
    trace, _ = _forward_full(model, tokens, want_cache=False)
    return trace


def backward(model: ModelParams, tokens):
    """Analytic loss gradients for every tensor; returns (loss, grads)."""
    cfg = model.cfg
    tensors = model.tensors
    trace, cache = _forward_full(model, tokens, want_cache=True)
    toks, caches, nf, dlogits = cache
    grads = {}
    # tied head: logits = nf @ embed^T
    grads["embed"] = dlogits.T @ nf
    dnf = dlogits @ tensors["embed"]
    dh, dgain = _norm_rows_backward(trace.hiddens[-1], tensors["final_norm_g"], cfg.norm, dnf)
    grads["final_norm_g"] = dgain
    for i in range(cfg.n_layers - 1, -1, -1):
        dh, block_grads = _block_backward(tensors, i, caches[i], dh, cfg)
        grads.update(block_grads)
    np.add.at(grads["embed"], toks, dh)
    # canonical tensor order keeps downstream reductions bit-reproducible
    return trace.loss, {name: grads[name] for name in tensors}


def batch_loss_and_grads(model: ModelParams, batch):
    """Mean loss and gradients over a (B, T) batch of token sequences,
    accumulated in fixed row order."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None, :]
    total = 0.0
    grads = None
    for row in batch:
        loss, g = backward(model, row)
        total += loss
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]
    n = batch.shape[0]
    for name in grads:
        grads[name] /= n
    return total / n, grads


def layer_jacobian(model: ModelParams, layer: int, trace: ForwardTrace, fd_step: float) -> np.ndarray:
    """(T d) x (T d) central-difference Jacobian of block `layer` (1-based)
    evaluated at that block's input hidden state from `trace`; row-major vec."""
    cfg = model.cfg
    if not 1 <= layer <= cfg.n_layers:
        raise ValueError(f"layer must lie in [1, {cfg.n_layers}], got {layer}")
    h_in = trace.hiddens[layer - 1]
    t, d = h_in.shape
    if t * d > JACOBIAN_BUDGET:
        raise SizeBudgetError(f"T*d = {t * d} exceeds the Jacobian budget {JACOBIAN_BUDGET}")

    def f(vec):
        out, _ = block_forward(model.tensors, layer - 1, vec.reshape(t, d), cfg)
        return out.ravel()

    return central_diff_jacobian(f, h_in.ravel(), fd_step)


def adjacent_alignment_profile(model: ModelParams, tokens, fd_step: float | None = None):
    """AlignmentResult between consecutive block Jacobians on one sequence;
    entry l is Align(block l+2, block l+1) in 1-based block numbering."""
    cfg = model.cfg
    trace = forward(model, tokens)
    jacobians = []
    for layer in range(1, cfg.n_layers + 1):
        step = fd_step if fd_step is not None else default_step(trace.hiddens[layer - 1])
        jacobians.append(layer_jacobian(model, layer, trace, step))
    profile: list[AlignmentResult] = []
    for lower, upper in zip(jacobians, jacobians[1:]):
        profile.append(alignment(upper, lower))
    return profile


def _random_low_rank(rng, rows, cols, rank):
    out = np.zeros((rows, cols))
    for _ in range(rank):
        out += np.outer(rng.normal(size=rows), rng.normal(size=cols))
    return out


def check_lowrank_propagation(model: ModelParams, rank_r: int, seed: int,
                              rank_tol: float = 1e-9) -> BoundCheck:
    """Rank-r hidden states and cohidden states must give attention weight
    gradients of numeric rank at most r.

    Runs the raw attention sublayer of block 0 (no pre-norm: the bound is
    about the attention map itself) on a constructed rank-r input with a
    rank-r upstream gradient.
    """
    cfg = model.cfg
    t, d = cfg.seq_len, cfg.d_model
    if not 1 <= rank_r <= min(t, d):
        raise ValueError(f"rank_r must lie in [1, {min(t, d)}], got {rank_r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    h = _random_low_rank(rng, t, d, rank_r)
    cohidden = _random_low_rank(rng, t, d, rank_r)
    tensors = model.tensors
    wq, wk, wv, wo = (tensors[f"block0.{n}"] for n in ("wq", "wk", "wv", "wo"))
    _, cache = attention_forward(h, wq, wk, wv, wo, cfg.n_heads)
    _, dwq, dwk, dwv, dwo = attention_backward(cohidden, cache, wq, wk, wv, wo, cfg.n_heads)
    lhs = max(numeric_rank(g, rank_tol) for g in (dwq, dwk, dwv, dwo))
    return BoundCheck.upper(float(lhs), float(rank_r), f"lowrank_propagation r={rank_r}")
