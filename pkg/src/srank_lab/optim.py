"""AdamW with decoupled weight decay, global-norm gradient clipping, the
warmup-then-linear-decay schedule, and the periodic sign-restoration rewrite
applied after the base optimizer step."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .errors import DivergedError, ShapeError
from .linalg import frobenius_norm
from .net import ModelParams, batch_loss_and_grads
from .spectral import msign_restore

log = logging.getLogger(__name__)

TARGET_CHOICES = ("none", "attention_only", "mlp_only", "all_2d")

_ATTENTION_SUFFIXES = (".wq", ".wk", ".wv", ".wo")
_MLP_SUFFIXES = (".w1", ".w2")


@dataclass
class AdamWState:
    """First/second moments, step counter, and the shared hyperparameters.

    Tensors named in no_decay are exempt from weight decay (the training
    harness lists the norm gains there).
    """

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    no_decay: frozenset = frozenset()

    @classmethod
    def init(cls, params: dict, **kwargs) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float):
    """One decoupled-weight-decay Adam update; returns (new_params, state)."""
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        decay = 0.0 if name in state.no_decay else state.weight_decay
        new_params[name] = p - lr * decay * p - lr * update
    return new_params, state


def clip_global_norm(grads: dict, max_norm: float = 1.0):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns (clipped_grads, pre_clip_norm); the pre-clip value is what the
    metrics log as grad_norm.
    """
    if max_norm <= 0.0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for name in grads:
        g = grads[name].ravel()
        total += float(g @ g)
    pre_norm = math.sqrt(total)
    if pre_norm <= max_norm:
        return dict(grads), pre_norm
    scale = max_norm / pre_norm
    return {name: g * scale for name, g in grads.items()}, pre_norm


def lr_at(step: int, base_lr: float, warmup: int = 2000, total: int | None = None) -> float:
    """Linear 0 -> base_lr over `warmup` steps, then linear decay to
    base_lr / 10 at step == total, constant afterwards."""
    if total is None or total <= warmup:
        raise ValueError("total must exceed warmup")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= warmup:
        if warmup == 0:
            return base_lr
        return base_lr * step / warmup
    if step >= total:
        return base_lr / 10.0
    frac = (step - warmup) / (total - warmup)
    return base_lr * (1.0 - 0.9 * frac)


@dataclass(frozen=True)
class MSignConfig:
    """Period, layer targeting, and rank tolerance for the periodic rewrite."""

    period: int = 100
    targets: str = "none"
    rank_tol: float = 1e-12
    min_dims: int = 2
    include_embeddings: bool = False

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"period must be at least 1, got {self.period}")
        if self.targets not in TARGET_CHOICES:
            raise ValueError(f"targets must be one of {TARGET_CHOICES}, got {self.targets!r}")


def msign_target_names(params: dict, cfg: MSignConfig):
    """Parameter names the rewrite applies to, in parameter order."""
    names = []
    for name, p in params.items():
        if p.ndim < cfg.min_dims:
            continue
        if cfg.targets == "attention_only" and not name.endswith(_ATTENTION_SUFFIXES):
            continue
        if cfg.targets == "mlp_only" and not name.endswith(_MLP_SUFFIXES):
            continue
        if cfg.targets == "all_2d" and name == "embed" and not cfg.include_embeddings:
            continue
        names.append(name)
    return names


def msign_apply(params: dict, step: int, cfg: MSignConfig):
    """Replace each targeted tensor by its norm-restored sign when
    step % period == 0; returns (params, applied_names).

    Exactly-zero targets are skipped with a warning; optimizer moments are
    not touched by design (the rewrite acts on parameters only).
    """
    if cfg.targets == "none" or step % cfg.period != 0:
        return params, []
    out = dict(params)
    applied = []
    for name in msign_target_names(params, cfg):
        w = params[name]
        if not w.any():
            log.warning("sign rewrite skipped exactly-zero tensor %s at step %d", name, step)
            continue
        out[name] = msign_restore(w, cfg.rank_tol)
        applied.append(name)
    return out, applied


@dataclass
class MetricsRecord:
    """One training-step metrics row."""

    step: int
    loss: float
    grad_norm: float
    lr: float
    geo_srank: float = math.nan
    mean_align: float = math.nan
    msign_applied: int = 0

    CSV_HEADER: ClassVar[str] = "step,loss,grad_norm,lr,geo_srank,mean_align,msign_applied"

    def csv_row(self) -> str:
        floats = (self.loss, self.grad_norm, self.lr, self.geo_srank, self.mean_align)
        return ",".join(
            [str(self.step)] + [format(x, ".17g") for x in floats] + [str(self.msign_applied)]
        )

    def json_line(self) -> str:
        """JSON-lines mirror of the CSV row; NaN metrics serialize as null."""
        def num(x):
            return format(x, ".17g") if math.isfinite(x) else "null"

        return (
            '{"step": %d, "loss": %s, "grad_norm": %s, "lr": %s, '
            '"geo_srank": %s, "mean_align": %s, "msign_applied": %d}'
            % (self.step, num(self.loss), num(self.grad_norm), num(self.lr),
               num(self.geo_srank), num(self.mean_align), self.msign_applied)
        )


def train_step(
    model: ModelParams,
    batch,
    adamw: AdamWState,
    msign: MSignConfig,
    schedule,
    step: int,
    max_grad_norm: float = 1.0,
):
    """backward -> clip -> AdamW update -> periodic sign rewrite.

    `schedule` maps step -> learning rate. Raises DivergedError on a
    non-finite loss. Returns (model, adamw, MetricsRecord).
    """
    loss, grads = batch_loss_and_grads(model, batch)
    if not math.isfinite(loss):
        raise DivergedError(step)
    grads, pre_norm = clip_global_norm(grads, max_grad_norm)
    lr = schedule(step)
    tensors, adamw = adamw_step(model.tensors, grads, adamw, lr)
    tensors, applied = msign_apply(tensors, adamw.t, msign)
    record = MetricsRecord(
        step=step, loss=loss, grad_norm=pre_norm, lr=lr, msign_applied=1 if applied else 0
    )
    return ModelParams(model.cfg, tensors), adamw, record
