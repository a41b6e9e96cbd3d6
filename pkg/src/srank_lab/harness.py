"""Experiment orchestration: training runs with divergence detection, the
theorem-validation sweeps, the FLOPs overhead model, the throughput-model
fit, and checkpoint diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds, feedback
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import DivergedError, FitError, ManifestError
from .linalg import frobenius_norm, numeric_rank
from .net import (
    ModelConfig,
    ModelParams,
    adjacent_alignment_profile,
    batch_loss_and_grads,
    check_lowrank_propagation,
    init_params,
)
from .optim import (
    AdamWState,
    MetricsRecord,
    MSignConfig,
    lr_at,
    msign_apply,
    msign_target_names,
    train_step,
)
from .spectral import geo_mean_srank, msign_restore, stable_rank
from .tasks import make_batch, probe_sequence

METRICS_FILE = "metrics.csv"
METRICS_JSONL_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
CHECKPOINT_DIR = "checkpoint_final"

# SVD flop model: 2 m n min(m,n) + 11 min(m,n)^3 gives 13 d^3 for a d x d
# weight and 19 d^3 for d x 4d, hence per application 52 d^3 over the four
# attention projections, 38 d^3 over the two MLP projections, 90 d^3 total.
OVERHEAD_NUMERATOR = {"attention_only": 52, "mlp_only": 38, "all_2d": 90, "none": 0}


def _norm_gain_names(tensors) -> frozenset:
    return frozenset(name for name in tensors if name.endswith("_g"))


def _srank_target_names(tensors, msign_cfg: MSignConfig):
    """Weights the stable-rank metric aggregates: the rewrite's target set,
    falling back to the all-2d set for baseline runs."""
    cfg = msign_cfg if msign_cfg.targets != "none" else MSignConfig(
        period=msign_cfg.period, targets="all_2d", rank_tol=msign_cfg.rank_tol,
        include_embeddings=msign_cfg.include_embeddings,
    )
    return msign_target_names(tensors, cfg)


def _geo_srank_metric(tensors, names) -> float:
    mats = [tensors[n] for n in names if tensors[n].any()]
    if not mats:
        return math.nan
    return geo_mean_srank(mats)


def _mean_alignment_metric(model: ModelParams, probe) -> float:
    profile = adjacent_alignment_profile(model, probe)
    values = [p.value for p in profile if not p.degenerate]
    if not values:
        return math.nan
    return float(np.mean(values))


@dataclass
class RunResult:
    status: str
    records: list
    summary: dict
    model: ModelParams | None


def run_training(cfg: RunConfig, out_dir=None) -> RunResult:
    """Train per the config, streaming metric records every metrics_every
    steps (step 0 is a pre-training record). Marks the run diverged on a
    non-finite loss or when grad_norm exceeds divergence_mult times the
    first recorded grad_norm for `patience` consecutive records."""
    out_path = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    model = init_params(cfg.model, cfg.seed)
    adamw = AdamWState.init(model.tensors, no_decay=_norm_gain_names(model.tensors))
    msign_cfg = cfg.msign
    srank_names = _srank_target_names(model.tensors, msign_cfg)
    align_on = cfg.alignment_enabled()
    probe = probe_sequence(cfg.task, cfg.data_vocab, cfg.data_seq_len, cfg.seed)

    def schedule(step):
        return lr_at(step, cfg.base_lr, cfg.warmup, cfg.total_steps)

    def fill_metrics(model_now, rec):
        if cfg.srank_metric:
            rec.geo_srank = _geo_srank_metric(model_now.tensors, srank_names)
        if align_on:
            rec.mean_align = _mean_alignment_metric(model_now, probe)

    records: list[MetricsRecord] = []
    status = "completed"
    diverged_at = None
    threshold = math.inf
    over_count = 0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        batch0 = make_batch(cfg.task, cfg.data_vocab, cfg.data_seq_len,
                            cfg.batch_sequences, cfg.seed, step=0)
        loss0, grads0 = batch_loss_and_grads(model, batch0)
        norm0 = math.sqrt(sum(float(g.ravel() @ g.ravel()) for g in grads0.values()))
        rec0 = MetricsRecord(step=0, loss=loss0, grad_norm=norm0, lr=schedule(0))
        fill_metrics(model, rec0)
        records.append(rec0)
        threshold = cfg.divergence_mult * norm0

        for step in range(1, cfg.total_steps + 1):
            batch = make_batch(cfg.task, cfg.data_vocab, cfg.data_seq_len,
                               cfg.batch_sequences, cfg.seed, step=step)
            try:
                model, adamw, rec = train_step(
                    model, batch, adamw, msign_cfg, schedule, step, max_grad_norm=cfg.clip_norm
                )
            except DivergedError as exc:
                status = "diverged"
                diverged_at = exc.step
                break
            if step % cfg.metrics_every == 0:
                fill_metrics(model, rec)
                records.append(rec)
                if not math.isfinite(rec.grad_norm) or rec.grad_norm > threshold:
                    over_count += 1
                else:
                    over_count = 0
                if over_count >= cfg.patience:
                    status = "diverged"
                    diverged_at = step
                    break

    _write_metrics_csv(out_path / METRICS_FILE, records)
    (out_path / METRICS_JSONL_FILE).write_text(
        "".join(r.json_line() + "\n" for r in records), encoding="utf-8"
    )
    summary = {
        "status": status,
        "steps_run": cfg.total_steps if status == "completed" else diverged_at,
        "initial_loss": records[0].loss,
        "final_loss": records[-1].loss,
        "max_grad_norm": max(r.grad_norm for r in records),
        "divergence_threshold": threshold,
    }
    if diverged_at is not None:
        summary["diverged_at"] = diverged_at
    if status == "completed":
        save_checkpoint(out_path / CHECKPOINT_DIR, model, cfg.total_steps)
    (out_path / SUMMARY_FILE).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return RunResult(status=status, records=records, summary=summary,
                     model=model if status == "completed" else None)


def _write_metrics_csv(path, records) -> None:
    lines = [MetricsRecord.CSV_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- theorem validation sweeps -------------------------------------------

_DEFAULT_TRIALS = {
    "alignment_product_lower_bound": 1000,
    "jacobian_product_lower_bound": 500,
    "srank_operator_norm_identity": 1000,
    "attention_jacobian_upper_bound": 200,
    "softmax_derivative_upper_bound": 1000,
    "mlp_jacobian_upper_bound": 500,
    "lowrank_gradient_propagation": 12,
    "weight_gradient_lower_bound": 50,
    "srank_feedback_decrease": 100,
    "feedback_restoration": 50,
    "msign_operator_contract": 200,
}

_SWEEP_OFFSETS = {name: i * 1_000_003 for i, name in enumerate(_DEFAULT_TRIALS)}


def _trial_rng(name: str, seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed + _SWEEP_OFFSETS[name] + trial))


def _collect(checks):
    evaluated = [c for c in checks if not c.skipped]
    failures = sum(1 for c in evaluated if not c.satisfied)
    min_slack = min((c.slack for c in evaluated), default=math.nan)
    return failures, min_slack


def _sweep_alignment_product(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("alignment_product_lower_bound", seed, i)
        m, k, n = rng.integers(2, 9, size=3)
        checks.append(bounds.check_alignment_product(rng.normal(size=(m, k)),
                                                     rng.normal(size=(k, n))))
    return _collect(checks)


def _sweep_jacobian_product(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("jacobian_product_lower_bound", seed, i)
        depth = int(rng.integers(1, 9))
        dim = int(rng.integers(2, 17))
        a_target = 1.0 if i % 17 == 0 else float(rng.uniform(0.3, 1.0))
        m_target = float(rng.uniform(0.5, 2.0))
        chain = bounds.alignment_chain_builder(depth, dim, a_target, m_target,
                                               seed=seed + 7_777_777 + i)
        checks.append(bounds.check_jacobian_product(chain, a_target, m_target))
    return _collect(checks)


def _sweep_srank_identity(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("srank_operator_norm_identity", seed, i)
        m, n = rng.integers(1, 33, size=2)
        checks.append(bounds.check_linear_srank_identity(rng.normal(size=(m, n))))
    return _collect(checks)


def _sweep_attention(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("attention_jacobian_upper_bound", seed, i)
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        dk = int(rng.integers(2, 17))
        scale = float(rng.uniform(0.3, 1.5))
        h = rng.normal(size=(n, d)) * scale
        wq = np.zeros((d, dk)) if i % 10 == 0 else rng.normal(size=(d, dk)) * scale
        wk = rng.normal(size=(d, dk)) * scale
        wv = rng.normal(size=(d, dk)) * scale
        wo = rng.normal(size=(dk, d)) * scale
        step = 1e-5 * (1.0 + float(np.abs(h).max()))
        checks.append(bounds.check_attention_jacobian(h, wq, wk, wv, wo, dk, step))
    return _collect(checks)


def _sweep_softmax(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("softmax_derivative_upper_bound", seed, i)
        length = int(rng.integers(2, 13))
        row = rng.normal(size=length) * float(rng.uniform(0.1, 6.0))
        checks.append(bounds.check_softmax_row_bound(row))
    return _collect(checks)


def _sweep_mlp(seed, trials):
    checks = []
    for i in range(trials):
        rng = _trial_rng("mlp_jacobian_upper_bound", seed, i)
        d = int(rng.integers(2, 17))
        dff = int(rng.integers(2, 33))
        activation = "gelu" if i % 2 == 0 else "silu"
        w1 = rng.normal(size=(d, dff)) * float(rng.uniform(0.2, 1.5))
        w2 = rng.normal(size=(dff, d)) * float(rng.uniform(0.2, 1.5))
        h = rng.normal(size=d) * float(rng.uniform(0.2, 3.0))
        step = 1e-5 * (1.0 + float(np.abs(h).max()))
        checks.append(bounds.check_mlp_jacobian(w1, w2, h, activation, step))
    return _collect(checks)


def _lowrank_model() -> ModelParams:
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, seq_len=8, vocab=16,
                      init_std=0.05, wo_downscale=False, zero_query_init=False)
    return init_params(cfg, seed=2024)


def _sweep_lowrank(seed, trials):
    model = _lowrank_model()
    checks = []
    for i in range(trials):
        rank_r = (i % 3) + 1
        checks.append(check_lowrank_propagation(model, rank_r, seed=seed + i))
    return _collect(checks)


def _sweep_weight_gradient(seed, trials):
    """Fully aligned linear chains witness the per-layer gradient floor.

    Layer i's sensitivity direction is the top input direction of the next
    factor (the terminal layer uses the loss-gradient direction), the loss
    gradient points along the last factor's top output direction, and both
    floor parameters use a = gamma = 1.
    """
    from .linalg import svd

    checks = []
    for i in range(trials):
        rng = _trial_rng("weight_gradient_lower_bound", seed, i)
        depth = int(rng.integers(2, 7))
        dim = int(rng.integers(2, 9))
        m_target = float(rng.uniform(0.5, 2.0))
        chain = bounds.alignment_chain_builder(depth, dim, 1.0, m_target,
                                               seed=seed + 31_337 + i)
        factors = [svd(j) for j in chain]
        g_norm = float(rng.uniform(0.5, 2.0))
        g_last = g_norm * factors[-1].u[:, 0]
        for layer in range(1, depth + 1):
            if layer < depth:
                sens = factors[layer].v[:, 0]  # top input direction of factor layer+1
            else:
                sens = factors[-1].u[:, 0]
            back = g_last
            for j in range(depth - 1, layer - 1, -1):
                back = chain[j].T @ back
            measured = abs(float(sens @ back))
            floor = bounds.weight_gradient_floor(1.0, 1.0, m_target, depth, layer, g_norm)
            checks.append(bounds.BoundCheck.lower(measured, floor, f"weight_gradient l={layer}"))
    return _collect(checks)


def _random_feedback_spec(rng, satisfy: bool) -> feedback.FeedbackSpec:
    n = int(rng.integers(2, 7))
    s = np.sort(rng.uniform(0.5, 3.0, size=n))[::-1]
    if satisfy:
        # c_i proportional to s_i with shrinking margins keeps c_1/c_i > s_1/s_i
        margins = 1.0 / (1.0 + np.arange(n) * rng.uniform(0.1, 0.5))
        c = -s * margins / s[0]
        c[0] = -1.0
    else:
        # increasing magnitudes violate the condition at every i
        c = -(1.0 + np.arange(n) * rng.uniform(0.2, 0.5))
    eta = float(rng.uniform(1e-4, 1e-2))
    return feedback.FeedbackSpec(s0=s, cov=c, eta=eta, steps=20)


def _sweep_feedback(seed, trials):
    failures = 0
    min_slack = math.inf
    for i in range(trials):
        rng = _trial_rng("srank_feedback_decrease", seed, i)
        spec = _random_feedback_spec(rng, satisfy=True)
        if not feedback.check_ratio_condition(spec):
            continue
        traj = feedback.simulate_feedback(spec)
        deltas = np.diff([p.srank for p in traj])
        worst = float(deltas.max()) if deltas.size else 0.0
        if worst > 1e-12:
            failures += 1
        min_slack = min(min_slack, -worst)
    return failures, (min_slack if min_slack != math.inf else math.nan)


def _sweep_feedback_restoration(seed, trials):
    failures = 0
    min_slack = math.inf
    for i in range(trials):
        rng = _trial_rng("feedback_restoration", seed, i)
        spec = _random_feedback_spec(rng, satisfy=True)
        period = int(rng.integers(1, 6))
        traj = feedback.simulate_feedback_with_msign(spec, period)
        n = spec.s0.size
        for point in traj:
            if point.restored:
                err = abs(point.srank - n)
                if err > 1e-12 * n:
                    failures += 1
                min_slack = min(min_slack, 1e-12 * n - err)
    return failures, (min_slack if min_slack != math.inf else math.nan)


def _sweep_msign_contract(seed, trials):
    failures = 0
    min_slack = math.inf
    for i in range(trials):
        rng = _trial_rng("msign_operator_contract", seed, i)
        m, n = rng.integers(2, 25, size=2)
        w = rng.normal(size=(m, n)) * float(rng.uniform(0.2, 3.0))
        restored = msign_restore(w)
        fro_err = abs(frobenius_norm(restored) - frobenius_norm(w)) / frobenius_norm(w)
        rank = numeric_rank(w)
        srank_err = abs(stable_rank(restored) - rank) / rank
        idem_err = float(np.abs(msign_restore(restored) - restored).max())
        slacks = (1e-10 - fro_err, 1e-6 - srank_err, 1e-10 - idem_err)
        if min(slacks) < 0.0:
            failures += 1
        min_slack = min(min_slack, min(slacks))
    return failures, min_slack


_SWEEPS = {
    "alignment_product_lower_bound": _sweep_alignment_product,
    "jacobian_product_lower_bound": _sweep_jacobian_product,
    "srank_operator_norm_identity": _sweep_srank_identity,
    "attention_jacobian_upper_bound": _sweep_attention,
    "softmax_derivative_upper_bound": _sweep_softmax,
    "mlp_jacobian_upper_bound": _sweep_mlp,
    "lowrank_gradient_propagation": _sweep_lowrank,
    "weight_gradient_lower_bound": _sweep_weight_gradient,
    "srank_feedback_decrease": _sweep_feedback,
    "feedback_restoration": _sweep_feedback_restoration,
    "msign_operator_contract": _sweep_msign_contract,
}


def validate_theorems(seed: int = 0, trials: int | None = None):
    """Run every validation sweep; returns (json_lines, all_bounds_hold).

    trials overrides the per-sweep default count when given.
    """
    if trials is not None and trials < 1:
        raise ValueError("trials must be at least 1")
    lines = []
    ok = True
    for name, sweep in _SWEEPS.items():
        count = trials if trials is not None else _DEFAULT_TRIALS[name]
        failures, min_slack = sweep(seed, count)
        ok = ok and failures == 0
        payload = {
            "theorem": name,
            "trials": count,
            "failures": failures,
            "min_slack": None if math.isnan(min_slack) else min_slack,
        }
        lines.append(json.dumps(payload, sort_keys=True))
    return lines, ok


# --- FLOPs overhead and throughput model ----------------------------------


def overhead_report(b: int, t: int, d: int, p: int, targets: str) -> dict:
    """Amortized rewrite cost against per-step training FLOPs.

    per_step keeps the two leading terms 72 B T d^2 + 12 B T^2 d; the
    numerator is the SVD cost of one application over the targeted weights.
    """
    if min(b, t, d, p) < 1:
        raise ValueError("b, t, d, p must all be positive")
    if targets not in OVERHEAD_NUMERATOR:
        raise ValueError(f"targets must be one of {tuple(OVERHEAD_NUMERATOR)}, got {targets!r}")
    numerator = OVERHEAD_NUMERATOR[targets] * d**3
    per_step = 72 * b * t * d**2 + 12 * b * t**2 * d
    return {
        "numerator_flops": numerator,
        "per_step_flops": per_step,
        "ratio": numerator / (per_step * p),
    }


@dataclass(frozen=True)
class ThroughputSample:
    period: int
    tokens_per_second: float

    def __post_init__(self):
        if self.period < 1 or self.tokens_per_second <= 0.0:
            raise ValueError("period and tokens_per_second must be positive")


def fit_throughput(samples) -> dict:
    """Least-squares fit of 1/T = (1/T_inf)(1 + r/P), linear in 1/P.

    Returns {"t_inf", "r", "predictions"} with one prediction per sample.
    """
    samples = list(samples)
    if len(samples) < 2 or len({s.period for s in samples}) < 2:
        raise FitError("need at least two samples with distinct periods")
    x = np.array([1.0 / s.period for s in samples])
    y = np.array([1.0 / s.tokens_per_second for s in samples])
    x_mean, y_mean = x.mean(), y.mean()
    sxx = float(((x - x_mean) ** 2).sum())
    sxy = float(((x - x_mean) * (y - y_mean)).sum())
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    if intercept <= 0.0:
        raise FitError("fit produced a non-positive asymptotic rate")
    t_inf = 1.0 / intercept
    ratio = slope / intercept
    predictions = [t_inf / (1.0 + ratio / s.period) for s in samples]
    return {"t_inf": t_inf, "r": ratio, "predictions": predictions}


def read_throughput_csv(path) -> list:
    """CSV with header `period,tokens_per_second`."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0].strip() != "period,tokens_per_second":
        raise FitError("expected header 'period,tokens_per_second'")
    samples = []
    for raw in lines[1:]:
        cells = raw.split(",")
        if len(cells) != 2:
            raise FitError(f"malformed sample row {raw!r}")
        samples.append(ThroughputSample(int(cells[0]), float(cells[1])))
    return samples


# --- checkpoint diagnostics ------------------------------------------------


def diagnose(checkpoint_dirs, early_fraction: float = 0.5):
    """Spectral timeline over checkpoints sharing one model config.

    Returns (csv_text, warnings). Columns: step, geo_srank (geometric-mean
    stable rank over the early-layer 2-D weights, early = first
    ceil(early_fraction * L) blocks), mean_align (nan when the model exceeds
    the Jacobian budget), then per-block geometric-mean stable ranks. Rows
    are sorted by checkpoint step.
    """
    if not checkpoint_dirs:
        raise ManifestError("need at least one checkpoint directory")
    loaded = [load_checkpoint(d) for d in checkpoint_dirs]
    cfg = loaded[0][0].cfg
    for (model, _), directory in zip(loaded, checkpoint_dirs):
        if model.cfg != cfg:
            raise ManifestError(f"checkpoint {directory} disagrees with the first config")
    loaded.sort(key=lambda pair: pair[1])
    n_early = max(1, math.ceil(early_fraction * cfg.n_layers))
    align_ok = cfg.d_model * cfg.seq_len <= 512
    warnings = []
    if not align_ok:
        warnings.append(
            f"alignment skipped: d_model*seq_len = {cfg.d_model * cfg.seq_len} exceeds 512"
        )
    header = ["step", "geo_srank", "mean_align"]
    header += [f"srank_block{i}" for i in range(cfg.n_layers)]
    rows = [",".join(header)]
    probe = np.arange(cfg.seq_len, dtype=np.int64) % cfg.vocab
    block_weights = ("wq", "wk", "wv", "wo", "w1", "w2")
    for model, step in loaded:
        per_block = []
        for i in range(cfg.n_layers):
            mats = [model.tensors[f"block{i}.{w}"] for w in block_weights
                    if model.tensors[f"block{i}.{w}"].any()]
            per_block.append(geo_mean_srank(mats) if mats else math.nan)
        early_mats = [model.tensors[f"block{i}.{w}"] for i in range(n_early)
                      for w in block_weights if model.tensors[f"block{i}.{w}"].any()]
        geo = geo_mean_srank(early_mats) if early_mats else math.nan
        mean_align = _mean_alignment_metric(model, probe) if align_ok else math.nan
        cells = [str(step), format(geo, ".17g"), format(mean_align, ".17g")]
        cells += [format(v, ".17g") for v in per_block]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n", warnings
