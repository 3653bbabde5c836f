"""Two-stage training pipeline: SFT on y_ws, then preference optimization.

Both stages run seeded mini-batch loops over tabular policies with exact
gradients, record per-step telemetry, and reduce deterministically
(fixed-order summation) so identical configs reproduce bit-identical
runs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives as obj
from .datagen import (
    BigramRewardOracle,
    PreferenceQuadruple,
    ScoredResponse,
    SftRecord,
)
from .errors import ConfigError, DataError, InputError, NumericError, UsageError
from .policy import (
    PolicyModel,
    SamplingConfig,
    derive_rng,
    log_prob_gradient,
    sample_response,
    sequence_log_prob,
    stream_salt,
)
from .schedule import FusionSchedule, alpha_at

__all__ = [
    "OptimizerConfig",
    "Optimizer",
    "StepRecord",
    "EvalRecord",
    "TrainingTelemetry",
    "EvalSettings",
    "run_sft",
    "regenerate_target_pairs",
    "run_preference_optimization",
    "eval_reward_accuracy",
    "eval_policy_quality",
    "QualityReport",
    "write_telemetry",
    "read_telemetry",
]

log = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("sgd", "adam")
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: str = "constant"
    warmup_fraction: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("moment decay rates must be in (0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")


class Optimizer:
    """First-order updates with optional two-moment adaptation and cosine lr."""

    def __init__(self, cfg: OptimizerConfig, shape: tuple[int, ...], total_steps: int):
        self.cfg = cfg
        self.total_steps = max(1, int(total_steps))
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.schedule == "constant":
            return cfg.step_size
        warmup = int(cfg.warmup_fraction * self.total_steps)
        if step < warmup:
            return cfg.step_size * (step + 1) / warmup
        span = max(1, self.total_steps - warmup)
        progress = (step - warmup) / span
        return cfg.step_size * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        cfg = self.cfg
        lr = self.lr_at(self.t)
        self.t += 1
        if cfg.grad_clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / norm)
        if cfg.kind == "sgd":
            params -= lr * grad
            return
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * (grad * grad)
        m_hat = self.m / (1 - cfg.beta1**self.t)
        v_hat = self.v / (1 - cfg.beta2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


@dataclass
class StepRecord:
    step: int
    alpha: float | None
    loss: float
    internal_rewards: dict[str, float]
    on_policy_margin: float | None
    hybrid_policy_margin: float | None
    grad_norm: float


@dataclass
class EvalRecord:
    step: int
    reward_accuracy: float | None
    mean_oracle_score: float | None


@dataclass
class TrainingTelemetry:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)


@dataclass
class EvalSettings:
    """Optional in-loop evaluation: held-out reward accuracy and fresh-sample score."""

    every: int = 0
    quadruples: list[PreferenceQuadruple] | None = None
    oracle: BigramRewardOracle | None = None
    prompts: list[tuple[int, ...]] | None = None
    sampling: SamplingConfig | None = None
    samples_per_prompt: int = 2


def _batches(n: int, batch_size: int, epochs: int, seed: int):
    """Seeded shuffle per epoch, fixed-order chunks (last batch may be short)."""
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def n_optimizer_steps(n_records: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_records / batch_size)


def run_sft(
    model: PolicyModel,
    sft_records: list[SftRecord],
    opt_cfg: OptimizerConfig,
    epochs: int = 1,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[PolicyModel, list[float]]:
    """Minimize mean NLL of y_ws given its prompt; returns a frozen snapshot.

    The input model is left untouched. With epochs == 0 the snapshot is a
    frozen copy of the input.
    """
    if len(sft_records) == 0:
        raise InputError("sft record list is empty")
    if model.frozen:
        raise UsageError("cannot train a frozen model")
    policy = model.copy(frozen=False)
    total = n_optimizer_steps(len(sft_records), batch_size, epochs)
    optimizer = Optimizer(opt_cfg, policy.logits.shape, total)
    losses: list[float] = []
    for batch in _batches(len(sft_records), batch_size, epochs, seed):
        grad = np.zeros_like(policy.logits)
        nll = 0.0
        for i in batch:
            seq = sft_records[i].y_ws.sequence
            nll -= sequence_log_prob(policy, seq)
            grad -= log_prob_gradient(policy, seq)
        nll /= len(batch)
        grad /= len(batch)
        if not np.isfinite(nll):
            raise NumericError(f"non-finite SFT loss at step {len(losses)}")
        optimizer.step(policy.logits, grad)
        losses.append(nll)
    return policy.freeze(), losses


def regenerate_target_pairs(
    snapshot: PolicyModel,
    quadruples: list[PreferenceQuadruple],
    n_samples: int,
    cfg: SamplingConfig,
    oracle: BigramRewardOracle,
    model_name: str = "target-sft",
) -> list[PreferenceQuadruple]:
    """Replace y_wt / y_l with max/min-score fresh samples from the snapshot."""
    if not snapshot.frozen:
        raise UsageError("pair regeneration requires a frozen snapshot")
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    salt = stream_salt("regen:" + model_name)
    out = []
    degenerate = 0
    for q_idx, quad in enumerate(quadruples):
        scored = []
        for s_idx in range(n_samples):
            rng = derive_rng(cfg.seed, salt, q_idx, s_idx)
            seq = sample_response(snapshot, quad.prompt, cfg, rng=rng)
            scored.append(
                ScoredResponse(
                    sequence=seq,
                    score=oracle.score(quad.prompt, seq.response),
                    model=model_name,
                    sample_index=s_idx,
                )
            )
        y_wt = max(scored, key=lambda c: (c.score, -c.sample_index))
        y_l = min(scored, key=lambda c: (c.score, c.sample_index))
        if y_wt.score == y_l.score:
            degenerate += 1
        out.append(replace(quad, y_wt=y_wt, y_l=y_l))
    if degenerate:
        log.warning(
            "%d/%d regenerated pairs are degenerate (equal scores)",
            degenerate,
            len(out),
        )
    return out


def _mean(values: list[float]) -> float:
    return float(sum(values) / len(values))


def run_preference_optimization(
    policy_init: PolicyModel,
    ref: PolicyModel | None,
    quadruples: list[PreferenceQuadruple],
    objective: obj.ObjectiveConfig,
    opt_cfg: OptimizerConfig,
    schedule: FusionSchedule | None = None,
    epochs: int = 1,
    batch_size: int = 16,
    seed: int = 0,
    pairing: str = "on_policy",
    evals: EvalSettings | None = None,
) -> tuple[PolicyModel, TrainingTelemetry]:
    """One seeded pass (or several) over the PO split with any objective.

    alpha follows the fusion schedule per optimizer step for the wrpo_*
    kinds; pair-based kinds must not be given a schedule. Returns the
    trained model as a frozen snapshot plus per-step telemetry.
    """
    if len(quadruples) == 0:
        raise InputError("preference dataset is empty")
    is_wrpo = objective.kind in obj.WRPO_KINDS
    if is_wrpo and schedule is None:
        raise ConfigError(f"objective {objective.kind!r} requires a fusion schedule")
    if not is_wrpo and schedule is not None:
        raise ConfigError(
            f"fusion schedule given but objective {objective.kind!r} takes no alpha"
        )
    needs_ref = objective.kind not in obj.REFERENCE_FREE_KINDS
    if needs_ref:
        if ref is None:
            raise ConfigError(f"objective {objective.kind!r} requires a reference model")
        if not ref.frozen:
            raise ConfigError("reference model must be frozen")
    if objective.kind == "wrpo_with_yls" and any(q.y_ls is None for q in quadruples):
        raise DataError("wrpo_with_yls needs y_ls on every quadruple")

    policy = policy_init.copy(frozen=False)
    total = n_optimizer_steps(len(quadruples), batch_size, epochs)
    optimizer = Optimizer(opt_cfg, policy.logits.shape, total)
    telemetry = TrainingTelemetry()

    step = 0
    for batch in _batches(len(quadruples), batch_size, epochs, seed):
        alpha = alpha_at(schedule, step) if is_wrpo else None
        cfg_t = replace(objective, alpha=alpha) if is_wrpo else objective
        grad = np.zeros_like(policy.logits)
        losses: list[float] = []
        reward_sums: dict[str, float] = {}
        on_margins: list[float] = []
        hy_margins: list[float] = []
        for i in batch:
            result, g = obj.loss_gradient_wrt_params(
                policy, ref, quadruples[i], cfg_t, pairing=pairing
            )
            grad += g
            losses.append(result.loss)
            for name, r in result.internal_rewards.items():
                reward_sums[name] = reward_sums.get(name, 0.0) + r
            if result.on_policy_margin is not None:
                on_margins.append(result.on_policy_margin)
            if result.hybrid_policy_margin is not None:
                hy_margins.append(result.hybrid_policy_margin)
            if not is_wrpo:
                # Pair-based kinds expose one margin, attributed by pairing.
                margin = result.internal_rewards["w"] - result.internal_rewards["l"]
                (on_margins if pairing == "on_policy" else hy_margins).append(margin)
        grad /= len(batch)
        loss = _mean(losses)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite preference loss at step {step}")
        on_m = _mean(on_margins) if on_margins else None
        hy_m = _mean(hy_margins) if hy_margins else None

        telemetry.steps.append(
            StepRecord(
                step=step,
                alpha=alpha,
                loss=loss,
                internal_rewards={
                    k: v / len(batch) for k, v in reward_sums.items()
                },
                on_policy_margin=on_m,
                hybrid_policy_margin=hy_m,
                grad_norm=float(np.linalg.norm(grad)),
            )
        )
        optimizer.step(policy.logits, grad)
        step += 1

        if evals is not None and evals.every > 0 and step % evals.every == 0:
            telemetry.evals.append(_run_eval(policy, ref, objective, evals, step - 1))
    return policy.freeze(), telemetry


def _run_eval(
    policy: PolicyModel,
    ref: PolicyModel | None,
    objective: obj.ObjectiveConfig,
    evals: EvalSettings,
    step: int,
) -> EvalRecord:
    accuracy = None
    if evals.quadruples and ref is not None:
        accuracy = eval_reward_accuracy(policy, ref, evals.quadruples, objective.beta)
    mean_score = None
    if evals.oracle is not None and evals.prompts and evals.sampling is not None:
        scores = []
        for p_idx, prompt in enumerate(evals.prompts):
            for s_idx in range(evals.samples_per_prompt):
                rng = derive_rng(
                    evals.sampling.seed, stream_salt("eval-quality"), p_idx, s_idx
                )
                seq = sample_response(policy, prompt, evals.sampling, rng=rng)
                scores.append(evals.oracle.score(prompt, seq.response))
        mean_score = _mean(scores)
    return EvalRecord(step=step, reward_accuracy=accuracy, mean_oracle_score=mean_score)


def eval_reward_accuracy(
    model: PolicyModel,
    ref: PolicyModel,
    quadruples: list[PreferenceQuadruple],
    beta: float,
) -> float:
    """Fraction of records with internal reward of y_ws above y_l; ties fail.

    Positive beta only rescales the compared difference, so the value is
    beta-invariant.
    """
    if len(quadruples) == 0:
        raise InputError("held-out set is empty")
    hits = 0
    for q in quadruples:
        r_ws = obj.internal_reward(
            sequence_log_prob(model, q.y_ws.sequence),
            sequence_log_prob(ref, q.y_ws.sequence),
            beta,
        )
        r_l = obj.internal_reward(
            sequence_log_prob(model, q.y_l.sequence),
            sequence_log_prob(ref, q.y_l.sequence),
            beta,
        )
        if r_ws > r_l:
            hits += 1
    return hits / len(quadruples)


@dataclass
class QualityReport:
    candidate_mean: float
    baseline_mean: float
    wins: int
    ties: int
    losses: int
    n_prompts: int

    @property
    def win_rate(self) -> float:
        return self.wins / self.n_prompts


def eval_policy_quality(
    candidate: PolicyModel,
    baseline: PolicyModel,
    prompts: list[tuple[int, ...]],
    cfg: SamplingConfig,
    oracle: BigramRewardOracle,
    samples_per_prompt: int = 3,
) -> QualityReport:
    """Mean oracle score of fresh samples and per-prompt win rate vs baseline.

    Both models consume identical derived sample streams, so comparing a
    model against itself yields all ties.
    """
    if len(prompts) == 0:
        raise InputError("prompt list is empty")
    if samples_per_prompt < 1:
        raise InputError("samples_per_prompt must be >= 1")
    salt = stream_salt("quality-eval")
    cand_all: list[float] = []
    base_all: list[float] = []
    wins = ties = losses = 0
    for p_idx, prompt in enumerate(prompts):
        cand_scores = []
        base_scores = []
        for s_idx in range(samples_per_prompt):
            for model, sink in ((candidate, cand_scores), (baseline, base_scores)):
                rng = derive_rng(cfg.seed, salt, p_idx, s_idx)
                seq = sample_response(model, prompt, cfg, rng=rng)
                sink.append(oracle.score(prompt, seq.response))
        c, b = _mean(cand_scores), _mean(base_scores)
        cand_all.extend(cand_scores)
        base_all.extend(base_scores)
        if c > b:
            wins += 1
        elif c < b:
            losses += 1
        else:
            ties += 1
    return QualityReport(
        candidate_mean=_mean(cand_all),
        baseline_mean=_mean(base_all),
        wins=wins,
        ties=ties,
        losses=losses,
        n_prompts=len(prompts),
    )


def write_telemetry(path, telemetry: TrainingTelemetry) -> None:
    """JSONL with a record-type tag; eval records interleave by step order."""
    records: list[tuple[int, int, dict]] = []
    for s in telemetry.steps:
        records.append(
            (
                s.step,
                0,
                {
                    "type": "step",
                    "step": s.step,
                    "alpha": s.alpha,
                    "loss": s.loss,
                    "internal_rewards": s.internal_rewards,
                    "on_policy_margin": s.on_policy_margin,
                    "hybrid_policy_margin": s.hybrid_policy_margin,
                    "grad_norm": s.grad_norm,
                },
            )
        )
    for e in telemetry.evals:
        records.append(
            (
                e.step,
                1,
                {
                    "type": "eval",
                    "step": e.step,
                    "reward_accuracy": e.reward_accuracy,
                    "mean_oracle_score": e.mean_oracle_score,
                },
            )
        )
    records.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for _, _, rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_telemetry(path) -> TrainingTelemetry:
    telemetry = TrainingTelemetry()
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            if rec.get("type") == "step":
                telemetry.steps.append(
                    StepRecord(
                        step=int(rec["step"]),
                        alpha=rec["alpha"],
                        loss=float(rec["loss"]),
                        internal_rewards={
                            k: float(v) for k, v in rec["internal_rewards"].items()
                        },
                        on_policy_margin=rec["on_policy_margin"],
                        hybrid_policy_margin=rec["hybrid_policy_margin"],
                        grad_norm=float(rec["grad_norm"]),
                    )
                )
            elif rec.get("type") == "eval":
                telemetry.evals.append(
                    EvalRecord(
                        step=int(rec["step"]),
                        reward_accuracy=rec["reward_accuracy"],
                        mean_oracle_score=rec["mean_oracle_score"],
                    )
                )
            else:
                raise DataError(f"{path}:{line_no}: unknown record type")
    return telemetry
