"""The preference-objective family as pure functions of log-probabilities.

Every loss consumes a LogProbBundle (per-role sequence log-probs under the
policy and the reference) and returns the scalar loss together with the
analytic derivative w.r.t. each policy log-prob, so parameter gradients
compose with the policy's exact log-prob gradient.

Conventions shared by all kinds:
  * internal reward of a response: beta * (theta_logp - ref_logp); the
    length-normalized kinds use beta * theta_logp / length instead and
    never consume the reference.
  * -log sigmoid(z) is evaluated as softplus(-z) so that both the tiny
    margins of beta = 0.01 and the huge 1/(2*tau) targets of the squared
    kinds stay exact.
  * the partition term of the reparameterized reward cancels in every
    pairwise comparison and is therefore never computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit, log_expit

from . import policy as policy_mod
from .errors import InputError, UsageError

__all__ = [
    "KINDS",
    "SIGMOID_KINDS",
    "REFERENCE_FREE_KINDS",
    "WRPO_KINDS",
    "RoleLogProb",
    "LogProbBundle",
    "ObjectiveConfig",
    "LossResult",
    "internal_reward",
    "bt_probability",
    "compound_reward",
    "dpo_loss",
    "ipo_loss",
    "simpo_loss",
    "wrpo_loss",
    "wrpo_simpo_loss",
    "wrpo_ipo_loss",
    "wrpo_with_yls_loss",
    "evaluate_loss",
    "bundle_from_quadruple",
    "loss_gradient_wrt_params",
]

KINDS = ("dpo", "ipo", "simpo", "wrpo_dpo", "wrpo_simpo", "wrpo_ipo", "wrpo_with_yls")
SIGMOID_KINDS = ("dpo", "simpo", "wrpo_dpo", "wrpo_simpo", "wrpo_with_yls")
REFERENCE_FREE_KINDS = ("simpo", "wrpo_simpo")
WRPO_KINDS = ("wrpo_dpo", "wrpo_simpo", "wrpo_ipo", "wrpo_with_yls")


@dataclass(frozen=True)
class RoleLogProb:
    """Log-probs of one response under the policy and the reference."""

    theta: float
    ref: float = 0.0
    length: int = 1

    def __post_init__(self):
        for name, value in (("theta", self.theta), ("ref", self.ref)):
            if not np.isfinite(value):
                raise InputError(f"{name} log-prob must be finite")
            if value > 0:
                raise InputError(f"{name} log-prob must be <= 0 (got {value})")
        if self.length < 1:
            raise InputError("response length must be >= 1")

    @property
    def delta(self) -> float:
        """Policy-to-reference log ratio for this response."""
        return self.theta - self.ref


@dataclass(frozen=True)
class LogProbBundle:
    roles: Mapping[str, RoleLogProb]

    @classmethod
    def pair(cls, w: RoleLogProb, l: RoleLogProb) -> "LogProbBundle":
        return cls(roles={"w": w, "l": l})

    @classmethod
    def triple(
        cls, w_s: RoleLogProb, w_t: RoleLogProb, l: RoleLogProb
    ) -> "LogProbBundle":
        return cls(roles={"w_s": w_s, "w_t": w_t, "l": l})

    @classmethod
    def quad(
        cls,
        w_s: RoleLogProb,
        w_t: RoleLogProb,
        l_s: RoleLogProb,
        l_t: RoleLogProb,
    ) -> "LogProbBundle":
        return cls(roles={"w_s": w_s, "w_t": w_t, "l_s": l_s, "l_t": l_t})

    def role(self, name: str) -> RoleLogProb:
        try:
            return self.roles[name]
        except KeyError:
            raise InputError(f"bundle is missing role {name!r}") from None


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which loss of the family to use and its hyperparameters.

    alpha is only meaningful for the wrpo_* kinds and is normally filled
    in per optimizer step by the fusion schedule.
    """

    kind: str
    beta: float = 0.01
    tau: float | None = None
    gamma: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown objective kind {self.kind!r}")
        if not self.beta > 0:
            raise InputError("beta must be positive")
        if self.tau is not None and not self.tau > 0:
            raise InputError("tau must be positive")
        if self.gamma is not None and self.gamma < 0:
            raise InputError("gamma must be >= 0")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise InputError("alpha must be in [0, 1]")

    def require_tau(self) -> float:
        if self.tau is None:
            raise InputError(f"kind {self.kind!r} requires tau")
        return self.tau

    def require_gamma(self) -> float:
        if self.gamma is None:
            raise InputError(f"kind {self.kind!r} requires gamma")
        return self.gamma

    def require_alpha(self) -> float:
        if self.alpha is None:
            raise InputError(f"kind {self.kind!r} requires alpha")
        return self.alpha


@dataclass(frozen=True)
class LossResult:
    loss: float
    internal_rewards: dict[str, float]
    grad_wrt_logps: dict[str, float]
    on_policy_margin: float | None = None
    hybrid_policy_margin: float | None = None


def internal_reward(theta_logp: float, ref_logp: float, beta: float) -> float:
    """beta * log(pi_theta / pi_ref); the cancelling partition term is omitted."""
    if not (np.isfinite(theta_logp) and np.isfinite(ref_logp)):
        raise InputError("log-probs must be finite")
    if not beta > 0:
        raise InputError("beta must be positive")
    return beta * (theta_logp - ref_logp)


def bt_probability(reward_w: float, reward_l: float) -> float:
    """Bradley-Terry win probability sigma(reward_w - reward_l)."""
    if not (np.isfinite(reward_w) and np.isfinite(reward_l)):
        raise InputError("rewards must be finite")
    return float(expit(reward_w - reward_l))


def compound_reward(r_ws: float, r_wt: float, alpha: float) -> float:
    """Fusion-weighted preferred reward: alpha * r_ws + (1 - alpha) * r_wt."""
    if not 0 <= alpha <= 1:
        raise InputError("alpha must be in [0, 1]")
    return alpha * r_ws + (1 - alpha) * r_wt


def _neg_log_sigmoid(z: float) -> float:
    return float(-log_expit(z))


def dpo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """-log sigma(beta*delta_w - beta*delta_l)."""
    w, l = bundle.role("w"), bundle.role("l")
    beta = cfg.beta
    r_w = beta * w.delta
    r_l = beta * l.delta
    z = r_w - r_l
    s = float(expit(-z))
    return LossResult(
        loss=_neg_log_sigmoid(z),
        internal_rewards={"w": r_w, "l": r_l},
        grad_wrt_logps={"w": -beta * s, "l": beta * s},
    )


def ipo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """(delta_w - delta_l - 1/(2*tau))^2 on unscaled log-ratios.

    The squared objective itself carries no beta; the reported internal
    rewards keep the usual beta scaling so telemetry is comparable across
    kinds.
    """
    w, l = bundle.role("w"), bundle.role("l")
    tau = cfg.require_tau()
    u = w.delta - l.delta - 1.0 / (2.0 * tau)
    return LossResult(
        loss=u * u,
        internal_rewards={"w": cfg.beta * w.delta, "l": cfg.beta * l.delta},
        grad_wrt_logps={"w": 2.0 * u, "l": -2.0 * u},
    )


def simpo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """-log sigma(beta*avg_w - beta*avg_l - gamma); no reference model."""
    w, l = bundle.role("w"), bundle.role("l")
    beta, gamma = cfg.beta, cfg.require_gamma()
    r_w = beta * w.theta / w.length
    r_l = beta * l.theta / l.length
    z = r_w - r_l - gamma
    s = float(expit(-z))
    return LossResult(
        loss=_neg_log_sigmoid(z),
        internal_rewards={"w": r_w, "l": r_l},
        grad_wrt_logps={"w": -(beta / w.length) * s, "l": (beta / l.length) * s},
    )


def wrpo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """-log sigma(alpha*beta*delta_ws + (1-alpha)*beta*delta_wt - beta*delta_l).

    Reports the two margin components: on-policy (w_t vs l) and
    hybrid-policy (w_s vs l).
    """
    w_s, w_t, l = bundle.role("w_s"), bundle.role("w_t"), bundle.role("l")
    beta = cfg.beta
    alpha = cfg.require_alpha()
    r_ws = beta * w_s.delta
    r_wt = beta * w_t.delta
    r_l = beta * l.delta
    z = compound_reward(r_ws, r_wt, alpha) - r_l
    s = float(expit(-z))
    return LossResult(
        loss=_neg_log_sigmoid(z),
        internal_rewards={"w_s": r_ws, "w_t": r_wt, "l": r_l},
        grad_wrt_logps={
            "w_s": -alpha * beta * s,
            "w_t": -(1 - alpha) * beta * s,
            "l": beta * s,
        },
        on_policy_margin=r_wt - r_l,
        hybrid_policy_margin=r_ws - r_l,
    )


def wrpo_simpo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """Length-normalized hybrid: the compound average log-prob margin minus gamma."""
    w_s, w_t, l = bundle.role("w_s"), bundle.role("w_t"), bundle.role("l")
    beta, gamma = cfg.beta, cfg.require_gamma()
    alpha = cfg.require_alpha()
    r_ws = beta * w_s.theta / w_s.length
    r_wt = beta * w_t.theta / w_t.length
    r_l = beta * l.theta / l.length
    z = compound_reward(r_ws, r_wt, alpha) - r_l - gamma
    s = float(expit(-z))
    return LossResult(
        loss=_neg_log_sigmoid(z),
        internal_rewards={"w_s": r_ws, "w_t": r_wt, "l": r_l},
        grad_wrt_logps={
            "w_s": -alpha * (beta / w_s.length) * s,
            "w_t": -(1 - alpha) * (beta / w_t.length) * s,
            "l": (beta / l.length) * s,
        },
        on_policy_margin=r_wt - r_l,
        hybrid_policy_margin=r_ws - r_l,
    )


def wrpo_ipo_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """(alpha*delta_ws + (1-alpha)*delta_wt - delta_l - 1/(2*tau))^2."""
    w_s, w_t, l = bundle.role("w_s"), bundle.role("w_t"), bundle.role("l")
    tau = cfg.require_tau()
    alpha = cfg.require_alpha()
    u = compound_reward(w_s.delta, w_t.delta, alpha) - l.delta - 1.0 / (2.0 * tau)
    beta = cfg.beta
    return LossResult(
        loss=u * u,
        internal_rewards={
            "w_s": beta * w_s.delta,
            "w_t": beta * w_t.delta,
            "l": beta * l.delta,
        },
        grad_wrt_logps={
            "w_s": 2.0 * u * alpha,
            "w_t": 2.0 * u * (1 - alpha),
            "l": -2.0 * u,
        },
        on_policy_margin=beta * w_t.delta - beta * l.delta,
        hybrid_policy_margin=beta * w_s.delta - beta * l.delta,
    )


def wrpo_with_yls_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    """Four-role variant with the dispreferred side also fusion-weighted.

    Margins pair each preferred response with the dispreferred one of the
    same origin: on-policy (w_t vs l_t), hybrid-policy (w_s vs l_s).
    """
    w_s, w_t = bundle.role("w_s"), bundle.role("w_t")
    l_s, l_t = bundle.role("l_s"), bundle.role("l_t")
    beta = cfg.beta
    alpha = cfg.require_alpha()
    r_ws, r_wt = beta * w_s.delta, beta * w_t.delta
    r_ls, r_lt = beta * l_s.delta, beta * l_t.delta
    z = compound_reward(r_ws, r_wt, alpha) - compound_reward(r_ls, r_lt, alpha)
    s = float(expit(-z))
    return LossResult(
        loss=_neg_log_sigmoid(z),
        internal_rewards={"w_s": r_ws, "w_t": r_wt, "l_s": r_ls, "l_t": r_lt},
        grad_wrt_logps={
            "w_s": -alpha * beta * s,
            "w_t": -(1 - alpha) * beta * s,
            "l_s": alpha * beta * s,
            "l_t": (1 - alpha) * beta * s,
        },
        on_policy_margin=r_wt - r_lt,
        hybrid_policy_margin=r_ws - r_ls,
    )


_DISPATCH = {
    "dpo": dpo_loss,
    "ipo": ipo_loss,
    "simpo": simpo_loss,
    "wrpo_dpo": wrpo_loss,
    "wrpo_simpo": wrpo_simpo_loss,
    "wrpo_ipo": wrpo_ipo_loss,
    "wrpo_with_yls": wrpo_with_yls_loss,
}


def evaluate_loss(bundle: LogProbBundle, cfg: ObjectiveConfig) -> LossResult:
    return _DISPATCH[cfg.kind](bundle, cfg)


def _role_logprob(model, ref, seq, kind: str) -> RoleLogProb:
    theta = policy_mod.sequence_log_prob(model, seq)
    if kind in REFERENCE_FREE_KINDS or ref is None:
        ref_lp = 0.0
    else:
        ref_lp = policy_mod.sequence_log_prob(ref, seq)
    return RoleLogProb(theta=theta, ref=ref_lp, length=len(seq.response))


def bundle_from_quadruple(
    model,
    ref,
    quadruple,
    kind: str,
    pairing: str = "on_policy",
):
    """Build (bundle, role -> Sequence) for one preference record.

    The pair-based kinds (dpo/ipo/simpo) take their preferred side from
    the target's best response (pairing="on_policy") or the source's best
    (pairing="hybrid"). The dataset's dispreferred response doubles as
    l_t for the four-role kind.
    """
    if pairing not in ("on_policy", "hybrid"):
        raise InputError(f"unknown pairing {pairing!r}")
    if kind not in KINDS:
        raise InputError(f"unknown objective kind {kind!r}")
    if kind in ("dpo", "ipo", "simpo"):
        chosen = quadruple.y_wt if pairing == "on_policy" else quadruple.y_ws
        seqs = {"w": chosen.sequence, "l": quadruple.y_l.sequence}
    elif kind == "wrpo_with_yls":
        if quadruple.y_ls is None:
            raise InputError("quadruple has no y_ls; regenerate data with include_yls")
        seqs = {
            "w_s": quadruple.y_ws.sequence,
            "w_t": quadruple.y_wt.sequence,
            "l_s": quadruple.y_ls.sequence,
            "l_t": quadruple.y_l.sequence,
        }
    else:
        seqs = {
            "w_s": quadruple.y_ws.sequence,
            "w_t": quadruple.y_wt.sequence,
            "l": quadruple.y_l.sequence,
        }
    bundle = LogProbBundle(
        roles={name: _role_logprob(model, ref, seq, kind) for name, seq in seqs.items()}
    )
    return bundle, seqs


def loss_gradient_wrt_params(
    model,
    ref,
    quadruple,
    cfg: ObjectiveConfig,
    pairing: str = "on_policy",
):
    """Compose grad_wrt_logps with the policy's exact log-prob gradients.

    Returns (LossResult, gradient table of the same shape as the policy's
    logits).
    """
    if model.frozen:
        raise UsageError("cannot differentiate a frozen model")
    bundle, seqs = bundle_from_quadruple(model, ref, quadruple, cfg.kind, pairing)
    result = evaluate_loss(bundle, cfg)
    grad = np.zeros_like(model.logits)
    for name, seq in seqs.items():
        coeff = result.grad_wrt_logps[name]
        grad += coeff * policy_mod.log_prob_gradient(model, seq)
    return result, grad
