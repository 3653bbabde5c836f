"""Preference-data construction for the toy task.

A deterministic bigram-affinity oracle stands in for the external reward
model; frozen tabular policies fitted toward the oracle's preferred
transitions (with varying noise) stand in for the source-model ensemble.
Candidates are sampled per (prompt, model), scored, and assembled into
preference quadruples (x, y_ws, y_wt, y_l[, y_ls]).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InputError
from .policy import (
    PolicyModel,
    SamplingConfig,
    Sequence,
    Vocabulary,
    avg_log_prob,
    derive_rng,
    sample_response,
    stream_salt,
)

__all__ = [
    "BigramRewardOracle",
    "make_oracle",
    "expert_logit_table",
    "make_source_ensemble",
    "EnsembleMember",
    "SourceEnsemble",
    "ScoredResponse",
    "PreferenceQuadruple",
    "CandidateSet",
    "SftRecord",
    "DatasetSplit",
    "make_prompts",
    "generate_candidates",
    "assemble_quadruples",
    "split_dataset",
    "distribution_deviation_report",
    "write_quadruples",
    "read_quadruples",
    "write_attribution_csv",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BigramRewardOracle:
    """Deterministic score: mean transition affinity minus a brevity term.

    weights[prev, next] in [0, 1] defines the hidden "expert" transition
    preferences; the score of a response is the mean affinity over its
    transitions (the first conditioned on the last prompt token) minus
    length_penalty per response token.
    """

    weights: np.ndarray
    length_penalty: float = 0.01
    bos_id: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InputError("oracle weights must be a square (V, V) matrix")
        object.__setattr__(self, "weights", w)

    def score(self, prompt: tuple[int, ...], response: tuple[int, ...]) -> float:
        if len(response) == 0:
            raise InputError("cannot score an empty response")
        prev = (prompt[-1] if prompt else self.bos_id, *response[:-1])
        affin = self.weights[np.asarray(prev), np.asarray(response)]
        return float(affin.mean() - self.length_penalty * len(response))


def make_oracle(
    vocab: Vocabulary, seed: int = 7, length_penalty: float = 0.01
) -> BigramRewardOracle:
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.0, 1.0, size=(vocab.size, vocab.size))
    return BigramRewardOracle(
        weights=weights, length_penalty=length_penalty, bos_id=vocab.bos_id
    )


def expert_logit_table(
    vocab: Vocabulary, order: int, oracle: BigramRewardOracle, sharpness: float
) -> np.ndarray:
    """Logit table whose every context prefers the oracle's transitions.

    The affinity depends only on the previous token, which is the least
    significant digit of the context row index.
    """
    rows = vocab.size**order
    last_token = np.arange(rows) % vocab.size
    return sharpness * oracle.weights[last_token]


@dataclass(frozen=True)
class EnsembleMember:
    name: str
    model: PolicyModel
    sampling: SamplingConfig

    def __post_init__(self):
        if not self.model.frozen:
            raise InputError(f"ensemble member {self.name!r} must be frozen")


@dataclass(frozen=True)
class SourceEnsemble:
    members: tuple[EnsembleMember, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise InputError("ensemble needs at least one member")
        names = [m.name for m in self.members]
        if len(set(names)) != len(names):
            raise InputError("ensemble member names must be unique")

    @classmethod
    def single(cls, name: str, model: PolicyModel, sampling: SamplingConfig):
        return cls(members=(EnsembleMember(name, model, sampling),))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.members)


def make_source_ensemble(
    vocab: Vocabulary,
    order: int,
    oracle: BigramRewardOracle,
    specs: list[tuple[str, float, float]],
    sampling: SamplingConfig,
    seed: int = 0,
) -> SourceEnsemble:
    """Members are expert tables perturbed by per-member Gaussian noise.

    specs: (name, sharpness, noise_scale) per member; higher sharpness and
    lower noise means closer to the oracle's preferences.
    """
    members = []
    for idx, (name, sharpness, noise) in enumerate(specs):
        rng = derive_rng(seed, stream_salt("ensemble-init"), idx)
        table = expert_logit_table(vocab, order, oracle, sharpness)
        table = table + noise * rng.standard_normal(table.shape)
        model = PolicyModel(vocab=vocab, order=order, logits=table, frozen=True)
        members.append(EnsembleMember(name=name, model=model, sampling=sampling))
    return SourceEnsemble(members=tuple(members))


@dataclass(frozen=True)
class ScoredResponse:
    sequence: Sequence
    score: float
    model: str
    sample_index: int


@dataclass(frozen=True)
class PreferenceQuadruple:
    prompt: tuple[int, ...]
    y_ws: ScoredResponse
    y_wt: ScoredResponse
    y_l: ScoredResponse
    y_ls: ScoredResponse | None = None


@dataclass(frozen=True)
class SftRecord:
    prompt: tuple[int, ...]
    y_ws: ScoredResponse


@dataclass
class CandidateSet:
    """N scored samples per (prompt, model), in generation order."""

    prompts: list[tuple[int, ...]]
    model_names: list[str]
    samples: list[list[list[ScoredResponse]]]  # [prompt][model][sample]


@dataclass
class DatasetSplit:
    sft_records: list[SftRecord]
    po_records: list[PreferenceQuadruple]
    split_fraction: float


def make_prompts(
    vocab: Vocabulary, n_prompts: int, prompt_length: int = 3, seed: int = 2
) -> list[tuple[int, ...]]:
    """Distinct prompts over the content tokens, deterministic under seed."""
    content = vocab.content_ids
    total = len(content) ** prompt_length
    if n_prompts < 1:
        raise InputError("n_prompts must be >= 1")
    if n_prompts > total:
        raise InputError(
            f"cannot draw {n_prompts} distinct prompts of length {prompt_length} "
            f"from {len(content)} content tokens ({total} available)"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(total)[:n_prompts]
    base = len(content)
    prompts = []
    for code in chosen:
        toks = []
        c = int(code)
        for _ in range(prompt_length):
            toks.append(content[c % base])
            c //= base
        prompts.append(tuple(reversed(toks)))
    return prompts


def generate_candidates(
    ensemble: SourceEnsemble,
    prompts: list[tuple[int, ...]],
    n_samples: int,
    oracle: BigramRewardOracle,
) -> CandidateSet:
    """Exactly n_samples scored draws per (prompt, member).

    Each draw uses its own counter-derived stream keyed by (member name,
    prompt index, sample index), so generation order never matters.
    """
    if len(prompts) == 0:
        raise InputError("prompt list is empty")
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    samples: list[list[list[ScoredResponse]]] = []
    for p_idx, prompt in enumerate(prompts):
        per_model = []
        for member in ensemble.members:
            salt = stream_salt(member.name)
            draws = []
            for s_idx in range(n_samples):
                rng = derive_rng(member.sampling.seed, salt, p_idx, s_idx)
                seq = sample_response(member.model, prompt, member.sampling, rng=rng)
                draws.append(
                    ScoredResponse(
                        sequence=seq,
                        score=oracle.score(prompt, seq.response),
                        model=member.name,
                        sample_index=s_idx,
                    )
                )
            per_model.append(draws)
        samples.append(per_model)
    return CandidateSet(
        prompts=list(prompts), model_names=list(ensemble.names), samples=samples
    )


def _argbest(candidates: list[ScoredResponse], want_max: bool) -> ScoredResponse:
    # Strict comparison keeps the earliest (model order, then sample index) on ties.
    best = candidates[0]
    for cand in candidates[1:]:
        if (cand.score > best.score) if want_max else (cand.score < best.score):
            best = cand
    return best


def assemble_quadruples(
    candidates_source: CandidateSet,
    candidates_target: CandidateSet,
    include_yls: bool = False,
) -> tuple[list[PreferenceQuadruple], list[tuple[str, int, float]]]:
    """Select y_ws / y_wt / y_l per prompt and tally source attribution.

    Returns (quadruples, attribution rows) where each attribution row is
    (model name, win count, percentage of prompts won).
    """
    if candidates_source.prompts != candidates_target.prompts:
        raise InputError("source and target candidate sets cover different prompts")
    wins = {name: 0 for name in candidates_source.model_names}
    quadruples = []
    degenerate = 0
    for p_idx, prompt in enumerate(candidates_source.prompts):
        source_pool = [
            c for per_model in candidates_source.samples[p_idx] for c in per_model
        ]
        target_pool = [
            c for per_model in candidates_target.samples[p_idx] for c in per_model
        ]
        y_ws = _argbest(source_pool, want_max=True)
        y_wt = _argbest(target_pool, want_max=True)
        y_l = _argbest(target_pool, want_max=False)
        y_ls = None
        if include_yls:
            same_model = [c for c in source_pool if c.model == y_ws.model]
            y_ls = _argbest(same_model, want_max=False)
        wins[y_ws.model] += 1
        if y_wt.score == y_l.score:
            degenerate += 1
        quadruples.append(
            PreferenceQuadruple(
                prompt=prompt, y_ws=y_ws, y_wt=y_wt, y_l=y_l, y_ls=y_ls
            )
        )
    if degenerate:
        log.warning(
            "%d/%d prompts have degenerate target pairs (y_wt score == y_l score)",
            degenerate,
            len(quadruples),
        )
    n = len(quadruples)
    attribution = [
        (name, wins[name], 100.0 * wins[name] / n)
        for name in candidates_source.model_names
    ]
    return quadruples, attribution


def split_dataset(
    quadruples: list[PreferenceQuadruple], fraction: float, seed: int
) -> DatasetSplit:
    """Seeded shuffle then prefix split into SFT records and PO quadruples."""
    if not 0 < fraction < 1:
        raise InputError("split fraction must be in (0, 1)")
    if len(quadruples) < 2:
        raise InputError("need at least 2 records to split")
    prompts = [q.prompt for q in quadruples]
    if len(set(prompts)) != len(prompts):
        raise DataError("duplicate prompts would break split disjointness")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(quadruples))
    n_sft = int(fraction * len(quadruples))
    sft = [SftRecord(quadruples[i].prompt, quadruples[i].y_ws) for i in perm[:n_sft]]
    po = [quadruples[i] for i in perm[n_sft:]]
    return DatasetSplit(sft_records=sft, po_records=po, split_fraction=fraction)


@dataclass
class RoleStats:
    n: int
    mean_avg_logp: float
    std_avg_logp: float
    mean_score: float
    histogram: list[int]


@dataclass
class DeviationReport:
    """Per-role avg-log-prob and score statistics under one evaluation model."""

    roles: dict[str, RoleStats]
    bin_edges: list[float]

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges,
            "roles": {
                name: {
                    "n": s.n,
                    "mean_avg_logp": s.mean_avg_logp,
                    "std_avg_logp": s.std_avg_logp,
                    "mean_score": s.mean_score,
                    "histogram": s.histogram,
                }
                for name, s in self.roles.items()
            },
        }


def distribution_deviation_report(
    model: PolicyModel,
    quadruples: list[PreferenceQuadruple],
    bins: int = 20,
) -> DeviationReport:
    """Average per-token log-probability of each role under ``model``.

    Roles y_ws / y_wt / y_l (and y_ls when present) are reported
    individually plus a pooled "target_origin" group (y_wt and y_l), the
    comparison group for the source-vs-target deviation diagnostic. Mean
    oracle scores per role ride along so the four-role score ordering can
    be inspected.
    """
    if len(quadruples) == 0:
        raise InputError("quadruple list is empty")
    groups: dict[str, list[ScoredResponse]] = {"y_ws": [], "y_wt": [], "y_l": []}
    if any(q.y_ls is not None for q in quadruples):
        groups["y_ls"] = []
    for q in quadruples:
        groups["y_ws"].append(q.y_ws)
        groups["y_wt"].append(q.y_wt)
        groups["y_l"].append(q.y_l)
        if "y_ls" in groups and q.y_ls is not None:
            groups["y_ls"].append(q.y_ls)
    groups["target_origin"] = groups["y_wt"] + groups["y_l"]

    logps = {
        name: np.array(
            [avg_log_prob(model, s.sequence) for s in members], dtype=np.float64
        )
        for name, members in groups.items()
    }
    lo = min(v.min() for v in logps.values())
    hi = max(v.max() for v in logps.values())
    if hi == lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    roles = {}
    for name, members in groups.items():
        vals = logps[name]
        hist, _ = np.histogram(vals, bins=edges)
        roles[name] = RoleStats(
            n=len(vals),
            mean_avg_logp=float(vals.mean()),
            std_avg_logp=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            mean_score=float(np.mean([s.score for s in members])),
            histogram=[int(c) for c in hist],
        )
    return DeviationReport(roles=roles, bin_edges=[float(e) for e in edges])


def _role_dict(r: ScoredResponse) -> dict:
    return {
        "tokens": list(r.sequence.response),
        "score": r.score,
        "model": r.model,
        "sample_index": r.sample_index,
    }


def _role_from_dict(prompt: tuple[int, ...], d: dict) -> ScoredResponse:
    return ScoredResponse(
        sequence=Sequence(prompt=prompt, response=tuple(d["tokens"])),
        score=float(d["score"]),
        model=d["model"],
        sample_index=int(d["sample_index"]),
    )


def write_quadruples(path, quadruples: list[PreferenceQuadruple]) -> None:
    """JSONL, one quadruple per line; byte-stable given identical inputs."""
    with open(path, "w") as fh:
        for q in quadruples:
            record = {
                "schema_version": SCHEMA_VERSION,
                "prompt": list(q.prompt),
                "y_ws": _role_dict(q.y_ws),
                "y_wt": _role_dict(q.y_wt),
                "y_l": _role_dict(q.y_l),
                "y_ls": _role_dict(q.y_ls) if q.y_ls is not None else None,
            }
            fh.write(json.dumps(record) + "\n")


def read_quadruples(path) -> list[PreferenceQuadruple]:
    quadruples = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            if d.get("schema_version") != SCHEMA_VERSION:
                raise DataError(
                    f"{path}:{line_no}: unsupported schema version "
                    f"{d.get('schema_version')!r}"
                )
            prompt = tuple(d["prompt"])
            quadruples.append(
                PreferenceQuadruple(
                    prompt=prompt,
                    y_ws=_role_from_dict(prompt, d["y_ws"]),
                    y_wt=_role_from_dict(prompt, d["y_wt"]),
                    y_l=_role_from_dict(prompt, d["y_l"]),
                    y_ls=(
                        _role_from_dict(prompt, d["y_ls"])
                        if d.get("y_ls") is not None
                        else None
                    ),
                )
            )
    return quadruples


def write_attribution_csv(path, attribution: list[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "wins", "percentage"])
        for name, count, pct in attribution:
            writer.writerow([name, count, repr(pct)])
