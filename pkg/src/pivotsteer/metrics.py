"""Metric formulations: direct-prompt expectation, GPTScore and a COMET-style head.

All three can run baseline (no hooks) or steered (hooks from
:func:`pivotsteer.steering.make_hooks`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pivotsteer.steering import SteerConfig, SteeringArtifact, make_hooks
from pivotsteer.toy_model import POOLED_LAYER, LayerHook, Model, tokenize

DIMENSIONS = ("coherence", "completeness")
METRICS = ("direct", "gptscore", "comet")
RATING_TOKENS = tuple(ord(c) for c in "12345")
SCORE_FLOOR = 1e-300


@dataclass(frozen=True)
class PromptTemplate:
    dimension: str
    language: str
    body: str
    score_token_ids: tuple[int, ...] = RATING_TOKENS

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"dimension must be one of {DIMENSIONS}, got {self.dimension!r}")
        for ph in ("{document}", "{summary}"):
            if self.body.count(ph) != 1:
                raise ValueError(f"template body must contain {ph} exactly once")
        object.__setattr__(self, "score_token_ids", tuple(int(t) for t in self.score_token_ids))
        if len(self.score_token_ids) != 5 or len(set(self.score_token_ids)) != 5:
            raise ValueError("score_token_ids must be 5 distinct token ids")

    def fill(self, document: str, summary: str) -> str:
        # two-step replace would re-expand placeholders occurring inside the document
        head, tail = self.body.split("{summary}")
        return head.replace("{document}", document) + summary + tail.replace("{document}", document)

    def gpt_prefix(self, document: str) -> str:
        """Instruction text preceding the summary slot, with the document filled in."""
        head = self.body.split("{summary}")[0]
        if "{document}" not in head:
            raise ValueError("GPTScore needs {document} before {summary} in the template")
        return head.replace("{document}", document)


@dataclass
class ScoreRecord:
    item_id: str
    metric_name: str
    dimension: str
    score: float
    steering: dict | None = None

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "metric_name": self.metric_name,
            "dimension": self.dimension,
            "score": self.score,
            "steering": self.steering,
        }


def expected_rating(probs: Sequence[float]) -> float:
    """Expectation of the ratings 1..5 under the renormalised five probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (5,) or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("need five finite nonnegative probabilities")
    total = p.sum()
    if total < SCORE_FLOOR:
        raise ValueError("degenerate score distribution")
    # centred at 3 with mirrored pairs so symmetric mass cancels exactly
    tilt = 2.0 * (p[4] - p[0]) + (p[3] - p[1])
    score = 3.0 + float(tilt / total)
    return min(5.0, max(1.0, score))


def direct_prompt_score(
    model: Model, template: PromptTemplate, document: str, summary: str,
    hooks: Sequence[LayerHook] = (),
) -> float:
    prompt = tokenize(template.fill(document, summary), bos=True, eos=False)
    dist = model.next_token_distribution(prompt, hooks)
    return expected_rating(dist[list(template.score_token_ids)])


def gpt_score(
    model: Model, template: PromptTemplate, document: str, summary: str,
    hooks: Sequence[LayerHook] = (),
) -> float:
    """Mean log-probability of the summary bytes after the instruction prefix."""
    cont = list(summary.encode("utf-8"))
    if not cont:
        raise ValueError("empty summary")
    prompt = tokenize(template.gpt_prefix(document), bos=True, eos=False)
    logp = model.token_logprobs(prompt, cont, hooks)
    acc = 0.0
    for v in logp:
        acc += float(v)
    return acc / len(cont)


class RegressionHead:
    """Frozen two-layer head over ``[hyp; ref; |hyp - ref|; hyp * ref]``.

    ``score = w2 . tanh(W1^T features + b1) + b2`` with seeded Gaussian weights.
    """

    def __init__(self, d_model: int, hidden: int = 32, seed: int = 0):
        rng = np.random.Generator(np.random.Philox(seed))
        self.d_model = d_model
        self.W1 = rng.standard_normal((4 * d_model, hidden)) / np.sqrt(4 * d_model)
        self.b1 = rng.standard_normal(hidden) * 0.1
        self.w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
        self.b2 = float(rng.standard_normal() * 0.1)

    @staticmethod
    def features(hyp: np.ndarray, ref: np.ndarray) -> np.ndarray:
        return np.concatenate([hyp, ref, np.abs(hyp - ref), hyp * ref])

    def __call__(self, hyp: np.ndarray, ref: np.ndarray) -> float:
        if hyp.shape != (self.d_model,) or ref.shape != (self.d_model,):
            raise ValueError(
                f"head expects pooled vectors of size {self.d_model}, "
                f"got {hyp.shape} and {ref.shape}"
            )
        hidden = np.tanh(self.features(hyp, ref) @ self.W1 + self.b1)
        return float(hidden @ self.w2 + self.b2)


def comet_style_score(
    encoder: Model, head: RegressionHead, reference: str, hypothesis: str,
    source: str = "", pooled_steer: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Reference-based score with the source slot left empty."""
    if source != "":
        raise ValueError("source must be the empty string in summarization mode")
    if encoder.config.kind != "encoder":
        raise ValueError("comet_style_score needs an encoder model")
    hyp = encoder.forward(tokenize(hypothesis)).pooled
    ref = encoder.forward(tokenize(reference)).pooled
    if pooled_steer is not None:
        hyp = pooled_steer(hyp)
        ref = pooled_steer(ref)
    return head(hyp, ref)


class BatchScoringError(RuntimeError):
    """Some items failed; ``records`` holds the successes, ``failures`` the rest."""

    def __init__(self, records: list[ScoreRecord], failures: list[tuple[str, str]]):
        self.records = records
        self.failures = failures
        detail = "; ".join(f"{i}: {msg}" for i, msg in failures[:5])
        super().__init__(f"{len(failures)} item(s) failed: {detail}")


def batch_score(
    model: Model, metric: str, items: Sequence, template: PromptTemplate | None = None,
    steer: tuple[SteeringArtifact, SteerConfig] | None = None,
    head: RegressionHead | None = None,
) -> list[ScoreRecord]:
    """Score ``items`` in order.

    Configuration problems (unknown metric, incompatible artifact, missing
    template or head) raise immediately.  Per-item problems are collected and
    raised together as :class:`BatchScoringError` once every item was tried.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric == "comet":
        if head is None:
            raise ValueError("comet metric needs a regression head")
    elif template is None:
        raise ValueError(f"{metric} metric needs a prompt template")

    hooks: list[LayerHook] = []
    pooled_steer = None
    steering_meta = None
    if steer is not None:
        artifact, cfg = steer
        if metric == "comet" and not artifact.pool_only:
            raise ValueError("comet steering needs a pool-only artifact")
        if metric != "comet" and artifact.pool_only:
            raise ValueError("pool-only artifacts only apply to the comet metric")
        hooks = make_hooks(artifact, cfg, model)
        if artifact.pool_only:
            pooled_steer = hooks[0].transform
            assert hooks[0].layer_index == POOLED_LAYER
            hooks = []
        steering_meta = {
            "method": artifact.method,
            "strength": float(cfg.strength),
            "artifact_id": artifact.artifact_id,
        }

    records: list[ScoreRecord] = []
    failures: list[tuple[str, str]] = []
    for item in items:
        try:
            if metric == "direct":
                s = direct_prompt_score(model, template, item.document, item.summary, hooks)
            elif metric == "gptscore":
                s = gpt_score(model, template, item.document, item.summary, hooks)
            else:
                if not item.reference:
                    raise ValueError("comet metric needs a reference summary")
                s = comet_style_score(model, head, item.reference, item.summary,
                                      pooled_steer=pooled_steer)
        except ValueError as exc:
            failures.append((item.item_id, str(exc)))
            continue
        records.append(ScoreRecord(item.item_id, metric, item.dimension, s,
                                   dict(steering_meta) if steering_meta else None))
    if failures:
        raise BatchScoringError(records, failures)
    return records
