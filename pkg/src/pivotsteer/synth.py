"""Synthetic latent worlds where the right steering is known in closed form.

A world has a pivot cloud ``P`` (n x d, standard normal) and a linear quality
probe ``q``; true quality is ``P q`` plus a little observation noise.  Each
language sees the same items through its own frame::

    reps = P A^T + offset + noise

A surrogate metric reads quality with ``q`` in whatever frame it is handed,
optionally through a saturating readout ``c * tanh(x / c)``.  Unsteered it
reads the language frame, so misalignment costs correlation; steering
toward the pivot should win it back.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from pivotsteer.linalg import pearson
from pivotsteer.meta_eval import UnstableBaseline, default_grid, relative_improvement, sweep
from pivotsteer.steering import (
    HiddenStateBatch,
    SteerConfig,
    SteeringArtifact,
    _pool,
    apply_hooks,
    extract_batch,
    learn_map,
    learn_vector,
    make_hooks,
)
from pivotsteer.toy_model import LayerHook, Model, tokenize

TRAIN_PAIRS = 500
MIN_EVAL_ITEMS = 10
READOUTS = ("linear", "tanh")


@dataclass
class LanguageSpec:
    code: str
    angle_deg: float = 0.0
    noise_scale: float = 0.0
    scale_jitter: float = 0.0
    offset_norm: float = 0.0
    offset: list[float] | None = None
    transform: list[list[float]] | None = None


@dataclass
class WorldSpec:
    d: int = 8
    n_items: int = 800
    languages: list[LanguageSpec] = field(default_factory=list)
    obs_noise: float = 0.01
    readout: str = "linear"
    readout_scale: float = 2.0

    @classmethod
    def from_dict(cls, raw: dict) -> "WorldSpec":
        raw = dict(raw)
        raw["languages"] = [LanguageSpec(**l) for l in raw.get("languages", [])]
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def default_spec() -> WorldSpec:
    """Four languages at increasing rotation from the pivot, each with a mean shift."""
    return WorldSpec(
        d=8,
        n_items=800,
        languages=[
            LanguageSpec(f"rot{a}", angle_deg=a, noise_scale=0.2, scale_jitter=0.1, offset_norm=2.0)
            for a in (15, 30, 60, 85)
        ],
        readout="tanh",
        readout_scale=2.0,
    )


def outlier_spec(
    d: int = 8, n_items: int = 500, cluster: Sequence[str] = ("es", "fr", "de"),
    outlier: str = "yo", offset_norm: float = 2.0, spread: float = 0.1, noise_scale: float = 0.1,
) -> WorldSpec:
    """Cluster languages share one offset (plus a small distinct nudge each); the
    outlier's offset is orthogonal to all of them.  Transforms are identity so
    the learned vectors are just the negated offsets."""
    if d < len(cluster) + 2:
        raise ValueError(f"d={d} too small for {len(cluster)} cluster languages")
    langs = []
    for i, code in enumerate(cluster):
        off = np.zeros(d)
        off[0] = offset_norm
        off[2 + i] = spread
        langs.append(LanguageSpec(code, noise_scale=noise_scale, offset=off.tolist()))
    off = np.zeros(d)
    off[1] = offset_norm
    langs.append(LanguageSpec(outlier, noise_scale=noise_scale, offset=off.tolist()))
    return WorldSpec(d=d, n_items=n_items, languages=langs)


def pivot_vectors(world: LatentWorld, rows: slice = slice(0, TRAIN_PAIRS)) -> list[SteeringArtifact]:
    """One single-layer language->pivot vector artifact per language."""
    return [learn_vector(*batches(world, code, rows)) for code in world.languages]


@dataclass
class Language:
    code: str
    transform: np.ndarray
    offset: np.ndarray
    noise_scale: float
    reps: np.ndarray


@dataclass
class LatentWorld:
    seed: int
    d: int
    n_items: int
    pivot_reps: np.ndarray
    languages: dict[str, Language]
    quality_probe: np.ndarray
    quality_scores: np.ndarray
    readout: str = "linear"
    readout_scale: float = 2.0

    def language(self, code: str) -> Language:
        try:
            return self.languages[code]
        except KeyError:
            raise KeyError(f"unknown language {code!r}; world has {sorted(self.languages)}") from None


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def plane_rotation(d: int, angle: float) -> np.ndarray:
    """Rotate each coordinate plane (0,1), (2,3), ... by ``angle``."""
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, d - 1, 2):
        R[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return R


def _language_transform(rng, d: int, spec: LanguageSpec) -> np.ndarray:
    if spec.transform is not None:
        A = np.asarray(spec.transform, dtype=np.float64)
        if A.shape != (d, d):
            raise ValueError(f"language {spec.code}: transform must be {d}x{d}")
    elif spec.angle_deg == 0 and spec.scale_jitter == 0:
        return np.eye(d)
    else:
        Q = random_orthogonal(rng, d)
        R = plane_rotation(d, math.radians(spec.angle_deg))
        if not 0 <= spec.scale_jitter < 1:
            raise ValueError(f"language {spec.code}: scale_jitter must be in [0, 1)")
        D = np.diag(1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter, d))
        A = Q @ R @ Q.T @ D
    if np.linalg.cond(A) > 1e3:
        raise ValueError(f"language {spec.code}: transform condition number exceeds 1e3")
    return A


def generate_world(seed: int, spec: WorldSpec) -> LatentWorld:
    d, n = spec.d, spec.n_items
    if d < 2 or n < 10:
        raise ValueError("need d >= 2 and n_items >= 10")
    if spec.readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}")
    if not spec.languages:
        raise ValueError("world needs at least one language")
    codes = [l.code for l in spec.languages]
    if len(set(codes)) != len(codes):
        raise ValueError("duplicate language codes")
    rng = np.random.default_rng(seed)
    pivot = rng.standard_normal((n, d))
    probe = rng.standard_normal(d)
    probe /= np.linalg.norm(probe)
    quality = pivot @ probe + spec.obs_noise * rng.standard_normal(n)
    langs = {}
    for ls in spec.languages:
        if ls.noise_scale < 0:
            raise ValueError(f"language {ls.code}: negative noise_scale")
        A = _language_transform(rng, d, ls)
        if ls.offset is not None:
            offset = np.asarray(ls.offset, dtype=np.float64)
            if offset.shape != (d,):
                raise ValueError(f"language {ls.code}: offset must have length {d}")
        else:
            direction = rng.standard_normal(d)
            offset = ls.offset_norm * direction / np.linalg.norm(direction)
        noise = rng.standard_normal((n, d))
        reps = pivot @ A.T + offset
        if ls.noise_scale:
            reps = reps + ls.noise_scale * noise
        langs[ls.code] = Language(ls.code, A, offset, ls.noise_scale, reps)
    return LatentWorld(seed, d, n, pivot, langs, probe, quality, spec.readout, spec.readout_scale)


def batches(
    world: LatentWorld, language: str, rows: slice = slice(None)
) -> tuple[HiddenStateBatch, HiddenStateBatch]:
    """(language, pivot) single-layer batches over ``rows``, paired by item."""
    lang = world.language(language)
    return (
        HiddenStateBatch([lang.reps[rows]], source_tag=language),
        HiddenStateBatch([world.pivot_reps[rows]], source_tag="pivot"),
    )


def probe_metric(
    world: LatentWorld, language: str,
    steer: tuple[SteeringArtifact, SteerConfig] | None = None, rows: slice = slice(None),
) -> np.ndarray:
    reps = world.language(language).reps[rows]
    if steer is not None:
        artifact, cfg = steer
        reps = apply_hooks(reps, make_hooks(artifact, cfg), 0)
    if world.readout == "tanh":
        c = world.readout_scale
        reps = c * np.tanh(reps / c)
    return reps @ world.quality_probe


@dataclass
class ExperimentRow:
    seed: int
    language: str
    method: str
    strength: float
    baseline_r: float
    steered_r: float
    delta_pct: float | None


@dataclass
class ExperimentTable:
    rows: list[ExperimentRow]

    @property
    def fraction_improved(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.delta_pct is not None and r.delta_pct > 0 for r in self.rows) / len(self.rows)

    @property
    def mean_delta_pct(self) -> float:
        vals = [r.delta_pct for r in self.rows if r.delta_pct is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> str:
        return (f"fraction improved: {self.fraction_improved:.4f}, "
                f"mean delta%: {self.mean_delta_pct:.4f}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "language", "method", "strength", "baseline_r", "steered_r",
                    "delta_pct"])
        for r in self.rows:
            w.writerow([r.seed, r.language, r.method, format(r.strength, ".17g"),
                        format(r.baseline_r, ".17g"), format(r.steered_r, ".17g"),
                        "" if r.delta_pct is None else format(r.delta_pct, ".17g")])
        return buf.getvalue()


def run_pivot_experiment(
    seeds: Sequence[int], spec: WorldSpec, methods: Sequence[str] = ("vector", "map"),
    grids: dict[str, Sequence[float]] | None = None, train_pairs: int = TRAIN_PAIRS,
    ridge: float | None = None,
) -> ExperimentTable:
    """Learn on the first ``train_pairs`` items, sweep and score on the rest."""
    if len(seeds) < 5:
        raise ValueError("run_pivot_experiment needs at least 5 seeds")
    if spec.n_items < train_pairs + MIN_EVAL_ITEMS:
        raise ValueError(
            f"n_items={spec.n_items} leaves fewer than {MIN_EVAL_ITEMS} items after a "
            f"{train_pairs}-pair learning split"
        )
    grids = dict(grids or {})
    train, held = slice(0, train_pairs), slice(train_pairs, None)
    rows: list[ExperimentRow] = []
    for seed in sorted(seeds):
        world = generate_world(seed, spec)
        quality = world.quality_scores[held]
        for code in world.languages:
            src, tgt = batches(world, code, train)
            for method in methods:
                art = learn_vector(src, tgt) if method == "vector" else learn_map(src, tgt, ridge)
                grid = grids.get(method, default_grid(method))

                def run(strength: float) -> float:
                    scores = probe_metric(world, code, (art, SteerConfig(strength)), held)
                    return pearson(scores, quality)

                res = sweep(run, grid)
                best = res.best
                try:
                    delta = relative_improvement(res.baseline_r, best.steered_r)
                except UnstableBaseline:
                    delta = None
                rows.append(ExperimentRow(seed, code, method, best.strength, res.baseline_r,
                                          best.steered_r, delta))
    return ExperimentTable(rows)


# -- end-to-end mode through the toy transformer ------------------------------

def synthetic_sentences(seed: int, n: int, min_words: int = 3, max_words: int = 8) -> list[str]:
    rng = random.Random(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = []
    for _ in range(n):
        words = ["".join(rng.choice(letters) for _ in range(rng.randint(2, 7)))
                 for _ in range(rng.randint(min_words, max_words))]
        out.append(" ".join(words))
    return out


def byte_cipher(seed: int) -> dict[str, str]:
    """A seeded letter substitution standing in for a second 'language'."""
    rng = random.Random(seed)
    src = "abcdefghijklmnopqrstuvwxyz"
    dst = list("abcdefghijklmnopqrstuvwxyz0123456789")
    rng.shuffle(dst)
    return dict(zip(src, dst[: len(src)]))


def translate(sentence: str, cipher: dict[str, str]) -> str:
    return "".join(cipher.get(ch, ch) for ch in sentence)


def pooled_states(
    model: Model, sentences: Sequence[str], hooks: Sequence[LayerHook] = (), layer: int = -1
) -> np.ndarray:
    """Mean-pooled residual stream at ``layer`` for each sentence, hooks applied."""
    rows = []
    for s in sentences:
        toks = tokenize(s)
        rows.append(_pool(model.forward(toks, hooks).hidden_states[layer], toks, "mean-pool"))
    return np.stack(rows)


def run_toy_experiment(
    model: Model, seeds: Sequence[int], n_train: int = 48, n_eval: int = 32,
    layer: int | None = None, methods: Sequence[str] = ("vector", "map"),
    grids: dict[str, Sequence[float]] | None = None,
) -> ExperimentTable:
    """Cipher-vs-plain sentences through the toy model with real forward hooks.

    The plain sentences play the pivot.  Quality is a seeded probe read off
    the final-layer pooled states of the plain text; the metric reads the same
    probe off the ciphered text, steered at a single ``layer``.
    """
    if n_train < 2 or n_eval < 3:
        raise ValueError("need n_train >= 2 and n_eval >= 3")
    L = model.config.n_layers
    layer = L // 2 if layer is None else layer
    if not 0 <= layer < L:
        raise ValueError(f"layer {layer} out of range; valid layers are 0..{L - 1}")
    grids = dict(grids or {})
    rows: list[ExperimentRow] = []
    for seed in sorted(seeds):
        plain = synthetic_sentences(seed, n_train + n_eval)
        cipher = byte_cipher(seed)
        foreign = [translate(s, cipher) for s in plain]
        src = extract_batch(model, foreign[:n_train], source_tag="cipher")
        tgt = extract_batch(model, plain[:n_train], source_tag="pivot")
        probe = np.random.default_rng(seed).standard_normal(model.config.d_model)
        quality = pooled_states(model, plain[n_train:]) @ probe
        prov = {"model_checksum": model.checksum, "corpus_id": f"cipher-{seed}"}
        for method in methods:
            if method == "vector":
                art = learn_vector(src, tgt, provenance=prov)
            else:
                art = learn_map(src, tgt, provenance=prov)

            def run(strength: float) -> float:
                hooks = make_hooks(art, SteerConfig(strength, frozenset({layer})), model)
                return pearson(pooled_states(model, foreign[n_train:], hooks) @ probe, quality)

            res = sweep(run, grids.get(method, default_grid(method)))
            try:
                delta = relative_improvement(res.baseline_r, res.best.steered_r)
            except UnstableBaseline:
                delta = None
            rows.append(ExperimentRow(seed, "cipher", method, res.best.strength,
                                      res.baseline_r, res.best.steered_r, delta))
    return ExperimentTable(rows)
