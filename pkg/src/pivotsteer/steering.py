"""Learning and applying cross-lingual steering interventions.

Two interventions are supported, both learned per layer from parallel
(source, target) representations:

* ``vector``: ``v_l = mean(target_l) - mean(source_l)``; applied as
  ``h + rho * v_l``.
* ``map``: ``W_l = argmin_W sum_i ||W s_i - t_i||^2``; applied as the convex
  mix ``(1 - sigma) h + sigma W_l h``, or as ``h + sigma W_l h`` when
  ``clamp_sigma`` is off.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pivotsteer.linalg import as_matrix, default_ridge, fit_linear_map, mean_rows
from pivotsteer.toy_model import (
    POOLED_LAYER,
    SPECIAL_TOKENS,
    LayerHook,
    Model,
    tokenize,
)

ARTIFACT_FORMAT_VERSION = 1
POLICIES = ("mean-pool", "last-token")
METHODS = ("vector", "map")


class ArtifactError(ValueError):
    """Base class for artifact file problems."""


class ArtifactVersionError(ArtifactError):
    pass


class ArtifactChecksumError(ArtifactError):
    pass


class MalformedArtifactError(ArtifactError):
    pass


class ModelMismatchError(ValueError):
    """Artifact was learned on a different model than the one it is applied to."""


@dataclass
class HiddenStateBatch:
    layer_states: list[np.ndarray]
    source_tag: str = ""
    extraction_policy: str = "mean-pool"

    def __post_init__(self):
        if not self.layer_states:
            raise ValueError("batch needs at least one layer")
        self.layer_states = [as_matrix(m, "layer state") for m in self.layer_states]
        shape = self.layer_states[0].shape
        if shape[0] < 1:
            raise ValueError("batch needs at least one row")
        for m in self.layer_states:
            if m.shape != shape:
                raise ValueError(f"inconsistent layer shapes {shape} vs {m.shape}")

    @property
    def n(self) -> int:
        return self.layer_states[0].shape[0]

    @property
    def d(self) -> int:
        return self.layer_states[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_states)


@dataclass
class SteeringArtifact:
    method: str
    per_layer: list[np.ndarray]
    source_lang: str
    target_lang: str
    d: int
    n_layers: int
    pool_only: bool = False
    extraction_policy: str = "mean-pool"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.per_layer = [np.asarray(p, dtype=np.float64) for p in self.per_layer]
        expected = 1 if self.pool_only else self.n_layers
        if len(self.per_layer) != expected:
            raise ValueError(f"expected {expected} per-layer entries, got {len(self.per_layer)}")
        shape = (self.d,) if self.method == "vector" else (self.d, self.d)
        for p in self.per_layer:
            if p.shape != shape:
                raise ValueError(f"per-layer entry shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise ValueError("per-layer entry contains non-finite values")
        self.provenance = {
            "corpus_id": self.provenance.get("corpus_id", ""),
            "pair_count": int(self.provenance.get("pair_count", 0)),
            "model_checksum": self.provenance.get("model_checksum"),
            **{k: v for k, v in self.provenance.items()
               if k not in ("corpus_id", "pair_count", "model_checksum")},
        }

    @property
    def checksum(self) -> str:
        return _content_checksum(_header(self), self.per_layer)

    @property
    def artifact_id(self) -> str:
        return self.checksum[:12]


@dataclass(frozen=True)
class SteerConfig:
    strength: float
    layers: str | frozenset[int] = "all"
    clamp_sigma: bool = True


def _pool(hidden: np.ndarray, tokens: Sequence[int], policy: str) -> np.ndarray:
    if policy == "last-token":
        return hidden[-1]
    keep = np.array([t not in SPECIAL_TOKENS for t in tokens])
    if not keep.any():
        raise ValueError("mean-pool needs at least one non-special token")
    return hidden[keep].mean(axis=0)


def extract_batch(
    model: Model, sentences: Sequence[str], policy: str = "mean-pool", source_tag: str = ""
) -> HiddenStateBatch:
    """Per-layer representations of each sentence from a hook-free pass.

    ``mean-pool`` averages the residual stream over non-special positions;
    ``last-token`` takes the final position (the EOS frame).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown extraction policy {policy!r}")
    if not sentences:
        raise ValueError("empty sentence list")
    rows: list[list[np.ndarray]] = [[] for _ in range(model.config.n_layers)]
    for i, s in enumerate(sentences):
        toks = tokenize(s)
        if len(toks) > model.config.max_seq:
            raise ValueError(
                f"sentence {i} has {len(toks)} tokens, exceeding max_seq {model.config.max_seq}"
            )
        trace = model.forward(toks)
        for l, h in enumerate(trace.hidden_states):
            rows[l].append(_pool(h, toks, policy))
    return HiddenStateBatch([np.stack(r) for r in rows], source_tag, policy)


def extract_pooled_batch(
    model: Model, sentences: Sequence[str], source_tag: str = ""
) -> HiddenStateBatch:
    """Single-layer batch of encoder pooled vectors (COMET-style steering site)."""
    if model.config.kind != "encoder":
        raise ValueError("pooled extraction needs an encoder model")
    if not sentences:
        raise ValueError("empty sentence list")
    rows = []
    for i, s in enumerate(sentences):
        toks = tokenize(s)
        if len(toks) > model.config.max_seq:
            raise ValueError(
                f"sentence {i} has {len(toks)} tokens, exceeding max_seq {model.config.max_seq}"
            )
        rows.append(model.forward(toks).pooled)
    return HiddenStateBatch([np.stack(rows)], source_tag, "mean-pool")


def _check_pair(src: HiddenStateBatch, tgt: HiddenStateBatch) -> None:
    if (src.n, src.d, src.n_layers) != (tgt.n, tgt.d, tgt.n_layers):
        raise ValueError(
            f"shape mismatch: source (n={src.n}, d={src.d}, layers={src.n_layers}) vs "
            f"target (n={tgt.n}, d={tgt.d}, layers={tgt.n_layers})"
        )


def _artifact(method, per_layer, src, tgt, n_layers, pool_only, provenance):
    prov = {"pair_count": src.n, **(provenance or {})}
    return SteeringArtifact(
        method=method,
        per_layer=per_layer,
        source_lang=src.source_tag,
        target_lang=tgt.source_tag,
        d=src.d,
        n_layers=n_layers if n_layers is not None else src.n_layers,
        pool_only=pool_only,
        extraction_policy=src.extraction_policy,
        provenance=prov,
    )


def learn_vector(
    src: HiddenStateBatch, tgt: HiddenStateBatch, *, pool_only: bool = False,
    n_layers: int | None = None, provenance: dict | None = None,
) -> SteeringArtifact:
    _check_pair(src, tgt)
    vecs = [mean_rows(t) - mean_rows(s) for s, t in zip(src.layer_states, tgt.layer_states)]
    return _artifact("vector", vecs, src, tgt, n_layers, pool_only, provenance)


def learn_map(
    src: HiddenStateBatch, tgt: HiddenStateBatch, ridge: float | None = None, *,
    pool_only: bool = False, n_layers: int | None = None, provenance: dict | None = None,
) -> SteeringArtifact:
    """Fit one least-squares map per layer; ``ridge=None`` uses :func:`default_ridge`."""
    _check_pair(src, tgt)
    maps = []
    for s, t in zip(src.layer_states, tgt.layer_states):
        r = default_ridge(s) if ridge is None else ridge
        maps.append(fit_linear_map(s, t, r))
    return _artifact("map", maps, src, tgt, n_layers, pool_only, provenance)


def vector_transform(v: np.ndarray, rho: float) -> Callable[[np.ndarray], np.ndarray]:
    def add(h: np.ndarray) -> np.ndarray:
        return h + rho * v
    return add


def map_transform(W: np.ndarray, sigma: float, clamp: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    if clamp:
        def mix(h: np.ndarray) -> np.ndarray:
            return (1.0 - sigma) * h + sigma * (h @ W.T)
    else:
        def mix(h: np.ndarray) -> np.ndarray:
            return h + sigma * (h @ W.T)
    return mix


def check_model(artifact: SteeringArtifact, model: Model) -> None:
    cfg = model.config
    if artifact.d != cfg.d_model:
        raise ModelMismatchError(f"artifact d={artifact.d} but model d_model={cfg.d_model}")
    if not artifact.pool_only and artifact.n_layers != cfg.n_layers:
        raise ModelMismatchError(
            f"artifact has {artifact.n_layers} layers but model has {cfg.n_layers}"
        )
    expected = artifact.provenance.get("model_checksum")
    if expected and expected != model.checksum:
        raise ModelMismatchError(
            f"artifact was learned on model {expected[:12]}, not {model.checksum[:12]}"
        )


def make_hooks(
    artifact: SteeringArtifact, cfg: SteerConfig, model: Model | None = None
) -> list[LayerHook]:
    """Turn an artifact into hooks at the selected layers.

    Pool-only artifacts yield a single hook at :data:`POOLED_LAYER`, meant for
    the encoder's pooled vector rather than the residual stream.
    """
    if model is not None:
        check_model(artifact, model)
    if artifact.method == "map" and cfg.clamp_sigma and not 0.0 <= cfg.strength <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1] when clamped, got {cfg.strength}")

    def transform(entry: np.ndarray):
        if artifact.method == "vector":
            return vector_transform(entry, cfg.strength)
        return map_transform(entry, cfg.strength, cfg.clamp_sigma)

    if artifact.pool_only:
        return [LayerHook(POOLED_LAYER, transform(artifact.per_layer[0]))]
    if cfg.layers == "all":
        layers = range(artifact.n_layers)
    else:
        layers = sorted(cfg.layers)
        bad = [l for l in layers if not 0 <= l < artifact.n_layers]
        if bad:
            raise ValueError(f"layers {bad} outside [0, {artifact.n_layers - 1}]")
    return [LayerHook(l, transform(artifact.per_layer[l])) for l in layers]


def apply_hooks(h: np.ndarray, hooks: Sequence[LayerHook], layer: int) -> np.ndarray:
    """Apply the hooks registered at ``layer`` to ``h`` in registration order."""
    for hook in hooks:
        if hook.layer_index == layer:
            h = hook.transform(h)
    return h


# -- persistence --------------------------------------------------------------

def _header(a: SteeringArtifact) -> dict:
    return {
        "format_version": ARTIFACT_FORMAT_VERSION,
        "method": a.method,
        "source_lang": a.source_lang,
        "target_lang": a.target_lang,
        "d": a.d,
        "n_layers": a.n_layers,
        "pool_only": a.pool_only,
        "extraction_policy": a.extraction_policy,
        "provenance": a.provenance,
    }


def _content_checksum(header: dict, per_layer: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for p in per_layer:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def format_float(x: float) -> str:
    """17 significant digits, always a float literal so ``-0.0`` keeps its sign."""
    s = format(float(x), ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _dump_array(a: np.ndarray) -> str:
    if a.ndim == 1:
        return "[" + ", ".join(format_float(x) for x in a) + "]"
    return "[" + ", ".join(_dump_array(r) for r in a) + "]"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_artifact(artifact: SteeringArtifact) -> str:
    header = _header(artifact)
    lines = ["{"]
    for key, value in header.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value, sort_keys=True)},")
    lines.append(f'  "checksum": {json.dumps(artifact.checksum)},')
    layers = ",\n    ".join(_dump_array(p) for p in artifact.per_layer)
    lines.append(f'  "per_layer": [\n    {layers}\n  ]')
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_artifact(artifact: SteeringArtifact, path: str | Path) -> None:
    atomic_write_text(path, dumps_artifact(artifact))


def loads_artifact(text: str) -> SteeringArtifact:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedArtifactError(f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedArtifactError("artifact must be a JSON object")
    version = raw.get("format_version")
    if version != ARTIFACT_FORMAT_VERSION:
        raise ArtifactVersionError(
            f"artifact format_version {version!r}, expected {ARTIFACT_FORMAT_VERSION}"
        )
    try:
        artifact = SteeringArtifact(
            method=raw["method"],
            per_layer=[np.asarray(p, dtype=np.float64) for p in raw["per_layer"]],
            source_lang=raw["source_lang"],
            target_lang=raw["target_lang"],
            d=int(raw["d"]),
            n_layers=int(raw["n_layers"]),
            pool_only=bool(raw["pool_only"]),
            extraction_policy=raw["extraction_policy"],
            provenance=dict(raw["provenance"]),
        )
        stored = raw["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedArtifactError(f"malformed artifact: {exc}") from exc
    if stored != artifact.checksum:
        raise ArtifactChecksumError("artifact checksum mismatch; file was modified or corrupted")
    return artifact


def load_artifact(path: str | Path) -> SteeringArtifact:
    return loads_artifact(Path(path).read_text(encoding="utf-8-sig"))
