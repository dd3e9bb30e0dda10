"""Seeded miniature transformers with residual-stream hooks.

Layer recipe (pre-norm, learned absolute positions, no dropout)::

    x_0 = tok_emb[tokens] + pos_emb[:seq]
    for each block l:
        x = x + Attn_l(LN(x))          # multi-head, causal iff kind == "decoder"
        x = x + MLP_l(LN(x))           # GELU (tanh approximation)
        x = hook_k(...hook_1(x))       # hooks registered at l, in order
        hidden_states[l] = x
    logits = LN_f(x) @ unembed

``pooled`` (encoder kind only) is the mean of the final hidden states over
non-padding positions.  Weights are drawn from numpy's Philox4x64
counter-based generator keyed by ``config.seed``; every matrix is Gaussian
with standard deviation ``1/sqrt(fan_in)``, layer-norm gains are one and
biases zero.  Models are never trained.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

# byte-level vocabulary: 0..255 are raw bytes, then four specials
BOS, EOS, PAD, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260
SPECIAL_TOKENS = frozenset({BOS, EOS, PAD, SEP})

# layer index reserved for transforms applied to an encoder's pooled vector
POOLED_LAYER = -1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 512
    seed: int = 0
    kind: str = "decoder"

    def validate(self) -> None:
        if self.kind not in ("decoder", "encoder"):
            raise ValueError(f"kind must be 'decoder' or 'encoder', got {self.kind!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ValueError("d_model, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )
        if self.max_seq < 2:
            raise ValueError("max_seq must be >= 2")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"byte-level vocabulary has {VOCAB_SIZE} entries")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LayerHook:
    """Replace the residual stream after block ``layer_index``.

    ``transform`` receives a ``(seq, d_model)`` array (one residual vector per
    row) and must return an array of the same shape without mutating its
    input.  It should act row-wise.
    """

    layer_index: int
    transform: Callable[[np.ndarray], np.ndarray]


@dataclass
class ForwardTrace:
    logits: np.ndarray
    hidden_states: list[np.ndarray]
    pooled: np.ndarray | None = None


def tokenize(text: str, bos: bool = True, eos: bool = True) -> list[int]:
    toks = list(text.encode("utf-8"))
    if bos:
        toks.insert(0, BOS)
    if eos:
        toks.append(EOS)
    return toks


def detokenize(tokens: Sequence[int]) -> str:
    return bytes(t for t in tokens if t not in SPECIAL_TOKENS).decode("utf-8")


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _init_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    d, f = cfg.d_model, cfg.d_ff

    def gauss(fan_in: int, *shape: int) -> np.ndarray:
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    w: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((cfg.vocab_size, d)),
        "pos_emb": rng.standard_normal((cfg.max_seq, d)) * 0.1,
    }
    for l in range(cfg.n_layers):
        p = f"block{l}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        w[p + "attn.qkv"] = gauss(d, d, 3 * d)
        w[p + "attn.out"] = gauss(d, d, d)
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        w[p + "mlp.in"] = gauss(d, d, f)
        w[p + "mlp.in_b"] = np.zeros(f)
        w[p + "mlp.out"] = gauss(f, f, d)
        w[p + "mlp.out_b"] = np.zeros(d)
    w["ln_f.g"] = np.ones(d)
    w["ln_f.b"] = np.zeros(d)
    w["unembed"] = gauss(d, d, cfg.vocab_size)
    return w


class Model:
    """A frozen toy transformer.  Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
        for v in self.weights.values():
            v.setflags(write=False)
        self._checksum: str | None = None

    @property
    def checksum(self) -> str:
        if self._checksum is None:
            h = hashlib.sha256()
            h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
            for name in sorted(self.weights):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.weights[name]).astype("<f8").tobytes())
            self._checksum = h.hexdigest()
        return self._checksum

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.ndim != 1 or toks.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if toks.size > self.config.max_seq:
            raise ValueError(
                f"sequence length {toks.size} exceeds max_seq {self.config.max_seq}"
            )
        if toks.min() < 0 or toks.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        return toks

    def _attention(self, x: np.ndarray, l: int) -> np.ndarray:
        cfg = self.config
        w = self.weights
        seq = x.shape[0]
        qkv = x @ w[f"block{l}.attn.qkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        hd = cfg.head_dim
        q = q.reshape(seq, cfg.n_heads, hd).transpose(1, 0, 2)
        k = k.reshape(seq, cfg.n_heads, hd).transpose(1, 0, 2)
        v = v.reshape(seq, cfg.n_heads, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
        if cfg.kind == "decoder":
            mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
            scores = np.where(mask, -np.inf, scores)
        att = softmax(scores) @ v
        return att.transpose(1, 0, 2).reshape(seq, cfg.d_model) @ w[f"block{l}.attn.out"]

    def forward(self, tokens: Sequence[int], hooks: Sequence[LayerHook] = ()) -> ForwardTrace:
        cfg = self.config
        w = self.weights
        toks = self._check_tokens(tokens)
        by_layer: dict[int, list[LayerHook]] = {}
        for hook in hooks:
            if not 0 <= hook.layer_index < cfg.n_layers:
                raise ValueError(
                    f"hook layer {hook.layer_index} outside [0, {cfg.n_layers - 1}]"
                )
            by_layer.setdefault(hook.layer_index, []).append(hook)

        x = w["tok_emb"][toks] + w["pos_emb"][: toks.size]
        hidden: list[np.ndarray] = []
        for l in range(cfg.n_layers):
            p = f"block{l}."
            x = x + self._attention(_layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"]), l)
            h = _layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            h = _gelu(h @ w[p + "mlp.in"] + w[p + "mlp.in_b"])
            x = x + (h @ w[p + "mlp.out"] + w[p + "mlp.out_b"])
            for hook in by_layer.get(l, ()):
                out = np.asarray(hook.transform(x), dtype=np.float64)
                if out.shape != x.shape:
                    raise ValueError(
                        f"hook at layer {l} changed shape {x.shape} -> {out.shape}"
                    )
                x = out
            hidden.append(x)
        logits = _layer_norm(x, w["ln_f.g"], w["ln_f.b"]) @ w["unembed"]
        pooled = None
        if cfg.kind == "encoder":
            keep = toks != PAD
            pooled = x[keep].mean(axis=0) if keep.any() else x.mean(axis=0)
        return ForwardTrace(logits=logits, hidden_states=hidden, pooled=pooled)

    def token_logprobs(
        self, prompt_tokens: Sequence[int], continuation_tokens: Sequence[int],
        hooks: Sequence[LayerHook] = (),
    ) -> np.ndarray:
        """Log-probability of each continuation token given everything before it."""
        prompt = list(prompt_tokens)
        cont = list(continuation_tokens)
        if not cont:
            raise ValueError("empty continuation")
        if not prompt:
            raise ValueError("empty prompt")
        trace = self.forward(prompt + cont, hooks)
        start = len(prompt) - 1
        logp = log_softmax(trace.logits[start : start + len(cont)])
        return logp[np.arange(len(cont)), cont]

    def next_token_distribution(
        self, prompt_tokens: Sequence[int], hooks: Sequence[LayerHook] = ()
    ) -> np.ndarray:
        trace = self.forward(prompt_tokens, hooks)
        return softmax(trace.logits[-1])

    def save(self, path: str | Path) -> None:
        meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **self.weights)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint version {meta.get('format_version')}"
                )
            weights = {k: data[k] for k in data.files if k != "__meta__"}
        return cls(ModelConfig(**meta["config"]), weights)


def build_model(config: ModelConfig) -> Model:
    config.validate()
    return Model(config, _init_weights(config))


def forward(model: Model, tokens: Sequence[int], hooks: Sequence[LayerHook] = ()) -> ForwardTrace:
    return model.forward(tokens, hooks)


def token_logprobs(model: Model, prompt_tokens, continuation_tokens, hooks=()) -> np.ndarray:
    return model.token_logprobs(prompt_tokens, continuation_tokens, hooks)


def next_token_distribution(model: Model, prompt_tokens, hooks=()) -> np.ndarray:
    return model.next_token_distribution(prompt_tokens, hooks)
