"""A small pre-norm multi-head decoder with a KV cache and a steering hook.

Per layer the decode path is::

    a   = LN(x)                  # attention input
    a~  = hook(layer, a)         # steering acts here, before Q/K/V
    q, k, v = W_Q a~, W_K a~, W_V a~   (+ optional query-only delta)
    cache <- k, v
    x   = x + W_O attn(q, cache)
    x   = x + W_2 relu(W_1 LN(x))

Steering the post-norm vector keeps the image-attention barrier exactly
linear in the steered variable; the raw residual only ever receives the
attention output computed from the steered input.

Image "tokens" arrive as embedding vectors and are spliced into the text
prompt before text index ``image_at``.
"""

from __future__ import annotations

import json
import time
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np

from . import barrier
from .numeric import LN_EPS, NumericError, Rng, layer_norm_rows, softmax_rows

if TYPE_CHECKING:
    from .steering import SteeringConfig
    from .trace import DecodeTrace


class SequenceOverflow(ValueError):
    """The cache would grow past ``max_seq``."""


class EmptyImageError(ValueError):
    """A prompt was given no image embeddings."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 35
    max_seq: int = 64
    seed: int = 0
    d_ff: int | None = None
    eos_id: int | None = None

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("need n_layers >= 1 and n_heads >= 1")
        if self.max_seq < 2:
            raise ValueError("max_seq must be at least 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.eos_id is not None and not 0 <= self.eos_id < self.vocab_size:
            raise ValueError("eos_id outside the vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model


@dataclass
class LayerWeights:
    w_q: np.ndarray  # (H, d_m, d)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (d, H*d_m)
    w_ff1: np.ndarray  # (d_ff, d)
    w_ff2: np.ndarray  # (d, d_ff)
    ln1: np.ndarray
    ln2: np.ndarray
    _qkv: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def qkv(self) -> np.ndarray:
        """Stacked ``[W_Q; W_K; W_V]`` as a ``(3*H*d_m, d)`` matrix."""
        if self._qkv is None:
            h, dm, d = self.w_q.shape
            self._qkv = np.concatenate(
                [self.w_q.reshape(h * dm, d), self.w_k.reshape(h * dm, d), self.w_v.reshape(h * dm, d)]
            )
        return self._qkv

    def invalidate(self) -> None:
        self._qkv = None


@dataclass
class Model:
    config: ModelConfig
    layers: list[LayerWeights]
    embed: np.ndarray  # (V, d)
    pos: np.ndarray  # (max_seq, d), additive
    ln_f: np.ndarray
    w_out: np.ndarray  # (V, d)

    def validate(self) -> None:
        c = self.config
        d, h, dm = c.d_model, c.n_heads, c.d_head
        if len(self.layers) != c.n_layers:
            raise ValueError("layer count does not match config")
        shapes = {
            "embed": (self.embed, (c.vocab_size, d)),
            "pos": (self.pos, (c.max_seq, d)),
            "ln_f": (self.ln_f, (d,)),
            "w_out": (self.w_out, (c.vocab_size, d)),
        }
        for i, lw in enumerate(self.layers):
            shapes.update(
                {
                    f"layers[{i}].w_q": (lw.w_q, (h, dm, d)),
                    f"layers[{i}].w_k": (lw.w_k, (h, dm, d)),
                    f"layers[{i}].w_v": (lw.w_v, (h, dm, d)),
                    f"layers[{i}].w_o": (lw.w_o, (d, h * dm)),
                    f"layers[{i}].w_ff1": (lw.w_ff1, (c.ffn_width, d)),
                    f"layers[{i}].w_ff2": (lw.w_ff2, (d, c.ffn_width)),
                    f"layers[{i}].ln1": (lw.ln1, (d,)),
                    f"layers[{i}].ln2": (lw.ln2, (d,)),
                }
            )
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name}: non-finite weights")


def init_model(config: ModelConfig) -> Model:
    """Deterministic random weights, entries N(0, 1/d); norm gains are ones."""
    rng = Rng(config.seed)
    d, h, dm, f, v = config.d_model, config.n_heads, config.d_head, config.ffn_width, config.vocab_size
    scale = 1.0 / math.sqrt(d)

    def draw(*shape):
        return rng.gaussian(int(np.prod(shape))).reshape(shape) * scale

    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                w_q=draw(h, dm, d),
                w_k=draw(h, dm, d),
                w_v=draw(h, dm, d),
                w_o=draw(d, h * dm),
                w_ff1=draw(f, d),
                w_ff2=draw(d, f) * math.sqrt(d / f),
                ln1=np.ones(d),
                ln2=np.ones(d),
            )
        )
    model = Model(
        config=config,
        layers=layers,
        embed=draw(v, d) * math.sqrt(d),
        pos=draw(config.max_seq, d),
        ln_f=np.ones(d),
        w_out=draw(v, d),
    )
    return model


class KVCache:
    """Append-only per-layer, per-head key/value store sharing one length."""

    def __init__(self, config: ModelConfig):
        shape = (config.n_layers, config.n_heads, config.max_seq, config.d_head)
        self.config = config
        self._keys = np.zeros(shape)
        self._values = np.zeros(shape)
        self.length = 0

    @property
    def max_seq(self) -> int:
        return self.config.max_seq

    def keys(self, layer: int) -> np.ndarray:
        """Read-only ``(H, length, d_m)`` view of cached keys."""
        view = self._keys[layer, :, : self.length]
        view.flags.writeable = False
        return view

    def values(self, layer: int) -> np.ndarray:
        view = self._values[layer, :, : self.length]
        view.flags.writeable = False
        return view

    def _reserve(self, n: int) -> int:
        if self.length + n > self.max_seq:
            raise SequenceOverflow(f"cache length {self.length} + {n} exceeds max_seq={self.max_seq}")
        return self.length


@dataclass
class PrefillContext:
    image_positions: tuple[int, ...]
    key_sums: dict[int, np.ndarray]  # layer -> (H, d_m)
    gradients: dict[int, barrier.BarrierGradient]

    @property
    def n_image(self) -> int:
        return len(self.image_positions)


class Hook(Protocol):
    def __call__(self, layer: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]: ...


def assemble_prompt(model: Model, text_tokens: Sequence[int], image_embeddings, image_at: int = 1):
    """Stack text embeddings with the image block spliced in before ``text_tokens[image_at]``."""
    text_tokens = list(text_tokens)
    images = np.asarray(image_embeddings, dtype=np.float64)
    if images.ndim != 2 or images.shape[0] == 0:
        raise EmptyImageError("prompt needs at least one image embedding")
    if images.shape[1] != model.config.d_model:
        raise ValueError(f"image embeddings have width {images.shape[1]}, model is {model.config.d_model}")
    if not 0 <= image_at <= len(text_tokens):
        raise ValueError("image_at outside the text prompt")
    for t in text_tokens:
        if not 0 <= t < model.config.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary")
    before = model.embed[text_tokens[:image_at]]
    after = model.embed[text_tokens[image_at:]]
    xs = np.concatenate([before, images, after])
    positions = tuple(range(image_at, image_at + images.shape[0]))
    return xs, positions


def prefill(
    model: Model,
    text_tokens: Sequence[int],
    image_embeddings,
    steered_layers: Sequence[int] = (),
    image_at: int = 1,
    cache: KVCache | None = None,
) -> tuple[KVCache, PrefillContext, np.ndarray]:
    """Causal forward over the whole prompt.

    Returns the filled cache, the prefill context (image positions, image-key
    sums and barrier gradients for each steered layer) and the logits at the
    last prompt position.
    """
    xs, image_positions = assemble_prompt(model, text_tokens, image_embeddings, image_at)
    cfg = model.config
    cache = cache if cache is not None else KVCache(cfg)
    start = cache._reserve(xs.shape[0])
    if start != 0:
        raise ValueError("prefill expects an empty cache")
    n = xs.shape[0]
    h, dm = cfg.n_heads, cfg.d_head
    steered = set(_check_layers(steered_layers, cfg.n_layers))
    ctx = PrefillContext(image_positions=image_positions, key_sums={}, gradients={})

    x = xs + model.pos[:n]
    mask = np.triu(np.full((n, n), -np.inf), k=1)
    scale = 1.0 / math.sqrt(dm)
    for li, lw in enumerate(model.layers):
        a = layer_norm_rows(x, lw.ln1)
        qkv = a @ lw.qkv.T  # (n, 3*H*dm)
        q, k, v = (qkv[:, i * h * dm : (i + 1) * h * dm].reshape(n, h, dm).transpose(1, 0, 2) for i in range(3))
        cache._keys[li, :, :n] = k
        cache._values[li, :, :n] = v
        scores = np.matmul(q, k.transpose(0, 2, 1)) * scale + mask
        probs = softmax_rows(scores)
        heads = np.matmul(probs, v)  # (H, n, dm)
        x = x + heads.transpose(1, 0, 2).reshape(n, h * dm) @ lw.w_o.T
        f = layer_norm_rows(x, lw.ln2)
        x = x + np.maximum(f @ lw.w_ff1.T, 0.0) @ lw.w_ff2.T
        if li in steered:
            cache.length = n  # expose the keys written so far
            sums = barrier.aggregate_image_keys(cache, image_positions, li)
            ctx.key_sums[li] = sums
            ctx.gradients[li] = barrier.barrier_gradient(lw, sums, len(image_positions), layer=li)
    cache.length = n
    logits = _output(model, x[-1])
    return cache, ctx, logits


def _check_layers(layers: Sequence[int], n_layers: int) -> list[int]:
    out = sorted(set(int(l) for l in layers))
    for l in out:
        if not 0 <= l < n_layers:
            raise ValueError(f"steered layer {l} outside [0, {n_layers})")
    return out


def _output(model: Model, x: np.ndarray) -> np.ndarray:
    c = x - x.mean()
    normed = model.ln_f * (c / np.sqrt(c @ c / c.size + LN_EPS))
    logits = model.w_out @ normed
    if not np.all(np.isfinite(logits)):
        raise NumericError("decode produced non-finite logits")
    return logits


def decode_step(model: Model, cache: KVCache, x_in: np.ndarray, hook: Hook | None = None) -> np.ndarray:
    """Run one position through every layer, appending its K/V to ``cache``.

    ``hook(layer, a)`` receives the post-norm attention input and returns the
    (possibly steered) input plus an optional ``(H, d_m)`` query delta.
    """
    cfg = model.config
    pos = cache._reserve(1)
    h, dm = cfg.n_heads, cfg.d_head
    hd = h * dm
    scale = 1.0 / math.sqrt(dm)
    x = x_in + model.pos[pos]
    keys, values = cache._keys, cache._values
    for li, lw in enumerate(model.layers):
        c = x - x.mean()
        a = lw.ln1 * (c / math.sqrt(c @ c / c.size + LN_EPS))
        dq = None
        if hook is not None:
            a, dq = hook(li, a)
        qkv = lw.qkv @ a
        q = qkv[:hd].reshape(h, dm)
        if dq is not None:
            q = q + dq
        keys[li, :, pos] = qkv[hd : 2 * hd].reshape(h, dm)
        values[li, :, pos] = qkv[2 * hd :].reshape(h, dm)
        kc = keys[li, :, : pos + 1]
        scores = np.matmul(kc, q[:, :, None])[:, :, 0] * scale  # (H, T)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        e /= e.sum(axis=1, keepdims=True)
        heads = np.matmul(e[:, None, :], values[li, :, : pos + 1])[:, 0, :]
        x = x + lw.w_o @ heads.reshape(hd)
        c = x - x.mean()
        f = lw.ln2 * (c / math.sqrt(c @ c / c.size + LN_EPS))
        x = x + lw.w_ff2 @ np.maximum(lw.w_ff1 @ f, 0.0)
    cache.length = pos + 1
    return _output(model, x)


# -- sampling -----------------------------------------------------------------


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass
class TopP:
    p: float = 0.95
    temperature: float = 1.0
    rng: Rng = field(default_factory=lambda: Rng(0))

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("top-p mass must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def nucleus_distribution(logits: np.ndarray, p: float, temperature: float = 1.0) -> np.ndarray:
    """Renormalised distribution over the smallest sorted prefix with mass >= p.

    Sorting is by descending probability with ties kept in index order.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p - 1e-12)) + 1
    keep = order[: min(k, probs.size)]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample(logits: np.ndarray, policy: Greedy | TopP = Greedy()) -> int:
    """Pick the next token. Greedy ties resolve to the smallest index."""
    if not np.all(np.isfinite(logits)):
        raise NumericError("sample: non-finite logits")
    if isinstance(policy, Greedy):
        return int(np.argmax(logits))
    dist = nucleus_distribution(logits, policy.p, policy.temperature)
    cum = np.cumsum(dist)
    idx = int(np.searchsorted(cum, policy.rng.uniform(1)[0] * cum[-1], side="right"))
    return min(idx, int(np.flatnonzero(dist)[-1]))


# -- serialisation --------------------------------------------------------------


def model_to_dict(model: Model) -> dict:
    return {
        "config": asdict(model.config),
        "weights": {
            "layers": [
                {
                    name: getattr(lw, name).tolist()
                    for name in ("w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2", "ln1", "ln2")
                }
                for lw in model.layers
            ],
            "ln_f": model.ln_f.tolist(),
            "w_out": model.w_out.tolist(),
        },
        "embeddings": {"tokens": model.embed.tolist(), "positions": model.pos.tolist()},
    }


def model_from_dict(doc: dict) -> Model:
    config = ModelConfig(**doc["config"])
    w = doc["weights"]
    layers = [LayerWeights(**{k: np.asarray(v, dtype=np.float64) for k, v in lw.items()}) for lw in w["layers"]]
    model = Model(
        config=config,
        layers=layers,
        embed=np.asarray(doc["embeddings"]["tokens"], dtype=np.float64),
        pos=np.asarray(doc["embeddings"]["positions"], dtype=np.float64),
        ln_f=np.asarray(w["ln_f"], dtype=np.float64),
        w_out=np.asarray(w["w_out"], dtype=np.float64),
    )
    model.validate()
    return model


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))


# -- generation -----------------------------------------------------------------


@dataclass
class Generation:
    tokens: list[int]
    trace: "DecodeTrace"
    cache: KVCache | None
    context: PrefillContext | None


def generate(
    model: Model,
    text_tokens: Sequence[int],
    image_embeddings,
    steering: "SteeringConfig | None" = None,
    max_new: int = 140,
    policy: Greedy | TopP = Greedy(),
    image_at: int = 1,
    record_states: bool = False,
) -> Generation:
    """Autoregressive decode until EOS or ``max_new`` tokens.

    All prompt positions but the last are prefilled; the last text token is
    then run through :func:`decode_step` so that every emitted token,
    including the first, comes from a hooked step. ``steering=None`` runs the
    hook-free engine.
    """
    from .steering import SteeringHook
    from .trace import DecodeTrace, TokenRecord

    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    text_tokens = list(text_tokens)
    if not text_tokens or image_at >= len(text_tokens):
        raise ValueError("the prompt must end with at least one text token after the image")
    trace = DecodeTrace()
    if max_new == 0:
        return Generation([], trace, None, None)

    layers = steering.steered_layers if steering is not None else ()
    cache, ctx, _ = prefill(model, text_tokens[:-1], image_embeddings, layers, image_at)
    hook = SteeringHook.for_context(steering, ctx, record_states) if layers else None  # empty set: no hook
    eos = model.config.eos_id
    x_in = model.embed[text_tokens[-1]]
    tokens: list[int] = []
    clock = time.perf_counter
    for step in range(max_new):
        start = len(hook.entries) if hook is not None else 0
        if hook is not None:
            hook.step = step
        t0 = clock()
        logits = decode_step(model, cache, x_in, hook)
        tok = sample(logits, policy)
        elapsed = clock() - t0
        bar = None
        if hook is not None and len(hook.entries) > start:
            new = hook.entries[start:]
            bar = sum(e.h for e in new) / len(new)
        trace.tokens.append(TokenRecord(step=step, token=tok, barrier=bar, seconds=elapsed))
        tokens.append(tok)
        if tok == eos:
            break
        x_in = model.embed[tok]
    if hook is not None:
        trace.entries = hook.entries
    return Generation(tokens, trace, cache, ctx)
