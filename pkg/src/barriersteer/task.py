"""Synthetic object-captioning task with exact hallucination labels.

The model is hand-wired so that the quantities the steering acts on have
the same roles they have in a real vision-language decoder:

* Each image token carries an object identity, a shared image-tag direction
  scaled by a per-image brightness, and a slot marker.
* Reader heads in every layer score image keys through the tag (uniform over
  the image) and the slot marker (one image token per caption step), and
  score previously generated tokens through a constant text affinity. Their
  values copy the attended object identities to the object readout.
* A memory head attends to generated positions and carries their image
  intent forward, so K/V written under steering affect later steps.
* The last FFN adds a constant bias toward a fixed set of popular objects:
  the language prior. When image attention is weak this prior wins and the
  model names an object that is not in the picture.
* Decode positions carry an image-intent vector (query-side tag and slot
  pointer) that rotates toward a drift direction orthogonal to the image tag
  as the caption grows, so image attention decays with step.

A caption is ``caption_len`` object tokens followed by EOS. Token ``o`` is
hallucinated iff ``o`` is not in the prompt's object set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import LayerWeights, Model, ModelConfig
from .numeric import Rng


@dataclass(frozen=True)
class TaskConfig:
    n_objects: int = 32
    n_present: int = 8
    n_popular: int = 6
    prior_bias: float = 1.0
    drift_rate: float = 0.075
    caption_len: int = 12
    seed: int = 0
    # construction constants
    tag_score: float = 2.0
    slot_score: float = 3.0
    text_score: float = -2.0
    sink_score: float = 2.0
    brightness: tuple[float, float] = (0.4, 1.4)
    reader_gain: float = 1.0
    side_gain: float = 0.3
    grounding_layers: tuple[int, ...] = (2, 3, 4)
    memory_gain: float = 0.3
    weight_noise: float = 0.02
    embed_noise: float = 0.1
    image_noise: float = 0.2

    def __post_init__(self):
        if not 1 <= self.n_present <= self.n_objects:
            raise ValueError("need 1 <= n_present <= n_objects")
        if not 0 <= self.n_popular <= self.n_objects:
            raise ValueError("need 0 <= n_popular <= n_objects")
        if self.caption_len < 1:
            raise ValueError("caption_len must be positive")
        lo, hi = self.brightness
        if not 0 < lo <= hi:
            raise ValueError("brightness range must be positive and ordered")
        if self.drift_rate < 0:
            raise ValueError("drift_rate must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brightness"] = list(self.brightness)
        d["grounding_layers"] = list(self.grounding_layers)
        return d


@dataclass
class Prompt:
    index: int
    objects: tuple[int, ...]  # in slot order
    brightness: float
    image: np.ndarray  # (n_present, d)
    text: tuple[int, ...]
    image_at: int = 1


@dataclass
class SyntheticTask:
    config: TaskConfig
    model_config: ModelConfig
    popular: tuple[int, ...]
    basis: dict[str, np.ndarray] = field(repr=False)
    bos: int = 0
    start: int = 0
    eos: int = 0

    @property
    def object_ids(self) -> range:
        return range(self.config.n_objects)

    def is_object(self, token: int) -> bool:
        return 0 <= token < self.config.n_objects

    @property
    def prompt_len(self) -> int:
        return self.config.n_present + 2

    def prompt(self, index: int, seed: int | None = None) -> Prompt:
        """Prompt ``index`` of the stream keyed by ``seed`` (defaults to the task seed)."""
        c = self.config
        rng = Rng(self.config.seed if seed is None else seed).spawn(0x50524F4D, index)
        objects = tuple(int(o) for o in rng.permutation(c.n_objects)[: c.n_present])
        lo, hi = c.brightness
        brightness = lo + (hi - lo) * float(rng.uniform(1)[0])
        b = self.basis
        d = self.model_config.d_model
        image = (
            brightness * b["tag"][None, :]
            + b["objects"][list(objects)]
            + b["key_slots"][: c.n_present]
            + b["bias"][None, :]
            + c.image_noise / math.sqrt(d) * rng.gaussian(c.n_present * d).reshape(c.n_present, d)
        )
        return Prompt(index, objects, brightness, image, (self.bos, self.start))


def required_dims(c: TaskConfig) -> int:
    return c.n_objects + 2 * c.n_present + 7


def _orthonormal(rng: Rng, d: int, k: int, zero_mean: bool) -> np.ndarray:
    g = rng.gaussian(d * k).reshape(d, k)
    if zero_mean:
        g -= g.mean(axis=0, keepdims=True)
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))  # deterministic sign convention


def build_synthetic_task(config: TaskConfig = TaskConfig(), model_config: ModelConfig | None = None):
    """Construct the task and its task-aware weights. Returns ``(task, model)``."""
    c = config
    if model_config is None:
        model_config = ModelConfig(
            n_layers=6,
            n_heads=4,
            d_model=64,
            vocab_size=c.n_objects + 3,
            max_seq=c.n_present + 2 + c.caption_len + 8,
            seed=c.seed,
            eos_id=c.n_objects + 2,
        )
    mc = model_config
    d, H, dm, L = mc.d_model, mc.n_heads, mc.d_head, mc.n_layers
    bos, start, eos = c.n_objects, c.n_objects + 1, c.n_objects + 2
    if mc.vocab_size != c.n_objects + 3 or mc.eos_id != eos:
        raise ValueError("model vocabulary must be n_objects + [BOS, START, EOS] with EOS last")
    if required_dims(c) > d - 1:
        raise ValueError(f"d_model={d} too small: the construction needs {required_dims(c)} + 1 dimensions")
    if H < 2:
        raise ValueError("the construction needs at least one reader head and one memory head")
    n_readers = H - 1
    if n_readers * dm < c.n_objects:
        raise ValueError("reader value space cannot hold every object identity")
    if dm < c.n_present + 2:
        raise ValueError("head width too small for the slot pointers")
    for l in c.grounding_layers:
        if not 0 <= l < L:
            raise ValueError(f"grounding layer {l} outside the model")
    prompt_len = c.n_present + 2
    if prompt_len + c.caption_len + 1 > mc.max_seq:
        raise ValueError("max_seq too small for prompt plus caption")

    rng = Rng(c.seed).spawn(0x5441534B)
    basis_mat = _orthonormal(rng, d, required_dims(c), zero_mean=True)
    cols = iter(range(basis_mat.shape[1]))

    def take(k):
        return basis_mat[:, [next(cols) for _ in range(k)]].T

    objects = take(c.n_objects)
    key_slots = take(c.n_present)
    query_slots = take(c.n_present)
    tag, intent, drift, gen, bias, eos_dir, sink = take(7)
    basis = dict(
        objects=objects, key_slots=key_slots, query_slots=query_slots,
        tag=tag, intent=intent, drift=drift, gen=gen, bias=bias, eos=eos_dir, sink=sink,
    )
    popular = tuple(sorted(int(o) for o in rng.permutation(c.n_objects)[: c.n_popular]))

    # post-norm magnitudes are about sqrt(d)/2 for unit components in these embeddings
    unit = math.sqrt(d) / 2.0
    root_dm = math.sqrt(dm)

    def coef(score):
        # weight so that <W_Q a, W_K b> / sqrt(d_m) == score for unit-strength inputs
        return math.sqrt(score * root_dm) / unit

    value_basis = _orthonormal(rng, n_readers * dm, c.n_objects, zero_mean=False)
    noise = c.weight_noise / math.sqrt(d)
    layers = []
    for l in range(L):
        gain = c.reader_gain if l in c.grounding_layers else c.side_gain
        w_q = np.zeros((H, dm, d))
        w_k = np.zeros((H, dm, d))
        w_v = np.zeros((H, dm, d))
        w_o = np.zeros((d, H * dm))
        for m in range(n_readers):
            hb = _orthonormal(rng, dm, c.n_present + 3, zero_mean=False).T  # rows: tag, text, sink, slots...
            kappa, text_dir, sink_dir, slots = hb[0], hb[1], hb[2], hb[3:]
            a_tag, a_slot = coef(c.tag_score), coef(c.slot_score)
            a_text, a_sink = coef(abs(c.text_score)), coef(abs(c.sink_score))
            w_q[m] += a_tag * np.outer(kappa, intent)
            w_k[m] += a_tag * np.outer(kappa, tag)
            # every query carries ``bias``; generated positions and the BOS sink answer it
            w_q[m] += a_text * np.outer(text_dir, bias) + a_sink * np.outer(sink_dir, bias)
            w_k[m] += math.copysign(a_text, c.text_score) * np.outer(text_dir, gen)
            w_k[m] += math.copysign(a_sink, c.sink_score) * np.outer(sink_dir, sink)
            w_q[m] += a_slot * slots.T @ query_slots
            w_k[m] += a_slot * slots.T @ key_slots
            vm = value_basis[m * dm : (m + 1) * dm]  # (dm, n_objects)
            w_v[m] = vm @ objects
            w_o[:, m * dm : (m + 1) * dm] = gain / unit * objects.T @ vm.T
        mem = H - 1
        hb = _orthonormal(rng, dm, 2, zero_mean=False).T
        zeta, rho = hb
        w_q[mem] = coef(6.0) * np.outer(zeta, gen)
        w_k[mem] = coef(6.0) * np.outer(zeta, gen)
        w_v[mem] = np.outer(rho, intent)
        w_o[:, mem * dm : (mem + 1) * dm] = c.memory_gain / unit * np.outer(intent, rho)

        d_ff = mc.ffn_width
        w_ff1 = np.zeros((d_ff, d))
        w_ff2 = np.zeros((d, d_ff))
        if l == L - 1:
            w_ff1[0] = bias
            w_ff2[:, 0] = c.prior_bias / unit * objects[list(popular)].sum(axis=0) if popular else 0.0

        def jitter(shape):
            return noise * rng.gaussian(int(np.prod(shape))).reshape(shape)

        layers.append(
            LayerWeights(
                w_q=w_q + jitter(w_q.shape),
                w_k=w_k + jitter(w_k.shape),
                w_v=w_v + jitter(w_v.shape),
                w_o=w_o + jitter(w_o.shape),
                w_ff1=w_ff1 + jitter(w_ff1.shape),
                w_ff2=w_ff2 + jitter(w_ff2.shape),
                ln1=np.ones(d),
                ln2=np.ones(d),
            )
        )

    V = mc.vocab_size
    embed = c.embed_noise / math.sqrt(d) * rng.gaussian(V * d).reshape(V, d)
    embed[: c.n_objects] += gen + bias
    embed[bos] += bias + sink
    embed[start] += gen + bias
    embed[eos] += bias

    pos = np.zeros((mc.max_seq, d))
    for t in range(mc.max_seq - (prompt_len - 1)):
        # intent weight falls linearly; the drift component keeps the norm fixed
        cos_phi = max(1.0 - c.drift_rate * t, 0.0)
        sin_phi = math.sqrt(1.0 - cos_phi * cos_phi)
        slot = query_slots[t % c.n_present]
        v = cos_phi * (intent + slot) + sin_phi * math.sqrt(2.0) * drift
        if t >= c.caption_len:
            v = v + 3.0 * eos_dir
        pos[prompt_len - 1 + t] = v

    w_out = np.zeros((V, d))
    w_out[: c.n_objects] = objects
    w_out[bos] = -bias
    w_out[start] = -bias
    w_out[eos] = 3.0 * eos_dir - 0.5 * bias
    model = Model(config=mc, layers=layers, embed=embed, pos=pos, ln_f=np.ones(d), w_out=w_out)
    model.validate()
    task = SyntheticTask(config=c, model_config=mc, popular=popular, basis=basis, bos=bos, start=start, eos=eos)
    return task, model
