"""A small decoder-only transformer whose projections live on the crossbar.

The architecture follows the Qwen3/Llama family at toy scale: RMSNorm,
rotary positions, causal multi-head attention and a SwiGLU feed-forward
block. Every static weight matrix (the seven projections per layer, the
embedding table and the output head) is fetched through a weight provider,
which decides whether the model sees clean, faulted or replicated weights.
Softmax, the activation, normalization and residual adds are digital and
never see noise.

Weights are stored with the input dimension first, so a projection is
``x @ W`` with ``x`` of shape ``(seq, d_in)``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from .bf16 import matmul, quantize_bf16
from .faults import NoiseSpec, Redraw, SafSpec, program_weights
from .rng import RngKey

ATTENTION_PROJECTIONS = ("wq", "wk", "wv", "wo")
FFN_PROJECTIONS = ("w_gate", "w_up", "w_down")
PROJECTIONS = ATTENTION_PROJECTIONS + FFN_PROJECTIONS
NORMS = ("attn_norm", "ffn_norm")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    head_dim: int = 32
    d_ffn: int = 512
    vocab: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "d_ffn", "vocab"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"n_heads * head_dim must equal d_model "
                f"({self.n_heads} * {self.head_dim} != {self.d_model})"
            )
        if self.head_dim % 2:
            raise ValueError("rotary embeddings need an even head_dim")
        if not self.norm_eps > 0 or not self.rope_base > 0:
            raise ValueError("rope_base and norm_eps must be positive")

    def projection_shapes(self) -> dict:
        d, f = self.d_model, self.d_ffn
        return {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
        }


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class ModelWeights:
    embed: np.ndarray
    layers: list
    final_norm: np.ndarray
    lm_head: np.ndarray

    def to_tensors(self) -> dict:
        """Flatten to the ``layers.<i>.<name>`` naming used in weight files."""
        tensors = {"embed": self.embed}
        for i, lw in enumerate(self.layers):
            for name in PROJECTIONS + NORMS:
                tensors[f"layers.{i}.{name}"] = getattr(lw, name)
        tensors["final_norm"] = self.final_norm
        tensors["lm_head"] = self.lm_head
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict, cfg: ModelConfig) -> "ModelWeights":
        def get(name, shape):
            if name not in tensors:
                raise KeyError(f"weight tensor {name!r} missing")
            t = np.asarray(tensors[name], dtype=np.float32)
            if t.shape != tuple(shape):
                raise ValueError(f"tensor {name!r} has shape {t.shape}, expected {tuple(shape)}")
            return t

        d = cfg.d_model
        shapes = cfg.projection_shapes()
        layers = []
        for i in range(cfg.n_layers):
            parts = {n: get(f"layers.{i}.{n}", shapes[n]) for n in PROJECTIONS}
            parts.update({n: get(f"layers.{i}.{n}", (d,)) for n in NORMS})
            layers.append(LayerWeights(**parts))
        return cls(
            embed=get("embed", (cfg.vocab, d)),
            layers=layers,
            final_norm=get("final_norm", (d,)),
            lm_head=get("lm_head", (d, cfg.vocab)),
        )


def config_from_tensors(tensors: dict, n_heads: int, **overrides) -> ModelConfig:
    """Infer a config from tensor shapes; head count is not recoverable from them."""
    vocab, d_model = np.shape(tensors["embed"])
    n_layers = len({k.split(".")[1] for k in tensors if k.startswith("layers.")})
    d_ffn = np.shape(tensors["layers.0.w_up"])[1]
    return ModelConfig(
        n_layers=n_layers, d_model=d_model, n_heads=n_heads,
        head_dim=d_model // n_heads, d_ffn=d_ffn, vocab=vocab, **overrides,
    )


def init_toy_weights(cfg: ModelConfig = ModelConfig(), seed: int = 0, std: float = 0.02) -> ModelWeights:
    """Random bf16 weights drawn from ``N(0, std^2)``; norm scales are 1."""
    key = RngKey(seed, ("toy-init",))

    def draw(name, shape):
        return quantize_bf16(key.child(name).generator().normal(0.0, std, size=shape))

    shapes = cfg.projection_shapes()
    ones = np.ones(cfg.d_model, dtype=np.float32)
    layers = [
        LayerWeights(
            **{n: draw(f"layers.{i}.{n}", shapes[n]) for n in PROJECTIONS},
            attn_norm=ones.copy(),
            ffn_norm=ones.copy(),
        )
        for i in range(cfg.n_layers)
    ]
    return ModelWeights(
        embed=draw("embed", (cfg.vocab, cfg.d_model)),
        layers=layers,
        final_norm=ones.copy(),
        lm_head=draw("lm_head", (cfg.d_model, cfg.vocab)),
    )


# -- redundancy --------------------------------------------------------------


class Target(enum.Enum):
    NONE = "none"
    ATTENTION = "attention"
    FFN = "ffn"
    LAYER_RANGE = "layers"


@dataclass(frozen=True)
class RedundancySpec:
    """Which sub-modules are instantiated ``k`` times and averaged.

    ``LAYER_RANGE`` covers layers ``lo <= i < hi``. A factor of 1 is the same
    as no redundancy and normalizes to ``Target.NONE``.
    """

    target: Target = Target.NONE
    k: int = 1
    lo: int = 0
    hi: int = 0

    def __post_init__(self):
        target = Target(self.target)
        k = int(self.k)
        if k < 1:
            raise ValueError(f"redundancy factor must be >= 1, got {k}")
        if target is Target.LAYER_RANGE and not 0 <= self.lo < self.hi:
            raise ValueError(f"invalid layer range [{self.lo}, {self.hi})")
        if target is Target.NONE or k == 1:
            target, k = Target.NONE, 1
        if target is not Target.LAYER_RANGE:
            object.__setattr__(self, "lo", 0)
            object.__setattr__(self, "hi", 0)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "k", k)

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def attention(cls, k: int):
        return cls(Target.ATTENTION, k)

    @classmethod
    def ffn(cls, k: int):
        return cls(Target.FFN, k)

    @classmethod
    def layers(cls, lo: int, hi: int, k: int):
        return cls(Target.LAYER_RANGE, k, lo, hi)

    @property
    def active(self) -> bool:
        return self.target is not Target.NONE

    def validate(self, cfg: ModelConfig) -> "RedundancySpec":
        if self.target is Target.LAYER_RANGE and self.hi > cfg.n_layers:
            raise ValueError(
                f"layer range [{self.lo}, {self.hi}) exceeds n_layers={cfg.n_layers}"
            )
        return self

    def replicas(self, layer: int, part: str) -> int:
        """Replica count for ``part`` in {"attention", "ffn", "layer"} of ``layer``."""
        t = self.target
        if t is Target.ATTENTION and part == "attention":
            return self.k
        if t is Target.FFN and part == "ffn":
            return self.k
        if t is Target.LAYER_RANGE and part == "layer" and self.lo <= layer < self.hi:
            return self.k
        return 1

    def n_replicated_layers(self, n_layers: int) -> int:
        if self.target is Target.LAYER_RANGE:
            return min(self.hi, n_layers) - self.lo
        return n_layers if self.active else 0

    def label(self) -> str:
        if self.target is Target.NONE:
            return "none"
        if self.target is Target.LAYER_RANGE:
            return f"layers{self.lo}:{self.hi}*{self.k}"
        return f"{self.target.value}*{self.k}"

    @classmethod
    def parse(cls, text: str, cfg: ModelConfig | None = None) -> "RedundancySpec":
        """Parse ``none``, ``attention*k``, ``ffn*k``, ``layersLO:HI*k`` or ``shallow``."""
        s = text.strip().lower().replace(" ", "")
        if s in ("", "none"):
            return cls()
        if s.startswith("shallow"):
            if cfg is None:
                raise ValueError("'shallow' needs a model config to resolve")
            _, _, k = s.partition("*")
            return shallow_redundancy(cfg, int(k) if k else 4)
        body, star, k = s.partition("*")
        if not star:
            raise ValueError(f"redundancy {text!r} lacks a '*k' factor")
        if body in ("attention", "attn"):
            return cls.attention(int(k))
        if body == "ffn":
            return cls.ffn(int(k))
        if body.startswith("layers"):
            lo, colon, hi = body[len("layers"):].partition(":")
            if not colon:
                raise ValueError(f"layer range in {text!r} must read layersLO:HI")
            return cls.layers(int(lo), int(hi), int(k))
        raise ValueError(f"unknown redundancy target in {text!r}")


def shallow_redundancy(cfg: ModelConfig, k: int = 4) -> RedundancySpec:
    """Replicate the first quarter of the layer stack ``k`` times."""
    if cfg.n_layers < 4:
        raise ValueError(f"shallow redundancy needs at least 4 layers, got {cfg.n_layers}")
    return RedundancySpec.layers(0, cfg.n_layers // 4, k)


# -- weight providers --------------------------------------------------------


class WeightProvider:
    """Base provider: hands out clean weights, one replica everywhere."""

    def matrix(self, name: str, clean: np.ndarray, layer, replica: int = 0, forward_index: int = 0):
        return clean

    def replicas(self, layer: int, part: str) -> int:
        return 1

    def layer_weights(self, weights: ModelWeights, layer: int, replica: int = 0,
                      forward_index: int = 0, names=PROJECTIONS) -> LayerWeights:
        lw = weights.layers[layer]
        return dataclasses.replace(
            lw, **{n: self.matrix(n, getattr(lw, n), layer, replica, forward_index) for n in names}
        )


class CleanProvider(WeightProvider):
    pass


class FaultedProvider(WeightProvider):
    """Weights programmed through :func:`program_weights`.

    The key for a matrix is ``key / "layer" / i / name / "replica" / r``
    (embedding and head use ``key / name / "replica" / r``). Realizations are
    memoized, so a provider must not be shared between threads.
    """

    def __init__(self, noise: NoiseSpec, saf: SafSpec, key: RngKey, exempt_embeddings: bool = False):
        self.noise = noise
        self.saf = saf
        self.key = key
        self.exempt_embeddings = exempt_embeddings
        self._cache = {}
        self._cache_forward = 0

    def weight_key(self, name: str, layer, replica: int) -> RngKey:
        if layer is None:
            return self.key.child(name, "replica", int(replica))
        return self.key.child("layer", int(layer), name, "replica", int(replica))

    def matrix(self, name, clean, layer, replica=0, forward_index=0):
        if self.exempt_embeddings and name in ("embed", "lm_head"):
            return clean
        if self.noise.sigma == 0 and self.saf.p == 0:
            return clean
        fwd = int(forward_index) if self.noise.redraw is Redraw.PER_FORWARD else 0
        if fwd != self._cache_forward:
            self._cache.clear()
            self._cache_forward = fwd
        ck = (name, layer, int(replica))
        w = self._cache.get(ck)
        if w is None:
            w = program_weights(clean, self.noise, self.saf, self.weight_key(name, layer, replica), fwd).w_star
            self._cache[ck] = w
        return w


class RedundantProvider(WeightProvider):
    """Wraps a provider and replicates the sub-modules named by ``spec``.

    ``average="output"`` (default) runs each replica and averages the module
    outputs. ``average="weight"`` instead averages the replicas' weights and
    runs the module once; it is kept for comparison only.
    """

    def __init__(self, inner: WeightProvider, spec: RedundancySpec, average: str = "output"):
        if average not in ("output", "weight"):
            raise ValueError(f"average must be 'output' or 'weight', got {average!r}")
        self.inner = inner
        self.spec = spec
        self.average = average

    def _targeted(self, name, layer) -> int:
        if layer is None:
            return 1
        part = "attention" if name in ATTENTION_PROJECTIONS else "ffn"
        return max(self.spec.replicas(layer, part), self.spec.replicas(layer, "layer"))

    def matrix(self, name, clean, layer, replica=0, forward_index=0):
        if self.average == "weight":
            k = self._targeted(name, layer)
            if k > 1:
                acc = np.zeros(clean.shape, dtype=np.float64)
                for r in range(k):
                    acc += self.inner.matrix(name, clean, layer, r, forward_index)
                return (acc / k).astype(np.float32)
        return self.inner.matrix(name, clean, layer, replica, forward_index)

    def replicas(self, layer, part):
        if self.average == "weight":
            return 1
        return self.spec.replicas(layer, part)


def make_provider(noise: NoiseSpec | None = None, saf: SafSpec | None = None, key: RngKey | None = None,
                  redundancy: RedundancySpec | None = None, exempt_embeddings: bool = False,
                  average: str = "output") -> WeightProvider:
    if noise is None and saf is None:
        inner = CleanProvider()
    else:
        inner = FaultedProvider(noise or NoiseSpec(), saf or SafSpec(), key or RngKey(0), exempt_embeddings)
    if redundancy is not None and redundancy.active:
        return RedundantProvider(inner, redundancy, average)
    return inner


def materialize(weights: ModelWeights, provider: WeightProvider, forward_index: int = 0) -> ModelWeights:
    """The replica-0 weights a provider would serve, as a standalone model."""
    layers = [provider.layer_weights(weights, i, 0, forward_index) for i in range(len(weights.layers))]
    return ModelWeights(
        embed=provider.matrix("embed", weights.embed, None, 0, forward_index),
        layers=layers,
        final_norm=weights.final_norm.copy(),
        lm_head=provider.matrix("lm_head", weights.lm_head, None, 0, forward_index),
    )


# -- forward pass ------------------------------------------------------------


def linear(x, W) -> np.ndarray:
    return matmul(x, W).astype(np.float32)


def rms_norm(x, scale, eps: float) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * np.asarray(scale, dtype=np.float64)).astype(np.float32)


def rotary(x, base: float) -> np.ndarray:
    """Rotate-half rotary embedding on ``x`` of shape ``(seq, heads, head_dim)``."""
    seq, _, hd = x.shape
    half = hd // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / hd)
    angle = np.arange(seq, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angle)[:, None, :]
    sin = np.sin(angle)[:, None, :]
    x1 = x[..., :half].astype(np.float64)
    x2 = x[..., half:].astype(np.float64)
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1).astype(np.float32)


def softmax(z, axis=-1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def silu(x) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def _check_activations(x, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ValueError(f"activations must have shape (seq, {cfg.d_model}), got {x.shape}")
    return x


def attention_forward(x, lw: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    """Causal multi-head self-attention with rotary positions."""
    x = _check_activations(x, cfg)
    seq = x.shape[0]
    h, hd = cfg.n_heads, cfg.head_dim
    q = rotary(linear(x, lw.wq).reshape(seq, h, hd), cfg.rope_base)
    k = rotary(linear(x, lw.wk).reshape(seq, h, hd), cfg.rope_base)
    v = linear(x, lw.wv).reshape(seq, h, hd)

    scores = np.einsum("qhd,khd->hqk", q.astype(np.float64), k.astype(np.float64)) / np.sqrt(hd)
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores[:, future] = -np.inf
    probs = softmax(scores, axis=-1)
    ctx = np.einsum("hqk,khd->qhd", probs, v.astype(np.float64)).astype(np.float32)
    return linear(ctx.reshape(seq, h * hd), lw.wo)


def ffn_forward(x, lw: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    """SwiGLU feed-forward: ``(silu(x Wg) * (x Wu)) Wd``."""
    x = _check_activations(x, cfg)
    hidden = silu(linear(x, lw.w_gate)) * linear(x, lw.w_up)
    return linear(hidden, lw.w_down)


def replicate_and_average(module_eval, k: int) -> np.ndarray:
    """Mean of ``module_eval(r)`` over replicas ``r = 0 .. k-1``.

    ``module_eval`` is called with a replica index and must return the module
    output computed with that replica's weights. The sum is kept in float64.
    """
    k = int(k)
    if k < 1:
        raise ValueError(f"replica count must be >= 1, got {k}")
    if k == 1:
        return np.asarray(module_eval(0))
    acc = None
    for r in range(k):
        y = np.asarray(module_eval(r), dtype=np.float64)
        acc = y.copy() if acc is None else acc + y
    return (acc / k).astype(np.float32)


def _decoder_layer(x, weights, provider, cfg, layer, replica, forward_index):
    lw = weights.layers[layer]

    k_attn = provider.replicas(layer, "attention")
    h = rms_norm(x, lw.attn_norm, cfg.norm_eps)
    attn = replicate_and_average(
        lambda r: attention_forward(
            h,
            provider.layer_weights(weights, layer, r if k_attn > 1 else replica, forward_index,
                                   ATTENTION_PROJECTIONS),
            cfg,
        ),
        k_attn,
    )
    x = x + attn

    k_ffn = provider.replicas(layer, "ffn")
    h = rms_norm(x, lw.ffn_norm, cfg.norm_eps)
    ff = replicate_and_average(
        lambda r: ffn_forward(
            h,
            provider.layer_weights(weights, layer, r if k_ffn > 1 else replica, forward_index,
                                   FFN_PROJECTIONS),
            cfg,
        ),
        k_ffn,
    )
    return x + ff


def forward(tokens, weights: ModelWeights, provider: WeightProvider, cfg: ModelConfig,
            forward_index: int = 0) -> np.ndarray:
    """Logits of shape ``(len(tokens), vocab)`` as float32."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.dtype.kind not in "iu" or tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token ids must be integers in [0, {cfg.vocab})")

    embed = provider.matrix("embed", weights.embed, None, 0, forward_index)
    x = np.asarray(embed[tokens], dtype=np.float32)
    for layer in range(cfg.n_layers):
        k = provider.replicas(layer, "layer")
        x = replicate_and_average(
            lambda r: _decoder_layer(x, weights, provider, cfg, layer, r, forward_index), k
        )
    x = rms_norm(x, weights.final_norm, cfg.norm_eps)
    lm_head = provider.matrix("lm_head", weights.lm_head, None, 0, forward_index)
    return linear(x, lm_head)


def argmax_lowest(logits) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    return np.argmax(np.asarray(logits), axis=-1)


def generate_greedy(prompt, weights: ModelWeights, provider: WeightProvider, cfg: ModelConfig,
                    max_new: int, eos_token: int | None = None) -> list:
    """Greedy continuation of ``prompt``; returns prompt plus generated ids.

    Each step recomputes the full prefix. Step ``s`` is forward pass ``s``,
    which matters only for per-forward noise redraw.
    """
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    seq = [int(t) for t in prompt]
    for step in range(int(max_new)):
        logits = forward(np.array(seq, dtype=np.int64), weights, provider, cfg, forward_index=step)
        nxt = int(argmax_lowest(logits[-1]))
        seq.append(nxt)
        if eos_token is not None and nxt == eos_token:
            break
    return seq


def first_divergence(a, b) -> int:
    """Index of the first differing position, or ``min(len)`` if one is a prefix of the other."""
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return i
    return n
