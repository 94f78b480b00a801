"""Joint CTC/attention sequence recognizer over a named parameter registry.

Topology: a stack of pre-norm transformer encoder blocks shared by two
output paths, a linear CTC head and an autoregressive attention decoder with
cross-attention (teacher forcing). Convolutional subsampling is replaced by
stacking ``frame_stack`` consecutive feature frames, so the encoder runs at
U = ceil(T / frame_stack) positions.

Reserved symbols: blank is vocabulary index 0; sos and eos share index
vocab_size - 1. Real symbols occupy 1 .. vocab_size - 2.

Every parameter lives in a ``ParameterRegistry`` under a stable hierarchical
name. The registry also owns the frozen-name mask and the optional snapshot
of original values that expansion methods compare against.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BLANK_ID = 0

CHECKPOINT_MAGIC = b"AXCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or fails its checksum."""


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    num_encoder_blocks: int = 4
    num_decoder_blocks: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    num_heads: int = 2
    frame_stack: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("feature_dim", "num_encoder_blocks", "num_decoder_blocks",
                     "model_dim", "ff_dim", "num_heads", "frame_stack"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def sos_eos_id(self) -> int:
        return self.vocab_size - 1

    def real_symbols(self) -> range:
        return range(1, self.vocab_size - 1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EncoderOutput:
    hidden: Tensor  # U x model_dim
    length: int

    def __post_init__(self):
        if self.hidden.data.shape[0] != self.length:
            raise ShapeError("EncoderOutput length does not match hidden rows")


@dataclass(frozen=True)
class FreezePolicy:
    """Explicit, serializable list of parameter name prefixes to freeze.

    A pattern matches a parameter when it equals the full name or is a
    dot-boundary prefix of it ("encoder.block2" freezes that whole block).
    """

    patterns: tuple[str, ...] = ()

    @classmethod
    def default(cls, config: ModelConfig) -> "FreezePolicy":
        """Freeze interior encoder blocks and all decoder blocks.

        The first and last encoder blocks stay trainable (nearest the
        acoustic input and the output heads), as do the input projection,
        CTC head, decoder embedding, and decoder output projection.
        """
        pats = [
            f"encoder.block{i}"
            for i in range(2, config.num_encoder_blocks)
        ]
        pats += [f"decoder.block{i}" for i in range(1, config.num_decoder_blocks + 1)]
        return cls(tuple(pats))

    def to_json(self) -> list[str]:
        return list(self.patterns)

    @classmethod
    def from_json(cls, items: Sequence[str]) -> "FreezePolicy":
        return cls(tuple(str(s) for s in items))


class ParameterRegistry(Mapping):
    """Ordered name -> Tensor store with snapshot and freeze support."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._entries: dict[str, Tensor] = {}
        self.freeze_mask: set[str] = set()
        self.snapshot: dict[str, np.ndarray] | None = None

    # Mapping interface
    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = Tensor(data, requires_grad=True)

    def param_count(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def trainable_param_count(self) -> int:
        return sum(
            t.data.size for n, t in self._entries.items() if n not in self.freeze_mask
        )

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if n not in self.freeze_mask]

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def take_snapshot(self) -> None:
        """Record the current values; never mutated by training afterwards."""
        self.snapshot = {n: t.data.copy() for n, t in self._entries.items()}

    def set_freeze_mask(self, names: set[str]) -> None:
        unknown = names - set(self._entries)
        if unknown:
            raise KeyError(f"freeze mask references unknown parameters: {sorted(unknown)}")
        self.freeze_mask = set(names)
        for n, t in self._entries.items():
            t.requires_grad = n not in self.freeze_mask

    def overlay(self, values: Mapping[str, Tensor]) -> "ParamView":
        """View with some entries replaced (used for adapted parameter sets)."""
        return ParamView(self.config, self, values)

    def clone(self) -> "ParameterRegistry":
        other = ParameterRegistry(self.config)
        for n, t in self._entries.items():
            other._entries[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        other.freeze_mask = set(self.freeze_mask)
        if self.snapshot is not None:
            other.snapshot = {n: a.copy() for n, a in self.snapshot.items()}
        return other


class ParamView(Mapping):
    __slots__ = ("config", "_base", "_over")

    def __init__(self, config: ModelConfig, base: Mapping[str, Tensor], over: Mapping[str, Tensor]):
        self.config = config
        self._base = base
        self._over = over

    def __getitem__(self, name: str) -> Tensor:
        t = self._over.get(name)
        return t if t is not None else self._base[name]

    def __iter__(self):
        return iter(self._base)

    def __len__(self):
        return len(self._base)


def apply_freeze_policy(registry: ParameterRegistry, policy: FreezePolicy) -> set[str]:
    """Resolve the policy against the registry and install the freeze mask.

    Returns the resolved set of frozen parameter names. Raises KeyError for
    a pattern that matches nothing.
    """
    names = registry.names()
    frozen: set[str] = set()
    for pat in policy.patterns:
        hits = [n for n in names if n == pat or n.startswith(pat + ".")]
        if not hits:
            raise KeyError(f"freeze pattern {pat!r} matches no parameter")
        frozen.update(hits)
    registry.set_freeze_mask(frozen)
    return frozen


# ---------------------------------------------------------------------------
# construction


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def _add_linear(reg, rng, name, n_in, n_out):
    reg._add(f"{name}.weight", _xavier(rng, n_in, n_out, (n_in, n_out)))
    reg._add(f"{name}.bias", np.zeros(n_out))


def _add_norm(reg, rng, name, dim):
    reg._add(f"{name}.gain", np.ones(dim))
    reg._add(f"{name}.bias", np.zeros(dim))


def _add_attention(reg, rng, name, dim):
    for part in ("wq", "wk", "wv", "wo"):
        _add_linear(reg, rng, f"{name}.{part}", dim, dim)


def build_model(config: ModelConfig, rng_seed: int) -> ParameterRegistry:
    """Create all parameters in declaration order, deterministically per seed."""
    rng = np.random.default_rng(rng_seed)
    reg = ParameterRegistry(config)
    d = config.model_dim

    _add_linear(reg, rng, "encoder.input_proj", config.feature_dim * config.frame_stack, d)
    for i in range(1, config.num_encoder_blocks + 1):
        b = f"encoder.block{i}"
        _add_norm(reg, rng, f"{b}.ln1", d)
        _add_attention(reg, rng, f"{b}.attn", d)
        _add_norm(reg, rng, f"{b}.ln2", d)
        _add_linear(reg, rng, f"{b}.ff1", d, config.ff_dim)
        _add_linear(reg, rng, f"{b}.ff2", config.ff_dim, d)
    _add_norm(reg, rng, "encoder.final_norm", d)

    _add_linear(reg, rng, "ctc_head", d, config.vocab_size)

    reg._add("decoder.embedding.weight", _xavier(rng, config.vocab_size, d, (config.vocab_size, d)))
    for i in range(1, config.num_decoder_blocks + 1):
        b = f"decoder.block{i}"
        _add_norm(reg, rng, f"{b}.ln1", d)
        _add_attention(reg, rng, f"{b}.self_attn", d)
        _add_norm(reg, rng, f"{b}.ln2", d)
        _add_attention(reg, rng, f"{b}.cross_attn", d)
        _add_norm(reg, rng, f"{b}.ln3", d)
        _add_linear(reg, rng, f"{b}.ff1", d, config.ff_dim)
        _add_linear(reg, rng, f"{b}.ff2", config.ff_dim, d)
    _add_norm(reg, rng, "decoder.final_norm", d)
    _add_linear(reg, rng, "decoder.out_proj", d, config.vocab_size)
    return reg


def parameter_census(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per component, independent of build_model."""
    d, f, v = config.model_dim, config.ff_dim, config.vocab_size
    linear = lambda n_in, n_out: n_in * n_out + n_out
    norm = 2 * d
    attn = 4 * linear(d, d)
    enc_block = norm + attn + norm + linear(d, f) + linear(f, d)
    dec_block = norm + attn + norm + attn + norm + linear(d, f) + linear(f, d)
    return {
        "encoder.input_proj": linear(config.feature_dim * config.frame_stack, d),
        "encoder.blocks": config.num_encoder_blocks * enc_block,
        "encoder.final_norm": norm,
        "ctc_head": linear(d, v),
        "decoder.embedding": v * d,
        "decoder.blocks": config.num_decoder_blocks * dec_block,
        "decoder.final_norm": norm,
        "decoder.out_proj": linear(d, v),
    }


# ---------------------------------------------------------------------------
# forward passes

_POS_CACHE: dict[tuple[int, int], Tensor] = {}
_MASK_CACHE: dict[int, Tensor] = {}


def _positions(length: int, dim: int) -> Tensor:
    key = (length, dim)
    pe = _POS_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        i = np.arange(dim // 2)[None, :]
        angles = pos / np.power(10000.0, 2 * i / dim)
        enc = np.zeros((length, dim))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        pe = Tensor(enc)
        _POS_CACHE[key] = pe
    return pe


def _causal_mask(length: int) -> Tensor:
    m = _MASK_CACHE.get(length)
    if m is None:
        bias = np.triu(np.full((length, length), -1e9), k=1)
        m = Tensor(bias)
        _MASK_CACHE[length] = m
    return m


def stack_frames(features: np.ndarray, frame_stack: int) -> np.ndarray:
    """Concatenate groups of consecutive frames; the tail group repeats the
    final frame to fill up."""
    t, f = features.shape
    u = -(-t // frame_stack)
    if t < u * frame_stack:
        pad = np.repeat(features[-1:], u * frame_stack - t, axis=0)
        features = np.vstack([features, pad])
    return features.reshape(u, f * frame_stack)


def _linear(params, name, x):
    return ad.add(ad.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _norm(params, name, x):
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _mha(params, name, x_q, x_kv, num_heads, mask: Tensor | None):
    q = _linear(params, f"{name}.wq", x_q)
    k = _linear(params, f"{name}.wk", x_kv)
    v = _linear(params, f"{name}.wv", x_kv)
    d = q.data.shape[-1]
    dh = d // num_heads
    inv = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_axis(q, 1, lo, hi)
        kh = ad.slice_axis(k, 1, lo, hi)
        vh = ad.slice_axis(v, 1, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
        if mask is not None:
            scores = ad.add(scores, mask)
        heads.append(ad.matmul(ad.softmax(scores), vh))
    ctx = ad.concat(heads, axis=1) if num_heads > 1 else heads[0]
    return _linear(params, f"{name}.wo", ctx)


def _maybe_dropout(x, rate, train_mode, rng):
    if not train_mode or rate == 0.0:
        return x
    return ad.dropout(x, rate, rng)


def _config_of(params) -> ModelConfig:
    cfg = getattr(params, "config", None)
    if cfg is None:
        raise TypeError("params must carry a .config (ParameterRegistry or ParamView)")
    return cfg


def encode(params, features: Tensor, train_mode: bool = False,
           rng: np.random.Generator | None = None) -> EncoderOutput:
    """Run the shared encoder over a T x feature_dim input.

    Returns hidden states at U = ceil(T / frame_stack) positions. Eval mode
    (the default) is deterministic; train mode applies dropout from ``rng``.
    """
    cfg = _config_of(params)
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
        raise ShapeError(
            f"encode: features must be T x {cfg.feature_dim}, got {feats.shape}"
        )
    if feats.shape[0] < cfg.frame_stack:
        raise ShapeError(
            f"encode: need at least frame_stack={cfg.frame_stack} frames, got {feats.shape[0]}"
        )
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("encode: train_mode with dropout requires an rng")

    stacked = stack_frames(feats, cfg.frame_stack)
    u = stacked.shape[0]
    x = _linear(params, "encoder.input_proj", Tensor(stacked))
    x = ad.add(x, _positions(u, cfg.model_dim))
    for i in range(1, cfg.num_encoder_blocks + 1):
        b = f"encoder.block{i}"
        pre = _norm(params, f"{b}.ln1", x)
        h = _mha(params, f"{b}.attn", pre, pre, cfg.num_heads, None)
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, train_mode, rng))
        h = _linear(params, f"{b}.ff2", ad.relu(_linear(params, f"{b}.ff1", _norm(params, f"{b}.ln2", x))))
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, train_mode, rng))
    x = _norm(params, "encoder.final_norm", x)
    return EncoderOutput(hidden=x, length=u)


def ctc_logits(params, enc: EncoderOutput) -> Tensor:
    """Unnormalized per-frame symbol scores, U x vocab_size."""
    cfg = _config_of(params)
    if enc.hidden.data.shape[1] != cfg.model_dim:
        raise ShapeError(
            f"ctc_logits: encoder output width {enc.hidden.data.shape[1]} "
            f"!= model_dim {cfg.model_dim}"
        )
    return _linear(params, "ctc_head", enc.hidden)


def aed_logits(params, enc: EncoderOutput, labels: Sequence[int],
               train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced decoder scores: row t predicts token t of labels + eos.

    Position t sees sos + labels[:t] through causally masked self-attention
    and the full encoder output through cross-attention.
    """
    cfg = _config_of(params)
    for y in labels:
        if not 0 < y < cfg.sos_eos_id:
            raise ValueError(
                f"aed_logits: label {y} is reserved or out of vocabulary "
                f"(valid symbols are 1..{cfg.sos_eos_id - 1})"
            )
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("aed_logits: train_mode with dropout requires an rng")

    tokens = [cfg.sos_eos_id] + list(labels)
    n = len(tokens)
    x = ad.scale(ad.embedding(params["decoder.embedding.weight"], tokens), math.sqrt(cfg.model_dim))
    x = ad.add(x, _positions(n, cfg.model_dim))
    mask = _causal_mask(n)
    for i in range(1, cfg.num_decoder_blocks + 1):
        b = f"decoder.block{i}"
        pre = _norm(params, f"{b}.ln1", x)
        h = _mha(params, f"{b}.self_attn", pre, pre, cfg.num_heads, mask)
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, train_mode, rng))
        h = _mha(params, f"{b}.cross_attn", _norm(params, f"{b}.ln2", x), enc.hidden, cfg.num_heads, None)
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, train_mode, rng))
        h = _linear(params, f"{b}.ff2", ad.relu(_linear(params, f"{b}.ff1", _norm(params, f"{b}.ln3", x))))
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, train_mode, rng))
    x = _norm(params, "decoder.final_norm", x)
    return _linear(params, "decoder.out_proj", x)


def ctc_log_posteriors(params, features, train_mode: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Convenience: encode then log-softmax the CTC head output."""
    enc = encode(params, features, train_mode=train_mode, rng=rng)
    return ad.log_softmax(ctc_logits(params, enc))


# ---------------------------------------------------------------------------
# checkpoint container

_HEADER_STRUCT = struct.Struct("<4sIQ")  # magic, version, header byte length


def save_checkpoint(registry: ParameterRegistry, path) -> None:
    """Binary container: magic, format version, JSON header, float64
    little-endian parameter blobs in declaration order (then snapshot blobs
    when present), and a trailing sha256 of everything before it."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": registry.config.to_dict(),
        "params": [
            {"name": n, "shape": list(t.data.shape)} for n, t in registry.items()
        ],
        "freeze_mask": sorted(registry.freeze_mask),
        "has_snapshot": registry.snapshot is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_HEADER_STRUCT.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)), hbytes]
    for _, t in registry.items():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    if registry.snapshot is not None:
        for n, _ in registry.items():
            chunks.append(np.ascontiguousarray(registry.snapshot[n], dtype="<f8").tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_checkpoint(path) -> ParameterRegistry:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER_STRUCT.size + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    magic, version, hlen = _HEADER_STRUCT.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEADER_STRUCT.size
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    off += hlen

    config = ModelConfig(**header["model_config"])
    registry = ParameterRegistry(config)

    def take(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if off + nbytes > len(body):
            raise CheckpointError("checkpoint data truncated")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape)
        off += nbytes
        return np.ascontiguousarray(arr)

    for spec in header["params"]:
        registry._add(spec["name"], take(spec["shape"]))
    if header.get("has_snapshot"):
        registry.snapshot = {spec["name"]: take(spec["shape"]) for spec in header["params"]}
    registry.set_freeze_mask(set(header.get("freeze_mask", [])))
    if off != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return registry
