"""Small decoder-only transformer backbone with adapter insertion points.

Pre-LN GPT layout: learned token + absolute position embeddings, then per
layer [LN -> causal self-attention -> adapter -> residual] and
[LN -> gelu feed-forward -> adapter -> residual], a final LN and an
untied vocabulary head. Linear layers are bias-free; weights are stored
in right-multiply (in, out) orientation.

Adapter hooks per layer:
  * lora/sora wrap the attention output projection and the feed-forward
    down-projection (the weight application itself);
  * qaa adds its residual to each block's output activation, before the
    block's residual addition;
  * prefix replaces the first `l` rows of each layer's input with that
    layer's trainable prefix, so every layer attends over l + T positions
    and the prefix rows are stripped before the head.

With all adapters at zero-residual initialization every method's logits
are bit-identical to the frozen backbone's.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adapters as adapters_mod
from . import tensor
from .adapters import AdapterSet, LoraAdapter, QaaAdapter, SoraAdapter
from .tensor import Tensor


class TokenOutOfRange(ValueError):
    """A token id is negative or >= vocab_size."""


class SequenceTooLong(ValueError):
    """Sequence (plus any prefix rows) exceeds max_seq_len."""


@dataclass(frozen=True)
class ArchSpec:
    """Backbone hyperparameters."""

    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    ffn_mult: int
    max_seq_len: int

    def __post_init__(self):
        fields = (
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.ffn_mult,
            self.max_seq_len,
        )
        if any(v < 1 for v in fields):
            raise ValueError("all architecture fields must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


DEFAULT_ARCH = ArchSpec(
    vocab_size=256, d_model=32, n_layers=2, n_heads=2, ffn_mult=4, max_seq_len=64
)


def backbone_param_count(arch: ArchSpec) -> int:
    """Scalar count of the backbone below, kept in sync by a test."""
    d, v = arch.d_model, arch.vocab_size
    d_ff = d * arch.ffn_mult
    per_layer = 2 * d + 3 * d * d + d * d + 2 * d + d * d_ff + d_ff * d
    return v * d + arch.max_seq_len * d + arch.n_layers * per_layer + 2 * d + d * v


class Backbone:
    """Parameter store for the frozen transformer."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        self.arch = arch
        d, v = arch.d_model, arch.vocab_size
        d_ff = d * arch.ffn_mult

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=False)

        p: dict[str, Tensor] = {}
        p["wte"] = w(v, d)
        p["wpe"] = w(arch.max_seq_len, d)
        for i in range(arch.n_layers):
            p[f"l{i}.ln1_g"] = Tensor(np.ones(d))
            p[f"l{i}.ln1_b"] = Tensor(np.zeros(d))
            p[f"l{i}.wq"] = w(d, d)
            p[f"l{i}.wk"] = w(d, d)
            p[f"l{i}.wv"] = w(d, d)
            p[f"l{i}.wo"] = w(d, d)
            p[f"l{i}.ln2_g"] = Tensor(np.ones(d))
            p[f"l{i}.ln2_b"] = Tensor(np.zeros(d))
            p[f"l{i}.w1"] = w(d, d_ff)
            p[f"l{i}.w2"] = w(d_ff, d)
        p["lnf_g"] = Tensor(np.ones(d))
        p["lnf_b"] = Tensor(np.zeros(d))
        p["head"] = w(d, v)
        self.params = p

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"backbone.{k}", t) for k, t in self.params.items()]

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def _causal_mask(size: int) -> np.ndarray:
    mask = np.zeros((size, size))
    mask[np.triu_indices(size, k=1)] = -np.inf
    return mask


def _adapted_linear(x: Tensor, w: Tensor, site) -> Tensor:
    """x @ w plus the site's low-rank update, if any. w is (in, out).

    Activation-space sites (qaa) leave the matrix alone; they attach to
    the block output afterwards.
    """
    base = tensor.matmul(x, w)
    if isinstance(site, LoraAdapter):
        return tensor.add(base, adapters_mod.lora_delta(site, x))
    if isinstance(site, SoraAdapter):
        return tensor.add(base, adapters_mod.sora_delta(site, x))
    return base


def forward(backbone: Backbone, adapters: AdapterSet, tokens) -> Tensor:
    """Logits for a token batch; shape (B, T, vocab) or (T, vocab)."""
    arch = backbone.arch
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise tensor.ShapeMismatch(f"tokens must be (T,) or (B, T), got {ids.shape}")
    bsz, seq = ids.shape
    if ids.min() < 0 or ids.max() >= arch.vocab_size:
        raise TokenOutOfRange(
            f"token ids must lie in [0, {arch.vocab_size}); got "
            f"[{ids.min()}, {ids.max()}]"
        )
    plen = adapters.prefix_len
    if seq + plen > arch.max_seq_len:
        raise SequenceTooLong(
            f"sequence {seq} + prefix {plen} exceeds max_seq_len {arch.max_seq_len}"
        )

    p = backbone.params
    pos = tensor.narrow(p["wpe"], 0, 0, seq)
    h = tensor.add(tensor.embedding_lookup(p["wte"], ids), pos)

    n_heads = arch.n_heads
    dh = arch.d_model // n_heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    for i in range(arch.n_layers):
        if adapters.prefixes:
            # keep only the token rows from the previous layer, then put
            # this layer's own prefix in front of them
            if h.shape[1] > seq:
                h = tensor.narrow(h, 1, h.shape[1] - seq, seq)
            h = adapters_mod.prefix_forward(adapters.prefixes[i], h)
        span = h.shape[1]

        x = tensor.layer_norm(h, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
        q = tensor.matmul(x, p[f"l{i}.wq"])
        k = tensor.matmul(x, p[f"l{i}.wk"])
        v = tensor.matmul(x, p[f"l{i}.wv"])
        q = tensor.transpose(tensor.reshape(q, (bsz, span, n_heads, dh)), (0, 2, 1, 3))
        k = tensor.transpose(tensor.reshape(k, (bsz, span, n_heads, dh)), (0, 2, 1, 3))
        v = tensor.transpose(tensor.reshape(v, (bsz, span, n_heads, dh)), (0, 2, 1, 3))
        att = tensor.scale(tensor.matmul(q, tensor.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        att = tensor.softmax(tensor.add_const(att, _causal_mask(span)), axis=-1)
        y = tensor.matmul(att, v)
        y = tensor.reshape(tensor.transpose(y, (0, 2, 1, 3)), (bsz, span, arch.d_model))
        a = _adapted_linear(y, p[f"l{i}.wo"], adapters.attn_sites[i])
        if isinstance(adapters.attn_sites[i], QaaAdapter):
            a = adapters_mod.qaa_forward(adapters.attn_sites[i], a)
        h = tensor.add(h, a)

        x = tensor.layer_norm(h, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
        f = tensor.gelu(tensor.matmul(x, p[f"l{i}.w1"]))
        f = _adapted_linear(f, p[f"l{i}.w2"], adapters.ffn_sites[i])
        if isinstance(adapters.ffn_sites[i], QaaAdapter):
            f = adapters_mod.qaa_forward(adapters.ffn_sites[i], f)
        h = tensor.add(h, f)

    if adapters.prefixes and h.shape[1] > seq:
        h = tensor.narrow(h, 1, h.shape[1] - seq, seq)
    h = tensor.layer_norm(h, p["lnf_g"], p["lnf_b"])
    logits = tensor.matmul(h, p["head"])
    return tensor.reshape(logits, (seq, arch.vocab_size)) if single else logits


def generate(
    backbone: Backbone,
    adapters: AdapterSet,
    prompt,
    max_new_tokens: int,
    greedy: bool = True,
) -> list[int]:
    """Greedy continuation of `prompt`; deterministic by construction."""
    if not greedy:
        raise NotImplementedError("only greedy decoding is supported")
    out = [int(t) for t in prompt]
    if not out:
        raise ValueError("prompt must be non-empty")
    if len(out) + max_new_tokens + adapters.prefix_len > backbone.arch.max_seq_len:
        raise SequenceTooLong(
            f"prompt {len(out)} + {max_new_tokens} new tokens exceeds "
            f"max_seq_len {backbone.arch.max_seq_len}"
        )
    with tensor.no_grad():
        for _ in range(max_new_tokens):
            logits = forward(backbone, adapters, np.asarray(out))
            out.append(int(np.argmax(logits.data[-1])))
    return out
