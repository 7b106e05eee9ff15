"""Minimal vision-transformer backbone on the autodiff core.

Pre-norm blocks, multi-head self-attention with an optional temperature on
the logits, a CLS token, per-patch positional embeddings, and a single
linear classification head reading the CLS token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .tensor import Tensor

HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass(frozen=True)
class ViTConfig:
    """Backbone geometry. Square images, square non-overlapping patches."""

    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        for name in ("image_size", "channels", "patch_size", "embed_dim",
                     "num_heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class TokenSequence:
    """Ordered token matrix [CLS | prompts | patches] with its segment map.

    Blocks never reorder tokens, so the offsets survive every forward.
    """

    tokens: Tensor
    n_prompts: int

    def __post_init__(self):
        if self.tokens.data.ndim != 3:
            raise DimensionError(f"TokenSequence expects [B x T x D], got {self.tokens.shape}")
        if self.seq_len < 1 + self.n_prompts:
            raise DimensionError(
                f"sequence length {self.seq_len} too short for {self.n_prompts} prompts")

    @property
    def batch(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.data.shape[1]

    @property
    def n_patches(self) -> int:
        return self.seq_len - 1 - self.n_prompts

    def cls_segment(self) -> Tensor:
        return T.slice_tokens(self.tokens, 0, 1)

    def prompt_segment(self) -> Tensor:
        if self.n_prompts == 0:
            raise DimensionError("sequence has no prompt segment")
        return T.slice_tokens(self.tokens, 1, 1 + self.n_prompts)

    def patch_segment(self) -> Tensor:
        return T.slice_tokens(self.tokens, 1 + self.n_prompts, self.seq_len)


@dataclass
class AttentionState:
    """Per-block attention internals captured for analysis exports."""

    block: int
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    scores: np.ndarray  # [B x h x T x T], rows sum to 1


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Shape table for every backbone parameter, in deterministic order."""
    d, r = config.embed_dim, config.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_size ** 2 * config.channels, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_patches, d),
        "cls_token": (1, d),
    }
    for l in range(config.num_blocks):
        pre = f"blocks.{l}"
        shapes[f"{pre}.ln1.gamma"] = (d,)
        shapes[f"{pre}.ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{pre}.attn.w{proj}"] = (d, d)
            shapes[f"{pre}.attn.b{proj}"] = (d,)
        shapes[f"{pre}.ln2.gamma"] = (d,)
        shapes[f"{pre}.ln2.beta"] = (d,)
        shapes[f"{pre}.mlp.w1"] = (d, r * d)
        shapes[f"{pre}.mlp.b1"] = (r * d,)
        shapes[f"{pre}.mlp.w2"] = (r * d, d)
        shapes[f"{pre}.mlp.b2"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ViTConfig, seed: int) -> dict[str, Tensor]:
    """Seed-deterministic backbone initialization.

    Weight matrices are fan-based uniform; layer-norm affines start at the
    identity; biases, CLS token and positional embeddings are zero-mean
    small-scale draws.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta"):
            arr = np.zeros(shape)
        elif len(shape) == 2 and not name.startswith(("pos_embed", "cls_token")):
            arr = _xavier_uniform(rng, shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(arr)
    return params


def patch_embed(images: Tensor, params: dict[str, Tensor], config: ViTConfig) -> TokenSequence:
    """Project non-overlapping patches to the embed dim, add per-patch
    positional embeddings, and prepend the CLS token."""
    if images.data.ndim != 4 or images.data.shape[1:] != (
            config.image_size, config.image_size, config.channels):
        raise ConfigError(
            f"patch_embed: images {images.shape} do not match config "
            f"[B x {config.image_size} x {config.image_size} x {config.channels}]")
    b = images.data.shape[0]
    n, d = config.num_patches, config.embed_dim
    patches = T.extract_patches(images, config.patch_size)
    flat = T.reshape(patches, (b * n, config.patch_size ** 2 * config.channels))
    proj = T.add(T.matmul(flat, params["patch_embed.weight"]), params["patch_embed.bias"])
    tokens = T.add(T.reshape(proj, (b, n, d)), params["pos_embed"])
    cls = T.broadcast_batch(params["cls_token"], b)
    return TokenSequence(T.concat_tokens([cls, tokens]), n_prompts=0)


def _attention_tokens(x: Tensor, params, prefix: str, tau, config: ViTConfig,
                      block: int, collector: list[AttentionState] | None) -> Tensor:
    b, t, d = x.data.shape
    h, dh = config.num_heads, config.head_dim

    def heads(name):
        y = T.add(T.matmul(T.reshape(x, (b * t, d)), params[f"{prefix}.attn.w{name}"]),
                  params[f"{prefix}.attn.b{name}"])
        return T.swapaxes(T.reshape(y, (b, t, h, dh)), 1, 2)

    q, k, v = heads("q"), heads("k"), heads("v")
    logits = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    scores = T.softmax_temp(logits, tau)
    if collector is not None:
        collector.append(AttentionState(block, q.data.copy(), k.data.copy(),
                                        v.data.copy(), scores.data.copy()))
    ctx = T.reshape(T.swapaxes(T.matmul(scores, v), 1, 2), (b * t, d))
    out = T.add(T.matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])
    return T.reshape(out, (b, t, d))


def attention(x: TokenSequence, params: dict[str, Tensor], config: ViTConfig,
              tau=1.0, block: int = 0,
              collector: list[AttentionState] | None = None) -> TokenSequence:
    """Multi-head self-attention over the full sequence; logits are scaled
    by 1/(tau * sqrt(head_dim))."""
    if not isinstance(tau, Tensor) and float(tau) <= 0.0:
        raise DomainError(f"attention: tau must be positive, got {tau}")
    prefix = f"blocks.{block}"
    return TokenSequence(_attention_tokens(x.tokens, params, prefix, tau, config,
                                           block, collector), x.n_prompts)


def _mlp_tokens(x: Tensor, params, prefix: str) -> Tensor:
    b, t, d = x.data.shape
    y = T.reshape(x, (b * t, d))
    y = T.add(T.matmul(y, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"])
    y = T.gelu(y)
    y = T.add(T.matmul(y, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return T.reshape(y, (b, t, d))


def block_forward(x: TokenSequence, params: dict[str, Tensor], config: ViTConfig,
                  block: int, tau=1.0,
                  collector: list[AttentionState] | None = None) -> TokenSequence:
    """Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.))."""
    pre = f"blocks.{block}"
    t = x.tokens
    normed = T.layer_norm(t, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
    t = T.add(t, _attention_tokens(normed, params, pre, tau, config, block, collector))
    normed = T.layer_norm(t, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
    t = T.add(t, _mlp_tokens(normed, params, pre))
    return TokenSequence(t, x.n_prompts)


def head_forward(x: TokenSequence, params: dict[str, Tensor]) -> Tensor:
    """Single linear layer on the final CLS token; all other tokens are
    discarded."""
    b, _, d = x.tokens.data.shape
    cls = T.reshape(x.cls_segment(), (b, d))
    return T.add(T.matmul(cls, params["head.weight"]), params["head.bias"])


def vit_forward(images: Tensor, params: dict[str, Tensor], config: ViTConfig,
                temps=None, collector: list[AttentionState] | None = None) -> Tensor:
    """Plain backbone forward (no prompts): embed, L blocks, head."""
    seq = patch_embed(images, params, config)
    for l in range(config.num_blocks):
        tau = temps.tau(l) if temps is not None else 1.0
        seq = block_forward(seq, params, config, l, tau, collector)
    return head_forward(seq, params)


def backbone_param_names(config: ViTConfig) -> list[str]:
    """Every parameter of the frozen encoder, head excluded."""
    return [n for n in param_shapes(config) if n not in HEAD_PARAMS]
