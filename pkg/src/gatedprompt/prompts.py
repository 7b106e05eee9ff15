"""Prompt-tuning forward variants and their trainable/frozen partition.

Three ways to steer a frozen backbone with learnable prompt tokens:

* shallow: prompts inserted once before the first block, representations
  flow through unmodified;
* deep: fresh per-block prompts replace the previous block's prompt
  outputs before each block runs;
* gated: prompts inserted once, and after every block except the last the
  prompt segment is replaced by the convex combination
  ``g * after + (1 - g) * before`` with a learnable per-block gate.

Gates come in soft (sigmoid of a prior), hard (Gumbel-Sigmoid sample with a
straight-through gradient) and fixed (constant override) flavors. Attention
temperatures are learned in log-space so they stay positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, StateError
from .tensor import Tensor
from .vit import (
    HEAD_PARAMS,
    AttentionState,
    TokenSequence,
    ViTConfig,
    block_forward,
    head_forward,
    patch_embed,
)

MODES = ("shallow", "deep", "gated")
GATE_VARIANTS = ("soft", "hard", "fixed")


@dataclass
class GateBank:
    """One gate prior per block except the last (L-1 scalars)."""

    gammas: list[Tensor]
    variant: str = "soft"
    fixed_values: list[float] | None = None
    gumbel_temp: float = 1.0

    def __post_init__(self):
        if self.variant not in GATE_VARIANTS:
            raise ConfigError(f"unknown gate variant '{self.variant}'")
        if self.variant == "fixed":
            if self.fixed_values is None or len(self.fixed_values) != len(self.gammas):
                raise ConfigError("fixed gate variant needs one value per gated block")
            for v in self.fixed_values:
                if not 0.0 <= v <= 1.0:
                    raise DomainError(f"fixed gate value {v} outside [0, 1]")
        if self.gumbel_temp <= 0:
            raise DomainError(f"gumbel_temp must be positive, got {self.gumbel_temp}")

    def __len__(self) -> int:
        return len(self.gammas)

    def soft_values(self) -> np.ndarray:
        """sigmoid(gamma) per gated block, as plain floats."""
        return np.array([1.0 / (1.0 + math.exp(-g.item())) for g in self.gammas])


@dataclass
class TemperatureBank:
    """Per-block attention temperatures, parameterized as log(tau)."""

    log_taus: list[Tensor]

    def tau(self, block: int) -> Tensor:
        return T.exp(self.log_taus[block])

    def values(self) -> np.ndarray:
        return np.array([math.exp(t.item()) for t in self.log_taus])


@dataclass
class GateStep:
    """What one gated block did to the prompt segment."""

    before: Tensor  # prompt representation entering the block
    after: Tensor   # raw prompt representation the block produced
    gated: Tensor   # convex combination passed to the next block
    gate_value: float


@dataclass
class PromptTrace:
    """Recorded prompt representations: one gated entry per block except the
    last, plus the ungated last-block pass."""

    initial: Tensor
    entries: list[GateStep] = field(default_factory=list)
    final_input: Tensor | None = None   # prompt segment entering the last block
    final_output: Tensor | None = None  # raw prompt segment after the last block

    def gate_values(self) -> np.ndarray:
        return np.array([e.gate_value for e in self.entries])


def gate_values(bank: GateBank, training: bool,
                rng: np.random.Generator | None = None) -> list:
    """Per-block gate scalars for one forward pass.

    soft: sigmoid(gamma), differentiable. hard + training: a Gumbel-Sigmoid
    sample thresholded to {0, 1} with the relaxed sigmoid's gradient
    (straight-through). hard + inference: deterministic threshold at 0.5.
    fixed: the stored constants.
    """
    if bank.variant == "soft":
        return [T.sigmoid(g) for g in bank.gammas]
    if bank.variant == "fixed":
        return list(bank.fixed_values)
    if training:
        if rng is None:
            raise StateError("hard-gate sampling in training mode needs an explicit rng")
        out = []
        for g in bank.gammas:
            u = rng.uniform()
            noise = math.log(u) - math.log1p(-u)  # logistic noise
            relaxed = T.sigmoid(T.div(T.add(g, noise), bank.gumbel_temp))
            out.append(T.binary_threshold_ste(relaxed))
        return out
    return [1.0 if g.item() > 0.0 else 0.0 for g in bank.gammas]


def init_prompt_tokens(config: ViTConfig, n_prompts: int, seed: int,
                       deep: bool = False) -> list[Tensor]:
    """Fan-based uniform prompt initialization; one tensor for shallow or
    gated mode, one per block for deep mode."""
    if n_prompts < 1:
        raise ConfigError(f"n_prompts must be >= 1, got {n_prompts}")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (n_prompts * config.embed_dim + config.embed_dim))
    count = config.num_blocks if deep else 1
    return [Tensor(rng.uniform(-bound, bound, size=(n_prompts, config.embed_dim)))
            for _ in range(count)]


def init_tuning_params(config: ViTConfig, mode: str, n_prompts: int, seed: int,
                       gate_init: float = 5.0, with_temps: bool = True) -> dict[str, Tensor]:
    """Tuning parameters added on top of the backbone map: prompt tokens,
    gate priors (gated mode) and log-temperatures."""
    if mode not in MODES:
        raise ConfigError(f"unknown tuning mode '{mode}'")
    params: dict[str, Tensor] = {}
    tokens = init_prompt_tokens(config, n_prompts, seed, deep=(mode == "deep"))
    if mode == "deep":
        for l, t in enumerate(tokens):
            params[f"prompt.tokens.{l}"] = t
    else:
        params["prompt.tokens"] = tokens[0]
    if mode == "gated":
        for l in range(config.num_blocks - 1):
            params[f"gates.gamma.{l}"] = Tensor(float(gate_init))
    if with_temps:
        for l in range(config.num_blocks):
            params[f"temps.log_tau.{l}"] = Tensor(0.0)
    return params


def gate_bank_from_params(params: dict[str, Tensor], config: ViTConfig,
                          variant: str = "soft", fixed_values=None,
                          gumbel_temp: float = 1.0) -> GateBank:
    gammas = [params[f"gates.gamma.{l}"] for l in range(config.num_blocks - 1)]
    return GateBank(gammas, variant=variant, fixed_values=fixed_values,
                    gumbel_temp=gumbel_temp)


def temperature_bank_from_params(params: dict[str, Tensor],
                                 config: ViTConfig) -> TemperatureBank | None:
    if "temps.log_tau.0" not in params:
        return None
    return TemperatureBank([params[f"temps.log_tau.{l}"] for l in range(config.num_blocks)])


def build_trainable_mask(config: ViTConfig, mode: str, with_temps: bool) -> set[str]:
    """Names of the parameters that receive gradient updates; the pretrained
    encoder is never among them."""
    if mode not in MODES:
        raise ConfigError(f"unknown tuning mode '{mode}'")
    mask: set[str] = set(HEAD_PARAMS)
    if mode == "deep":
        mask.update(f"prompt.tokens.{l}" for l in range(config.num_blocks))
    else:
        mask.add("prompt.tokens")
    if mode == "gated":
        mask.update(f"gates.gamma.{l}" for l in range(config.num_blocks - 1))
    if with_temps:
        mask.update(f"temps.log_tau.{l}" for l in range(config.num_blocks))
    return mask


def _insert_prompts(base: TokenSequence, prompt_tokens: Tensor) -> TokenSequence:
    b = base.batch
    n_p = prompt_tokens.data.shape[0]
    prompts = T.broadcast_batch(prompt_tokens, b)
    seq = T.concat_tokens([base.cls_segment(), prompts, base.patch_segment()])
    return TokenSequence(seq, n_prompts=n_p)


def _replace_prompt_segment(seq: TokenSequence, new_prompts: Tensor) -> TokenSequence:
    cls = T.slice_tokens(seq.tokens, 0, 1)
    patches = T.slice_tokens(seq.tokens, 1 + seq.n_prompts, seq.seq_len)
    return TokenSequence(T.concat_tokens([cls, new_prompts, patches]), seq.n_prompts)


def gated_forward(images: Tensor, params: dict[str, Tensor], config: ViTConfig,
                  gates: GateBank, temps: TemperatureBank | None = None,
                  training: bool = False, rng: np.random.Generator | None = None,
                  collector: list[AttentionState] | None = None) -> tuple[Tensor, PromptTrace]:
    """Gated prompt tuning forward pass.

    Prompts are prepended once between CLS and patches. After every block
    except the last, the prompt segment is replaced by
    ``g * after + (1 - g) * before``; CLS and patch tokens pass through
    untouched. Returns the logits and the full prompt trace.
    """
    if "prompt.tokens" not in params:
        raise ConfigError("gated mode requires 'prompt.tokens' in the parameter map")
    prompt_tokens = params["prompt.tokens"]
    if prompt_tokens.data.shape[0] < 1:
        raise ConfigError("gated mode requires at least one prompt token")
    if len(gates) != config.num_blocks - 1:
        raise ConfigError(
            f"gate bank has {len(gates)} priors, expected {config.num_blocks - 1}")

    seq = _insert_prompts(patch_embed(images, params, config), prompt_tokens)
    gvals = gate_values(gates, training, rng)
    trace = PromptTrace(initial=prompt_tokens)
    last = config.num_blocks - 1
    for l in range(config.num_blocks):
        tau = temps.tau(l) if temps is not None else 1.0
        if l == last:
            trace.final_input = seq.prompt_segment()
            seq = block_forward(seq, params, config, l, tau, collector)
            trace.final_output = seq.prompt_segment()
        else:
            before = seq.prompt_segment()
            out = block_forward(seq, params, config, l, tau, collector)
            after = out.prompt_segment()
            g = gvals[l]
            one_minus = T.sub(1.0, g) if isinstance(g, Tensor) else 1.0 - g
            gated = T.add(T.mul(g, after), T.mul(one_minus, before))
            seq = _replace_prompt_segment(out, gated)
            trace.entries.append(GateStep(before, after, gated,
                                          g.item() if isinstance(g, Tensor) else g))
    return head_forward(seq, params), trace


def vpt_shallow_forward(images: Tensor, params: dict[str, Tensor], config: ViTConfig,
                        temps: TemperatureBank | None = None,
                        collector: list[AttentionState] | None = None) -> Tensor:
    """Prompts inserted once at the first block; their output representations
    flow through every subsequent block unmodified."""
    if "prompt.tokens" not in params:
        raise ConfigError("shallow mode requires 'prompt.tokens' in the parameter map")
    if params["prompt.tokens"].data.shape[0] < 1:
        raise ConfigError("shallow mode requires at least one prompt token")
    seq = _insert_prompts(patch_embed(images, params, config), params["prompt.tokens"])
    for l in range(config.num_blocks):
        tau = temps.tau(l) if temps is not None else 1.0
        seq = block_forward(seq, params, config, l, tau, collector)
    return head_forward(seq, params)


def vpt_deep_forward(images: Tensor, params: dict[str, Tensor], config: ViTConfig,
                     temps: TemperatureBank | None = None,
                     collector: list[AttentionState] | None = None) -> Tensor:
    """Block-wise prompts: each block's prompt-segment output is discarded
    and replaced by that block's own learnable tokens before it runs."""
    names = [f"prompt.tokens.{l}" for l in range(config.num_blocks)]
    missing = [n for n in names if n not in params]
    if missing:
        raise ConfigError(f"deep mode is missing per-block prompts: {missing}")
    n_p = params[names[0]].data.shape[0]
    for n in names:
        if params[n].data.shape[0] != n_p:
            raise ConfigError("deep mode requires the same number of prompts per block")

    base = patch_embed(images, params, config)
    b = base.batch
    seq = _insert_prompts(base, params[names[0]])
    for l in range(config.num_blocks):
        if l > 0:
            seq = _replace_prompt_segment(seq, T.broadcast_batch(params[names[l]], b))
        tau = temps.tau(l) if temps is not None else 1.0
        seq = block_forward(seq, params, config, l, tau, collector)
    return head_forward(seq, params)


@dataclass
class FrozenReport:
    """Bitwise comparison of the non-trainable parameters of two checkpoints."""

    violations: list[str]
    checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def assert_frozen(before, after, mask: set[str]) -> FrozenReport:
    """Verify that every parameter outside ``mask`` is bit-identical between
    two checkpoints of the same config."""
    if before.config != after.config:
        raise ConfigError(
            f"checkpoints have different configs: {before.config} vs {after.config}")
    if set(before.params) != set(after.params):
        raise ConfigError("checkpoints hold different parameter sets")
    violations = []
    checked = 0
    for name in sorted(set(before.params) - set(mask)):
        checked += 1
        a, b = before.params[name].data, after.params[name].data
        if a.shape != b.shape:
            raise DimensionError(f"parameter '{name}' changed shape: {a.shape} vs {b.shape}")
        if a.tobytes() != b.tobytes():
            violations.append(name)
    return FrozenReport(violations=violations, checked=checked)
