"""Closed-form gate aggregation, selection ratios, and attention export.

The sequential gating recursion can be unrolled: the prompt representation
entering the last block is a weighted sum of every block's raw prompt
output plus a residual term for the initial prompts. The weights are pure
functions of the gate values; normalizing them gives each block's selection
ratio. Everything here is evaluated from values recorded in a
:class:`~gatedprompt.prompts.PromptTrace`, so the identity with the
sequential forward is a checkable property, not an assumption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, DegenerateGatesError, DomainError, StateError
from .prompts import PromptTrace
from .tensor import Tensor


def accumulated_weights(gate_values) -> np.ndarray:
    """Effective coefficient of each block's raw prompt output inside the
    last block's input: ``g[l] * prod_{m>l} (1 - g[m])``, and just ``g[-1]``
    for the final gated block."""
    g = np.asarray(gate_values, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise DomainError(f"gate values must be a non-empty 1-D sequence, got shape {g.shape}")
    if np.any(g < 0.0) or np.any(g > 1.0):
        raise DomainError(f"gate values must lie in [0, 1], got {g.tolist()}")
    survival = np.ones_like(g)  # prod of (1 - g[m]) for m > l
    survival[:-1] = np.cumprod((1.0 - g)[::-1])[::-1][1:]
    return survival * g


def residual_prompt_weight(gate_values) -> float:
    """Weight of the initial prompt tokens in the last block's input."""
    g = np.asarray(gate_values, dtype=np.float64)
    if np.any(g < 0.0) or np.any(g > 1.0):
        raise DomainError(f"gate values must lie in [0, 1], got {g.tolist()}")
    return float(np.prod(1.0 - g))


def selection_ratio(accumulated) -> np.ndarray:
    """Normalized accumulated weights; each block's influence on the final
    prompt representation."""
    gt = np.asarray(accumulated, dtype=np.float64)
    total = gt.sum()
    if total <= 0.0:
        raise DegenerateGatesError(
            "all accumulated gate weights are zero; selection ratios are undefined")
    return gt / total


def closed_form_aggregate(trace: PromptTrace, gate_values) -> Tensor:
    """Rebuild the last block's input prompt representation from the recorded
    per-block outputs and the gate weights, without re-running the forward."""
    g = np.asarray(gate_values, dtype=np.float64)
    if len(trace.entries) != g.size:
        raise StateError(
            f"trace has {len(trace.entries)} gated entries but {g.size} gate values were given")
    if g.size < 1 or trace.final_input is None:
        raise StateError("trace is incomplete; run the gated forward to the last block first")
    gt = accumulated_weights(g)
    batch = trace.entries[0].after.data.shape[0]
    initial = np.broadcast_to(trace.initial.data, (batch,) + trace.initial.data.shape)
    out = residual_prompt_weight(g) * initial
    for weight, entry in zip(gt, trace.entries):
        out = out + weight * entry.after.data
    return Tensor(out)


@dataclass
class SelectionReport:
    """Gate analysis of one trained run: raw gate values, accumulated
    weights, selection ratios, and the residual initial-prompt weight."""

    run_id: str
    gate_values: np.ndarray
    accumulated: np.ndarray
    ratios: np.ndarray
    residual_weight: float

    @classmethod
    def from_gates(cls, gate_values, run_id: str = "") -> "SelectionReport":
        g = np.asarray(gate_values, dtype=np.float64)
        gt = accumulated_weights(g)
        return cls(run_id=run_id, gate_values=g, accumulated=gt,
                   ratios=selection_ratio(gt), residual_weight=residual_prompt_weight(g))

    def to_text(self) -> str:
        lines = [f"run_id: {self.run_id}"]
        for key, values in (("gate_values", self.gate_values),
                            ("accumulated_weights", self.accumulated),
                            ("selection_ratios", self.ratios)):
            lines.append(f"{key}:")
            for l, v in enumerate(values):
                lines.append(f"  block_{l + 1}: {float(v)!r}")
        lines.append(f"residual_initial_prompt_weight: {float(self.residual_weight)!r}")
        return "\n".join(lines) + "\n"


def cls_attention_grid(scores: np.ndarray, n_prompts: int, grid: int,
                       head: int | None = None) -> np.ndarray:
    """CLS-row attention restricted to patch columns and renormalized to sum
    to 1, reshaped to the patch grid.

    ``head=None`` averages the attention matrices over heads first.
    """
    mat = scores.mean(axis=1) if head is None else scores[:, head]
    row = mat[0, 0, :]  # CLS attends over the full sequence
    patch_part = row[1 + n_prompts:]
    total = patch_part.sum()
    if total <= 0.0:
        raise DomainError("CLS row places no mass on patch tokens; cannot renormalize")
    return (patch_part / total).reshape(grid, grid)


def export_attention_maps(states, config, n_prompts: int, block_indices,
                          out_dir, fingerprint: str = "") -> list[str]:
    """Write per-block CSV grids of the CLS-row attention over patch
    positions: one file per head plus a mean-over-heads file.

    Returns the written paths in deterministic order.
    """
    import os

    by_block = {s.block: s for s in states}
    grid = config.grid_size
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for l in block_indices:
        if l not in by_block:
            raise BoundsError(
                f"block index {l} out of range; recorded blocks: {sorted(by_block)}")
        state = by_block[l]
        heads = list(range(state.scores.shape[1])) + [None]
        for head in heads:
            tag = "mean" if head is None else str(head)
            name = f"attention_block{l}_head{tag}.csv"
            path = os.path.join(out_dir, name)
            cells = cls_attention_grid(state.scores, n_prompts, grid, head)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("# CLS-row attention restricted to patch columns and "
                         "renormalized to sum to 1; row-major patch grid\n")
                if fingerprint:
                    fh.write(f"# config_fingerprint={fingerprint}\n")
                fh.write("block,head,rows=patch_grid\n")
                fh.write(f"{l},{tag},{grid}\n")
                for row in cells:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
            paths.append(path)
    return paths
