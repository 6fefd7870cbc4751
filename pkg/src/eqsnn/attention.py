"""Gated temporal attention over past bottleneck codes.

Each head runs scaled dot-product attention of the current code against a
look-back range of past codes, projects the attended context back to the
model width, then blends it with the current code through a learned
sigmoid gate: G ⊙ attended + (1−G) ⊙ H_t. Three heads with short, medium,
and long ranges run in parallel; their blended outputs are averaged by
default, with a `paper-sum` switch selecting the literal Σ_k G^k ⊙ Attn^k
combination (which has no residual term and vanishes when all gates are
near zero).

With no history yet available a head's gate is forced to 0, so the blend
returns H_t untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError

DEFAULT_LOOKBACKS = (2, 24, 48)
COMBINE_MEAN = "mean"
COMBINE_PAPER_SUM = "paper-sum"


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, tuple(axes))


def attend(q: Tensor, k: Tensor, v: Tensor):
    """softmax(QKᵀ/√d_k)·V over the last two axes.

    q: [..., 1, d_k], k: [..., w, d_k], v: [..., w, d_v] with w ≥ 1.
    Returns (output [..., 1, d_v], weights [..., 1, w]); weight rows are
    nonnegative and sum to 1.
    """
    if k.shape[-2] < 1:
        raise ConfigError("attention needs at least one history row")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    d_k = k.shape[-1]
    scores = (q @ _swap_last(k)) * (1.0 / np.sqrt(d_k))
    weights = ad.softmax(scores, axis=-1)
    return weights @ v, weights


def gate(h_t: Tensor, h_bar: Tensor, w_g: Tensor, b_g: Tensor) -> Tensor:
    """σ(W_g·[H_t; H̄] + b_g), elementwise in (0,1).

    w_g is stored as [2d, d] for the row-vector convention x @ W.
    """
    joined = ad.concat([h_t, h_bar], axis=-1)
    return ad.sigmoid(joined @ w_g + b_g)


def gated_blend(g: Tensor, attended: Tensor, h_t: Tensor) -> Tensor:
    """G ⊙ attended + (1−G) ⊙ H_t; an elementwise convex combination."""
    if not (g.shape == attended.shape == h_t.shape):
        raise ShapeError(f"blend shape mismatch: gate {g.shape}, "
                         f"attended {attended.shape}, current {h_t.shape}")
    return g * attended + (1.0 - g) * h_t


@dataclass
class HeadOutput:
    attended: Tensor        # context projected back to model width
    gate: Tensor
    blended: Tensor
    weights: np.ndarray | None   # softmax rows, None when no history


def multi_head_combine(outputs: Sequence[HeadOutput],
                       mode: str = COMBINE_MEAN) -> Tensor:
    """Merge per-head results into one vector.

    `mean` averages the per-head blends, keeping scale independent of
    head count. `paper-sum` is the literal Σ_k G^k ⊙ Attn^k (no residual
    term: all-zero gates give the zero vector).
    """
    if not outputs:
        raise ConfigError("no head outputs to combine")
    if mode == COMBINE_MEAN:
        total = outputs[0].blended
        for o in outputs[1:]:
            total = total + o.blended
        return total * (1.0 / len(outputs))
    if mode == COMBINE_PAPER_SUM:
        total = outputs[0].gate * outputs[0].attended
        for o in outputs[1:]:
            total = total + o.gate * o.attended
        return total
    raise ConfigError(f"unknown combine mode {mode!r}")


class AttentionHead:
    """One look-back range: Q/K/V projections, output projection, gate."""

    def __init__(self, index: int, lookback: int, d_model: int, *,
                 d_k: int = 16, d_v: int = 16, seed: int = 0):
        if lookback < 1:
            raise ConfigError(f"look-back must be >= 1, got {lookback}")
        if d_k < 1 or d_v < 1:
            raise ConfigError("projection widths must be positive")
        self.index = int(index)
        self.lookback = int(lookback)
        self.d_model = int(d_model)
        self.d_k = int(d_k)
        self.d_v = int(d_v)
        rng = ad.make_rng(seed)
        self.w_q = ad.glorot_uniform(rng, d_model, d_k)
        self.w_k = ad.glorot_uniform(rng, d_model, d_k)
        self.w_v = ad.glorot_uniform(rng, d_model, d_v)
        # attended context lives in d_v; this maps it back to model width
        self.w_o = ad.glorot_uniform(rng, d_v, d_model)
        self.w_g = ad.glorot_uniform(rng, 2 * d_model, d_model)
        self.b_g = ad.zeros((d_model,))

    def forward(self, h_t: Tensor, history: Tensor | None, *,
                gate_override: float | None = None) -> HeadOutput:
        """history: [..., w, d_model] most-recent-last, or None if empty.

        gate_override pins every gate entry to a constant (diagnostic
        ablations); the blend still runs so head-sum combination sees
        the pinned value.
        """
        if history is None or history.shape[-2] == 0:
            zero_gate = Tensor(np.zeros_like(h_t.data))
            return HeadOutput(attended=h_t, gate=zero_gate, blended=h_t,
                              weights=None)
        if history.shape[-2] > self.lookback:
            history = Tensor(history.data[..., -self.lookback:, :])
        q = (h_t @ self.w_q).reshape(h_t.shape[:-1] + (1, self.d_k))
        k = history @ self.w_k
        v = history @ self.w_v
        ctx, weights = attend(q, k, v)
        ctx = ctx.reshape(h_t.shape[:-1] + (self.d_v,))
        attended = ctx @ self.w_o
        if gate_override is not None:
            g = Tensor(np.full_like(h_t.data, float(gate_override)))
        else:
            h_bar = Tensor(np.broadcast_to(history.data.mean(axis=-2),
                                           h_t.shape))
            g = gate(h_t, h_bar, self.w_g, self.b_g)
        return HeadOutput(attended=attended, gate=g,
                          blended=gated_blend(g, attended, h_t),
                          weights=weights.data)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k,
                f"{prefix}w_v": self.w_v, f"{prefix}w_o": self.w_o,
                f"{prefix}w_g": self.w_g, f"{prefix}b_g": self.b_g}


class AttentionState:
    """Ring buffer of past codes; capacity = the longest look-back."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self._rows: list[np.ndarray] = []
        self.steps_seen = 0

    def append(self, h: np.ndarray) -> None:
        self._rows.append(np.asarray(h, dtype=np.float64))
        if len(self._rows) > self.capacity:
            self._rows.pop(0)
        self.steps_seen += 1

    def last(self, n: int) -> np.ndarray:
        """Up to n most recent rows, oldest first; may be shorter early on."""
        rows = self._rows[-n:] if n > 0 else []
        if not rows:
            return np.empty((0, 0))
        return np.stack(rows, axis=0)

    def __len__(self):
        return len(self._rows)


class GatedTemporalAttention:
    """Multi-scale heads over a shared ring buffer of past codes."""

    def __init__(self, d_model: int, *, d_k: int = 16, d_v: int = 16,
                 lookbacks=DEFAULT_LOOKBACKS, combine: str = COMBINE_MEAN,
                 seed: int = 0):
        if combine not in (COMBINE_MEAN, COMBINE_PAPER_SUM):
            raise ConfigError(f"unknown combine mode {combine!r}")
        lookbacks = tuple(int(b) for b in lookbacks)
        if not lookbacks:
            raise ConfigError("need at least one head")
        self.d_model = int(d_model)
        self.combine = combine
        self.lookbacks = lookbacks
        seeds = np.random.SeedSequence(seed).generate_state(len(lookbacks))
        self.heads = [AttentionHead(i, lb, d_model, d_k=d_k, d_v=d_v,
                                    seed=int(seeds[i]))
                      for i, lb in enumerate(lookbacks)]
        self.state = AttentionState(capacity=max(lookbacks))

    def reset(self) -> None:
        self.state = AttentionState(capacity=max(self.lookbacks))

    def forward_heads(self, h_t: Tensor, history: np.ndarray | None, *,
                      gate_override: float | None = None) -> list[HeadOutput]:
        """history: [..., w, d_model] rows oldest-first (already detached)."""
        outputs = []
        for head in self.heads:
            if history is None or history.shape[-2] == 0:
                outputs.append(head.forward(h_t, None))
            else:
                sliced = history[..., -head.lookback:, :]
                outputs.append(head.forward(h_t, Tensor(sliced),
                                            gate_override=gate_override))
        return outputs

    def forward(self, h_t: Tensor, history: np.ndarray | None, *,
                gate_override: float | None = None) -> Tensor:
        return multi_head_combine(
            self.forward_heads(h_t, history, gate_override=gate_override),
            self.combine)

    def step(self, h_t: np.ndarray):
        """Streaming path: one code in, combined vector and weights out.

        The buffer advances after the computation, so a head never
        attends to the current step.
        """
        h_t = np.asarray(h_t, dtype=np.float64)
        history = self.state.last(self.state.capacity)
        history = history if history.size else None
        with ad.no_grad():
            outputs = self.forward_heads(Tensor(h_t), history)
            combined = multi_head_combine(outputs, self.combine)
        report = []
        for head, out in zip(self.heads, outputs):
            if out.weights is None:
                continue
            row = out.weights.reshape(-1)
            w = row.size
            for lag_idx, weight in enumerate(row):
                # lag 1 = most recent history row
                report.append((self.state.steps_seen, head.index,
                               w - lag_idx, float(weight)))
        self.state.append(h_t)
        return combined.data, report

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for head in self.heads:
            out.update(head.named_parameters(f"head{head.index}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def weights_report_csv(rows) -> str:
    """Serialize (t, head, lag, weight) rows for interpretability plots."""
    lines = ["t,head,lag,weight"]
    for t, head, lag, weight in rows:
        lines.append(f"{t},{head},{lag},{weight:.10g}")
    return "\n".join(lines) + "\n"
