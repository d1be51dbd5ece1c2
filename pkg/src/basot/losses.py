"""Training objectives, each returning (value, gradient) as plain numpy.

Everything here is a pure function of arrays in double precision. CTC runs
through :mod:`basot.kernels`; the boundary losses operate on row-stochastic
attention maps and push gradient only through the frame that attains each
max (the standard max subgradient). Scores entering ``tan((pi/2) x)`` are
clamped to ``1 - clamp_eps`` because the map is singular at x = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import InfeasibleAlignmentError, InvalidArgumentError
from .transcripts import AttentionMap, ROW_SUM_TOL

DEFAULT_CLAMP_EPS = 1e-3
BC_MODES = ("complement", "literal", "deficit")


@dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients of the combined objective.

    lambda1/lambda2 scale the two CTC terms, alpha1 the speaker-change
    term, alpha2 the boundary term; the attention CE gets what is left of
    the CTC budget (1 - lambda1 - lambda2).
    """

    lambda1: float = 0.2
    lambda2: float = 0.2
    alpha1: float = 0.2
    alpha2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha1", "alpha2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"{name} must be a non-negative finite real")
        if self.lambda1 + self.lambda2 > 1 + 1e-12:
            raise InvalidArgumentError("lambda1 + lambda2 must not exceed 1")


class LogProbLattice:
    """Per-frame log-probabilities over V+1 classes, class 0 = "<blank>"."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 2:
            raise InvalidArgumentError("lattice must be [T][C] with C >= 2")
        row = np.logaddexp.reduce(values, axis=1)
        if np.any(np.abs(row) > ROW_SUM_TOL):
            worst = int(np.argmax(np.abs(row)))
            raise InvalidArgumentError(
                f"lattice row {worst} log-sum-exp is {row[worst]:.2e}, not 0"
            )
        values = values.copy()
        values.setflags(write=False)
        self.values = values

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "LogProbLattice":
        logits = np.asarray(logits, dtype=np.float64)
        shift = logits - logits.max(axis=1, keepdims=True)
        logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
        return cls(logp)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class UttSpanFrames:
    """Inclusive (start_frame, end_frame) per utterance."""

    spans: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "spans", tuple((int(a), int(b)) for a, b in self.spans)
        )
        for i, (a, b) in enumerate(self.spans):
            if a < 0 or b < a:
                raise InvalidArgumentError(f"span {i}: need 0 <= start <= end, got ({a}, {b})")

    def __len__(self) -> int:
        return len(self.spans)

    def __getitem__(self, n: int) -> Tuple[int, int]:
        return self.spans[n]

    def check_within(self, num_frames: int) -> None:
        for i, (_, b) in enumerate(self.spans):
            if b >= num_frames:
                raise InvalidArgumentError(
                    f"span {i} ends at frame {b}, past the last frame {num_frames - 1}"
                )


def ctc_repeats(target: Sequence[int]) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(lattice: LogProbLattice, target: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Negative log-probability of all blank-collapsible alignments.

    Returns the loss and its gradient w.r.t. the log-prob lattice. Every
    frame must be able to emit, so T >= len(target) + adjacent repeats;
    shorter inputs raise instead of returning an infinite loss.
    """
    labels = np.asarray(list(target), dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() >= lattice.num_classes):
        raise InvalidArgumentError("target ids must lie in [1, num_classes)")
    need = len(labels) + ctc_repeats(labels)
    if lattice.num_frames < need:
        raise InfeasibleAlignmentError(
            f"{lattice.num_frames} frames cannot align {len(labels)} labels "
            f"({need} needed)"
        )
    loss, grad = kernels.ctc_forward_backward(lattice.values, labels)
    return float(loss), grad


def attn_timestamp(att: AttentionMap, n: int, k: int) -> int:
    """Predicted frame of token k of utterance n: argmax score, earliest on ties."""
    row = att.row_of(n, k)
    return int(np.argmax(att.scores[row]))


class BCLossResult(NamedTuple):
    value: float
    grad: np.ndarray  # [positions][frames], like att.scores
    num_terms: int  # 0 marks a no-op (nothing to constrain)


def _tan_term(x: float, clamp_eps: float) -> Tuple[float, float]:
    """tan((pi/2) min(1-eps, x)) and its derivative w.r.t. x (0 when clamped)."""
    if x >= 1 - clamp_eps:
        return math.tan(0.5 * math.pi * (1 - clamp_eps)), 0.0
    t = math.tan(0.5 * math.pi * x)
    return t, 0.5 * math.pi * (1 + t * t)


def _last_token_index(att: AttentionMap, n: int) -> int:
    ks = [k for (m, k) in att.pos_to_utt if m == n]
    if not ks:
        raise InvalidArgumentError(f"utterance {n} has no positions in the map")
    return max(ks)


def bc_loss(att: AttentionMap, clamp_eps: float = DEFAULT_CLAMP_EPS) -> BCLossResult:
    """Penalty on the next utterance's first token attending past the
    predicted end of the current utterance.

    For each adjacent utterance pair (n, n+1): take the frame window from
    the predicted timestamp of n's last token to the end, find the max
    score the first token of n+1 puts there, and push it toward zero
    through tan((pi/2) x). Mean over the pairs; a single-utterance map is
    a no-op (num_terms = 0).
    """
    if not (0 < clamp_eps < 1):
        raise InvalidArgumentError("clamp_eps must lie in (0, 1)")
    grad = np.zeros_like(att.scores)
    n_utts = att.num_utterances
    if n_utts < 2:
        return BCLossResult(0.0, grad, 0)
    total = 0.0
    num_terms = n_utts - 1
    for n in range(n_utts - 1):
        t_lo = attn_timestamp(att, n, _last_token_index(att, n))
        row = att.row_of(n + 1, 0)
        window = att.scores[row, t_lo:]
        t_star = t_lo + int(np.argmax(window))
        m = float(att.scores[row, t_star])
        term, dterm = _tan_term(m, clamp_eps)
        total += term
        grad[row, t_star] += dterm / num_terms
    return BCLossResult(total / num_terms, grad, num_terms)


def bc_ots_loss(
    att: AttentionMap,
    spans: UttSpanFrames,
    mode: str = "complement",
    clamp_eps: float = DEFAULT_CLAMP_EPS,
) -> BCLossResult:
    """Boundary penalty guided by known utterance time spans.

    Per token of utterance n with inclusive frame span [t_s, t_e]:
      complement: x = max score outside the span (0 if the span covers
        every frame) — penalize attention that leaks out;
      literal: x = max score inside the span;
      deficit: x = 1 - max score inside the span — penalize weak in-span
        attention.
    Sum of tan((pi/2) min(1-eps, x)) over tokens, divided by token count.
    """
    if mode not in BC_MODES:
        raise InvalidArgumentError(f"mode must be one of {BC_MODES}")
    if not (0 < clamp_eps < 1):
        raise InvalidArgumentError("clamp_eps must lie in (0, 1)")
    T = att.num_frames
    spans.check_within(T)
    for n, _ in att.pos_to_utt:
        if n >= len(spans):
            raise InvalidArgumentError(f"no span given for utterance {n}")
    grad = np.zeros_like(att.scores)
    K = att.num_positions
    if K == 0:
        return BCLossResult(0.0, grad, 0)
    total = 0.0
    for row, (n, _) in enumerate(att.pos_to_utt):
        t_s, t_e = spans[n]
        scores = att.scores[row]
        if mode == "complement":
            mask = np.ones(T, dtype=bool)
            mask[t_s : t_e + 1] = False
            if not mask.any():
                continue  # nothing outside the span, zero term
            idx = np.flatnonzero(mask)
            t_star = int(idx[np.argmax(scores[idx])])
            x = float(scores[t_star])
            sign = 1.0
        else:
            t_star = t_s + int(np.argmax(scores[t_s : t_e + 1]))
            inside = float(scores[t_star])
            if mode == "literal":
                x, sign = inside, 1.0
            else:  # deficit
                x, sign = 1.0 - inside, -1.0
        term, dterm = _tan_term(x, clamp_eps)
        total += term
        grad[row, t_star] += sign * dterm / K
    return BCLossResult(total / K, grad, K)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def scd_loss(
    logits: Sequence[float], flags: Sequence[int], pos_weight: float = 1.0
) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy of change flags, positives scaled by pos_weight."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(flags, dtype=np.float64)
    if z.shape != y.shape or z.ndim != 1:
        raise InvalidArgumentError("logits and flags must be equal-length vectors")
    if z.size == 0:
        raise InvalidArgumentError("empty inputs")
    if not (math.isfinite(pos_weight) and pos_weight >= 1):
        raise InvalidArgumentError("pos_weight must be a finite real >= 1")
    # softplus via logaddexp keeps large |z| exact
    per = pos_weight * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    grad = (-pos_weight * y * sigmoid(-z) + (1.0 - y) * sigmoid(z)) / z.size
    return float(per.mean()), grad


def attention_ce(
    logits: np.ndarray, target_ids: Sequence[int], label_smoothing: float = 0.0
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of the decoder softmax against target token ids."""
    logits = np.asarray(logits, dtype=np.float64)
    ids = np.asarray(list(target_ids), dtype=np.int64)
    if logits.ndim != 2 or ids.ndim != 1 or logits.shape[0] != ids.size:
        raise InvalidArgumentError("need [K][V] logits and K target ids")
    if ids.size == 0:
        raise InvalidArgumentError("empty target")
    K, V = logits.shape
    if ids.min() < 0 or ids.max() >= V:
        raise InvalidArgumentError("target ids out of vocabulary range")
    if not (0 <= label_smoothing < 1):
        raise InvalidArgumentError("label_smoothing must lie in [0, 1)")
    shift = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1))
    logp = shift - logz[:, None]
    q = np.full((K, V), label_smoothing / V)
    q[np.arange(K), ids] += 1.0 - label_smoothing
    loss = float(-(q * logp).sum() / K)
    grad = (np.exp(logp) - q) / K
    return loss, grad


def combined_loss(
    att_ce: float,
    sot_ctc: float,
    tsot_ctc: float,
    scd: float,
    bc: float,
    w: LossWeights,
) -> float:
    """Weighted sum: CTC terms replace part of the attention CE, the
    speaker-change and boundary terms are additive."""
    parts = {"att_ce": att_ce, "sot_ctc": sot_ctc, "tsot_ctc": tsot_ctc, "scd": scd, "bc": bc}
    for name, v in parts.items():
        if not math.isfinite(v):
            raise InvalidArgumentError(f"{name} component is not finite: {v}")
    return (
        (1.0 - w.lambda1 - w.lambda2) * att_ce
        + w.lambda1 * sot_ctc
        + w.lambda2 * tsot_ctc
        + w.alpha1 * scd
        + w.alpha2 * bc
    )
