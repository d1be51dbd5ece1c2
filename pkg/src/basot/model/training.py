"""Teacher-forced training: loss assembly, SGD step, gradient checking.

Losses are computed as pure numpy (value, grad) pairs and injected into the
autodiff tape as external scalars, so one backward pass yields parameter
gradients for the full weighted objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import InfeasibleAlignmentError, InvalidArgumentError
from ..losses import (
    LogProbLattice,
    LossWeights,
    UttSpanFrames,
    attention_ce,
    bc_loss,
    bc_ots_loss,
    combined_loss,
    ctc_loss,
    scd_loss,
)
from ..serialize import make_asr_and_scd_targets, serialize_sot, serialize_tsot, strip_separators
from ..transcripts import SC, AttentionMap, Session, ms_to_frame
from . import autodiff as ad
from .network import Graph, Model

LOSS_TERMS = ("att_ce", "sot_ctc", "tsot_ctc", "scd", "bc")
MAX_POS_WEIGHT = 20.0


@dataclass(frozen=True)
class TrainSample:
    session_id: str
    features: np.ndarray
    dec_teacher: np.ndarray  # decoder targets, "<eos>"-terminated
    pos_to_utt: Tuple[Tuple[int, int], ...]  # content rows only
    sot_ids: np.ndarray  # CTC target incl. "<sc>"
    tsot_ids: np.ndarray  # CTC target, separators removed
    scd_flags: np.ndarray  # parallel to dec_teacher
    spans: UttSpanFrames  # encoder-frame spans per utterance


def _baseline_pos_to_utt(tokens: Sequence[str]) -> Tuple[Tuple[int, int], ...]:
    # "<sc>" rows stay with the utterance they terminate
    out: List[Tuple[int, int]] = []
    n = k = 0
    for tok in tokens:
        out.append((n, k))
        if tok == SC:
            n += 1
            k = 0
        else:
            k += 1
    return tuple(out)


def prepare_sample(session: Session, features: np.ndarray, model: Model) -> TrainSample:
    cfg = model.cfg
    vocab = model.vocab
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[0] // cfg.subsample
    asr, scd = make_asr_and_scd_targets(session)
    sot = serialize_sot(session)
    tsot_texts = strip_separators(serialize_tsot(session))

    if cfg.baseline_sot:
        teacher_texts = list(sot.tokens)
        pos_to_utt = _baseline_pos_to_utt(sot.tokens)
        flags = [0] * len(teacher_texts)
    else:
        teacher_texts = list(asr.tokens)
        pos_to_utt = []
        count: Dict[int, int] = {}
        for n in asr.utt_index:
            k = count.get(n, 0)
            pos_to_utt.append((n, k))
            count[n] = k + 1
        pos_to_utt = tuple(pos_to_utt)
        flags = list(scd.flags)

    dec_teacher = np.concatenate([vocab.encode(teacher_texts), [vocab.eos_id]])
    spans = []
    fs = session.frame_shift_ms
    for u in session.utterances:
        a = ms_to_frame(u.start_ms, fs, cfg.subsample)
        b = ms_to_frame(max(u.start_ms, u.end_ms - 1), fs, cfg.subsample)
        b = min(b, T - 1)  # subsample remainder crop can eat the last frames
        a = min(a, b)
        spans.append((a, b))
    return TrainSample(
        session_id=session.id,
        features=features,
        dec_teacher=dec_teacher,
        pos_to_utt=tuple(pos_to_utt),
        sot_ids=vocab.encode(list(sot.tokens)),
        tsot_ids=vocab.encode(tsot_texts),
        scd_flags=np.asarray(flags + [0], dtype=np.int64),
        spans=UttSpanFrames(tuple(spans)),
    )


def batch_pos_weight(batch: Sequence[TrainSample]) -> float:
    pos = sum(int(s.scd_flags.sum()) for s in batch)
    neg = sum(int(s.scd_flags.size) for s in batch) - pos
    if pos == 0:
        return 1.0
    return float(min(MAX_POS_WEIGHT, max(1.0, neg / pos)))


def forward_loss(
    model: Model,
    sample: TrainSample,
    weights: LossWeights,
    use_ots: bool,
    pos_weight: float = 1.0,
) -> Tuple[ad.Tensor, Dict[str, float], Dict[str, ad.Tensor], Graph]:
    """Build the tape for one sample; returns (total, breakdown, term nodes, graph).

    Raises InfeasibleAlignmentError when a CTC target cannot fit the frame
    count (callers skip such samples).
    """
    cfg = model.cfg
    dec_input = np.concatenate(([model.vocab.eos_id], sample.dec_teacher[:-1]))
    g = model.build_graph(sample.features, dec_input)

    nodes: Dict[str, ad.Tensor] = {}
    values: Dict[str, float] = dict.fromkeys(LOSS_TERMS, 0.0)

    v, gr = attention_ce(g.asr_logits.data, sample.dec_teacher)
    nodes["att_ce"] = ad.external_scalar(g.asr_logits, v, gr)
    values["att_ce"] = v

    att_w = 1.0 - weights.lambda1 - weights.lambda2
    if weights.lambda1 > 0:
        v, gr = ctc_loss(LogProbLattice(g.sot_logp.data), sample.sot_ids)
        nodes["sot_ctc"] = ad.external_scalar(g.sot_logp, v, gr)
        values["sot_ctc"] = v
    if weights.lambda2 > 0:
        v, gr = ctc_loss(LogProbLattice(g.tsot_logp.data), sample.tsot_ids)
        nodes["tsot_ctc"] = ad.external_scalar(g.tsot_logp, v, gr)
        values["tsot_ctc"] = v
    if weights.alpha1 > 0 and g.scd_logits is not None:
        v, gr = scd_loss(g.scd_logits.data, sample.scd_flags, pos_weight)
        nodes["scd"] = ad.external_scalar(g.scd_logits, v, gr)
        values["scd"] = v
    if weights.alpha2 > 0 and g.attn:
        parts = []
        share = 1.0 / len(g.attn)
        total_bc = 0.0
        n_rows = len(sample.pos_to_utt)
        for site, probs in g.attn.items():
            amap = AttentionMap(probs.data[:n_rows], sample.pos_to_utt)
            if use_ots:
                res = bc_ots_loss(amap, sample.spans, cfg.bc_mode, cfg.clamp_eps)
            else:
                res = bc_loss(amap, cfg.clamp_eps)
            full_grad = np.zeros_like(probs.data)
            full_grad[:n_rows] = res.grad
            parts.append(ad.scale(ad.external_scalar(probs, res.value, full_grad), share))
            total_bc += share * res.value
        nodes["bc"] = ad.add_n(parts)
        values["bc"] = total_bc

    terms = [ad.scale(nodes["att_ce"], att_w)]
    for name, w in (
        ("sot_ctc", weights.lambda1),
        ("tsot_ctc", weights.lambda2),
        ("scd", weights.alpha1),
        ("bc", weights.alpha2),
    ):
        if name in nodes:
            terms.append(ad.scale(nodes[name], w))
    total = ad.add_n(terms)
    values["total"] = combined_loss(
        values["att_ce"], values["sot_ctc"], values["tsot_ctc"], values["scd"], values["bc"], weights
    )
    return total, values, nodes, g


@dataclass
class TrainState:
    model: Model
    lr: float
    momentum: float = 0.9
    clip_norm: float = 5.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def train_step(
    state: TrainState,
    batch: Sequence[TrainSample],
    weights: LossWeights,
    use_ots: bool,
    freeze_asr: bool = False,
) -> Tuple[TrainState, Dict[str, float]]:
    """One optimizer update on the batch-mean objective.

    Samples whose CTC targets cannot align are skipped and counted. The
    returned breakdown holds batch-mean component values plus bookkeeping;
    with `freeze_asr` only the speaker-change branch parameters move.
    """
    model = state.model
    model.zero_grads()
    pw = batch_pos_weight(batch)
    sums = dict.fromkeys((*LOSS_TERMS, "total"), 0.0)
    used = 0
    for sample in batch:
        try:
            total, values, _, _ = forward_loss(model, sample, weights, use_ots, pw)
        except InfeasibleAlignmentError:
            state.skipped += 1
            continue
        ad.backward(total)
        for k, v in values.items():
            sums[k] += v
        used += 1

    breakdown = {k: (v / used if used else 0.0) for k, v in sums.items()}
    breakdown["used"] = float(used)
    breakdown["skipped"] = float(len(batch) - used)
    breakdown["pos_weight"] = pw
    if used == 0:
        return state, breakdown

    names = [
        n
        for n in model.params
        if not freeze_asr or n.startswith("scd")
    ]
    sq = 0.0
    for n in names:
        t = model.params[n]
        if t.grad is None:
            continue
        t.grad /= used
        sq += float((t.grad * t.grad).sum())
    norm = np.sqrt(sq)
    clip = min(1.0, state.clip_norm / norm) if norm > 0 else 1.0
    for n in names:
        t = model.params[n]
        if t.grad is None:
            continue
        v = state.velocity.get(n)
        if v is None:
            v = np.zeros_like(t.data)
        v = state.momentum * v + clip * t.grad
        state.velocity[n] = v
        t.data -= state.lr * v
    state.step += 1
    breakdown["grad_norm"] = float(norm)
    return state, breakdown


def probe_attention_mass(model: Model, samples: Sequence[TrainSample]) -> float:
    """Mean fraction of cross-attention inside each token's own utterance
    span, over the monitored sites of a fixed probe batch."""
    masses: List[float] = []
    for sample in samples:
        dec_input = np.concatenate(([model.vocab.eos_id], sample.dec_teacher[:-1]))
        g = model.build_graph(sample.features, dec_input)
        n_rows = len(sample.pos_to_utt)
        for probs in g.attn.values():
            p = probs.data
            for row, (n, _) in enumerate(sample.pos_to_utt):
                a, b = sample.spans[n]
                masses.append(float(p[row, a : b + 1].sum()))
        del g
    if not masses:
        raise InvalidArgumentError("no attention rows to probe")
    return float(np.mean(masses))


GRAD_DEN_FLOOR = 1e-3  # keeps fp cancellation noise (~|loss|*eps/step) out of the ratio


def grad_check(
    model: Model,
    sample: TrainSample,
    weights: LossWeights,
    use_ots: bool,
    coords_per_param: int = 2,
    step: float = 1e-5,
    seed: int = 0,
) -> Dict[str, float]:
    """Max relative error of analytic parameter gradients per loss term,
    against central finite differences on a random coordinate subset.

    Relative error uses max(|fd|, |analytic|, GRAD_DEN_FLOOR) as the
    denominator: central differences of an O(10) loss carry absolute noise
    near 1e-9 at step 1e-5, which would read as huge "relative" error on
    coordinates whose true gradient is zero.
    """
    if model.cfg.model_dim > 16:
        raise InvalidArgumentError("grad_check is for model_dim <= 16")
    rng = np.random.default_rng(seed)
    pw = batch_pos_weight([sample])

    def term_value(name: str) -> float:
        _, values, _, _ = forward_loss(model, sample, weights, use_ots, pw)
        return values[name]

    _, _, nodes, _ = forward_loss(model, sample, weights, use_ots, pw)
    report: Dict[str, float] = {}
    for name in LOSS_TERMS:
        if name not in nodes:
            continue
        model.zero_grads()
        _, _, nodes_n, _ = forward_loss(model, sample, weights, use_ots, pw)
        ad.backward(nodes_n[name])
        worst = 0.0
        for pname, t in model.params.items():
            flat = t.data.reshape(-1)
            g = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
            idx = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                vp = term_value(name)
                flat[i] = orig - step
                vm = term_value(name)
                flat[i] = orig
                num = (vp - vm) / (2 * step)
                den = max(abs(num), abs(g[i]), GRAD_DEN_FLOOR)
                worst = max(worst, abs(num - g[i]) / den)
        report[name] = worst
    return report
