"""Edit-distance scoring: CER, utterance-dependent CER, SCD accuracy.

The utterance-dependent CER splits a hypothesis on the speaker-change token
and assigns the segments to reference-utterance channels, many-to-one, so
that the summed channel edit distances are minimal. ``ud_cer`` searches
exactly (DFS with branch-and-bound plus per-channel memoisation) whenever
N^M fits the cap; ``ud_cer_oracle`` is the plain enumeration it is tested
against and stays independent of that search path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, UndefinedRateError
from .serialize import make_asr_and_scd_targets, serialize_sot
from .transcripts import SC, Session

DEFAULT_SEARCH_CAP = 10**6


@dataclass
class EditCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    ref_len: int = 0

    @property
    def total(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            raise UndefinedRateError("error rate with empty reference")
        return self.total / self.ref_len

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.sub + other.sub,
            self.dele + other.dele,
            self.ins + other.ins,
            self.ref_len + other.ref_len,
        )

    def as_dict(self) -> dict:
        return {"sub": self.sub, "del": self.dele, "ins": self.ins, "ref_len": self.ref_len}


def _encode_pair(hyp: Sequence[str], ref: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Map token strings of both sequences into one shared id space."""
    table: Dict[str, int] = {}
    for tok in itertools.chain(hyp, ref):
        if tok not in table:
            table[tok] = len(table)
    h = np.fromiter((table[t] for t in hyp), dtype=np.int64, count=len(hyp))
    r = np.fromiter((table[t] for t in ref), dtype=np.int64, count=len(ref))
    return h, r


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> EditCounts:
    """Minimal substitutions/deletions/insertions transforming ref into hyp."""
    h, r = _encode_pair(hyp, ref)
    nsub, ndel, nins = kernels.edit_counts(h, r)
    return EditCounts(nsub, ndel, nins, len(ref))


def cer(hyp: Sequence[str], ref_session: Session) -> float:
    """Error rate of hyp against the serialized reference.

    ``<sc>`` is scored like any other token, so a missed speaker change
    shows up here too.
    """
    return cer_counts(hyp, ref_session).rate


def cer_counts(hyp: Sequence[str], ref_session: Session) -> EditCounts:
    ref = serialize_sot(ref_session).tokens
    if not ref:
        raise UndefinedRateError("empty serialized reference")
    return edit_distance(hyp, list(ref))


class UdCerResult(NamedTuple):
    rate: float
    assignment: Tuple[int, ...]  # per hypothesis segment: reference channel index
    counts: EditCounts
    exact: bool


def _channel_refs(ref_session: Session) -> List[List[str]]:
    asr, _ = make_asr_and_scd_targets(ref_session)
    refs: List[List[str]] = []
    cur: List[str] = []
    prev = None
    for tok, n in zip(asr.tokens, asr.utt_index):
        if prev is not None and n != prev:
            refs.append(cur)
            cur = []
        cur.append(tok)
        prev = n
    refs.append(cur)
    return refs


def _encode_segments(
    segments: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    table: Dict[str, int] = {}

    def enc(tokens):
        ids = []
        for tok in tokens:
            if tok not in table:
                table[tok] = len(table)
            ids.append(table[tok])
        return np.asarray(ids, dtype=np.int64)

    return [enc(s) for s in segments], [enc(r) for r in refs]


def ud_cer(
    hyp_segments: Sequence[Sequence[str]],
    ref_session: Session,
    search_cap: int = DEFAULT_SEARCH_CAP,
) -> UdCerResult:
    """Optimal many-to-one assignment of hypothesis segments to reference channels.

    Segments sharing a channel are concatenated in their original order; the
    objective is the summed per-channel edit distance over the total
    reference length. Exact (branch-and-bound) when N^M <= search_cap,
    otherwise greedy plus local search with ``exact=False``.
    """
    refs = _channel_refs(ref_session)
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise UndefinedRateError("empty reference session")
    if search_cap <= 0:
        raise InvalidArgumentError("search_cap must be positive")
    segs_ids, refs_ids = _encode_segments(hyp_segments, refs)
    n_ch = len(refs_ids)
    n_seg = len(segs_ids)

    if n_seg == 0:
        counts = EditCounts(0, total_ref, 0, total_ref)
        return UdCerResult(counts.rate, (), counts, True)

    exact = n_ch**n_seg <= search_cap
    if exact:
        assignment = _assign_exact(segs_ids, refs_ids)
    else:
        assignment = _assign_greedy_local(segs_ids, refs_ids)

    counts = EditCounts(ref_len=total_ref)
    per_channel: List[List[np.ndarray]] = [[] for _ in range(n_ch)]
    for seg, ch in zip(segs_ids, assignment):
        per_channel[ch].append(seg)
    for ch, parts in enumerate(per_channel):
        concat = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        nsub, ndel, nins = kernels.edit_counts(concat, refs_ids[ch])
        counts = counts + EditCounts(nsub, ndel, nins, 0)
    return UdCerResult(counts.total / total_ref, tuple(assignment), counts, exact)


def _channel_cost(cache: dict, parts_key: Tuple[int, ...], segs, ref) -> int:
    got = cache.get(parts_key)
    if got is None:
        if parts_key:
            concat = np.concatenate([segs[i] for i in parts_key])
        else:
            concat = np.empty(0, dtype=np.int64)
        got = kernels.edit_cost(concat, ref)
        cache[parts_key] = got
    return got


def _assign_exact(segs: List[np.ndarray], refs: List[np.ndarray]) -> List[int]:
    """DFS over segment->channel assignments with a length lower bound."""
    n_seg = len(segs)
    n_ch = len(refs)
    ref_lens = [len(r) for r in refs]
    caches = [dict() for _ in range(n_ch)]

    best_cost = None
    best_assign: List[int] = []
    assign = [0] * n_seg
    ch_parts: List[List[int]] = [[] for _ in range(n_ch)]
    ch_len = [0] * n_ch

    def finish_cost() -> int:
        return sum(
            _channel_cost(caches[c], tuple(ch_parts[c]), segs, refs[c]) for c in range(n_ch)
        )

    def lower_bound() -> int:
        # channel concatenations only grow, so length excess is already an
        # insertion floor
        return sum(max(0, ch_len[c] - ref_lens[c]) for c in range(n_ch))

    def dfs(i: int) -> None:
        nonlocal best_cost, best_assign
        if best_cost is not None and lower_bound() >= best_cost:
            return
        if i == n_seg:
            cost = finish_cost()
            if best_cost is None or cost < best_cost:
                best_cost = cost
                best_assign = assign.copy()
            return
        for c in range(n_ch):
            assign[i] = c
            ch_parts[c].append(i)
            ch_len[c] += len(segs[i])
            dfs(i + 1)
            ch_parts[c].pop()
            ch_len[c] -= len(segs[i])

    dfs(0)
    return best_assign


def _assign_greedy_local(segs: List[np.ndarray], refs: List[np.ndarray]) -> List[int]:
    """Greedy prefix placement then single-segment moves until no improvement."""
    n_seg = len(segs)
    n_ch = len(refs)

    def cost_of(assign: Sequence[int]) -> int:
        # segments beyond len(assign) are treated as not yet emitted
        parts: List[List[np.ndarray]] = [[] for _ in range(n_ch)]
        for s, c in enumerate(assign):
            parts[c].append(segs[s])
        cost = 0
        for c in range(n_ch):
            concat = np.concatenate(parts[c]) if parts[c] else np.empty(0, dtype=np.int64)
            cost += kernels.edit_cost(concat, refs[c])
        return cost

    assign: List[int] = []
    for i in range(n_seg):
        best_c, best_cost = 0, None
        for c in range(n_ch):
            cost = cost_of(assign + [c])
            if best_cost is None or cost < best_cost:
                best_c, best_cost = c, cost
        assign.append(best_c)

    improved = True
    cur_cost = cost_of(assign)
    while improved:
        improved = False
        for i in range(n_seg):
            for c in range(n_ch):
                if c == assign[i]:
                    continue
                old = assign[i]
                assign[i] = c
                cost = cost_of(assign)
                if cost < cur_cost:
                    cur_cost = cost
                    improved = True
                else:
                    assign[i] = old
    return assign


def ud_cer_oracle(hyp_segments: Sequence[Sequence[str]], ref_session: Session) -> float:
    """Plain exhaustive enumeration of channel assignments (test oracle).

    Deliberately naive: itertools.product over assignments and a local
    two-row Levenshtein, sharing nothing with ud_cer's search.
    """
    refs = _channel_refs(ref_session)
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise UndefinedRateError("empty reference session")
    n_ch = len(refs)
    n_seg = len(hyp_segments)
    if n_ch**n_seg > 10**6:
        raise InvalidArgumentError("instance too large for the enumeration oracle")

    def lev(a: Sequence[str], b: Sequence[str]) -> int:
        prev = list(range(len(b) + 1))
        for i, x in enumerate(a, 1):
            cur = [i]
            for j, y in enumerate(b, 1):
                cur.append(min(prev[j - 1] + (x != y), prev[j] + 1, cur[-1] + 1))
            prev = cur
        return prev[-1]

    best = None
    for assign in itertools.product(range(n_ch), repeat=n_seg):
        cost = 0
        for c in range(n_ch):
            concat: List[str] = []
            for s, ch in enumerate(assign):
                if ch == c:
                    concat.extend(hyp_segments[s])
            cost += lev(concat, refs[c])
        if best is None or cost < best:
            best = cost
    if best is None:  # no segments: everything is deleted
        best = total_ref
    return best / total_ref


def sot_permuted_cer(
    hyp: Sequence[str], ref_session: Session, max_perm_n: int = 8
) -> float:
    """Best CER over all orderings of the reference utterances.

    The hypothesis is scored with ``<sc>`` removed against each permuted
    concatenation of the per-utterance references.
    """
    refs = _channel_refs(ref_session)
    if len(refs) > max_perm_n:
        raise InvalidArgumentError(
            f"{len(refs)} utterances exceed the permutation cap {max_perm_n}"
        )
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise UndefinedRateError("empty reference session")
    hyp_clean = [t for t in hyp if t != SC]
    segs_ids, refs_ids = _encode_segments([hyp_clean], refs)
    h = segs_ids[0]
    best = None
    for perm in itertools.permutations(range(len(refs_ids))):
        concat = (
            np.concatenate([refs_ids[i] for i in perm])
            if refs_ids
            else np.empty(0, dtype=np.int64)
        )
        cost = kernels.edit_cost(h, concat)
        if best is None or cost < best:
            best = cost
    return best / total_ref


def scd_metrics(pred_flags: Sequence[int], ref_flags: Sequence[int]) -> Dict[str, float]:
    """Position-wise precision/recall/F1 of flag = 1."""
    if len(pred_flags) != len(ref_flags):
        raise InvalidArgumentError("flag sequences must have equal length")
    tp = sum(1 for p, r in zip(pred_flags, ref_flags) if p == 1 and r == 1)
    fp = sum(1 for p, r in zip(pred_flags, ref_flags) if p == 1 and r == 0)
    fn = sum(1 for p, r in zip(pred_flags, ref_flags) if p == 0 and r == 1)
    return _prf(tp, fp, fn)


def _prf(tp: int, fp: int, fn: int) -> Dict[str, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def boundary_confusion(
    hyp_tokens: Sequence[str],
    hyp_flags: Sequence[int],
    ref_tokens: Sequence[str],
    ref_flags: Sequence[int],
) -> Tuple[int, int, int]:
    """(tp, fp, fn) of boundary flags after aligning hyp to ref tokens.

    Decoded hypotheses rarely match the reference length, so flags are
    compared through the Levenshtein alignment: a predicted boundary is a
    true positive iff its token aligns (match or substitution) to a
    reference token carrying a boundary.
    """
    if len(hyp_tokens) != len(hyp_flags) or len(ref_tokens) != len(ref_flags):
        raise InvalidArgumentError("tokens and flags must be parallel")
    h, r = _encode_pair(hyp_tokens, ref_tokens)
    n, m = len(h), len(r)
    d = np.empty((n + 1, m + 1), dtype=np.int64)
    d[0, :] = np.arange(m + 1)
    d[:, 0] = np.arange(n + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        cost = (r != h[i - 1]).astype(np.int64)
        base = np.empty(m + 1, dtype=np.int64)
        base[0] = i
        base[1:] = np.minimum(d[i - 1, :-1] + cost, d[i - 1, 1:] + 1)
        d[i] = np.minimum.accumulate(base - cols) + cols
    # backtrace mirrors edit_counts: sub > del > ins
    pairs = []  # (hyp index, ref index) for aligned positions
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (h[i - 1] != r[j - 1]):
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            j -= 1
        else:
            i -= 1
    tp = sum(1 for ih, jr in pairs if hyp_flags[ih] == 1 and ref_flags[jr] == 1)
    fp = sum(hyp_flags) - tp
    fn = sum(ref_flags) - tp
    return tp, fp, fn


def aligned_boundary_metrics(
    hyp_tokens: Sequence[str],
    hyp_flags: Sequence[int],
    ref_tokens: Sequence[str],
    ref_flags: Sequence[int],
) -> Dict[str, float]:
    tp, fp, fn = boundary_confusion(hyp_tokens, hyp_flags, ref_tokens, ref_flags)
    return _prf(tp, fp, fn)


def flags_from_sot_tokens(tokens: Sequence[str]) -> Tuple[List[str], List[int]]:
    """Inverse of <sc> insertion: content tokens plus boundary flags.

    A boundary lands on the token preceding each ``<sc>``; leading or
    doubled separators carry no position and are dropped.
    """
    out_tokens: List[str] = []
    out_flags: List[int] = []
    for tok in tokens:
        if tok == SC:
            if out_tokens:
                out_flags[-1] = 1
        else:
            out_tokens.append(tok)
            out_flags.append(0)
    if out_flags:
        out_flags[-1] = 0  # trailing boundary has no following utterance
    return out_tokens, out_flags


@dataclass
class ScoreReport:
    """CER / UD-CER / SCD bundle for one session or a whole corpus."""

    cer: Optional[float] = None
    ud_cer: Optional[float] = None
    counts: Dict[str, EditCounts] = field(default_factory=dict)
    assignment: Optional[Tuple[int, ...]] = None
    ud_cer_exact: Optional[bool] = None
    scd: Optional[Dict[str, float]] = None

    def as_dict(self) -> dict:
        d: dict = {}
        if self.cer is not None:
            d["cer"] = self.cer
        if self.ud_cer is not None:
            d["ud_cer"] = self.ud_cer
            d["ud_cer_exact"] = self.ud_cer_exact
        if self.assignment is not None:
            d["assignment"] = list(self.assignment)
        if self.counts:
            d["counts"] = {k: v.as_dict() for k, v in self.counts.items()}
        if self.scd is not None:
            d["scd"] = self.scd
        return d
