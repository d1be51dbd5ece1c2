"""Data model for time-stamped multi-speaker transcripts and attention maps.

Times are integer milliseconds everywhere; encoder frames are derived via
:func:`ms_to_frame` and never stored. All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError

SC = "<sc>"
SEP = "<sep>"
EOS = "<eos>"
BLANK = "<blank>"
RESERVED_TOKENS = (SC, SEP, EOS, BLANK)

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class TimedToken:
    """A transcript symbol with its emission time in ms."""

    text: str
    emit_ms: int


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    start_ms: int
    end_ms: int
    tokens: Tuple[TimedToken, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def texts(self) -> List[str]:
        return [t.text for t in self.tokens]


def fifo_key(u: Utterance) -> Tuple[int, str]:
    """First-in-first-out sort key: start time, speaker id breaks ties."""
    return (u.start_ms, u.speaker_id)


@dataclass(frozen=True)
class Session:
    """One recording: speaker-attributed utterances in FIFO order."""

    id: str
    utterances: Tuple[Utterance, ...]
    frame_shift_ms: int = 8

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))

    def __len__(self) -> int:
        return len(self.utterances)


def validate_session(s: Session) -> List[str]:
    """Return a human-readable violation per broken invariant (empty = valid)."""
    violations: List[str] = []
    if s.frame_shift_ms <= 0:
        violations.append("session: frame_shift_ms must be positive")
    if not s.utterances:
        violations.append("session: no utterances")
    for i, u in enumerate(s.utterances):
        if u.end_ms < u.start_ms:
            violations.append(f"utt {i}: end before start")
        if not u.tokens:
            violations.append(f"utt {i}: no tokens")
        prev_emit = None
        for k, tok in enumerate(u.tokens):
            if tok.text in RESERVED_TOKENS:
                violations.append(f"utt {i} token {k}: reserved token {tok.text!r}")
            elif not tok.text or any(c.isspace() for c in tok.text):
                violations.append(f"utt {i} token {k}: empty or whitespace in text")
            if tok.emit_ms < 0:
                violations.append(f"utt {i} token {k}: negative emit_ms")
            if not (u.start_ms <= tok.emit_ms <= u.end_ms):
                violations.append(f"utt {i} token {k}: emit_ms outside utterance span")
            if prev_emit is not None and tok.emit_ms < prev_emit:
                violations.append(f"utt {i} token {k}: emit_ms decreases")
            prev_emit = tok.emit_ms
    for i in range(1, len(s.utterances)):
        if fifo_key(s.utterances[i - 1]) > fifo_key(s.utterances[i]):
            violations.append(f"session: utterances out of FIFO order at index {i}")
    return violations


def ms_to_frame(t_ms: int, frame_shift_ms: int, subsample: int) -> int:
    """Map a time in ms to an encoder frame index (floor semantics)."""
    if frame_shift_ms * subsample <= 0:
        raise InvalidArgumentError("frame_shift_ms * subsample must be positive")
    if t_ms < 0:
        raise InvalidArgumentError("t_ms must be non-negative")
    return t_ms // (frame_shift_ms * subsample)


def overlap_ratio(s: Session) -> float:
    """Fraction of speech time covered by two or more utterance spans.

    Ratio of ms covered by >=2 spans to ms covered by >=1 span; 0.0 for a
    single utterance or when nothing is covered.
    """
    if not s.utterances:
        raise InvalidArgumentError("overlap_ratio of an empty session")
    events = []
    for u in s.utterances:
        events.append((u.start_ms, +1))
        events.append((u.end_ms, -1))
    events.sort()
    covered = 0
    overlapped = 0
    depth = 0
    prev = events[0][0]
    for t, d in events:
        if t > prev:
            if depth >= 1:
                covered += t - prev
            if depth >= 2:
                overlapped += t - prev
            prev = t
        depth += d
    if covered == 0:
        return 0.0
    return overlapped / covered


class AttentionMap:
    """Row-stochastic decoder-position x encoder-frame score matrix.

    Row r holds the cross-attention scores of the r-th produced token;
    ``pos_to_utt[r] = (n, k)`` identifies it as token k of utterance n
    (both 0-based).
    """

    __slots__ = ("scores", "pos_to_utt")

    def __init__(self, scores: np.ndarray, pos_to_utt: Sequence[Tuple[int, int]]):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[1] < 1:
            raise InvalidArgumentError("scores must be a [K][T] matrix with T >= 1")
        if len(pos_to_utt) != scores.shape[0]:
            raise InvalidArgumentError("pos_to_utt length must match row count")
        if np.any(scores < -1e-9) or np.any(scores > 1 + 1e-9):
            raise InvalidArgumentError("attention scores must lie in [0, 1]")
        row_sums = scores.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            worst = int(np.argmax(np.abs(row_sums - 1.0)))
            raise InvalidArgumentError(
                f"attention row {worst} sums to {row_sums[worst]:.8f}, not 1"
            )
        scores = scores.copy()
        scores.setflags(write=False)
        self.scores = scores
        self.pos_to_utt = tuple((int(n), int(k)) for n, k in pos_to_utt)

    @property
    def num_positions(self) -> int:
        return self.scores.shape[0]

    @property
    def num_frames(self) -> int:
        return self.scores.shape[1]

    @property
    def num_utterances(self) -> int:
        return len({n for n, _ in self.pos_to_utt})

    def row_of(self, n: int, k: int) -> int:
        """Row index of token k of utterance n."""
        try:
            return self.pos_to_utt.index((n, k))
        except ValueError:
            raise InvalidArgumentError(f"no decoder position for utt {n} token {k}") from None


# ---------------------------------------------------------------------------
# Session JSONL (one object per line)

def session_to_dict(s: Session) -> dict:
    return {
        "id": s.id,
        "frame_shift_ms": s.frame_shift_ms,
        "utterances": [
            {
                "speaker": u.speaker_id,
                "start_ms": u.start_ms,
                "end_ms": u.end_ms,
                "tokens": [{"text": t.text, "emit_ms": t.emit_ms} for t in u.tokens],
            }
            for u in s.utterances
        ],
    }


def session_from_dict(d: dict) -> Session:
    try:
        utts = tuple(
            Utterance(
                speaker_id=u["speaker"],
                start_ms=int(u["start_ms"]),
                end_ms=int(u["end_ms"]),
                tokens=tuple(TimedToken(t["text"], int(t["emit_ms"])) for t in u["tokens"]),
            )
            for u in d["utterances"]
        )
        return Session(id=d["id"], utterances=utts, frame_shift_ms=int(d.get("frame_shift_ms", 8)))
    except (KeyError, TypeError) as e:
        raise InvalidArgumentError(f"malformed session object: {e}") from e


def save_sessions(sessions: Iterable[Session], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sessions:
            f.write(json.dumps(session_to_dict(s), ensure_ascii=False) + "\n")


def load_sessions(path) -> List[Session]:
    sessions = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidArgumentError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            sessions.append(session_from_dict(d))
    return sessions
