"""Serialization of sessions into training targets and back.

Four target kinds are produced from one :class:`~basot.transcripts.Session`:

* ``sot``   - utterance transcripts in FIFO order, ``<sc>`` between utterances
* ``tsot``  - all tokens by emission time, ``<sep>`` at speaker switches
* ``asr``   - the SOT token stream with ``<sc>`` removed
* ``scd``   - per-ASR-token {0,1} flags, 1 at the last token of each
  non-final utterance

The final utterance's end is not flagged; end-of-sequence is the decoder's
job, which keeps the flag count equal to the ``<sc>`` count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .errors import InvalidArgumentError
from .transcripts import SC, SEP, Session, fifo_key

KINDS = ("sot", "tsot", "asr", "scd")


@dataclass(frozen=True)
class SerializedTarget:
    """A token/flag sequence of one of the four target kinds.

    ``utt_index[i]`` is the FIFO utterance index the i-th token came from,
    or None for separator tokens.
    """

    kind: str
    tokens: Tuple[str, ...]
    utt_index: Tuple[Optional[int], ...]
    flags: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown target kind {self.kind!r}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "utt_index", tuple(self.utt_index))
        if self.flags is not None:
            object.__setattr__(self, "flags", tuple(self.flags))


def _fifo_utterances(s: Session):
    if not s.utterances:
        raise InvalidArgumentError(f"session {s.id!r} has no utterances")
    return sorted(s.utterances, key=fifo_key)


def serialize_sot(s: Session) -> SerializedTarget:
    """Concatenate utterances in FIFO order with ``<sc>`` between them."""
    utts = _fifo_utterances(s)
    tokens: List[str] = []
    utt_index: List[Optional[int]] = []
    for n, u in enumerate(utts):
        if n > 0:
            tokens.append(SC)
            utt_index.append(None)
        tokens.extend(t.text for t in u.tokens)
        utt_index.extend([n] * len(u.tokens))
    return SerializedTarget("sot", tuple(tokens), tuple(utt_index))


def serialize_tsot(s: Session) -> SerializedTarget:
    """Sort all tokens by emission time; ``<sep>`` where the speaker switches.

    Ties are broken by utterance FIFO order, then within-utterance order,
    so the sort is a stable function of the session.
    """
    utts = _fifo_utterances(s)
    entries = []  # (emit_ms, fifo n, within-utt k, text, speaker)
    for n, u in enumerate(utts):
        for k, t in enumerate(u.tokens):
            entries.append((t.emit_ms, n, k, t.text, u.speaker_id))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    tokens: List[str] = []
    utt_index: List[Optional[int]] = []
    prev_speaker = None
    for emit, n, k, text, speaker in entries:
        if prev_speaker is not None and speaker != prev_speaker:
            tokens.append(SEP)
            utt_index.append(None)
        tokens.append(text)
        utt_index.append(n)
        prev_speaker = speaker
    return SerializedTarget("tsot", tuple(tokens), tuple(utt_index))


def make_asr_and_scd_targets(s: Session) -> Tuple[SerializedTarget, SerializedTarget]:
    """ASR target = SOT minus ``<sc>``; SCD flags mark non-final utterance ends."""
    utts = _fifo_utterances(s)
    tokens: List[str] = []
    utt_index: List[int] = []
    flags: List[int] = []
    last = len(utts) - 1
    for n, u in enumerate(utts):
        for k, t in enumerate(u.tokens):
            tokens.append(t.text)
            utt_index.append(n)
            flags.append(1 if (k == len(u.tokens) - 1 and n != last) else 0)
    asr = SerializedTarget("asr", tuple(tokens), tuple(utt_index))
    scd = SerializedTarget("scd", tuple(tokens), tuple(utt_index), tuple(flags))
    return asr, scd


def strip_separators(t: SerializedTarget) -> List[str]:
    """Drop ``<sc>``/``<sep>`` tokens, preserving order."""
    if t.kind not in ("sot", "tsot"):
        raise InvalidArgumentError(f"strip_separators expects sot/tsot, got {t.kind!r}")
    return [tok for tok in t.tokens if tok not in (SC, SEP)]


def parse_sot_hypothesis(tokens: Sequence[str]) -> List[List[str]]:
    """Split a decoded token stream on ``<sc>``; empty segments are dropped."""
    segments: List[List[str]] = []
    current: List[str] = []
    for tok in tokens:
        if tok == SC:
            if current:
                segments.append(current)
            current = []
        else:
            current.append(tok)
    if current:
        segments.append(current)
    return segments


# ---------------------------------------------------------------------------
# Hypothesis/target text file: one record per line, "utt_id<TAB>tok tok ..."

def write_trn(entries: Sequence[Tuple[str, Sequence[str]]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, tokens in entries:
            f.write(f"{utt_id}\t{' '.join(tokens)}\n")


def read_trn(path) -> List[Tuple[str, List[str]]]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise InvalidArgumentError(f"{path}: missing tab on line {lineno}")
            utt_id, text = line.split("\t", 1)
            entries.append((utt_id, text.split()))
    return entries
