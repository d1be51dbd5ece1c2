"""Shared random-instance generators for the test suite."""

import numpy as np

from basot.transcripts import (
    AttentionMap,
    Session,
    TimedToken,
    Utterance,
    fifo_key,
    validate_session,
)


def random_session(
    rng: np.random.Generator,
    max_speakers: int = 3,
    max_utts_per_speaker: int = 2,
    max_tokens: int = 5,
    vocab: int = 5,
    session_id: str = "rnd",
) -> Session:
    """A random session that satisfies every documented invariant."""
    n_spk = int(rng.integers(1, max_speakers + 1))
    utts = []
    for sp in range(n_spk):
        cursor = int(rng.integers(0, 400))
        for _ in range(int(rng.integers(1, max_utts_per_speaker + 1))):
            n_tok = int(rng.integers(1, max_tokens + 1))
            emits = np.sort(rng.integers(0, 300, size=n_tok)) + cursor
            start = int(emits[0] - rng.integers(0, 20))
            end = int(emits[-1] + rng.integers(1, 40))
            tokens = tuple(
                TimedToken(f"w{int(rng.integers(0, vocab)):02d}", int(e)) for e in emits
            )
            utts.append(Utterance(f"spk{sp}", max(0, start), end, tokens))
            cursor = end + int(rng.integers(1, 60))
    utts.sort(key=fifo_key)
    s = Session(session_id, tuple(utts))
    assert validate_session(s) == [], validate_session(s)
    return s


def random_attention_map(
    rng: np.random.Generator,
    n_utts: int,
    tokens_per_utt: int,
    num_frames: int,
    margin: float = 1e-3,
    max_tries: int = 200,
) -> AttentionMap:
    """Row-stochastic map whose per-row argmax leads by at least margin.

    The margin rules out argmax ties, so finite-difference probes of losses
    built on these maps never straddle a tie.
    """
    pos_to_utt = tuple((n, k) for n in range(n_utts) for k in range(tokens_per_utt))
    rows = len(pos_to_utt)
    for _ in range(max_tries):
        logits = rng.normal(0.0, 2.0, size=(rows, num_frames))
        scores = np.exp(logits - logits.max(axis=1, keepdims=True))
        scores /= scores.sum(axis=1, keepdims=True)
        top2 = np.sort(scores, axis=1)[:, -2:] if num_frames > 1 else None
        if num_frames == 1 or np.all(top2[:, 1] - top2[:, 0] >= margin):
            return AttentionMap(scores, pos_to_utt)
    raise AssertionError("could not draw a tie-free attention map")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
