"""Synthetic overlapped-speech corpus with oracle times.

Each symbol gets a fixed random feature template; a session lays out
per-speaker utterance chains, offsets the chains to hit a target overlap
ratio, and rendering sums the active templates into a feature matrix plus
seeded noise. Because mixing is additive, overlapped regions are genuinely
ambiguous. Generation is a pure function of (spec, index).
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .losses import UttSpanFrames
from .transcripts import (
    Session,
    TimedToken,
    Utterance,
    fifo_key,
    ms_to_frame,
    overlap_ratio,
    validate_session,
)

MIN_UTT_TOKENS = 2
MAX_UTT_TOKENS = 8
OVERLAP_TOL = 0.1
MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 16
    template_frames: int = 8
    feature_dim: int = 16
    speakers: int = 2
    utterances_per_speaker: int = 2
    overlap: float = 0.3
    noise_std: float = 0.1
    seed: int = 0
    frame_shift_ms: int = 8

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be >= 2")
        if self.template_frames < 1:
            raise InvalidArgumentError("template_frames must be >= 1")
        if not (0 <= self.overlap < 1):
            raise InvalidArgumentError("overlap target must lie in [0, 1)")
        for f in ("feature_dim", "speakers", "utterances_per_speaker", "frame_shift_ms"):
            if int(getattr(self, f)) <= 0:
                raise InvalidArgumentError(f"{f} must be positive")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std must be >= 0")

    def symbols(self) -> List[str]:
        return [f"w{i:02d}" for i in range(self.vocab_size)]

    @property
    def token_ms(self) -> int:
        # one token occupies one template: f frames
        return self.template_frames * self.frame_shift_ms


def spec_from_dict(d: dict) -> SynthSpec:
    known = set(SynthSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise InvalidArgumentError(f"unknown synth spec fields: {sorted(unknown)}")
    return SynthSpec(**d)


def load_spec(path) -> SynthSpec:
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}: malformed JSON: {e}") from e
    return spec_from_dict(d)


def make_templates(spec: SynthSpec) -> Dict[str, np.ndarray]:
    """One [template_frames][feature_dim] unit-variance template per symbol."""
    rng = np.random.default_rng([spec.seed, 1])
    templates = {
        sym: rng.standard_normal((spec.template_frames, spec.feature_dim))
        for sym in spec.symbols()
    }
    syms = list(templates)
    for i, a in enumerate(syms):
        for b in syms[i + 1 :]:
            if float(np.linalg.norm(templates[a] - templates[b])) <= 0.0:
                raise InvalidArgumentError(f"templates for {a} and {b} collide")
    return templates


def _speaker_chain(rng: np.random.Generator, spec: SynthSpec) -> List[Tuple[int, List[str]]]:
    """Relative (start_ms, texts) chain for one speaker, gaps >= 2 templates."""
    syms = spec.symbols()
    chain = []
    t = 0
    for _ in range(spec.utterances_per_speaker):
        n_tok = int(rng.integers(MIN_UTT_TOKENS, MAX_UTT_TOKENS + 1))
        texts = [syms[int(rng.integers(0, len(syms)))] for _ in range(n_tok)]
        chain.append((t, texts))
        dur = n_tok * spec.token_ms
        gap = (2 + int(rng.integers(0, 3))) * spec.token_ms
        t += dur + gap
    return chain


def _materialize(
    chains: Sequence[Sequence[Tuple[int, List[str]]]], offsets: Sequence[int], spec: SynthSpec
) -> List[Utterance]:
    utts = []
    for sp, (chain, off) in enumerate(zip(chains, offsets)):
        for start_rel, texts in chain:
            start = off + start_rel
            tokens = tuple(
                TimedToken(tx, start + k * spec.token_ms) for k, tx in enumerate(texts)
            )
            utts.append(
                Utterance(f"spk{sp}", start, start + len(texts) * spec.token_ms, tokens)
            )
    return sorted(utts, key=fifo_key)


def gen_session(spec: SynthSpec, index: int) -> Session:
    """Deterministic session #index: chains per speaker, offsets sampled to
    land overlap_ratio within the target band (closest of 100 tries wins)."""
    rng = np.random.default_rng([spec.seed, 2, index])
    chains = [_speaker_chain(rng, spec) for _ in range(spec.speakers)]
    lead = 2 * spec.token_ms
    span0 = chains[0][-1][0] + len(chains[0][-1][1]) * spec.token_ms

    def build(offsets) -> Session:
        return Session(
            id=f"syn{index:06d}",
            utterances=tuple(_materialize(chains, offsets, spec)),
            frame_shift_ms=spec.frame_shift_ms,
        )

    if spec.speakers == 1:
        best = build([lead])
    else:
        best = None
        best_gap = None
        for _ in range(MAX_PLACEMENT_TRIES):
            offsets = [lead] + [
                lead + int(rng.integers(0, max(1, span0))) for _ in range(spec.speakers - 1)
            ]
            cand = build(offsets)
            gap = abs(overlap_ratio(cand) - spec.overlap)
            if best is None or gap < best_gap:
                best, best_gap = cand, gap
            if gap <= OVERLAP_TOL:
                break
    problems = validate_session(best)
    if problems:
        raise InvalidArgumentError(f"generated session invalid: {problems}")
    return best


def render(
    session: Session,
    templates: Dict[str, np.ndarray],
    spec: SynthSpec,
    subsample: int = 4,
) -> Tuple[np.ndarray, UttSpanFrames, List[List[int]]]:
    """Sum token templates at their emission frames plus seeded noise.

    Returns (features [T0][d], per-utterance encoder-frame spans, and the
    encoder-frame stamp of every token), spans/stamps downsampled by
    `subsample` to match the encoder's frame rate.
    """
    fs = session.frame_shift_ms
    f = spec.template_frames
    max_end = max(u.end_ms for u in session.utterances)
    T0 = max_end // fs + 2 * f
    feats = np.zeros((T0, spec.feature_dim))
    for u in session.utterances:
        for tok in u.tokens:
            if tok.text not in templates:
                raise InvalidArgumentError(f"no template for token {tok.text!r}")
            r0 = tok.emit_ms // fs
            block = templates[tok.text][: T0 - r0]
            feats[r0 : r0 + block.shape[0]] += block
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, 3, zlib.crc32(session.id.encode())])
        feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
    spans = []
    stamps = []
    for u in session.utterances:
        a = ms_to_frame(u.start_ms, fs, subsample)
        b = ms_to_frame(max(u.start_ms, u.end_ms - 1), fs, subsample)
        spans.append((a, b))
        stamps.append([ms_to_frame(t.emit_ms, fs, subsample) for t in u.tokens])
    return feats, UttSpanFrames(tuple(spans)), stamps


# ---------------------------------------------------------------------------
# Corpus directory: sessions.jsonl + features/<id>.bin (+ .json sidecar)

def write_features(dir_path, session_id: str, feats: np.ndarray) -> None:
    os.makedirs(dir_path, exist_ok=True)
    bin_path = os.path.join(dir_path, f"{session_id}.bin")
    with open(bin_path, "wb") as f:
        f.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
    sidecar = {"shape": list(feats.shape), "dtype": "<f8", "order": "C"}
    with open(os.path.join(dir_path, f"{session_id}.json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f)


def read_features(dir_path, session_id: str) -> np.ndarray:
    side_path = os.path.join(dir_path, f"{session_id}.json")
    try:
        with open(side_path, encoding="utf-8") as f:
            side = json.load(f)
    except FileNotFoundError:
        raise InvalidArgumentError(f"missing feature sidecar {side_path}") from None
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{side_path}: malformed JSON: {e}") from e
    shape = tuple(side["shape"])
    with open(os.path.join(dir_path, f"{session_id}.bin"), "rb") as f:
        raw = f.read()
    expect = int(np.prod(shape)) * 8
    if len(raw) != expect:
        raise InvalidArgumentError(
            f"{session_id}.bin holds {len(raw)} bytes, sidecar shape needs {expect}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
