"""Greedy autoregressive decoding and output reformatting."""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from ..losses import sigmoid
from ..transcripts import SC, AttentionMap
from .network import Model


def greedy_decode(
    model: Model, features: np.ndarray, max_len: int
) -> Tuple[List[str], List[int], Dict[str, AttentionMap]]:
    """Argmax decoding until "<eos>" or max_len tokens.

    Returns (token texts, speaker-change flags, monitored cross-attention
    maps over the produced positions). Flags come from the change branch
    (sigmoid(logit) > 0.5); the ablation model has no branch, so its flags
    are all zero and any "<sc>" it emits stays in the token stream.
    """
    if max_len < 0:
        raise InvalidArgumentError("max_len must be >= 0")
    if max_len == 0:
        return [], [], {}
    vocab = model.vocab
    ids: List[int] = []
    for _ in range(max_len):
        dec_input = np.asarray([vocab.eos_id] + ids, dtype=np.int64)
        g = model.build_graph(features, dec_input)
        nxt = int(np.argmax(g.asr_logits.data[-1]))
        if nxt == vocab.eos_id:
            break
        ids.append(nxt)
    if not ids:
        return [], [], {}

    # one clean pass over the final sequence for flags and attention
    dec_input = np.asarray([vocab.eos_id] + ids, dtype=np.int64)
    g = model.build_graph(features, dec_input)
    if g.scd_logits is None:
        flags = [0] * len(ids)
    else:
        flags = [int(v > 0.5) for v in sigmoid(g.scd_logits.data[: len(ids)])]
    tokens = vocab.decode(ids)
    pos_to_utt = _decoded_pos_to_utt(tokens, flags)
    maps = {
        site: AttentionMap(t.data[: len(ids)], pos_to_utt) for site, t in g.attn.items()
    }
    return tokens, flags, maps


def _decoded_pos_to_utt(tokens: Sequence[str], flags: Sequence[int]) -> Tuple[Tuple[int, int], ...]:
    """Utterance attribution of decoded positions: a flag (or an inline
    "<sc>") closes the current utterance after its position."""
    out: List[Tuple[int, int]] = []
    n = k = 0
    for tok, f in zip(tokens, flags):
        out.append((n, k))
        if f == 1 or tok == SC:
            n += 1
            k = 0
        else:
            k += 1
    return tuple(out)


def reformat_to_sot(tokens: Sequence[str], flags: Sequence[int]) -> List[str]:
    """Insert "<sc>" after each flagged position; a flag on the final
    position is ignored (no trailing separator)."""
    if len(tokens) != len(flags):
        raise InvalidArgumentError("tokens and flags must have equal length")
    out: List[str] = []
    last = len(tokens) - 1
    for i, (tok, f) in enumerate(zip(tokens, flags)):
        out.append(tok)
        if f == 1 and i != last:
            out.append(SC)
    return out
