import numpy as np
import pytest

from basot.serialize import (
    make_asr_and_scd_targets,
    parse_sot_hypothesis,
    read_trn,
    serialize_sot,
    serialize_tsot,
    strip_separators,
    write_trn,
)
from basot.transcripts import SC, SEP, Session, TimedToken, Utterance
from util import random_session


def make_utt(spk, start, end, emits, texts):
    return Utterance(spk, start, end, tuple(TimedToken(x, e) for x, e in zip(texts, emits)))


@pytest.fixture
def overlapped():
    # spk1 starts mid-way through spk0, tokens interleave in emission time
    return Session(
        "ov",
        (
            make_utt("spk0", 0, 300, [10, 150, 290], ["a0", "a1", "a2"]),
            make_utt("spk1", 100, 400, [120, 200], ["b0", "b1"]),
        ),
    )


class TestSot:
    def test_fifo_concatenation(self, overlapped):
        t = serialize_sot(overlapped)
        assert list(t.tokens) == ["a0", "a1", "a2", SC, "b0", "b1"]
        assert t.kind == "sot"

    def test_utt_index_marks_separators_none(self, overlapped):
        t = serialize_sot(overlapped)
        assert list(t.utt_index) == [0, 0, 0, None, 1, 1]

    def test_single_utterance_has_no_sc(self):
        s = Session("x", (make_utt("a", 0, 100, [10], ["w"]),))
        assert list(serialize_sot(s).tokens) == ["w"]

    def test_sorting_ignores_input_order(self):
        # stored order reversed on purpose: serialize sorts by FIFO key itself
        u1 = make_utt("a", 0, 100, [10, 20], ["x0", "x1"])
        u2 = make_utt("b", 50, 200, [60], ["y0"])
        t = serialize_sot(Session("x", (u2, u1)))
        assert list(t.tokens) == ["x0", "x1", SC, "y0"]


class TestTsot:
    def test_tokens_ordered_by_emission(self, overlapped):
        t = serialize_tsot(overlapped)
        texts = [x for x in t.tokens if x != SEP]
        assert texts == ["a0", "b0", "a1", "b1", "a2"]

    def test_sep_on_every_stream_switch(self, overlapped):
        t = serialize_tsot(overlapped)
        assert list(t.tokens) == [
            "a0", SEP, "b0", SEP, "a1", SEP, "b1", SEP, "a2",
        ]

    def test_no_sep_for_single_stream(self):
        s = Session("x", (make_utt("a", 0, 100, [10, 50], ["w0", "w1"]),))
        assert list(serialize_tsot(s).tokens) == ["w0", "w1"]

    def test_no_sep_between_same_speaker_utterances(self):
        s = Session(
            "x",
            (
                make_utt("a", 0, 100, [10], ["w0"]),
                make_utt("a", 200, 300, [250], ["w1"]),
            ),
        )
        assert list(serialize_tsot(s).tokens) == ["w0", "w1"]

    def test_emission_tie_broken_by_fifo_rank(self):
        s = Session(
            "x",
            (
                make_utt("a", 0, 100, [50], ["first"]),
                make_utt("b", 10, 100, [50], ["second"]),
            ),
        )
        t = serialize_tsot(s)
        texts = [x for x in t.tokens if x != SEP]
        assert texts == ["first", "second"]


class TestAsrScd:
    def test_asr_is_sot_without_sc(self, overlapped):
        asr, _ = make_asr_and_scd_targets(overlapped)
        assert list(asr.tokens) == ["a0", "a1", "a2", "b0", "b1"]

    def test_flags_mark_last_token_of_non_final_utts(self, overlapped):
        _, scd = make_asr_and_scd_targets(overlapped)
        assert list(scd.flags) == [0, 0, 1, 0, 0]

    def test_single_utterance_all_zero(self):
        s = Session("x", (make_utt("a", 0, 100, [10, 20], ["w0", "w1"]),))
        _, scd = make_asr_and_scd_targets(s)
        assert list(scd.flags) == [0, 0]

    def test_flag_count_is_sc_count(self):
        rng = np.random.default_rng(11)
        for i in range(100):
            s = random_session(rng, session_id=f"f{i}")
            sot = serialize_sot(s)
            _, scd = make_asr_and_scd_targets(s)
            assert sum(scd.flags) == sum(1 for t in sot.tokens if t == SC)


class TestStripParse:
    def test_strip_sot_equals_asr(self, overlapped):
        asr, _ = make_asr_and_scd_targets(overlapped)
        assert strip_separators(serialize_sot(overlapped)) == list(asr.tokens)

    def test_strip_tsot_removes_sep(self, overlapped):
        assert SEP not in strip_separators(serialize_tsot(overlapped))

    def test_parse_round_trip(self, overlapped):
        segs = parse_sot_hypothesis(serialize_sot(overlapped).tokens)
        assert segs == [["a0", "a1", "a2"], ["b0", "b1"]]

    def test_parse_drops_empty_segments(self):
        assert parse_sot_hypothesis([SC, "a", SC, SC, "b", SC]) == [["a"], ["b"]]

    def test_parse_empty(self):
        assert parse_sot_hypothesis([]) == []


class TestTrnFiles:
    def test_round_trip(self, tmp_path):
        entries = [("utt1", ["a", "b"]), ("utt2", [SC]), ("utt3", [])]
        path = tmp_path / "x.trn"
        write_trn(entries, path)
        assert read_trn(path) == [(u, list(t)) for u, t in entries]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.trn"
        write_trn([], path)
        assert read_trn(path) == []


class TestProperties:
    """Bulk invariants over random sessions."""

    N = 300

    def test_bulk_invariants(self):
        rng = np.random.default_rng(2024)
        for i in range(self.N):
            s = random_session(rng, session_id=f"p{i}")
            sot = serialize_sot(s)
            asr, scd = make_asr_and_scd_targets(s)
            n = len(s.utterances)
            assert sum(1 for t in sot.tokens if t == SC) == n - 1
            assert strip_separators(sot) == list(asr.tokens)
            assert len(scd.flags) == len(asr.tokens)
            # parse(serialize) recovers per-utterance token lists in FIFO order
            segs = parse_sot_hypothesis(sot.tokens)
            fifo = sorted(s.utterances, key=lambda u: (u.start_ms, u.speaker_id))
            assert segs == [u.texts() for u in fifo]
            # t-SOT stream carries exactly the same multiset of texts
            tsot = serialize_tsot(s)
            assert sorted(strip_separators(tsot)) == sorted(asr.tokens)
