import numpy as np
import pytest

from basot.errors import InfeasibleAlignmentError, InvalidArgumentError
from basot.losses import (
    BC_MODES,
    LogProbLattice,
    LossWeights,
    UttSpanFrames,
    attention_ce,
    attn_timestamp,
    bc_loss,
    bc_ots_loss,
    combined_loss,
    ctc_loss,
    ctc_repeats,
    scd_loss,
    sigmoid,
)
from basot.transcripts import AttentionMap
from oracles import ctc_loss_enum, fd_gradient, max_rel_err
from util import random_attention_map, softmax_rows


def lattice_from(rng, T, C):
    return LogProbLattice.from_logits(rng.normal(0.0, 1.5, size=(T, C)))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.alpha1, w.alpha2) == (0.2, 0.2, 0.2, 0.1)

    def test_ctc_weights_capped(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(lambda1=0.7, lambda2=0.4)

    def test_negative_rejected(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(alpha1=-0.1)


class TestLogProbLattice:
    def test_rows_must_normalize(self):
        bad = np.log(np.full((2, 3), 0.5))
        with pytest.raises(InvalidArgumentError):
            LogProbLattice(bad)

    def test_from_logits_normalizes(self):
        rng = np.random.default_rng(1)
        lat = lattice_from(rng, 4, 5)
        assert np.allclose(np.exp(lat.values).sum(axis=1), 1.0, atol=1e-12)
        assert lat.num_frames == 4 and lat.num_classes == 5

    def test_read_only(self):
        rng = np.random.default_rng(2)
        lat = lattice_from(rng, 3, 3)
        with pytest.raises(ValueError):
            lat.values[0, 0] = 0.0


class TestCtcLoss:
    def test_certain_lattice_zero_loss(self):
        # lattice that puts probability ~1 on blank,a,blank alignment
        logits = np.full((3, 3), -40.0)
        logits[0, 0] = logits[1, 1] = logits[2, 0] = 0.0
        lat = LogProbLattice.from_logits(logits)
        loss, _ = ctc_loss(lat, [1])
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_uniform_lattice_known_value(self):
        # T=2, C=2, target [1]: paths (1,1),(1,0),(0,1) of the 4 -> 3/4
        lat = LogProbLattice(np.log(np.full((2, 2), 0.5)))
        loss, _ = ctc_loss(lat, [1])
        assert loss == pytest.approx(-np.log(3 / 4), abs=1e-12)

    def test_infeasible_raises(self):
        rng = np.random.default_rng(3)
        lat = lattice_from(rng, 2, 4)
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lat, [1, 1])  # repeat needs a blank: needs T >= 3

    def test_repeats_counted(self):
        assert ctc_repeats([1, 1, 2, 2, 2]) == 3
        assert ctc_repeats([1, 2, 1]) == 0

    def test_bad_ids_rejected(self):
        rng = np.random.default_rng(4)
        lat = lattice_from(rng, 4, 3)
        with pytest.raises(InvalidArgumentError):
            ctc_loss(lat, [0, 1])  # blank id in target
        with pytest.raises(InvalidArgumentError):
            ctc_loss(lat, [3])  # out of range

    def test_matches_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            T = int(rng.integers(2, 7))
            C = int(rng.integers(2, 5))
            L = int(rng.integers(1, 3))
            labels = list(rng.integers(1, C, size=L))
            if T < L + ctc_repeats(labels):
                continue
            lat = lattice_from(rng, T, C)
            loss, _ = ctc_loss(lat, labels)
            assert loss == pytest.approx(ctc_loss_enum(np.asarray(lat.values), labels), abs=1e-9)


def bc_map_from_logits(logits, pos_to_utt):
    return AttentionMap(softmax_rows(logits), pos_to_utt)


class TestBcLoss:
    def test_known_half_score(self):
        # two utterances, one token each; window is [t_pre, T-1] = [argmax row0, end]
        scores = np.array([
            [0.2, 0.6, 0.2],   # utt0 token0, timestamp t=1
            [0.25, 0.5, 0.25], # utt1 token0, max in window [1,2] is 0.5
        ])
        att = AttentionMap(scores, ((0, 0), (1, 0)))
        r = bc_loss(att)
        assert r.num_terms == 1
        assert r.value == pytest.approx(np.tan(np.pi / 2 * 0.5), abs=1e-12)
        # subgradient lands only on the window argmax of the follower row
        nz = np.argwhere(r.grad != 0.0)
        assert nz.tolist() == [[1, 1]]

    def test_single_utterance_no_terms(self):
        att = random_attention_map(np.random.default_rng(6), 1, 3, 5)
        r = bc_loss(att)
        assert r.value == 0.0 and r.num_terms == 0 and not r.grad.any()

    def test_zero_mass_window(self):
        scores = np.array([
            [0.0, 0.0, 1.0],  # utt0 ends at t=2
            [1.0, 0.0, 0.0],  # utt1 has nothing at t >= 2
        ])
        att = AttentionMap(scores, ((0, 0), (1, 0)))
        assert bc_loss(att).value == pytest.approx(0.0)

    def test_clamp_keeps_value_finite(self):
        scores = np.array([
            [1.0, 0.0],
            [0.0, 1.0],  # follower mass 1.0 at window start
        ])
        att = AttentionMap(scores, ((0, 0), (1, 0)))
        r = bc_loss(att, clamp_eps=1e-3)
        assert np.isfinite(r.value)
        assert r.value == pytest.approx(np.tan(np.pi / 2 * (1 - 1e-3)), rel=1e-9)

    def test_monotone_in_controlling_score(self):
        # two utterances only: the bumped follower row then never defines any
        # window start, so raising the controlling score moves one term only
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(200):
            att = random_attention_map(rng, 2, 2, 6)
            base = bc_loss(att)
            if base.num_terms == 0 or not base.grad.any():
                continue
            row, col = map(int, np.argwhere(base.grad != 0.0)[0])
            s = att.scores.copy()
            old = s[row, col]
            new = old + 0.5 * (1.0 - old)
            if new >= 1.0 - 2e-3 or old >= 1.0 - 1e-6:
                continue
            s[row] *= (1.0 - new) / (1.0 - old)
            s[row, col] = new
            att2 = AttentionMap(s, att.pos_to_utt)
            assert bc_loss(att2).value > base.value
            checked += 1
        assert checked >= 30


class TestBcOts:
    def span_map(self):
        # 2 utts x 2 tokens, 6 frames; utt0 frames [0,2], utt1 frames [3,5]
        scores = softmax_rows(np.array([
            [4.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 4.0, 0.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 4.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0, 4.0, 0.0],
        ]))
        att = AttentionMap(scores, ((0, 0), (0, 1), (1, 0), (1, 1)))
        spans = UttSpanFrames(((0, 2), (3, 5)))
        return att, spans

    def test_modes_all_finite(self):
        att, spans = self.span_map()
        for mode in BC_MODES:
            r = bc_ots_loss(att, spans, mode=mode)
            assert np.isfinite(r.value)
            assert r.grad.shape == att.scores.shape

    def test_complement_targets_out_of_span_mass(self):
        att, spans = self.span_map()
        r = bc_ots_loss(att, spans, mode="complement")
        for row, col in np.argwhere(r.grad != 0.0):
            n, _ = att.pos_to_utt[row]
            a, b = spans[n]
            assert not (a <= col <= b)  # only out-of-span coordinates touched

    def test_literal_targets_in_span_mass(self):
        att, spans = self.span_map()
        r = bc_ots_loss(att, spans, mode="literal")
        for row, col in np.argwhere(r.grad != 0.0):
            n, _ = att.pos_to_utt[row]
            a, b = spans[n]
            assert a <= col <= b

    def test_deficit_gradient_sign(self):
        att, spans = self.span_map()
        r = bc_ots_loss(att, spans, mode="deficit")
        nz = r.grad[r.grad != 0.0]
        assert nz.size and np.all(nz < 0.0)

    def test_unknown_mode_rejected(self):
        att, spans = self.span_map()
        with pytest.raises(InvalidArgumentError):
            bc_ots_loss(att, spans, mode="both")

    def test_span_outside_frames_rejected(self):
        att, _ = self.span_map()
        with pytest.raises(InvalidArgumentError):
            bc_ots_loss(att, UttSpanFrames(((0, 2), (3, 9))))

    def test_missing_span_rejected(self):
        att, _ = self.span_map()
        with pytest.raises(InvalidArgumentError):
            bc_ots_loss(att, UttSpanFrames(((0, 2),)))

    def test_full_coverage_complement_is_zero(self):
        # spans covering every frame leave an empty complement: no penalty
        scores = softmax_rows(np.array([[1.0, 2.0, 0.5], [0.3, 1.0, 2.0]]))
        att = AttentionMap(scores, ((0, 0), (1, 0)))
        spans = UttSpanFrames(((0, 2), (0, 2)))
        r = bc_ots_loss(att, spans, mode="complement")
        assert r.value == 0.0 and not r.grad.any()


class TestScdLoss:
    def test_known_value_at_zero_logits(self):
        loss, _ = scd_loss(np.zeros(4), [0, 1, 0, 1])
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated_correct_is_small(self):
        loss, _ = scd_loss(np.array([-20.0, 20.0]), [0, 1])
        assert loss < 1e-8

    def test_pos_weight_scales_positive_terms(self):
        z = np.array([0.0, 0.0])
        l1, _ = scd_loss(z, [1, 0], pos_weight=1.0)
        l3, _ = scd_loss(z, [1, 0], pos_weight=3.0)
        assert l3 == pytest.approx(l1 + np.log(2.0), abs=1e-12)

    def test_pos_weight_below_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            scd_loss(np.zeros(1), [1], pos_weight=0.5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            scd_loss(np.zeros(2), [1])

    def test_sigmoid_stable(self):
        x = np.array([-800.0, 0.0, 800.0])
        y = sigmoid(x)
        assert y[0] == 0.0 and y[1] == 0.5 and y[2] == 1.0


class TestAttentionCe:
    def test_uniform_logits(self):
        logits = np.zeros((3, 5))
        loss, _ = attention_ce(logits, [1, 2, 3])
        assert loss == pytest.approx(np.log(5.0), abs=1e-12)

    def test_label_smoothing_penalizes_certainty(self):
        logits = np.full((1, 4), -30.0)
        logits[0, 2] = 30.0
        hard, _ = attention_ce(logits, [2])
        smooth, _ = attention_ce(logits, [2], label_smoothing=0.1)
        assert hard == pytest.approx(0.0, abs=1e-9)
        assert smooth > hard

    def test_bad_target_rejected(self):
        with pytest.raises(InvalidArgumentError):
            attention_ce(np.zeros((1, 3)), [3])


class TestCombined:
    def test_default_weights_recombine(self):
        w = LossWeights()
        total = combined_loss(1.0, 1.0, 1.0, 1.0, 1.0, w)
        assert total == pytest.approx(0.6 + 0.2 + 0.2 + 0.2 + 0.1, abs=1e-15)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            combined_loss(np.inf, 0.0, 0.0, 0.0, 0.0, LossWeights())


# ---------------------------------------------------------------------------
# Finite-difference gradient suite (loss level).
#
# Independent of the autodiff graph: each loss exposes an analytic gradient in
# its own return value, probed here with central differences on the raw
# parameter (logits for normalized objects, scores for attention maps).

FD_STEP = 1e-5
FD_TOL = 1e-4
N_INSTANCES = 24


def assert_fd_matches(f_value, f_grad, x0, tol=FD_TOL, step=FD_STEP):
    analytic = f_grad(x0)
    fd = fd_gradient(lambda x: f_value(x), x0.copy(), step=step)
    err = max_rel_err(analytic, fd, floor=1e-3)
    assert err <= tol, f"max rel err {err:.3e}"


class TestGradientsFiniteDifference:
    def test_attention_ce_grad(self):
        rng = np.random.default_rng(100)
        for _ in range(N_INSTANCES):
            K = int(rng.integers(1, 5))
            V = int(rng.integers(2, 6))
            logits = rng.normal(0.0, 1.0, size=(K, V))
            targets = list(rng.integers(0, V, size=K))
            ls = float(rng.choice([0.0, 0.1]))
            assert_fd_matches(
                lambda x: attention_ce(x, targets, label_smoothing=ls)[0],
                lambda x: attention_ce(x, targets, label_smoothing=ls)[1],
                logits,
            )

    def test_scd_loss_grad(self):
        rng = np.random.default_rng(101)
        for _ in range(N_INSTANCES):
            K = int(rng.integers(1, 8))
            z = rng.normal(0.0, 2.0, size=K)
            flags = list(rng.integers(0, 2, size=K))
            pw = float(rng.choice([1.0, 2.5]))
            assert_fd_matches(
                lambda x: scd_loss(x, flags, pos_weight=pw)[0],
                lambda x: scd_loss(x, flags, pos_weight=pw)[1],
                z,
            )

    def test_ctc_loss_grad_wrt_logits(self):
        # gradient w.r.t. unnormalized logits, composed through from_logits:
        # dL/dlogits = dL/dlogp - softmax(logits) * sum(dL/dlogp) per row
        rng = np.random.default_rng(102)
        done = 0
        while done < N_INSTANCES:
            T = int(rng.integers(2, 6))
            C = int(rng.integers(2, 5))
            L = int(rng.integers(1, 3))
            labels = list(rng.integers(1, C, size=L))
            if T < L + ctc_repeats(labels):
                continue
            logits = rng.normal(0.0, 1.0, size=(T, C))

            def value(x):
                return ctc_loss(LogProbLattice.from_logits(x), labels)[0]

            def grad(x):
                lat = LogProbLattice.from_logits(x)
                _, g = ctc_loss(lat, labels)
                p = np.exp(lat.values)
                return g - p * g.sum(axis=1, keepdims=True)

            assert_fd_matches(value, grad, logits)
            done += 1

    def test_ctc_loss_grad_wrt_logits_long(self):
        # token-stream-shaped targets: longer sequences with a separator id
        # woven in, the shape the intermediate-layer CTC term sees
        rng = np.random.default_rng(105)
        sep = 1
        done = 0
        while done < N_INSTANCES:
            C = int(rng.integers(4, 7))
            L = int(rng.integers(3, 7))
            labels = list(rng.integers(2, C, size=L))
            for j in sorted(rng.choice(L, size=int(rng.integers(1, 3)), replace=False)):
                labels[j] = sep
            T = L + ctc_repeats(labels) + int(rng.integers(0, 4))
            logits = rng.normal(0.0, 1.0, size=(T, C))

            def value(x):
                return ctc_loss(LogProbLattice.from_logits(x), labels)[0]

            def grad(x):
                lat = LogProbLattice.from_logits(x)
                _, g = ctc_loss(lat, labels)
                p = np.exp(lat.values)
                return g - p * g.sum(axis=1, keepdims=True)

            assert_fd_matches(value, grad, logits)
            done += 1

    def _bc_instance(self, rng, spans=False):
        """Logit-parameterized attention map with tie-free argmaxes."""
        n_utts = int(rng.integers(2, 4))
        tpu = int(rng.integers(1, 3))
        T = int(rng.integers(n_utts + 2, n_utts + 6))
        for _ in range(100):
            logits = rng.normal(0.0, 2.0, size=(n_utts * tpu, T))
            scores = softmax_rows(logits)
            gaps = np.sort(scores, axis=1)
            if T > 1 and np.any(gaps[:, -1] - gaps[:, -2] < 5e-3):
                continue
            pos = tuple((n, k) for n in range(n_utts) for k in range(tpu))
            if not spans:
                return logits, pos, None
            edges = np.sort(rng.choice(np.arange(1, T), size=n_utts - 1, replace=False))
            lo = np.concatenate(([0], edges))
            hi = np.concatenate((edges - 1, [T - 1]))
            return logits, pos, UttSpanFrames(tuple(zip(lo.tolist(), hi.tolist())))
        raise AssertionError("no tie-free instance found")

    @staticmethod
    def _region_stable(region: np.ndarray, clamp_hi: float, gap=1e-3) -> bool:
        """The region's max must lead by a margin and sit away from the clamp."""
        if region.size == 0:
            return True
        top = np.sort(region.reshape(-1))
        if top.size >= 2 and top[-1] - top[-2] < gap:
            return False
        return abs(top[-1] - clamp_hi) > gap

    def _bc_windows_stable(self, att: AttentionMap, clamp_eps=1e-3) -> bool:
        s = att.scores
        for n in range(att.num_utterances - 1):
            last_k = max(k for m, k in att.pos_to_utt if m == n)
            t_pre = int(np.argmax(s[att.row_of(n, last_k)]))
            window = s[att.row_of(n + 1, 0), t_pre:]
            if not self._region_stable(window, 1.0 - clamp_eps):
                return False
        return True

    def _ots_regions_stable(self, att, spans, mode, clamp_eps=1e-3) -> bool:
        s = att.scores
        T = att.num_frames
        for row, (n, _) in enumerate(att.pos_to_utt):
            a, b = spans[n]
            inside = s[row, a : b + 1]
            outside = np.concatenate((s[row, :a], s[row, b + 1 :]))
            if mode == "complement":
                if not self._region_stable(outside, 1.0 - clamp_eps):
                    return False
            else:
                # deficit clamps when the in-span max falls below clamp_eps
                hi = 1.0 - clamp_eps if mode == "literal" else None
                top = np.sort(inside.reshape(-1))
                if top.size >= 2 and top[-1] - top[-2] < 1e-3:
                    return False
                if hi is not None and abs(top[-1] - hi) <= 1e-3:
                    return False
                if mode == "deficit" and top[-1] <= clamp_eps + 1e-3:
                    return False
        return True

    def test_bc_loss_grad(self):
        rng = np.random.default_rng(103)
        done = 0
        while done < N_INSTANCES:
            logits, pos, _ = self._bc_instance(rng)

            def value(x):
                return bc_loss(AttentionMap(softmax_rows(x), pos)).value

            def grad(x):
                att = AttentionMap(softmax_rows(x), pos)
                r = bc_loss(att)
                s = att.scores
                return s * (r.grad - (r.grad * s).sum(axis=1, keepdims=True))

            att0 = AttentionMap(softmax_rows(logits), pos)
            r0 = bc_loss(att0)
            if r0.num_terms == 0 or not r0.grad.any():
                continue
            if not self._bc_windows_stable(att0):
                continue
            assert_fd_matches(value, grad, logits)
            done += 1

    @pytest.mark.parametrize("mode", BC_MODES)
    def test_bc_ots_grad(self, mode):
        rng = np.random.default_rng(104 + len(mode))
        done = 0
        while done < N_INSTANCES:
            logits, pos, spans = self._bc_instance(rng, spans=True)

            def value(x):
                return bc_ots_loss(AttentionMap(softmax_rows(x), pos), spans, mode=mode).value

            def grad(x):
                att = AttentionMap(softmax_rows(x), pos)
                r = bc_ots_loss(att, spans, mode=mode)
                s = att.scores
                return s * (r.grad - (r.grad * s).sum(axis=1, keepdims=True))

            att0 = AttentionMap(softmax_rows(logits), pos)
            r0 = bc_ots_loss(att0, spans, mode=mode)
            if not r0.grad.any():
                continue
            if not self._ots_regions_stable(att0, spans, mode):
                continue
            assert_fd_matches(value, grad, logits)
            done += 1
