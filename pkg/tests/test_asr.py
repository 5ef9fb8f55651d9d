"""Recognition head: CTC forward oracle, attention loss, PIT, greedy decoding."""

from itertools import permutations, product

import numpy as np
import pytest

from ume import tensor as T
from ume.asr import (AsrConfig, AsrHead, Hypothesis, ctc_loss, ctc_required_frames,
                     greedy_collapse)
from ume.errors import CtcInfeasibleError, ItemSkippedError, ShapeError
from ume.optim import Parameter, grad_check
from ume.rng import stream


def make_head(num_speakers=2, d_enc=8, vocab=4, **kwargs):
    config = AsrConfig(**kwargs)
    return AsrHead(config, d_enc, num_speakers, vocab, stream(0, "init"))


def brute_force_ctc(log_probs, target, blank=0):
    """Enumerate every frame-label path that collapses to the target."""
    t_frames, n_classes = log_probs.shape
    total = -np.inf
    for path in product(range(n_classes), repeat=t_frames):
        collapsed = []
        prev = None
        for cls in path:
            if cls != blank and cls != prev:
                collapsed.append(cls)
            prev = cls
        if collapsed == list(target):
            total = np.logaddexp(total, sum(log_probs[i, c] for i, c in enumerate(path)))
    return -total


def random_log_probs(rng, t, classes):
    logits = rng.normal(size=(t, classes))
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


class TestCtc:
    def test_single_frame_single_token(self):
        lp = random_log_probs(np.random.default_rng(0), 1, 3)
        loss = ctc_loss(T.constant(lp), [2])
        assert float(loss.data) == pytest.approx(-lp[0, 2], rel=1e-12)

    def test_empty_target_all_blank(self):
        lp = random_log_probs(np.random.default_rng(1), 4, 3)
        loss = ctc_loss(T.constant(lp), [])
        assert float(loss.data) == pytest.approx(-lp[:, 0].sum(), rel=1e-12)

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(2)
        lp = random_log_probs(rng, 3, 3)
        loss = ctc_loss(T.constant(lp), [1, 2])
        assert float(loss.data) == pytest.approx(brute_force_ctc(lp, [1, 2]), abs=1e-9)

    def test_exhaustive_small_cases(self):
        # every (T <= 4, |V| <= 2, target length <= 2) feasible combination
        rng = np.random.default_rng(3)
        checked = 0
        for t in range(1, 5):
            for v in (1, 2):
                lp = random_log_probs(rng, t, v + 1)
                targets = [[]]
                targets += [[a] for a in range(1, v + 1)]
                targets += [[a, b] for a in range(1, v + 1) for b in range(1, v + 1)]
                for target in targets:
                    if ctc_required_frames(target) > t:
                        continue
                    loss = ctc_loss(T.constant(lp), target)
                    expected = brute_force_ctc(lp, target)
                    assert float(loss.data) == pytest.approx(expected, abs=1e-9), \
                        f"T={t} V={v} target={target}"
                    checked += 1
        assert checked >= 20

    def test_infeasible_target_rejected(self):
        lp = random_log_probs(np.random.default_rng(4), 2, 3)
        with pytest.raises(CtcInfeasibleError):
            ctc_loss(T.constant(lp), [1, 1])       # repeat needs 3 frames

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = Parameter(rng.normal(size=(5, 4)), "logits")

        def builder():
            return ctc_loss(T.log_softmax(logits.tensor, axis=-1), [2, 1, 2])

        report = grad_check(builder, [logits], eps=1e-6, tol=1e-4)
        assert report.passed, report


class TestSpeakerEncode:
    def test_length_arithmetic(self):
        head = make_head()
        reps = head.speaker_encode(T.constant(np.random.default_rng(0)
                                              .normal(size=(17, 8)).astype(np.float32)))
        assert len(reps) == 2
        for rep in reps:
            assert rep.shape == (4, 32)

    def test_branches_have_private_parameters(self):
        head = make_head()
        names = {p.name for p in head.named_parameters()}
        assert any(n.startswith("branches.0.") for n in names)
        assert any(n.startswith("branches.1.") for n in names)

    def test_identical_weights_identical_outputs(self):
        head = make_head()
        b0 = {p.name.split(".", 2)[2]: p for p in head.branches[0].named_parameters("branches.0")}
        for p in head.branches[1].named_parameters("branches.1"):
            p.data = b0[p.name.split(".", 2)[2]].data.copy()
        h = T.constant(np.random.default_rng(1).normal(size=(16, 8)).astype(np.float32))
        reps = head.speaker_encode(h)
        np.testing.assert_array_equal(reps[0].data, reps[1].data)

    def test_too_few_frames_rejected(self):
        head = make_head()
        with pytest.raises(ShapeError, match="zero recognition frames"):
            head.speaker_encode(T.constant(np.zeros((3, 8), np.float32)))


class TestAttentionDecodeLoss:
    def test_uniform_outputs_give_log_vocab_with_eos(self):
        head = make_head(vocab=4)
        head.out_proj.weight.data = np.zeros_like(head.out_proj.weight.data)
        head.out_proj.bias.data = np.zeros_like(head.out_proj.bias.data)
        h = T.constant(np.random.default_rng(2).normal(size=(6, 32)).astype(np.float32))
        loss = head.attention_decode_loss(h, [1, 3, 2])
        assert float(loss.data) == pytest.approx(np.log(5), rel=1e-6)

    def test_length_one_target_averages_token_and_eos(self):
        head = make_head(vocab=4)
        h = T.constant(np.random.default_rng(3).normal(size=(5, 32)).astype(np.float32))
        loss = head.attention_decode_loss(h, [2])
        logits = head._decode_logits(h, [5, 2])    # sos=5 for vocab 4
        logp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
        expected = -(logp[0, 1] + logp[1, 4]) / 2  # token 2 -> class 1, eos -> class 4
        assert float(loss.data) == pytest.approx(expected, rel=1e-5)

    def test_empty_target_rejected(self):
        head = make_head()
        with pytest.raises(ShapeError, match="empty"):
            head.attention_decode_loss(T.constant(np.zeros((4, 32), np.float32)), [])

    def test_gradients_against_finite_differences(self):
        head = AsrHead(AsrConfig(speaker_blocks=1, decoder_blocks=1), 4, 1, 3,
                       stream(5, "init"), dtype=np.float64)
        h = T.constant(np.random.default_rng(4).normal(size=(3, 32)))
        params = head.parameters()

        def builder():
            return head.attention_decode_loss(h, [1, 2])

        report = grad_check(builder, params, eps=1e-6, tol=1e-4, max_coords=2,
                            rng=np.random.default_rng(0))
        assert report.passed, report


class TestAsrPit:
    def _crossed_head(self):
        """Head whose branch 0 nails target B and branch 1 nails target A."""
        head = make_head(vocab=2)
        target_a, target_b = [1, 2], [2, 1]
        strong = np.full((8, 3), -20.0, np.float32)

        def path_for(target):
            lp = strong.copy()
            frames = [0, target[0], 0, target[1], 0, 0, 0, 0]
            for f, cls in enumerate(frames):
                lp[f, cls] = 0.0
            return lp - np.log(np.exp(lp).sum(-1, keepdims=True))

        tables = [path_for(target_b), path_for(target_a)]
        head.ctc_log_probs = lambda rep, _t=iter(()): None  # replaced below
        reps = [T.constant(np.zeros((8, 32), np.float32)) for _ in range(2)]
        lookup = {id(reps[0]): T.constant(tables[0]), id(reps[1]): T.constant(tables[1])}
        head.ctc_log_probs = lambda rep: lookup[id(rep)]
        return head, reps, [target_a, target_b]

    def test_crossed_predictions_select_swap(self):
        head, reps, targets = self._crossed_head()
        loss, perm = head.asr_pit_loss(reps, targets)
        assert perm == (1, 0)

    def test_identical_targets_tie_breaks_lexicographic(self):
        head = make_head(vocab=2)
        reps = head.speaker_encode(T.constant(np.random.default_rng(6)
                                              .normal(size=(32, 8)).astype(np.float32)))
        loss, perm = head.asr_pit_loss(reps, [[1, 2], [1, 2]])
        assert perm == (0, 1)

    def test_matches_exhaustive_ctc_minimization(self):
        rng = np.random.default_rng(7)
        head = AsrHead(AsrConfig(), 8, 3, 4, stream(8, "init"))
        for _ in range(10):
            reps = head.speaker_encode(T.constant(rng.normal(size=(40, 8))
                                                  .astype(np.float32)))
            targets = [rng.integers(1, 5, size=rng.integers(1, 4)).tolist()
                       for _ in range(3)]
            loss, perm = head.asr_pit_loss(reps, targets)
            table = np.array([[float(ctc_loss(head.ctc_log_probs(rep), t).data)
                               for t in targets] for rep in reps])
            best, best_perm = None, None
            for p in permutations(range(3)):
                total = table[range(3), p].sum()
                if best is None or total < best:
                    best, best_perm = total, p
            assert perm == best_perm

    def test_all_infeasible_skips_item(self):
        head = make_head(vocab=2)
        reps = head.speaker_encode(T.constant(np.random.default_rng(9)
                                              .normal(size=(16, 8)).astype(np.float32)))
        long_target = [1, 1, 1, 1, 1, 1]           # needs 11 frames, have 4
        with pytest.raises(ItemSkippedError):
            head.asr_pit_loss(reps, [long_target, long_target])


class TestGreedyDecode:
    def test_collapse_rule(self):
        lp = np.full((4, 3), -5.0)
        for f, cls in enumerate([1, 1, 0, 2]):
            lp[f, cls] = -0.1
        hyp = greedy_collapse(lp)
        assert hyp.tokens == [1, 2]

    def test_all_blank_empty(self):
        lp = np.full((5, 3), -5.0)
        lp[:, 0] = -0.1
        assert greedy_collapse(lp).tokens == []

    def test_repeat_after_blank_is_new_token(self):
        lp = np.full((3, 2), -5.0)
        for f, cls in enumerate([1, 0, 1]):
            lp[f, cls] = -0.1
        assert greedy_collapse(lp).tokens == [1, 1]

    def test_matches_rule_replay_on_random_logits(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            lp = rng.normal(size=(rng.integers(1, 12), 4))
            hyp = greedy_collapse(lp)
            path = lp.argmax(-1)
            expected = []
            prev = None
            for cls in path:
                if cls != 0 and cls != prev:
                    expected.append(int(cls))
                prev = cls
            assert hyp.tokens == expected

    def test_shift_invariance_of_argmax_path(self):
        rng = np.random.default_rng(11)
        lp = rng.normal(size=(6, 4))
        shifted = lp + rng.normal(size=(6, 1))     # per-frame constant shift
        assert greedy_collapse(lp).tokens == greedy_collapse(shifted).tokens
