import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wavlink.errors import InputError
from wavlink.evaluation import (RetrievalPool, classify_by_similarity, cosine_ready, mcq_answer, mcq_joint_tokens,
                                recall_at_k, tokenize, truncated_eval, zero_shot_classify)
from wavlink.towers import SEP, build_model


def units(n, d, seed):
    rng = np.random.default_rng(seed)
    return cosine_ready(rng.normal(size=(n, d)))


class FixedScores(RetrievalPool):
    """Pool whose audio/text products reproduce a given text x audio score matrix."""

    @classmethod
    def from_scores(cls, scores, truth=None):
        scores = np.asarray(scores, dtype=float)
        # text_i = e_i, audio_j = column j of scores: text @ audio.T == scores
        return cls(scores.T.copy(), np.eye(scores.shape[0]), truth)


def brute_recall(scores, truth, k):
    hits = 0
    for q, row in enumerate(scores):
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))[:k]
        hits += any(j in truth[q] for j in ranked)
    return hits / len(scores)


def test_identity_similarity_r1():
    pool = RetrievalPool(np.eye(5), np.eye(5))
    assert recall_at_k(pool, "t2a", 1) == 1.0 and recall_at_k(pool, "a2t", 1) == 1.0


def test_hand_ranked_matrix():
    s = [[.9, .1, 0, 0], [.2, .8, 0, 0], [0, 0, .1, .9], [0, 0, .7, .3]]
    pool = FixedScores.from_scores(s)
    assert recall_at_k(pool, "t2a", 1) == 0.5
    assert recall_at_k(pool, "t2a", 2) == 1.0


def test_ties_go_to_lower_index():
    pool = RetrievalPool(np.tile([[1.0, 0.0]], (3, 1)), np.tile([[1.0, 0.0]], (3, 1)))
    # all scores tie: only query 0 ranks its own candidate first
    assert recall_at_k(pool, "t2a", 1) == pytest.approx(1 / 3)


def test_one_to_many_matches_brute_force():
    audio, text = units(6, 4, 1), units(12, 4, 2)
    truth = [{2 * i, 2 * i + 1} for i in range(6)]
    pool = RetrievalPool(audio, text, truth)
    scores = audio @ text.T
    t2a_truth = pool.text_to_audios
    for k in (1, 2, 3, 5):
        assert recall_at_k(pool, "a2t", k) == brute_recall(scores, truth, k)
        assert recall_at_k(pool, "t2a", k) == brute_recall(scores.T, t2a_truth, k)


def test_pool_validation():
    with pytest.raises(InputError):
        RetrievalPool(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(InputError):
        RetrievalPool(np.eye(2), np.eye(3), [{0}, {1}])
    with pytest.raises(InputError):
        recall_at_k(RetrievalPool(np.eye(2), np.eye(2)), "t2a", 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_recall_monotone_in_k(seed, n):
    pool = RetrievalPool(units(n, 3, seed), units(n, 3, seed + 1))
    for direction in ("t2a", "a2t"):
        vals = [recall_at_k(pool, direction, k) for k in range(1, n + 1)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_invariance(seed):
    audio, text = units(10, 5, seed), units(10, 5, seed + 7)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(5, 5)))
    a, b = RetrievalPool(audio, text), RetrievalPool(audio @ q, text @ q)
    for direction, k in itertools.product(("t2a", "a2t"), (1, 3)):
        assert recall_at_k(a, direction, k) == recall_at_k(b, direction, k)


def test_truncated_first_level_is_full_and_zero_delta():
    pool = RetrievalPool(units(16, 8, 3), units(16, 8, 4))
    values, deltas = truncated_eval(pool, [8, 4, 2], 1)
    assert values == {(d, k): recall_at_k(pool, d, k) for d in ("t2a", "a2t") for k in (1, 5, 10)}
    assert set(deltas.values()) == {0.0}


def test_truncated_deltas_match_recomputation():
    audio, text = units(20, 8, 5), units(20, 8, 6)
    pool = RetrievalPool(audio, text)
    values, deltas = truncated_eval(pool, [8, 4, 2], 3, ks=(1, 3))
    for direction in ("t2a", "a2t"):
        q, c = (text, audio) if direction == "t2a" else (audio, text)
        sliced = cosine_ready(q[:, :2]) @ cosine_ready(c[:, :2]).T
        truth = [{i} for i in range(20)]
        for k in (1, 3):
            expect = brute_recall(sliced, truth, k)
            full = brute_recall(q @ c.T, truth, k)
            assert abs(values[(direction, k)] - expect) <= 1e-12
            assert abs(deltas[(direction, k)] - (expect - full)) <= 1e-12


def test_truncated_bad_level():
    for level in (0, 3):
        with pytest.raises(InputError):
            truncated_eval(RetrievalPool(np.eye(2), np.eye(2)), [2, 1], level)


def test_classification_rules():
    classes = units(3, 4, 0)
    assert classify_by_similarity(classes[1], classes).tolist() == [1]
    twins = np.stack([classes[0], classes[0], classes[2]])
    assert classify_by_similarity(classes[0], twins).tolist() == [0]
    scaled = classify_by_similarity(units(5, 4, 1), classes)
    assert (classify_by_similarity(units(5, 4, 1), 3.7 * classes) == scaled).all()
    with pytest.raises(InputError):
        classify_by_similarity(classes[0], np.zeros((0, 4)))


def test_zero_shot_predicts_matching_label(small_cfg):
    model = build_model(small_cfg, seed=1)
    labels = ["t5 t6", "t7 t8", "t9 t10"]
    from wavlink.evaluation import encode_texts
    emb = encode_texts(model, [tokenize(f"the sound of {lab}", 32) for lab in labels])
    assert zero_shot_classify(model, emb[[2, 0]], labels).tolist() == [2, 0]
    with pytest.raises(InputError):
        zero_shot_classify(model, emb, ["only"])


def test_mcq_rules(small_cfg):
    model = build_model(small_cfg, seed=1)
    from wavlink.evaluation import encode_texts
    q = [5, 6, 7]
    choices = [[8], [9, 10], [11]]
    target = encode_texts(model, [mcq_joint_tokens(q, choices[1], small_cfg.max_text_len)])[0]
    assert mcq_answer(model, target, q, choices) == 1
    assert mcq_answer(model, target, q, [[8], [8], [8]]) == 0
    with pytest.raises(InputError):
        mcq_answer(model, target, q, [[8]])


def test_mcq_joint_truncates_question_from_left():
    joint = mcq_joint_tokens(list(range(4, 14)), [20, 21], 8)
    assert joint == [10, 11, 12, 13, SEP, 20, 21]
    with pytest.raises(InputError):
        mcq_joint_tokens([], [], 8)


def test_tokenize():
    assert tokenize("t12 t40", 64) == [12, 40]
    a = tokenize("the sound of t12", 64)
    assert a[-1] == 12 and all(4 <= t < 64 for t in a)
    assert tokenize("the", 64) == tokenize("The", 64)
