"""Recall@K retrieval, zero-shot classification and MCQ-as-retrieval."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InputError
from .towers import FIRST_CONTENT_ID, SEP, DualEncoder

DEFAULT_TEMPLATE = "the sound of {label}"
DEFAULT_KS = (1, 5, 10)
_TOKEN_RE = re.compile(r"^t(\d+)$")


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Whitespace tokenizer: ``t<N>`` is the literal id N, other words hash into the content range."""
    ids = []
    for word in text.split():
        m = _TOKEN_RE.match(word)
        if m and FIRST_CONTENT_ID <= int(m.group(1)) < vocab_size:
            ids.append(int(m.group(1)))
        else:
            ids.append(FIRST_CONTENT_ID + zlib.crc32(word.lower().encode()) % (vocab_size - FIRST_CONTENT_ID))
    return ids


def detokenize(ids: Iterable[int]) -> str:
    return " ".join(f"t{int(i)}" for i in ids)


@dataclass
class RetrievalPool:
    """Audio and text embeddings with a (possibly one-to-many) ground-truth map."""

    audio: np.ndarray
    text: np.ndarray
    audio_to_texts: list[set[int]] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if len(self.audio) == 0 or len(self.text) == 0:
            raise InputError("empty retrieval pool")
        if self.audio_to_texts is None:
            if len(self.audio) != len(self.text):
                raise InputError("one-to-one pool needs equal audio and text counts")
            self.audio_to_texts = [{i} for i in range(len(self.audio))]
        if len(self.audio_to_texts) != len(self.audio):
            raise InputError("ground-truth map must cover every audio item")
        covered = set()
        for i, texts in enumerate(self.audio_to_texts):
            if not texts:
                raise InputError(f"audio item {i} has no ground-truth text")
            covered |= set(texts)
        if covered != set(range(len(self.text))):
            raise InputError("every text item needs a ground-truth audio")

    @property
    def text_to_audios(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(len(self.text))]
        for a, texts in enumerate(self.audio_to_texts):
            for t in texts:
                out[t].add(a)
        return out

    def sliced(self, d: int) -> "RetrievalPool":
        return RetrievalPool(cosine_ready(self.audio[:, :d]), cosine_ready(self.text[:, :d]),
                             [set(s) for s in self.audio_to_texts])


def cosine_ready(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm == 0.0, 1.0, norm)


def rank_candidates(scores: np.ndarray) -> np.ndarray:
    """Per-row ranking, best first; ties go to the lower candidate index."""
    return np.argsort(-scores, axis=-1, kind="stable")


def best_gt_rank(scores: np.ndarray, truth: Sequence[set[int]]) -> np.ndarray:
    order = rank_candidates(scores)
    position = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    position[rows, order] = np.arange(order.shape[1])[None, :]
    return np.array([min(position[q, j] for j in gt) for q, gt in enumerate(truth)])


def recall_at_k(pool: RetrievalPool, direction: str, k: int) -> float:
    """Fraction of queries with any ground-truth candidate in the top ``k``."""
    if k < 1:
        raise InputError("k must be >= 1")
    if direction == "t2a":
        scores, truth = pool.text @ pool.audio.T, pool.text_to_audios
    elif direction == "a2t":
        scores, truth = pool.audio @ pool.text.T, pool.audio_to_texts
    else:
        raise InputError(f"direction must be t2a or a2t, got {direction!r}")
    return float(np.mean(best_gt_rank(scores, truth) < k))


def pairwise_recall(audio: np.ndarray, text: np.ndarray, direction: str, k: int) -> float:
    return recall_at_k(RetrievalPool(audio, text), direction, k)


def recall_table(pool: RetrievalPool, ks: Sequence[int] = DEFAULT_KS) -> dict[tuple[str, int], float]:
    return {(d, k): recall_at_k(pool, d, k) for d in ("t2a", "a2t") for k in ks}


def truncated_eval(pool: RetrievalPool, dims: Sequence[int], level: int, ks: Sequence[int] = DEFAULT_KS):
    """Recall@K on the first ``dims[level]`` channels and signed deltas vs full width.

    ``level`` counts from 1; level 1 is the full width and reproduces the
    full-dimension table exactly.
    """
    if not 1 <= level <= len(dims):
        raise InputError(f"level {level} outside ladder {list(dims)}")
    full = recall_table(pool, ks)
    if level == 1:
        return full, {key: 0.0 for key in full}
    sliced = recall_table(pool.sliced(dims[level - 1]), ks)
    return sliced, {key: sliced[key] - full[key] for key in full}


def classify_by_similarity(audio: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """Argmax cosine class per audio row; ties resolve to the lower class index."""
    if len(class_emb) == 0:
        raise InputError("no classes")
    return np.argmax(np.atleast_2d(audio) @ class_emb.T, axis=1)


@torch.no_grad()
def encode_texts(model: DualEncoder, captions: Sequence[Sequence[int]]) -> np.ndarray:
    return model.embed_text(model.prepare(captions)).numpy()


def zero_shot_classify(model: DualEncoder, audio: np.ndarray, labels: Sequence[str],
                       template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    """Predict a label index per audio embedding from prompted label text."""
    if len(labels) < 2:
        raise InputError("zero-shot classification needs at least 2 labels")
    vocab = model.cfg.vocab_size
    prompts = [tokenize(template.format(label=label), vocab) for label in labels]
    return classify_by_similarity(audio, encode_texts(model, prompts))


def mcq_joint_tokens(question: Sequence[int], choice: Sequence[int], max_len: int) -> list[int]:
    """``question ++ SEP ++ choice``, dropping question tokens from the left to fit.

    One slot of ``max_len`` is kept for the pooling marker.
    """
    budget = max_len - 1
    question = list(question)
    choice = list(choice)
    overflow = len(question) + 1 + len(choice) - budget
    if overflow > 0:
        question = question[overflow:]
    joint = question + [SEP] + choice
    joint = joint[-budget:] if len(joint) > budget else joint
    if not [t for t in joint if t != SEP]:
        raise InputError("joint MCQ text is empty after truncation")
    return joint


def mcq_answer(model: DualEncoder, audio: np.ndarray, question: Sequence[int],
               choices: Sequence[Sequence[int]]) -> int:
    """Index of the choice whose question+choice embedding is closest to ``audio``."""
    if len(choices) < 2:
        raise InputError("an MCQ item needs at least 2 choices")
    joint = [mcq_joint_tokens(question, c, model.cfg.max_text_len) for c in choices]
    return int(classify_by_similarity(audio, encode_texts(model, joint))[0])
