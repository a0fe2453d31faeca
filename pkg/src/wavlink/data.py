"""Synthetic paired audio-feature / caption datasets and their on-disk layout.

Every class owns a random feature template and a token signature; every
attribute owns a second template and one token. A pair adds class and
attribute templates plus Gaussian noise, and captions the result with the
class signature and attribute token, sprinkled with distractor tokens.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SyntheticDatasetSpec
from .errors import ConfigError, FormatError
from .evaluation import detokenize, tokenize
from .rng import SplitMix64
from .towers import FIRST_CONTENT_ID
from .trainer import PairedSet

FEATURE_MAGIC = b"WLFT"
POOLS = ("train", "short", "long", "heldout")
MCQ_QUESTION = "what is making this sound"


def write_features(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    f, t = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", f, t))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a WLFT feature file")
    f, t = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 8 * f * t:
        raise FormatError(f"{path}: size does not match {f}x{t}")
    return np.frombuffer(blob, dtype="<f8", offset=12).astype(np.float64).reshape(f, t)


@dataclass
class Item:
    id: str
    pool: str
    class_id: int
    attribute_id: int
    tokens: list[int]
    features: np.ndarray


@dataclass
class McqItem:
    id: str
    audio_id: str
    question: list[int]
    choices: list[list[int]]
    answer: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ConfigError("an MCQ item needs at least 2 choices")
        if not 0 <= self.answer < len(self.choices):
            raise ConfigError(f"answer index {self.answer} out of range")


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    items: list[Item]
    signatures: np.ndarray
    attribute_tokens: np.ndarray
    mcq: list[McqItem]

    def pool(self, name: str) -> list[Item]:
        return [it for it in self.items if it.pool == name]

    def paired(self, name: str) -> PairedSet:
        items = self.pool(name)
        return PairedSet(np.stack([it.features for it in items]), [list(it.tokens) for it in items])

    def class_label(self, c: int) -> str:
        return detokenize(self.signatures[c])

    def by_id(self) -> dict[str, Item]:
        return {it.id: it for it in self.items}


def _content_tokens(rng: SplitMix64, n: int, vocab: int) -> np.ndarray:
    span = vocab - FIRST_CONTENT_ID
    if n <= span:
        return FIRST_CONTENT_ID + rng.permutation(span)[:n]
    return rng.integers(FIRST_CONTENT_ID, vocab, n)


def _caption(base: list[int], rate: float, rng: SplitMix64, vocab: int) -> list[int]:
    out = []
    draws = rng.uniform(len(base))
    fillers = rng.integers(FIRST_CONTENT_ID, vocab, len(base))
    for tok, u, filler in zip(base, draws, fillers):
        out.append(int(tok))
        if u < rate:
            out.append(int(filler))
    return out


def generate_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Build the full synthetic corpus in memory; a pure function of ``spec``."""
    c, a, f, t = spec.num_classes, spec.num_attributes, spec.feat_bins, spec.frames
    long_t = 2 * t
    vocab = spec.vocab_size
    seed = spec.seed
    class_tpl = SplitMix64(seed, "class-templates").normal((c, f, long_t))
    attr_tpl = SplitMix64(seed, "attribute-templates").normal((a, f, long_t), spec.attribute_scale)
    if a == 1:
        attr_tpl[:] = 0.0
    tokens = _content_tokens(SplitMix64(seed, "signatures"), c * spec.tokens_per_caption + a, vocab)
    signatures = tokens[: c * spec.tokens_per_caption].reshape(c, spec.tokens_per_caption)
    attribute_tokens = tokens[c * spec.tokens_per_caption :]

    def base_tokens(cls: int, attr: int) -> list[int]:
        out = [int(x) for x in signatures[cls]]
        if a > 1:
            out.append(int(attribute_tokens[attr]))
        return out

    items: list[Item] = []

    def emit(pool: str, combos, frames: int) -> None:
        rng = SplitMix64(seed, f"pool-{pool}")
        for n, (cls, attr) in enumerate(combos):
            noise = rng.normal((f, frames), spec.noise_scale)
            feats = class_tpl[cls, :, :frames] + attr_tpl[attr, :, :frames] + noise
            caption = _caption(base_tokens(cls, attr), spec.distractor_rate, rng, vocab)
            items.append(Item(f"{pool}-{n:05d}", pool, int(cls), int(attr), caption, feats))

    emit("train", [(cls, j % a) for cls in range(c) for j in range(spec.pairs_per_class)], t)
    combos = [(cls, attr) for cls in range(c) for attr in range(a)]
    pool_combos = [combos[i % len(combos)] for i in range(spec.pool_size)]
    emit("short", pool_combos, t)
    emit("long", pool_combos, long_t)
    held_rng = SplitMix64(seed, "heldout-attributes")
    held_attrs = held_rng.integers(0, a, c * spec.eval_items_per_class)
    emit("heldout", [(cls, int(held_attrs[cls * spec.eval_items_per_class + j]))
                     for cls in range(c) for j in range(spec.eval_items_per_class)], t)

    mcq_rng = SplitMix64(seed, "mcq")
    question = tokenize(MCQ_QUESTION, vocab)
    mcq = []
    for n, item in enumerate(it for it in items if it.pool == "heldout"):
        others = [k for k in mcq_rng.permutation(c).tolist() if k != item.class_id][: spec.mcq_choices - 1]
        answer = int(mcq_rng.integers(0, spec.mcq_choices, 1)[0])
        classes = others[:answer] + [item.class_id] + others[answer:]
        mcq.append(McqItem(f"mcq-{n:05d}", item.id, question, [[int(x) for x in signatures[k]] for k in classes],
                           answer))
    return SyntheticDataset(spec, items, signatures, attribute_tokens, mcq)


def save_dataset(ds: SyntheticDataset, out: str | Path) -> None:
    """Write ``spec.json``, ``manifest.jsonl``, ``mcq.jsonl`` and ``features/*.wlft``."""
    out = Path(out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(ds.spec), indent=2, sort_keys=True) + "\n")
    with open(out / "manifest.jsonl", "w") as fh:
        for it in ds.items:
            rel = f"features/{it.id}.wlft"
            write_features(out / rel, it.features)
            fh.write(json.dumps({"id": it.id, "feature_file": rel, "tokens": it.tokens, "class_id": it.class_id,
                                 "attribute_id": it.attribute_id, "pool": it.pool}) + "\n")
    with open(out / "mcq.jsonl", "w") as fh:
        for m in ds.mcq:
            fh.write(json.dumps(dataclasses.asdict(m)) + "\n")
    labels = {"signatures": ds.signatures.tolist(), "attribute_tokens": ds.attribute_tokens.tolist()}
    (out / "labels.json").write_text(json.dumps(labels) + "\n")


def load_dataset(root: str | Path) -> SyntheticDataset:
    root = Path(root)
    try:
        spec = SyntheticDatasetSpec(**json.loads((root / "spec.json").read_text()))
        labels = json.loads((root / "labels.json").read_text())
        items = []
        for line in (root / "manifest.jsonl").read_text().splitlines():
            row = json.loads(line)
            items.append(Item(row["id"], row["pool"], row["class_id"], row["attribute_id"], row["tokens"],
                              read_features(root / row["feature_file"])))
        mcq = [McqItem(**json.loads(line)) for line in (root / "mcq.jsonl").read_text().splitlines()]
    except OSError as exc:
        raise FormatError(f"cannot read dataset at {root}: {exc}") from exc
    return SyntheticDataset(spec, items, np.asarray(labels["signatures"]), np.asarray(labels["attribute_tokens"]), mcq)
