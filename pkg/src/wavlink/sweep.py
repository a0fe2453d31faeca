"""The 2 x 2 x 3 x 2 design grid, its resumable runner and model evaluation."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import (LOSSES, REGIMES, SCOPES, TEXT_STYLES, ModelConfig, SyntheticDatasetSpec, TrainConfig,
                     config_hash, to_flat)
from .data import SyntheticDataset
from .errors import ConfigError, InputError, WavLinkError
from .evaluation import (DEFAULT_KS, RetrievalPool, mcq_answer, truncated_eval, zero_shot_classify)
from .towers import DualEncoder
from .trainer import embed_pairs, train

log = logging.getLogger(__name__)

BENCHMARKS = {"short": "short-clip (AudioCaps proxy)", "long": "long-clip (Clotho proxy)"}

MICRO_MODEL = ModelConfig(feat_bins=8, d_model=32, audio_layers=1, text_layers=1, heads=2, ffn_mult=2,
                          vocab_size=256, max_text_len=16, proj_dim=32, matryoshka_dims=(32, 16, 8, 4))
MICRO_TRAIN = TrainConfig(lr_peak=3e-4, epochs=3, batch_size=16, seed=0, matryoshka=False)
MICRO_DATA = SyntheticDatasetSpec(num_classes=16, pairs_per_class=256, num_attributes=4, pool_size=64,
                                  eval_items_per_class=2, seed=7)


@dataclass(frozen=True)
class SweepConfig:
    text_style: str
    loss: str
    regime: str
    scope: str

    def __post_init__(self):
        for value, allowed in ((self.text_style, TEXT_STYLES), (self.loss, LOSSES),
                               (self.regime, REGIMES), (self.scope, SCOPES)):
            if value not in allowed:
                raise ConfigError(f"{value!r} not one of {allowed}")

    @property
    def config_id(self) -> str:
        return f"{self.text_style}/{self.loss}/{self.regime}/{self.scope}"

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return dataclasses.replace(base, text_style=self.text_style, loss=self.loss, regime=self.regime,
                                   scope=self.scope)


def full_grid() -> list[SweepConfig]:
    return [SweepConfig(*combo) for combo in itertools.product(TEXT_STYLES, LOSSES, REGIMES, SCOPES)]


def load_grid(spec: str) -> list[SweepConfig]:
    """``full`` or a JSON file holding a list of {text_style, loss, regime, scope} objects."""
    if spec == "full":
        return full_grid()
    try:
        entries = json.loads(Path(spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {spec}: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ConfigError("grid file must hold a nonempty JSON list")
    grid = []
    for e in entries:
        unknown = set(e) - {"text_style", "loss", "regime", "scope"}
        if unknown:
            raise ConfigError(f"unknown grid keys {sorted(unknown)}")
        grid.append(SweepConfig(**e))
    return grid


@dataclass
class SweepRow:
    config_id: str
    short_r1_t2a: float
    short_r1_a2t: float
    long_r1_t2a: float
    long_r1_a2t: float

    @property
    def mean_r1(self) -> float:
        return (self.short_r1_t2a + self.short_r1_a2t + self.long_r1_t2a + self.long_r1_a2t) / 4


@dataclass
class SweepReport:
    rows: list[SweepRow]
    failures: dict[str, str] = field(default_factory=dict)
    wall_time: dict[str, float] = field(default_factory=dict)
    computed: list[str] = field(default_factory=list)

    def sorted_rows(self) -> list[SweepRow]:
        return sorted(self.rows, key=lambda r: (-r.mean_r1, r.config_id))


@dataclass
class EvalRow:
    benchmark: str
    direction: str
    k: int
    dim_level: int
    value: float
    delta_vs_full: float


@torch.no_grad()
def evaluate_model(model: DualEncoder, ds: SyntheticDataset, ks: Sequence[int] = DEFAULT_KS,
                   zsc_classes: int = 8) -> list[EvalRow]:
    """Recall@K per pool at every ladder level, plus zero-shot and MCQ accuracy."""
    dims = model.cfg.matryoshka_dims
    rows: list[EvalRow] = []
    for bench in BENCHMARKS:
        audio, text = embed_pairs(model, ds.paired(bench))
        pool = RetrievalPool(audio, text)
        for level, d in enumerate(dims, 1):
            values, deltas = truncated_eval(pool, dims, level, ks)
            for (direction, k), v in values.items():
                rows.append(EvalRow(bench, direction, k, d, v, deltas[(direction, k)]))
    held = ds.pool("heldout")
    if held:
        feats = torch.as_tensor(np.stack([it.features for it in held]))
        audio = model.embed_audio(feats).numpy()
        n_cls = min(zsc_classes, ds.spec.num_classes)
        sel = [i for i, it in enumerate(held) if it.class_id < n_cls]
        pred = zero_shot_classify(model, audio[sel], [ds.class_label(c) for c in range(n_cls)])
        gold = np.array([held[i].class_id for i in sel])
        rows.append(EvalRow(f"zsc{n_cls}", "a2t", 1, dims[0], float(np.mean(pred == gold)), 0.0))
        index = {it.id: i for i, it in enumerate(held)}
        hits = [mcq_answer(model, audio[index[q.audio_id]], q.question, q.choices) == q.answer for q in ds.mcq]
        if hits:
            rows.append(EvalRow("mcq", "a2t", 1, dims[0], float(np.mean(hits)), 0.0))
    return rows


def r1_summary(model: DualEncoder, ds: SyntheticDataset) -> dict[str, float]:
    out = {}
    for bench in BENCHMARKS:
        audio, text = embed_pairs(model, ds.paired(bench))
        pool = RetrievalPool(audio, text)
        values, _ = truncated_eval(pool, model.cfg.matryoshka_dims, 1, (1,))
        out[f"{bench}_r1_t2a"] = values[("t2a", 1)]
        out[f"{bench}_r1_a2t"] = values[("a2t", 1)]
    return out


def run_one(cfg: SweepConfig, model_cfg: ModelConfig, base: TrainConfig, ds: SyntheticDataset) -> dict:
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    result = train(model_cfg, cfg.train_config(base), ds.paired("train"))
    row = r1_summary(result.model, ds)
    row["wall_time"] = time.perf_counter() - t0
    return row


def cache_key(cfg: SweepConfig, model_cfg: ModelConfig, base: TrainConfig, ds: SyntheticDataset) -> str:
    blob = to_flat(model_cfg, cfg.train_config(base))
    blob["dataset"] = dataclasses.asdict(ds.spec)
    return config_hash(blob)


def run_sweep(grid: Sequence[SweepConfig], ds: SyntheticDataset, *, model_cfg: ModelConfig = MICRO_MODEL,
              base: TrainConfig = MICRO_TRAIN, cache_dir: str | Path | None = None, workers: int = 1) -> SweepReport:
    """Train and score each grid point with the same seed and budget.

    Finished points are cached as ``<cache_dir>/<hash>.json`` and skipped on
    rerun; a failing point is recorded in ``failures`` and the sweep goes on.
    """
    if not grid:
        raise InputError("empty sweep grid")
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    report = SweepReport([])
    results: dict[str, dict] = {}
    pending = []
    for cfg in grid:
        path = cache / f"{cache_key(cfg, model_cfg, base, ds)}.json" if cache else None
        if path is not None and path.exists():
            results[cfg.config_id] = json.loads(path.read_text())
        else:
            pending.append((cfg, path))

    def record(cfg, path, outcome):
        results[cfg.config_id] = outcome
        report.computed.append(cfg.config_id)
        if path is not None and "error" not in outcome:
            path.write_text(json.dumps(outcome, sort_keys=True) + "\n")

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(cfg, path, pool.submit(run_one, cfg, model_cfg, base, ds)) for cfg, path in pending]
            for cfg, path, fut in futures:
                try:
                    record(cfg, path, fut.result())
                except WavLinkError as exc:
                    record(cfg, path, {"error": f"{type(exc).__name__}: {exc}"})
    else:
        for cfg, path in pending:
            log.info("sweep: training %s", cfg.config_id)
            try:
                record(cfg, path, run_one(cfg, model_cfg, base, ds))
            except WavLinkError as exc:
                record(cfg, path, {"error": f"{type(exc).__name__}: {exc}"})

    for cfg in grid:
        out = results[cfg.config_id]
        if "error" in out:
            report.failures[cfg.config_id] = out["error"]
            continue
        report.rows.append(SweepRow(cfg.config_id, out["short_r1_t2a"], out["short_r1_a2t"],
                                    out["long_r1_t2a"], out["long_r1_a2t"]))
        report.wall_time[cfg.config_id] = out["wall_time"]
    return report
