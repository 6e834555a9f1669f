"""Training, evaluation and checkpointing for the language-guided detector."""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bank import RepresentationBank, build_bank, freeze_and_save, load_frozen
from .config import RunConfig
from .detector import (BaselineDetector, GroundTruth, build_detector, detection_loss,
                       extract_object_features, match_all_layers, predictions, total_loss)
from .metrics import ImageRecord, ap_from_records, match_records
from .reasoner import PROMPT_POOLS, PromptSampler, SceneContextPrompt
from .relation import RelationTargets, per_layer_relation_loss
from .synth import TARGET_CATEGORIES, SceneSample, generate_split
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "langdet.metrics/1"
METRIC_COLUMNS = ("epoch", "loss_total", "loss_cls", "loss_bbox", "loss_relation", "loss_guidance", "ap")
LOSS_KEYS = ("total", "cls", "bbox", "relation", "guidance")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, H, W)
    targets: list[GroundTruth]
    manifest: dict

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, ids) -> Dataset:
        ids = list(ids)
        return Dataset(self.images[ids], [self.targets[k] for k in ids], self.manifest)


def to_dataset(samples: list[SceneSample], manifest: dict) -> Dataset:
    images = np.stack([s.chw() for s in samples]) if samples else np.zeros((0, 3, 64, 64))
    targets = [GroundTruth(s.boxes, s.labels, dict(s.attributes)) for s in samples]
    return Dataset(images, targets, manifest)


@functools.lru_cache(maxsize=8)
def _cached_split(size: int, seed: int, style: str, dist_json: str) -> Dataset:
    samples, manifest = generate_split(size, seed, style, json.loads(dist_json) or None)
    return to_dataset(samples, manifest)


def load_split(size: int, seed: int, style: str = "uavdt", distribution: dict | None = None) -> Dataset:
    return _cached_split(size, seed, style, json.dumps(distribution or {}, sort_keys=True))


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    dist = {"weather": cfg.weather_distribution} if cfg.weather_distribution else None
    if cfg.style == "visdrone" and dist:
        dist = {"time": cfg.weather_distribution}
    train = load_split(cfg.train_size, cfg.data_seed, cfg.style, dist)
    evals = load_split(cfg.eval_size, cfg.data_seed + 1_000_003, cfg.style, dist)
    return train, evals


def prepare_bank(cfg: RunConfig, out_dir: Path | None = None) -> RepresentationBank:
    if cfg.bank_path and Path(cfg.bank_path).exists():
        return load_frozen(cfg.bank_path)
    bank = _cached_bank(cfg.n_variants, cfg.bank_dim, cfg.sigma_in, cfg.mu_out, cfg.data_seed,
                        cfg.prompt_temperature, cfg.prompt_epochs, cfg.prompt_lr)
    if out_dir is not None:
        freeze_and_save(bank, Path(out_dir) / "bank.json")
    return bank


@functools.lru_cache(maxsize=4)
def _cached_bank(n_variants, dim, sigma_in, mu_out, seed, temperature, epochs, lr) -> RepresentationBank:
    return build_bank(n_variants=n_variants, dim=dim, sigma_in=sigma_in, mu_out=mu_out, seed=seed,
                      temperature=temperature, epochs=epochs, lr=lr)


def compute_losses(model: BaselineDetector, images: np.ndarray, targets: list[GroundTruth],
                   prompt: SceneContextPrompt | None, cfg: RunConfig,
                   relation_targets: RelationTargets | None = None, category_ids=None,
                   assignments=None) -> dict[str, Tensor]:
    """Forward pass and every loss term; disabled terms are exact zeros with no graph."""
    out = model(images, prompt, mode="train")
    if assignments is None:
        assignments = match_all_layers(out, targets, cfg.match_weights)
    l_cls, l_bbox = detection_loss(out, targets, assignments, model.cfg.num_classes,
                                   cfg.eos_coef, cfg.match_weights)
    l_rel = l_guid = None
    if cfg.relation:
        layer_feats = [extract_object_features(f, a, targets, model.object_proj, category_ids)
                       for f, a in zip(out.features, assignments)]
        l_rel = per_layer_relation_loss(layer_feats, relation_targets)
    if cfg.reasoner and cfg.lambda_guidance:
        l_guid = model.reasoner.scene_guidance_loss(out.reasoner_output, [t.attributes for t in targets])
    total = total_loss(l_cls, l_bbox, l_rel, l_guid, cfg.lambda_guidance)
    zero = Tensor(0.0)
    return {"total": total, "cls": l_cls, "bbox": l_bbox,
            "relation": l_rel if l_rel is not None else zero,
            "guidance": l_guid if l_guid is not None else zero,
            "assignments": assignments}


def inference_prompt(cfg: RunConfig) -> SceneContextPrompt:
    pool = cfg.scene_prompts or PROMPT_POOLS[cfg.style]
    return SceneContextPrompt.from_text(pool[0])


def evaluate(model: BaselineDetector, data: Dataset, cfg: RunConfig, batch_size: int = 50) -> list[ImageRecord]:
    """Per-image match records at the configured IoU threshold (inference mode)."""
    prompt = inference_prompt(cfg) if model.cfg.reasoner else None
    preds = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            out = model(data.images[start:start + batch_size], prompt, mode="infer")
            preds.extend(predictions(out))
    gts = [(t.boxes, t.labels) for t in data.targets]
    records = match_records(preds, gts, cfg.eval_iou)
    for k, r in enumerate(records):
        r.image_id = k
    return records


# checkpoints -------------------------------------------------------------------------------


def save_checkpoint(model: BaselineDetector, cfg: RunConfig, path) -> None:
    """``.npz`` container: one array per named parameter plus the run config as JSON."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays["__config__"] = np.array(json.dumps(cfg.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[BaselineDetector, RunConfig]:
    with np.load(path, allow_pickle=False) as data:
        cfg = RunConfig.from_dict(json.loads(str(data["__config__"])))
        model = build_detector(cfg.model_config(), cfg.seed)
        params = dict(model.named_parameters())
        stored = set(data.files) - {"__config__"}
        if stored != set(params):
            raise ValueError(f"checkpoint parameters differ from model: "
                             f"{sorted(stored ^ set(params))[:5]}")
        for name, p in params.items():
            if data[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {data[name].shape} != model {p.shape}")
            p.data = np.array(data[name], dtype=np.float64)
    return model, cfg


# training loop -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: BaselineDetector
    rows: list[dict] = field(default_factory=list)
    initial_ap: float = float("nan")
    final_ap: float = float("nan")
    records: list[ImageRecord] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: RunConfig, bank: RepresentationBank | None = None):
        cfg.validate()
        self.cfg = cfg
        self.model = build_detector(cfg.model_config(), cfg.seed)
        self.relation_targets = None
        self.category_ids = None
        if cfg.relation:
            if bank is None:
                raise ValueError("relation loss needs a frozen bank")
            self.bank = bank
            self.relation_targets = RelationTargets(bank, cfg.relation_temperature)
            self.category_ids = [bank.category_id(name) for name in TARGET_CATEGORIES]
        from .optim import AdamW
        self.optimizer = AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                               warmup_steps=cfg.warmup_steps, max_grad_norm=cfg.max_grad_norm)
        self.prompts = PromptSampler(cfg.scene_prompts or PROMPT_POOLS[cfg.style], cfg.seed)
        self.order_rng = np.random.default_rng([cfg.seed, 3])

    def step(self, images: np.ndarray, targets: list[GroundTruth]) -> dict[str, float]:
        prompt = self.prompts() if self.cfg.reasoner else None
        losses = compute_losses(self.model, images, targets, prompt, self.cfg,
                                self.relation_targets, self.category_ids)
        values = {k: losses[k].item() for k in LOSS_KEYS}
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(f"non-finite loss at step {self.optimizer.step_count}: {values}")
        self.optimizer.zero_grad()
        losses["total"].backward()
        self.optimizer.step()
        return values

    def epoch(self, data: Dataset) -> dict[str, float]:
        order = self.order_rng.permutation(len(data))
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        steps = 0
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            vals = self.step(data.images[idx], [data.targets[k] for k in idx])
            for k in LOSS_KEYS:
                sums[k] += vals[k]
            steps += 1
        return {k: v / max(steps, 1) for k, v in sums.items()}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def train(cfg: RunConfig, out_dir=None, bank: RepresentationBank | None = None,
          data: tuple[Dataset, Dataset] | None = None) -> TrainResult:
    """Bank preparation, then detector training with periodic evaluation.

    Writes ``config.json``, ``bank.json``, ``metrics.csv``, ``checkpoint.npz`` and
    ``summary.json`` into ``out_dir`` when given.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    if bank is None and cfg.relation:
        bank = prepare_bank(cfg, out)
    train_data, eval_data = data if data is not None else prepare_data(cfg)
    trainer = Trainer(cfg, bank)
    result = TrainResult(trainer.model)
    if cfg.relation and bank is not None:
        digest = bank.digest()
    records = evaluate(trainer.model, eval_data, cfg)
    result.initial_ap = ap_from_records(records)
    metrics_path = out / "metrics.csv" if out is not None else None
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            fh.write(f"# schema={METRICS_SCHEMA}\n")
            csv.writer(fh).writerow(METRIC_COLUMNS)
        save_checkpoint(trainer.model, cfg, out / "checkpoint.npz")
    for epoch in range(1, cfg.epochs + 1):
        losses = trainer.epoch(train_data)
        ap = None
        if epoch % max(cfg.eval_every, 1) == 0 or epoch == cfg.epochs:
            records = evaluate(trainer.model, eval_data, cfg)
            ap = ap_from_records(records)
        row = {"epoch": epoch, **{f"loss_{k}": losses[k] for k in LOSS_KEYS}, "ap": ap}
        result.rows.append(row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in losses.items()} | {"ap": ap})
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            save_checkpoint(trainer.model, cfg, out / "checkpoint.npz")
    result.records = records
    result.final_ap = ap_from_records(records)
    if cfg.relation and bank is not None and bank.digest() != digest:
        raise RuntimeError("frozen bank changed during detector training")
    if out is not None:
        summary = {"initial_ap": result.initial_ap, "final_ap": result.final_ap,
                   "parameters": trainer.model.num_parameters(), "epochs": cfg.epochs}
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return result
