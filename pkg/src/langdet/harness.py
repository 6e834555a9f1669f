"""Experiment drivers behind the CLI: ablation table, per-variation AP, bank scatter."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bank import RepresentationBank, silhouette
from .config import RunConfig
from .metrics import ImageRecord, ap_from_records
from .synth import samples_from_manifest
from .train import Dataset, evaluate, load_checkpoint, prepare_bank, prepare_data, to_dataset, train

logger = logging.getLogger(__name__)

ABLATION_SCHEMA = "langdet.ablation/1"
ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))
ABLATION_COLUMNS = ("reasoner", "relation", "seed", "ap", "ap_foggy", "parameters",
                    "final_loss_relation", "final_loss_guidance", "seconds")
TABLE_COLUMNS = ("reasoner", "relation", "ap_median", "ap_foggy_median", "parameters", "seeds")
VARIATION_SCHEMA = "langdet.variation/1"
# Desk budget for the three-seed ablation (12 runs under an hour on one CPU core): fewer
# epochs than the default run and a single evaluation at the end of training.
ACCEPTANCE_OVERRIDES = {"epochs": 20, "eval_every": 20}
COORDS_SCHEMA = "langdet.pca/1"


def _flag(on: bool) -> str:
    return "on" if on else "off"


def subset_ap(records: list[ImageRecord], ids) -> float:
    """AP over the images in ``ids``; NaN when the subset is empty or has no ground truth."""
    keep = set(int(i) for i in ids)
    return ap_from_records([r for r in records if r.image_id in keep])


# ablation ------------------------------------------------------------------------------


@dataclass
class AblationRun:
    reasoner: bool
    relation: bool
    seed: int
    ap: float
    ap_foggy: float
    parameters: int
    final_loss_relation: float
    final_loss_guidance: float
    seconds: float


@dataclass
class AblationResult:
    runs: list[AblationRun] = field(default_factory=list)

    def row(self, reasoner: bool, relation: bool) -> list[AblationRun]:
        return [r for r in self.runs if r.reasoner == reasoner and r.relation == relation]

    def median(self, reasoner: bool, relation: bool, key: str = "ap") -> float:
        vals = [getattr(r, key) for r in self.row(reasoner, relation)]
        return float(np.median(vals)) if vals else float("nan")

    def table(self) -> list[dict]:
        out = []
        for reasoner, relation in ABLATION_ROWS:
            runs = self.row(reasoner, relation)
            if not runs:
                continue
            out.append({"reasoner": _flag(reasoner), "relation": _flag(relation),
                        "ap_median": self.median(reasoner, relation),
                        "ap_foggy_median": self.median(reasoner, relation, "ap_foggy"),
                        "parameters": runs[0].parameters,
                        "seeds": " ".join(str(r.seed) for r in runs)})
        return out


def ablation_checks(result: AblationResult) -> list[tuple[str, bool, str]]:
    """Directional ordering of the four-row table, AP in points (x100), medians over seeds."""
    m = {k: 100 * result.median(*k) for k in ABLATION_ROWS}
    base, reas, rel, both = m[(False, False)], m[(True, False)], m[(False, True)], m[(True, True)]
    fog_base = 100 * result.median(False, False, "ap_foggy")
    fog_both = 100 * result.median(True, True, "ap_foggy")
    return [
        ("both >= reasoner-only", both >= reas, f"{both:.2f} vs {reas:.2f}"),
        ("both >= relation-only", both >= rel, f"{both:.2f} vs {rel:.2f}"),
        ("reasoner-only >= baseline - 0.5", reas >= base - 0.5, f"{reas:.2f} vs {base:.2f}"),
        ("relation-only >= baseline - 0.5", rel >= base - 0.5, f"{rel:.2f} vs {base:.2f}"),
        ("both >= baseline + 1.0", both >= base + 1.0, f"{both:.2f} vs {base:.2f}"),
        ("foggy: both >= baseline", fog_both >= fog_base, f"{fog_both:.2f} vs {fog_base:.2f}"),
    ]


def run_ablation(cfg: RunConfig, seeds=(0, 1, 2), out_dir=None, rows=ABLATION_ROWS) -> AblationResult:
    """Train every (reasoner, relation) row for every seed on shared data and bank."""
    out = Path(out_dir) if out_dir is not None else None
    data = prepare_data(cfg)
    bank = prepare_bank(cfg)
    foggy = _subset_ids(data[1], "weather=foggy")
    result = AblationResult()
    for seed in seeds:
        for reasoner, relation in rows:
            run_cfg = cfg.replace(reasoner=reasoner, relation=relation, seed=seed)
            run_dir = out / f"reasoner-{_flag(reasoner)}_relation-{_flag(relation)}_seed-{seed}" if out else None
            start = time.perf_counter()
            res = train(run_cfg, run_dir, bank=bank if relation else None, data=data)
            last = res.rows[-1] if res.rows else {}
            run = AblationRun(reasoner, relation, seed, res.final_ap,
                              subset_ap(res.records, foggy) if foggy else float("nan"),
                              res.model.num_parameters(), float(last.get("loss_relation", 0.0)),
                              float(last.get("loss_guidance", 0.0)), time.perf_counter() - start)
            logger.info("ablation %s", run)
            result.runs.append(run)
            if out is not None:
                write_ablation(result, out)
    return result


def _subset_ids(data: Dataset, name: str) -> list[int]:
    return list(data.manifest.get("subsets", {}).get(name, []))


def _cell(v) -> str:
    if isinstance(v, float):
        return "n/a" if math.isnan(v) else repr(v)
    return str(v)


def write_ablation(result: AblationResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs_path, table_path = out / "ablation_runs.csv", out / "ablation_table.csv"
    with open(runs_path, "w", newline="") as fh:
        fh.write(f"# schema={ABLATION_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in result.runs:
            w.writerow([_cell(_flag(getattr(r, c)) if c in ("reasoner", "relation") else getattr(r, c))
                        for c in ABLATION_COLUMNS])
    with open(table_path, "w", newline="") as fh:
        fh.write(f"# schema={ABLATION_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for row in result.table():
            w.writerow([_cell(row[c]) for c in TABLE_COLUMNS])
    return runs_path, table_path


def format_table(result: AblationResult) -> str:
    lines = [f"{'reasoner':>9} {'relation':>9} {'AP':>7} {'AP fog':>7} {'params':>8}"]
    for row in result.table():
        lines.append(f"{row['reasoner']:>9} {row['relation']:>9} {100 * row['ap_median']:7.2f} "
                     f"{100 * row['ap_foggy_median']:7.2f} {row['parameters']:>8}")
    return "\n".join(lines)


# per-variation evaluation ------------------------------------------------------------------


def eval_by_variation(checkpoint, manifest=None) -> tuple[list[dict], list[ImageRecord]]:
    """Per-subset AP over a manifest's partitions plus the overall AP.

    Without a manifest the checkpoint's own evaluation split is regenerated. Empty subsets
    (or subsets without ground truth) report AP as NaN, written as ``n/a``.
    """
    model, cfg = load_checkpoint(checkpoint)
    if manifest is None:
        data = prepare_data(cfg)[1]
    else:
        doc = json.loads(Path(manifest).read_text()) if not isinstance(manifest, dict) else manifest
        data = to_dataset(samples_from_manifest(doc), doc)
    records = evaluate(model, data, cfg)
    rows = [{"subset": "all", "images": len(records), "ap": ap_from_records(records)}]
    for name, ids in data.manifest.get("subsets", {}).items():
        rows.append({"subset": name, "images": len(ids), "ap": subset_ap(records, ids)})
    return rows, records


def write_variation(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={VARIATION_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(("subset", "images", "ap"))
        for r in rows:
            w.writerow([r["subset"], r["images"], _cell(float(r["ap"]))])
    return path


# bank scatter -----------------------------------------------------------------------------


def bank_coordinates(bank: RepresentationBank, with_prompts: bool = True) -> np.ndarray:
    """Two principal components of ``Z`` (or of ``D`` when ``with_prompts`` is False)."""
    from sklearn.decomposition import PCA

    x = bank.z if with_prompts else bank.embeddings()
    return PCA(n_components=2, svd_solver="full").fit_transform(x)


def plot_bank(bank: RepresentationBank, out_prefix, with_prompts: bool = True) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (one row per bank entry) and ``<prefix>.svg``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    coords = bank_coordinates(bank, with_prompts)
    labels = bank.labels()
    kinds = ["exemplar" if k % (bank.num_variants + 1) == 0 else "variant" for k in range(bank.size)]
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# schema={COORDS_SCHEMA} source={'Z' if with_prompts else 'D'}\n")
        w = csv.writer(fh)
        w.writerow(("category_id", "category_name", "kind", "pc1", "pc2"))
        for k in range(bank.size):
            w.writerow([int(labels[k]), bank.category_names[labels[k]], kinds[k],
                        repr(float(coords[k, 0])), repr(float(coords[k, 1]))])
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for c, name in enumerate(bank.category_names):
        sel = labels == c
        ex = sel & (np.array(kinds) == "exemplar")
        ax.scatter(coords[sel & ~ex, 0], coords[sel & ~ex, 1], s=14, color=cmap(c % 10), label=name)
        ax.scatter(coords[ex, 0], coords[ex, 1], s=90, marker="*", color=cmap(c % 10), edgecolors="black")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("language instance representations" + (" (with prompts)" if with_prompts else ""))
    ax.legend(fontsize=7, loc="best")
    svg_path = prefix.with_suffix(".svg")
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return csv_path, svg_path


def read_coordinates(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    body = rows[1:]
    coords = np.array([[float(r[3]), float(r[4])] for r in body])
    labels = np.array([int(r[0]) for r in body])
    return coords, labels


def coordinate_silhouette(path) -> float:
    coords, labels = read_coordinates(path)
    return silhouette(coords, labels, metric="euclidean")
