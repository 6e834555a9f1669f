"""Language representation bank: instance descriptions, embeddings, categorical prompts.

Bank vectors live in canonical order: category-major, and inside each category the
exemplar first followed by its ``N`` variants. Row ``i * (N + 1)`` of the merged
matrix is therefore the exemplar of category ``i``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .optim import AdamW
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = ("car", "truck", "bus")
DEFAULT_DISTRACTORS = ("ground", "building", "tree", "traffic sign")
DEFAULT_GRIDS = {
    "view": ["side", "front", "bird"],
    "scale": ["small", "medium", "large"],
    "weather": ["clean", "night", "foggy"],
}
EXEMPLAR_TEMPLATE = "A photo of a {category}."
VARIANT_TEMPLATE = "A {view} view {medium} of a {scale} {category} on a {weather} scene."
MEDIA = ("picture", "photo")
ATTRIBUTE_KEYS = ("view", "scale", "weather")

HEADER_FIELDS = {"embedding_dim", "N_C", "N", "frozen", "seed"}
RECORD_FIELDS = {"category_id", "category_name", "kind", "attributes", "vector"}
RECORD_KINDS = ("exemplar", "variant", "prompt")


class BankFormatError(ValueError):
    """A bank file does not follow the documented schema."""


@dataclass(frozen=True)
class InstanceDescription:
    category_id: int
    category_name: str
    kind: str  # "exemplar" | "variant"
    attributes: dict = field(default_factory=dict)
    text: str = ""


def curate_descriptions(categories, grids=None, n_variants: int = 8, seed: int = 0,
                        template: str = VARIANT_TEMPLATE, media=MEDIA) -> list[InstanceDescription]:
    """One exemplar plus ``n_variants`` distinct attribute combinations per category.

    Combinations are drawn without replacement from the product of the grids.
    """
    grids = DEFAULT_GRIDS if grids is None else grids
    if not categories or any(not str(c).strip() for c in categories):
        raise ValueError("category names must be non-empty")
    if set(grids) != set(ATTRIBUTE_KEYS):
        raise ValueError(f"attribute grids need exactly the keys {ATTRIBUTE_KEYS}, got {sorted(grids)}")
    combos = list(itertools.product(*(grids[k] for k in ATTRIBUTE_KEYS)))
    if n_variants < 0 or n_variants > len(combos):
        raise ValueError(f"N={n_variants} exceeds the {len(combos)} distinct attribute combinations")
    rng = np.random.default_rng(seed)
    out = []
    for cid, name in enumerate(categories):
        out.append(InstanceDescription(cid, name, "exemplar", {}, EXEMPLAR_TEMPLATE.format(category=name)))
        chosen = rng.choice(len(combos), size=n_variants, replace=False)
        for k in chosen:
            attrs = dict(zip(ATTRIBUTE_KEYS, combos[int(k)]))
            medium = media[int(rng.integers(len(media)))]
            text = template.format(category=name, medium=medium, **attrs)
            out.append(InstanceDescription(cid, name, "variant", attrs, text))
    return out


@dataclass
class RepresentationBank:
    """Exemplar/variant embeddings ``D``, categorical prompts ``C`` and their sum ``Z``."""

    category_names: list[str]
    exemplars: np.ndarray  # (N_C, E)
    variants: np.ndarray  # (N_C, N, E)
    attributes: list[list[dict]]
    prompts: np.ndarray | None = None  # (N_C, E)
    frozen: bool = False
    seed: int = 0

    def __post_init__(self):
        self.exemplars = np.asarray(self.exemplars, dtype=np.float64)
        self.variants = np.asarray(self.variants, dtype=np.float64)
        nc, e = self.exemplars.shape
        if self.variants.shape[0] != nc or self.variants.shape[2:] != (e,):
            raise ValueError(f"variant array {self.variants.shape} does not match exemplars {self.exemplars.shape}")
        if self.prompts is not None:
            self.prompts = np.asarray(self.prompts, dtype=np.float64)
            if self.prompts.shape != (nc, e):
                raise ValueError(f"prompts {self.prompts.shape} must be ({nc}, {e})")
        if self.frozen:
            self._lock()

    @property
    def num_categories(self) -> int:
        return self.exemplars.shape[0]

    @property
    def num_variants(self) -> int:
        return self.variants.shape[1]

    @property
    def dim(self) -> int:
        return self.exemplars.shape[1]

    @property
    def size(self) -> int:
        return self.num_categories * (self.num_variants + 1)

    def embeddings(self) -> np.ndarray:
        """``D`` flattened to canonical order, (|Z|, E)."""
        return np.concatenate([self.exemplars[:, None, :], self.variants], axis=1).reshape(-1, self.dim)

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_categories), self.num_variants + 1)

    def exemplar_row(self, category: int) -> int:
        return category * (self.num_variants + 1)

    def category_id(self, name: str) -> int:
        return self.category_names.index(name)

    @property
    def z(self) -> np.ndarray:
        prompts = self.prompts if self.prompts is not None else np.zeros_like(self.exemplars)
        return merge_prompts(self.embeddings(), prompts, self.num_variants)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.z).tobytes()).hexdigest()

    def _lock(self):
        for arr in (self.exemplars, self.variants, self.prompts):
            if arr is not None:
                arr.setflags(write=False)

    def with_prompts(self, prompts: np.ndarray) -> RepresentationBank:
        if self.frozen:
            raise RuntimeError("bank is frozen")
        return dataclasses.replace(self, exemplars=self.exemplars.copy(), variants=self.variants.copy(),
                                   prompts=np.array(prompts, dtype=np.float64))

    def freeze(self) -> RepresentationBank:
        if self.prompts is None:
            raise RuntimeError("categorical prompts have not been trained; nothing to freeze")
        return dataclasses.replace(self, exemplars=self.exemplars.copy(), variants=self.variants.copy(),
                                   prompts=self.prompts.copy(), frozen=True)


def merge_prompts(d: np.ndarray, c: np.ndarray, n_variants: int) -> np.ndarray:
    """Add each category's prompt to every one of its ``n_variants + 1`` rows of ``d``."""
    d = np.asarray(d, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if d.ndim != 2 or c.ndim != 2 or d.shape[1] != c.shape[1]:
        raise ValueError(f"prompt dim {c.shape} does not match embedding dim {d.shape}")
    if d.shape[0] != c.shape[0] * (n_variants + 1):
        raise ValueError(f"{d.shape[0]} rows cannot hold {c.shape[0]} categories x {n_variants + 1}")
    return d + np.repeat(c, n_variants + 1, axis=0)


def embed_synthetic(descriptions: list[InstanceDescription], dim: int = 64, sigma_in: float = 0.3,
                    mu_out: float = 1.0, seed: int = 0, orthogonal: bool = False) -> RepresentationBank:
    """Stand-in sentence embedder with controllable cluster geometry.

    Centroid of category i is ``normalize(s + mu_out * u_i)`` for a shared unit direction
    ``s`` and random unit directions ``u_i``; ``orthogonal=True`` uses orthonormal centroids
    instead. Exemplars sit on the centroid and variants are ``normalize(centroid + eps)``
    with ``eps ~ N(0, sigma_in^2 / dim)`` per coordinate, so the perturbation norm is about
    ``sigma_in``. In high dimension the expected exemplar cosines are
    ``1 / (1 + mu_out^2)`` between categories and ``1 / sqrt(1 + sigma_in^2)`` within one,
    so categories separate whenever ``mu_out^2 > sqrt(1 + sigma_in^2) - 1``.
    """
    if dim < 8:
        raise ValueError(f"embedding dim must be >= 8, got {dim}")
    if sigma_in < 0 or mu_out <= 0:
        raise ValueError(f"need sigma_in >= 0 and mu_out > 0, got {sigma_in}, {mu_out}")
    names, attrs = _group(descriptions)
    nc = len(names)
    n = len(attrs[0])
    rng = np.random.default_rng(seed)
    if orthogonal:
        if nc > dim:
            raise ValueError(f"cannot place {nc} orthogonal centroids in {dim} dimensions")
        q, _ = np.linalg.qr(rng.normal(size=(dim, nc)))
        centroids = q.T.copy()
    else:
        shared = _unit(rng.normal(size=dim))
        dirs = _unit(rng.normal(size=(nc, dim)))
        centroids = _unit(shared[None, :] + mu_out * dirs)
    noise = rng.normal(size=(nc, n, dim)) * (sigma_in / np.sqrt(dim))
    variants = _unit(centroids[:, None, :] + noise) if n else np.zeros((nc, 0, dim))
    return RepresentationBank(names, centroids, variants, attrs, seed=seed)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _group(descriptions):
    names: list[str] = []
    attrs: list[list[dict]] = []
    seen_exemplar: set[int] = set()
    for d in descriptions:
        while len(names) <= d.category_id:
            names.append("")
            attrs.append([])
        names[d.category_id] = d.category_name
        if d.kind == "exemplar":
            if d.category_id in seen_exemplar:
                raise ValueError(f"category {d.category_id} has more than one exemplar")
            seen_exemplar.add(d.category_id)
        else:
            attrs[d.category_id].append(dict(d.attributes))
    missing = set(range(len(names))) - seen_exemplar
    if missing:
        raise ValueError(f"categories without an exemplar: {sorted(missing)}")
    if len({len(a) for a in attrs}) > 1:
        raise ValueError("every category needs the same number of variants")
    return names, attrs


# contrastive prompt training --------------------------------------------------------


def supervised_contrastive_loss(z: Tensor, labels: np.ndarray, temperature: float) -> Tensor:
    """Normalized-temperature cross-entropy with same-label rows as positives."""
    m = z.shape[0]
    zn = T.l2_normalize(z)
    sim = T.scale(zn @ zn.transpose(1, 0), 1.0 / temperature)
    eye = np.eye(m, dtype=bool)
    masked = T.add(sim, Tensor(np.where(eye, -1e9, 0.0)))
    logp = T.log_softmax(masked, axis=-1)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        return T.scale(T.sum_(logp), 0.0)
    weight = np.where(pos, 1.0, 0.0) / np.maximum(counts, 1)[:, None]
    return T.scale(T.sum_(T.mul(logp, Tensor(weight))), -1.0 / anchors.sum())


def train_categorical_prompts(bank: RepresentationBank, temperature: float = 0.1, epochs: int = 200,
                              lr: float = 0.01, seed: int = 0, init_std: float = 0.02):
    """Fit one additive prompt per category with a supervised contrastive objective.

    Returns ``(prompts, curve)``; ``curve[k]`` is the loss before update ``k``. ``D`` is
    never modified.
    """
    if np.any(np.linalg.norm(bank.embeddings(), axis=1) <= T.COSINE_EPS):
        raise ValueError("bank contains zero-norm embeddings")
    rng = np.random.default_rng(seed)
    prompts = Tensor(rng.normal(0.0, init_std, size=(bank.num_categories, bank.dim)), requires_grad=True)
    d = Tensor(bank.embeddings())
    labels = bank.labels()
    opt = AdamW([prompts], lr=lr)
    curve = []
    for epoch in range(epochs):
        z = T.add(d, T.take(prompts, labels, axis=0))
        loss = supervised_contrastive_loss(z, labels, temperature)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"contrastive loss diverged at epoch {epoch} (loss={value}, "
                f"max |c|={np.abs(prompts.data).max():.3g})")
        curve.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return prompts.data.copy(), curve


# geometry diagnostics -------------------------------------------------------------


def cosine_margin(x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean intra-class cosine, mean inter-class cosine) over distinct pairs."""
    xn = _unit(np.asarray(x, dtype=np.float64))
    cos = xn @ xn.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = cos[same & off]
    inter = cos[~same]
    return float(intra.mean()) if intra.size else 1.0, float(inter.mean())


def silhouette(x: np.ndarray, labels: np.ndarray, metric: str = "cosine") -> float:
    """Mean silhouette coefficient from the full pairwise distance matrix."""
    x = np.asarray(x, dtype=np.float64)
    if metric == "cosine":
        xn = _unit(x)
        dist = 1.0 - xn @ xn.T
    elif metric == "euclidean":
        sq = (x**2).sum(axis=1)
        dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(dist, 0.0)
    classes = np.unique(labels)
    scores = np.zeros(len(labels))
    for k in range(len(labels)):
        own = labels == labels[k]
        if own.sum() == 1:
            continue
        a = dist[k, own].sum() / (own.sum() - 1)
        b = min(dist[k, labels == c].mean() for c in classes if c != labels[k])
        scores[k] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


# persistence --------------------------------------------------------------------------


def save_bank(bank: RepresentationBank, path) -> None:
    """Write the bank as JSON: ``{"header": {...}, "records": [...]}``."""
    records = []
    for cid, name in enumerate(bank.category_names):
        records.append(_record(cid, name, "exemplar", {}, bank.exemplars[cid]))
        for attrs, vec in zip(bank.attributes[cid], bank.variants[cid]):
            records.append(_record(cid, name, "variant", attrs, vec))
    if bank.prompts is not None:
        for cid, name in enumerate(bank.category_names):
            records.append(_record(cid, name, "prompt", {}, bank.prompts[cid]))
    header = {"embedding_dim": bank.dim, "N_C": bank.num_categories, "N": bank.num_variants,
              "frozen": bool(bank.frozen), "seed": int(bank.seed)}
    Path(path).write_text(json.dumps({"header": header, "records": records}, indent=1))


def _record(cid, name, kind, attrs, vec):
    return {"category_id": cid, "category_name": name, "kind": kind,
            "attributes": dict(attrs), "vector": [float(v) for v in vec]}


def load_embeddings(path) -> RepresentationBank:
    """Read and validate a bank file; prompts are loaded when present."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BankFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or set(doc) != {"header", "records"}:
        raise BankFormatError(f"{path}: top level must hold exactly 'header' and 'records'")
    header = doc["header"]
    if set(header) != HEADER_FIELDS:
        raise BankFormatError(f"header fields {sorted(header)} != {sorted(HEADER_FIELDS)}")
    dim, nc, n = int(header["embedding_dim"]), int(header["N_C"]), int(header["N"])
    names = [None] * nc
    exemplars = np.full((nc, dim), np.nan)
    variants = np.full((nc, n, dim), np.nan)
    prompts = np.full((nc, dim), np.nan)
    attrs: list[list[dict]] = [[] for _ in range(nc)]
    have_ex = [False] * nc
    have_prompt = [False] * nc
    for k, rec in enumerate(doc["records"]):
        where = f"record {k}"
        if not isinstance(rec, dict) or set(rec) != RECORD_FIELDS:
            got = sorted(rec) if isinstance(rec, dict) else type(rec).__name__
            raise BankFormatError(f"{where}: fields {got} != {sorted(RECORD_FIELDS)}")
        cid = rec["category_id"]
        if not isinstance(cid, int) or not 0 <= cid < nc:
            raise BankFormatError(f"{where}: category_id {cid!r} outside [0, {nc})")
        if names[cid] is None:
            names[cid] = rec["category_name"]
        elif names[cid] != rec["category_name"]:
            raise BankFormatError(f"{where}: category {cid} named both {names[cid]!r} and {rec['category_name']!r}")
        vec = rec["vector"]
        if not isinstance(vec, list) or len(vec) != dim:
            size = len(vec) if isinstance(vec, list) else "?"
            raise BankFormatError(f"{where}: vector has {size} entries, header says embedding_dim={dim}")
        kind = rec["kind"]
        if kind == "exemplar":
            if have_ex[cid]:
                raise BankFormatError(f"{where}: second exemplar for category {cid}")
            have_ex[cid] = True
            exemplars[cid] = vec
        elif kind == "variant":
            if len(attrs[cid]) >= n:
                raise BankFormatError(f"{where}: more than N={n} variants for category {cid}")
            if not isinstance(rec["attributes"], dict) or set(rec["attributes"]) - set(ATTRIBUTE_KEYS):
                raise BankFormatError(f"{where}: attributes must use keys from {ATTRIBUTE_KEYS}")
            variants[cid, len(attrs[cid])] = vec
            attrs[cid].append(dict(rec["attributes"]))
        elif kind == "prompt":
            if have_prompt[cid]:
                raise BankFormatError(f"{where}: second prompt for category {cid}")
            have_prompt[cid] = True
            prompts[cid] = vec
        else:
            raise BankFormatError(f"{where}: unknown kind {kind!r}")
    for cid in range(nc):
        if not have_ex[cid]:
            raise BankFormatError(f"category {cid} ({names[cid]!r}) has no exemplar record")
        if len(attrs[cid]) != n:
            raise BankFormatError(f"category {cid} has {len(attrs[cid])} variants, header says N={n}")
    if any(have_prompt) and not all(have_prompt):
        raise BankFormatError(f"prompt records missing for categories "
                              f"{[c for c in range(nc) if not have_prompt[c]]}")
    if header["frozen"] and not all(have_prompt):
        raise BankFormatError("frozen bank without prompt records")
    return RepresentationBank(names, exemplars, variants, attrs,
                              prompts=prompts if all(have_prompt) else None,
                              frozen=bool(header["frozen"]), seed=int(header["seed"]))


def freeze_and_save(bank: RepresentationBank, path) -> RepresentationBank:
    frozen = bank if bank.frozen else bank.freeze()
    save_bank(frozen, path)
    return frozen


def load_frozen(path) -> RepresentationBank:
    bank = load_embeddings(path)
    if not bank.frozen:
        raise BankFormatError(f"{path}: bank is not frozen; train and freeze prompts before detector training")
    return bank


def build_bank(targets=DEFAULT_TARGETS, distractors=DEFAULT_DISTRACTORS, n_variants: int = 8,
               dim: int = 64, sigma_in: float = 0.3, mu_out: float = 1.0, seed: int = 0,
               temperature: float = 0.1, epochs: int = 200, lr: float = 0.01) -> RepresentationBank:
    """Curate, embed, train prompts and freeze: the full preparation done before detector training."""
    descs = curate_descriptions(list(targets) + list(distractors), DEFAULT_GRIDS, n_variants, seed)
    bank = embed_synthetic(descs, dim, sigma_in, mu_out, seed)
    prompts, curve = train_categorical_prompts(bank, temperature, epochs, lr, seed)
    logger.info("prompt training: loss %.4f -> %.4f", curve[0] if curve else float("nan"),
                curve[-1] if curve else float("nan"))
    return bank.with_prompts(prompts).freeze()
