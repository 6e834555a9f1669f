"""Toy query-based detector, bipartite matching, detection losses and the total objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .nn import (Conv2d, FeedForward, LayerNorm, Linear, Module, MultiheadAttention,
                 activation, param, sinusoid_2d, sinusoid_points)
from .reasoner import SceneContextPrompt, VisualSemanticReasoner, merge
from .tensor import Tensor

logger = logging.getLogger(__name__)

MATCH_WEIGHTS = (1.0, 5.0, 2.0)  # class, L1, IoU


@dataclass
class ModelConfig:
    num_classes: int = 3
    image_size: int = 64
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 6
    queries: int = 20
    ffn_dim: int = 128
    backbone_channels: tuple = (16, 32, 64)
    activation: str = "relu"
    reasoner: bool = True
    relation: bool = True
    bank_dim: int = 64
    style: str = "uavdt"
    guidance_dim: int = 32
    reasoner_after: int | None = None  # encoder layers run before the reasoner; None = all

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // 2 ** len(self.backbone_channels)
        return side, side


@dataclass
class DetectionOutput:
    features: list[Tensor]  # per layer (B, Q, dim)
    logits: list[Tensor]  # per layer (B, Q, K + 1)
    boxes: list[Tensor]  # per layer (B, Q, 4), normalized cx, cy, w, h
    reasoner_output: Tensor | None = None
    memory: Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.features)


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (n, 4) cx, cy, w, h
    labels: np.ndarray  # (n,)
    attributes: dict = field(default_factory=dict)


# building blocks -------------------------------------------------------------------------


class EncoderLayer(Module):
    def __init__(self, rng, dim, heads, ffn_dim, act):
        self.attn = MultiheadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_dim, act)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        qk = T.add_broadcast(x, pos)
        a, _ = self.attn(qk, qk, x)
        x = self.norm1(T.add(x, a))
        return self.norm2(T.add(x, self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, rng, dim, heads, ffn_dim, act):
        self.self_attn = MultiheadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiheadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_dim, act)
        self.norm3 = LayerNorm(dim)

    def __call__(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, memory_key: Tensor,
                 spatial_bias: Tensor | None = None) -> Tensor:
        q = T.add(tgt, query_pos)
        a, _ = self.self_attn(q, q, tgt)
        tgt = self.norm1(T.add(tgt, a))
        a, _ = self.cross_attn(T.add(tgt, query_pos), memory_key, memory, spatial_bias)
        tgt = self.norm2(T.add(tgt, a))
        return self.norm3(T.add(tgt, self.ffn(tgt)))


def _reference_logits(queries: int) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(queries)))
    rows = int(np.ceil(queries / cols))
    ref = np.zeros((queries, 4))
    for k in range(queries):
        r, c = divmod(k, cols)
        ref[k] = [(c + 0.5) / cols, (r + 0.5) / rows, 0.15, 0.15]
    return np.log(ref / (1 - ref))


def spatial_prior(boxes: Tensor, grid: tuple[int, int]) -> Tensor:
    """Gaussian log-prior over feature cells centred on each box, (B, Q, H*W).

    ``-((x - cx)^2 / (w^2 + s^2) + (y - cy)^2 / (h^2 + s^2))`` with ``s`` one cell width,
    so attention is drawn towards the box a query currently predicts.
    """
    height, width = grid
    b, q, _ = boxes.shape
    ys, xs = np.mgrid[0:height, 0:width]
    centres = {0: (xs.reshape(-1) + 0.5) / width, 1: (ys.reshape(-1) + 0.5) / height}
    cells = {0: 1.0 / width, 1: 1.0 / height}
    ones = Tensor(np.ones((1, height * width)))
    terms = []
    for axis in (0, 1):
        c = T.matmul(T.slice_(boxes, 2, axis, axis + 1), ones)
        size = T.matmul(T.slice_(boxes, 2, axis + 2, axis + 3), ones)
        d = T.sub(Tensor(np.broadcast_to(centres[axis], (b, q, height * width)).copy()), c)
        spread = T.add(T.mul(size, size), Tensor(np.full(size.shape, cells[axis] ** 2)))
        terms.append(T.div(T.mul(d, d), spread))
    return T.scale(T.add(terms[0], terms[1]), -1.0)


class BaselineDetector(Module):
    """Backbone -> encoder -> decoder -> per-layer heads, with no language components.

    Each query carries a reference box. Its positional query is a learned projection of
    the sinusoidal encoding of the current box centre, and every decoder layer refines
    the box in logit space, so layer l predicts ``sigmoid(delta_l + logit(box_{l-1}))``.
    Cross-attention logits carry a Gaussian prior around the current box
    (:func:`spatial_prior`).
    The first reference boxes are learned and start on a regular grid.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        chans = [3, *cfg.backbone_channels]
        self.backbone = [Conv2d(rng, chans[k], chans[k + 1], 3, stride=2, padding=1)
                         for k in range(len(cfg.backbone_channels))]
        self.input_proj = Linear(rng, chans[-1], cfg.dim)
        self.encoder = [EncoderLayer(rng, cfg.dim, cfg.heads, cfg.ffn_dim, cfg.activation)
                        for _ in range(cfg.enc_layers)]
        self.query_embed = param(rng.normal(0.0, 1.0, (cfg.queries, cfg.dim)))
        self.query_pos_proj = Linear(rng, cfg.dim, cfg.dim)
        self.decoder = [DecoderLayer(rng, cfg.dim, cfg.heads, cfg.ffn_dim, cfg.activation)
                        for _ in range(cfg.dec_layers)]
        self.class_head = Linear(rng, cfg.dim, cfg.num_classes + 1)
        self.box_hidden = Linear(rng, cfg.dim, cfg.dim)
        self.box_out = Linear(rng, cfg.dim, 4, zero_init=True)
        self.ref_logits = param(_reference_logits(cfg.queries))
        h, w = cfg.grid
        self._pos = Tensor(sinusoid_2d(h, w, cfg.dim))

    def stem(self, images: np.ndarray) -> Tensor:
        """Backbone and input projection: (B, 3, S, S) -> (B, H*W, dim) tokens."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise T.ShapeError(f"expected images (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
        x = Tensor(images)
        act = activation(cfg.activation)
        for conv in self.backbone:
            x = act(conv(x))
        b, c, h, w = x.shape
        return self.input_proj(x.reshape(b, c, h * w).transpose(0, 2, 1))

    def encode(self, images: np.ndarray, prompt=None, mode: str = "train") -> tuple[Tensor, Tensor | None]:
        """Encoder memory, with the reasoner merged in after ``reasoner_after`` layers."""
        depth = len(self.encoder) if self.cfg.reasoner_after is None else self.cfg.reasoner_after
        x = self.stem(images)
        extra = None
        for k, layer in enumerate(self.encoder):
            if k == depth:
                x, extra = self.contextualize(x, prompt, mode)
            x = layer(x, self._pos)
        if depth == len(self.encoder):
            x, extra = self.contextualize(x, prompt, mode)
        return x, extra

    def contextualize(self, memory: Tensor, prompt, mode: str):
        return memory, None

    def decode(self, memory: Tensor) -> DetectionOutput:
        b = memory.shape[0]
        cfg = self.cfg
        memory_key = T.add_broadcast(memory, self._pos)
        tgt = T.add_broadcast(Tensor(np.zeros((b, cfg.queries, cfg.dim))), self.query_embed)
        box_logits = T.add_broadcast(Tensor(np.zeros((b, cfg.queries, 4))), self.ref_logits)
        box = T.sigmoid(box_logits)
        feats, logits, boxes = [], [], []
        act = activation(cfg.activation)
        for layer in self.decoder:
            query_pos = self.query_pos_proj(sinusoid_points(T.slice_(box, 2, 0, 2), cfg.dim, cfg.grid))
            tgt = layer(tgt, query_pos, memory, memory_key, spatial_prior(box, cfg.grid))
            feats.append(tgt)
            logits.append(self.class_head(tgt))
            box_logits = T.add(self.box_out(act(self.box_hidden(tgt))), box_logits)
            box = T.sigmoid(box_logits)
            boxes.append(box)
        return DetectionOutput(feats, logits, boxes)

    def __call__(self, images: np.ndarray, prompt: SceneContextPrompt | None = None,
                 mode: str = "train") -> DetectionOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        memory, extra = self.encode(images, prompt, mode)
        out = self.decode(memory)
        out.reasoner_output = extra
        out.memory = memory
        return out


class LanguageGuidedDetector(BaselineDetector):
    """Baseline plus the visual semantic reasoner and the object-feature projection.

    Each component is only constructed when its flag is on, so with both flags off the
    parameter set and forward function equal the baseline's.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__(cfg, seed)
        rng = np.random.default_rng([seed, 1])
        if cfg.reasoner:
            self.reasoner = VisualSemanticReasoner(rng, cfg.dim, cfg.heads, cfg.grid,
                                                   cfg.style, cfg.guidance_dim)
        if cfg.relation:
            self.object_proj = Linear(rng, cfg.dim, cfg.bank_dim)

    def contextualize(self, memory: Tensor, prompt, mode: str):
        if not self.cfg.reasoner:
            return memory, None
        if prompt is None:
            raise ValueError("the reasoner needs a scene context prompt")
        out = self.reasoner(memory, prompt)
        return merge(memory, out), out


def build_detector(cfg: ModelConfig, seed: int = 0) -> BaselineDetector:
    return LanguageGuidedDetector(cfg, seed)


# boxes and matching ------------------------------------------------------------------------


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of cx,cy,w,h boxes, (n, m)."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def matching_cost(probs: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  weights=MATCH_WEIGHTS) -> np.ndarray:
    """(Q, n) cost: -w_cls * p(gt class) + w_l1 * L1 + w_iou * (1 - IoU)."""
    w_cls, w_l1, w_iou = weights
    cls = -probs[:, gt_labels]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    iou = box_iou(boxes, gt_boxes)
    return w_cls * cls + w_l1 * l1 + w_iou * (1.0 - iou)


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment of ground truths (columns) to queries (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    q, n = cost.shape
    if n > q:
        raise ValueError(f"{n} ground-truth objects exceed {q} queries")
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def match_layer(logits: Tensor, boxes: Tensor, targets: list[GroundTruth], weights=MATCH_WEIGHTS):
    """Per-image assignments for one decoder layer."""
    probs = T.softmax(Tensor(logits.data), axis=-1).data
    out = []
    for b, gt in enumerate(targets):
        cost = matching_cost(probs[b], boxes.data[b], gt.boxes, gt.labels, weights)
        out.append(hungarian_match(cost))
    return out


def match_all_layers(output: DetectionOutput, targets: list[GroundTruth], weights=MATCH_WEIGHTS):
    return [match_layer(lg, bx, targets, weights) for lg, bx in zip(output.logits, output.boxes)]


# losses ------------------------------------------------------------------------------------


def box_iou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable IoU between matched rows of pred (M, 4) and constant gt (M, 4)."""
    g = cxcywh_to_xyxy(gt)
    cx, cy, w, h = (pred[:, k] for k in range(4))
    hw, hh = T.scale(w, 0.5), T.scale(h, 0.5)
    px0, px1 = T.sub(cx, hw), T.add(cx, hw)
    py0, py1 = T.sub(cy, hh), T.add(cy, hh)
    iw = T.relu(T.sub(T.minimum(px1, Tensor(g[:, 2])), T.maximum(px0, Tensor(g[:, 0]))))
    ih = T.relu(T.sub(T.minimum(py1, Tensor(g[:, 3])), T.maximum(py0, Tensor(g[:, 1]))))
    inter = T.mul(iw, ih)
    gt_area = Tensor((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1]))
    union = T.sub(T.add(T.mul(w, h), gt_area), inter)
    return T.div(inter, union)


def layer_detection_loss(logits: Tensor, boxes: Tensor, targets: list[GroundTruth], assignment,
                         num_classes: int, eos_coef: float = 0.1,
                         weights=MATCH_WEIGHTS) -> tuple[Tensor, Tensor]:
    b, q, k1 = logits.shape
    classes = np.full(b * q, num_classes, dtype=np.int64)
    cls_w = np.full(b * q, eos_coef)
    rows, gt_boxes = [], []
    for i, (gt, (qi, gi)) in enumerate(zip(targets, assignment)):
        flat = i * q + qi
        classes[flat] = gt.labels[gi]
        cls_w[flat] = 1.0
        rows.extend(flat.tolist())
        gt_boxes.append(gt.boxes[gi])
    l_cls = T.cross_entropy(logits.reshape(b * q, k1), classes, cls_w)
    if not rows:
        return l_cls, Tensor(0.0)
    pred = T.take(boxes.reshape(b * q, 4), np.array(rows), axis=0)
    gtb = np.concatenate(gt_boxes, axis=0)
    m = len(rows)
    l1 = T.scale(T.sum_(T.abs_(T.sub(pred, Tensor(gtb)))), 1.0 / m)
    one_minus_iou = T.scale(T.sub(Tensor(np.ones(m)), box_iou_tensor(pred, gtb)).sum(), 1.0 / m)
    return l_cls, T.add(T.scale(l1, weights[1]), T.scale(one_minus_iou, weights[2]))


def detection_loss(output: DetectionOutput, targets: list[GroundTruth], assignments, num_classes: int,
                   eos_coef: float = 0.1, weights=MATCH_WEIGHTS) -> tuple[Tensor, Tensor]:
    """Classification and box losses averaged over decoder layers."""
    cls_terms, box_terms = [], []
    for lg, bx, asg in zip(output.logits, output.boxes, assignments):
        c, bb = layer_detection_loss(lg, bx, targets, asg, num_classes, eos_coef, weights)
        cls_terms.append(c)
        box_terms.append(bb)
    n = len(cls_terms)
    return (T.scale(T.elementwise_sum(cls_terms), 1.0 / n),
            T.scale(T.elementwise_sum(box_terms), 1.0 / n))


def extract_object_features(features: Tensor, assignment, targets: list[GroundTruth],
                            projection: Linear, category_ids) -> dict[int, Tensor]:
    """Per present class: mean of its matched query features, projected to the bank dim.

    Keys are bank category ids (``category_ids[k]`` for detector class ``k``).
    """
    b, q, dim = features.shape
    members: dict[int, list[int]] = {}
    for i, (gt, (qi, gi)) in enumerate(zip(targets, assignment)):
        for query, obj in zip(qi, gi):
            members.setdefault(int(gt.labels[obj]), []).append(i * q + int(query))
    for k in {int(c) for gt in targets for c in gt.labels}:
        if k not in members:
            raise RuntimeError(f"class {k} present in ground truth but no query matched it")
    if not members:
        return {}
    classes = sorted(members)
    avg = np.zeros((len(classes), b * q))
    for r, k in enumerate(classes):
        avg[r, members[k]] = 1.0 / len(members[k])
    pooled = T.matmul(Tensor(avg), features.reshape(b * q, dim))
    projected = projection(pooled)
    return {int(category_ids[k]): projected[r] for r, k in enumerate(classes)}


def total_loss(l_cls: Tensor, l_bbox: Tensor, l_rel: Tensor | None = None,
               l_guid: Tensor | None = None, lambda_guidance: float = 1.0) -> Tensor:
    """L_cls + L_bbox + L_R + lambda_g * L_guidance; absent terms contribute nothing."""
    terms = [l_cls, l_bbox]
    if l_rel is not None:
        terms.append(l_rel)
    if l_guid is not None and lambda_guidance:
        terms.append(T.scale(l_guid, lambda_guidance))
    return T.elementwise_sum(terms)


def predictions(output: DetectionOutput, layer: int = -1):
    """Per-image (boxes, scores, labels) from one layer; score = max non-background prob."""
    probs = T.softmax(Tensor(output.logits[layer].data), axis=-1).data[..., :-1]
    labels = probs.argmax(-1)
    scores = probs.max(-1)
    boxes = output.boxes[layer].data
    return [(boxes[b], scores[b], labels[b]) for b in range(boxes.shape[0])]
