"""Finite-difference gradient suites: tensor ops, relation loss, reasoner, tiny end-to-end model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bank import build_bank, curate_descriptions, embed_synthetic
from .detector import GroundTruth, ModelConfig, build_detector, detection_loss, extract_object_features, match_all_layers, total_loss
from .reasoner import PROMPT_POOLS, SceneContextPrompt, VisualSemanticReasoner
from .relation import RelationTargets, per_layer_relation_loss, relation_loss
from .synth import TARGET_CATEGORIES, generate_sample
from .tensor import Tensor

TOLERANCES = {"tensor-ops": 1e-4, "relation": 1e-4, "reasoner": 1e-4, "end-to-end": 1e-3}


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<11} max rel err {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} checks, {self.seconds:.1f}s)")


def op_cases(rng: np.random.Generator) -> dict:
    """Scalar functions covering every differentiable primitive, with input shapes."""
    w = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=3))
    g = Tensor(rng.normal(size=3) + 1.0)
    m = Tensor(rng.normal(size=(5, 3)))
    p = Tensor(rng.dirichlet(np.ones(3)))
    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)))
    return {
        "arith": (lambda x: T.sum_(T.div(T.mul(T.sub(x, T.scale(x, 0.3)), T.exp(x)),
                                         T.sqrt(T.add(T.mul(x, x), Tensor(np.ones(x.shape)))))), (2, 4)),
        "linear": (lambda x: T.sum_(T.gelu(T.linear(x, w, b))), (2, 4)),
        "batched_matmul": (lambda x: T.sum_(T.sigmoid(x @ x.transpose(0, 2, 1))), (2, 3, 4)),
        "layer_norm": (lambda x: T.sum_(T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))), (2, 3)),
        "softmax_kl": (lambda x: T.kl_divergence(p, T.softmax(x, temperature=0.7)), (3,)),
        "cross_entropy": (lambda x: T.cross_entropy(x, [0, 2, 1], [1.0, 0.5, 2.0]), (3, 3)),
        "cosine": (lambda x: T.sum_(T.exp(T.cosine_rows(x, m))), (3,)),
        "sin_cos": (lambda x: T.sum_(T.mul(T.sin(x), T.cos(T.scale(x, 2.0)))), (3, 4)),
        "conv2d": (lambda x: T.sum_(T.mul(T.conv2d(x, kernel, None, 2, 1), T.conv2d(x, kernel, None, 2, 1))),
                   (1, 1, 5, 5)),
    }


def check_parameters(loss_fn, params, rng: np.random.Generator, per_param: int = 2,
                     h: float = 1e-5) -> tuple[float, int]:
    """Compare backprop with central differences on sampled coordinates of each parameter.

    ``loss_fn()`` must rebuild the graph from the current parameter values. Returns
    (max relative error, number of coordinates checked).
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst, count = 0.0, 0
    with T.no_grad():
        for _, p in params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            coords = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + h
                fp = loss_fn().item()
                flat[k] = orig - h
                fm = loss_fn().item()
                flat[k] = orig
                numeric = (fp - fm) / (2 * h)
                err = abs(grad.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
                count += 1
    return worst, count


def _timed(name, fn) -> SuiteResult:
    start = time.perf_counter()
    err, n = fn()
    return SuiteResult(name, err, TOLERANCES[name], n, time.perf_counter() - start)


def tensor_suite(seeds=range(5)) -> SuiteResult:
    def run():
        worst, n = 0.0, 0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for f, shape in op_cases(rng).values():
                worst = max(worst, T.finite_difference_check(f, Tensor(rng.normal(size=shape))))
                n += 1
        return worst, n
    return _timed("tensor-ops", run)


def small_bank(nc: int = 4, n: int = 3, dim: int = 12, seed: int = 0):
    descs = curate_descriptions([f"c{k}" for k in range(nc)], n_variants=n, seed=seed)
    bank = embed_synthetic(descs, dim=dim, sigma_in=0.3, seed=seed)
    return bank.with_prompts(np.random.default_rng(seed).normal(0, 0.05, (nc, dim))).freeze()


def relation_suite(seeds=range(5)) -> SuiteResult:
    def run():
        worst, n = 0.0, 0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            bank = small_bank(seed=seed)
            targets = RelationTargets(bank, 0.5)
            fixed = {0: Tensor(rng.normal(size=bank.dim)), 3: Tensor(rng.normal(size=bank.dim))}
            f = lambda x: relation_loss({**fixed, 1: x}, targets)  # noqa: E731
            worst = max(worst, T.finite_difference_check(f, Tensor(rng.normal(size=bank.dim))))
            n += 1
        return worst, n
    return _timed("relation", run)


def reasoner_suite(seed: int = 0) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        r = VisualSemanticReasoner(rng, 8, 2, (2, 2), "uavdt", guidance_dim=4)
        r.attn.out_proj.weight.data = rng.normal(0, 0.3, (8, 8))
        prompt = SceneContextPrompt.from_text(PROMPT_POOLS["uavdt"][0])
        attrs = [{"weather": "foggy", "view": "side", "altitude": "high"},
                 {"weather": "night", "view": "bird", "altitude": "low"}]
        features = Tensor(rng.normal(size=(2, 4, 8)))

        def loss():
            out = r(features, prompt)
            return T.add(r.scene_guidance_loss(out, attrs), T.mean(T.mul(out, out)))

        worst, n = check_parameters(loss, r.named_parameters(), rng, per_param=3)
        w2 = T.finite_difference_check(lambda x: r.scene_guidance_loss(r(x, prompt), attrs), features)
        return max(worst, w2), n + features.size
    return _timed("reasoner", run)


def tiny_config() -> ModelConfig:
    return ModelConfig(dim=16, heads=2, enc_layers=1, dec_layers=2, queries=4, ffn_dim=16,
                       backbone_channels=(4, 8, 16), activation="gelu", reasoner=True,
                       relation=True, bank_dim=12, guidance_dim=4)


def end_to_end_suite(seed: int = 0, per_param: int = 2) -> SuiteResult:
    """Total loss (cls + bbox + relation + guidance) of a tiny detector, fixed matching."""
    def run():
        rng = np.random.default_rng(seed)
        cfg = tiny_config()
        model = build_detector(cfg, seed)
        model.reasoner.attn.out_proj.weight.data = rng.normal(0, 0.3, (cfg.dim, cfg.dim))
        samples = [generate_sample(s, "uavdt") for s in (1, 2)]
        images = np.stack([s.chw() for s in samples])
        targets = [GroundTruth(s.boxes[:3], s.labels[:3], s.attributes) for s in samples]
        bank = build_bank(targets=TARGET_CATEGORIES, distractors=("tree",), n_variants=2, dim=12,
                          seed=seed, epochs=5)
        rel = RelationTargets(bank, 0.5)
        ids = [bank.category_id(c) for c in TARGET_CATEGORIES]
        prompt = SceneContextPrompt.from_text(PROMPT_POOLS["uavdt"][1])
        with T.no_grad():
            assignments = match_all_layers(model(images, prompt), targets)

        def loss():
            out = model(images, prompt, mode="train")
            l_cls, l_bbox = detection_loss(out, targets, assignments, cfg.num_classes)
            feats = [extract_object_features(f, a, targets, model.object_proj, ids)
                     for f, a in zip(out.features, assignments)]
            l_rel = per_layer_relation_loss(feats, rel)
            l_guid = model.reasoner.scene_guidance_loss(out.reasoner_output, [t.attributes for t in targets])
            return total_loss(l_cls, l_bbox, l_rel, l_guid, 1.0)

        return check_parameters(loss, model.named_parameters(), rng, per_param=per_param)
    return _timed("end-to-end", run)


def run_all() -> list[SuiteResult]:
    return [tensor_suite(), relation_suite(), reasoner_suite(), end_to_end_suite()]
