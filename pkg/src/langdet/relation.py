"""Relation distributions over the frozen bank and the KL relation loss.

For category ``i`` the similarity vector holds the cosine between an anchor and every
bank row except the exemplar of ``i``, in canonical bank order. The language anchor is
the exemplar itself; the visual anchor is the decoder's object feature for ``i``.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .bank import RepresentationBank
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5


def _require_frozen(bank: RepresentationBank) -> None:
    if not bank.frozen:
        raise RuntimeError("relation targets need a frozen bank")


def comparison_rows(bank: RepresentationBank, category: int) -> np.ndarray:
    """Indices of the bank rows compared against category ``category``'s anchor."""
    if not 0 <= category < bank.num_categories:
        raise IndexError(f"category {category} not in bank of {bank.num_categories}")
    rows = np.arange(bank.size)
    return rows[rows != bank.exemplar_row(category)]


def language_similarity_vector(category: int, bank: RepresentationBank) -> np.ndarray:
    _require_frozen(bank)
    z = bank.z
    anchor = Tensor(z[bank.exemplar_row(category)])
    return T.cosine_rows(anchor, Tensor(z[comparison_rows(bank, category)])).data


def visual_similarity_vector(feature: Tensor, category: int, bank: RepresentationBank) -> Tensor:
    _require_frozen(bank)
    if feature.shape != (bank.dim,):
        raise T.ShapeError(f"object feature {feature.shape} does not match bank dim {bank.dim}")
    return T.cosine_rows(feature, Tensor(bank.z[comparison_rows(bank, category)]))


def to_distribution(similarities, temperature: float = DEFAULT_TEMPERATURE):
    """Softmax of similarities / temperature; returns the same kind it was given."""
    if isinstance(similarities, Tensor):
        return T.softmax(similarities, temperature=temperature)
    with T.no_grad():
        return T.softmax(Tensor(similarities), temperature=temperature).data


class RelationTargets:
    """Cached language-side relation distributions for a frozen bank."""

    def __init__(self, bank: RepresentationBank, temperature: float = DEFAULT_TEMPERATURE):
        _require_frozen(bank)
        if not temperature > 0:
            raise ValueError(f"relation temperature must be positive, got {temperature}")
        self.bank = bank
        self.temperature = temperature
        self._z = bank.z
        self._rows = [comparison_rows(bank, i) for i in range(bank.num_categories)]
        self._cmp = [Tensor(self._z[r]) for r in self._rows]
        self.language = [to_distribution(language_similarity_vector(i, bank), temperature)
                         for i in range(bank.num_categories)]

    def category_loss(self, category: int, feature: Tensor) -> Tensor:
        """KL(R_l || R_v) for one category."""
        if feature.shape != (self.bank.dim,):
            raise T.ShapeError(f"object feature {feature.shape} does not match bank dim {self.bank.dim}")
        r_v = T.softmax(T.cosine_rows(feature, self._cmp[category]), temperature=self.temperature)
        return T.kl_divergence(Tensor(self.language[category]), r_v)


def relation_loss(features: dict[int, Tensor], targets: RelationTargets) -> Tensor:
    """Mean over the present categories of KL(R_l^i || R_v^i).

    ``features`` maps bank category id to that category's object feature. The language
    distributions are constants, so gradients reach the features only.
    """
    if not features:
        logger.warning("relation loss: no ground-truth categories in batch, returning 0")
        return Tensor(0.0)
    terms = [targets.category_loss(i, o) for i, o in sorted(features.items())]
    return T.scale(T.elementwise_sum(terms), 1.0 / len(terms))


def per_layer_relation_loss(layer_features: list[dict[int, Tensor]], targets: RelationTargets) -> Tensor:
    """Relation loss averaged over decoder layers."""
    if not layer_features:
        raise ValueError("need at least one decoder layer")
    terms = [relation_loss(f, targets) for f in layer_features]
    return T.scale(T.elementwise_sum(terms), 1.0 / len(terms))
