"""
Contrastive Loss Service for AMOC Lab
Handles InfoNCE, the variant loss matrix and the combined AMOC objective
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from src.errors import ArgumentError
from src.models.encoder import BNMode
from src.models.variant import ACA, CCC, InputKind, VariantTag


def info_nce(q, k_pos, negatives, temperature, reduction='mean'):
    """-log softmax of the positive logit among [q.k+, q.k-...] / T"""
    if float(temperature) <= 0:
        raise ArgumentError(f"temperature must be positive, got {float(temperature)}")
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ negatives.t()
    logits = torch.cat([l_pos, l_neg], dim=1) / temperature
    targets = torch.zeros(logits.size(0), dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, targets, reduction=reduction)


class EmbeddingCache:
    """Encodes each (encoder, input kind) combination at most once per batch"""

    def __init__(self, pair, view_q, view_k, delta=None):
        self.pair = pair
        self.view_q = view_q
        self.view_k = view_k
        self.delta = delta
        self._queries = {}
        self._keys = {}

    def adversarial_input(self):
        """c(x) + delta, kept inside the pixel box"""
        if self.delta is None:
            raise ArgumentError("this loss term needs an adversarial perturbation delta")
        return (self.view_q + self.delta).clamp(0.0, 1.0)

    def _route(self, kind, clean_input):
        if kind == InputKind.ADV:
            return self.adversarial_input(), BNMode.ADV
        return clean_input, BNMode.CLEAN

    def query(self, kind):
        if kind not in self._queries:
            x, bn_mode = self._route(kind, self.view_q)
            self._queries[kind] = self.pair.query(x, bn_mode)
        return self._queries[kind]

    def key(self, kind):
        # adversarial keys reuse the query's delta on c(x)
        if kind not in self._keys:
            x, bn_mode = self._route(kind, self.view_k)
            with torch.no_grad():
                self._keys[kind] = self.pair.key(x, bn_mode)
        return self._keys[kind]


def variant_loss(tag, pair, banks, view_q, view_k, delta=None, temperature=0.2, cache=None):
    """InfoNCE of the (query input, key input, bank) triple named by tag"""
    if not isinstance(tag, VariantTag):
        tag = VariantTag.parse(tag)
    if tag.needs_delta and delta is None:
        raise ArgumentError(f"variant {tag.code} needs an adversarial perturbation delta")
    cache = cache or EmbeddingCache(pair, view_q, view_k, delta)
    q = cache.query(tag.query)
    k_pos = cache.key(tag.key)
    return info_nce(q, k_pos, banks.bank(tag.bank).negatives(), temperature)


@dataclass
class AmocLoss:
    """Combined objective with both terms kept for logging"""

    total: torch.Tensor
    ccc: torch.Tensor
    adversarial: torch.Tensor
    variant: str = 'ACA'

    def to_dict(self):
        return {
            'loss': float(self.total.detach()),
            'ccc': float(self.ccc.detach()),
            self.variant.lower(): float(self.adversarial.detach()),
        }


def amoc_loss(pair, banks, view_q, view_k, delta, weights, variant=ACA, cache=None):
    """lambda * L_CCC + (1 - lambda) * L_variant"""
    lam = weights.lam
    if not 0.0 < lam < 1.0:
        raise ArgumentError(f"lambda must lie in (0, 1), got {lam}")
    cache = cache or EmbeddingCache(pair, view_q, view_k, delta)
    ccc = variant_loss(CCC, pair, banks, view_q, view_k, delta, weights.temperature, cache)
    adversarial = variant_loss(variant, pair, banks, view_q, view_k, delta, weights.temperature, cache)
    total = lam * ccc + (1.0 - lam) * adversarial
    return AmocLoss(total=total, ccc=ccc, adversarial=adversarial, variant=str(variant))
