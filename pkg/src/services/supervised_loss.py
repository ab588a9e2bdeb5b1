"""
Supervised Loss Service for AMOC Lab
Handles cross-entropy, PGD adversarial training and TRADES objectives
"""

import torch.nn.functional as F

from src.services.attack_service import frozen_statistics, pgd


def cross_entropy_loss(model, x, y):
    return F.cross_entropy(model(x), y)


def pgd_at_loss(model, x, y, attack_spec, rng=None):
    """Cross-entropy at the PGD-crafted x + delta*"""
    with frozen_statistics(model):
        x_adv = pgd(lambda x_var: F.cross_entropy(model(x_var), y, reduction='sum'),
                    x, attack_spec, rng)
    return F.cross_entropy(model(x_adv), y)


def trades_kl(adv_logits, nat_logits):
    """KL(p(x + delta) || p(x)) averaged over the batch, natural prediction as reference"""
    return F.kl_div(F.log_softmax(adv_logits, dim=1), F.softmax(nat_logits, dim=1),
                    reduction='batchmean')


def trades_loss(model, x, y, weights, attack_spec, rng=None, beta=None):
    """CE(x, y) + beta * KL(p(x + delta*) || p(x)), delta* maximizing the KL term"""
    beta = weights.trades_beta if beta is None else beta
    with frozen_statistics(model):
        nat_reference = model(x).detach()

        def objective(x_var):
            return F.kl_div(F.log_softmax(model(x_var), dim=1), F.softmax(nat_reference, dim=1),
                            reduction='sum')

        x_adv = pgd(objective, x, attack_spec, rng)
    nat_logits = model(x)
    natural = F.cross_entropy(nat_logits, y)
    robust = trades_kl(model(x_adv), nat_logits)
    return natural + beta * robust
