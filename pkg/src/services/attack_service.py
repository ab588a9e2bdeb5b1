"""
Attack Service for AMOC Lab
Handles norm-ball projections, PGD/FGSM/SLIDE, DeepFool, C&W and contrastive PGD
"""

import contextlib
from dataclasses import replace

import structlog
import torch
import torch.nn.functional as F

from src.errors import ArgumentError, NumericError
from src.models.attack_spec import AttackKind, AttackResult, Norm, fgsm_spec
from src.models.encoder import BNMode
from src.services.contrastive_loss import info_nce

log = structlog.get_logger()

_TINY = 1e-12


def _per_sample(values, like):
    """Reshape a length-B vector to broadcast against a B x ... tensor"""
    return values.view(-1, *([1] * (like.dim() - 1)))


def flat_norm(delta, norm):
    """Per-sample norm of a B x ... tensor"""
    flat = delta.flatten(1)
    if norm == Norm.LINF:
        return flat.abs().amax(dim=1)
    if norm == Norm.L2:
        return flat.norm(p=2, dim=1)
    if norm == Norm.L1:
        return flat.abs().sum(dim=1)
    raise ArgumentError(f"unsupported norm: {norm}")


def project_l1_ball(delta, epsilon):
    """Euclidean projection of each sample onto the l1 ball (sort-based simplex projection)"""
    if epsilon == 0:
        return torch.zeros_like(delta)
    flat = delta.flatten(1)
    magnitude = flat.abs()
    inside = magnitude.sum(dim=1) <= epsilon
    if bool(inside.all()):
        return delta
    n = flat.size(1)
    ordered, _ = torch.sort(magnitude, dim=1, descending=True)
    cumulative = ordered.cumsum(dim=1)
    index = torch.arange(1, n + 1, dtype=flat.dtype, device=flat.device)
    positive = ordered - (cumulative - epsilon) / index > 0
    rho = positive.sum(dim=1).clamp(min=1)
    theta = (cumulative.gather(1, (rho - 1).unsqueeze(1)).squeeze(1) - epsilon) / rho.to(flat.dtype)
    projected = (magnitude - theta.unsqueeze(1)).clamp(min=0) * flat.sign()
    return torch.where(inside.unsqueeze(1), flat, projected).view_as(delta)


def project(delta, norm, epsilon):
    """Project perturbations onto the epsilon-ball of the given norm"""
    if norm == Norm.LINF:
        return delta.clamp(-epsilon, epsilon)
    if norm == Norm.L2:
        norms = flat_norm(delta, Norm.L2)
        factor = torch.where(norms > epsilon, epsilon / norms.clamp(min=_TINY), torch.ones_like(norms))
        return delta * _per_sample(factor, delta)
    if norm == Norm.L1:
        return project_l1_ball(delta, epsilon)
    raise ArgumentError(f"unsupported norm: {norm}")


def clip_to_box(x, delta):
    """Shrink delta so that x + delta stays inside [0, 1]"""
    return (x + delta).clamp(0.0, 1.0) - x


def random_start(x, norm, epsilon, rng):
    """Uniform draw in the linf ball; uniform direction times uniform radius for l2/l1"""
    shape, batch = x.shape, x.size(0)
    if norm == Norm.LINF:
        delta = (torch.rand(shape, generator=rng, dtype=x.dtype) * 2.0 - 1.0) * epsilon
    else:
        if norm == Norm.L2:
            direction = torch.randn(shape, generator=rng, dtype=x.dtype)
        else:
            magnitude = -torch.log(torch.rand(shape, generator=rng, dtype=x.dtype).clamp(min=_TINY))
            signs = torch.where(torch.rand(shape, generator=rng) < 0.5, -1.0, 1.0).to(x.dtype)
            direction = magnitude * signs
        direction = direction / _per_sample(flat_norm(direction, norm).clamp(min=_TINY), direction)
        radius = torch.rand(batch, generator=rng, dtype=x.dtype) * epsilon
        delta = direction * _per_sample(radius, direction)
    return clip_to_box(x, delta.to(x.device))


def sparse_l1_direction(grad, quantile):
    """Signed unit-l1 step on the coordinates whose |grad| reaches the quantile"""
    flat = grad.flatten(1)
    magnitude = flat.abs()
    threshold = torch.quantile(magnitude, quantile, dim=1, keepdim=True)
    mask = (magnitude >= threshold).to(flat.dtype)
    count = mask.sum(dim=1, keepdim=True).clamp(min=1)
    return (flat.sign() * mask / count).view_as(grad)


def step_direction(grad, spec):
    """Steepest-ascent direction for the attack norm; sign(0) = 0"""
    if spec.kind == AttackKind.SLIDE:
        return sparse_l1_direction(grad, spec.quantile)
    if spec.norm == Norm.LINF:
        return grad.sign()
    if spec.norm == Norm.L2:
        norms = flat_norm(grad, Norm.L2).clamp(min=_TINY)
        return grad / _per_sample(norms, grad)
    if spec.norm == Norm.L1:
        norms = flat_norm(grad, Norm.L1).clamp(min=_TINY)
        return grad / _per_sample(norms, grad)
    raise ArgumentError(f"unsupported norm: {spec.norm}")


def pgd(loss_fn, x, spec, rng=None, init_delta=None):
    """Projected gradient ascent of loss_fn inside the attack's epsilon-ball.

    ``loss_fn`` maps a batch to a scalar; samples must not interact through it
    (use a summed loss) for the per-sample projection to be meaningful.
    ``init_delta`` warm-starts the search and takes precedence over a random start.
    """
    if not isinstance(spec.norm, Norm):
        raise ArgumentError(f"unsupported norm: {spec.norm}")
    x = x.detach()
    epsilon = spec.epsilon
    if init_delta is not None:
        delta = project(init_delta.detach(), spec.norm, epsilon)
    elif spec.random_start and epsilon > 0:
        if rng is None:
            rng = torch.Generator().manual_seed(0)
        delta = random_start(x, spec.norm, epsilon, rng)
    else:
        delta = torch.zeros_like(x)
    delta = clip_to_box(x, delta)

    step = spec.step_size
    with torch.enable_grad():
        for _ in range(spec.steps):
            x_adv = (x + delta).requires_grad_(True)
            loss = loss_fn(x_adv)
            if not loss.requires_grad:
                raise NumericError("pgd: attack objective is not differentiable in its input")
            grad, = torch.autograd.grad(loss, x_adv, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(x_adv)
            delta = delta + step * step_direction(grad.detach(), spec)
            delta = clip_to_box(x, project(delta, spec.norm, epsilon))
    return (x + delta).clamp(0.0, 1.0).detach()


def fgsm(loss_fn, x, epsilon):
    """One full-epsilon signed step, no random start"""
    return pgd(loss_fn, x, fgsm_spec(epsilon))


def slide(loss_fn, x, spec, rng=None):
    """Sparse l1 descent: PGD with top-quantile coordinate steps and l1 projection"""
    if spec.norm != Norm.L1:
        raise ArgumentError(f"SLIDE needs an l1 spec, got {spec.norm.value}")
    if spec.kind != AttackKind.SLIDE:
        spec = replace(spec, kind=AttackKind.SLIDE)
    return pgd(loss_fn, x, spec, rng)


def _check_finite(logits, what):
    if not torch.isfinite(logits).all():
        raise NumericError(f"{what}: classifier produced non-finite logits")


def _predict(logits):
    # first maximal index wins ties
    return logits.argmax(dim=1)


def deepfool(classifier, x, max_iters=50, overshoot=0.02, norm=Norm.L2):
    """Iterative linearization towards the closest decision boundary"""
    with torch.enable_grad():
        return _deepfool(classifier, x, max_iters, overshoot, norm)


def _deepfool(classifier, x, max_iters, overshoot, norm):
    if norm not in (Norm.L2, Norm.LINF):
        raise ArgumentError(f"DeepFool supports l2 and linf, got {norm}")
    x = x.detach()
    with torch.no_grad():
        logits = classifier(x)
    _check_finite(logits, 'deepfool')
    num_classes = logits.size(1)
    if num_classes < 2:
        raise ArgumentError("DeepFool needs at least two logits")
    labels = _predict(logits)

    batch = x.size(0)
    r_total = torch.zeros_like(x)
    x_adv = x.clone()
    active = torch.ones(batch, dtype=torch.bool, device=x.device)
    iterations = torch.zeros(batch, dtype=torch.long, device=x.device)
    rows = torch.arange(batch, device=x.device)

    for _ in range(max_iters):
        x_var = x_adv.clone().requires_grad_(True)
        logits = classifier(x_var)
        _check_finite(logits, 'deepfool')
        active = active & (_predict(logits.detach()) == labels)
        if not bool(active.any()):
            break
        f_label = logits[rows, labels]
        grad_label, = torch.autograd.grad(f_label.sum(), x_var, retain_graph=True)

        best_dist = torch.full((batch,), float('inf'), dtype=x.dtype, device=x.device)
        best_gap = torch.zeros(batch, dtype=x.dtype, device=x.device)
        best_w = torch.zeros_like(x)
        for k in range(num_classes):
            grad_k, = torch.autograd.grad(logits[:, k].sum(), x_var, retain_graph=True)
            w_k = grad_k - grad_label
            gap = (logits[:, k] - f_label).detach().abs()
            dual = flat_norm(w_k, Norm.L1 if norm == Norm.LINF else Norm.L2)
            dist = gap / dual.clamp(min=_TINY)
            dist = torch.where(labels == k, torch.full_like(dist, float('inf')), dist)
            better = dist < best_dist
            best_dist = torch.where(better, dist, best_dist)
            best_gap = torch.where(better, gap, best_gap)
            best_w = torch.where(_per_sample(better, w_k), w_k, best_w)

        if norm == Norm.L2:
            scale = best_gap / flat_norm(best_w, Norm.L2).pow(2).clamp(min=_TINY)
            r_step = _per_sample(scale, best_w) * best_w
        else:
            scale = best_gap / flat_norm(best_w, Norm.L1).clamp(min=_TINY)
            r_step = _per_sample(scale, best_w) * best_w.sign()

        r_total = r_total + torch.where(_per_sample(active, x), r_step, torch.zeros_like(r_step))
        x_adv = (x + (1.0 + overshoot) * r_total).clamp(0.0, 1.0).detach()
        iterations = iterations + active.long()

    with torch.no_grad():
        final = classifier(x_adv)
    _check_finite(final, 'deepfool')
    success = _predict(final) != labels
    return AttackResult(x_adv=x_adv, success=success, iterations=iterations)


def cw_l2(classifier, x, y=None, iters=1000, lr=0.01, confidence=0.0,
          initial_const=1e-3, search_steps=9):
    """Carlini-Wagner l2 with tanh box parameterization and a binary search on c"""
    with torch.enable_grad():
        return _cw_l2(classifier, x, y, iters, lr, confidence, initial_const, search_steps)


def _cw_l2(classifier, x, y, iters, lr, confidence, initial_const, search_steps):
    x = x.detach()
    batch = x.size(0)
    with torch.no_grad():
        logits = classifier(x)
    labels = _predict(logits) if y is None else y
    best_adv = x.clone()
    best_l2 = torch.full((batch,), float('inf'), dtype=x.dtype, device=x.device)
    iterations = torch.zeros(batch, dtype=torch.long, device=x.device)
    if iters <= 0 or search_steps <= 0:
        return AttackResult(x_adv=best_adv, success=torch.zeros(batch, dtype=torch.bool), iterations=iterations)

    w_start = torch.atanh((2.0 * x - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6))
    const = torch.full((batch,), initial_const, dtype=x.dtype, device=x.device)
    lower = torch.zeros_like(const)
    upper = torch.full_like(const, float('inf'))
    label_mask = F.one_hot(labels, logits.size(1)).bool()

    for _ in range(search_steps):
        w = w_start.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([w], lr=lr)
        found = torch.zeros(batch, dtype=torch.bool, device=x.device)
        for _ in range(iters):
            x_adv = (torch.tanh(w) + 1.0) / 2.0
            logits = classifier(x_adv)
            l2_sq = (x_adv - x).flatten(1).pow(2).sum(dim=1)
            real = logits[label_mask]
            other = logits.masked_fill(label_mask, float('-inf')).amax(dim=1)
            margin = (real - other + confidence).clamp(min=0.0)
            loss = (l2_sq + const * margin).sum()
            # gradient for w only; classifier .grad fields stay untouched
            w.grad, = torch.autograd.grad(loss, w)
            optimizer.step()
            with torch.no_grad():
                if confidence > 0:
                    is_adv = (other - real) >= confidence
                else:
                    is_adv = _predict(logits) != labels
                l2 = l2_sq.sqrt()
                improved = is_adv & (l2 < best_l2)
                best_l2 = torch.where(improved, l2, best_l2)
                best_adv = torch.where(_per_sample(improved, x), x_adv.detach(), best_adv)
                found |= is_adv
        iterations += iters
        upper = torch.where(found, torch.minimum(upper, const), upper)
        lower = torch.where(found, lower, torch.maximum(lower, const))
        const = torch.where(torch.isfinite(upper), (lower + upper) / 2.0, const * 10.0)

    return AttackResult(x_adv=best_adv, success=torch.isfinite(best_l2), iterations=iterations)


@contextlib.contextmanager
def frozen_statistics(*modules):
    """Eval mode for the duration of an attack; running statistics stay untouched"""
    states = [module.training for module in modules]
    try:
        for module in modules:
            module.eval()
        yield
    finally:
        for module, state in zip(modules, states):
            module.train(state)


def contrastive_perturb(pair, banks, view_q, view_k, spec, rng=None, temperature=0.2):
    """PGD delta maximizing InfoNCE of f_q(c(x)+delta; BN_adv) against the clean key and M_adv"""
    if spec.norm != Norm.LINF:
        raise ArgumentError(f"contrastive perturbation uses linf, got {spec.norm.value}")
    with frozen_statistics(pair.query, pair.key):
        with torch.no_grad():
            k_pos = pair.key(view_k, BNMode.CLEAN)
        negatives = banks.adv.negatives()

        def objective(x_adv):
            q = pair.query(x_adv, BNMode.ADV)
            return info_nce(q, k_pos, negatives, temperature, reduction='sum')

        x_adv = pgd(objective, view_q, spec, rng)
    return (x_adv - view_q.detach()).detach()


def _cross_entropy_objective(model, y):
    def objective(x_adv):
        return F.cross_entropy(model(x_adv), y, reduction='sum')
    return objective


def run_attack(model, x, y, spec, rng=None, init_delta=None):
    """Adversarial inputs for one table attack; minimal attacks are cut back to the budget"""
    if spec.kind in (AttackKind.PGD, AttackKind.FGSM, AttackKind.SLIDE):
        return pgd(_cross_entropy_objective(model, y), x, spec, rng, init_delta)
    if spec.kind == AttackKind.DEEPFOOL:
        result = deepfool(model, x, spec.steps, spec.overshoot, spec.norm)
    elif spec.kind == AttackKind.CW:
        result = cw_l2(model, x, y, spec.steps, spec.learning_rate, spec.confidence,
                       search_steps=spec.search_steps)
    else:
        raise ArgumentError(f"unsupported attack kind: {spec.kind}")
    delta = project(result.x_adv - x, spec.norm, spec.epsilon)
    return (x + delta).clamp(0.0, 1.0).detach()
