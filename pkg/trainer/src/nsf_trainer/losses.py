"""Differentiable composite loss: CE - AvgDice + L1(image) + L1(log bias).

Operates on softmax probabilities (not logits) so the values agree exactly
with the evaluation-side implementation of the same four terms: probabilities
are floored at 1e-12 inside the log, and the soft Dice uses the eps-in-
denominator convention (eps = 1e-6) that scores zero for a label absent from
the target and predicted with zero mass.
"""

import torch

DICE_EPS = 1e-6
PROB_FLOOR = 1e-12


def cross_entropy(probs, target_idx):
    num_labels = probs.shape[0]
    flat = probs.reshape(num_labels, -1)
    idx = target_idx.reshape(-1)
    p_true = flat[idx, torch.arange(idx.shape[0], device=probs.device)]
    return -torch.log(torch.clamp(p_true, min=PROB_FLOOR)).mean()


def soft_dice_average(probs, target_idx, include_background=True, background_channel=0):
    num_labels = probs.shape[0]
    flat = probs.reshape(num_labels, -1)
    one_hot = torch.zeros_like(flat)
    idx = target_idx.reshape(1, -1)
    one_hot.scatter_(0, idx, 1.0)
    inter = (flat * one_hot).sum(dim=1)
    denom = flat.sum(dim=1) + one_hot.sum(dim=1) + DICE_EPS
    dice = 2.0 * inter / denom
    if not include_background:
        keep = torch.ones(num_labels, dtype=torch.bool)
        keep[background_channel] = False
        dice = dice[keep]
    return dice.mean()


def composite_loss(probs, target_idx, pred_image, pred_logbias, target_image, target_logbias,
                   include_background=True):
    """Returns (total, terms dict); all four terms carry weight 1."""
    ce = cross_entropy(probs, target_idx)
    dice = soft_dice_average(probs, target_idx, include_background)
    l1_image = (pred_image - target_image).abs().mean()
    l1_logbias = (pred_logbias - target_logbias).abs().mean()
    total = ce - dice + l1_image + l1_logbias
    return total, {
        "ce": ce,
        "avg_dice": dice,
        "l1_image": l1_image,
        "l1_logbias": l1_logbias,
        "total": total,
    }


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def _term_closures(probs, target_idx, pred_image, pred_logbias, target_image, target_logbias):
    return {
        "ce": lambda: cross_entropy(torch.softmax(probs, dim=0), target_idx),
        "avg_dice": lambda: soft_dice_average(torch.softmax(probs, dim=0), target_idx),
        "l1_image": lambda: (pred_image - target_image).abs().mean(),
        "l1_logbias": lambda: (pred_logbias - target_logbias).abs().mean(),
    }


def gradient_check(seed=0, dims=(2, 2, 2), num_labels=3, step=1e-5):
    """Compare autograd gradients of every term against central differences.

    Probes the loss as a function of the raw network heads (logits for the
    segmentation terms, direct values for the regression heads).  Inputs are
    drawn away from the L1 kinks so the derivative exists everywhere probed.
    Returns {term: max relative error}.
    """
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn((num_labels, *dims), generator=gen, dtype=torch.float64)
    target_idx = torch.randint(0, num_labels, dims, generator=gen)
    image = torch.randn(dims, generator=gen, dtype=torch.float64)
    logbias = torch.randn(dims, generator=gen, dtype=torch.float64)
    target_image = image + torch.sign(torch.randn(dims, generator=gen, dtype=torch.float64)) * (
        0.3 + 0.5 * torch.rand(dims, generator=gen, dtype=torch.float64)
    )
    target_logbias = logbias + torch.sign(torch.randn(dims, generator=gen, dtype=torch.float64)) * (
        0.3 + 0.5 * torch.rand(dims, generator=gen, dtype=torch.float64)
    )

    variables = {"ce": logits, "avg_dice": logits, "l1_image": image, "l1_logbias": logbias}
    report = {}
    for term, var in variables.items():
        var = var.clone().requires_grad_(True)
        closures = _term_closures(
            var if term in ("ce", "avg_dice") else logits,
            target_idx,
            var if term == "l1_image" else image,
            var if term == "l1_logbias" else logbias,
            target_image,
            target_logbias,
        )
        value = closures[term]()
        (grad,) = torch.autograd.grad(value, var)

        fd = torch.zeros_like(var)
        flat = var.detach().reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i].item()
            for sign in (+1, -1):
                flat[i] = orig + sign * step
                with torch.no_grad():
                    val = closures[term]()
                fd.reshape(-1)[i] += sign * val.item()
            flat[i] = orig
        fd /= 2 * step
        scale = grad.abs().max().clamp(min=1e-8)
        report[term] = float((grad - fd).abs().max() / scale)
    return report
