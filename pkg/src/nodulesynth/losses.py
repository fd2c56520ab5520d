"""Training objectives: masked/global L1 reconstruction, Wasserstein
adversarial loss with gradient penalty, and the auxiliary three-class
domain loss, combined into critic and generator objectives.

Sign convention: every objective returned here is a quantity to MINIMIZE.
The critic's adversarial ascent is expressed by negating its Wasserstein
estimate internally.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch

N_DOMAIN_CLASSES = 3  # {0: fake, 1: benign, 2: malignant}


@dataclass
class LossWeights:
    """Scalar weights of the combined objectives (all >= 0)."""

    lambda1: float = 1.0  # global-L1 weight inside the reconstruction loss
    lambda_gp: float = 10.0  # gradient penalty
    lambda_cls_d: float = 1.0  # class loss weight in the critic objective
    lambda_cls_g: float = 1.0  # class loss weight in the generator objective
    lambda_recon: float = 10.0  # reconstruction weight in the generator objective

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass
class LossReport:
    """Per-step scalar losses; inactive terms are reported as 0."""

    l_masked: float = 0.0
    l_global: float = 0.0
    l_recon: float = 0.0
    l_adv_local: float = 0.0
    l_adv_global: float = 0.0
    gp_local: float = 0.0
    gp_global: float = 0.0
    l_cls_d: float = 0.0
    l_cls_g: float = 0.0
    l_d_total: float = 0.0
    l_g_total: float = 0.0

    def validate(self, lambda1: float, tol: float = 1e-5) -> None:
        values = asdict(self)
        for name, value in values.items():
            if not (value == value and abs(value) != float("inf")):
                raise ValueError(f"non-finite loss term {name}={value}")
        expected = self.l_masked + lambda1 * self.l_global
        if abs(self.l_recon - expected) > tol * max(1.0, abs(expected)):
            raise ValueError(
                f"l_recon {self.l_recon} != l_masked + lambda1*l_global = {expected}"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "LossReport":
        return cls(**{k: float(v) for k, v in data.items()})


def recon_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    lambda1: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Normalized L1 over the masked region and over the entire tensor.

    Returns ``(l_masked, l_global, l_recon)`` with
    ``l_recon = l_masked + lambda1 * l_global``. ``l_masked`` divides by the
    mask voxel count (at least 1), ``l_global`` by the total element count.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}")
    if mask.shape != pred.shape and mask.numel() != pred.numel():
        raise ValueError(f"mask shape {tuple(mask.shape)} incompatible with pred")
    diff = (pred - target).abs()
    m = mask.to(diff.dtype).reshape(diff.shape)
    l_masked = (diff * m).sum() / m.sum().clamp_min(1.0)
    l_global = diff.sum() / diff.numel()
    return l_masked, l_global, l_masked + lambda1 * l_global


def _interpolation_eps(n: int, seed: int, dtype: torch.dtype) -> torch.Tensor:
    """Per-sample interpolation coefficients, deterministic given the seed."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return torch.rand(n, generator=gen, dtype=dtype)


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    seed: int,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Two-sided gradient penalty on interpolates between real and fake.

    Draws per-sample ``eps ~ U[0,1]`` (deterministic from ``seed``), forms
    ``x_hat = eps*real + (1-eps)*fake``, and returns
    ``lambda_gp * mean((||grad critic(x_hat)||_2 - 1)^2)``. The returned
    tensor stays differentiable w.r.t. the critic's parameters.
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: real {tuple(real.shape)}, fake {tuple(fake.shape)}")
    n = real.shape[0]
    if eps is None:
        eps = _interpolation_eps(n, seed, real.dtype)
    eps = eps.reshape((n,) + (1,) * (real.dim() - 1)).to(real.dtype)
    x_hat = (eps * real + (1.0 - eps) * fake.detach()).detach().requires_grad_(True)
    scores = critic(x_hat)
    if scores.numel() != n:
        raise ValueError(f"critic must return one score per sample, got {scores.numel()} for {n}")
    grads = torch.autograd.grad(
        outputs=scores.sum(), inputs=x_hat, create_graph=True, retain_graph=True
    )[0]
    norms = grads.reshape(n, -1).norm(2, dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def wgan_losses(
    real_scores: torch.Tensor,
    fake_scores: torch.Tensor,
    gp: torch.Tensor | float,
) -> torch.Tensor:
    """Wasserstein estimate ``mean(real) - mean(fake) - gp``.

    The critic ascends this quantity (see :func:`critic_objective`); the
    generator's descent direction uses only the fake-score term.
    """
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("score batches must be non-empty")
    return real_scores.mean() - fake_scores.mean() - gp


def aux_class_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the target domain class."""
    if logits.dim() != 2 or logits.shape[1] != N_DOMAIN_CLASSES:
        raise ValueError(f"logits must be (N, {N_DOMAIN_CLASSES}), got {tuple(logits.shape)}")
    targets = targets.long()
    if targets.numel() and (targets.min() < 0 or targets.max() >= N_DOMAIN_CLASSES):
        raise ValueError(f"targets must lie in 0..{N_DOMAIN_CLASSES - 1}")
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.gather(1, targets.reshape(-1, 1)).mean()


def critic_objective(
    l_adv: torch.Tensor | float,
    l_cls_d: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor | float:
    """Quantity the critic minimizes: ``-l_adv + lambda_cls_d * l_cls_d``."""
    return -l_adv + weights.lambda_cls_d * l_cls_d


def generator_objective(
    l_adv_terms: Sequence[torch.Tensor | float] | torch.Tensor | float,
    l_cls_g: torch.Tensor | float,
    l_recon: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor | float:
    """Quantity the generator minimizes.

    ``l_adv_terms`` holds one adversarial term per critic (averaged); only
    the generator-dependent part need be passed since the remaining terms
    are constant w.r.t. the generator.
    """
    if isinstance(l_adv_terms, (int, float)) or torch.is_tensor(l_adv_terms):
        terms = [l_adv_terms]
    else:
        terms = list(l_adv_terms)
    if not terms:
        raise ValueError("at least one adversarial term is required")
    adv = terms[0]
    for t in terms[1:]:
        adv = adv + t
    adv = adv / len(terms)
    return -adv + weights.lambda_cls_g * l_cls_g + weights.lambda_recon * l_recon
