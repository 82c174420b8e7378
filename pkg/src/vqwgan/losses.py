"""Training objectives: reconstruction, prior KL, critic gap, gradient penalty.

Sign conventions are the subtle part, so they are spelled out here once:

* The critic minimises   mean D(real) - mean D(fake) + lambda * penalty
  under ``critic_sign = "mirrored"`` (the default).  That drives D(real)
  down and D(fake) up.  ``"standard"`` flips the gap so D(real) is driven
  up, the usual Wasserstein-critic arrangement; the two are equivalent
  under negation of the critic.
* The generator minimises  gamma * recon - gap, where ``gap`` uses the same
  convention as the critic.  Under "mirrored" that means the generator
  pushes -mean D(fake), i.e. chases whichever direction the critic
  currently assigns to real data.  The gradient penalty never reaches the
  generator.
* The encoder minimises  kl + recon and sees no adversarial term at all.

All losses are batch means.  The Wasserstein estimate reported in metrics
is |mean D(real) - mean D(fake)|, which is convention-independent.
"""

import numpy as np

from . import model, nn

SIGN_CONVENTIONS = ("mirrored", "standard")


def recon_loss(x: np.ndarray, x_recon: nn.Tensor) -> nn.Tensor:
    """0.5 * sum of squared pixel error, averaged over the batch."""
    diff = nn.sub(nn.Tensor(x), x_recon)
    batch = x.shape[0]
    return nn.mul(nn.tsum(nn.square(diff)), 0.5 / batch)


def kl_loss(mu: nn.Tensor, logvar: nn.Tensor) -> nn.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), averaged over the batch.

    0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) per sample.
    """
    batch = mu.shape[0]
    sq = nn.square(mu)
    ev = nn.texp(logvar)
    inner = nn.sub(nn.sub(nn.add(sq, ev), 1.0), logvar)
    return nn.mul(nn.tsum(inner), 0.5 / batch)


def critic_gap(scores_real: nn.Tensor, scores_fake: nn.Tensor,
               sign: str = "mirrored") -> nn.Tensor:
    """Signed difference of mean critic scores."""
    if sign not in SIGN_CONVENTIONS:
        raise ValueError(f"unknown critic sign convention {sign!r}")
    gap = nn.sub(nn.tmean(scores_real), nn.tmean(scores_fake))
    if sign == "standard":
        gap = nn.mul(gap, -1.0)
    return gap


def interpolate(x_real: np.ndarray, x_fake: np.ndarray,
                eps: np.ndarray) -> np.ndarray:
    """Points on the real-fake chords: eps * real + (1 - eps) * fake."""
    return eps * x_real + (1.0 - eps) * x_fake


def gradient_penalty(x_hat: np.ndarray, critic: model.CriticParams) -> nn.Tensor:
    """mean over the batch of (||dD/dx at x_hat||_2 - 1)^2."""
    g = model.critic_input_gradient(x_hat, critic)
    sq_norm = nn.tsum(nn.square(g), axis=1)
    norm = nn.tsqrt(sq_norm)
    return nn.tmean(nn.square(nn.sub(norm, 1.0)))


def critic_loss(x_real: np.ndarray, x_fake: np.ndarray, critic: model.CriticParams,
                eps: np.ndarray, gp_lambda: float,
                sign: str = "mirrored") -> nn.Tensor:
    """Full critic objective on a batch; ``x_fake`` must already be detached."""
    gap = critic_gap(model.criticize(x_real, critic),
                     model.criticize(x_fake, critic), sign)
    x_hat = interpolate(x_real, x_fake, eps)
    return nn.add(gap, nn.mul(gradient_penalty(x_hat, critic), gp_lambda))


def generator_loss(recon: nn.Tensor, gap: nn.Tensor, gamma: float) -> nn.Tensor:
    """gamma * recon - gap; ``gap`` carries the critic's sign convention."""
    return nn.sub(nn.mul(recon, gamma), gap)


def encoder_loss(kl: nn.Tensor, recon: nn.Tensor) -> nn.Tensor:
    return nn.add(kl, recon)


def wasserstein_estimate(scores_real: np.ndarray, scores_fake: np.ndarray) -> float:
    return float(abs(np.mean(scores_real) - np.mean(scores_fake)))
