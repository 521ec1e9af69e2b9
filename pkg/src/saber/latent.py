"""Recurrent encoder, tridiagonal stochastic Koopman propagation and decoder.

The encoder together with its mean/deviation heads plays the role of the
lifting map ``g`` into a latent space where one step of dynamics is linear,
``K g(x_t) = g(x_{t+1})``; the decoder plays ``g^{-1}``. Instead of fitting a
single operator, auxiliary networks predict a tridiagonal matrix per vehicle
and timestep from the current latent parameters and the lane embedding, and
the step is applied in residual form ``(K + I) mu``.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import MLP
from .errors import NonFiniteError, ParameterError

SIGMA_MIN, SIGMA_MAX = 1e-6, 1e6


class SequenceEncoder(nn.Module):
    """``h_t = RNN(h_{t-1}, f_e(p_t))`` followed by mean and deviation heads."""

    def __init__(self, in_dim, embed_dim, hidden, latent, cell="gru", stochastic=True):
        super().__init__()
        self.f_e = MLP(in_dim, embed_dim, embed_dim)
        if cell == "gru":
            self.rnn = nn.GRU(embed_dim, hidden, batch_first=True)
        elif cell == "lstm":
            self.rnn = nn.LSTM(embed_dim, hidden, batch_first=True)
        else:
            raise ParameterError(f"unknown recurrent cell {cell!r}")
        self.f_mu = MLP(hidden, hidden, latent)
        self.f_sigma = MLP(hidden, hidden, latent) if stochastic else None

    def forward(self, p, present=None):
        return encode_sequence(p, self, present)


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        bad = torch.nonzero(~torch.isfinite(t).all(-1))[0].tolist()
        *lead, step = bad
        raise NonFiniteError(f"non-finite {what} at sequence {lead}, timestep {step}")


def encode_sequence(p, enc: SequenceEncoder, present=None):
    """Encode ``p [N, S, E]`` into hidden states and Gaussian latent parameters.

    Absent steps (``present`` false) feed a zero input. Returns
    ``(h, mu, sigma)``; ``sigma`` is None for deterministic encoders.
    """
    _check_finite(p, "input embedding")
    x = enc.f_e(p)
    if present is not None:
        x = torch.where(present[..., None], x, torch.zeros_like(x))
    h, _ = enc.rnn(x)
    mu = enc.f_mu(h)
    sigma = None
    if enc.f_sigma is not None:
        sigma = torch.exp(enc.f_sigma(h)).clamp(SIGMA_MIN, SIGMA_MAX)
    return h, mu, sigma


def build_tridiagonal(raw: torch.Tensor) -> torch.Tensor:
    """``[..., 3j-2]`` -> ``[..., j, j]``: main diagonal, then super-, then sub-diagonal."""
    n = raw.shape[-1]
    if (n + 2) % 3:
        raise ParameterError(f"{n} entries do not define a tridiagonal matrix (need 3j-2)")
    j = (n + 2) // 3
    K = torch.diag_embed(raw[..., :j])
    if j > 1:
        K = K + torch.diag_embed(raw[..., j:2 * j - 1], offset=1)
        K = K + torch.diag_embed(raw[..., 2 * j - 1:], offset=-1)
    return K


class KoopmanPropagator(nn.Module):
    """Auxiliary networks mapping (latent parameters, lane embedding) to operators."""

    def __init__(self, latent, cond_dim, hidden, stochastic=True, init_scale=0.1):
        super().__init__()
        self.latent = latent
        n = 3 * latent - 2
        self.f_aux_mu = MLP(latent + cond_dim, hidden, n)
        self.f_aux_sigma = MLP(latent + cond_dim, hidden, n) if stochastic else None
        # start close to the identity step
        with torch.no_grad():
            for net in (self.f_aux_mu, self.f_aux_sigma):
                if net is not None:
                    net.net[-1].weight.mul_(init_scale)
                    net.net[-1].bias.mul_(init_scale)

    def forward(self, mu, sigma, cond):
        return koopman_propagate(mu, sigma, cond, self)


def koopman_propagate(mu, sigma, cond, prop: KoopmanPropagator):
    """One-step latent propagation.

    Returns ``(mu_next, sigma_next, K_mu, K_sigma)``. The deviation update
    ``K_sigma sigma + sigma`` is not sign-constrained, so its magnitude is
    taken and clamped to ``[SIGMA_MIN, SIGMA_MAX]``.
    """
    K_mu = build_tridiagonal(prop.f_aux_mu(torch.cat([mu, cond], -1)))
    mu_next = (K_mu @ mu[..., None]).squeeze(-1) + mu
    if sigma is None or prop.f_aux_sigma is None:
        return mu_next, None, K_mu, None
    K_sigma = build_tridiagonal(prop.f_aux_sigma(torch.cat([sigma, cond], -1)))
    sigma_next = ((K_sigma @ sigma[..., None]).squeeze(-1) + sigma).abs().clamp(SIGMA_MIN, SIGMA_MAX)
    _check_finite(mu_next, "propagated mean")
    return mu_next, sigma_next, K_mu, K_sigma


class MLPPropagator(nn.Module):
    """Deterministic residual perceptron step ``z' = z + f(z)`` used by the ablations."""

    def __init__(self, latent, hidden):
        super().__init__()
        self.f = MLP(latent, hidden, latent)

    def forward(self, z):
        return z + self.f(z)


def sample_latent(mu, sigma, eps):
    """Reparameterised draw ``mu + eps * sigma``; ``eps`` is supplied by the caller."""
    if sigma is None or eps is None:
        return mu
    return mu + eps * sigma


class Decoder(nn.Module):
    """Shared decoder from a latent point to a 2-D displacement (metres)."""

    def __init__(self, latent, hidden, out_scale=1.0):
        super().__init__()
        self.f_dec = MLP(latent, hidden, 2)
        self.out_scale = out_scale

    def forward(self, z):
        return decode(z, self)


def decode(z, dec: Decoder):
    return dec.f_dec(z) * dec.out_scale
