"""Full recurrent VAE with structural attention and its ablation variants."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn as nn

from .attention import MaskedAttention, lane_attention, vv_self_attention
from .errors import CheckpointError, ConfigError
from .latent import (
    Decoder,
    KoopmanPropagator,
    MLPPropagator,
    SequenceEncoder,
    decode,
    encode_sequence,
    koopman_propagate,
    sample_latent,
)

CHECKPOINT_FORMAT = "saber-checkpoint"
CHECKPOINT_VERSION = 1

# (vehicle attention, lane attention, koopman propagation, stochastic latent, objective)
VARIANTS = {
    "saber_vae": (True, True, True, True, "prediction"),
    "saber_ae": (True, True, True, False, "prediction"),
    "vv_rae": (True, False, False, False, "prediction"),
    "rae_pred": (False, False, False, False, "prediction"),
    "rae_recon": (False, False, False, False, "reconstruction"),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "saber_vae"
    latent_dim: int = 2
    attn_dim: int = 32
    heads: int = 8
    hidden_dim: Optional[int] = None  # recurrent size, defaults to attn_dim
    cell: str = "gru"
    disp_scale: float = 2.5  # m per step
    lane_scale: float = 10.0  # m
    nbr_scale: float = 45.0  # m

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        for name in ("latent_dim", "attn_dim", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.attn_dim % self.heads:
            raise ConfigError(f"attn_dim {self.attn_dim} must be divisible by heads {self.heads}")
        if self.cell not in ("gru", "lstm"):
            raise ConfigError(f"unknown recurrent cell {self.cell!r}")
        if min(self.disp_scale, self.lane_scale, self.nbr_scale) <= 0:
            raise ConfigError("input scales must be positive")

    @property
    def use_vv(self):
        return VARIANTS[self.variant][0]

    @property
    def use_lane(self):
        return VARIANTS[self.variant][1]

    @property
    def koopman(self):
        return VARIANTS[self.variant][2]

    @property
    def stochastic(self):
        return VARIANTS[self.variant][3]

    @property
    def objective(self):
        return VARIANTS[self.variant][4]

    @property
    def hidden(self):
        return self.hidden_dim or self.attn_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class ForwardOutput:
    mu_vv: torch.Tensor  # [B, V, S, j], S = W - 1
    sigma_vv: Optional[torch.Tensor]
    mu_lv: torch.Tensor
    sigma_lv: Optional[torch.Tensor]
    z_vv: torch.Tensor
    z_lv: torch.Tensor
    x_recon: torch.Tensor  # [B, V, S, 2], targets X[:, :, :-1]
    x_pred: torch.Tensor  # targets X[:, :, 1:]
    recon_mask: torch.Tensor  # [B, V, S]
    pred_mask: torch.Tensor
    p_vv: Optional[torch.Tensor] = None
    p_lv: Optional[torch.Tensor] = None
    K_mu: Optional[torch.Tensor] = None
    K_sigma: Optional[torch.Tensor] = None


class SaberModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        D, j, H = c.attn_dim, c.latent_dim, c.hidden
        self.vv_attn = MaskedAttention(2, 2, D, c.heads, c.disp_scale, c.nbr_scale) if c.use_vv else None
        self.lane_attn = MaskedAttention(2, 2, D, c.heads, c.disp_scale, c.lane_scale) if c.use_lane else None
        self.encoder = SequenceEncoder(D if c.use_vv else 2, D, H, j, c.cell, c.stochastic)
        if c.koopman:
            self.propagator = KoopmanPropagator(j, D if c.use_lane else 0, D, c.stochastic)
        else:
            self.propagator = MLPPropagator(j, D)
        self.decoder = Decoder(j, D, c.disp_scale)
        self.mc_samples = 0  # scoring policy for stochastic variants: 0 scores with z = mu

    @property
    def stochastic(self):
        return self.config.stochastic

    def latent_shape(self, batch):
        B, V, W = batch.shape
        return (B, V, W - 1, self.config.latent_dim)

    def draw_eps(self, batch, generator=None):
        """Independent standard-normal draws for the current and propagated latents."""
        if not self.stochastic:
            return None, None
        shape = self.latent_shape(batch)
        dtype = batch.X.dtype
        return (torch.randn(shape, generator=generator, dtype=dtype),
                torch.randn(shape, generator=generator, dtype=dtype))

    def forward(self, batch, eps_vv=None, eps_lv=None, materialize=False) -> ForwardOutput:
        c = self.config
        present = batch.present
        cur = present[:, :, :-1]
        X = torch.where(present[..., None], batch.X, torch.zeros_like(batch.X))
        Xc = X[:, :, :-1]
        B, V, S, _ = Xc.shape

        p_vv = p_lv = None
        if self.vv_attn is not None:
            p_vv = vv_self_attention(Xc, batch.R[:, :, :-1], batch.nbr_mask[:, :, :-1] & cur[..., None],
                                     self.vv_attn)
            enc_in = p_vv
        else:
            enc_in = Xc / c.disp_scale
        if self.lane_attn is not None:
            p_lv = lane_attention(Xc, batch.L[:, :, :-1], batch.lane_mask[:, :, :-1] & cur[..., None],
                                  self.lane_attn)

        _, mu_vv, sigma_vv = encode_sequence(enc_in.reshape(B * V, S, -1), self.encoder, cur.reshape(B * V, S))
        mu_vv = mu_vv.reshape(B, V, S, -1)
        sigma_vv = None if sigma_vv is None else sigma_vv.reshape(B, V, S, -1)

        K_mu = K_sigma = None
        if isinstance(self.propagator, KoopmanPropagator):
            cond = p_lv if p_lv is not None else mu_vv.new_zeros(B, V, S, 0)
            mu_lv, sigma_lv, K_mu, K_sigma = koopman_propagate(mu_vv, sigma_vv, cond, self.propagator)
        else:
            mu_lv, sigma_lv = self.propagator(mu_vv), None

        z_vv = sample_latent(mu_vv, sigma_vv, eps_vv)
        z_lv = sample_latent(mu_lv, sigma_lv, eps_lv)
        return ForwardOutput(
            mu_vv=mu_vv, sigma_vv=sigma_vv, mu_lv=mu_lv, sigma_lv=sigma_lv, z_vv=z_vv, z_lv=z_lv,
            x_recon=decode(z_vv, self.decoder), x_pred=decode(z_lv, self.decoder),
            recon_mask=cur, pred_mask=cur & present[:, :, 1:],
            p_vv=p_vv, p_lv=p_lv,
            K_mu=K_mu if materialize else None, K_sigma=K_sigma if materialize else None,
        )

    def _errors(self, batch, out):
        X = torch.where(batch.present[..., None], batch.X, torch.zeros_like(batch.X))
        if self.config.objective == "reconstruction":
            return torch.linalg.vector_norm(X[:, :, :-1] - out.x_recon, dim=-1), out.recon_mask, 0
        return torch.linalg.vector_norm(X[:, :, 1:] - out.x_pred, dim=-1), out.pred_mask, 1

    def window_errors(self, batch, generator=None):
        """Per-step scoring error (prediction or reconstruction, by variant)."""
        if self.stochastic and self.mc_samples > 0:
            acc = None
            for _ in range(self.mc_samples):
                err, valid, offset = self._errors(batch, self(batch, *self.draw_eps(batch, generator)))
                acc = err if acc is None else acc + err
            return acc / self.mc_samples, valid, offset
        return self._errors(batch, self(batch))


def save_checkpoint(path, model: SaberModel, extra: Optional[dict] = None) -> None:
    cfg = model.config
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[SaberModel, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg = ModelConfig.from_dict(blob["config"])
    if cfg.digest() != blob.get("config_hash"):
        raise CheckpointError("checkpoint config hash does not match its config")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError("checkpoint was trained with a different model config")
    model = SaberModel(cfg)
    state = blob["state"]
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, blob.get("extra", {})
