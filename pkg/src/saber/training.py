"""Objective, sliding-window training loop and gradient-check harness."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, NonFiniteError, ParameterError
from .model import VARIANTS, ModelConfig, SaberModel, save_checkpoint
from .scene_data import Scene, build_observations, collate, make_windows

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    variant: str = "saber_vae"
    learning_rate: float = 3e-4
    batch_size: int = 64
    beta1: float = 1e-4
    beta2: Optional[float] = None  # None ties it to beta1
    latent_dim: int = 2
    attn_dim: int = 32
    heads: int = 8
    hidden_dim: Optional[int] = None
    cell: str = "gru"
    epochs: int = 500
    max_steps: Optional[int] = None
    d: float = 45.0
    window: int = 15
    stride: int = 1
    seed: int = 0
    grad_clip: float = 5.0
    dtype: str = "float32"
    disp_scale: float = 2.5
    lane_scale: float = 10.0
    nbr_scale: float = 45.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        for name in ("learning_rate", "batch_size", "epochs", "d", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta1 < 0 or (self.beta2 is not None and self.beta2 < 0):
            raise ConfigError("KL weights must be non-negative")
        if self.window < 2 or self.stride < 1:
            raise ConfigError("window must be >= 2 and stride >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        self.model_config()  # validates the architecture fields

    @property
    def betas(self) -> tuple[float, float]:
        """Effective KL weights; deterministic variants carry no KL term."""
        if not VARIANTS[self.variant][3]:
            return 0.0, 0.0
        return self.beta1, self.beta1 if self.beta2 is None else self.beta2

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, latent_dim=self.latent_dim, attn_dim=self.attn_dim, heads=self.heads,
            hidden_dim=self.hidden_dim, cell=self.cell, disp_scale=self.disp_scale,
            lane_scale=self.lane_scale, nbr_scale=self.nbr_scale,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


def split_window(X):
    """Current steps ``X[..., :W-1, :]`` and one-step-ahead targets ``X[..., 1:, :]``."""
    return X[..., :-1, :], X[..., 1:, :]


def kl_std_normal(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis."""
    return 0.5 * torch.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma), dim=-1)


@dataclass
class LossTerms:
    total: torch.Tensor
    pred: torch.Tensor
    recon: torch.Tensor
    n_pred: int
    n_recon: int


def _masked_mean(values, mask):
    n = int(mask.sum())
    if n == 0:
        return values.new_zeros(()), 0
    return torch.where(mask, values, torch.zeros_like(values)).sum() / n, n


def loss(out, batch, beta1=0.0, beta2=0.0, objective="prediction") -> Optional[LossTerms]:
    """Masked, count-averaged prediction and reconstruction objective.

    Returns None when no vehicle-step in the batch is observed.
    """
    X = torch.where(batch.present[..., None], batch.X, torch.zeros_like(batch.X))
    X_minus, X_plus = split_window(X)
    zero = X.new_zeros(())

    recon_err, n_recon = _masked_mean(torch.linalg.vector_norm(X_minus - out.x_recon, dim=-1), out.recon_mask)
    recon = recon_err
    if beta2 and out.sigma_vv is not None:
        recon = recon + beta2 * _masked_mean(kl_std_normal(out.mu_vv, out.sigma_vv), out.recon_mask)[0]

    pred, n_pred = zero, 0
    if objective == "prediction":
        pred, n_pred = _masked_mean(torch.linalg.vector_norm(X_plus - out.x_pred, dim=-1), out.pred_mask)
        if beta1 and out.sigma_lv is not None:
            pred = pred + beta1 * _masked_mean(kl_std_normal(out.mu_lv, out.sigma_lv), out.pred_mask)[0]
    if n_recon == 0 and n_pred == 0:
        return None
    return LossTerms(pred + recon, pred, recon, n_pred, n_recon)


def scene_windows(scenes: Sequence[Scene], window=15, stride=1, d=45.0):
    out = []
    for s in scenes:
        out.extend(make_windows(build_observations(s, d), window, stride))
    return out


@dataclass
class TrainResult:
    model: SaberModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0


def _batch_loss(model, batch, cfg, gen):
    eps_vv, eps_lv = model.draw_eps(batch, gen)
    out = model(batch, eps_vv, eps_lv)
    b1, b2 = cfg.betas
    return loss(out, batch, b1, b2, model.config.objective)


def _dump(batch, out_dir, epoch, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_batch_e{epoch}_s{step}.pt"
    torch.save({"source": batch.source, "X": batch.X, "L": batch.L, "R": batch.R,
                "present": batch.present, "lane_mask": batch.lane_mask, "nbr_mask": batch.nbr_mask}, path)
    return path


def train(scenes: Sequence[Scene], cfg: TrainConfig, out_dir=None, val_fn=None, step_callback=None) -> TrainResult:
    """Train ``cfg.variant`` on normal scenes with Adam over shuffled windows.

    ``val_fn(model) -> float`` (higher is better) selects the best checkpoint
    when given; otherwise the lowest epoch loss wins. ``step_callback(model,
    step)`` runs after every optimiser step.
    """
    bad = [s.scene_id for s in scenes if "abnormal" in s.labels]
    if bad:
        raise ParameterError(f"training scenes must be normal-only; abnormal labels in {bad[:3]}")
    dtype = cfg.torch_dtype
    windows = scene_windows(scenes, cfg.window, cfg.stride, cfg.d)
    if not windows:
        raise ParameterError("no training windows; scenes are shorter than the window")
    data = collate(windows, dtype=dtype)

    torch.manual_seed(cfg.seed)
    model = SaberModel(cfg.model_config()).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    g_order = torch.Generator().manual_seed(cfg.seed + 1)
    g_eps = torch.Generator().manual_seed(cfg.seed + 2)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
    result = TrainResult(model)
    best = -np.inf
    n = len(windows)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            perm = torch.randperm(n, generator=g_order)
            sums = np.zeros(3)
            n_batches = 0
            for i in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
                batch = data.select(perm[i:i + cfg.batch_size])
                terms = _batch_loss(model, batch, cfg, g_eps)
                if terms is None:
                    logger.warning("epoch %d: batch with no observed vehicles skipped", epoch)
                    continue
                if not torch.isfinite(terms.total):
                    path = _dump(batch, out, epoch, result.steps)
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {result.steps}"
                                         + (f"; batch dumped to {path}" if path else ""))
                opt.zero_grad()
                terms.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                result.steps += 1
                sums += [terms.total.item(), terms.pred.item(), terms.recon.item()]
                n_batches += 1
                if step_callback is not None:
                    step_callback(model, result.steps)
            if n_batches == 0:
                break
            mean = sums / n_batches
            rec = {"epoch": epoch, "loss": float(mean[0]), "loss_pred": float(mean[1]),
                   "loss_recon": float(mean[2]), "wall_time": time.perf_counter() - t0}
            if val_fn is not None:
                snapshot = copy.deepcopy(model).eval()
                rec["val"] = float(val_fn(snapshot))
            result.history.append(rec)
            logger.info("epoch %d loss %.5f", epoch, rec["loss"])
            score = rec["val"] if val_fn is not None else -rec["loss"]
            if out is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if score > best:
                best = score
                result.best_epoch = epoch
                if out is not None:
                    save_checkpoint(out / "best.pt", model, {"epoch": epoch, "train_config": cfg.to_dict()})
        if out is not None:
            save_checkpoint(out / "last.pt", model, {"epoch": len(result.history) - 1,
                                                     "train_config": cfg.to_dict()})
    finally:
        if out is not None:
            log_fh.close()
    model.eval()
    return result


def finite_difference_check(model, batch, eps_vv=None, eps_lv=None, beta1=0.0, beta2=0.0, step=1e-5,
                            floor=1e-6):
    """Relative error between autograd and central-difference gradients of the loss.

    Returns ``{parameter name: ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, floor)}``
    plus ``"__all__"`` for the concatenated gradient. The floor keeps
    parameters whose true gradient vanishes (a key bias under softmax, a
    query when only one key is visible) from reporting pure round-off.
    Run it on a float64 model.
    """
    objective = model.config.objective

    def f():
        return loss(model(batch, eps_vv, eps_lv), batch, beta1, beta2, objective).total

    model.zero_grad()
    f().backward()
    report = {}
    autos, fds = [], []
    with torch.no_grad():
        for name, p in model.named_parameters():
            auto = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            fd = torch.zeros_like(p)
            flat, gflat = p.view(-1), fd.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = f().item()
                flat[k] = orig - step
                down = f().item()
                flat[k] = orig
                gflat[k] = (up - down) / (2 * step)
            denom = max(auto.norm().item(), fd.norm().item(), floor)
            report[name] = (auto - fd).norm().item() / denom
            autos.append(auto.view(-1))
            fds.append(fd.view(-1))
        a, b = torch.cat(autos), torch.cat(fds)
        report["__all__"] = (a - b).norm().item() / max(a.norm().item(), b.norm().item(), floor)
    return report
