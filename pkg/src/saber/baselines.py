"""Reference detectors scored through the same windowing and scoring code."""
from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError
from .model import VARIANTS, ModelConfig, SaberModel

BASELINE_KINDS = ("cvm", "rae_pred", "rae_recon", "vv_rae", "saber_ae")


def cvm_predict(prev, cur):
    """Next position assuming the last displacement repeats: ``2 c_t - c_{t-1}``."""
    prev, cur = np.asarray(prev, dtype=np.float64), np.asarray(cur, dtype=np.float64)
    return cur + (cur - prev)


class ConstantVelocity:
    """Parameter-free scorer: one-step error of repeating the last displacement."""

    stochastic = False

    def window_errors(self, batch):
        X = batch.X
        # c_{t+1} - cvm_predict(c_{t-1}, c_t) reduces to X_{t+1} - X_t
        err = torch.linalg.vector_norm(X[:, :, 1:] - X[:, :, :-1], dim=-1)
        valid = batch.present[:, :, 1:] & batch.present[:, :, :-1]
        return torch.where(valid, err, torch.zeros_like(err)), valid, 1

    def eval(self):
        return self


def build_variant(kind: str, **config):
    """Instantiate a detector by name: ``cvm`` or any learned variant."""
    if kind == "cvm":
        if config:
            raise ConfigError("cvm takes no configuration")
        return ConstantVelocity()
    if kind not in VARIANTS:
        raise ConfigError(f"unknown detector {kind!r}; expected cvm or one of {sorted(VARIANTS)}")
    return SaberModel(ModelConfig(variant=kind, **config))
