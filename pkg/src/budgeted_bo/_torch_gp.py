"""Differentiable (torch, float64) views of fitted GP models.

Used wherever gradients with respect to query locations are needed: the
closed-form acquisitions during optimization and the one-shot tree.
All quantities here are in *standardized* target units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .gp_core import GpModel

torch.set_default_dtype(torch.float64)
DTYPE = torch.float64
SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class TorchGp:
    train_x: torch.Tensor
    chol: torch.Tensor
    alpha: torch.Tensor
    mean_constant: float
    lengthscales: torch.Tensor
    outputscale: float
    noise: float
    y_offset: float
    y_scale: float

    @classmethod
    def from_model(cls, model: GpModel) -> TorchGp:
        t = lambda a: torch.tensor(np.array(a), dtype=DTYPE)  # noqa: E731
        return cls(
            t(model.train_inputs), t(model.cholesky_factor), t(model.alpha),
            model.mean_constant, t(model.params.lengthscales), model.params.outputscale,
            model.params.noise_variance, model.y_offset, model.y_scale,
        )

    def kernel(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Matern 5/2 cross-covariance, broadcasting over leading dims."""
        diff = (a.unsqueeze(-2) - b.unsqueeze(-3)) / self.lengthscales
        # clamp keeps the sqrt differentiable at r = 0, where dk/dr is 0 anyway
        r = torch.sqrt(torch.clamp_min((diff**2).sum(-1), 1e-36))
        sr = SQRT5 * r
        return self.outputscale * (1.0 + sr + sr**2 / 3.0) * torch.exp(-sr)

    def _solve(self, kxq: torch.Tensor) -> torch.Tensor:
        # kxq: (..., n, q) -> L^{-1} kxq
        chol = self.chol.expand(*kxq.shape[:-2], *self.chol.shape)
        return torch.linalg.solve_triangular(chol, kxq, upper=False)

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Standardized latent mean and stddev at ``x`` of shape (..., d)."""
        xq = x.unsqueeze(-2)
        kqx = self.kernel(xq, self.train_x)  # (..., 1, n)
        mean = self.mean_constant + (kqx @ self.alpha.unsqueeze(-1))[..., 0, 0]
        v = self._solve(kqx.transpose(-1, -2))
        var = self.outputscale - (v**2).sum((-1, -2))
        std = torch.sqrt(torch.clamp_min(var, 1e-30))
        return mean, std

    def joint(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior mean (..., k) and covariance (..., k, k) at point sets p (..., k, d)."""
        kpx = self.kernel(p, self.train_x)
        mean = self.mean_constant + (kpx @ self.alpha.unsqueeze(-1))[..., 0]
        v = self._solve(kpx.transpose(-1, -2))
        cov = self.kernel(p, p) - v.transpose(-1, -2) @ v
        return mean, cov
