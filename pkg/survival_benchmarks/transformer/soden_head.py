# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Survival head: the cumulative hazard as the solution of a learned ODE

    dL/dt = f(L(t), t / horizon, z),   L(0) = 0,   S(t) = exp(-L(t))

f is a one-hidden-layer network with a softplus output, so the hazard is positive and
L is non-decreasing. The ODE is solved by fixed-step RK4 and differentiated through
the unrolled steps.
"""

import dataclasses
import logging
import math

import torch
from torch import nn

from survival_benchmarks.base import transformations as tr
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)


def inverse_softplus(y):
    return y + math.log(-math.expm1(-y))


class OdeHead(nn.Module):
    """Hazard network f(L, t_normalized, z) -> rate > 0

    Parameters
    ----------
    latent_size : int
        Size of the latent state z.
    hidden_size : int
        Width of the single hidden layer.
    feed_cumulative_hazard : bool
        When False the network does not see L (ablation).
    horizon_months : int
        Length of the monthly grid; t is fed normalised by it.
    substep : float
        RK4 step in months, must divide one month.
    initial_hazard_per_month : float
        Output bias is set so that the untrained head starts near this rate.
    """

    def __init__(self, latent_size, hidden_size=32, feed_cumulative_hazard=True,
                 horizon_months=48, substep=0.25, initial_hazard_per_month=0.02):
        super().__init__()
        self.feed_cumulative_hazard = feed_cumulative_hazard
        self.horizon_months = int(horizon_months)
        self.substep = substep

        n_inputs = latent_size + (2 if feed_cumulative_hazard else 1)
        self.hidden = nn.Linear(n_inputs, hidden_size)
        self.output = nn.Linear(hidden_size, 1)
        with torch.no_grad():
            self.output.bias.fill_(inverse_softplus(initial_hazard_per_month))

    def forward(self, cum_hazard, t_normalized, z):
        """
        cum_hazard: (B,); t_normalized: scalar or (B,); z: (B, P). Returns the rate (B,).
        """
        t = torch.as_tensor(t_normalized, dtype=z.dtype)
        t = t.expand(cum_hazard.shape) if t.dim() == 0 else t
        inputs = [t.unsqueeze(-1), z]
        if self.feed_cumulative_hazard:
            inputs.insert(0, cum_hazard.unsqueeze(-1))
        x = torch.tanh(self.hidden(torch.cat(inputs, dim=-1)))
        return nn.functional.softplus(self.output(x)).squeeze(-1)

    def integrate(self, z, substep=None):
        return integrate(z, self, horizon_months=self.horizon_months,
                         substep=self.substep if substep is None else substep)


@dataclasses.dataclass
class SurvivalCurve:
    """Cumulative hazard on the monthly grid 0, 1, ..., horizon

    `cum_hazard` has shape (horizon + 1,) or (B, horizon + 1).
    """
    cum_hazard: torch.Tensor

    @property
    def horizon_months(self):
        return self.cum_hazard.shape[-1] - 1

    @property
    def grid_months(self):
        return torch.arange(self.horizon_months + 1, dtype=self.cum_hazard.dtype)

    @property
    def survival(self):
        return tr.cum_hazard_to_survival(self.cum_hazard)

    def __len__(self):
        return 1 if self.cum_hazard.dim() == 1 else self.cum_hazard.shape[0]

    def __getitem__(self, index):
        return SurvivalCurve(self.cum_hazard[index])

    def detach(self):
        return SurvivalCurve(self.cum_hazard.detach())


def _evaluate_rate(rate_fn, cum_hazard, t, horizon, z):
    rate = rate_fn(cum_hazard, t / horizon, z)
    rate = torch.as_tensor(rate, dtype=cum_hazard.dtype)
    return rate.expand(cum_hazard.shape) if rate.shape != cum_hazard.shape else rate


def integrate(z, rate_fn, horizon_months=48, substep=0.25):
    """Solve dL/dt = rate_fn(L, t / horizon, z) with RK4, L(0) = 0

    Parameters
    ----------
    z : torch.Tensor
        Latent state (P,) or batch of latent states (B, P).
    rate_fn : callable
        `(cum_hazard (B,), t_normalized, z (B, P)) -> rate (B,)`, e.g. an `OdeHead`.
    horizon_months : int
    substep : float
        Integration step in months; 1 / substep must be an integer.

    Returns
    -------
    SurvivalCurve
        L at every month of the grid.
    """
    per_month = 1.0 / substep
    if abs(per_month - round(per_month)) > 1e-9 or per_month < 1:
        raise ConfigError("substep must divide one month: {}".format(substep))
    per_month = int(round(per_month))

    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)

    h = 1.0 / per_month
    L = torch.zeros(z.shape[0], dtype=z.dtype)
    grid = [L]
    for month in range(int(horizon_months)):
        for k in range(per_month):
            t = month + k * h
            k1 = _evaluate_rate(rate_fn, L, t, horizon_months, z)
            k2 = _evaluate_rate(rate_fn, L + 0.5 * h * k1, t + 0.5 * h, horizon_months, z)
            k3 = _evaluate_rate(rate_fn, L + 0.5 * h * k2, t + 0.5 * h, horizon_months, z)
            k4 = _evaluate_rate(rate_fn, L + h * k3, t + h, horizon_months, z)
            L = L + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not torch.all(torch.isfinite(L)):
            raise NumericalError("ODE divergence at month {}".format(month + 1))
        grid.append(L)

    cum_hazard = torch.stack(grid, dim=-1)
    return SurvivalCurve(cum_hazard[0] if single else cum_hazard)


def cum_hazard_at(curve: SurvivalCurve, t):
    """L(t) by linear interpolation between grid points"""
    try:
        return tr.interpolate_on_grid(curve.cum_hazard, t)
    except ValueError:
        raise DataError("time outside [0, {}] months".format(curve.horizon_months))


def survival_at(curve: SurvivalCurve, t):
    return torch.exp(-cum_hazard_at(curve, t))


def risk_at(curve: SurvivalCurve, t):
    return -torch.expm1(-cum_hazard_at(curve, t))


def hazard_at(curve: SurvivalCurve, rate_fn, z, t):
    """Instantaneous hazard f(L(t), t / horizon, z) at arbitrary times t"""
    cum_hazard = cum_hazard_at(curve, t)
    single = cum_hazard.dim() == 0
    if single:
        cum_hazard, z = cum_hazard.unsqueeze(0), z.unsqueeze(0)
    t = torch.as_tensor(t, dtype=cum_hazard.dtype)
    rate = _evaluate_rate(rate_fn, cum_hazard, t, curve.horizon_months, z)
    return rate[0] if single else rate
