# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import collections
import dataclasses

import numpy as np
import torch

from survival_benchmarks.base.config import ConfigMixin
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError
from survival_benchmarks.transformer.soden_head import SurvivalCurve, cum_hazard_at

LossTerms = collections.namedtuple("LossTerms", ["total", "nll", "xcal"])

_EPS = 1e-12


@dataclasses.dataclass
class LossConfig(ConfigMixin):
    lambda_xcal: float = 2.0
    dcal_bins: int = 10
    interpolation: bool = True
    soft_bin_temperature: float = 1e4

    def validate(self):
        if self.lambda_xcal < 0.0:
            raise ConfigError("lambda_xcal must be non-negative")
        if self.dcal_bins < 2:
            raise ConfigError("dcal_bins must be >= 2")
        if self.soft_bin_temperature <= 0.0:
            raise ConfigError("soft_bin_temperature must be positive")


def _cum_hazard(curve, t, interpolation):
    if interpolation:
        return cum_hazard_at(curve, t)
    # step reading: L at the last grid point not after t
    return cum_hazard_at(curve, torch.floor(torch.as_tensor(t, dtype=curve.cum_hazard.dtype)))


def nll(curve: SurvivalCurve, rate_at_event, t, event, interpolation=True):
    """Censored negative log-likelihood per patient

    event = 1: -log rate(t) + L(t);  event = 0: L(t)
    """
    event = torch.as_tensor(event, dtype=curve.cum_hazard.dtype)
    cum_hazard = _cum_hazard(curve, t, interpolation)
    loss = cum_hazard - event * torch.log(rate_at_event)
    if not torch.all(torch.isfinite(loss)):
        raise NumericalError("non-finite negative log-likelihood")
    return loss


def _bin_edges(bins, dtype):
    return torch.linspace(0.0, 1.0, bins + 1, dtype=dtype)


def _uncensored_mass(u, bins, temperature):
    """Soft membership of u in each bin: sigmoid steps at the inner edges

    The outer edges sit at -inf / +inf so every row sums to one.
    """
    edges = _bin_edges(bins, u.dtype)[1:-1]
    above = torch.sigmoid(temperature * (u[:, None] - edges[None, :]))
    ones = torch.ones_like(u)[:, None]
    zeros = torch.zeros_like(u)[:, None]
    upper = torch.cat([ones, above], dim=1)
    lower = torch.cat([above, zeros], dim=1)
    return upper - lower


def _hard_uncensored_mass(u, bins):
    index = torch.clamp(torch.floor(u * bins).long(), 0, bins - 1)
    return torch.nn.functional.one_hot(index, bins).to(u.dtype)


def _censored_mass(u, bins):
    """Uniform spread of the remaining PIT mass over [0, u]"""
    lower = _bin_edges(bins, u.dtype)[:-1]
    overlap = torch.clamp(u[:, None] - lower[None, :], min=0.0, max=1.0 / bins)
    return overlap / torch.clamp(u, min=_EPS)[:, None]


def dcal_bin_mass(u, event, bins=10, temperature=None):
    """Fraction of the PIT mass falling in each of `bins` equal bins of [0, 1]

    Parameters
    ----------
    u : torch.Tensor
        S(t_i | x_i) at the observed times, in [0, 1].
    event : torch.Tensor
        Event indicators.
    bins : int
    temperature : float or None
        Sharpness of the soft bin edges; None bins hard.
    """
    u = torch.as_tensor(u)
    if u.numel() == 0:
        raise DataError("no subjects")
    if not torch.all(torch.isfinite(u)):
        raise NumericalError("non-finite survival values")
    u = torch.clamp(u, 0.0, 1.0)
    event = torch.as_tensor(event).to(torch.bool)

    if temperature is None:
        uncensored = _hard_uncensored_mass(u, bins)
    else:
        uncensored = _uncensored_mass(u, bins, temperature)
    mass = torch.where(event[:, None], uncensored, _censored_mass(u, bins))
    return mass.sum(dim=0) / u.shape[0]


def xcal(u, event, config: LossConfig):
    """Differentiable D-calibration statistic, sum over bins of (p_b - 1/B)^2"""
    mass = dcal_bin_mass(u, event, config.dcal_bins, config.soft_bin_temperature)
    return torch.sum((mass - 1.0 / config.dcal_bins) ** 2)


def hard_dcal_statistic(u, event, bins=10):
    """Hard-binned D-calibration statistic (numpy in, float out)"""
    u = torch.as_tensor(np.asarray(u, dtype=np.float64))
    mass = dcal_bin_mass(u, torch.as_tensor(np.asarray(event)), bins, temperature=None)
    return float(torch.sum((mass - 1.0 / bins) ** 2))


def total_loss(curve: SurvivalCurve, rate_at_event, t, event, config: LossConfig):
    """mean nll + lambda_xcal * xcal over one batch"""
    nll_term = nll(curve, rate_at_event, t, event, config.interpolation).mean()
    if config.lambda_xcal == 0.0:
        return LossTerms(nll_term, nll_term, torch.zeros_like(nll_term))

    u = torch.exp(-_cum_hazard(curve, t, config.interpolation))
    xcal_term = xcal(u, event, config)
    return LossTerms(nll_term + config.lambda_xcal * xcal_term, nll_term, xcal_term)
