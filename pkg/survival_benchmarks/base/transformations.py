# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import math as m
import warnings

import numpy as np
import torch


def cum_hazard_to_survival(cum_hazard):
    """ Transform cumulative hazard to survival probability
    S(t) = exp(-L(t))
    """
    if isinstance(cum_hazard, torch.Tensor):
        return torch.exp(-cum_hazard)
    return np.exp(-np.asarray(cum_hazard, dtype=np.float64))


def survival_to_cum_hazard(survival):
    """ Transform survival probability to cumulative hazard
    L(t) = -log S(t)
    """
    if isinstance(survival, torch.Tensor):
        return -torch.log(survival)
    return -np.log(np.asarray(survival, dtype=np.float64))


def risk_to_cloglog(risk):
    """ Complementary log-log transform of a horizon risk
    g(r) = log(-log(1 - r)), defined for r in (0, 1)
    """
    r = np.asarray(risk, dtype=np.float64)
    if np.any(r <= 0.0) or np.any(r >= 1.0):
        raise ValueError("risk must lie strictly inside (0, 1) for the cloglog transform")
    return np.log(-np.log1p(-r))


def cloglog_to_risk(g):
    """ Inverse of `risk_to_cloglog`
    r = 1 - exp(-exp(g))
    """
    return -np.expm1(-np.exp(np.asarray(g, dtype=np.float64)))


def interpolate_on_grid(values, t, step=1.0):
    """ Linear interpolation of values sampled on the grid 0, step, 2*step, ...

    values: tensor (..., K+1), the last axis being the grid
    t: scalar or tensor broadcastable to the leading dims of `values`

    Exact at grid points; gradients flow to `values`.
    """
    values = torch.as_tensor(values)
    t = torch.as_tensor(t, dtype=values.dtype)
    n_steps = values.shape[-1] - 1

    pos = t / step
    if torch.any(pos < 0) or torch.any(pos > n_steps):
        raise ValueError("time outside the grid [0, {}]".format(n_steps * step))

    lower = torch.clamp(torch.floor(pos), max=n_steps - 1).long()
    frac = pos - lower.to(values.dtype)

    if values.dim() == 1 and lower.dim() > 0:
        values = values.expand(lower.shape + values.shape)

    lead = values.shape[:-1]
    if lower.dim() == 0 and len(lead) > 0:
        lower = lower.expand(lead)
        frac = frac.expand(lead)

    v0 = torch.gather(values, -1, lower.unsqueeze(-1)).squeeze(-1)
    v1 = torch.gather(values, -1, (lower + 1).unsqueeze(-1)).squeeze(-1)
    return v0 + frac * (v1 - v0)


def rcs_knots(x, quantiles=(0.1, 0.5, 0.9)):
    """ Knots of a restricted cubic spline at the given quantiles of x """
    knots = np.quantile(np.asarray(x, dtype=np.float64), q=quantiles)
    if np.any(np.diff(knots) <= 1e-12 * max(1.0, np.abs(knots).max())):
        raise ValueError("knots coincide")
    return knots


def rcs_basis(x, knots):
    """ Non-linear term of a restricted cubic spline with three knots

    The spline is linear beyond the outer knots; with three knots it adds a single
    column to the linear term, scaled by the squared outer knot distance.
    """
    if len(knots) != 3:
        raise ValueError("restricted cubic spline basis supports exactly three knots")

    x = np.asarray(x, dtype=np.float64)
    k0, k1, k2 = knots

    def pos3(v):
        return np.power(np.clip(v, a_min=0, a_max=None), 3)

    return (pos3(x - k0)
            - pos3(x - k1) * ((k2 - k0) / (k2 - k1))
            + pos3(x - k2) * ((k1 - k0) / (k2 - k1))) / ((k2 - k0) ** 2)


def sinusoidal_table(n_positions, dim):
    """ Fixed sine/cosine position table of shape (n_positions, dim) """
    if dim % 2 != 0:
        warnings.warn("sinusoidal_table(): odd dimension {}, last column is a sine".format(dim))

    position = np.arange(n_positions, dtype=np.float64)[:, None]
    div_term = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-m.log(10000.0) / dim))

    table = np.zeros((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(position * div_term)
    table[:, 1::2] = np.cos(position * div_term[: dim // 2])
    return table
