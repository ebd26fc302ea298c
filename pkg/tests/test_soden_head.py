import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError
from survival_benchmarks.transformer import soden_head as sh


def _linear_curve(slope=0.5, horizon=48):
    return sh.SurvivalCurve(slope * torch.arange(horizon + 1, dtype=torch.float64))


def test_constant_rate():
    curve = sh.integrate(torch.zeros(3), lambda L, t, z: 0.5, horizon_months=2)
    assert len(curve.cum_hazard) == 3
    assert float(curve.cum_hazard[2]) == pytest.approx(1.0, abs=1e-12)
    assert float(sh.survival_at(curve, 2.0)) == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_affine_rate_matches_closed_form():
    coarse = sh.integrate(torch.zeros(2), lambda L, t, z: L + 1.0, horizon_months=1)
    assert float(coarse.cum_hazard[1]) == pytest.approx(math.e - 1.0, abs=1e-4)

    fine = sh.integrate(torch.zeros(2), lambda L, t, z: L + 1.0, horizon_months=1, substep=1.0 / 32)
    assert float(fine.cum_hazard[1]) == pytest.approx(math.e - 1.0, abs=1e-6)


def test_step_halving_convergence():
    torch.manual_seed(4)
    head = sh.OdeHead(latent_size=5, hidden_size=8).double()
    z = torch.randn(6, 5, dtype=torch.float64)
    with torch.no_grad():
        coarse = head.integrate(z).cum_hazard[:, -1]
        fine = head.integrate(z, substep=0.125).cum_hazard[:, -1]
    assert torch.max(torch.abs(coarse - fine) / fine) < 1e-5


def test_curve_shape_and_monotonicity():
    torch.manual_seed(0)
    head = sh.OdeHead(latent_size=4, hidden_size=6).double()
    with torch.no_grad():
        curve = head.integrate(torch.randn(10, 4, dtype=torch.float64))
    assert curve.cum_hazard.shape == (10, 49)
    assert len(curve) == 10 and curve.horizon_months == 48
    assert torch.all(curve.cum_hazard[:, 0] == 0.0)
    assert torch.all(torch.diff(curve.cum_hazard, dim=-1) > 0.0)
    s = curve.survival
    assert torch.all(s[:, 0] == 1.0) and torch.all(s > 0.0) and torch.all(torch.diff(s, dim=-1) <= 0.0)
    assert torch.equal(curve.grid_months, torch.arange(49, dtype=torch.float64))


def test_batched_integration_matches_single():
    torch.manual_seed(1)
    head = sh.OdeHead(latent_size=3, hidden_size=5).double()
    z = torch.randn(4, 3, dtype=torch.float64)
    with torch.no_grad():
        batch = head.integrate(z).cum_hazard
        single = torch.stack([head.integrate(z[i]).cum_hazard for i in range(4)])
    assert torch.allclose(batch, single, rtol=1e-12, atol=0.0)


def test_cumulative_hazard_ablation():
    assert sh.OdeHead(latent_size=7).hidden.in_features == 9
    assert sh.OdeHead(latent_size=7, feed_cumulative_hazard=False).hidden.in_features == 8
    assert sh.OdeHead(latent_size=7).hidden.out_features == 32


def test_initial_bias():
    head = sh.OdeHead(latent_size=3, initial_hazard_per_month=0.02)
    assert float(F.softplus(head.output.bias)) == pytest.approx(0.02, rel=1e-10)


def test_substep_must_divide_a_month():
    with pytest.raises(ConfigError):
        sh.integrate(torch.zeros(2), lambda L, t, z: 1.0, substep=0.3)


def test_divergence_raises():
    with pytest.raises(NumericalError, match="ODE divergence at month 1"):
        sh.integrate(torch.zeros(2), lambda L, t, z: torch.full_like(L, float("nan")))


def test_survival_and_risk_examples():
    curve = _linear_curve()
    assert float(sh.survival_at(curve, 0.0)) == 1.0
    assert float(sh.risk_at(curve, 0.0)) == 0.0
    assert float(sh.survival_at(curve, 2.0)) == pytest.approx(math.exp(-1.0), rel=1e-14)

    nonlinear = sh.SurvivalCurve(torch.arange(49, dtype=torch.float64) ** 2 / 100.0)
    expected = math.exp(-(nonlinear.cum_hazard[1] + nonlinear.cum_hazard[2]).item() / 2)
    assert float(sh.survival_at(nonlinear, 1.5)) == pytest.approx(expected, rel=1e-14)

    cum = torch.zeros(49, dtype=torch.float64)
    cum[36:] = -math.log(0.3)
    assert float(sh.risk_at(sh.SurvivalCurve(cum), 36.0)) == pytest.approx(0.7, rel=1e-12)

    with pytest.raises(DataError):
        sh.survival_at(curve, 48.5)
    with pytest.raises(DataError):
        sh.risk_at(curve, -1.0)


def test_risk_is_monotone_in_time():
    rng = np.random.default_rng(0)
    increments = rng.exponential(0.05, size=(100, 48))
    cum = np.concatenate([np.zeros((100, 1)), np.cumsum(increments, axis=1)], axis=1)
    curve = sh.SurvivalCurve(torch.from_numpy(cum))
    times = np.sort(rng.uniform(0.0, 48.0, size=20))
    risks = torch.stack([sh.risk_at(curve, float(t)) for t in times], dim=-1)
    assert torch.all(torch.diff(risks, dim=-1) >= 0.0)


def test_output_bias_increases_cumulative_hazard():
    torch.manual_seed(2)
    head = sh.OdeHead(latent_size=3, hidden_size=4).double()
    with torch.no_grad():
        for p in head.parameters():
            p.abs_()
        z = torch.rand(5, 3, dtype=torch.float64)
        before = head.integrate(z).cum_hazard
        head.output.bias.add_(0.1)
        after = head.integrate(z).cum_hazard
    assert torch.all(after[:, 1:] > before[:, 1:])


def test_hazard_at_evaluates_head():
    head = sh.OdeHead(latent_size=2, hidden_size=3).double()
    z = torch.tensor([0.1, -0.2], dtype=torch.float64)
    with torch.no_grad():
        curve = head.integrate(z)
        rate = sh.hazard_at(curve, head, z, 12.0)
        expected = head(curve.cum_hazard[12:13], 12.0 / 48, z.unsqueeze(0))[0]
    assert float(rate) == pytest.approx(float(expected), rel=1e-14)


def test_gradients_of_final_cumulative_hazard():
    torch.manual_seed(3)
    head = sh.OdeHead(latent_size=2, hidden_size=3).double()
    bias_hidden = head.hidden.bias.detach()
    weight_out = head.output.weight.detach()
    bias_out = head.output.bias.detach()

    def final_hazard(z, weight_hidden):
        def rate(L, t, zz):
            t = torch.as_tensor(t, dtype=zz.dtype).expand(L.shape)
            x = torch.cat([L.unsqueeze(-1), t.unsqueeze(-1), zz], dim=-1)
            hidden = torch.tanh(F.linear(x, weight_hidden, bias_hidden))
            return F.softplus(F.linear(hidden, weight_out, bias_out)).squeeze(-1)
        return sh.integrate(z, rate, horizon_months=48, substep=0.25).cum_hazard[:, -1]

    z = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
    w = head.hidden.weight.detach().clone().requires_grad_(True)
    assert torch.autograd.gradcheck(final_hazard, (z, w), eps=1e-6, atol=1e-8, rtol=1e-4)
