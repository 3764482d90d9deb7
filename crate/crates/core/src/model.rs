//! Model parameters, state, stochastic samplers and the liquidation payoff.
//!
//! The resource follows the logistic diffusion
//! `dR = η R (λ − R) dt + γ R dB`, the unit price and the unit renewal
//! cost are geometric Brownian motions driven by the same Brownian motion
//! `W`. All samplers take their randomness as explicit gaussian draws so
//! they stay pure functions of their inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Every coefficient of the dynamics, the costs, the renewal schedule and
/// the delay.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Growth intensity η (1/time).
    pub eta: f64,
    /// Carrying coefficient λ (resource units).
    pub lambda_cap: f64,
    /// Resource volatility γ.
    pub gamma: f64,
    /// Price drift μ.
    pub mu: f64,
    /// Price volatility σ.
    pub sigma: f64,
    /// Renewal-cost drift ρ.
    pub rho_cost: f64,
    /// Renewal-cost volatility ς.
    pub varsigma: f64,
    /// Proportional harvest cost.
    pub c1: f64,
    /// Fixed harvest cost.
    pub c2: f64,
    /// Proportional renewal surcharge.
    pub c3: f64,
    /// Natural renewal added at every date (absolute resource units).
    pub g0: f64,
    /// Slope of the linear renewal yield `g(e) = g_slope · e`.
    pub g_slope: f64,
    /// Maximal renewal order K.
    pub k_max: f64,
    /// Horizon T.
    pub horizon: f64,
    /// Number of renewal dates n.
    pub n_dates: usize,
    /// Delay m in date steps.
    pub m_delay: usize,
    /// When set, the renewal cost is the price itself (`Q ≡ P`).
    pub cost_equals_price: bool,
}

impl ModelParams {
    /// The forest example: η = 1, λ = 0.7, γ = 0.1, μ = 0.07, σ = 0.1,
    /// c1 = 0.1, c2 = 0.01, c3 = 0.1, g0 = 0.03, g(x) = x, T = 3 with
    /// renewal dates every unit of time, a one-date delay and `Q ≡ P`.
    /// K is not part of the published setup; 0.3 is used.
    pub fn baseline() -> Self {
        Self {
            eta: 1.0,
            lambda_cap: 0.7,
            gamma: 0.1,
            mu: 0.07,
            sigma: 0.1,
            rho_cost: 0.07,
            varsigma: 0.1,
            c1: 0.1,
            c2: 0.01,
            c3: 0.1,
            g0: 0.03,
            g_slope: 1.0,
            k_max: 0.3,
            horizon: 3.0,
            n_dates: 3,
            m_delay: 1,
            cost_equals_price: true,
        }
    }

    /// Strict validation: every coefficient positive, as the model assumes.
    pub fn validate(&self) -> Result<()> {
        self.check(false).map(|_| ())
    }

    /// Validation that lets γ, σ, ς and K be zero (degenerate or
    /// deterministic runs). Returns one warning per relaxed field.
    pub fn validate_allowing_degenerate(&self) -> Result<Vec<String>> {
        self.check(true)
    }

    /// Consumes `self` and returns it back iff the strict invariants hold.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    fn check(&self, relaxed: bool) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let positive: [(&'static str, f64); 8] = [
            ("eta", self.eta),
            ("lambda_cap", self.lambda_cap),
            ("mu", self.mu),
            ("rho_cost", self.rho_cost),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("T", self.horizon),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, format!("must be positive and finite, got {v}")));
            }
        }
        let soft: [(&'static str, f64); 4] = [
            ("gamma", self.gamma),
            ("sigma", self.sigma),
            ("varsigma", self.varsigma),
            ("K", self.k_max),
        ];
        for (field, v) in soft {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(field, format!("must be finite and nonnegative, got {v}")));
            }
            if v == 0.0 {
                if relaxed {
                    warnings.push(format!("{field} = 0: degenerate coefficient accepted"));
                } else {
                    return Err(invalid(field, "must be positive".to_string()));
                }
            }
        }
        for (field, v) in [("g0", self.g0), ("g_slope", self.g_slope)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be nonnegative, got {v}")));
            }
        }
        if self.n_dates < 1 {
            return Err(invalid("n_dates", "must be at least 1".to_string()));
        }
        if self.m_delay > self.n_dates {
            return Err(invalid(
                "m_delay",
                format!("delay {} exceeds the {} renewal dates", self.m_delay, self.n_dates),
            ));
        }
        Ok(warnings)
    }

    /// Renewal yield `g(e)`.
    #[inline]
    pub fn yield_of(&self, e: f64) -> f64 {
        self.g_slope * e
    }

    /// Bound `max_{e ≤ K} g(e) + g0` on the stock added at one date.
    pub fn max_date_increment(&self) -> f64 {
        self.yield_of(self.k_max) + self.g0
    }
}

fn invalid(field: &'static str, reason: String) -> Error {
    Error::InvalidParam { field, reason }
}

/// Cash, resource stock, unit price and unit renewal cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub x: f64,
    pub r: f64,
    pub p: f64,
    pub q: f64,
}

impl State {
    pub fn new(x: f64, r: f64, p: f64, q: f64) -> Self {
        Self { x, r, p, q }
    }

    pub fn is_admissible(&self) -> bool {
        self.r >= 0.0 && self.p > 0.0 && self.q > 0.0
    }

    pub fn with_cash(self, x: f64) -> Self {
        Self { x, ..self }
    }
}

/// Exact solution of `dR = η R (λ − R) dt` after a time `dt`.
pub fn logistic_step_deterministic(r: f64, dt: f64, params: &ModelParams) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let lam = params.lambda_cap;
    let growth = (params.eta * lam * dt).exp();
    r * lam * growth / (lam + r * (growth - 1.0))
}

/// Samples the logistic diffusion on `[t0, t1]` from the closed formula
/// `R_s = r0 e^{Y_s} / (1 + r0 η ∫ e^{Y_u} du)` with
/// `Y_u = (ηλ − γ²/2)(u − t0) + γ (B_u − B_t0)`. The path integral uses the
/// trapezoid rule on `n_sub` equal sub-steps; `draws[j]` is the standard
/// normal driving the `j`-th Brownian increment.
///
/// Returns the `n_sub + 1` path values including `r0`.
pub fn logistic_sample_path(
    r0: f64,
    t0: f64,
    t1: f64,
    n_sub: usize,
    draws: &[f64],
    params: &ModelParams,
) -> Result<Vec<f64>> {
    if draws.len() != n_sub {
        return Err(Error::DrawCount {
            expected: n_sub,
            got: draws.len(),
        });
    }
    if n_sub == 0 {
        return Err(Error::InvalidParam {
            field: "n_sub",
            reason: "must be at least 1".into(),
        });
    }
    let mut path = Vec::with_capacity(n_sub + 1);
    path.push(r0.max(0.0));
    let h = (t1 - t0) / n_sub as f64;
    logistic_walk(r0, h, draws, params, |r| path.push(r));
    Ok(path)
}

/// Endpoint of [`logistic_sample_path`] over a span `dt`, allocation free.
/// Also returns the running maximum along the sub-grid.
pub fn logistic_advance(r0: f64, dt: f64, draws: &[f64], params: &ModelParams) -> (f64, f64) {
    let h = dt / draws.len().max(1) as f64;
    let mut last = r0.max(0.0);
    let mut sup = last;
    logistic_walk(r0, h, draws, params, |r| {
        last = r;
        sup = sup.max(r);
    });
    (last, sup)
}

fn logistic_walk(r0: f64, h: f64, draws: &[f64], params: &ModelParams, mut emit: impl FnMut(f64)) {
    if r0 <= 0.0 {
        draws.iter().for_each(|_| emit(0.0));
        return;
    }
    let drift = params.eta * params.lambda_cap - 0.5 * params.gamma * params.gamma;
    let vol = params.gamma * h.sqrt();
    let mut y = 0.0_f64;
    let mut ey = 1.0_f64;
    let mut integral = 0.0_f64;
    for z in draws {
        let y_next = y + drift * h + vol * z;
        let ey_next = y_next.exp();
        integral += 0.5 * h * (ey + ey_next);
        y = y_next;
        ey = ey_next;
        emit(r0 * ey / (1.0 + r0 * params.eta * integral));
    }
}

/// Exact GBM transition `v · exp((drift − vol²/2) dt + vol dw)`.
#[inline]
pub fn gbm_step(v: f64, dt: f64, dw: f64, drift: f64, vol: f64) -> f64 {
    v * ((drift - 0.5 * vol * vol) * dt + vol * dw).exp()
}

/// Terminal payoff: sell the whole stock or keep the cash, whichever is
/// larger.
#[inline]
pub fn liquidation(z: &State, params: &ModelParams) -> f64 {
    z.x + liquidation_gain(z.r, z.p, params)
}

/// `max{(p − c1) r − c2, 0}`, the cash-free part of [`liquidation`].
#[inline]
pub fn liquidation_gain(r: f64, p: f64, params: &ModelParams) -> f64 {
    ((p - params.c1) * r - params.c2).max(0.0)
}

/// Per-path generator. Path `i` of a run seeded with `seed` always draws
/// from ChaCha8 seeded by `seed` on stream `i`, independent of batch size
/// or scheduling.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn baseline_is_valid() {
        assert!(ModelParams::baseline().validate().is_ok());
    }

    #[test]
    fn zero_gamma_rejected_strictly_but_accepted_relaxed() {
        let p = ModelParams {
            gamma: 0.0,
            ..ModelParams::baseline()
        };
        match p.validate() {
            Err(Error::InvalidParam { field, .. }) => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other:?}"),
        }
        let warnings = p.validate_allowing_degenerate().unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn delay_longer_than_schedule_rejected() {
        let p = ModelParams {
            m_delay: 5,
            ..ModelParams::baseline()
        };
        match p.validate() {
            Err(Error::InvalidParam { field, .. }) => assert_eq!(field, "m_delay"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_cost_rejected() {
        let p = ModelParams {
            c2: -0.01,
            ..ModelParams::baseline()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn deterministic_logistic_fixed_points() {
        let p = ModelParams::baseline();
        assert_eq!(logistic_step_deterministic(0.0, 2.0, &p), 0.0);
        assert_relative_eq!(logistic_step_deterministic(0.7, 1.3, &p), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_logistic_matches_rk4() {
        let p = ModelParams::baseline();
        let closed = logistic_step_deterministic(0.5, 1.0, &p);
        assert_relative_eq!(closed, 0.583_998_058_652_234_6, epsilon = 1e-12);
        let rhs = |r: f64| p.eta * r * (p.lambda_cap - r);
        let n = 1000;
        let h = 1.0 / n as f64;
        let mut r = 0.5;
        for _ in 0..n {
            let k1 = rhs(r);
            let k2 = rhs(r + 0.5 * h * k1);
            let k3 = rhs(r + 0.5 * h * k2);
            let k4 = rhs(r + h * k3);
            r += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((closed - r).abs() < 1e-8);
    }

    #[test]
    fn noise_free_path_matches_closed_form() {
        let p = ModelParams {
            gamma: 0.0,
            ..ModelParams::baseline()
        };
        let n = 4096;
        let draws = vec![0.37; n];
        let path = logistic_sample_path(0.5, 0.0, 1.0, n, &draws, &p).unwrap();
        assert_eq!(path.len(), n + 1);
        let exact = logistic_step_deterministic(0.5, 1.0, &p);
        assert!((path[n] - exact).abs() < 1e-6);
    }

    #[test]
    fn extinct_path_stays_at_zero() {
        let p = ModelParams::baseline();
        let draws = [1.0, -2.0, 0.5];
        let path = logistic_sample_path(0.0, 0.0, 1.0, 3, &draws, &p).unwrap();
        assert!(path.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn draw_count_mismatch_is_an_error() {
        let p = ModelParams::baseline();
        let err = logistic_sample_path(0.5, 0.0, 1.0, 4, &[0.0; 3], &p).unwrap_err();
        assert_eq!(err, Error::DrawCount { expected: 4, got: 3 });
    }

    #[test]
    fn advance_agrees_with_path_endpoint() {
        let p = ModelParams::baseline();
        let draws = [0.3, -1.2, 0.8, 2.1, -0.4];
        let path = logistic_sample_path(0.4, 0.0, 0.5, 5, &draws, &p).unwrap();
        let (end, sup) = logistic_advance(0.4, 0.5, &draws, &p);
        assert_eq!(end, path[5]);
        assert_eq!(sup, path.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn gbm_cancelling_increment_is_identity() {
        let (mu, sig, dt) = (0.07, 0.1, 0.7);
        let dw = -(mu - 0.5 * sig * sig) * dt / sig;
        assert_relative_eq!(gbm_step(1.3, dt, dw, mu, sig), 1.3, epsilon = 1e-14);
        assert_relative_eq!(gbm_step(1.0, 1.0, 0.0, 0.07, 0.0), 1.072_508_181_254_216_5, epsilon = 1e-14);
    }

    #[test]
    fn liquidation_cases() {
        let p = ModelParams::baseline();
        assert_eq!(liquidation(&State::new(1.5, 0.0, 1.0, 1.0), &p), 1.5);
        assert_relative_eq!(liquidation(&State::new(2.0, 0.5, 1.0, 1.0), &p), 2.44, epsilon = 1e-14);
        // p ≤ c1: selling never pays.
        assert_eq!(liquidation(&State::new(0.3, 0.8, 0.1, 1.0), &p), 0.3);
    }

    #[test]
    fn path_rng_is_stable_per_index() {
        use rand::RngCore;
        let a = path_rng(42, 7).next_u64();
        let b = path_rng(42, 7).next_u64();
        let c = path_rng(42, 8).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
