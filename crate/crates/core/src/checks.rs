//! Runtime check suites: scheme soundness, value-function properties,
//! Monte Carlo consistency and oracle agreement. Every check yields one
//! [`CheckLine`]; a [`CheckReport`] prints them as `PASS`/`FAIL` lines.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::chain::{build_grid, implicit_step, Dynamics, Generator, GridOverrides, GridSpec, LinearSolverOptions, ValueField};
use crate::error::Result;
use crate::impulse::{harvest_op, mature_op, renew_op};
use crate::model::{gbm_step, liquidation, logistic_advance, logistic_sample_path, path_rng, ModelParams, State};
use crate::oracle;
use crate::policy_sim::{dpp_check, paired_difference, simulate, Policy, SimConfig, StoppingRule};
use crate::solver::{discrete_harvest_sup, padding_nodes, solve_with_generator, Region, RegionMap, Solution, SolverOptions};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn push(&mut self, line: CheckLine) {
        self.lines.push(line);
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Growth constant fitted once on the baseline field (151×101, K = 0.3,
/// n_t = 50) and rounded up; regressions are measured against it.
pub const BASELINE_GROWTH_C: f64 = 0.48;

/// Every generator row has nonnegative off-diagonals and sums to zero.
pub fn generator_soundness(generator: &Generator) -> CheckLine {
    let mut rows = 0;
    let mut bad_sign = 0;
    let mut worst_sum = 0.0_f64;
    for row in generator.rows() {
        rows += 1;
        if !row.is_monotone() {
            bad_sign += 1;
        }
        worst_sum = worst_sum.max(row.row_sum().abs());
    }
    CheckLine::new(
        "generator_m_matrix",
        bad_sign == 0 && worst_sum <= 1e-12,
        format!("rows={rows} negative_offdiag_rows={bad_sign} max_row_sum={worst_sum:.3e}"),
    )
}

/// On interior nodes the chain's mean increment equals the drift exactly
/// and its second moment exceeds the variance by `h |drift|` only.
pub fn local_consistency(params: &ModelParams, grid: &GridSpec) -> CheckLine {
    let dynamics = Dynamics::from_params(params);
    let generator = Generator::new(&dynamics, grid);
    let (h_r, h_s) = (grid.h_r(), grid.h_s());
    let mut first = 0.0_f64;
    let mut excess = 0.0_f64;
    for i_r in 1..grid.n_r - 1 {
        let r = grid.r_at(i_r);
        for i_s in 1..grid.n_s - 1 {
            let q = generator.rates(grid.node(i_r, i_s));
            let (b_r, b_s) = (dynamics.r_drift(r), dynamics.s_drift);
            let scale_r = 1.0 + b_r.abs();
            first = first.max(((q.r_up - q.r_down) * h_r - b_r).abs() / scale_r);
            first = first.max(((q.s_up - q.s_down) * h_s - b_s).abs() / (1.0 + b_s.abs()));
            let m2_r = (q.r_up + q.r_down) * h_r * h_r - dynamics.r_var(r);
            let m2_s = (q.s_up + q.s_down) * h_s * h_s - dynamics.s_var;
            excess = excess.max((m2_r - h_r * b_r.abs()).abs() / scale_r);
            excess = excess.max((m2_s - h_s * b_s.abs()).abs() / (1.0 + b_s.abs()));
        }
    }
    CheckLine::new(
        "local_consistency",
        first <= 1e-12 && excess <= 1e-12,
        format!("max_first_moment_err={first:.3e} max_second_moment_excess_minus_h_drift={excess:.3e}"),
    )
}

/// `E[sup R̄²] / (1 + r0²)` of the never-harvest, always-order-K stock for
/// `r0 ∈ {0.1, 0.5, 1}`; the ratios must stay within one order of magnitude.
pub fn moment_bound(params: &ModelParams, n_paths: usize, n_sub: usize, seed: u64) -> CheckLine {
    let starts = [0.1, 0.5, 1.0];
    let ratios: Vec<f64> = starts
        .iter()
        .map(|&r0| {
            let sum: f64 = (0..n_paths)
                .map(|i| sup_square_max_renewal(r0, params, n_sub, seed, i as u64))
                .sum();
            sum / n_paths as f64 / (1.0 + r0 * r0)
        })
        .collect();
    let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
    CheckLine::new(
        "moment_bound",
        hi.is_finite() && lo > 0.0 && hi / lo < 10.0,
        format!("ratios={ratios:.4?} spread={:.3}", hi / lo),
    )
}

fn sup_square_max_renewal(r0: f64, params: &ModelParams, n_sub: usize, seed: u64, path: u64) -> f64 {
    let mut rng = path_rng(seed, path);
    let period = params.horizon / params.n_dates as f64;
    let mut draws = vec![0.0; n_sub];
    let mut r = r0;
    let mut sup = r0;
    for date in 1..=params.n_dates {
        draws.iter_mut().for_each(|d| *d = rng.sample(StandardNormal));
        let (end, s) = logistic_advance(r, period, &draws, params);
        sup = sup.max(s);
        r = end + params.g0;
        if date > params.m_delay || params.m_delay == 0 {
            r += params.yield_of(params.k_max);
        }
        sup = sup.max(r);
    }
    sup * sup
}

/// Every sampled stock is nonnegative and every price and cost positive.
pub fn sample_positivity(params: &ModelParams, n_paths: usize, seed: u64) -> CheckLine {
    let steps = 64;
    let dt = params.horizon / steps as f64;
    let mut bad = 0;
    for i in 0..n_paths {
        let mut rng = path_rng(seed, i as u64);
        let draws: Vec<f64> = (0..steps).map(|_| rng.sample(StandardNormal)).collect();
        let path = logistic_sample_path(0.5, 0.0, params.horizon, steps, &draws, params).expect("draw count matches");
        bad += path.iter().filter(|r| !(**r >= 0.0)).count();
        let (mut p, mut q) = (1.0_f64, 1.0_f64);
        for _ in 0..steps {
            let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
            p = gbm_step(p, dt, dw, params.mu, params.sigma);
            q = gbm_step(q, dt, dw, params.rho_cost, params.varsigma);
            bad += usize::from(!(p > 0.0) || !(q > 0.0));
        }
    }
    CheckLine::new("sample_positivity", bad == 0, format!("paths={n_paths} violations={bad}"))
}

/// `L(z) ≥ x` with equality exactly when `(p − c1) r ≤ c2`, and cash
/// enters every operator additively.
pub fn operator_identities(params: &ModelParams) -> CheckLine {
    let mut failures = 0;
    for &x in &[-1.0, 0.0, 2.0] {
        for &r in &[0.0, 0.01, 0.3, 0.9] {
            for &p in &[0.05, 0.1, 0.5, 1.0, 2.0] {
                let z = State::new(x, r, p, p);
                let l = liquidation(&z, params);
                let sells = (p - params.c1) * r > params.c2;
                if l < x || (l == x) == sells {
                    failures += 1;
                }
                let shift = 1.25;
                let zs = z.with_cash(x + shift);
                let pairs = [
                    (harvest_op(z, r / 2.0, params), harvest_op(zs, r / 2.0, params)),
                    (renew_op(z, params.k_max / 2.0, params), renew_op(zs, params.k_max / 2.0, params)),
                    (mature_op(z, params.k_max, params), mature_op(zs, params.k_max, params)),
                ];
                for (a, b) in pairs {
                    match (a, b) {
                        (Ok(a), Ok(b)) if (b.x - a.x - shift).abs() <= 1e-12 && a.r == b.r => {}
                        _ => failures += 1,
                    }
                }
            }
        }
    }
    CheckLine::new("operator_identities", failures == 0, format!("failures={failures}"))
}

/// Largest decrease of `w` between neighbouring nodes along `r` and `s`
/// over every slice of the field.
pub fn max_monotonicity_violation(field: &ValueField) -> (f64, f64) {
    let grid = &field.grid;
    let nodes = grid.nodes();
    let (mut along_r, mut along_s) = (0.0_f64, 0.0_f64);
    for interval in &field.intervals {
        for layer in &interval.layers {
            for slice in layer.chunks(nodes) {
                for i_r in 0..grid.n_r {
                    for i_s in 0..grid.n_s {
                        let w = slice[grid.node(i_r, i_s)];
                        if i_r + 1 < grid.n_r {
                            along_r = along_r.max(w - slice[grid.node(i_r + 1, i_s)]);
                        }
                        if i_s + 1 < grid.n_s {
                            along_s = along_s.max(w - slice[grid.node(i_r, i_s + 1)]);
                        }
                    }
                }
            }
        }
    }
    (along_r, along_s)
}

pub fn field_monotonicity(field: &ValueField, tol: f64) -> CheckLine {
    let (r, s) = max_monotonicity_violation(field);
    CheckLine::new(
        "value_monotone_in_r_and_s",
        r <= tol && s <= tol,
        format!("max_decrease_r={r:.3e} max_decrease_s={s:.3e} tol={tol:e}"),
    )
}

/// `w ≥ H w − tol` on every interior slice, and the implicit residual of
/// continuation nodes stays below `residual_tol`.
pub fn qvi_residuals(sol: &Solution, generator: &Generator, tol: f64, residual_tol: f64) -> CheckLine {
    let field = &sol.field;
    let grid = &field.grid;
    let nodes = grid.nodes();
    let dt = field.dt();
    let mut obstacle_gap = 0.0_f64;
    let mut residual = 0.0_f64;
    for (k, interval) in field.intervals.iter().enumerate() {
        let combos = grid.combos(interval.pending_count);
        for step in 0..grid.n_t {
            for combo in 0..combos {
                let w = field.slice(k, step, combo);
                let next = field.slice(k, step + 1, combo);
                let (hw, _) = discrete_harvest_sup(w, grid, &sol.params);
                for node in 0..nodes {
                    obstacle_gap = obstacle_gap.max(hw[node] - w[node]);
                    if sol.regions.label(k, step, combo, node) == Region::Continue {
                        residual = residual.max(generator.residual(w, next[node], dt, node));
                    }
                }
            }
        }
    }
    CheckLine::new(
        "qvi_residual",
        obstacle_gap <= tol && residual <= residual_tol,
        format!("max(Hw-w)={obstacle_gap:.3e} max_continuation_residual={residual:.3e}"),
    )
}

/// Smallest `C` with `w ≤ C (1 + r⁴ + p⁴ + q⁴)` on the whole field.
pub fn fit_growth_constant(field: &ValueField) -> f64 {
    let grid = &field.grid;
    let nodes = grid.nodes();
    let mut c = 0.0_f64;
    for interval in &field.intervals {
        for layer in &interval.layers {
            for (i, w) in layer.iter().enumerate() {
                let node = i % nodes;
                let r = grid.r_at(node / grid.n_s);
                let p = grid.s_at(node % grid.n_s).exp();
                c = c.max(w / (1.0 + r.powi(4) + 2.0 * p.powi(4)));
            }
        }
    }
    c
}

pub fn growth_bound(field: &ValueField, c: f64) -> CheckLine {
    let fitted = fit_growth_constant(field);
    let min = field.min_value();
    CheckLine::new(
        "growth_bound",
        min >= -1e-9 && fitted <= c,
        format!("min_w={min:.3e} needed_C={fitted:.6} C={c}"),
    )
}

/// At the horizon no order is ever placed.
pub fn terminal_no_renewal(regions: &RegionMap) -> CheckLine {
    let last = regions.intervals.last().expect("at least one interval");
    let planting = last.plant_levels.iter().filter(|&&l| l > 0).count();
    CheckLine::new("terminal_order_is_zero", planting == 0, format!("nodes_ordering_at_T={planting}"))
}

/// On the empty-stock plane interior labels are all CONTINUE.
pub fn empty_stock_continues(regions: &RegionMap) -> CheckLine {
    let grid = &regions.grid;
    let nodes = grid.nodes();
    let mut bad = 0;
    for interval in &regions.intervals {
        for labels in &interval.labels[..grid.n_t] {
            for slice in labels.chunks(nodes) {
                bad += (0..grid.n_s).filter(|&i_s| slice[i_s] != Region::Continue).count();
            }
        }
    }
    CheckLine::new("empty_stock_continue", bad == 0, format!("non_continue_nodes={bad}"))
}

pub fn no_plant_and_harvest_nodes(regions: &RegionMap) -> CheckLine {
    let count = regions.plant_and_harvest_count();
    CheckLine::new("no_plant_and_harvest_nodes", count == 0, format!("count={count}"))
}

/// Extracted strategy from `z0`: `J ≤ v̂ + 3 SE` and relative gap within
/// `max_gap`, no admissibility violation.
/// The simulated payoff may exceed the grid value by `3 SE + slack |v|`:
/// the chain value is only a discretisation of the true one.
pub fn mc_agreement(sol: &Solution, z0: State, cfg: &SimConfig, max_gap: f64, slack: f64) -> Result<CheckLine> {
    let run = simulate(Policy::Extracted(&sol.field), z0, &[], &sol.params, cfg)?;
    let r = &run.report;
    let ceiling = r.pde_value + 3.0 * r.std_error + slack * r.pde_value.abs();
    Ok(CheckLine::new(
        "mc_vs_pde",
        r.j_mc <= ceiling && r.rel_gap <= max_gap && r.admissibility_violations == 0,
        format!(
            "J={:.6} SE={:.2e} v={:.6} rel_gap={:.4} slack={slack} violations={} plant_and_harvest={}",
            r.j_mc, r.std_error, r.pde_value, r.rel_gap, r.admissibility_violations, r.plant_and_harvest
        ),
    ))
}

pub fn dpp_first_date(sol: &Solution, z0: State, cfg: &SimConfig, budget: f64) -> Result<CheckLine> {
    let rep = dpp_check(&sol.field, z0, &[], StoppingRule::FirstRenewalDate, &sol.params, cfg, budget)?;
    Ok(CheckLine::new(
        "dpp_no_intervention",
        rep.holds,
        format!(
            "v={:.6} E[v(theta)]={:.6} SE={:.2e} budget={:.2e}",
            rep.v_hat, rep.mean, rep.std_error, rep.tol_disc
        ),
    ))
}

/// Filtered vs unfiltered runs on common random numbers.
pub fn filter_dominance(sol: &Solution, z0: State, cfg: &SimConfig) -> Result<CheckLine> {
    let on = simulate(Policy::Extracted(&sol.field), z0, &[], &sol.params, &SimConfig { filter: true, ..*cfg })?;
    let off = simulate(Policy::Extracted(&sol.field), z0, &[], &sol.params, &SimConfig { filter: false, ..*cfg })?;
    let (diff, se_paired) = paired_difference(&on, &off)?;
    let combined = (on.report.std_error.powi(2) + off.report.std_error.powi(2)).sqrt();
    Ok(CheckLine::new(
        "profitable_filter",
        on.report.j_mc >= off.report.j_mc - 3.0 * combined,
        format!(
            "J_filter={:.6} J_nofilter={:.6} combined_SE={combined:.2e} paired_diff={diff:.3e}±{se_paired:.1e} dropped={}",
            on.report.j_mc, off.report.j_mc, on.report.filtered_harvests
        ),
    ))
}

/// Exact logistic sampler vs Euler–Maruyama: means of `R_1` from
/// `r0 = 0.5` within three combined standard errors.
pub fn sampler_vs_euler(params: &ModelParams, n_paths: usize, n_sub: usize, em_steps: usize, seed: u64) -> CheckLine {
    let ends: Vec<f64> = (0..n_paths)
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let draws: Vec<f64> = (0..n_sub).map(|_| rng.sample(StandardNormal)).collect();
            logistic_advance(0.5, 1.0, &draws, params).0
        })
        .collect();
    let (exact, se_exact) = crate::policy_sim::mean_and_se(&ends);
    let (em, se_em) = oracle::euler_maruyama_mean(0.5, 1.0, em_steps, n_paths, seed ^ 0x9e37_79b9_7f4a_7c15, params);
    let combined = (se_exact * se_exact + se_em * se_em).sqrt();
    CheckLine::new(
        "sampler_vs_euler",
        (exact - em).abs() <= 3.0 * combined,
        format!("exact={exact:.6} euler={em:.6} combined_SE={combined:.2e}"),
    )
}

/// Implicit step on a small grid vs a dense Gaussian-elimination solve.
pub fn dense_step_oracle(params: &ModelParams) -> Result<CheckLine> {
    let mut worst = 0.0_f64;
    for (n_r, n_s) in [(2, 2), (5, 4), (9, 7)] {
        let grid = build_grid(
            params,
            &GridOverrides {
                n_r: Some(n_r),
                n_s: Some(n_s),
                n_e: Some(2),
                n_t: Some(4),
                ..Default::default()
            },
        )?;
        let dt = 0.1;
        let generator = Generator::for_model(params, &grid);
        let rhs: Vec<f64> = (0..grid.nodes())
            .map(|n| {
                let (i, j) = (n / grid.n_s, n % grid.n_s);
                (grid.r_at(i) * grid.s_at(j).exp() - 0.05).max(0.0) + 0.01 * j as f64
            })
            .collect();
        let opts = LinearSolverOptions {
            tol: 1e-14,
            ..Default::default()
        };
        let step = implicit_step(&rhs, dt, &generator, None, &opts, 1)?;
        let dense = oracle::dense_solve(oracle::dense_implicit_matrix(params, &grid, dt), rhs.clone())?;
        for (a, b) in step.values.iter().zip(&dense) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckLine::new(
        "implicit_step_vs_dense",
        worst <= 1e-10,
        format!("max_abs_diff={worst:.3e}"),
    ))
}

/// Grid solver vs the independent chain dynamic program at time zero.
pub fn chain_dp_oracle(sol: &Solution, tol: f64) -> Result<CheckLine> {
    let dp = oracle::chain_dp(&sol.params, &sol.field.grid, 1e-13)?;
    let worst = sol
        .field
        .slice(0, 0, 0)
        .iter()
        .zip(&dp.initial)
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
    let deterministic = sol.params.gamma == 0.0 && sol.params.sigma == 0.0;
    let name = if deterministic { "deterministic_dp_oracle" } else { "chain_dp_oracle" };
    Ok(CheckLine::new(name, worst <= tol, format!("max_abs_diff={worst:.3e} tol={tol:e}")))
}

/// Knobs of the full suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub sim: SimConfig,
    pub z0: State,
    pub mc_gap: f64,
    /// Relative allowance for `J` above the grid value.
    pub mc_slack: f64,
    pub dpp_budget: f64,
    pub growth_c: f64,
    pub sampler_paths: usize,
    pub moment_paths: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            z0: State::new(0.0, 0.5, 1.0, 1.0),
            mc_gap: 0.05,
            mc_slack: 0.0,
            dpp_budget: 0.02,
            growth_c: BASELINE_GROWTH_C,
            sampler_paths: 100_000,
            moment_paths: 10_000,
        }
    }
}

/// Deliberate defects for exercising the checks themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// One negative off-diagonal rate in the generator.
    NegativeRate,
}

/// Solves on `grid` and runs every suite. Oracle comparisons against the
/// chain dynamic program run when the model is deterministic.
pub fn run_suite(
    params: &ModelParams,
    grid: &GridSpec,
    opts: &SolverOptions,
    cfg: &SuiteConfig,
    fault: Option<Fault>,
) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    grid.validate()?;
    let pad = padding_nodes(params, grid, opts);
    let outer = grid.padded(pad);
    let mut generator = Generator::for_model(params, &outer);
    if fault == Some(Fault::NegativeRate) {
        generator.inject_negative_rate(outer.node(outer.n_r / 2, outer.n_s / 2));
    }
    report.push(generator_soundness(&generator));
    report.push(local_consistency(params, grid));
    report.push(operator_identities(params));
    report.push(sample_positivity(params, 1_000, cfg.sim.seed));
    if params.gamma > 0.0 {
        report.push(moment_bound(params, cfg.moment_paths, cfg.sim.n_sub, cfg.sim.seed));
        report.push(sampler_vs_euler(params, cfg.sampler_paths, 64, 1024, cfg.sim.seed));
    }
    report.push(dense_step_oracle(params)?);

    let full = solve_with_generator(params, &outer, &generator, opts)?;
    let residuals = qvi_residuals(&full, &generator, 1e-8, opts.tol_policy);
    let deterministic = params.gamma == 0.0 && params.sigma == 0.0;
    let dp = if deterministic { Some(chain_dp_oracle(&full, 1e-6)?) } else { None };
    let sol = full.trimmed(grid, pad);
    report.push(field_monotonicity(&sol.field, 1e-8));
    report.push(residuals);
    report.push(growth_bound(&sol.field, cfg.growth_c));
    report.push(terminal_no_renewal(&sol.regions));
    report.push(empty_stock_continues(&sol.regions));
    report.push(no_plant_and_harvest_nodes(&sol.regions));
    report.push(mc_agreement(&sol, cfg.z0, &cfg.sim, cfg.mc_gap, cfg.mc_slack)?);
    report.push(dpp_first_date(&sol, cfg.z0, &cfg.sim, cfg.dpp_budget)?);
    report.push(filter_dominance(&sol, cfg.z0, &cfg.sim)?);
    if let Some(line) = dp {
        report.push(line);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_formatting() {
        let mut r = CheckReport::default();
        r.push(CheckLine::new("a", true, "x=1"));
        r.push(CheckLine::new("b", false, "x=2"));
        assert!(!r.passed());
        assert_eq!(r.to_string(), "PASS a x=1\nFAIL b x=2\n");
        assert_eq!(r.failures().count(), 1);
    }

    #[test]
    fn soundness_detects_injected_fault() {
        let params = ModelParams::baseline();
        let grid = build_grid(&params, &GridOverrides::reduced()).unwrap();
        let mut g = Generator::for_model(&params, &grid);
        assert!(generator_soundness(&g).passed);
        g.inject_negative_rate(grid.node(3, 3));
        assert!(!generator_soundness(&g).passed);
    }

    #[test]
    fn consistency_and_identities_hold() {
        let params = ModelParams::baseline();
        let grid = build_grid(&params, &GridOverrides::reduced()).unwrap();
        assert!(local_consistency(&params, &grid).passed);
        assert!(operator_identities(&params).passed);
        assert!(sample_positivity(&params, 50, 1).passed);
    }

    #[test]
    fn dense_oracle_agrees() {
        let line = dense_step_oracle(&ModelParams::baseline()).unwrap();
        assert!(line.passed, "{line}");
    }
}
