//! Strategy extraction from a solved field, forward Monte Carlo of the
//! extracted strategy, the no-intervention dynamic programming check and
//! region statistics.
//!
//! Decisions are taken on the solver's time grid. Between two checks the
//! stock follows the closed-form logistic sampler on `n_sub` sub-steps and
//! the price takes one exact GBM step, so every solver step consumes exactly
//! `n_sub + 1` standard normals. Two runs with the same seed therefore see
//! the same noise whatever their decisions.

use std::cell::{Cell, RefCell};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::chain::{for_each_corner, interpolate, GridSpec, ValueField};
use crate::error::{Error, Result};
use crate::impulse::{harvest_op, harvest_payoff, mature_op, renew_op, PendingOrders, Schedule};
use crate::model::{gbm_step, liquidation, logistic_advance, path_rng, ModelParams, State};
use crate::solver::{harvest_candidates, harvest_sup_at, DateRule, Region, RegionMap};

/// Relative slack of the harvest trigger `w ≤ H w + tol (1 + |w|)`.
pub const TOL_TRIGGER: f64 = 1e-7;

/// Decision at one check time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Continue,
    Harvest(f64),
    /// Renewal date: order `plant` and harvest `harvest` (possibly zero).
    Date { plant: f64, harvest: f64 },
}

/// Which strategy a simulation follows.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Strategy read off a solved field.
    Extracted(&'a ValueField),
    /// Never harvest, never order (the free renewal `g0` still happens).
    NeverIntervene,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Logistic sub-steps per solver step.
    pub n_sub: usize,
    /// Skip harvests with negative net payoff.
    pub filter: bool,
    pub tol_tie: f64,
    /// Number of leading paths whose decisions are recorded.
    pub trace_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 42,
            n_sub: 32,
            filter: true,
            tol_tie: 1e-10,
            trace_paths: 0,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidParam {
                field: "n_paths",
                reason: "must be at least 1".into(),
            });
        }
        if self.n_sub == 0 {
            return Err(Error::InvalidParam {
                field: "n_sub",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Aggregate of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub n_paths: usize,
    pub seed: u64,
    pub n_sub: usize,
    pub filter: bool,
    pub j_mc: f64,
    pub std_error: f64,
    /// Field value at the start state (NaN without a field).
    pub pde_value: f64,
    pub rel_gap: f64,
    pub harvest_count_mean: f64,
    /// `harvest_count_hist[c]` paths harvested exactly `c` times.
    pub harvest_count_hist: Vec<usize>,
    pub mean_harvest_time: f64,
    pub mean_harvest_amount: f64,
    /// Mean order size per renewal date `t_1 … t_n`.
    pub renewal_means: Vec<f64>,
    pub admissibility_violations: usize,
    /// Dates at which a path both ordered and harvested.
    pub plant_and_harvest: usize,
    /// Harvests dropped by the profitability filter.
    pub filtered_harvests: usize,
    pub clamp_r: usize,
    pub clamp_s: usize,
}

impl SimReport {
    /// Column names matching [`SimReport::csv_row`].
    pub const CSV_HEADER: &'static str = "n_paths,seed,n_sub,filter,j_mc,std_error,pde_value,rel_gap,\
harvest_count_mean,harvest_count_hist,mean_harvest_time,mean_harvest_amount,renewal_means,\
admissibility_violations,plant_and_harvest,filtered_harvests,clamp_r,clamp_s";

    pub fn csv_row(&self) -> String {
        let hist = self
            .harvest_count_hist
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let renewals = self
            .renewal_means
            .iter()
            .map(|e| format!("{e:.16e}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{},{},{},{},{},{}",
            self.n_paths,
            self.seed,
            self.n_sub,
            self.filter,
            self.j_mc,
            self.std_error,
            self.pde_value,
            self.rel_gap,
            self.harvest_count_mean,
            hist,
            self.mean_harvest_time,
            self.mean_harvest_amount,
            renewals,
            self.admissibility_violations,
            self.plant_and_harvest,
            self.filtered_harvests,
            self.clamp_r,
            self.clamp_s
        )
    }
}

/// One recorded decision of a traced path.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub path: usize,
    pub time: f64,
    pub r: f64,
    pub p: f64,
    pub q: f64,
    pub action: &'static str,
    pub amount: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "path,time,r,p,q,action,amount";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
            self.path, self.time, self.r, self.p, self.q, self.action, self.amount
        )
    }
}

/// Report plus the per-path payoffs (for common-random-number comparisons)
/// and the optional decision trace.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: SimReport,
    pub payoffs: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Fails unless `field` was solved for `params`.
pub fn check_field(field: &ValueField, params: &ModelParams) -> Result<()> {
    if field.schedule != Schedule::from_params(params) {
        return Err(Error::Mismatch("renewal schedule differs from the model".into()));
    }
    if (field.grid.k_max - params.k_max).abs() > 1e-15 {
        return Err(Error::Mismatch("renewal cap differs from the model".into()));
    }
    if !params.cost_equals_price {
        return Err(Error::Mismatch("fields are solved with the cost tied to the price".into()));
    }
    if field.intervals.len() != field.schedule.n_dates {
        return Err(Error::Mismatch("field does not cover every interval".into()));
    }
    Ok(())
}

/// Harvest trigger at an interior step `(k, step)`, `step < n_t`.
pub fn interior_action(
    field: &ValueField,
    k: usize,
    step: usize,
    r: f64,
    p: f64,
    pending: &[f64],
    params: &ModelParams,
) -> Result<Action> {
    if r <= 0.0 {
        return Ok(Action::Continue);
    }
    let grid = &field.grid;
    let s = p.ln().clamp(grid.s_min, grid.s_max);
    let layer = field.layer(k, step);
    let w = interpolate(layer, grid, r, s, pending)?;
    let nodes = grid.nodes();
    let mut hw = 0.0;
    for_each_corner(grid, r, s, pending, |combo, node, weight| {
        let slice = &layer[combo * nodes..(combo + 1) * nodes];
        let (i_r, i_s) = (node / grid.n_s, node % grid.n_s);
        let margin = (grid.s_at(i_s).exp() - params.c1) * grid.h_r();
        hw += weight * harvest_sup_at(slice, grid, params, margin, i_r, i_s).0;
    });
    if w > hw + TOL_TRIGGER * (1.0 + w.abs()) {
        return Ok(Action::Continue);
    }
    let mut best = f64::NEG_INFINITY;
    let mut amount = 0.0;
    for (_, a) in harvest_candidates(r, grid) {
        let v = harvest_payoff(p, a, params) + interpolate(layer, grid, r - a, s, pending)?;
        if v > best {
            best = v;
            amount = a;
        }
    }
    Ok(if amount > 0.0 { Action::Harvest(amount) } else { Action::Continue })
}

/// Decision just before date `k + 1` (the last step of interval `k`).
/// `pending` holds the orders carried on interval `k`, oldest first.
pub fn date_action(
    field: &ValueField,
    k: usize,
    r: f64,
    p: f64,
    q: f64,
    pending: &[f64],
    params: &ModelParams,
    tol_tie: f64,
) -> Result<Action> {
    let grid = &field.grid;
    let schedule = &field.schedule;
    let date = k + 1;
    let s = p.ln().clamp(grid.s_min, grid.s_max);
    let matures = schedule.matures_at(date) && !pending.is_empty();
    let (e_old, kept) = if matures { (pending[0], &pending[1..]) } else { (0.0, pending) };
    let carries_new = date < schedule.n_dates && schedule.m_delay > 0;
    let rule = DateRule {
        params,
        grid,
        immediate: schedule.m_delay == 0,
        tol_tie,
    };
    let failure = Cell::new(None);
    let decision = if date == schedule.n_dates {
        rule.decide(r, p, q, e_old, harvest_candidates(r, grid), |r_new, _| {
            crate::model::liquidation_gain(r_new, p, params)
        })
    } else {
        let layer = field.layer(date, 0);
        let mut query = kept.to_vec();
        if carries_new {
            query.push(0.0);
        }
        let query = RefCell::new(query);
        rule.decide(r, p, q, e_old, harvest_candidates(r, grid), |r_new, level| {
            let mut query = query.borrow_mut();
            if carries_new {
                *query.last_mut().expect("slot for the new order") = grid.e_at(level);
            }
            interpolate(layer, grid, r_new, s, &query).unwrap_or_else(|e| {
                failure.set(Some(e));
                f64::NEG_INFINITY
            })
        })
    };
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(Action::Date {
        plant: grid.e_at(decision.plant_level),
        harvest: decision.harvest,
    })
}

/// Action of the extracted strategy at time `t`. Times are snapped to the
/// solver grid; a renewal date yields the date decision taken just before
/// it, the horizon yields the terminal decision.
pub fn extract_action(field: &ValueField, t: f64, state: &State, pending: &[f64], params: &ModelParams) -> Result<Action> {
    check_field(field, params)?;
    let (k, step) = field.locate_time(t);
    let expected = field.intervals[k].pending_count;
    if pending.len() != expected {
        return Err(Error::Mismatch(format!(
            "{} pending orders given, {expected} carried at t = {t}",
            pending.len()
        )));
    }
    if step == field.grid.n_t {
        date_action(field, k, state.r, state.p, state.q, pending, params, 1e-10)
    } else {
        interior_action(field, k, step, state.r, state.p, pending, params)
    }
}

#[derive(Debug, Clone, Default)]
struct PathOutcome {
    payoff: f64,
    harvests: usize,
    harvest_time_sum: f64,
    harvest_amount_sum: f64,
    renewals: Vec<f64>,
    violations: usize,
    plant_and_harvest: usize,
    filtered: usize,
    clamp_r: usize,
    clamp_s: usize,
    trace: Vec<TraceRow>,
}

struct PathSim<'a> {
    policy: Policy<'a>,
    params: &'a ModelParams,
    schedule: Schedule,
    grid: Option<&'a GridSpec>,
    n_t: usize,
    cfg: &'a SimConfig,
}

impl PathSim<'_> {
    fn log_price(&self, p: f64, out: &mut PathOutcome) {
        if let Some(g) = self.grid {
            let s = p.ln();
            if s < g.s_min || s > g.s_max {
                out.clamp_s += 1;
            }
        }
    }

    fn clamp_stock(&self, z: &mut State, out: &mut PathOutcome) {
        if let Some(g) = self.grid {
            if z.r > g.r_max {
                z.r = g.r_max;
                out.clamp_r += 1;
            }
        }
    }

    /// Applies a harvest, honouring the filter and admissibility.
    fn harvest(&self, z: &mut State, a: f64, t: f64, out: &mut PathOutcome, traced: bool, path: usize) -> bool {
        if a <= 0.0 {
            return false;
        }
        if self.cfg.filter && harvest_payoff(z.p, a, self.params) < 0.0 {
            out.filtered += 1;
            return false;
        }
        match harvest_op(*z, a, self.params) {
            Ok(next) => {
                if traced {
                    out.trace.push(trace_row(path, t, z, "harvest", a));
                }
                *z = next;
                out.harvests += 1;
                out.harvest_time_sum += t;
                out.harvest_amount_sum += a;
                true
            }
            Err(_) => {
                out.violations += 1;
                false
            }
        }
    }

    fn run(&self, path: usize, z0: State, pending0: &[f64]) -> Result<PathOutcome> {
        let params = self.params;
        let n = self.schedule.n_dates;
        let dt = self.schedule.period() / self.n_t as f64;
        let traced = path < self.cfg.trace_paths;
        let mut rng = path_rng(self.cfg.seed, path as u64);
        let mut draws = vec![0.0; self.cfg.n_sub];
        let mut out = PathOutcome {
            renewals: vec![0.0; n],
            ..Default::default()
        };
        let mut z = z0;
        let mut orders = PendingOrders::from_quantities(&self.schedule, 0, pending0)?;
        let mut skip_check = false;
        for k in 0..n {
            for step in 0..self.n_t {
                let t = self.schedule.date(k) + step as f64 * dt;
                if !skip_check {
                    if let Policy::Extracted(field) = self.policy {
                        self.log_price(z.p, &mut out);
                        let pending = orders.quantities();
                        if let Action::Harvest(a) = interior_action(field, k, step, z.r, z.p, &pending, params)? {
                            let harvested = self.harvest(&mut z, a, t, &mut out, traced, path);
                            if harvested && step == 0 && k > 0 && out.renewals[k - 1] > 0.0 {
                                out.plant_and_harvest += 1;
                            }
                        }
                    }
                }
                skip_check = false;
                for d in draws.iter_mut() {
                    *d = rng.sample(StandardNormal);
                }
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
                let (r_next, _) = logistic_advance(z.r, dt, &draws, params);
                z.r = r_next;
                let p_next = gbm_step(z.p, dt, dw, params.mu, params.sigma);
                z.q = if params.cost_equals_price {
                    p_next
                } else {
                    gbm_step(z.q, dt, dw, params.rho_cost, params.varsigma)
                };
                z.p = p_next;
                if z.r < 0.0 {
                    out.violations += 1;
                }
                self.clamp_stock(&mut z, &mut out);
            }
            let date = k + 1;
            let t = self.schedule.date(date);
            let (plant, fused) = match self.policy {
                Policy::Extracted(field) => {
                    self.log_price(z.p, &mut out);
                    let pending = orders.quantities();
                    match date_action(field, k, z.r, z.p, z.q, &pending, params, self.cfg.tol_tie)? {
                        Action::Date { plant, harvest } => (plant, harvest),
                        _ => (0.0, 0.0),
                    }
                }
                Policy::NeverIntervene => (0.0, 0.0),
            };
            let r_before = z.r;
            if let Some(matured) = orders.roll(date, plant, &self.schedule) {
                z = mature_op(z, matured.quantity, params)?;
            }
            z = renew_op(z, plant, params)?;
            out.renewals[k] = plant;
            if traced && plant > 0.0 {
                out.trace.push(trace_row(path, t, &z, "plant", plant));
            }
            // Fused harvests never exceed the stock held before the date.
            let harvested = fused > 0.0 && fused <= r_before + 1e-12 && self.harvest(&mut z, fused, t, &mut out, traced, path);
            if fused > r_before + 1e-12 {
                out.violations += 1;
            }
            if harvested && plant > 0.0 {
                out.plant_and_harvest += 1;
            }
            skip_check = harvested;
            self.clamp_stock(&mut z, &mut out);
        }
        out.payoff = liquidation(&z, params);
        if traced {
            out.trace.push(trace_row(path, self.schedule.horizon, &z, "liquidate", z.r));
        }
        Ok(out)
    }
}

fn trace_row(path: usize, time: f64, z: &State, action: &'static str, amount: f64) -> TraceRow {
    TraceRow {
        path,
        time,
        r: z.r,
        p: z.p,
        q: z.q,
        action,
        amount,
    }
}

/// Mean and standard error of the mean, summed in index order.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulates `policy` from `z0` at time zero. The field (when the policy
/// has one) must match `params`; `pending0` must be empty since nothing is
/// pending before the first date.
pub fn simulate(policy: Policy<'_>, z0: State, pending0: &[f64], params: &ModelParams, cfg: &SimConfig) -> Result<SimRun> {
    cfg.validate()?;
    if !z0.is_admissible() {
        return Err(Error::InvalidParam {
            field: "z0",
            reason: "stock and prices must be nonnegative, prices positive".into(),
        });
    }
    let schedule = Schedule::from_params(params);
    let (grid, n_t, pde_value) = match policy {
        Policy::Extracted(field) => {
            check_field(field, params)?;
            let s0 = z0.p.ln();
            if s0 < field.grid.s_min || s0 > field.grid.s_max || z0.r > field.grid.r_max {
                return Err(Error::OutOfRange {
                    what: "initial state",
                    value: if z0.r > field.grid.r_max { z0.r } else { s0 },
                    lo: field.grid.s_min,
                    hi: field.grid.s_max,
                });
            }
            let v = z0.x + field.value_at(0, 0, z0.r, s0, pending0)?;
            (Some(&field.grid), field.grid.n_t, v)
        }
        Policy::NeverIntervene => (None, crate::chain::DEFAULT_N_T, f64::NAN),
    };
    let sim = PathSim {
        policy,
        params,
        schedule,
        grid,
        n_t,
        cfg,
    };
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| sim.run(i, z0, pending0))
        .collect::<Result<_>>()?;

    let payoffs: Vec<f64> = outcomes.iter().map(|o| o.payoff).collect();
    let (j_mc, std_error) = mean_and_se(&payoffs);
    let n = cfg.n_paths as f64;
    let total_harvests: usize = outcomes.iter().map(|o| o.harvests).sum();
    let max_count = outcomes.iter().map(|o| o.harvests).max().unwrap_or(0);
    let mut hist = vec![0usize; max_count + 1];
    for o in &outcomes {
        hist[o.harvests] += 1;
    }
    let per_harvest = |f: fn(&PathOutcome) -> f64| {
        if total_harvests == 0 {
            f64::NAN
        } else {
            outcomes.iter().map(f).sum::<f64>() / total_harvests as f64
        }
    };
    let renewal_means = (0..schedule.n_dates)
        .map(|d| outcomes.iter().map(|o| o.renewals[d]).sum::<f64>() / n)
        .collect();
    let rel_gap = if pde_value.is_nan() {
        f64::NAN
    } else {
        (j_mc - pde_value).abs() / pde_value.abs().max(1e-12)
    };
    let report = SimReport {
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        n_sub: cfg.n_sub,
        filter: cfg.filter,
        j_mc,
        std_error,
        pde_value,
        rel_gap,
        harvest_count_mean: total_harvests as f64 / n,
        harvest_count_hist: hist,
        mean_harvest_time: per_harvest(|o| o.harvest_time_sum),
        mean_harvest_amount: per_harvest(|o| o.harvest_amount_sum),
        renewal_means,
        admissibility_violations: outcomes.iter().map(|o| o.violations).sum(),
        plant_and_harvest: outcomes.iter().map(|o| o.plant_and_harvest).sum(),
        filtered_harvests: outcomes.iter().map(|o| o.filtered).sum(),
        clamp_r: outcomes.iter().map(|o| o.clamp_r).sum(),
        clamp_s: outcomes.iter().map(|o| o.clamp_s).sum(),
    };
    let trace = outcomes.into_iter().flat_map(|o| o.trace).collect();
    Ok(SimRun { report, payoffs, trace })
}

/// Mean difference `a − b` of two runs on common random numbers and its
/// standard error.
pub fn paired_difference(a: &SimRun, b: &SimRun) -> Result<(f64, f64)> {
    if a.payoffs.len() != b.payoffs.len() || a.report.seed != b.report.seed {
        return Err(Error::Mismatch("paired runs need the same seed and path count".into()));
    }
    let diff: Vec<f64> = a.payoffs.iter().zip(&b.payoffs).map(|(x, y)| x - y).collect();
    Ok(mean_and_se(&diff))
}

/// When the no-intervention dynamic programming check stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoppingRule {
    /// Just before the first renewal date.
    FirstRenewalDate,
    /// A fixed time, snapped to the solver grid.
    FixedTime(f64),
    /// First check time at which the stock leaves `(lo, hi)`, or `T⁻`.
    BandExit { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppReport {
    pub v_hat: f64,
    pub mean: f64,
    pub std_error: f64,
    /// Discretisation allowance added to `3 SE`.
    pub tol_disc: f64,
    pub mean_stop_time: f64,
    pub holds: bool,
}

/// Runs the no-intervention strategy to the stopping time and compares
/// `v̂(0, z0)` with the mean field value there. The inequality is accepted
/// when `v̂ ≥ mean − 3 SE − budget · |v̂|`.
#[allow(clippy::too_many_arguments)]
pub fn dpp_check(
    field: &ValueField,
    z0: State,
    pending0: &[f64],
    rule: StoppingRule,
    params: &ModelParams,
    cfg: &SimConfig,
    budget: f64,
) -> Result<DppReport> {
    cfg.validate()?;
    check_field(field, params)?;
    let grid = &field.grid;
    let schedule = field.schedule;
    let n_t = grid.n_t;
    let last = schedule.n_dates * n_t;
    let dt = field.dt();
    let v_hat = z0.x + field.value_at(0, 0, z0.r, z0.p.ln(), pending0)?;
    // Global step index of a fixed stop, `k n_t + step`.
    let fixed_stop = match rule {
        StoppingRule::FirstRenewalDate => Some(n_t.min(last)),
        StoppingRule::FixedTime(t) => {
            let (k, step) = field.locate_time(t);
            Some(k * n_t + step)
        }
        StoppingRule::BandExit { .. } => None,
    };
    let value_at = |global: usize, z: &State, orders: &PendingOrders| -> Result<f64> {
        let (k, step) = if global > 0 && global % n_t == 0 {
            (global / n_t - 1, n_t)
        } else {
            (global / n_t, global % n_t)
        };
        let s = z.p.ln().clamp(grid.s_min, grid.s_max);
        Ok(z.x + field.value_at(k, step, z.r, s, &orders.quantities())?)
    };
    let outcomes: Vec<(f64, f64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| -> Result<(f64, f64)> {
            let mut rng = path_rng(cfg.seed, path as u64);
            let mut draws = vec![0.0; cfg.n_sub];
            let mut z = z0;
            let mut orders = PendingOrders::from_quantities(&schedule, 0, pending0)?;
            let mut global = 0;
            loop {
                let stop = match (fixed_stop, rule) {
                    (Some(g), _) => global >= g,
                    (None, StoppingRule::BandExit { lo, hi }) => global >= last || z.r <= lo || z.r >= hi,
                    _ => unreachable!("band exit is the only unscheduled rule"),
                };
                if stop {
                    return Ok((value_at(global, &z, &orders)?, global as f64 * dt));
                }
                // Crossing a date: the uncontrolled strategy orders nothing.
                if global > 0 && global % n_t == 0 {
                    let date = global / n_t;
                    if let Some(m) = orders.roll(date, 0.0, &schedule) {
                        z = mature_op(z, m.quantity, params)?;
                    }
                    z = renew_op(z, 0.0, params)?;
                    z.r = z.r.min(grid.r_max);
                }
                for d in draws.iter_mut() {
                    *d = rng.sample(StandardNormal);
                }
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
                z.r = logistic_advance(z.r, dt, &draws, params).0.min(grid.r_max);
                z.p = gbm_step(z.p, dt, dw, params.mu, params.sigma);
                z.q = z.p;
                global += 1;
            }
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let (mean, std_error) = mean_and_se(&values);
    let mean_stop_time = outcomes.iter().map(|o| o.1).sum::<f64>() / outcomes.len() as f64;
    let tol_disc = budget * v_hat.abs();
    Ok(DppReport {
        v_hat,
        mean,
        std_error,
        tol_disc,
        mean_stop_time,
        holds: v_hat >= mean - 3.0 * std_error - tol_disc,
    })
}

/// One slice of a region map: interval `k`, step and pending combination.
/// Plant labels are read from the next date decision of the same interval
/// and combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSelector {
    pub k: usize,
    pub step: usize,
    pub combo: usize,
}

impl SliceSelector {
    /// Slice nearest to time `t` for pending combination `combo`.
    pub fn at_time(regions: &RegionMap, t: f64, combo: usize) -> Self {
        let (k, step) = crate::chain::locate_time(&regions.schedule, &regions.grid, t);
        Self { k, step, combo }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMetrics {
    pub selector: SliceSelector,
    pub continue_nodes: usize,
    /// Nodes harvested at the selected step.
    pub harvest_area: usize,
    /// Nodes ordering a positive quantity at the next date.
    pub plant_area: usize,
    pub plant_and_harvest_nodes: usize,
    /// Harvest nodes whose next log-price node up does not harvest.
    pub harvest_monotonicity_violations: usize,
    /// Harvest nodes with a non-harvest neighbour along `r` or `s`.
    pub harvest_boundary_nodes: usize,
    /// Areas restricted to the lower half of the log-price axis.
    pub harvest_area_lower_s: usize,
    pub plant_area_lower_s: usize,
    /// Largest stock level with a plant label.
    pub max_plant_r: Option<f64>,
}

/// Node counts and shape statistics of one slice of a region map.
pub fn region_metrics(regions: &RegionMap, sel: SliceSelector) -> Result<RegionMetrics> {
    let grid = &regions.grid;
    let interval = regions.intervals.get(sel.k).ok_or_else(|| Error::OutOfRange {
        what: "interval",
        value: sel.k as f64,
        lo: 0.0,
        hi: regions.intervals.len().saturating_sub(1) as f64,
    })?;
    if sel.step > grid.n_t {
        return Err(Error::OutOfRange {
            what: "step",
            value: sel.step as f64,
            lo: 0.0,
            hi: grid.n_t as f64,
        });
    }
    let combos = grid.combos(interval.pending_count);
    if sel.combo >= combos {
        return Err(Error::OutOfRange {
            what: "pending combination",
            value: sel.combo as f64,
            lo: 0.0,
            hi: (combos - 1) as f64,
        });
    }
    let nodes = grid.nodes();
    let range = sel.combo * nodes..(sel.combo + 1) * nodes;
    let step_labels = &interval.labels[sel.step][range.clone()];
    let date_labels = &interval.labels[grid.n_t][range];
    let harvests = |node: usize| step_labels[node].harvests();
    let plants = |node: usize| date_labels[node].plants();

    let lower = |i_s: usize| 2 * i_s < grid.n_s - 1;
    let mut m = RegionMetrics {
        selector: sel,
        continue_nodes: 0,
        harvest_area: 0,
        plant_area: 0,
        plant_and_harvest_nodes: 0,
        harvest_monotonicity_violations: 0,
        harvest_boundary_nodes: 0,
        harvest_area_lower_s: 0,
        plant_area_lower_s: 0,
        max_plant_r: None,
    };
    for i_r in 0..grid.n_r {
        for i_s in 0..grid.n_s {
            let node = grid.node(i_r, i_s);
            let (h, p) = (harvests(node), plants(node));
            if h {
                m.harvest_area += 1;
                m.harvest_area_lower_s += usize::from(lower(i_s));
                if i_s + 1 < grid.n_s && !harvests(grid.node(i_r, i_s + 1)) {
                    m.harvest_monotonicity_violations += 1;
                }
                let neighbours = [
                    (i_r > 0).then(|| grid.node(i_r - 1, i_s)),
                    (i_r + 1 < grid.n_r).then(|| grid.node(i_r + 1, i_s)),
                    (i_s > 0).then(|| grid.node(i_r, i_s - 1)),
                    (i_s + 1 < grid.n_s).then(|| grid.node(i_r, i_s + 1)),
                ];
                if neighbours.iter().flatten().any(|&nb| !harvests(nb)) {
                    m.harvest_boundary_nodes += 1;
                }
            }
            if p {
                m.plant_area += 1;
                m.plant_area_lower_s += usize::from(lower(i_s));
                let r = grid.r_at(i_r);
                m.max_plant_r = Some(m.max_plant_r.map_or(r, |x: f64| x.max(r)));
            }
            if step_labels[node] == Region::PlantAndHarvest {
                m.plant_and_harvest_nodes += 1;
            }
            if !h && !p {
                m.continue_nodes += 1;
            }
        }
    }
    Ok(m)
}
