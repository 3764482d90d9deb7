//! Backward solver for the value function on the grid.
//!
//! The sweep runs from the horizon to time zero. At `T⁻` every node takes
//! the best of liquidating with or without one fused harvest after the last
//! maturation. Inside each renewal interval the harvest quasi-variational
//! inequality `min{−L w, w − H w} = 0` is stepped backward implicitly, each
//! step solved by policy iteration over continue/harvest. At every renewal
//! date the nonlocal jump maximises over the new order (and an optional
//! fused harvest) while the pending-order axis is rolled forward.
//!
//! All quantities are reduced values `w = v − x`: cash enters every
//! operator additively, so it never needs its own axis.

use std::time::Instant;

use rayon::prelude::*;

use crate::chain::{
    build_grid, interpolate_r, relax, Generator, GridOverrides, GridSpec, IntervalField, LinearSolverOptions,
    ValueField,
};
use crate::error::{Error, Result};
use crate::impulse::Schedule;
use crate::model::{liquidation_gain, ModelParams};

/// Policy label of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Continue = 0,
    Harvest = 1,
    Plant = 2,
    PlantAndHarvest = 3,
}

impl Region {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Continue),
            1 => Some(Self::Harvest),
            2 => Some(Self::Plant),
            3 => Some(Self::PlantAndHarvest),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Continue => "CONTINUE",
            Self::Harvest => "HARVEST",
            Self::Plant => "PLANT",
            Self::PlantAndHarvest => "PLANT_AND_HARVEST",
        }
    }

    pub fn harvests(self) -> bool {
        matches!(self, Self::Harvest | Self::PlantAndHarvest)
    }

    pub fn plants(self) -> bool {
        matches!(self, Self::Plant | Self::PlantAndHarvest)
    }
}

/// Labels and amounts for every node of a solved field. Step `n_t` of an
/// interval holds the decision taken at the following date (or at `T`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub grid: GridSpec,
    pub schedule: Schedule,
    pub intervals: Vec<IntervalRegions>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRegions {
    pub pending_count: usize,
    /// Per step, `combos × nodes` labels.
    pub labels: Vec<Vec<Region>>,
    /// Per step, harvested amount in units of `h_r`.
    pub harvest_steps: Vec<Vec<u16>>,
    /// Renewal level chosen at the closing date, `combos × nodes`.
    pub plant_levels: Vec<u8>,
}

impl RegionMap {
    pub fn label(&self, k: usize, step: usize, combo: usize, node: usize) -> Region {
        self.intervals[k].labels[step][combo * self.grid.nodes() + node]
    }

    pub fn harvest_amount(&self, k: usize, step: usize, combo: usize, node: usize) -> f64 {
        self.intervals[k].harvest_steps[step][combo * self.grid.nodes() + node] as f64 * self.grid.h_r()
    }

    pub fn plant_amount(&self, k: usize, combo: usize, node: usize) -> f64 {
        self.grid
            .e_at(self.intervals[k].plant_levels[combo * self.grid.nodes() + node] as usize)
    }

    /// Total `PLANT_AND_HARVEST` labels over the whole map.
    pub fn plant_and_harvest_count(&self) -> usize {
        self.intervals
            .iter()
            .flat_map(|i| i.labels.iter().flatten())
            .filter(|&&l| l == Region::PlantAndHarvest)
            .count()
    }
}

/// Tolerances of the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Policy iteration stops once the value moves less than this in sup norm
    /// (or the policy is stable).
    pub tol_policy: f64,
    pub max_iters: usize,
    /// Harvesting must beat continuing by more than this.
    pub tol_tie: f64,
    /// Extra log-price band solved beyond each edge, as a fraction of the
    /// half-width. The result is trimmed back to the band.
    pub s_padding: f64,
    pub linear: LinearSolverOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_policy: 1e-8,
            max_iters: 200,
            tol_tie: 1e-10,
            s_padding: 0.3,
            linear: LinearSolverOptions::default(),
        }
    }
}

/// Run diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub implicit_steps: usize,
    pub policy_iterations: usize,
    pub max_policy_iterations: usize,
    pub relaxation_sweeps: usize,
    /// Largest implicit residual over continuation nodes.
    pub max_continuation_residual: f64,
    /// Date-jump nodes whose chosen post-jump stock overshot `r_max`.
    pub clamp_count: usize,
    pub wall_time_secs: f64,
}

impl SolveStats {
    fn absorb(&mut self, other: &SolveStats) {
        self.implicit_steps += other.implicit_steps;
        self.policy_iterations += other.policy_iterations;
        self.max_policy_iterations = self.max_policy_iterations.max(other.max_policy_iterations);
        self.relaxation_sweeps += other.relaxation_sweeps;
        self.max_continuation_residual = self.max_continuation_residual.max(other.max_continuation_residual);
        self.clamp_count += other.clamp_count;
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: ModelParams,
    pub field: ValueField,
    pub regions: RegionMap,
    pub stats: SolveStats,
}

/// Harvest operator on a slice: at each node the best of
/// `(e^s − c1) a − c2 + w(r − a, s)` over grid-aligned `a ∈ [0, r]`.
/// Returns the values and the maximising amounts in units of `h_r`.
pub fn discrete_harvest_sup(slice: &[f64], grid: &GridSpec, params: &ModelParams) -> (Vec<f64>, Vec<u16>) {
    let mut values = vec![0.0; grid.nodes()];
    let mut steps = vec![0u16; grid.nodes()];
    let margins = price_margins(grid, params);
    for i_r in 0..grid.n_r {
        for i_s in 0..grid.n_s {
            let node = grid.node(i_r, i_s);
            let (v, j) = harvest_sup_at(slice, grid, params, margins[i_s], i_r, i_s);
            values[node] = v;
            steps[node] = j;
        }
    }
    (values, steps)
}

/// `(p − c1) h_r` per log-price node.
pub(crate) fn price_margins(grid: &GridSpec, params: &ModelParams) -> Vec<f64> {
    (0..grid.n_s)
        .map(|i_s| (grid.s_at(i_s).exp() - params.c1) * grid.h_r())
        .collect()
}

#[inline]
pub(crate) fn harvest_sup_at(w: &[f64], grid: &GridSpec, params: &ModelParams, margin: f64, i_r: usize, i_s: usize) -> (f64, u16) {
    let mut best = w[grid.node(i_r, i_s)] - params.c2;
    let mut best_j = 0u16;
    for j in 1..=i_r {
        let v = margin * j as f64 - params.c2 + w[grid.node(i_r - j, i_s)];
        if v > best {
            best = v;
            best_j = j as u16;
        }
    }
    (best, best_j)
}

/// Best action at a renewal date (or at the horizon).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DateDecision {
    pub value: f64,
    pub plant_level: usize,
    /// Harvest fused with the date, zero when the plain branch wins.
    pub harvest: f64,
    pub harvest_steps: u16,
    pub fused: bool,
    pub clamped: bool,
}

/// Everything a date decision needs besides the continuation value.
#[derive(Debug, Clone, Copy)]
pub struct DateRule<'a> {
    pub params: &'a ModelParams,
    pub grid: &'a GridSpec,
    /// Order placed now adds to the stock immediately (no delay).
    pub immediate: bool,
    pub tol_tie: f64,
}

impl DateRule<'_> {
    /// Maximises over the new order level and an optional fused harvest.
    /// `e_old` is the maturing quantity (zero when nothing matures),
    /// `harvests` lists `(steps, amount)` candidates with positive amount,
    /// and `post(r, level)` is the value right after the date.
    /// Ties go to the smaller order and to the branch without harvest.
    pub fn decide(
        &self,
        r: f64,
        p: f64,
        q: f64,
        e_old: f64,
        harvests: impl Iterator<Item = (u16, f64)>,
        post: impl Fn(f64, usize) -> f64,
    ) -> DateDecision {
        let params = self.params;
        let r_max = self.grid.r_max;
        let base = r + params.yield_of(e_old) + params.g0;
        let unit_cost = q + params.c3;
        let best_order = |stock: f64| -> (f64, usize, bool) {
            let mut best = f64::NEG_INFINITY;
            let mut level = 0;
            let mut clamped = false;
            for l in 0..self.grid.n_e {
                let e = self.grid.e_at(l);
                let mut r_new = stock;
                if self.immediate {
                    r_new += params.yield_of(e);
                }
                let over = r_new > r_max;
                let v = post(r_new.min(r_max), l) - unit_cost * e;
                if v > best {
                    best = v;
                    level = l;
                    clamped = over;
                }
            }
            (best, level, clamped)
        };
        let (plain, plain_level, plain_clamped) = best_order(base);
        let mut decision = DateDecision {
            value: plain,
            plant_level: plain_level,
            harvest: 0.0,
            harvest_steps: 0,
            fused: false,
            clamped: plain_clamped,
        };
        let mut best_fused = f64::NEG_INFINITY;
        for (steps, a) in harvests {
            let cash = (p - params.c1) * a - params.c2;
            let (v, level, clamped) = best_order((base - a).max(0.0));
            let v = v + cash;
            if v > best_fused {
                best_fused = v;
                if v > plain + self.tol_tie {
                    decision = DateDecision {
                        value: v,
                        plant_level: level,
                        harvest: a,
                        harvest_steps: steps,
                        fused: true,
                        clamped,
                    };
                }
            }
        }
        decision
    }
}

fn date_label(d: &DateDecision) -> Region {
    match (d.plant_level > 0, d.fused) {
        (false, false) => Region::Continue,
        (false, true) => Region::Harvest,
        (true, false) => Region::Plant,
        (true, true) => Region::PlantAndHarvest,
    }
}

/// Decisions and values of a whole layer at one date.
struct DateLayer {
    values: Vec<f64>,
    labels: Vec<Region>,
    harvest_steps: Vec<u16>,
    plant_levels: Vec<u8>,
    clamps: usize,
}

/// Pre-date layer: `pre_count` pending orders before the date, `post` maps
/// `(new combo, node-free r interpolation)` after it.
fn date_layer<F>(
    grid: &GridSpec,
    params: &ModelParams,
    schedule: &Schedule,
    date: usize,
    tol_tie: f64,
    post_value: F,
) -> DateLayer
where
    F: Fn(usize, usize, f64) -> f64 + Sync,
{
    let pre_count = schedule.pending_count(date - 1);
    let matures = schedule.matures_at(date);
    let carries_new = date < schedule.n_dates && schedule.m_delay > 0;
    let rule = DateRule {
        params,
        grid,
        immediate: schedule.m_delay == 0,
        tol_tie,
    };
    let nodes = grid.nodes();
    let combos = grid.combos(pre_count);
    let per_combo: Vec<_> = (0..combos)
        .into_par_iter()
        .map(|combo| {
            let digits = grid.decode_combo(combo, pre_count);
            let (e_old, kept) = if matures && !digits.is_empty() {
                (grid.e_at(digits[0]), &digits[1..])
            } else {
                (0.0, &digits[..])
            };
            let kept_code = grid.encode_combo(kept);
            let mut values = vec![0.0; nodes];
            let mut labels = vec![Region::Continue; nodes];
            let mut harvest_steps = vec![0u16; nodes];
            let mut plant_levels = vec![0u8; nodes];
            let mut clamps = 0;
            for i_r in 0..grid.n_r {
                let r = grid.r_at(i_r);
                for i_s in 0..grid.n_s {
                    let p = grid.s_at(i_s).exp();
                    let node = grid.node(i_r, i_s);
                    let d = rule.decide(
                        r,
                        p,
                        p,
                        e_old,
                        (1..=i_r).map(|j| (j as u16, grid.r_at(j))),
                        |r_new, level| {
                            let new_combo = if carries_new { kept_code * grid.n_e + level } else { kept_code };
                            post_value(new_combo, i_s, r_new)
                        },
                    );
                    values[node] = d.value;
                    labels[node] = date_label(&d);
                    harvest_steps[node] = d.harvest_steps;
                    plant_levels[node] = d.plant_level as u8;
                    clamps += usize::from(d.clamped);
                }
            }
            (values, labels, harvest_steps, plant_levels, clamps)
        })
        .collect();
    let mut out = DateLayer {
        values: Vec::with_capacity(combos * nodes),
        labels: Vec::with_capacity(combos * nodes),
        harvest_steps: Vec::with_capacity(combos * nodes),
        plant_levels: Vec::with_capacity(combos * nodes),
        clamps: 0,
    };
    for (v, l, h, p, c) in per_combo {
        out.values.extend(v);
        out.labels.extend(l);
        out.harvest_steps.extend(h);
        out.plant_levels.extend(p);
        out.clamps += c;
    }
    out
}

/// Reduced value at `T⁻` on every node of the last interval's layer.
pub fn terminal_slice(grid: &GridSpec, params: &ModelParams, opts: &SolverOptions) -> (Vec<f64>, Vec<Region>, Vec<u16>, Vec<u8>) {
    let schedule = Schedule::from_params(params);
    let d = terminal_layer(grid, params, &schedule, opts);
    (d.values, d.labels, d.harvest_steps, d.plant_levels)
}

fn terminal_layer(grid: &GridSpec, params: &ModelParams, schedule: &Schedule, opts: &SolverOptions) -> DateLayer {
    date_layer(grid, params, schedule, schedule.n_dates, opts.tol_tie, |_, i_s, r| {
        liquidation_gain(r, grid.s_at(i_s).exp(), params)
    })
}

/// Terminal decision at one point: `pending` lists the quantities pending
/// on the last interval, oldest first.
pub fn terminal_value(r: f64, p: f64, pending: &[f64], grid: &GridSpec, params: &ModelParams, tol_tie: f64) -> DateDecision {
    let schedule = Schedule::from_params(params);
    let e_old = if schedule.matures_at(schedule.n_dates) {
        pending.first().copied().unwrap_or(0.0)
    } else {
        0.0
    };
    let rule = DateRule {
        params,
        grid,
        immediate: schedule.m_delay == 0,
        tol_tie,
    };
    rule.decide(r, p, p, e_old, harvest_candidates(r, grid), |r_new, _| liquidation_gain(r_new, p, params))
}

/// Grid-aligned harvest amounts `h_r, 2 h_r, … ≤ r`, plus `r` itself when
/// it is off-grid.
pub fn harvest_candidates(r: f64, grid: &GridSpec) -> impl Iterator<Item = (u16, f64)> {
    let h = grid.h_r();
    let whole = ((r / h) + 1e-9).floor() as usize;
    let on_grid = (r - whole as f64 * h).abs() <= 1e-9 * h.max(1.0);
    let tail = (!on_grid && r > 0.0).then_some((whole as u16 + 1, r));
    (1..=whole)
        .map(move |j| (j as u16, (j as f64 * h).min(r)))
        .chain(tail)
}

/// Jump at date `k` (`1 ≤ k < n`) from the post-date layer (step 0 of
/// interval `k`) to the pre-date layer (step `n_t` of interval `k − 1`).
/// Returns values, labels, fused harvest steps, plant levels and the clamp
/// count.
pub fn date_jump(
    post_layer: &[f64],
    k: usize,
    grid: &GridSpec,
    params: &ModelParams,
    opts: &SolverOptions,
) -> (Vec<f64>, Vec<Region>, Vec<u16>, Vec<u8>, usize) {
    let schedule = Schedule::from_params(params);
    let d = date_jump_layer(post_layer, k, grid, params, &schedule, opts);
    (d.values, d.labels, d.harvest_steps, d.plant_levels, d.clamps)
}

fn date_jump_layer(
    post_layer: &[f64],
    k: usize,
    grid: &GridSpec,
    params: &ModelParams,
    schedule: &Schedule,
    opts: &SolverOptions,
) -> DateLayer {
    let nodes = grid.nodes();
    date_layer(grid, params, schedule, k, opts.tol_tie, |combo, i_s, r| {
        interpolate_r(&post_layer[combo * nodes..(combo + 1) * nodes], grid, i_s, r)
    })
}

/// One interval of backward implicit steps under the harvest obstacle.
#[derive(Debug, Clone)]
pub struct IntervalSolve {
    /// `n_t + 1` slices, step 0 first; the last is the given end slice.
    pub slices: Vec<Vec<f64>>,
    /// Harvest amount (in `h_r`) per step for steps `0..n_t`.
    pub policies: Vec<Vec<u16>>,
    pub stats: SolveStats,
}

/// Steps `n_t` times backward from `end_slice`, enforcing `w ≥ H w` on
/// nodes with positive stock by policy iteration.
pub fn qvi_interval_solve(
    end_slice: &[f64],
    generator: &Generator,
    grid: &GridSpec,
    params: &ModelParams,
    dt: f64,
    opts: &SolverOptions,
) -> Result<IntervalSolve> {
    let mut slices = vec![Vec::new(); grid.n_t + 1];
    let mut policies = vec![Vec::new(); grid.n_t];
    slices[grid.n_t] = end_slice.to_vec();
    let margins = price_margins(grid, params);
    let mut policy = vec![0u16; grid.nodes()];
    let mut stats = SolveStats::default();
    for step in (0..grid.n_t).rev() {
        let rhs = &slices[step + 1];
        let (w, step_stats) = qvi_step(rhs, &mut policy, generator, grid, params, &margins, dt, opts)?;
        stats.absorb(&step_stats);
        slices[step] = w;
        policies[step] = policy.clone();
    }
    Ok(IntervalSolve {
        slices,
        policies,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn qvi_step(
    rhs: &[f64],
    policy: &mut [u16],
    generator: &Generator,
    grid: &GridSpec,
    params: &ModelParams,
    margins: &[f64],
    dt: f64,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, SolveStats)> {
    let n_s = grid.n_s;
    let c2 = params.c2;
    let mut w = rhs.to_vec();
    let mut stats = SolveStats {
        implicit_steps: 1,
        ..Default::default()
    };
    let mut previous = w.clone();
    for iter in 1..=opts.max_iters {
        stats.relaxation_sweeps += relax(&mut w, rhs, dt, generator, &opts.linear, |node, w| {
            let j = policy[node] as usize;
            (j > 0).then(|| margins[node % n_s] * j as f64 - c2 + w[node - j * n_s])
        })?;
        let mut changed = false;
        for i_r in 1..grid.n_r {
            for i_s in 0..n_s {
                let node = grid.node(i_r, i_s);
                let cont = generator.continuation(&w, rhs[node], dt, node);
                let (h, j) = harvest_sup_at(&w, grid, params, margins[i_s], i_r, i_s);
                let current = policy[node] as usize;
                let next = if h > cont + opts.tol_tie {
                    // Keep the current amount when it is as good as the best.
                    let kept = current > 0 && margins[i_s] * current as f64 - c2 + w[node - current * n_s] >= h - opts.tol_tie;
                    if kept {
                        current as u16
                    } else {
                        j
                    }
                } else {
                    0
                };
                if next as usize != current {
                    policy[node] = next;
                    changed = true;
                }
            }
        }
        let moved = w
            .iter()
            .zip(&previous)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        stats.policy_iterations = iter;
        if !changed || (iter > 1 && moved < opts.tol_policy) {
            if changed {
                // Values have settled; make the stored policy consistent.
                relax(&mut w, rhs, dt, generator, &opts.linear, |node, w| {
                    let j = policy[node] as usize;
                    (j > 0).then(|| margins[node % n_s] * j as f64 - c2 + w[node - j * n_s])
                })?;
            }
            stats.max_policy_iterations = iter;
            stats.max_continuation_residual = (0..w.len())
                .filter(|&n| policy[n] == 0)
                .map(|n| generator.residual(&w, rhs[n], dt, n))
                .fold(0.0, f64::max);
            return Ok((w, stats));
        }
        previous.copy_from_slice(&w);
    }
    Err(Error::NoConvergence {
        stage: "harvest policy iteration",
        iters: opts.max_iters,
        residual: f64::NAN,
    })
}

/// Full backward sweep on the grid built from `params` and `overrides`.
pub fn solve(params: &ModelParams, overrides: &GridOverrides, opts: &SolverOptions) -> Result<Solution> {
    params.validate_allowing_degenerate()?;
    let grid = build_grid(params, overrides)?;
    solve_on_grid(params, &grid, opts)
}

/// Solves on `grid` widened by the padding in `opts` and returns the
/// solution restricted to `grid`.
pub fn solve_on_grid(params: &ModelParams, grid: &GridSpec, opts: &SolverOptions) -> Result<Solution> {
    grid.validate()?;
    let pad = padding_nodes(params, grid, opts);
    let outer = grid.padded(pad);
    let solved = solve_with_generator(params, &outer, &Generator::for_model(params, &outer), opts)?;
    Ok(solved.trimmed(grid, pad))
}

/// Nodes added on each side of the log-price band: the padding fraction of
/// the half-width, and never less than the log-price drift over the
/// horizon.
pub fn padding_nodes(params: &ModelParams, grid: &GridSpec, opts: &SolverOptions) -> usize {
    if opts.s_padding <= 0.0 {
        return 0;
    }
    let drift = (params.mu - 0.5 * params.sigma * params.sigma).abs() * params.horizon;
    let width = (opts.s_padding * 0.5 * (grid.s_max - grid.s_min)).max(drift);
    (width / grid.h_s() - 1e-9).ceil() as usize
}

/// Same as [`solve_on_grid`] with an explicit generator.
pub fn solve_with_generator(
    params: &ModelParams,
    grid: &GridSpec,
    generator: &Generator,
    opts: &SolverOptions,
) -> Result<Solution> {
    if !params.cost_equals_price {
        return Err(Error::Unsupported(
            "the grid solver ties the renewal cost to the price; decoupled costs are simulation-only".into(),
        ));
    }
    grid.validate()?;
    let started = Instant::now();
    let schedule = Schedule::from_params(params);
    let n = schedule.n_dates;
    let nodes = grid.nodes();
    let dt = schedule.period() / grid.n_t as f64;
    let mut stats = SolveStats::default();

    let mut fields: Vec<Option<IntervalField>> = vec![None; n];
    let mut regions: Vec<Option<IntervalRegions>> = vec![None; n];
    let mut end = terminal_layer(grid, params, &schedule, opts);

    for k in (0..n).rev() {
        let pending_count = schedule.pending_count(k);
        let combos = grid.combos(pending_count);
        debug_assert_eq!(end.values.len(), combos * nodes);
        stats.clamp_count += end.clamps;

        let per_combo: Vec<Result<IntervalSolve>> = (0..combos)
            .into_par_iter()
            .map(|c| {
                let end_slice = &end.values[c * nodes..(c + 1) * nodes];
                qvi_interval_solve(end_slice, generator, grid, params, dt, opts)
            })
            .collect();

        let mut layers = vec![Vec::with_capacity(combos * nodes); grid.n_t + 1];
        let mut labels = vec![Vec::with_capacity(combos * nodes); grid.n_t + 1];
        let mut harvest_steps = vec![Vec::with_capacity(combos * nodes); grid.n_t + 1];
        for solved in per_combo {
            let solved = solved?;
            stats.absorb(&solved.stats);
            for (step, slice) in solved.slices.into_iter().enumerate() {
                layers[step].extend(slice);
            }
            for (step, policy) in solved.policies.into_iter().enumerate() {
                labels[step].extend(policy.iter().map(|&j| if j > 0 { Region::Harvest } else { Region::Continue }));
                harvest_steps[step].extend(policy);
            }
        }
        labels[grid.n_t] = std::mem::take(&mut end.labels);
        harvest_steps[grid.n_t] = std::mem::take(&mut end.harvest_steps);
        let plant_levels = std::mem::take(&mut end.plant_levels);

        if k > 0 {
            end = date_jump_layer(&layers[0], k, grid, params, &schedule, opts);
        }
        fields[k] = Some(IntervalField { pending_count, layers });
        regions[k] = Some(IntervalRegions {
            pending_count,
            labels,
            harvest_steps,
            plant_levels,
        });
    }
    stats.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(Solution {
        params: params.clone(),
        field: ValueField {
            grid: *grid,
            schedule,
            intervals: fields.into_iter().map(|f| f.expect("every interval solved")).collect(),
        },
        regions: RegionMap {
            grid: *grid,
            schedule,
            intervals: regions.into_iter().map(|r| r.expect("every interval solved")).collect(),
        },
        stats,
    })
}

impl Solution {
    /// Restricts a solution computed on `grid.padded(pad)` to `grid`.
    pub fn trimmed(self, grid: &GridSpec, pad: usize) -> Solution {
        if pad == 0 {
            return self;
        }
        let cut = |v: Vec<f64>| grid.trim(&v, pad);
        Solution {
            params: self.params,
            field: ValueField {
                grid: *grid,
                schedule: self.field.schedule,
                intervals: self
                    .field
                    .intervals
                    .into_iter()
                    .map(|f| IntervalField {
                        pending_count: f.pending_count,
                        layers: f.layers.into_iter().map(cut).collect(),
                    })
                    .collect(),
            },
            regions: RegionMap {
                grid: *grid,
                schedule: self.regions.schedule,
                intervals: self
                    .regions
                    .intervals
                    .into_iter()
                    .map(|r| IntervalRegions {
                        pending_count: r.pending_count,
                        labels: r.labels.iter().map(|l| grid.trim(l, pad)).collect(),
                        harvest_steps: r.harvest_steps.iter().map(|h| grid.trim(h, pad)).collect(),
                        plant_levels: grid.trim(&r.plant_levels, pad),
                    })
                    .collect(),
            },
            stats: self.stats,
        }
    }

    /// Reduced value at time zero, interpolated.
    pub fn value_at_origin(&self, r: f64, p: f64, pending: &[f64]) -> Result<f64> {
        self.field.value_at(0, 0, r, p.ln(), pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(params: &ModelParams) -> GridSpec {
        build_grid(
            params,
            &GridOverrides {
                n_r: Some(21),
                n_s: Some(11),
                n_e: Some(4),
                n_t: Some(5),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn harvest_sup_at_empty_stock_never_binds() {
        let p = ModelParams::baseline();
        let g = small(&p);
        let w: Vec<f64> = (0..g.nodes()).map(|n| 0.01 * n as f64).collect();
        let (h, steps) = discrete_harvest_sup(&w, &g, &p);
        for i_s in 0..g.n_s {
            let node = g.node(0, i_s);
            assert_relative_eq!(h[node], w[node] - p.c2);
            assert_eq!(steps[node], 0);
        }
    }

    #[test]
    fn harvest_sup_of_zero_sells_everything_at_unit_price() {
        let p = ModelParams::baseline();
        let g = build_grid(
            &p,
            &GridOverrides {
                n_r: Some(11),
                s_min: Some(-0.5),
                s_max: Some(0.5),
                n_s: Some(11),
                ..Default::default()
            },
        )
        .unwrap();
        let w = vec![0.0; g.nodes()];
        let (h, steps) = discrete_harvest_sup(&w, &g, &p);
        let node = g.node(5, 5);
        assert_relative_eq!(g.s_at(5), 0.0, epsilon = 1e-15);
        assert_relative_eq!(h[node], 0.44, epsilon = 1e-12);
        assert_eq!(steps[node], 5);
    }

    #[test]
    fn harvest_below_proportional_cost_never_pays() {
        let p = ModelParams::baseline();
        let g = build_grid(
            &p,
            &GridOverrides {
                n_r: Some(11),
                s_min: Some(p.c1.ln()),
                s_max: Some(0.5),
                n_s: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        let w: Vec<f64> = (0..g.nodes()).map(|n| g.r_at(n / g.n_s)).collect();
        let (h, _) = discrete_harvest_sup(&w, &g, &p);
        for i_r in 0..g.n_r {
            let node = g.node(i_r, 0);
            assert!(h[node] < w[node]);
        }
    }

    #[test]
    fn terminal_point_example() {
        let p = ModelParams::baseline();
        let g = build_grid(&p, &GridOverrides { n_e: Some(4), ..Default::default() }).unwrap();
        let d = terminal_value(0.5, 1.0, &[0.1], &g, &p, 1e-10);
        assert_relative_eq!(d.value, 0.9 * 0.63 - 0.01, epsilon = 1e-12);
        assert_eq!(d.plant_level, 0);
        assert!(!d.fused);
    }

    #[test]
    fn terminal_with_nothing_to_sell() {
        let p = ModelParams { g0: 0.0, ..ModelParams::baseline() };
        let g = small(&p);
        let d = terminal_value(0.0, 1.7, &[0.0], &g, &p, 1e-10);
        assert_eq!(d.value, 0.0);
        let big = terminal_value(0.0, 50.0, &[0.2], &g, &ModelParams::baseline(), 1e-10);
        assert_relative_eq!(big.value, (50.0 - 0.1) * 0.23 - 0.01, epsilon = 1e-12);
        assert_eq!(big.plant_level, 0);
    }

    #[test]
    fn date_jump_on_zero_never_plants() {
        let p = ModelParams::baseline();
        let g = small(&p);
        let post = vec![0.0; g.nodes() * g.n_e];
        let (values, labels, _, plant, _) = date_jump(&post, 2, &g, &p, &SolverOptions::default());
        assert_eq!(values.len(), g.nodes() * g.n_e);
        assert!(plant.iter().all(|&l| l == 0));
        // Fused harvest may still pay where the price covers the costs.
        for (v, l) in values.iter().zip(&labels) {
            assert!(*v >= 0.0);
            assert!(!l.plants());
        }
        let zero_harvest = values
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == Region::Continue)
            .all(|(v, _)| *v == 0.0);
        assert!(zero_harvest);
    }

    #[test]
    fn date_jump_matures_pending_order() {
        // Post value equal to the stock: pre value picks up g(e_old) + g0.
        let p = ModelParams::baseline();
        let g = small(&p);
        let post: Vec<f64> = (0..g.nodes() * g.n_e).map(|i| g.r_at((i % g.nodes()) / g.n_s)).collect();
        let (values, _, _, _, _) = date_jump(&post, 2, &g, &p, &SolverOptions::default());
        let level = 2;
        let node = g.node(8, 3);
        let expected = g.r_at(8) + g.e_at(level) + p.g0;
        let got = values[level * g.nodes() + node];
        assert!(got >= expected - 1e-12, "{got} < {expected}");
    }

    #[test]
    fn candidates_cover_off_grid_stock() {
        let g = small(&ModelParams::baseline());
        let h = g.h_r();
        let c: Vec<_> = harvest_candidates(2.5 * h, &g).collect();
        assert_eq!(c.len(), 3);
        assert_relative_eq!(c[2].1, 2.5 * h);
        let c: Vec<_> = harvest_candidates(2.0 * h, &g).collect();
        assert_eq!(c.len(), 2);
        assert_eq!(harvest_candidates(0.0, &g).count(), 0);
    }

    #[test]
    fn decoupled_cost_is_simulation_only() {
        let p = ModelParams {
            cost_equals_price: false,
            ..ModelParams::baseline()
        };
        let err = solve(&p, &GridOverrides::reduced(), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn padded_solve_is_restricted_to_the_band() {
        let p = ModelParams::baseline();
        let g = small(&p);
        let opts = SolverOptions::default();
        let pad = padding_nodes(&p, &g, &opts);
        assert!(pad > 0);
        let sol = solve_on_grid(&p, &g, &opts).unwrap();
        assert_eq!(sol.field.grid, g);
        assert_eq!(sol.regions.intervals[0].labels[0].len(), g.nodes());
        let outer = g.padded(pad);
        let full = solve_with_generator(&p, &outer, &Generator::for_model(&p, &outer), &opts).unwrap();
        assert_eq!(sol.field.slice(0, 0, 0), &g.trim(full.field.slice(0, 0, 0), pad)[..]);

        let bare = SolverOptions { s_padding: 0.0, ..opts };
        assert_eq!(padding_nodes(&p, &g, &bare), 0);
        let unpadded = solve_on_grid(&p, &g, &bare).unwrap();
        let direct = solve_with_generator(&p, &g, &Generator::for_model(&p, &g), &bare).unwrap();
        assert_eq!(unpadded.field.slice(0, 0, 0), direct.field.slice(0, 0, 0));
    }

    #[test]
    fn padding_covers_the_drift_reach() {
        let mut p = ModelParams::baseline();
        p.sigma = 0.0;
        let g = small(&p);
        let pad = padding_nodes(&p, &g, &SolverOptions::default());
        assert!(pad as f64 * g.h_s() >= p.mu * p.horizon - 1e-12);
    }
}
