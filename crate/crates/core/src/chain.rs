//! State-space grid, Markov-chain generator and implicit time stepping.
//!
//! The uncontrolled diffusion is written in `(r, s = log p)`. The resource
//! axis carries the logistic drift `η r (λ − r)` and variance `γ² r²`; the
//! log-price axis has constant drift `μ − σ²/2` and variance `σ²`. Drifts
//! are upwinded and diffusions centred, so every off-diagonal rate is
//! nonnegative and every row of the generator sums to zero. Transitions
//! that would leave the grid are dropped (reflecting boundary).
//!
//! Nodes are stored row-major: `node = i_r * n_s + i_s`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::impulse::Schedule;
use crate::model::ModelParams;

/// Discretisation of `[0, r_max] × [s_min, s_max] × [0, K]^pending × time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub r_max: f64,
    pub n_r: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    /// Levels of a pending-order quantity on `[0, K]`.
    pub n_e: usize,
    /// Implicit steps per renewal interval.
    pub n_t: usize,
    pub k_max: f64,
}

/// Optional replacements for the default grid.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GridOverrides {
    pub r_max: Option<f64>,
    pub n_r: Option<usize>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub n_s: Option<usize>,
    pub n_e: Option<usize>,
    pub n_t: Option<usize>,
}

impl GridOverrides {
    /// The reduced grid used by the quick check suite: 51 × 35 nodes and
    /// 20 steps per interval.
    pub fn reduced() -> Self {
        Self {
            n_r: Some(51),
            n_s: Some(35),
            n_t: Some(20),
            ..Self::default()
        }
    }
}

pub const DEFAULT_N_R: usize = 151;
pub const DEFAULT_N_S: usize = 101;
pub const DEFAULT_N_E: usize = 11;
pub const DEFAULT_N_T: usize = 50;

/// Builds the grid. The log-price band is
/// `±(|μ − σ²/2| T + 3 σ √T)` unless overridden.
pub fn build_grid(params: &ModelParams, overrides: &GridOverrides) -> Result<GridSpec> {
    let drift = params.mu - 0.5 * params.sigma * params.sigma;
    let half_width = drift.abs() * params.horizon + 3.0 * params.sigma * params.horizon.sqrt();
    let spec = GridSpec {
        r_max: overrides.r_max.unwrap_or(1.0),
        n_r: overrides.n_r.unwrap_or(DEFAULT_N_R),
        s_min: overrides.s_min.unwrap_or(-half_width),
        s_max: overrides.s_max.unwrap_or(half_width),
        n_s: overrides.n_s.unwrap_or(DEFAULT_N_S),
        n_e: overrides.n_e.unwrap_or(DEFAULT_N_E),
        n_t: overrides.n_t.unwrap_or(DEFAULT_N_T),
        k_max: params.k_max,
    };
    spec.validate()?;
    Ok(spec)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (axis, n) in [("r", self.n_r), ("s", self.n_s), ("e", self.n_e)] {
            if n < 2 {
                return Err(Error::DegenerateAxis {
                    axis,
                    reason: format!("{n} points, need at least 2"),
                });
            }
        }
        if self.n_t == 0 {
            return Err(Error::DegenerateAxis {
                axis: "t",
                reason: "need at least one step per interval".into(),
            });
        }
        if !(self.r_max > 0.0) {
            return Err(Error::DegenerateAxis {
                axis: "r",
                reason: format!("r_max = {}", self.r_max),
            });
        }
        if !(self.s_max - self.s_min > 1e-12) {
            return Err(Error::DegenerateAxis {
                axis: "s",
                reason: format!("[{}, {}] has no width", self.s_min, self.s_max),
            });
        }
        if self.n_r > u16::MAX as usize || self.n_e > u8::MAX as usize {
            return Err(Error::DegenerateAxis {
                axis: "r",
                reason: "axis too long for compact policy storage".into(),
            });
        }
        Ok(())
    }

    /// The same grid with `pad` extra log-price nodes beyond each edge.
    pub fn padded(&self, pad: usize) -> GridSpec {
        let h = self.h_s();
        GridSpec {
            s_min: self.s_min - pad as f64 * h,
            s_max: self.s_max + pad as f64 * h,
            n_s: self.n_s + 2 * pad,
            ..*self
        }
    }

    /// Restricts node-major data laid out on `self.padded(pad)` back to
    /// `self`. Any number of consecutive `r` rows may be passed.
    pub fn trim<T: Copy>(&self, padded: &[T], pad: usize) -> Vec<T> {
        let outer = self.n_s + 2 * pad;
        debug_assert_eq!(padded.len() % outer, 0);
        let mut out = Vec::with_capacity(padded.len() / outer * self.n_s);
        for row in padded.chunks(outer) {
            out.extend_from_slice(&row[pad..pad + self.n_s]);
        }
        out
    }

    #[inline]
    pub fn h_r(&self) -> f64 {
        self.r_max / (self.n_r - 1) as f64
    }

    #[inline]
    pub fn h_s(&self) -> f64 {
        (self.s_max - self.s_min) / (self.n_s - 1) as f64
    }

    #[inline]
    pub fn r_at(&self, i_r: usize) -> f64 {
        if i_r + 1 == self.n_r {
            self.r_max
        } else {
            i_r as f64 * self.h_r()
        }
    }

    #[inline]
    pub fn s_at(&self, i_s: usize) -> f64 {
        if i_s + 1 == self.n_s {
            self.s_max
        } else {
            self.s_min + i_s as f64 * self.h_s()
        }
    }

    #[inline]
    pub fn e_at(&self, level: usize) -> f64 {
        self.k_max * level as f64 / (self.n_e - 1) as f64
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.n_r * self.n_s
    }

    #[inline]
    pub fn node(&self, i_r: usize, i_s: usize) -> usize {
        i_r * self.n_s + i_s
    }

    /// Number of pending-order combinations for `count` pending orders.
    pub fn combos(&self, count: usize) -> usize {
        self.n_e.pow(count as u32)
    }

    /// Flat index of pending levels listed oldest first.
    pub fn encode_combo(&self, levels: &[usize]) -> usize {
        levels.iter().fold(0, |acc, &l| acc * self.n_e + l)
    }

    /// Inverse of [`encode_combo`](Self::encode_combo).
    pub fn decode_combo(&self, mut combo: usize, count: usize) -> Vec<usize> {
        let mut levels = vec![0; count];
        for slot in levels.iter_mut().rev() {
            *slot = combo % self.n_e;
            combo /= self.n_e;
        }
        levels
    }
}

/// Coefficients of the uncontrolled diffusion in `(r, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub eta: f64,
    pub lambda_cap: f64,
    pub gamma: f64,
    pub s_drift: f64,
    pub s_var: f64,
}

impl Dynamics {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            eta: params.eta,
            lambda_cap: params.lambda_cap,
            gamma: params.gamma,
            s_drift: params.mu - 0.5 * params.sigma * params.sigma,
            s_var: params.sigma * params.sigma,
        }
    }

    #[inline]
    pub fn r_drift(&self, r: f64) -> f64 {
        self.eta * r * (self.lambda_cap - r)
    }

    #[inline]
    pub fn r_var(&self, r: f64) -> f64 {
        self.gamma * self.gamma * r * r
    }
}

/// Jump intensities of one node towards its four neighbours.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Rates {
    pub r_down: f64,
    pub r_up: f64,
    pub s_down: f64,
    pub s_up: f64,
}

impl Rates {
    #[inline]
    pub fn total(&self) -> f64 {
        self.r_down + self.r_up + self.s_down + self.s_up
    }
}

/// One row of the generator matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRow {
    pub node: usize,
    /// `(neighbour node, rate)`, rates per unit time.
    pub off_diagonal: Vec<(usize, f64)>,
    pub diagonal: f64,
}

impl GeneratorRow {
    pub fn row_sum(&self) -> f64 {
        self.diagonal + self.off_diagonal.iter().map(|(_, q)| q).sum::<f64>()
    }

    pub fn is_monotone(&self) -> bool {
        self.off_diagonal.iter().all(|&(_, q)| q >= 0.0)
    }
}

/// Upwind rates at `(i_r, i_s)`.
pub fn stencil_rates(dynamics: &Dynamics, grid: &GridSpec, i_r: usize, i_s: usize) -> Rates {
    let r = grid.r_at(i_r);
    let (h_r, h_s) = (grid.h_r(), grid.h_s());
    let b_r = dynamics.r_drift(r);
    let d_r = 0.5 * dynamics.r_var(r) / (h_r * h_r);
    let d_s = 0.5 * dynamics.s_var / (h_s * h_s);
    let b_s = dynamics.s_drift;
    let mut rates = Rates {
        r_down: d_r + (-b_r).max(0.0) / h_r,
        r_up: d_r + b_r.max(0.0) / h_r,
        s_down: d_s + (-b_s).max(0.0) / h_s,
        s_up: d_s + b_s.max(0.0) / h_s,
    };
    if i_r == 0 {
        rates.r_down = 0.0;
    }
    if i_r + 1 == grid.n_r {
        rates.r_up = 0.0;
    }
    if i_s == 0 {
        rates.s_down = 0.0;
    }
    if i_s + 1 == grid.n_s {
        rates.s_up = 0.0;
    }
    rates
}

/// Generator row of the model diffusion at a node.
pub fn generator_stencil(node: (usize, usize), params: &ModelParams, grid: &GridSpec) -> GeneratorRow {
    let dynamics = Dynamics::from_params(params);
    row_from_rates(grid, node.0, node.1, stencil_rates(&dynamics, grid, node.0, node.1))
}

fn row_from_rates(grid: &GridSpec, i_r: usize, i_s: usize, q: Rates) -> GeneratorRow {
    let node = grid.node(i_r, i_s);
    let candidates = [
        (i_r > 0, node.wrapping_sub(grid.n_s), q.r_down),
        (i_r + 1 < grid.n_r, node + grid.n_s, q.r_up),
        (i_s > 0, node.wrapping_sub(1), q.s_down),
        (i_s + 1 < grid.n_s, node + 1, q.s_up),
    ];
    let off_diagonal = candidates
        .into_iter()
        .filter(|&(inside, _, rate)| inside && rate != 0.0)
        .map(|(_, n, rate)| (n, rate))
        .collect();
    GeneratorRow {
        node,
        off_diagonal,
        diagonal: -q.total(),
    }
}

/// Time-homogeneous generator over one `(r, s)` slice.
#[derive(Debug, Clone)]
pub struct Generator {
    grid: GridSpec,
    rates: Vec<Rates>,
}

impl Generator {
    pub fn new(dynamics: &Dynamics, grid: &GridSpec) -> Self {
        let mut rates = Vec::with_capacity(grid.nodes());
        for i_r in 0..grid.n_r {
            for i_s in 0..grid.n_s {
                rates.push(stencil_rates(dynamics, grid, i_r, i_s));
            }
        }
        Self { grid: *grid, rates }
    }

    pub fn for_model(params: &ModelParams, grid: &GridSpec) -> Self {
        Self::new(&Dynamics::from_params(params), grid)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn rates(&self, node: usize) -> Rates {
        self.rates[node]
    }

    pub fn row(&self, node: usize) -> GeneratorRow {
        let (i_r, i_s) = (node / self.grid.n_s, node % self.grid.n_s);
        row_from_rates(&self.grid, i_r, i_s, self.rates[node])
    }

    pub fn rows(&self) -> impl Iterator<Item = GeneratorRow> + '_ {
        (0..self.rates.len()).map(|n| self.row(n))
    }

    /// Overwrites one rate with a negative value. Only used to verify that
    /// the monotonicity checks catch a broken scheme.
    pub fn inject_negative_rate(&mut self, node: usize) {
        self.rates[node].s_up = -1.0;
    }

    /// `(A w)_node`.
    #[inline]
    pub fn apply(&self, w: &[f64], node: usize) -> f64 {
        let q = &self.rates[node];
        let n_s = self.grid.n_s;
        let mut acc = 0.0;
        if q.r_down != 0.0 {
            acc += q.r_down * (w[node - n_s] - w[node]);
        }
        if q.r_up != 0.0 {
            acc += q.r_up * (w[node + n_s] - w[node]);
        }
        if q.s_down != 0.0 {
            acc += q.s_down * (w[node - 1] - w[node]);
        }
        if q.s_up != 0.0 {
            acc += q.s_up * (w[node + 1] - w[node]);
        }
        acc
    }

    /// Value of the continuation row at `node` given the current iterate:
    /// the solution of `(1 + dt Σq) w_i − dt Σ q_j w_j = rhs_i` for `w_i`.
    #[inline]
    pub fn continuation(&self, w: &[f64], rhs: f64, dt: f64, node: usize) -> f64 {
        let q = &self.rates[node];
        let n_s = self.grid.n_s;
        let mut num = rhs;
        let mut den = 1.0;
        if q.r_down != 0.0 {
            num += dt * q.r_down * w[node - n_s];
            den += dt * q.r_down;
        }
        if q.r_up != 0.0 {
            num += dt * q.r_up * w[node + n_s];
            den += dt * q.r_up;
        }
        if q.s_down != 0.0 {
            num += dt * q.s_down * w[node - 1];
            den += dt * q.s_down;
        }
        if q.s_up != 0.0 {
            num += dt * q.s_up * w[node + 1];
            den += dt * q.s_up;
        }
        num / den
    }

    /// Residual `|(I − dt A) w − rhs|` at one node.
    #[inline]
    pub fn residual(&self, w: &[f64], rhs: f64, dt: f64, node: usize) -> f64 {
        (w[node] - dt * self.apply(w, node) - rhs).abs()
    }
}

/// Convergence controls of the relaxation solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolverOptions {
    /// Stop once a sweep changes no value by more than this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Over-relaxation factor applied to continuation rows.
    pub omega: f64,
}

impl Default for LinearSolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_sweeps: 20_000,
            omega: 1.2,
        }
    }
}

/// Gauss–Seidel / SOR on `(I − dt A) w = rhs`, sweeping nodes in storage
/// order. `fixed(node, w)` may pin a row to a value instead (obstacle or
/// harvest rows); pinned rows may only reference lower-indexed nodes.
/// Returns the sweep count.
pub fn relax<F>(
    w: &mut [f64],
    rhs: &[f64],
    dt: f64,
    generator: &Generator,
    opts: &LinearSolverOptions,
    mut fixed: F,
) -> Result<usize>
where
    F: FnMut(usize, &[f64]) -> Option<f64>,
{
    let mut change = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        change = 0.0;
        for node in 0..w.len() {
            let next = match fixed(node, w) {
                Some(v) => v,
                None => {
                    let gs = generator.continuation(w, rhs[node], dt, node);
                    w[node] + opts.omega * (gs - w[node])
                }
            };
            change = f64::max(change, (next - w[node]).abs());
            w[node] = next;
        }
        if change <= opts.tol {
            return Ok(sweep);
        }
    }
    Err(Error::NoConvergence {
        stage: "implicit linear solve",
        iters: opts.max_sweeps,
        residual: change,
    })
}

/// Outcome of [`implicit_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub values: Vec<f64>,
    pub sweeps: usize,
    pub policy_iterations: usize,
    /// Nodes where the obstacle binds.
    pub contact: Vec<bool>,
}

/// One backward implicit step `(I − dt A) w_new = w_old`. With an obstacle
/// `ψ`, solves `min{(I − dt A) w − w_old, w − ψ} = 0` by policy iteration
/// over the continue/stop decision.
pub fn implicit_step(
    slice: &[f64],
    dt: f64,
    generator: &Generator,
    obstacle: Option<&[f64]>,
    opts: &LinearSolverOptions,
    max_policy_iters: usize,
) -> Result<StepOutcome> {
    let mut w = slice.to_vec();
    let Some(psi) = obstacle else {
        let sweeps = relax(&mut w, slice, dt, generator, opts, |_, _| None)?;
        return Ok(StepOutcome {
            values: w,
            sweeps,
            policy_iterations: 0,
            contact: vec![false; slice.len()],
        });
    };
    let mut contact: Vec<bool> = psi.iter().zip(slice).map(|(p, s)| p > s).collect();
    let mut sweeps = 0;
    for iter in 1..=max_policy_iters {
        sweeps += relax(&mut w, slice, dt, generator, opts, |node, _| {
            contact[node].then(|| psi[node])
        })?;
        let mut changed = false;
        for node in 0..w.len() {
            let cont = generator.continuation(&w, slice[node], dt, node);
            let stop = psi[node] > cont;
            if stop != contact[node] {
                contact[node] = stop;
                changed = true;
            }
        }
        if !changed {
            return Ok(StepOutcome {
                values: w,
                sweeps,
                policy_iterations: iter,
                contact,
            });
        }
    }
    Err(Error::NoConvergence {
        stage: "obstacle policy iteration",
        iters: max_policy_iters,
        residual: f64::NAN,
    })
}

#[inline]
fn locate(x: f64, x0: f64, h: f64, n: usize) -> (usize, f64) {
    let u = ((x - x0) / h).max(0.0);
    let i = (u.floor() as usize).min(n - 2);
    (i, (u - i as f64).clamp(0.0, 1.0))
}

/// Linear interpolation along `r` of one slice at a fixed log-price node.
/// `r` above `r_max` is clamped.
#[inline]
pub fn interpolate_r(slice: &[f64], grid: &GridSpec, i_s: usize, r: f64) -> f64 {
    let r = r.min(grid.r_max);
    let (i, f) = locate(r, 0.0, grid.h_r(), grid.n_r);
    let lo = slice[grid.node(i, i_s)];
    if f == 0.0 {
        return lo;
    }
    let hi = slice[grid.node(i + 1, i_s)];
    lo + f * (hi - lo)
}

/// Bilinear interpolation of one slice in `(r, s)`.
pub fn interpolate_rs(slice: &[f64], grid: &GridSpec, r: f64, s: f64) -> f64 {
    let (ir, fr) = locate(r.min(grid.r_max), 0.0, grid.h_r(), grid.n_r);
    let (is, fs) = locate(s.min(grid.s_max), grid.s_min, grid.h_s(), grid.n_s);
    let v = |a: usize, b: usize| slice[grid.node(ir + a, is + b)];
    let lo = v(0, 0) + fs * (v(0, 1) - v(0, 0));
    let hi = v(1, 0) + fs * (v(1, 1) - v(1, 0));
    lo + fr * (hi - lo)
}

/// Multilinear interpolation of a layer (all pending combinations of one
/// time step) at `(r, s, pending quantities)`. Queries above the grid are
/// clamped to its upper edge; queries below it are rejected.
pub fn interpolate(layer: &[f64], grid: &GridSpec, r: f64, s: f64, pending: &[f64]) -> Result<f64> {
    if r < -1e-12 {
        return Err(Error::BelowGrid {
            what: "r",
            value: r,
            min: 0.0,
        });
    }
    if s < grid.s_min - 1e-12 {
        return Err(Error::BelowGrid {
            what: "s",
            value: s,
            min: grid.s_min,
        });
    }
    if let Some(&e) = pending.iter().find(|&&e| e < -1e-12) {
        return Err(Error::BelowGrid {
            what: "e",
            value: e,
            min: 0.0,
        });
    }
    let nodes = grid.nodes();
    if layer.len() != nodes * grid.combos(pending.len()) {
        return Err(Error::Mismatch(format!(
            "layer of {} values does not hold {} pending axes",
            layer.len(),
            pending.len()
        )));
    }
    let r = r.max(0.0);
    let s = s.max(grid.s_min);
    // Per-axis bracketing level and weight of the upper neighbour.
    let brackets: Vec<(usize, f64)> = pending
        .iter()
        .map(|&e| {
            if grid.k_max <= 0.0 {
                (0, 0.0)
            } else {
                let h_e = grid.k_max / (grid.n_e - 1) as f64;
                locate(e.min(grid.k_max), 0.0, h_e, grid.n_e)
            }
        })
        .collect();
    let mut acc = 0.0;
    for corner in 0..(1usize << pending.len()) {
        let mut weight = 1.0;
        let mut combo = 0;
        for (axis, &(lvl, f)) in brackets.iter().enumerate() {
            let up = corner >> (pending.len() - 1 - axis) & 1 == 1;
            weight *= if up { f } else { 1.0 - f };
            combo = combo * grid.n_e + lvl + usize::from(up);
        }
        if weight == 0.0 {
            continue;
        }
        acc += weight * interpolate_rs(&layer[combo * nodes..(combo + 1) * nodes], grid, r, s);
    }
    Ok(acc)
}

/// Visits the grid corners of the cell holding `(r, s, pending)` with their
/// multilinear weights as `(combo, node, weight)`. Coordinates are clamped
/// into the grid on both sides.
pub(crate) fn for_each_corner(grid: &GridSpec, r: f64, s: f64, pending: &[f64], mut visit: impl FnMut(usize, usize, f64)) {
    let (ir, fr) = locate(r.clamp(0.0, grid.r_max), 0.0, grid.h_r(), grid.n_r);
    let (is, fs) = locate(s.clamp(grid.s_min, grid.s_max), grid.s_min, grid.h_s(), grid.n_s);
    let h_e = if grid.k_max > 0.0 { grid.k_max / (grid.n_e - 1) as f64 } else { 0.0 };
    let axes = pending.len();
    for corner in 0..(1usize << axes) {
        let mut weight = 1.0;
        let mut combo = 0;
        for (axis, &e) in pending.iter().enumerate() {
            let (lvl, f) = if h_e > 0.0 { locate(e.clamp(0.0, grid.k_max), 0.0, h_e, grid.n_e) } else { (0, 0.0) };
            let up = corner >> (axes - 1 - axis) & 1 == 1;
            weight *= if up { f } else { 1.0 - f };
            combo = combo * grid.n_e + lvl + usize::from(up);
        }
        if weight == 0.0 {
            continue;
        }
        for (a, wa) in [(0, 1.0 - fr), (1, fr)] {
            for (b, wb) in [(0, 1.0 - fs), (1, fs)] {
                let w = weight * wa * wb;
                if w != 0.0 {
                    visit(combo, grid.node(ir + a, is + b), w);
                }
            }
        }
    }
}

/// Grid-sampled reduced value `w = v − x` over every interval, implicit
/// step and pending-order combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: GridSpec,
    pub schedule: Schedule,
    pub intervals: Vec<IntervalField>,
}

/// Values on `[t_k, t_{k+1}]`. Step 0 is `t_k` (after the date jump) and
/// step `n_t` is `t_{k+1}⁻` (before the next one).
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalField {
    pub pending_count: usize,
    /// One layer per step, each `combos × nodes` values, combo-major.
    pub layers: Vec<Vec<f64>>,
}

impl ValueField {
    pub fn dt(&self) -> f64 {
        self.schedule.period() / self.grid.n_t as f64
    }

    pub fn time_of(&self, k: usize, step: usize) -> f64 {
        self.schedule.date(k) + step as f64 * self.dt()
    }

    /// Maps a time to `(interval, step)`, rounding to the nearest step. A
    /// renewal date `t_k`, `k ≥ 1`, maps to the pre-jump step
    /// `(k − 1, n_t)`, which carries the date decision.
    pub fn locate_time(&self, t: f64) -> (usize, usize) {
        locate_time(&self.schedule, &self.grid, t)
    }

    pub fn layer(&self, k: usize, step: usize) -> &[f64] {
        &self.intervals[k].layers[step]
    }

    pub fn slice(&self, k: usize, step: usize, combo: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.intervals[k].layers[step][combo * n..(combo + 1) * n]
    }

    /// Interpolated value at a time step.
    pub fn value_at(&self, k: usize, step: usize, r: f64, s: f64, pending: &[f64]) -> Result<f64> {
        interpolate(self.layer(k, step), &self.grid, r, s, pending)
    }

    pub fn min_value(&self) -> f64 {
        self.all_values().fold(f64::INFINITY, f64::min)
    }

    pub fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.intervals
            .iter()
            .flat_map(|i| i.layers.iter().flat_map(|l| l.iter().copied()))
    }
}

pub fn locate_time(schedule: &Schedule, grid: &GridSpec, t: f64) -> (usize, usize) {
    let period = schedule.period();
    let t = t.clamp(0.0, schedule.horizon);
    let u = t / period * grid.n_t as f64;
    let total = (u.round() as usize).min(schedule.n_dates * grid.n_t);
    if total == 0 {
        return (0, 0);
    }
    if total % grid.n_t == 0 {
        (total / grid.n_t - 1, grid.n_t)
    } else {
        (total / grid.n_t, total % grid.n_t)
    }
}

/// Writes one slice as CSV with header `r,s,w` in node order.
pub fn write_slice_csv<W: Write>(mut out: W, slice: &[f64], grid: &GridSpec) -> io::Result<()> {
    writeln!(out, "r,s,w")?;
    for i_r in 0..grid.n_r {
        for i_s in 0..grid.n_s {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e}",
                grid.r_at(i_r),
                grid.s_at(i_s),
                slice[grid.node(i_r, i_s)]
            )?;
        }
    }
    Ok(())
}

/// File name of a value slice.
pub fn slice_file_name(k: usize, step: usize, combo: usize) -> String {
    format!("w_k{k}_t{step}_e{combo}.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            r_max: 1.0,
            n_r: 11,
            s_min: -0.5,
            s_max: 0.5,
            n_s: 9,
            n_e: 4,
            n_t: 10,
            k_max: 0.3,
        }
    }

    #[test]
    fn baseline_band() {
        let g = build_grid(&ModelParams::baseline(), &GridOverrides::default()).unwrap();
        assert_relative_eq!(g.s_max, 0.714_615_242_270_663_1, epsilon = 1e-12);
        assert_relative_eq!(g.s_min, -0.714_615_242_270_663_1, epsilon = 1e-12);
        assert_eq!(g.nodes(), 151 * 101);
    }

    #[test]
    fn padding_keeps_spacing_and_trims_back() {
        let g = small_grid();
        let outer = g.padded(3);
        assert_eq!(outer.n_s, 15);
        assert_relative_eq!(outer.h_s(), g.h_s(), epsilon = 1e-14);
        for i_s in 0..g.n_s {
            assert_relative_eq!(outer.s_at(i_s + 3), g.s_at(i_s), epsilon = 1e-14);
        }
        let data: Vec<usize> = (0..2 * outer.nodes()).collect();
        let cut = g.trim(&data, 3);
        assert_eq!(cut.len(), 2 * g.nodes());
        assert_eq!(cut[0], 3);
        assert_eq!(cut[g.n_s], outer.n_s + 3);
        assert_eq!(cut[g.nodes()], outer.nodes() + 3);
    }

    #[test]
    fn zero_width_band_rejected() {
        let p = ModelParams {
            sigma: 0.0,
            mu: 0.0,
            ..ModelParams::baseline()
        };
        let err = build_grid(&p, &GridOverrides::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateAxis { axis: "s", .. }));
        let err = build_grid(
            &ModelParams::baseline(),
            &GridOverrides {
                n_r: Some(1),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateAxis { axis: "r", .. }));
    }

    #[test]
    fn combo_round_trip() {
        let g = small_grid();
        for combo in 0..g.combos(3) {
            assert_eq!(g.encode_combo(&g.decode_combo(combo, 3)), combo);
        }
        assert_eq!(g.encode_combo(&[1, 2]), 6);
    }

    #[test]
    fn extinct_row_has_no_resource_neighbours() {
        let p = ModelParams::baseline();
        let g = small_grid();
        let row = generator_stencil((0, 4), &p, &g);
        assert!(row.off_diagonal.iter().all(|&(n, _)| n == g.node(0, 3) || n == g.node(0, 5)));
        assert!(row.row_sum().abs() < 1e-12);
    }

    #[test]
    fn symmetric_rates_without_drift() {
        let g = small_grid();
        let d = Dynamics {
            eta: 0.0,
            lambda_cap: 0.7,
            gamma: 0.0,
            s_drift: 0.0,
            s_var: 0.04,
        };
        let q = stencil_rates(&d, &g, 3, 4);
        let h = g.h_s();
        assert_relative_eq!(q.s_up, 0.04 / (2.0 * h * h), epsilon = 1e-12);
        assert_eq!(q.s_up, q.s_down);
        assert_eq!(q.r_up, 0.0);
    }

    #[test]
    fn upwind_mass_at_half_stock() {
        let p = ModelParams::baseline();
        let g = build_grid(&p, &GridOverrides::default()).unwrap();
        let i_r = 75;
        assert_relative_eq!(g.r_at(i_r), 0.5, epsilon = 1e-14);
        let q = stencil_rates(&Dynamics::from_params(&p), &g, i_r, 50);
        let h = g.h_r();
        let diffusion = 0.01 * 0.25 / (2.0 * h * h);
        assert_relative_eq!(q.r_up, 0.1 / h + diffusion, epsilon = 1e-9);
        assert_relative_eq!(q.r_down, diffusion, epsilon = 1e-9);
    }

    #[test]
    fn zero_generator_is_identity() {
        let g = small_grid();
        let d = Dynamics {
            eta: 0.0,
            lambda_cap: 0.7,
            gamma: 0.0,
            s_drift: 0.0,
            s_var: 0.0,
        };
        let gen = Generator::new(&d, &g);
        let slice: Vec<f64> = (0..g.nodes()).map(|i| (i as f64).sin()).collect();
        let out = implicit_step(&slice, 0.1, &gen, None, &LinearSolverOptions::default(), 50).unwrap();
        assert_eq!(out.values, slice);
    }

    #[test]
    fn constants_are_preserved() {
        let g = small_grid();
        let gen = Generator::for_model(&ModelParams::baseline(), &g);
        let slice = vec![2.5; g.nodes()];
        let out = implicit_step(&slice, 0.05, &gen, None, &LinearSolverOptions::default(), 50).unwrap();
        assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn heat_step_matches_gbm_expectation() {
        let sigma: f64 = 0.1;
        let g = GridSpec {
            r_max: 1.0,
            n_r: 2,
            s_min: -1.0,
            s_max: 1.0,
            n_s: 201,
            n_e: 2,
            n_t: 2,
            k_max: 0.3,
        };
        let d = Dynamics {
            eta: 0.0,
            lambda_cap: 0.7,
            gamma: 0.0,
            s_drift: 0.0,
            s_var: sigma * sigma,
        };
        let gen = Generator::new(&d, &g);
        let tau = 1.0;
        let steps = 100;
        let mut w: Vec<f64> = (0..g.nodes()).map(|n| g.s_at(n % g.n_s).exp()).collect();
        for _ in 0..steps {
            w = implicit_step(&w, tau / steps as f64, &gen, None, &LinearSolverOptions::default(), 1)
                .unwrap()
                .values;
        }
        for i_s in 50..=150 {
            let s = g.s_at(i_s);
            let exact = (s + 0.5 * sigma * sigma * tau).exp();
            assert!((w[i_s] / exact - 1.0).abs() < 0.01, "node {i_s}");
        }
    }

    #[test]
    fn obstacle_solution_dominates_obstacle() {
        let g = small_grid();
        let gen = Generator::for_model(&ModelParams::baseline(), &g);
        let slice: Vec<f64> = (0..g.nodes()).map(|n| 0.1 * (n % g.n_s) as f64).collect();
        let psi: Vec<f64> = (0..g.nodes()).map(|n| 0.3 * (n / g.n_s) as f64 / 10.0).collect();
        let out = implicit_step(&slice, 0.1, &gen, Some(&psi), &LinearSolverOptions::default(), 100).unwrap();
        for n in 0..g.nodes() {
            assert!(out.values[n] >= psi[n] - 1e-12);
            if !out.contact[n] {
                assert!(gen.residual(&out.values, slice[n], 0.1, n) < 1e-9);
            }
        }
    }

    #[test]
    fn interpolation_basics() {
        let g = small_grid();
        let layer: Vec<f64> = (0..g.nodes() * g.n_e)
            .map(|i| {
                let (combo, node) = (i / g.nodes(), i % g.nodes());
                2.0 * g.r_at(node / g.n_s) - 0.5 * g.s_at(node % g.n_s) + 3.0 * g.e_at(combo) + 1.0
            })
            .collect();
        // Nodes reproduced.
        let v = interpolate(&layer, &g, g.r_at(3), g.s_at(2), &[g.e_at(1)]).unwrap();
        assert_relative_eq!(v, layer[g.nodes() + g.node(3, 2)], epsilon = 1e-13);
        // Linear fields reproduced anywhere.
        let v = interpolate(&layer, &g, 0.437, 0.123, &[0.17]).unwrap();
        assert_relative_eq!(v, 2.0 * 0.437 - 0.5 * 0.123 + 3.0 * 0.17 + 1.0, epsilon = 1e-12);
        // Above the grid is clamped, below is an error.
        let v = interpolate(&layer, &g, 1.3, 0.0, &[0.0]).unwrap();
        assert_relative_eq!(v, 3.0, epsilon = 1e-12);
        assert!(interpolate(&layer, &g, -0.1, 0.0, &[0.0]).is_err());
        assert!(interpolate(&layer, &g, 0.1, -0.6, &[0.0]).is_err());
    }

    #[test]
    fn midpoint_is_mean() {
        let g = small_grid();
        let slice: Vec<f64> = (0..g.nodes()).map(|n| ((n * 7919) % 13) as f64).collect();
        let mid = 0.5 * (g.r_at(4) + g.r_at(5));
        let v = interpolate(&slice, &g, mid, g.s_at(6), &[]).unwrap();
        assert_relative_eq!(v, 0.5 * (slice[g.node(4, 6)] + slice[g.node(5, 6)]), epsilon = 1e-13);
    }

    #[test]
    fn time_location() {
        let g = GridSpec { n_t: 50, ..small_grid() };
        let s = Schedule::new(3.0, 3, 1);
        assert_eq!(locate_time(&s, &g, 0.0), (0, 0));
        assert_eq!(locate_time(&s, &g, 0.5), (0, 25));
        assert_eq!(locate_time(&s, &g, 1.0), (0, 50));
        assert_eq!(locate_time(&s, &g, 1.02), (1, 1));
        assert_eq!(locate_time(&s, &g, 3.0), (2, 50));
    }

    proptest! {
        #[test]
        fn interpolation_stays_within_corners(
            r in 0.0..1.0f64, s in -0.5..0.5f64, e in 0.0..0.3f64, seed in 0u64..1000,
        ) {
            let g = small_grid();
            let layer: Vec<f64> = (0..g.nodes() * g.n_e)
                .map(|i| (((i as u64 + 1) * (seed + 17)) % 101) as f64)
                .collect();
            let v = interpolate(&layer, &g, r, s, &[e]).unwrap();
            prop_assert!((0.0..=100.0).contains(&v));
        }

        #[test]
        fn step_commutes_with_constant_shift(shift in -5.0..5.0f64, seed in 0u64..50) {
            let g = small_grid();
            let gen = Generator::for_model(&ModelParams::baseline(), &g);
            let slice: Vec<f64> = (0..g.nodes()).map(|n| (((n as u64 + 3) * (seed + 7)) % 11) as f64).collect();
            let shifted: Vec<f64> = slice.iter().map(|v| v + shift).collect();
            let opts = LinearSolverOptions::default();
            let a = implicit_step(&slice, 0.05, &gen, None, &opts, 1).unwrap().values;
            let b = implicit_step(&shifted, 0.05, &gen, None, &opts, 1).unwrap().values;
            let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y - x - shift).abs() < 1e-9);
                prop_assert!(*x >= lo - 1e-9 && *x <= hi + 1e-9);
            }
        }
    }
}
