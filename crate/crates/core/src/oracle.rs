//! Independent reference computations used by the check suites.
//!
//! Nothing in the solver depends on this module. The chain dynamic program
//! re-derives its own transition rates, interpolation and date enumeration
//! from the parameters and iterates the Bellman equation by plain Jacobi
//! value iteration, so agreement with [`crate::solver`] exercises the
//! policy iteration, the relaxation sweeps and the date bookkeeping.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::chain::GridSpec;
use crate::error::{Error, Result};
use crate::model::{path_rng, ModelParams};

/// Euler–Maruyama path of the logistic diffusion, clipped at zero.
pub fn euler_maruyama_logistic(r0: f64, t: f64, draws: &[f64], params: &ModelParams) -> f64 {
    let h = t / draws.len() as f64;
    let mut r = r0;
    for z in draws {
        r += params.eta * r * (params.lambda_cap - r) * h + params.gamma * r * h.sqrt() * z;
        r = r.max(0.0);
    }
    r
}

/// Mean and standard error of `R_t` over `n_paths` Euler–Maruyama paths.
pub fn euler_maruyama_mean(
    r0: f64,
    t: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    params: &ModelParams,
) -> (f64, f64) {
    let mut draws = vec![0.0; n_steps];
    let ends: Vec<f64> = (0..n_paths)
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            draws.iter_mut().for_each(|d| *d = rng.sample(StandardNormal));
            euler_maruyama_logistic(r0, t, &draws, params)
        })
        .collect();
    crate::policy_sim::mean_and_se(&ends)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(Error::Mismatch("dense system is not square".into()));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty pivot range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Mismatch("singular dense system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// Transition rates of node `(i, j)` towards `(down r, up r, down s, up s)`,
/// recomputed from the model: upwind drift, central diffusion, jumps that
/// would leave the grid removed.
pub fn chain_rates(params: &ModelParams, grid: &GridSpec, i: usize, j: usize) -> [f64; 4] {
    let h_r = grid.r_max / (grid.n_r - 1) as f64;
    let h_s = (grid.s_max - grid.s_min) / (grid.n_s - 1) as f64;
    let r = i as f64 * h_r;
    let br = params.eta * r * (params.lambda_cap - r);
    let ar = params.gamma * params.gamma * r * r;
    let bs = params.mu - params.sigma * params.sigma / 2.0;
    let as_ = params.sigma * params.sigma;
    let mut q = [
        ar / (2.0 * h_r * h_r) + f64::max(-br, 0.0) / h_r,
        ar / (2.0 * h_r * h_r) + f64::max(br, 0.0) / h_r,
        as_ / (2.0 * h_s * h_s) + f64::max(-bs, 0.0) / h_s,
        as_ / (2.0 * h_s * h_s) + f64::max(bs, 0.0) / h_s,
    ];
    if i == 0 {
        q[0] = 0.0;
    }
    if i + 1 == grid.n_r {
        q[1] = 0.0;
    }
    if j == 0 {
        q[2] = 0.0;
    }
    if j + 1 == grid.n_s {
        q[3] = 0.0;
    }
    q
}

/// Dense matrix of `I − dt A` on the slice, node index `i n_s + j`.
pub fn dense_implicit_matrix(params: &ModelParams, grid: &GridSpec, dt: f64) -> Vec<Vec<f64>> {
    let n = grid.n_r * grid.n_s;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..grid.n_r {
        for j in 0..grid.n_s {
            let row = i * grid.n_s + j;
            let q = chain_rates(params, grid, i, j);
            m[row][row] = 1.0 + dt * q.iter().sum::<f64>();
            let targets = [
                (q[0], row.wrapping_sub(grid.n_s)),
                (q[1], row + grid.n_s),
                (q[2], row.wrapping_sub(1)),
                (q[3], row + 1),
            ];
            for (rate, col) in targets {
                if rate != 0.0 {
                    m[row][col] -= dt * rate;
                }
            }
        }
    }
    m
}

/// Reference solution of the full backward problem on one grid.
#[derive(Debug, Clone)]
pub struct ChainDp {
    pub grid: GridSpec,
    /// Values at time zero, node-major (`i n_s + j`); nothing is pending.
    pub initial: Vec<f64>,
    /// Largest Jacobi iteration count over all steps.
    pub max_sweeps: usize,
}

impl ChainDp {
    /// Value at a grid node at time zero.
    pub fn at(&self, i_r: usize, i_s: usize) -> f64 {
        self.initial[i_r * self.grid.n_s + i_s]
    }
}

/// Backward dynamic program over the discrete chain with exhaustive
/// enumeration of harvest amounts, order levels and fused date harvests.
/// Each implicit step `w = max{cont(w), harvest(w)}` is iterated to a fixed
/// point by Jacobi sweeps.
pub fn chain_dp(params: &ModelParams, grid: &GridSpec, tol: f64) -> Result<ChainDp> {
    grid.validate()?;
    let n = params.n_dates;
    let m = params.m_delay;
    let (nr, ns, ne) = (grid.n_r, grid.n_s, grid.n_e);
    let nodes = nr * ns;
    let h_r = grid.r_max / (nr - 1) as f64;
    let h_s = (grid.s_max - grid.s_min) / (ns - 1) as f64;
    let level = |l: usize| if ne > 1 { grid.k_max * l as f64 / (ne - 1) as f64 } else { 0.0 };
    let price = |j: usize| (grid.s_min + j as f64 * h_s).exp();
    let dt = params.horizon / n as f64 / grid.n_t as f64;
    let rates: Vec<[f64; 4]> = (0..nodes).map(|k| chain_rates(params, grid, k / ns, k % ns)).collect();

    // Linear interpolation in r at a fixed price node, clamped to r_max.
    let lerp = |slice: &[f64], j: usize, r: f64| -> f64 {
        let x = (r.min(grid.r_max) / h_r).max(0.0);
        let i = (x.floor() as usize).min(nr - 2);
        let f = (x - i as f64).clamp(0.0, 1.0);
        (1.0 - f) * slice[i * ns + j] + f * slice[(i + 1) * ns + j]
    };
    let pending_on = |k: usize| k.min(m);
    let combos = |count: usize| ne.pow(count as u32);

    // Date operator: `post(combo_after, slice)` gives the slice after the
    // date, `None` meaning liquidation.
    let date = |d: usize, post: Option<&Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        let before = pending_on(d - 1);
        let matures = d > m;
        let carries = d < n && m > 0;
        (0..combos(before))
            .map(|c| {
                // Oldest order is the most significant digit.
                let mut digits = vec![0; before];
                let mut rest = c;
                for slot in digits.iter_mut().rev() {
                    *slot = rest % ne;
                    rest /= ne;
                }
                let (e_old, kept) = if matures && before > 0 { (level(digits[0]), &digits[1..]) } else { (0.0, &digits[..]) };
                let kept_code = kept.iter().fold(0, |acc, &x| acc * ne + x);
                let mut out = vec![0.0; nodes];
                for i in 0..nr {
                    let r = i as f64 * h_r;
                    for j in 0..ns {
                        let p = price(j);
                        let value = |stock: f64, l: usize| -> f64 {
                            let e = level(l);
                            let mut r_new = stock + params.g0 + params.g_slope * e_old;
                            if m == 0 {
                                r_new += params.g_slope * e;
                            }
                            let r_new = r_new.min(grid.r_max);
                            let cont = match post {
                                None => ((p - params.c1) * r_new - params.c2).max(0.0),
                                Some(layers) => {
                                    let c_new = if carries { kept_code * ne + l } else { kept_code };
                                    lerp(&layers[c_new], j, r_new)
                                }
                            };
                            cont - (p + params.c3) * e
                        };
                        let mut best = f64::NEG_INFINITY;
                        for a_steps in 0..=i {
                            let a = a_steps as f64 * h_r;
                            let cash = if a_steps == 0 { 0.0 } else { (p - params.c1) * a - params.c2 };
                            for l in 0..ne {
                                best = best.max(cash + value(r - a, l));
                            }
                        }
                        out[i * ns + j] = best;
                    }
                }
                out
            })
            .collect()
    };

    let mut max_sweeps = 0;
    let mut step = |next: &[f64]| -> Result<Vec<f64>> {
        let mut w = next.to_vec();
        for sweep in 1..=100_000 {
            let mut fresh = vec![0.0; nodes];
            let mut change = 0.0_f64;
            for k in 0..nodes {
                let (i, j) = (k / ns, k % ns);
                let q = rates[k];
                let neighbours = [
                    (q[0], k.wrapping_sub(ns)),
                    (q[1], k + ns),
                    (q[2], k.wrapping_sub(1)),
                    (q[3], k + 1),
                ];
                let flow: f64 = neighbours.iter().filter(|(rate, _)| *rate != 0.0).map(|&(rate, t)| rate * w[t]).sum();
                let total: f64 = q.iter().sum();
                let mut v = (next[k] + dt * flow) / (1.0 + dt * total);
                let p = price(j);
                for a_steps in 1..=i {
                    let a = a_steps as f64 * h_r;
                    v = v.max((p - params.c1) * a - params.c2 + w[k - a_steps * ns]);
                }
                change = change.max((v - w[k]).abs());
                fresh[k] = v;
            }
            w = fresh;
            if change < tol {
                max_sweeps = max_sweeps.max(sweep);
                return Ok(w);
            }
        }
        Err(Error::NoConvergence {
            stage: "chain value iteration",
            iters: 100_000,
            residual: f64::NAN,
        })
    };

    let mut layers = date(n, None);
    for k in (0..n).rev() {
        for _ in 0..grid.n_t {
            layers = layers.iter().map(|slice| step(slice)).collect::<Result<_>>()?;
        }
        if k > 0 {
            layers = date(k, Some(&layers));
        }
    }
    Ok(ChainDp {
        grid: *grid,
        initial: layers.swap_remove(0),
        max_sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_grid, Generator, GridOverrides};
    use approx::assert_relative_eq;

    #[test]
    fn dense_solve_small_system() {
        let a = vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, -1.0], vec![0.0, -1.0, 2.0]];
        let x = dense_solve(a.clone(), vec![1.0, 2.0, 3.0]).unwrap();
        for (row, b) in a.iter().zip([1.0, 2.0, 3.0]) {
            let lhs: f64 = row.iter().zip(&x).map(|(a, x)| a * x).sum();
            assert_relative_eq!(lhs, b, epsilon = 1e-14);
        }
        assert!(dense_solve(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn rates_agree_with_generator() {
        let params = ModelParams::baseline();
        let grid = build_grid(&params, &GridOverrides::reduced()).unwrap();
        let gen = Generator::for_model(&params, &grid);
        for i in [0, 1, 25, 50] {
            for j in [0, 17, 34] {
                let q = chain_rates(&params, &grid, i, j);
                let g = gen.rates(grid.node(i, j));
                for (a, b) in q.iter().zip([g.r_down, g.r_up, g.s_down, g.s_up]) {
                    assert_relative_eq!(*a, b, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn euler_maruyama_without_noise_tracks_ode() {
        let params = ModelParams {
            gamma: 0.0,
            ..ModelParams::baseline()
        };
        let r = euler_maruyama_logistic(0.5, 1.0, &vec![0.0; 20_000], &params);
        assert_relative_eq!(r, crate::model::logistic_step_deterministic(0.5, 1.0, &params), epsilon = 1e-5);
    }
}
