//! Intervention operators, the renewal calendar and pending-order
//! bookkeeping.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{ModelParams, State};

/// Slack used when comparing a time against a date, relative to the horizon.
const DATE_EPS: f64 = 1e-12;

/// Renewal dates `t_i = i T / n`, `i = 1..=n`, and the delay `δ = m T / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub horizon: f64,
    pub n_dates: usize,
    pub m_delay: usize,
}

impl Schedule {
    pub fn new(horizon: f64, n_dates: usize, m_delay: usize) -> Self {
        Self {
            horizon,
            n_dates,
            m_delay,
        }
    }

    pub fn from_params(params: &ModelParams) -> Self {
        Self::new(params.horizon, params.n_dates, params.m_delay)
    }

    /// Length of one renewal interval.
    pub fn period(&self) -> f64 {
        self.horizon / self.n_dates as f64
    }

    /// `t_i`; `date(0)` is the initial time.
    pub fn date(&self, i: usize) -> f64 {
        if i == self.n_dates {
            self.horizon
        } else {
            i as f64 * self.period()
        }
    }

    pub fn delta(&self) -> f64 {
        self.m_delay as f64 * self.period()
    }

    /// `N(t)`: number of dates `t_i ≤ t`. Right-continuous.
    pub fn date_count(&self, t: f64) -> usize {
        if t < 0.0 {
            return 0;
        }
        let eps = DATE_EPS * self.horizon;
        let n = ((t + eps) / self.period()).floor() as usize;
        n.min(self.n_dates)
    }

    /// Date indices `N(t − δ) + 1 ..= N(t)` whose renewals are paid but not
    /// yet matured at `t`.
    pub fn pending_window(&self, t: f64) -> Range<usize> {
        let hi = self.date_count(t);
        let lo = self.date_count(t - self.delta());
        (lo + 1)..(hi + 1)
    }

    /// Number of pending orders carried on `[t_k, t_{k+1})`.
    pub fn pending_count(&self, k: usize) -> usize {
        k.min(self.m_delay)
    }

    /// Whether the order placed at date `k` matures inside the horizon,
    /// i.e. whether date `k` consumes the order from date `k − m`.
    pub fn matures_at(&self, k: usize) -> bool {
        k > self.m_delay
    }
}

/// Quantity renewed at a given date, waiting for its delayed effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingOrder {
    pub date_index: usize,
    pub quantity: f64,
}

/// Ring of at most `m` pending renewal orders, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingOrders {
    capacity: usize,
    entries: VecDeque<PendingOrder>,
}

impl PendingOrders {
    pub fn new(m_delay: usize) -> Self {
        Self {
            capacity: m_delay,
            entries: VecDeque::with_capacity(m_delay),
        }
    }

    /// Builds the orders pending on `[t_k, t_{k+1})` from their quantities,
    /// oldest first. The number of quantities must equal `min(k, m)`.
    pub fn from_quantities(schedule: &Schedule, k: usize, quantities: &[f64]) -> Result<Self> {
        let count = schedule.pending_count(k);
        if quantities.len() != count {
            return Err(Error::Mismatch(format!(
                "{} pending quantities given, interval {k} carries {count}",
                quantities.len()
            )));
        }
        let mut orders = Self::new(schedule.m_delay);
        let first = k + 1 - count;
        for (offset, &quantity) in quantities.iter().enumerate() {
            orders.entries.push_back(PendingOrder {
                date_index: first + offset,
                quantity,
            });
        }
        Ok(orders)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingOrder> {
        self.entries.iter()
    }

    pub fn quantities(&self) -> Vec<f64> {
        self.entries.iter().map(|o| o.quantity).collect()
    }

    /// Applies the bookkeeping of date `k`: the order from `k − m` leaves
    /// the window (returned) and the order `(k, e)` enters it. Without delay
    /// the new order itself is returned as matured.
    pub fn roll(&mut self, k: usize, e: f64, schedule: &Schedule) -> Option<PendingOrder> {
        if self.capacity == 0 {
            return Some(PendingOrder {
                date_index: k,
                quantity: e,
            });
        }
        let matured = if schedule.matures_at(k) {
            let front = self.entries.pop_front();
            debug_assert!(front.is_none_or(|o| o.date_index + schedule.m_delay == k));
            front
        } else {
            None
        };
        if self.capacity > 0 && k < schedule.n_dates {
            self.entries.push_back(PendingOrder {
                date_index: k,
                quantity: e,
            });
        }
        matured
    }
}

/// Renewal decisions per date and harvest impulses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Strategy {
    /// `renewals[i - 1]` is the quantity ordered at date `t_i`.
    pub renewals: Vec<f64>,
    pub harvests: Vec<Harvest>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harvest {
    pub time: f64,
    pub amount: f64,
}

/// Net cash of selling `a` at price `p`: `(p − c1) a − c2`.
#[inline]
pub fn harvest_payoff(p: f64, a: f64, params: &ModelParams) -> f64 {
    (p - params.c1) * a - params.c2
}

/// Harvest `a`: cash `+ (p − c1) a − c2`, stock `− a`.
pub fn harvest_op(z: State, a: f64, params: &ModelParams) -> Result<State> {
    if !(0.0..=z.r).contains(&a) {
        return Err(Error::OutOfRange {
            what: "harvest",
            value: a,
            lo: 0.0,
            hi: z.r,
        });
    }
    Ok(State {
        x: z.x + harvest_payoff(z.p, a, params),
        r: (z.r - a).max(0.0),
        ..z
    })
}

/// Order a renewal `e`: cash `− (q + c3) e`, stock `+ g0`.
pub fn renew_op(z: State, e: f64, params: &ModelParams) -> Result<State> {
    check_order(e, params)?;
    Ok(State {
        x: z.x - (z.q + params.c3) * e,
        r: z.r + params.g0,
        ..z
    })
}

/// Maturation of an order `e_old` placed `m` dates ago: stock `+ g(e_old)`.
pub fn mature_op(z: State, e_old: f64, params: &ModelParams) -> Result<State> {
    check_order(e_old, params)?;
    Ok(State {
        r: z.r + params.yield_of(e_old),
        ..z
    })
}

fn check_order(e: f64, params: &ModelParams) -> Result<()> {
    if (0.0..=params.k_max).contains(&e) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "renewal order",
            value: e,
            lo: 0.0,
            hi: params.k_max,
        })
    }
}

/// Drops every harvest whose net payoff at the prevailing price is
/// negative. Renewals and the order of the kept harvests are unchanged.
pub fn profitable_filter(
    strategy: &Strategy,
    price_at: impl Fn(f64) -> f64,
    params: &ModelParams,
) -> Strategy {
    Strategy {
        renewals: strategy.renewals.clone(),
        harvests: strategy
            .harvests
            .iter()
            .filter(|h| harvest_payoff(price_at(h.time), h.amount, params) >= 0.0)
            .copied()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn base() -> ModelParams {
        ModelParams::baseline()
    }

    fn assert_state(a: State, b: State) {
        assert_relative_eq!(a.x, b.x, epsilon = 1e-14);
        assert_relative_eq!(a.r, b.r, epsilon = 1e-14);
        assert_eq!(a.p, b.p);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn harvest_examples() {
        let p = base();
        let z = State::new(0.0, 0.5, 1.0, 1.0);
        assert_state(harvest_op(z, 0.2, &p).unwrap(), State::new(0.17, 0.3, 1.0, 1.0));
        assert_state(harvest_op(z, 0.0, &p).unwrap(), State::new(-0.01, 0.5, 1.0, 1.0));
        assert_eq!(harvest_op(z, 0.5, &p).unwrap().r, 0.0);
        assert!(harvest_op(z, 0.6, &p).is_err());
        assert!(harvest_op(z, -0.1, &p).is_err());
    }

    #[test]
    fn renew_examples() {
        let p = base();
        let z = State::new(0.0, 0.5, 1.0, 1.0);
        assert_state(renew_op(z, 0.1, &p).unwrap(), State::new(-0.11, 0.53, 1.0, 1.0));
        assert_state(renew_op(z, 0.0, &p).unwrap(), State::new(0.0, 0.53, 1.0, 1.0));
        let no_natural = ModelParams { g0: 0.0, ..base() };
        assert_eq!(renew_op(z, 0.0, &no_natural).unwrap(), z);
        assert!(renew_op(z, 0.31, &p).is_err());
    }

    #[test]
    fn mature_examples() {
        let p = base();
        let z = State::new(0.0, 0.5, 1.0, 1.0);
        assert_eq!(mature_op(z, 0.0, &p).unwrap(), z);
        assert_state(mature_op(z, 0.1, &p).unwrap(), State::new(0.0, 0.6, 1.0, 1.0));
        let half = ModelParams { g_slope: 0.5, ..base() };
        assert_relative_eq!(mature_op(z, 0.2, &half).unwrap().r, 0.6, epsilon = 1e-14);
    }

    #[test]
    fn date_counting() {
        let s = Schedule::new(3.0, 3, 1);
        assert_eq!(s.date_count(0.5), 0);
        assert_eq!(s.date_count(1.0), 1);
        assert_eq!(s.date_count(2.5), 2);
        assert_eq!(s.date_count(3.0), 3);
        assert!(s.pending_window(0.5).is_empty());
        assert_eq!(s.pending_window(1.5), 1..2);
        assert_eq!(s.pending_window(2.5), 2..3);
        assert_eq!(s.delta(), s.date(1));
    }

    #[test]
    fn pending_ring_rolls() {
        let s = Schedule::new(3.0, 3, 1);
        let mut d = PendingOrders::new(1);
        assert!(d.roll(1, 0.2, &s).is_none());
        assert_eq!(d.quantities(), vec![0.2]);
        let out = d.roll(2, 0.1, &s).unwrap();
        assert_eq!(out.date_index, 1);
        assert_eq!(out.quantity, 0.2);
        assert_eq!(d.quantities(), vec![0.1]);
        // Order at T never enters the window.
        let out = d.roll(3, 0.3, &s).unwrap();
        assert_eq!(out.quantity, 0.1);
        assert!(d.is_empty());

        let s2 = Schedule::new(4.0, 4, 2);
        let d = PendingOrders::from_quantities(&s2, 3, &[0.1, 0.2]).unwrap();
        let idx: Vec<_> = d.iter().map(|o| o.date_index).collect();
        assert_eq!(idx, vec![2, 3]);
        assert!(PendingOrders::from_quantities(&s2, 1, &[0.1, 0.2]).is_err());

        let s0 = Schedule::new(2.0, 2, 0);
        let mut d = PendingOrders::new(0);
        assert_eq!(d.roll(1, 0.2, &s0).unwrap().quantity, 0.2);
        assert!(d.is_empty());
    }

    #[test]
    fn filter_examples() {
        let p = base();
        let keep = Strategy {
            renewals: vec![0.1, 0.0, 0.0],
            harvests: vec![Harvest { time: 0.5, amount: 0.05 }],
        };
        assert_eq!(profitable_filter(&keep, |_| 1.0, &p), keep);
        let drop = Strategy {
            renewals: vec![0.1, 0.0, 0.0],
            harvests: vec![
                Harvest { time: 0.5, amount: 0.01 },
                Harvest { time: 0.7, amount: 0.2 },
            ],
        };
        let kept = profitable_filter(&drop, |_| 1.0, &p);
        assert_eq!(kept.harvests, vec![Harvest { time: 0.7, amount: 0.2 }]);
        assert_eq!(kept.renewals, drop.renewals);
    }

    #[test]
    fn date_composition_is_mature_then_renew() {
        let p = base();
        let z = State::new(1.0, 0.4, 1.2, 1.2);
        let composed = renew_op(mature_op(z, 0.2, &p).unwrap(), 0.1, &p).unwrap();
        assert_relative_eq!(composed.r, 0.4 + 0.2 + 0.03, epsilon = 1e-14);
        assert_relative_eq!(composed.x, 1.0 - 1.3 * 0.1, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn operators_commute_with_cash_shift(
            x in -5.0..5.0f64, r in 0.0..1.0f64, price in 0.05..3.0f64,
            shift in -3.0..3.0f64, frac in 0.0..1.0f64, e in 0.0..0.3f64,
        ) {
            let p = base();
            let z = State::new(x, r, price, price);
            let zs = z.with_cash(x + shift);
            let a = frac * r;
            let h = harvest_op(z, a, &p).unwrap();
            let hs = harvest_op(zs, a, &p).unwrap();
            prop_assert!((hs.x - h.x - shift).abs() < 1e-12 && hs.r == h.r);
            let n = renew_op(z, e, &p).unwrap();
            let ns = renew_op(zs, e, &p).unwrap();
            prop_assert!((ns.x - n.x - shift).abs() < 1e-12 && ns.r == n.r);
            let m = mature_op(z, e, &p).unwrap();
            let ms = mature_op(zs, e, &p).unwrap();
            prop_assert!((ms.x - m.x - shift).abs() < 1e-12 && ms.r == m.r);
        }

        #[test]
        fn operators_are_monotone(
            r in 0.0..1.0f64, dr in 0.0..0.5f64, price in 0.05..3.0f64,
            dp in 0.0..1.0f64, e in 0.0..0.3f64, frac in 0.0..1.0f64,
        ) {
            let p = base();
            let lo = State::new(0.0, r, price, price);
            let hi = State::new(0.0, r + dr, price, price);
            prop_assert!(renew_op(hi, e, &p).unwrap().r >= renew_op(lo, e, &p).unwrap().r);
            prop_assert!(mature_op(hi, e, &p).unwrap().r >= mature_op(lo, e, &p).unwrap().r);
            let a = frac * r;
            let richer = State::new(0.0, r, price + dp, price);
            prop_assert!(harvest_op(richer, a, &p).unwrap().x >= harvest_op(lo, a, &p).unwrap().x);
        }
    }
}
