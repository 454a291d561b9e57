//! Fixed-step classical RK4 on event-aligned grids, with jump hooks.
//!
//! The integrator is generic over the state representation so the same code
//! runs on plain vectors and on tape variables (gradients then flow through
//! the unrolled solver).

use crate::autodiff::Var;
use crate::error::{Error, Result};

pub trait OdeState: Clone {
    /// `self + alpha * dir`.
    fn axpy(&self, alpha: f64, dir: &Self) -> Self;
    fn is_finite(&self) -> bool;
}

impl OdeState for Vec<f64> {
    fn axpy(&self, alpha: f64, dir: &Self) -> Self {
        self.iter().zip(dir).map(|(a, b)| a + alpha * b).collect()
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl<'t> OdeState for Var<'t> {
    fn axpy(&self, alpha: f64, dir: &Self) -> Self {
        Var::axpy(*self, alpha, *dir)
    }

    fn is_finite(&self) -> bool {
        Var::is_finite(self)
    }
}

/// Augmented states, e.g. a latent path together with its intensity integral.
impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn axpy(&self, alpha: f64, dir: &Self) -> Self {
        (self.0.axpy(alpha, &dir.0), self.1.axpy(alpha, &dir.1))
    }

    fn is_finite(&self) -> bool {
        self.0.is_finite() && self.1.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Solver nodes from `start` to `end`. Every breakpoint is a node; inside each
/// inter-breakpoint interval the nodes are uniform with spacing at most `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationGrid {
    times: Vec<f64>,
    direction: Direction,
    h: f64,
}

/// `min(0.01·t_max, smallest gap / 4)`, where gaps include the distances to 0
/// and `t_max` from the first and last event.
pub fn default_step(t_max: f64, times: &[f64]) -> f64 {
    let mut h = 0.01 * t_max;
    let mut prev = 0.0;
    for &t in times.iter().chain(std::iter::once(&t_max)) {
        let gap = t - prev;
        if gap > 0.0 {
            h = h.min(gap / 4.0);
        }
        prev = t;
    }
    h
}

impl IntegrationGrid {
    pub fn new(start: f64, end: f64, breakpoints: &[f64], h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size {h} must be positive")));
        }
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::InvalidArgument("grid endpoints must be finite".into()));
        }
        let direction = if end >= start { Direction::Forward } else { Direction::Backward };
        let (lo, hi) = if start <= end { (start, end) } else { (end, start) };
        let mut points: Vec<f64> = Vec::with_capacity(breakpoints.len() + 2);
        points.push(start);
        points.push(end);
        for &b in breakpoints {
            if b < lo || b > hi {
                return Err(Error::InvalidArgument(format!("breakpoint {b} outside [{lo}, {hi}]")));
            }
            points.push(b);
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        if direction == Direction::Backward {
            points.reverse();
        }
        let mut times = vec![points[0]];
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = (((b - a).abs() / h) - 1e-9).ceil().max(1.0) as usize;
            for k in 1..n {
                times.push(a + (b - a) * k as f64 / n as f64);
            }
            times.push(b);
        }
        Ok(IntegrationGrid { times, direction, h })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn max_step(&self) -> f64 {
        self.h
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }
}

/// One classical RK4 step of signed size `h` from `(y, t)`.
pub fn rk4_step<S, F>(y: &S, t: f64, h: f64, ctx: usize, rhs: &mut F) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S, f64, usize) -> Result<S>,
{
    let k1 = rhs(y, t, ctx)?;
    let k2 = rhs(&y.axpy(0.5 * h, &k1), t + 0.5 * h, ctx)?;
    let k3 = rhs(&y.axpy(0.5 * h, &k2), t + 0.5 * h, ctx)?;
    let k4 = rhs(&y.axpy(h, &k3), t + h, ctx)?;
    let out = y
        .axpy(h / 6.0, &k1)
        .axpy(h / 3.0, &k2)
        .axpy(h / 3.0, &k3)
        .axpy(h / 6.0, &k4);
    if !out.is_finite() {
        return Err(Error::IntegrationDiverged { t: t + h });
    }
    Ok(out)
}

/// Integrates from `t0` to `t1` in uniform steps no longer than `h`, with a
/// fixed context.
pub fn advance<S, F>(state: S, t0: f64, t1: f64, h: f64, ctx: usize, rhs: &mut F) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S, f64, usize) -> Result<S>,
{
    if t1 == t0 {
        return Ok(state);
    }
    let n = (((t1 - t0).abs() / h) - 1e-9).ceil().max(1.0) as usize;
    let mut y = state;
    for k in 0..n {
        let a = t0 + (t1 - t0) * k as f64 / n as f64;
        let b = t0 + (t1 - t0) * (k + 1) as f64 / n as f64;
        y = rk4_step(&y, a, b - a, ctx, rhs)?;
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct JumpRecord<S> {
    /// Index into the caller's jump-time list.
    pub index: usize,
    pub t: f64,
    pub pre: S,
    pub post: S,
}

#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    /// State at each grid node, after any jump applied there.
    pub states: Vec<S>,
    pub jumps: Vec<JumpRecord<S>>,
}

impl<S> Trajectory<S> {
    pub fn last(&self) -> &S {
        self.states.last().expect("trajectory has at least one node")
    }
}

/// Integrates `rhs` along `grid`, applying `jump` atomically whenever a grid
/// node equals one of `jump_times`. The jump sees the state on arrival (for
/// backward runs this yields the left limit). `rhs` receives the number of
/// jumps applied so far as its context.
pub fn integrate_with_jumps<S, F, J>(
    state0: S,
    grid: &IntegrationGrid,
    jump_times: &[f64],
    mut rhs: F,
    mut jump: J,
) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(&S, f64, usize) -> Result<S>,
    J: FnMut(usize, f64, S) -> Result<S>,
{
    let times = grid.times();
    let mut order: Vec<usize> = (0..jump_times.len()).collect();
    match grid.direction() {
        Direction::Forward => order.sort_by(|&a, &b| jump_times[a].total_cmp(&jump_times[b])),
        Direction::Backward => order.sort_by(|&a, &b| jump_times[b].total_cmp(&jump_times[a])),
    }
    let mut pending = order.into_iter().peekable();
    let mut traj = Trajectory { times: times.to_vec(), states: Vec::with_capacity(times.len()), jumps: Vec::new() };
    let mut y = state0;
    let mut ctx = 0usize;
    for (n, &t) in times.iter().enumerate() {
        if n > 0 {
            let prev = times[n - 1];
            y = rk4_step(&y, prev, t - prev, ctx, &mut rhs)?;
        }
        while let Some(&k) = pending.peek() {
            if jump_times[k] != t {
                break;
            }
            pending.next();
            let pre = y.clone();
            let post = jump(k, t, y)?;
            if !post.is_finite() {
                return Err(Error::IntegrationDiverged { t });
            }
            traj.jumps.push(JumpRecord { index: k, t, pre, post: post.clone() });
            y = post;
            ctx += 1;
        }
        traj.states.push(y.clone());
    }
    if let Some(k) = pending.next() {
        return Err(Error::InvalidArgument(format!(
            "jump time {} is not a grid node",
            jump_times[k]
        )));
    }
    Ok(traj)
}
