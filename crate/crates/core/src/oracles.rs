//! Ground-truth marked point processes with closed-form likelihoods.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::data::{inject_missing_mcar, Dataset, Event, EventSequence};
use crate::error::{Error, Result};
use crate::exec::map_range;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    Homogeneous { rate: f64 },
    /// `λ(t) = mu + amp · sin(2πt / period)`.
    Sinusoidal { mu: f64, amp: f64, period: f64 },
    /// `λ(t) = mu + Σ_{tᵢ<t} alpha · exp(−beta (t − tᵢ))`.
    Hawkes { mu: f64, alpha: f64, beta: f64 },
}

impl OracleKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match *self {
            OracleKind::Homogeneous { rate } if !(rate > 0.0) => bad("rate must be positive"),
            OracleKind::Sinusoidal { mu, amp, period } if !(amp >= 0.0 && amp < mu && period > 0.0) => {
                bad("sinusoidal oracle needs 0 <= amp < mu and period > 0")
            }
            OracleKind::Hawkes { mu, alpha, beta } if !(mu > 0.0 && alpha >= 0.0 && beta > 0.0) => {
                bad("hawkes oracle needs mu > 0, alpha >= 0, beta > 0")
            }
            OracleKind::Hawkes { alpha, beta, .. } if alpha >= beta => {
                bad("hawkes oracle is unstable unless alpha < beta")
            }
            _ => Ok(()),
        }
    }

    /// Intensity at `t` given the event times strictly before `t`.
    pub fn intensity(&self, t: f64, history: &[f64]) -> f64 {
        match *self {
            OracleKind::Homogeneous { rate } => rate,
            OracleKind::Sinusoidal { mu, amp, period } => mu + amp * (2.0 * PI * t / period).sin(),
            OracleKind::Hawkes { mu, alpha, beta } => {
                mu + history.iter().filter(|&&s| s < t).map(|s| alpha * (-beta * (t - s)).exp()).sum::<f64>()
            }
        }
    }

    /// `∫₀ᵀ λ` for the given realization.
    pub fn compensator(&self, times: &[f64], horizon: f64) -> f64 {
        match *self {
            OracleKind::Homogeneous { rate } => rate * horizon,
            OracleKind::Sinusoidal { mu, amp, period } => {
                mu * horizon + amp * period / (2.0 * PI) * (1.0 - (2.0 * PI * horizon / period).cos())
            }
            OracleKind::Hawkes { mu, alpha, beta } => {
                mu * horizon + alpha / beta * times.iter().map(|t| 1.0 - (-beta * (horizon - t)).exp()).sum::<f64>()
            }
        }
    }

    /// Exact temporal log-likelihood `Σ log λ(tᵢ) − ∫λ`.
    pub fn log_likelihood(&self, times: &[f64], horizon: f64) -> f64 {
        let s: f64 = times.iter().enumerate().map(|(i, &t)| self.intensity(t, &times[..i]).ln()).sum();
        s - self.compensator(times, horizon)
    }

    /// Event times on `[0, horizon]`.
    pub fn simulate<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        match *self {
            OracleKind::Homogeneous { rate } => {
                let exp = Exp::new(rate).expect("positive rate");
                let mut t = 0.0;
                loop {
                    t += exp.sample(rng);
                    if t > horizon {
                        break;
                    }
                    out.push(t);
                }
            }
            OracleKind::Sinusoidal { mu, amp, .. } => {
                let bound = mu + amp;
                let exp = Exp::new(bound).expect("positive bound");
                let mut t = 0.0;
                loop {
                    t += exp.sample(rng);
                    if t > horizon {
                        break;
                    }
                    if rng.random::<f64>() * bound <= self.intensity(t, &out) {
                        out.push(t);
                    }
                }
            }
            OracleKind::Hawkes { .. } => {
                // The intensity only decays between events, so its value just
                // after the current time bounds it until the next acceptance.
                let mut t = 0.0;
                loop {
                    let bound = self.intensity(t, &out) + if out.last() == Some(&t) { self.jump() } else { 0.0 };
                    t += Exp::new(bound).expect("positive bound").sample(rng);
                    if t > horizon {
                        break;
                    }
                    if rng.random::<f64>() * bound <= self.intensity(t, &out) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    fn jump(&self) -> f64 {
        match *self {
            OracleKind::Hawkes { alpha, .. } => alpha,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub horizon: f64,
    /// Designed correlation between time and each feature; its length is D.
    pub rho: Vec<f64>,
    /// MCAR probability per cell.
    pub missing_rate: f64,
}

impl OracleSpec {
    pub fn new(kind: OracleKind, horizon: f64, rho: Vec<f64>) -> Self {
        OracleSpec { kind, horizon, rho, missing_rate: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if self.rho.is_empty() || self.rho.iter().any(|r| !(r.abs() <= 1.0)) {
            return Err(Error::InvalidArgument("need at least one feature with |rho| <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidArgument("missing rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n` sequences. Marks are `x_j = ρ_j τ + √(1 − ρ_j²) ε` with `τ` the event
/// time standardized by the pooled event-time moments of the whole batch.
pub fn generate(spec: &OracleSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let times: Vec<Vec<f64>> = map_range(n, |i| spec.kind.simulate(spec.horizon, &mut stream(seed, i as u64)));
    let pooled: Vec<f64> = times.iter().flatten().copied().collect();
    let (mean, sd) = if pooled.len() >= 2 {
        let m = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let v = pooled.iter().map(|t| (t - m).powi(2)).sum::<f64>() / pooled.len() as f64;
        (m, v.sqrt().max(1e-12))
    } else {
        (spec.horizon / 2.0, spec.horizon / 12f64.sqrt())
    };
    let seqs = map_range(n, |i| {
        let mut rng = stream(seed, (1 << 32) + i as u64);
        let events = times[i]
            .iter()
            .map(|&t| {
                let tau = (t - mean) / sd;
                let x = spec
                    .rho
                    .iter()
                    .map(|&r| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        r * tau + (1.0 - r * r).sqrt() * e
                    })
                    .collect();
                Event::complete(t, x)
            })
            .collect();
        EventSequence::new(spec.horizon, spec.dim(), events)
    });
    let ds = Dataset::new(seqs.into_iter().collect::<Result<_>>()?)?;
    if spec.missing_rate > 0.0 {
        inject_missing_mcar(&ds, spec.missing_rate, seed ^ 0x6d63_6172)
    } else {
        Ok(ds)
    }
}

pub fn gen_homogeneous(rate: f64, horizon: f64, rho: Vec<f64>, n: usize, seed: u64) -> Result<Dataset> {
    generate(&OracleSpec::new(OracleKind::Homogeneous { rate }, horizon, rho), n, seed)
}

pub fn gen_sinusoidal(mu: f64, amp: f64, period: f64, horizon: f64, rho: Vec<f64>, n: usize, seed: u64) -> Result<Dataset> {
    generate(&OracleSpec::new(OracleKind::Sinusoidal { mu, amp, period }, horizon, rho), n, seed)
}

pub fn gen_hawkes(mu: f64, alpha: f64, beta: f64, horizon: f64, rho: Vec<f64>, n: usize, seed: u64) -> Result<Dataset> {
    generate(&OracleSpec::new(OracleKind::Hawkes { mu, alpha, beta }, horizon, rho), n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(ds: &Dataset) -> (f64, f64) {
        let c: Vec<f64> = ds.sequences.iter().map(|s| s.len() as f64).collect();
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
        (m, v)
    }

    #[test]
    fn homogeneous_moments() {
        let ds = gen_homogeneous(2.0, 10.0, vec![0.0], 2000, 1).unwrap();
        let (m, v) = counts(&ds);
        assert!((m - 20.0).abs() < 0.5, "{m}");
        assert!((v - 20.0).abs() < 2.0, "{v}");
    }

    #[test]
    fn zero_amplitude_matches_homogeneous() {
        let a = OracleKind::Sinusoidal { mu: 2.0, amp: 0.0, period: 3.0 };
        let b = OracleKind::Homogeneous { rate: 2.0 };
        let times = [0.5, 1.0, 2.5];
        assert!((a.log_likelihood(&times, 4.0) - b.log_likelihood(&times, 4.0)).abs() < 1e-12);
        let ds = gen_sinusoidal(2.0, 0.0, 10.0, 10.0, vec![0.0], 2000, 2).unwrap();
        assert!((counts(&ds).0 - 20.0).abs() < 0.5);
    }

    #[test]
    fn sinusoid_full_period_count() {
        let k = OracleKind::Sinusoidal { mu: 2.0, amp: 1.0, period: 10.0 };
        assert!((k.compensator(&[], 10.0) - 20.0).abs() < 1e-12);
        let ds = gen_sinusoidal(2.0, 1.0, 10.0, 10.0, vec![0.0], 2000, 3).unwrap();
        assert!((counts(&ds).0 - 20.0).abs() < 0.5);
    }

    #[test]
    fn sinusoid_histogram_tracks_intensity() {
        let ds = gen_sinusoidal(2.0, 1.5, 10.0, 10.0, vec![0.0], 4000, 4).unwrap();
        let mut hist = [0.0; 20];
        for t in ds.sequences.iter().flat_map(|s| s.times()) {
            hist[((t / 0.5) as usize).min(19)] += 1.0;
        }
        let lam: Vec<f64> = (0..20).map(|b| 2.0 + 1.5 * (2.0 * PI * (b as f64 + 0.5) * 0.5 / 10.0).sin()).collect();
        // Spearman correlation by rank
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let (ra, rb) = (rank(&hist), rank(&lam));
        let n = 20.0;
        let d2: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - b).powi(2)).sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!(rho > 0.9, "{rho}");
    }

    #[test]
    fn hawkes_stationary_rate_and_overdispersion() {
        let k = OracleKind::Hawkes { mu: 1.0, alpha: 0.5, beta: 1.0 };
        let mut rng = stream(5, 0);
        let horizon = 20000.0;
        let n = k.simulate(horizon, &mut rng).len() as f64;
        assert!((n / horizon - 2.0).abs() < 0.1, "{}", n / horizon);
        let ds = gen_hawkes(1.0, 0.5, 1.0, 10.0, vec![0.0], 2000, 6).unwrap();
        let (m, v) = counts(&ds);
        assert!(v > m, "{v} <= {m}");
        let zero = gen_hawkes(1.5, 0.0, 1.0, 10.0, vec![0.0], 2000, 7).unwrap();
        assert!((counts(&zero).0 - 15.0).abs() < 0.5);
    }

    #[test]
    fn instability_rejected() {
        assert!(gen_hawkes(1.0, 1.0, 1.0, 10.0, vec![0.0], 1, 0).is_err());
        assert!(gen_sinusoidal(1.0, 1.0, 1.0, 10.0, vec![0.0], 1, 0).is_err());
    }

    #[test]
    fn deterministic_and_valid() {
        let mut spec = OracleSpec::new(OracleKind::Hawkes { mu: 1.0, alpha: 0.3, beta: 1.0 }, 5.0, vec![0.5, 0.0]);
        spec.missing_rate = 0.3;
        let a = generate(&spec, 50, 11).unwrap();
        let b = generate(&spec, 50, 11).unwrap();
        assert_eq!(a, b);
        for s in &a.sequences {
            // re-validating through the constructor
            EventSequence::new(s.t_max(), s.dim(), s.events().to_vec()).unwrap();
        }
    }
}
