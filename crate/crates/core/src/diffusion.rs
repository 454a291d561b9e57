//! Denoising diffusion over latent vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{DropoutPlan, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    /// `beta[k - 1]` is β_k for k = 1..=L.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { beta, alpha_bar })
    }

    /// `steps` values evenly spaced from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let beta = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(beta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::StepOutOfRange { k, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k - 1]
    }

    /// ᾱ_k, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// Posterior variance `β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k)`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }
}

/// Sinusoidal features of the step index.
pub fn step_embedding(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
        out.push((k as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
        out.push((k as f64 * freq).cos());
    }
    out
}

/// Anything that predicts the injected noise from `(h_k, k)`.
pub trait NoisePredictor: Sync {
    fn predict<'t>(&self, tape: &'t Tape<'t>, h: Var<'t>, k: usize, plan: &DropoutPlan) -> Var<'t>;
}

/// `ε_q(h, k)`: an MLP over `h ⊕ emb(k)`.
#[derive(Debug, Clone)]
pub struct NoiseNet {
    pub mlp: Mlp,
    pub embedding: usize,
}

impl NoiseNet {
    pub fn register<R: Rng + ?Sized>(
        ps: &mut ParameterStore,
        name: &str,
        dim: usize,
        hidden: usize,
        embedding: usize,
        rng: &mut R,
    ) -> Self {
        let mlp = Mlp::register(ps, name, &[dim + embedding, hidden, hidden, dim], true, 1.0, rng);
        NoiseNet { mlp, embedding }
    }
}

impl NoisePredictor for NoiseNet {
    fn predict<'t>(&self, tape: &'t Tape<'t>, h: Var<'t>, k: usize, plan: &DropoutPlan) -> Var<'t> {
        let emb = tape.constant(step_embedding(k, self.embedding));
        self.mlp.forward(tape, tape.concat(&[h, emb]), plan.get(&self.mlp))
    }
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `√ᾱ_k h₀ + √(1 − ᾱ_k) ε`.
pub fn q_sample<'t>(h0: Var<'t>, k: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Var<'t>> {
    sched.check(k)?;
    let ab = sched.alpha_bar(k);
    let noise = h0.tape().constant(eps.to_vec());
    Ok(h0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), noise))
}

/// Plain-value version of [`q_sample`].
pub fn q_sample_values(h0: &[f64], k: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(k)?;
    let ab = sched.alpha_bar(k);
    Ok(h0.iter().zip(eps).map(|(h, e)| ab.sqrt() * h + (1.0 - ab).sqrt() * e).collect())
}

/// `‖ε − ε_q(h_k, k)‖²` at a uniformly drawn step.
pub fn diffusion_loss<'t, N: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    h0: Var<'t>,
    sched: &DiffusionSchedule,
    net: &N,
    plan: &DropoutPlan,
    rng: &mut R,
) -> Var<'t> {
    diffusion_loss_mean(h0, sched, net, plan, 1, rng)
}

/// Mean of [`diffusion_loss`] over `draws` independent `(k, ε)` pairs.
pub fn diffusion_loss_mean<'t, N: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    h0: Var<'t>,
    sched: &DiffusionSchedule,
    net: &N,
    plan: &DropoutPlan,
    draws: usize,
    rng: &mut R,
) -> Var<'t> {
    let steps = Uniform::new_inclusive(1, sched.steps()).expect("non-empty schedule");
    let terms: Vec<Var<'t>> = (0..draws.max(1))
        .map(|_| {
            let k = steps.sample(rng);
            let eps = standard_normal(h0.len(), rng);
            diffusion_loss_at(h0, k, &eps, sched, net, plan).expect("k drawn in range")
        })
        .collect();
    let tape = h0.tape();
    tape.sum_all(&terms).expect("at least one draw").scale(1.0 / terms.len() as f64)
}

pub fn diffusion_loss_at<'t, N: NoisePredictor + ?Sized>(
    h0: Var<'t>,
    k: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
    net: &N,
    plan: &DropoutPlan,
) -> Result<Var<'t>> {
    let tape = h0.tape();
    let hk = q_sample(h0, k, eps, sched)?;
    let pred = net.predict(tape, hk, k, plan);
    Ok((tape.constant(eps.to_vec()) - pred).sq_norm())
}

/// One reverse step. `z` is the injected noise; it is ignored at `k = 1`.
pub fn denoise_step_with<N: NoisePredictor + ?Sized>(
    ps: &ParameterStore,
    hk: &[f64],
    k: usize,
    z: &[f64],
    sched: &DiffusionSchedule,
    net: &N,
) -> Result<Vec<f64>> {
    sched.check(k)?;
    let tape = Tape::new(ps);
    let eps = net.predict(&tape, tape.constant(hk.to_vec()), k, &DropoutPlan::none()).value();
    let coef = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
    let inv = 1.0 / sched.alpha(k).sqrt();
    let sd = if k > 1 { sched.posterior_variance(k).sqrt() } else { 0.0 };
    Ok(hk
        .iter()
        .zip(&eps)
        .zip(z)
        .map(|((h, e), z)| inv * (h - coef * e) + sd * z)
        .collect())
}

pub fn denoise_step<N: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    ps: &ParameterStore,
    hk: &[f64],
    k: usize,
    sched: &DiffusionSchedule,
    net: &N,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let z = if k > 1 { standard_normal(hk.len(), rng) } else { vec![0.0; hk.len()] };
    denoise_step_with(ps, hk, k, &z, sched, net)
}

/// Ancestral sampling from `h_L ~ N(0, I)` down to `h₀`.
pub fn sample_latent<N: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    ps: &ParameterStore,
    dim: usize,
    sched: &DiffusionSchedule,
    net: &N,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut h = standard_normal(dim, rng);
    for k in (1..=sched.steps()).rev() {
        h = denoise_step(ps, &h, k, sched, net, rng)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts a fixed vector regardless of input.
    struct Fixed(Vec<f64>);

    impl NoisePredictor for Fixed {
        fn predict<'t>(&self, tape: &'t Tape<'t>, _h: Var<'t>, _k: usize, _plan: &DropoutPlan) -> Var<'t> {
            tape.constant(self.0.clone())
        }
    }

    #[test]
    fn two_step_product() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        let h = q_sample_values(&[1.0], 2, &[1.0], &s).unwrap();
        assert!((h[0] - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_monotone() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for k in 1..=1000 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1) && s.alpha_bar(k) > 0.0);
        }
        // tiny β at k = 1 leaves h nearly untouched
        let h = q_sample_values(&[3.0], 1, &[0.5], &s).unwrap();
        assert!((h[0] - 3.0).abs() < 0.01);
    }

    #[test]
    fn step_range_checked() {
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(q_sample_values(&[0.0], 0, &[0.0], &s), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(q_sample_values(&[0.0], 11, &[0.0], &s), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn exact_noise_oracle_has_zero_loss() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let s = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let eps = vec![0.3, -1.1, 0.7];
        let h0 = tape.constant(vec![1.0, 2.0, 3.0]);
        let loss = diffusion_loss_at(h0, 17, &eps, &s, &Fixed(eps.clone()), &DropoutPlan::none()).unwrap();
        assert_eq!(loss.scalar(), 0.0);
    }

    #[test]
    fn null_net_loss_is_chi_square() {
        let ps = ParameterStore::new();
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let n = 20000;
        let mut total = 0.0;
        for _ in 0..n {
            let tape = Tape::new(&ps);
            let h0 = tape.constant(vec![0.5; dim]);
            total += diffusion_loss(h0, &s, &Fixed(vec![0.0; dim]), &DropoutPlan::none(), &mut rng).scalar();
        }
        // chi-square(8): mean 8, sd of the average sqrt(16 / 20000)
        assert!((total / n as f64 - dim as f64).abs() < 0.15);
    }

    #[test]
    fn zero_prediction_mean_and_terminal_step() {
        let ps = ParameterStore::new();
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let h = denoise_step_with(&ps, &[1.0, -2.0], 3, &[0.0, 0.0], &s, &Fixed(vec![0.0, 0.0])).unwrap();
        assert!((h[0] - 1.0 / 0.7f64.sqrt()).abs() < 1e-15);
        assert!((h[1] + 2.0 / 0.7f64.sqrt()).abs() < 1e-15);
        let a = denoise_step_with(&ps, &[1.0], 1, &[5.0], &s, &Fixed(vec![0.0])).unwrap();
        let b = denoise_step_with(&ps, &[1.0], 1, &[-5.0], &s, &Fixed(vec![0.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_collapse_keeps_initial_draw() {
        let ps = ParameterStore::new();
        let s = DiffusionSchedule::from_betas(vec![1e-12; 20]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let out = sample_latent(&ps, 3, &s, &Fixed(vec![0.0; 3]), &mut r1).unwrap();
        let init = standard_normal(3, &mut r2);
        for (a, b) in out.iter().zip(&init) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterStore::new();
        let net = NoiseNet::register(&mut ps, "eps", 2, 8, 4, &mut rng);
        let s = DiffusionSchedule::linear(30, 1e-4, 0.02).unwrap();
        let a = sample_latent(&ps, 2, &s, &net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_latent(&ps, 2, &s, &net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParameterStore::new();
        let net = NoiseNet::register(&mut ps, "eps", 2, 2, 4, &mut rng);
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let report = check_gradients(&ps, 1e-6, 64, |tape| {
            let h0 = tape.constant(vec![0.4, -0.9]);
            diffusion_loss_at(h0, 37, &[0.2, 1.3], &s, &net, &DropoutPlan::none())
        })
        .unwrap();
        let (name, err) = report.worst();
        assert!(err < 1e-4, "{name}: {err}");
    }
}
