//! Sequence likelihood, the four-part training loss, and the optimization loop.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainConfig};
use crate::data::{standardize, Dataset, Event, EventSequence};
use crate::diffusion::{diffusion_loss_mean, q_sample, standard_normal};
use crate::error::{Error, Result};
use crate::exec::map_slice;
use crate::model::Model;
use crate::nn::DropoutPlan;
use crate::ode::{integrate_with_jumps, IntegrationGrid};

/// Per-event pieces of the sequence log-likelihood.
#[derive(Debug, Clone)]
pub struct LogLikTerms<'t> {
    pub log_lambda: Vec<Var<'t>>,
    pub log_p: Vec<Var<'t>>,
    /// `∫₀^T λ`.
    pub integral: Var<'t>,
}

fn sum<'t>(tape: &'t Tape<'t>, parts: &[Var<'t>]) -> Var<'t> {
    tape.sum_all(parts).unwrap_or_else(|| tape.scalar(0.0))
}

impl<'t> LogLikTerms<'t> {
    /// `Σ log λ(tᵢ) − ∫λ`.
    pub fn temporal(&self) -> Var<'t> {
        sum(self.integral.tape(), &self.log_lambda) - self.integral
    }

    /// `Σ log p(xᵢ | tᵢ)` over observed coordinates.
    pub fn feature(&self) -> Var<'t> {
        sum(self.integral.tape(), &self.log_p)
    }

    pub fn events(&self) -> usize {
        self.log_lambda.len()
    }

    /// Negative sequence log-likelihood.
    pub fn nll(&self) -> Var<'t> {
        -(self.temporal() + self.feature())
    }
}

/// Likelihood terms of `seq` under the model, teacher-forced from latent `s`.
pub fn loglik_terms<'t>(
    model: &Model,
    tape: &'t Tape<'t>,
    seq: &EventSequence,
    s: Var<'t>,
    plan: &DropoutPlan,
) -> Result<(LogLikTerms<'t>, Vec<Var<'t>>)> {
    let path = model.decode_teacher_forced(tape, s, seq, plan)?;
    let mut log_lambda = Vec::with_capacity(seq.len());
    let mut log_p = Vec::with_capacity(seq.len());
    for (e, &o) in seq.events().iter().zip(&path.event_states) {
        log_lambda.push(model.decoder.intensity(tape, o).ln());
        log_p.push(model.decoder.obs_logprob(tape, &e.x, &e.mask, o)?);
    }
    let terms = LogLikTerms { log_lambda, log_p, integral: path.total_integral() };
    Ok((terms, path.event_states))
}

/// Likelihood terms for a known intensity function and per-event mark
/// log-density, with `∫λ` computed by the same RK4 quadrature as the decoder.
pub fn reference_terms<'t>(
    tape: &'t Tape<'t>,
    seq: &EventSequence,
    h: f64,
    lambda: impl Fn(f64, &[f64]) -> f64,
    log_p: impl Fn(&Event) -> f64,
) -> Result<LogLikTerms<'t>> {
    let times = seq.times();
    let grid = IntegrationGrid::new(0.0, seq.t_max(), &times, h)?;
    let traj = integrate_with_jumps(
        vec![0.0],
        &grid,
        &times,
        |_: &Vec<f64>, t, ctx| Ok(vec![lambda(t, &times[..ctx])]),
        |_, _, s| Ok(s),
    )?;
    let log_lambda = seq
        .events()
        .iter()
        .enumerate()
        .map(|(i, e)| tape.scalar(lambda(e.t, &times[..i]).ln()))
        .collect();
    let log_p = seq.events().iter().map(|e| tape.scalar(log_p(e))).collect();
    Ok(LogLikTerms { log_lambda, log_p, integral: tape.scalar(traj.last()[0]) })
}

pub fn sequence_nll<'t>(terms: &LogLikTerms<'t>) -> Var<'t> {
    terms.nll()
}

/// Loss components for one sequence or averaged over many.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(parts: [f64; 4], w: [f64; 4]) -> Self {
        let total = parts.iter().zip(&w).map(|(p, w)| p * w).sum();
        LossBreakdown { l1: parts[0], l2: parts[1], l3: parts[2], l4: parts[3], total }
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.l1 += o.l1;
        self.l2 += o.l2;
        self.l3 += o.l3;
        self.l4 += o.l4;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.l1 *= f;
        self.l2 *= f;
        self.l3 *= f;
        self.l4 *= f;
        self.total *= f;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.l2, self.l3, self.l4, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SequenceLoss<'t> {
    pub l1: Var<'t>,
    pub l2: Var<'t>,
    pub l3: Var<'t>,
    pub l4: Var<'t>,
    pub total: Var<'t>,
}

impl SequenceLoss<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1.scalar(),
            l2: self.l2.scalar(),
            l3: self.l3.scalar(),
            l4: self.l4.scalar(),
            total: self.total.scalar(),
        }
    }
}

/// `(t_N (1 + δ) − μ_t)²`.
pub fn horizon_loss<'t>(t_last: f64, delta: f64, mu: Var<'t>) -> Var<'t> {
    let d = mu.tape().scalar(t_last * (1.0 + delta)) - mu;
    d * d
}

/// Bernoulli cross-entropy of observed-indicators against `sigmoid(logits)`,
/// summed over coordinates: `Σ softplus(z) − m·z`.
pub fn missingness_loss<'t>(logits: Var<'t>, mask: &[bool]) -> Var<'t> {
    let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let tape = logits.tape();
    (logits.softplus() - logits * tape.constant(m)).sum()
}

/// All four loss terms for one standardized sequence.
pub fn hybrid_loss<'t, R: rand::Rng + ?Sized>(
    model: &Model,
    tape: &'t Tape<'t>,
    seq: &EventSequence,
    weights: [f64; 4],
    plan: &DropoutPlan,
    rng: &mut R,
) -> Result<SequenceLoss<'t>> {
    let cfg = &model.config;
    let s = model.encode(tape, seq, plan)?;
    let l2 = diffusion_loss_mean(s, &model.schedule, &model.noise, plan, cfg.diffusion_draws, rng);
    let s_dec = if cfg.k_reg > 0 {
        let eps = standard_normal(s.len(), rng);
        q_sample(s, cfg.k_reg, &eps, &model.schedule)?
    } else {
        s
    };
    let (terms, states) = loglik_terms(model, tape, seq, s_dec, plan)?;
    let l1 = terms.nll();
    let l3 = if seq.is_empty() {
        tape.scalar(0.0)
    } else {
        horizon_loss(seq.last_time(), cfg.delta, model.decoder.horizon_mean(tape, s, model.time_scale, plan))
    };
    let l4_parts: Vec<Var<'t>> = seq
        .events()
        .iter()
        .zip(&states)
        .map(|(e, &o)| {
            let z = model.decoder.missing_logits(tape, o, e.t, model.time_scale, plan);
            missingness_loss(z, &e.mask)
        })
        .collect();
    let l4 = sum(tape, &l4_parts);
    let total = l1.scale(weights[0]) + l2.scale(weights[1]) + l3.scale(weights[2]) + l4.scale(weights[3]);
    Ok(SequenceLoss { l1, l2, l3, l4, total })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Owns a model and its optimizer schedule. All randomness is derived from
/// `(seed, epoch, sequence index)`, so runs are reproducible and a resumed
/// run continues exactly where the saved one stopped.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: Config) -> Self {
        Trainer { model, config, epoch: 0 }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Trainer { model: ck.restore()?, config: ck.config.clone(), epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.config, self.epoch)
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.config.train
    }

    /// Loss and parameter gradients for sequence `index` in the current epoch.
    pub fn sequence_gradient(&self, seq: &EventSequence, index: usize) -> Result<(LossBreakdown, Gradients)> {
        let tc = self.train_cfg();
        let mut rng = stream_rng(tc.seed, ((self.epoch as u64 + 1) << 32) | index as u64);
        let plan = self.model.dropout_plan(tc.dropout, &mut rng);
        let tape = Tape::new(&self.model.params);
        let loss = hybrid_loss(&self.model, &tape, seq, tc.loss_weights, &plan, &mut rng)?;
        let b = loss.breakdown();
        if !b.is_finite() {
            return Err(Error::NanLoss { sequence: index });
        }
        let grads = tape.backward(loss.total)?.params;
        Ok((b, grads))
    }

    /// One optimizer update on the given sequence indices.
    pub fn step(&mut self, ds: &Dataset, batch: &[usize]) -> Result<LossBreakdown> {
        let results = map_slice(batch, |_, &i| {
            self.sequence_gradient(&ds.sequences[i], i).map_err(|e| match e {
                Error::NanGradient { .. } | Error::IntegrationDiverged { .. } => Error::NanLoss { sequence: i },
                other => other,
            })
        });
        let mut grads = self.model.params.zero_gradients();
        let mut mean = LossBreakdown::default();
        for r in results {
            let (b, g) = r?;
            grads.accumulate(&g);
            mean.add(&b);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        grads.clip_global_norm(self.train_cfg().grad_clip);
        let adam = AdamConfig { lr: self.train_cfg().lr, ..AdamConfig::default() };
        self.model.params.adam_step(&grads, &adam)?;
        Ok(mean.scaled(inv))
    }

    /// Batch order for the current epoch.
    pub fn epoch_batches(&self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.train_cfg().seed, self.epoch as u64));
        order.chunks(self.train_cfg().batch_size).map(|c| c.to_vec()).collect()
    }

    /// One pass over a standardized dataset; returns the mean breakdown.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<LossBreakdown> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = LossBreakdown::default();
        for batch in self.epoch_batches(ds.len()) {
            let b = self.step(ds, &batch)?;
            total.add(&b.scaled(batch.len() as f64));
        }
        self.epoch += 1;
        Ok(total.scaled(1.0 / ds.len() as f64))
    }

    /// Mean loss over a dataset at the current parameters, without dropout
    /// or updates. Randomness in the diffusion term comes from `seed`.
    pub fn evaluate_loss(&self, ds: &Dataset, seed: u64) -> Result<LossBreakdown> {
        let w = self.train_cfg().loss_weights;
        let parts = map_slice(&ds.sequences, |i, seq| {
            let mut rng = stream_rng(seed, i as u64);
            let tape = Tape::new(&self.model.params);
            hybrid_loss(&self.model, &tape, seq, w, &DropoutPlan::none(), &mut rng).map(|l| l.breakdown())
        });
        let mut total = LossBreakdown::default();
        for p in parts {
            total.add(&p?);
        }
        Ok(total.scaled(1.0 / ds.len() as f64))
    }
}

/// CSV header of the per-epoch metrics log.
pub const METRICS_HEADER: &str = "epoch,L1,L2,L3,L4,total";

pub fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".metrics.csv");
    ckpt.with_file_name(name)
}

/// Fits standardization when the data is still raw.
pub fn prepare(ds: &Dataset) -> Result<Dataset> {
    if ds.standardization.is_some() {
        Ok(ds.clone())
    } else {
        standardize(ds)
    }
}

/// Full training run: fresh model, per-epoch metrics CSV next to `out`,
/// checkpoints every `checkpoint_every` epochs and at the end.
pub fn train(raw: &Dataset, config: &Config, out: &Path) -> Result<Trainer> {
    let ds = prepare(raw)?;
    let model = Model::for_dataset(config.model.clone(), &ds, config.train.seed)?;
    let mut trainer = Trainer::new(model, config.clone());
    run(&mut trainer, &ds, out, false)?;
    Ok(trainer)
}

/// Continues a trainer up to `config.train.epochs`, appending to the metrics
/// log when `append` is set.
pub fn run(trainer: &mut Trainer, ds: &Dataset, out: &Path, append: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(metrics_path(out))?;
    let mut csv = BufWriter::new(file);
    if !append {
        writeln!(csv, "{METRICS_HEADER}")?;
    }
    let every = trainer.config.train.checkpoint_every;
    while trainer.epoch < trainer.config.train.epochs {
        let b = trainer.train_epoch(ds)?;
        writeln!(csv, "{},{},{},{},{},{}", trainer.epoch, b.l1, b.l2, b.l3, b.l4, b.total)?;
        csv.flush()?;
        log::info!("epoch {} total {:.4}", trainer.epoch, b.total);
        if every > 0 && trainer.epoch.is_multiple_of(every) {
            trainer.checkpoint().save(out)?;
        }
    }
    trainer.checkpoint().save(out)?;
    Ok(())
}

/// Means over consecutive non-overlapping windows of `width` values.
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values.chunks_exact(width).map(|c| c.iter().sum::<f64>() / width as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, ParameterStore};
    use crate::config::{ModelConfig, StepSize};

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model = ModelConfig {
            hidden: 5,
            embed: 2,
            attention_layers: 2,
            diffusion_steps: 20,
            diffusion_hidden: 5,
            step_embedding: 4,
            k_reg: 2,
            solver_h: StepSize::Fixed(0.25),
            ..ModelConfig::default()
        };
        c.train.batch_size = 2;
        c.train.epochs = 2;
        c
    }

    fn toy() -> Dataset {
        let a = EventSequence::new(
            2.0,
            2,
            vec![Event::from_options(0.5, &[Some(0.3), None]), Event::from_options(1.25, &[Some(-0.4), Some(1.1)])],
        )
        .unwrap();
        let b = EventSequence::new(2.0, 2, vec![Event::from_options(0.75, &[Some(1.0), Some(-0.6)])]).unwrap();
        let c = EventSequence::new(2.0, 2, vec![Event::from_options(1.5, &[None, Some(0.2)])]).unwrap();
        Dataset::new(vec![a, b, c]).unwrap()
    }

    fn tiny_model(ds: &Dataset) -> Model {
        Model::for_dataset(tiny_config().model, ds, 1).unwrap()
    }

    #[test]
    fn homogeneous_closed_form() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let seq = EventSequence::new(
            2.0,
            1,
            vec![Event::complete(0.3, vec![0.0]), Event::complete(0.9, vec![0.0]), Event::complete(1.6, vec![0.0])],
        )
        .unwrap();
        let t = reference_terms(&tape, &seq, 0.1, |_, _| 1.5, |_| 0.0).unwrap();
        assert!((t.temporal().scalar() - (3.0 * 1.5f64.ln() - 3.0)).abs() < 1e-12);
        assert!((t.temporal().scalar() + 1.78361).abs() < 1e-5);
        let empty = EventSequence::new(4.0, 1, vec![]).unwrap();
        let t = reference_terms(&tape, &empty, 0.1, |_, _| 0.7, |_| 0.0).unwrap();
        assert!((t.temporal().scalar() + 2.8).abs() < 1e-12);
    }

    #[test]
    fn horizon_and_missing_terms() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        assert_eq!(horizon_loss(10.0, 0.05, tape.scalar(10.5)).scalar(), 0.0);
        let l = missingness_loss(tape.constant(vec![0.0]), &[true]).scalar();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let b = LossBreakdown::weighted([1.0; 4], [0.4, 0.4, 0.1, 0.1]);
        assert!((b.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn losses_are_nonnegative() {
        let ds = standardize(&toy()).unwrap();
        let model = tiny_model(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seq in &ds.sequences {
            let tape = Tape::new(&model.params);
            let l = hybrid_loss(&model, &tape, seq, [0.4, 0.4, 0.1, 0.1], &DropoutPlan::none(), &mut rng).unwrap();
            assert!(l.l3.scalar() >= 0.0 && l.l4.scalar() >= 0.0 && l.l2.scalar() >= 0.0);
        }
    }

    #[test]
    fn every_term_matches_finite_differences() {
        let ds = standardize(&toy()).unwrap();
        let model = tiny_model(&ds);
        let seq = &ds.sequences[0];
        for term in 0..4 {
            let mut w = [0.0; 4];
            w[term] = 1.0;
            let report = check_gradients(&model.params, 1e-6, 12, |tape| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                Ok(hybrid_loss(&model, tape, seq, w, &DropoutPlan::none(), &mut rng)?.total)
            })
            .unwrap();
            let (name, err) = report.worst();
            assert!(err < 1e-3, "term {term}: {name}: {err}");
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let ds = standardize(&toy()).unwrap();
        let mut cfg = tiny_config();
        cfg.train.loss_weights = [0.0; 4];
        let mut tr = Trainer::new(tiny_model(&ds), cfg);
        let before = tr.model.params.params().to_vec();
        tr.step(&ds, &[0, 1]).unwrap();
        assert_eq!(tr.model.params.params(), &before[..]);
    }

    #[test]
    fn disabled_diffusion_weight_freezes_noise_net() {
        let ds = standardize(&toy()).unwrap();
        let mut cfg = tiny_config();
        cfg.train.loss_weights = [0.4, 0.0, 0.1, 0.1];
        let mut tr = Trainer::new(tiny_model(&ds), cfg);
        let before = tr.model.params.clone();
        tr.step(&ds, &[0, 1, 2]).unwrap();
        for (a, b) in before.params().iter().zip(tr.model.params.params()) {
            if a.name.starts_with("eps.") {
                assert_eq!(a, b);
            } else if a.name == "dec.lambda" {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let ds = standardize(&toy()).unwrap();
        let mut a = Trainer::new(tiny_model(&ds), tiny_config());
        a.train_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        a.checkpoint().save(&path).unwrap();
        let mut b = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let la = a.train_epoch(&ds).unwrap();
        let lb = b.train_epoch(&ds).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.params.params(), b.model.params.params());
    }

    #[test]
    fn train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("model.json");
        let tr = train(&toy(), &tiny_config(), &out).unwrap();
        assert_eq!(tr.epoch, 2);
        let csv = std::fs::read_to_string(metrics_path(&out)).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(Checkpoint::load(&out).unwrap().epoch, 2);
    }

    #[test]
    fn nan_loss_names_sequence() {
        let ds = standardize(&toy()).unwrap();
        let mut tr = Trainer::new(tiny_model(&ds), tiny_config());
        let id = tr.model.params.id("dec.lambda").unwrap();
        tr.model.params.data_mut(id)[0] = f64::NAN;
        match tr.step(&ds, &[2]) {
            Err(Error::NanLoss { sequence }) => assert_eq!(sequence, 2),
            other => panic!("{other:?}"),
        }
    }
}
