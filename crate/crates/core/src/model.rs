//! The assembled generative model and its parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::config::{ModelConfig, StepSize};
use crate::data::{Dataset, EventSequence, Standardization};
use crate::decoder::{DecodedPath, Decoder};
use crate::diffusion::{DiffusionSchedule, NoiseNet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{DropoutPlan, Mlp};
use crate::ode::default_step;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub noise: NoiseNet,
    pub schedule: DiffusionSchedule,
    /// Divides times before they enter any network.
    pub time_scale: f64,
    /// Spread of the horizon distribution, read per `config.horizon_spread`.
    pub horizon_spread: f64,
    /// Maps raw features into the space the model works in.
    pub standardization: Standardization,
}

impl Model {
    /// Fresh parameters; `config.dim` must be set.
    pub fn new(config: ModelConfig, time_scale: f64, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::InvalidArgument("model dimension must be positive".into()));
        }
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("time scale {time_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let encoder = Encoder::register(&mut params, &config, &mut rng);
        let decoder = Decoder::register(&mut params, &config, &mut rng);
        let noise = NoiseNet::register(
            &mut params,
            "eps",
            config.hidden,
            config.diffusion_hidden,
            config.step_embedding,
            &mut rng,
        );
        let schedule = DiffusionSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let standardization = Standardization::identity(config.dim);
        Ok(Model {
            config,
            params,
            encoder,
            decoder,
            noise,
            schedule,
            time_scale,
            horizon_spread: 0.0,
            standardization,
        })
    }

    /// A model sized for a standardized training set.
    pub fn for_dataset(mut config: ModelConfig, ds: &Dataset, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        config.dim = ds.dim();
        let time_scale = ds.sequences.iter().map(|s| s.t_max()).sum::<f64>() / ds.len() as f64;
        let mut m = Model::new(config, time_scale, seed)?;
        m.horizon_spread = ds.horizon_variance;
        if let Some(st) = &ds.standardization {
            m.standardization = st.clone();
        }
        Ok(m)
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = self.encoder.mlps();
        v.extend(self.decoder.mlps());
        v.push(&self.noise.mlp);
        v
    }

    pub fn dropout_plan<R: rand::Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> DropoutPlan {
        DropoutPlan::sample(self.mlps(), rate, rng)
    }

    /// Solver step for a given sequence.
    pub fn step_for(&self, seq: &EventSequence) -> f64 {
        match self.config.solver_h {
            StepSize::Auto => default_step(seq.t_max(), &seq.times()),
            StepSize::Fixed(h) => h,
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape<'t>, seq: &EventSequence, plan: &DropoutPlan) -> Result<Var<'t>> {
        self.encoder.encode(tape, seq, self.step_for(seq), self.time_scale, plan)
    }

    /// Teacher-forced decoder path over `[0, t_max]` conditioned on `seq`.
    pub fn decode_teacher_forced<'t>(
        &self,
        tape: &'t Tape<'t>,
        s: Var<'t>,
        seq: &EventSequence,
        plan: &DropoutPlan,
    ) -> Result<DecodedPath<'t>> {
        let events = seq
            .events()
            .iter()
            .map(|e| Ok((e.t, self.encoder.event_repr(tape, e, plan)?)))
            .collect::<Result<Vec<_>>>()?;
        self.decoder
            .decode_path(tape, s, &events, seq.t_max(), self.step_for(seq), self.time_scale, plan)
    }

    /// Representation of a complete, standardized event as a decoder key.
    pub fn event_key(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let tape = Tape::new(&self.params);
        let plan = DropoutPlan::none();
        let mask = vec![true; x.len()];
        let tokens = self.encoder.embed_and_combine(&tape, x, &mask, &plan)?;
        let xt = self.encoder.attend(&tape, tokens)?;
        Ok(self.decoder.key(&tape, xt, t, self.time_scale, &plan).value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;

    #[test]
    fn layout_is_deterministic_and_named() {
        let cfg = ModelConfig { dim: 3, hidden: 8, embed: 4, diffusion_hidden: 8, ..ModelConfig::default() };
        let a = Model::new(cfg.clone(), 5.0, 1).unwrap();
        let b = Model::new(cfg, 5.0, 1).unwrap();
        assert_eq!(a.params.params().len(), b.params.params().len());
        for (p, q) in a.params.params().iter().zip(b.params.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.data, q.data);
        }
        let names: std::collections::HashSet<_> = a.params.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), a.params.params().len());
    }

    #[test]
    fn auto_step_follows_gaps() {
        let mut cfg = ModelConfig { dim: 1, hidden: 4, embed: 2, diffusion_hidden: 4, ..ModelConfig::default() };
        let seq = EventSequence::new(10.0, 1, vec![Event::complete(1.0, vec![0.0]), Event::complete(1.2, vec![0.0])])
            .unwrap();
        let m = Model::new(cfg.clone(), 10.0, 0).unwrap();
        assert!((m.step_for(&seq) - 0.05).abs() < 1e-12);
        cfg.solver_h = StepSize::Fixed(0.3);
        let m = Model::new(cfg, 10.0, 0).unwrap();
        assert_eq!(m.step_for(&seq), 0.3);
    }
}
