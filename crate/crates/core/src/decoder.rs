//! Continuous-time decoder: latent path, intensity, observation, missingness
//! and horizon heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParameterStore, Tape, Var};
use crate::config::{HorizonSpread, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{DropoutPlan, Linear, Mlp};
use crate::ode::{integrate_with_jumps, IntegrationGrid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest horizon `sample_horizon` will return.
pub const HORIZON_FLOOR: f64 = 1e-3;
const HORIZON_RETRIES: usize = 1000;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dim: usize,
    pub hidden: usize,
    /// `o₀ = f_o(s)`.
    pub init: Mlp,
    /// `o′ = MLP(o ⊕ t)`.
    pub time_net: Mlp,
    /// `x′_i = MLP(x̃_i ⊕ t_i)`.
    pub key_net: Mlp,
    /// `do/dt = MLP(o′ ⊕ a)`.
    pub dynamics: Mlp,
    /// Intensity readout `w_λ` (no bias).
    pub w_lambda: ParamId,
    pub obs: Linear,
    pub missing: Mlp,
    pub horizon: Mlp,
}

/// Decoder states on the solver grid for one sequence.
#[derive(Debug, Clone)]
pub struct DecodedPath<'t> {
    pub times: Vec<f64>,
    pub states: Vec<Var<'t>>,
    /// `Λ(t) = ∫₀ᵗ λ` at each grid node.
    pub integral: Vec<Var<'t>>,
    /// State at each event time (left limit; the event does not move `o`).
    pub event_states: Vec<Var<'t>>,
    /// Attention weights over the conditioning prefix, recorded at each event
    /// time (empty for the first event).
    pub event_attention: Vec<Vec<f64>>,
}

impl<'t> DecodedPath<'t> {
    pub fn total_integral(&self) -> Var<'t> {
        *self.integral.last().expect("non-empty grid")
    }
}

impl Decoder {
    pub fn register<R: Rng + ?Sized>(ps: &mut ParameterStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden);
        let lam: Vec<f64> = (0..h).map(|_| rng.random_range(-0.1..0.1)).collect();
        Decoder {
            dim: d,
            hidden: h,
            init: Mlp::register(ps, "dec.init", &[h, h, h], true, 1.0, rng),
            time_net: Mlp::register(ps, "dec.time", &[h + 1, h, h], true, 1.0, rng),
            key_net: Mlp::register(ps, "dec.key", &[h + 1, h, h], true, 1.0, rng),
            dynamics: Mlp::register(ps, "dec.dyn", &[2 * h, h, h], true, 0.1, rng),
            w_lambda: ps.add("dec.lambda", &[h], lam),
            obs: Linear::register(ps, "dec.obs", h, d, true, 1.0, rng),
            missing: Mlp::register(ps, "dec.miss", &[h + 1, h, d], true, 1.0, rng),
            horizon: Mlp::register(ps, "dec.horizon", &[h, h, 1], true, 0.1, rng),
        }
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        vec![&self.init, &self.time_net, &self.key_net, &self.dynamics, &self.missing, &self.horizon]
    }

    pub fn initial_state<'t>(&self, tape: &'t Tape<'t>, s: Var<'t>, plan: &DropoutPlan) -> Var<'t> {
        self.init.forward(tape, s, plan.get(&self.init))
    }

    /// Attention key/value `x′` for an event with representation `x̃`.
    pub fn key<'t>(&self, tape: &'t Tape<'t>, xt: Var<'t>, t: f64, time_scale: f64, plan: &DropoutPlan) -> Var<'t> {
        let input = tape.concat(&[xt, tape.scalar(t / time_scale)]);
        self.key_net.forward(tape, input, plan.get(&self.key_net))
    }

    /// Softmax attention of `o′` over `keys` (the zero vector when empty).
    pub fn attention<'t>(&self, tape: &'t Tape<'t>, op: Var<'t>, keys: &[Var<'t>]) -> (Var<'t>, Option<Var<'t>>) {
        if keys.is_empty() {
            return (tape.zeros(self.hidden), None);
        }
        let scale = 1.0 / (self.hidden as f64).sqrt();
        let logits: Vec<_> = keys.iter().map(|&k| op.dot(k)).collect();
        let w = tape.concat(&logits).scale(scale).softmax();
        (tape.weighted_sum(w, keys), Some(w))
    }

    fn time_state<'t>(&self, tape: &'t Tape<'t>, o: Var<'t>, t: f64, time_scale: f64, plan: &DropoutPlan) -> Var<'t> {
        let input = tape.concat(&[o, tape.scalar(t / time_scale)]);
        self.time_net.forward(tape, input, plan.get(&self.time_net))
    }

    /// `do/dt` given the keys of all events strictly before `t`.
    pub fn drift<'t>(
        &self,
        tape: &'t Tape<'t>,
        o: Var<'t>,
        t: f64,
        keys: &[Var<'t>],
        time_scale: f64,
        plan: &DropoutPlan,
    ) -> Var<'t> {
        let op = self.time_state(tape, o, t, time_scale, plan);
        let (a, _) = self.attention(tape, op, keys);
        self.dynamics.forward(tape, tape.concat(&[op, a]), plan.get(&self.dynamics))
    }

    /// `λ = softplus(w_λ · o)`.
    pub fn intensity<'t>(&self, tape: &'t Tape<'t>, o: Var<'t>) -> Var<'t> {
        tape.param(self.w_lambda).dot(o).softplus()
    }

    pub fn obs_mean<'t>(&self, tape: &'t Tape<'t>, o: Var<'t>) -> Var<'t> {
        self.obs.forward(tape, o)
    }

    /// Gaussian log-density of the observed coordinates of `x` around the
    /// predicted mean, with unit variance.
    pub fn obs_logprob<'t>(&self, tape: &'t Tape<'t>, x: &[f64], mask: &[bool], o: Var<'t>) -> Result<Var<'t>> {
        masked_gaussian_logprob(self.obs_mean(tape, o), x, mask)
    }

    /// Pre-sigmoid scores of [`Decoder::missing_probs`].
    pub fn missing_logits<'t>(&self, tape: &'t Tape<'t>, o: Var<'t>, t: f64, time_scale: f64, plan: &DropoutPlan) -> Var<'t> {
        let input = tape.concat(&[tape.scalar(t / time_scale), o]);
        self.missing.forward(tape, input, plan.get(&self.missing))
    }

    /// Probability that each coordinate is observed.
    pub fn missing_probs<'t>(&self, tape: &'t Tape<'t>, o: Var<'t>, t: f64, time_scale: f64, plan: &DropoutPlan) -> Var<'t> {
        self.missing_logits(tape, o, t, time_scale, plan).sigmoid()
    }

    /// Mean horizon `μ_t`, expressed in units of `time_scale`.
    pub fn horizon_mean<'t>(&self, tape: &'t Tape<'t>, s: Var<'t>, time_scale: f64, plan: &DropoutPlan) -> Var<'t> {
        self.horizon.forward(tape, s, plan.get(&self.horizon)).scale(time_scale)
    }

    /// Integrates `(o, Λ)` forward over `[0, horizon]` conditioning on
    /// `events`, given as `(t_i, x̃_i)` in time order.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_path<'t>(
        &self,
        tape: &'t Tape<'t>,
        s: Var<'t>,
        events: &[(f64, Var<'t>)],
        horizon: f64,
        h: f64,
        time_scale: f64,
        plan: &DropoutPlan,
    ) -> Result<DecodedPath<'t>> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
        }
        let times: Vec<f64> = events.iter().map(|e| e.0).collect();
        let keys: Vec<Var<'t>> = events.iter().map(|&(t, xt)| self.key(tape, xt, t, time_scale, plan)).collect();
        let grid = IntegrationGrid::new(0.0, horizon, &times, h)?;
        let o0 = self.initial_state(tape, s, plan);
        let traj = integrate_with_jumps(
            (o0, tape.scalar(0.0)),
            &grid,
            &times,
            |(o, _): &(Var<'t>, Var<'t>), t, ctx| {
                Ok((self.drift(tape, *o, t, &keys[..ctx], time_scale, plan), self.intensity(tape, *o)))
            },
            |_, _, state| Ok(state),
        )?;
        let mut event_states = vec![None; events.len()];
        let mut event_attention = vec![Vec::new(); events.len()];
        for j in &traj.jumps {
            event_states[j.index] = Some(j.pre.0);
            if j.index > 0 {
                let op = self.time_state(tape, j.pre.0, j.t, time_scale, plan);
                if let (_, Some(w)) = self.attention(tape, op, &keys[..j.index]) {
                    event_attention[j.index] = w.value();
                }
            }
        }
        let (states, integral) = traj.states.into_iter().unzip();
        Ok(DecodedPath {
            times: traj.times,
            states,
            integral,
            event_states: event_states.into_iter().map(|s| s.expect("every event is a grid node")).collect(),
            event_attention,
        })
    }

    /// Plain-value state advance used by generation: integrates `o` from `t0`
    /// to `t1` with fixed keys, on a fresh tape.
    #[allow(clippy::too_many_arguments)]
    pub fn advance_values(
        &self,
        ps: &ParameterStore,
        o: &[f64],
        t0: f64,
        t1: f64,
        keys: &[Vec<f64>],
        h: f64,
        time_scale: f64,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new(ps);
        let kv: Vec<Var> = keys.iter().map(|k| tape.constant(k.clone())).collect();
        let plan = DropoutPlan::none();
        let state = tape.constant(o.to_vec());
        let out = crate::ode::advance(state, t0, t1, h, 0, &mut |o: &Var, t, _| {
            Ok(self.drift(&tape, *o, t, &kv, time_scale, &plan))
        })?;
        Ok(out.value())
    }

    pub fn intensity_value(&self, ps: &ParameterStore, o: &[f64]) -> f64 {
        let w = ps.data(self.w_lambda);
        crate::autodiff::softplus(w.iter().zip(o).map(|(a, b)| a * b).sum())
    }
}

/// `−(Σm/2) ln 2π − ½ ‖(x − μ) ⊙ m‖²`.
pub fn masked_gaussian_logprob<'t>(mean: Var<'t>, x: &[f64], mask: &[bool]) -> Result<Var<'t>> {
    if x.len() != mean.len() || mask.len() != mean.len() {
        return Err(Error::DimensionMismatch { expected: mean.len(), found: x.len().max(mask.len()) });
    }
    let observed = mask.iter().filter(|&&m| m).count();
    if observed == 0 {
        return Err(Error::FullyMasked);
    }
    let tape = mean.tape();
    let xv: Vec<f64> = x.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let mv: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let resid = (tape.constant(xv) - mean) * tape.constant(mv);
    let norm = tape.scalar(-0.5 * observed as f64 * LN_2PI);
    Ok(norm + resid.sq_norm().scale(-0.5))
}

/// Draws `T̂ ~ N(μ, spread)` and redraws anything below [`HORIZON_FLOOR`].
pub fn sample_horizon<R: Rng + ?Sized>(mu: f64, spread: f64, kind: HorizonSpread, rng: &mut R) -> f64 {
    let sd = match kind {
        HorizonSpread::Variance => spread.max(0.0).sqrt(),
        HorizonSpread::StdDev => spread.max(0.0),
    };
    if sd == 0.0 {
        return mu.max(HORIZON_FLOOR);
    }
    let normal = Normal::new(mu, sd).expect("finite spread");
    for _ in 0..HORIZON_RETRIES {
        let t = normal.sample(rng);
        if t >= HORIZON_FLOOR {
            return t;
        }
    }
    HORIZON_FLOOR
}
