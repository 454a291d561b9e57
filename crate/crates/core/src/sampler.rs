//! Synthesis by thinning over a decoded intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::autodiff::Tape;
use crate::config::StepSize;
use crate::data::{Dataset, Event, EventSequence};
use crate::decoder::sample_horizon;
use crate::diffusion::sample_latent;
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::model::Model;
use crate::nn::DropoutPlan;

/// Number of lookahead windows per horizon.
pub const WINDOWS_PER_HORIZON: f64 = 20.0;
/// Intensity evaluations per window when bounding.
pub const BOUND_POINTS: usize = 64;
pub const BOUND_SAFETY: f64 = 1.5;
/// Largest tolerated share of proposals that exceed the bound.
pub const MAX_VIOLATION_RATE: f64 = 1e-3;

/// A point process whose intensity is a function of an evolving state.
pub trait IntensityProcess {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;
    /// Evolves the state from `t0` to `t1` with no new events.
    fn advance(&self, state: &Self::State, t0: f64, t1: f64) -> Result<Self::State>;
    fn intensity(&self, state: &Self::State, t: f64) -> f64;
    /// Called on acceptance at `t`; returns the post-event state and the event.
    fn emit(&self, state: Self::State, t: f64, rng: &mut ChaCha8Rng) -> Result<(Self::State, Event)>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ThinningStats {
    pub proposed: usize,
    pub accepted: usize,
    pub violations: usize,
}

impl ThinningStats {
    pub fn add(&mut self, o: &ThinningStats) {
        self.proposed += o.proposed;
        self.accepted += o.accepted;
        self.violations += o.violations;
    }

    pub fn violation_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.violations as f64 / self.proposed as f64
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// `BOUND_SAFETY ×` the largest intensity seen on a uniform grid over
/// `[t0, t1]`, together with the state at `t1`.
fn scan_bound<P: IntensityProcess>(p: &P, state: &P::State, t0: f64, t1: f64) -> Result<(f64, P::State)> {
    let mut s = state.clone();
    let mut best = p.intensity(&s, t0);
    let mut prev = t0;
    for k in 1..BOUND_POINTS {
        let t = t0 + (t1 - t0) * k as f64 / (BOUND_POINTS - 1) as f64;
        s = p.advance(&s, prev, t)?;
        best = best.max(p.intensity(&s, t));
        prev = t;
    }
    Ok((BOUND_SAFETY * best, s))
}

/// Events on `[0, horizon)` by windowed thinning. A proposal whose intensity
/// exceeds the current bound is counted, the bound is rebuilt to cover it,
/// and the proposal is redrawn from the last accepted position.
pub fn thinning_generate<P: IntensityProcess>(
    p: &P,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Event>, ThinningStats)> {
    let width = horizon / WINDOWS_PER_HORIZON;
    let mut stats = ThinningStats::default();
    let mut events = Vec::new();
    let mut state = p.start()?;
    let mut t = 0.0;
    while t < horizon {
        let end = (t + width).min(horizon);
        let (mut bound, end_state) = scan_bound(p, &state, t, end)?;
        if !(bound > 0.0) {
            state = end_state;
            t = end;
            continue;
        }
        loop {
            let cand = t + Exp::new(bound).expect("positive bound").sample(rng);
            if cand >= end {
                state = p.advance(&state, t, end)?;
                t = end;
                break;
            }
            let next = p.advance(&state, t, cand)?;
            let lam = p.intensity(&next, cand);
            stats.proposed += 1;
            if lam > bound {
                stats.violations += 1;
                let (b, _) = scan_bound(p, &state, t, end)?;
                bound = b.max(BOUND_SAFETY * lam);
                continue;
            }
            state = next;
            t = cand;
            if rng.random::<f64>() * bound < lam {
                let (s, ev) = p.emit(state, t, rng)?;
                state = s;
                events.push(ev);
                stats.accepted += 1;
                break;
            }
        }
    }
    Ok((events, stats))
}

/// The trained decoder as a point process. Events are emitted complete, in
/// standardized space, with the sampled observation mask attached.
pub struct ModelProcess<'m> {
    pub model: &'m Model,
    pub o0: Vec<f64>,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub o: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
}

impl IntensityProcess for ModelProcess<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        Ok(DecoderState { o: self.o0.clone(), keys: Vec::new() })
    }

    fn advance(&self, s: &DecoderState, t0: f64, t1: f64) -> Result<DecoderState> {
        let m = self.model;
        let o = m.decoder.advance_values(&m.params, &s.o, t0, t1, &s.keys, self.h, m.time_scale)?;
        Ok(DecoderState { o, keys: s.keys.clone() })
    }

    fn intensity(&self, s: &DecoderState, _t: f64) -> f64 {
        self.model.decoder.intensity_value(&self.model.params, &s.o)
    }

    fn emit(&self, mut s: DecoderState, t: f64, rng: &mut ChaCha8Rng) -> Result<(DecoderState, Event)> {
        let m = self.model;
        let tape = Tape::new(&m.params);
        let o = tape.constant(s.o.clone());
        let mean = m.decoder.obs_mean(&tape, o).value();
        let probs = m.decoder.missing_probs(&tape, o, t, m.time_scale, &DropoutPlan::none()).value();
        let x: Vec<f64> = mean.iter().map(|mu| mu + Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let mut mask: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
        if !mask.iter().any(|&b| b) {
            let best = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
            mask[best] = true;
        }
        s.keys.push(m.event_key(&x, t)?);
        Ok((s, Event { t, x, mask }))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A synthetic sequence with complete marks in standardized space, the
/// sampled observation masks, and the thinning counters.
pub struct Sampled {
    pub sequence: EventSequence,
    pub masks: Vec<Vec<bool>>,
    pub stats: ThinningStats,
}

pub fn sample_sequence(model: &Model, rng: &mut ChaCha8Rng) -> Result<Sampled> {
    let s = sample_latent(&model.params, model.config.hidden, &model.schedule, &model.noise, rng)?;
    sample_from_latent(model, s, rng)
}

/// Horizon draw and thinning for a given latent.
pub fn sample_from_latent(model: &Model, s: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<Sampled> {
    let cfg = &model.config;
    let tape = Tape::new(&model.params);
    let plan = DropoutPlan::none();
    let sv = tape.constant(s);
    let mu = model.decoder.horizon_mean(&tape, sv, model.time_scale, &plan).scalar();
    let horizon = sample_horizon(mu, model.horizon_spread, cfg.horizon_spread, rng);
    let o0 = model.decoder.initial_state(&tape, sv, &plan).value();
    let h = match cfg.solver_h {
        StepSize::Fixed(h) => h,
        StepSize::Auto => 0.01 * horizon,
    };
    let process = ModelProcess { model, o0, h };
    let (events, stats) = thinning_generate(&process, horizon, rng)?;
    let masks = events.iter().map(|e| e.mask.clone()).collect();
    let complete = events.into_iter().map(|e| Event::complete(e.t, e.x)).collect();
    Ok(Sampled { sequence: EventSequence::new(horizon, cfg.dim, complete)?, masks, stats })
}

/// `n` sequences in raw units. Sample `i` draws from its own stream of
/// `seed`, so output does not depend on thread count. Masks are all-ones
/// unless `emit_missing` is set.
pub fn synthesize(model: &Model, n: usize, seed: u64, emit_missing: bool) -> Result<(Dataset, ThinningStats)> {
    let results = map_range(n, |i| sample_sequence(model, &mut stream(seed, i as u64)));
    let mut stats = ThinningStats::default();
    let mut seqs = Vec::with_capacity(n);
    for r in results {
        let sampled = r?;
        stats.add(&sampled.stats);
        let raw = model.standardization.invert(&sampled.sequence);
        let raw = if emit_missing {
            let events = raw
                .events()
                .iter()
                .zip(&sampled.masks)
                .map(|(e, m)| {
                    let x = e.x.iter().zip(m).map(|(&v, &keep)| if keep { v } else { 0.0 }).collect();
                    Event { t: e.t, x, mask: m.clone() }
                })
                .collect();
            EventSequence::new(raw.t_max(), raw.dim(), events)?
        } else {
            raw
        };
        seqs.push(raw);
    }
    if stats.violation_rate() > MAX_VIOLATION_RATE {
        return Err(Error::BoundViolation { violations: stats.violations, proposed: stats.proposed });
    }
    Ok((Dataset::new(seqs)?, stats))
}
