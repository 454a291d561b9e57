//! Event embedding, masked attention over feature dimensions, and the
//! backward-time jump ODE that condenses a sequence into a latent vector.

use rand::Rng;

use crate::autodiff::{ParamId, ParameterStore, Tape, Var};
use crate::config::{AttentionForm, ModelConfig, Norm};
use crate::data::{Event, EventSequence};
use crate::error::{Error, Result};
use crate::nn::{DropoutPlan, Linear, LstmCell, Mlp};
use crate::ode::{integrate_with_jumps, IntegrationGrid};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionLayer {
    fn register<R: Rng + ?Sized>(ps: &mut ParameterStore, name: &str, width: usize, rng: &mut R) -> Self {
        AttentionLayer {
            q: Linear::register(ps, &format!("{name}.q"), width, width, false, 1.0, rng),
            k: Linear::register(ps, &format!("{name}.k"), width, width, false, 1.0, rng),
            v: Linear::register(ps, &format!("{name}.v"), width, width, false, 1.0, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub form: AttentionForm,
    pub norm: Norm,
    /// Learned per-dimension embeddings `u_j`, shape `[D, E]`.
    pub dim_embedding: ParamId,
    /// `e¹ ↦ W² tanh(W¹ e¹)`.
    pub token: Mlp,
    /// Intermediate layers followed by the final pooling layer.
    pub layers: Vec<AttentionLayer>,
    /// `ds/dt = f_s(s ⊕ t)`.
    pub flow: Mlp,
    pub jump: LstmCell,
    pub s_init: ParamId,
}

impl Encoder {
    pub fn register<R: Rng + ?Sized>(ps: &mut ParameterStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, h, e) = (cfg.dim, cfg.hidden, cfg.embed);
        let u = (0..d * e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dim_embedding = ps.add("enc.u", &[d, e], u);
        let token = Mlp::register(ps, "enc.token", &[4 * e, h, h], true, 1.0, rng);
        let layers = (0..cfg.attention_layers)
            .map(|l| AttentionLayer::register(ps, &format!("enc.attn{l}"), h, rng))
            .collect();
        let flow = Mlp::register(ps, "enc.flow", &[h + 1, h, h], true, 0.1, rng);
        let jump = LstmCell::register(ps, "enc.jump", h + 1, h, rng);
        let s_init = ps.add("enc.s_init", &[h], (0..h).map(|_| rng.random_range(-0.1..0.1)).collect());
        Encoder {
            dim: d,
            hidden: h,
            embed: e,
            form: cfg.attention_form,
            norm: cfg.norm,
            dim_embedding,
            token,
            layers,
            flow,
            jump,
            s_init,
        }
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        vec![&self.token, &self.flow]
    }

    /// Token states `e²_j` for the observed dimensions, in dimension order.
    /// Masked dimensions produce no token at all.
    pub fn embed_and_combine<'t>(
        &self,
        tape: &'t Tape<'t>,
        x: &[f64],
        mask: &[bool],
        plan: &DropoutPlan,
    ) -> Result<Vec<Var<'t>>> {
        if x.len() != self.dim || mask.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len().max(mask.len()) });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::FullyMasked);
        }
        let tokens = (0..self.dim)
            .filter(|&j| mask[j])
            .map(|j| {
                let y = tape.param_row(self.dim_embedding, j);
                let z = tape.constant(vec![x[j]; self.embed]);
                let e1 = tape.concat(&[y, z, y - z, y * z]);
                self.token.forward(tape, e1, plan.get(&self.token))
            })
            .collect();
        Ok(tokens)
    }

    /// Runs the attention stack over observed tokens and pools them into `x̃`.
    pub fn attend<'t>(&self, tape: &'t Tape<'t>, mut tokens: Vec<Var<'t>>) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::FullyMasked);
        }
        let (last, inner) = self.layers.split_last().expect("at least one attention layer");
        let scale = 1.0 / (self.hidden as f64).sqrt();
        for layer in inner {
            let qs: Vec<_> = tokens.iter().map(|&t| layer.q.forward(tape, t)).collect();
            let ks: Vec<_> = tokens.iter().map(|&t| layer.k.forward(tape, t)).collect();
            let vs: Vec<_> = tokens.iter().map(|&t| layer.v.forward(tape, t)).collect();
            let mixed: Vec<Var<'t>> = match self.form {
                AttentionForm::Cross => qs
                    .iter()
                    .map(|&q| {
                        let logits: Vec<_> = ks.iter().map(|&k| q.dot(k)).collect();
                        let w = tape.concat(&logits).scale(scale).softmax();
                        tape.weighted_sum(w, &vs)
                    })
                    .collect(),
                AttentionForm::Pooled => {
                    let pooled = Self::pool(tape, &qs, &ks, &vs);
                    vec![pooled; tokens.len()]
                }
            };
            tokens = tokens
                .iter()
                .zip(mixed)
                .map(|(&t, m)| {
                    let r = t + m;
                    match self.norm {
                        Norm::Instance => r.normalize(NORM_EPS),
                        Norm::None => r,
                    }
                })
                .collect();
        }
        let qs: Vec<_> = tokens.iter().map(|&t| last.q.forward(tape, t)).collect();
        let ks: Vec<_> = tokens.iter().map(|&t| last.k.forward(tape, t)).collect();
        let vs: Vec<_> = tokens.iter().map(|&t| last.v.forward(tape, t)).collect();
        Ok(Self::pool(tape, &qs, &ks, &vs))
    }

    /// Weights proportional to `exp(q_j · k_j)` over the tokens present.
    fn pool<'t>(tape: &'t Tape<'t>, qs: &[Var<'t>], ks: &[Var<'t>], vs: &[Var<'t>]) -> Var<'t> {
        let logits: Vec<_> = qs.iter().zip(ks).map(|(&q, &k)| q.dot(k)).collect();
        let w = tape.concat(&logits).softmax();
        tape.weighted_sum(w, vs)
    }

    /// Per-event representation `x̃`.
    pub fn event_repr<'t>(&self, tape: &'t Tape<'t>, event: &Event, plan: &DropoutPlan) -> Result<Var<'t>> {
        let tokens = self.embed_and_combine(tape, &event.x, &event.mask, plan)?;
        self.attend(tape, tokens)
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape<'t>,
        seq: &EventSequence,
        h: f64,
        time_scale: f64,
        plan: &DropoutPlan,
    ) -> Result<Var<'t>> {
        let reprs = seq
            .events()
            .iter()
            .map(|e| self.event_repr(tape, e, plan))
            .collect::<Result<Vec<_>>>()?;
        let mut c = tape.zeros(self.hidden);
        self.encode_with(tape, seq, &reprs, h, time_scale, plan, |s, xt, t| {
            let input = tape.concat(&[xt, tape.scalar(t / time_scale)]);
            let (s_next, c_next) = self.jump.step(tape, input, s, c);
            c = c_next;
            s_next
        })
    }

    /// Backward integration from `t_max` to 0 with a caller-supplied jump
    /// `(s, x̃_i, t_i) -> s'`. Events are visited in descending time.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_with<'t, J>(
        &self,
        tape: &'t Tape<'t>,
        seq: &EventSequence,
        reprs: &[Var<'t>],
        h: f64,
        time_scale: f64,
        plan: &DropoutPlan,
        mut jump: J,
    ) -> Result<Var<'t>>
    where
        J: FnMut(Var<'t>, Var<'t>, f64) -> Var<'t>,
    {
        let times = seq.times();
        let grid = IntegrationGrid::new(seq.t_max(), 0.0, &times, h)?;
        let mask = plan.get(&self.flow);
        let traj = integrate_with_jumps(
            tape.param(self.s_init),
            &grid,
            &times,
            |s: &Var<'t>, t, _| {
                let input = tape.concat(&[*s, tape.scalar(t / time_scale)]);
                Ok(self.flow.forward(tape, input, mask))
            },
            |i, t, s| Ok(jump(s, reprs[i], t)),
        )?;
        Ok(*traj.last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(dim: usize) -> ModelConfig {
        ModelConfig { dim, hidden: 6, embed: 3, attention_layers: 2, ..ModelConfig::default() }
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (ParameterStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterStore::new();
        let enc = Encoder::register(&mut ps, cfg, &mut rng);
        (ps, enc)
    }

    fn seq() -> EventSequence {
        EventSequence::new(
            3.0,
            3,
            vec![
                Event::from_options(0.5, &[Some(0.3), None, Some(-1.2)]),
                Event::from_options(1.7, &[Some(1.0), Some(0.4), None]),
                Event::from_options(2.2, &[None, None, Some(0.8)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_value_gives_embedding_pattern() {
        let mut cfg = small_cfg(1);
        cfg.embed = 1;
        cfg.hidden = 4;
        let (mut ps, enc) = setup(&cfg, 0);
        ps.data_mut(enc.dim_embedding).copy_from_slice(&[1.0]);
        let w1 = enc.token.layers[0].w;
        let w2 = enc.token.layers[1].w;
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        ps.data_mut(w1).copy_from_slice(&eye);
        ps.data_mut(w2).copy_from_slice(&eye);
        let tape = Tape::new(&ps);
        let tok = enc.embed_and_combine(&tape, &[1.0], &[true], &DropoutPlan::none()).unwrap();
        let expect: Vec<f64> = [1.0f64, 1.0, 0.0, 1.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(tok[0].value(), expect);
        // x = 0 makes z and y ⊙ z vanish.
        let tok = enc.embed_and_combine(&tape, &[0.0], &[true], &DropoutPlan::none()).unwrap();
        let expect: Vec<f64> = [1.0f64, 0.0, 1.0, 0.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(tok[0].value(), expect);
    }

    #[test]
    fn single_token_pools_to_its_value() {
        let cfg = small_cfg(1);
        let (ps, enc) = setup(&cfg, 1);
        let tape = Tape::new(&ps);
        let tok = tape.constant(vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.9]);
        let last = enc.layers.last().unwrap();
        let v = last.v.forward(&tape, tok).value();
        // Intermediate layers still transform the token; bypass them.
        let mut one = enc.clone();
        one.layers = vec![last.clone()];
        let x = one.attend(&tape, vec![tok]).unwrap().value();
        assert_eq!(x, v);
    }

    #[test]
    fn hand_set_logits_give_quarter_three_quarter() {
        let mut cfg = small_cfg(2);
        cfg.attention_layers = 1;
        cfg.hidden = 2;
        let (mut ps, enc) = setup(&cfg, 2);
        let eye = [1.0, 0.0, 0.0, 1.0];
        let l = &enc.layers[0];
        for id in [l.q.w, l.k.w, l.v.w] {
            ps.data_mut(id).copy_from_slice(&eye);
        }
        let tape = Tape::new(&ps);
        let a = tape.constant(vec![0.0, 0.0]);
        let b = tape.constant(vec![3f64.ln().sqrt(), 0.0]);
        let x = enc.attend(&tape, vec![a, b]).unwrap().value();
        // weights (0.25, 0.75) applied to values (0, 0) and (√ln3, 0)
        assert!((x[0] - 0.75 * 3f64.ln().sqrt()).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn masked_values_do_not_reach_representation() {
        for form in [AttentionForm::Cross, AttentionForm::Pooled] {
            let mut cfg = small_cfg(3);
            cfg.attention_form = form;
            let (ps, enc) = setup(&cfg, 3);
            let base = seq();
            let probe = base.with_masked_value(0, 1, 1e6).with_masked_value(2, 0, -7.0);
            let t1 = Tape::new(&ps);
            let t2 = Tape::new(&ps);
            let s1 = enc.encode(&t1, &base, 0.1, 3.0, &DropoutPlan::none()).unwrap().value();
            let s2 = enc.encode(&t2, &probe, 0.1, 3.0, &DropoutPlan::none()).unwrap().value();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn fully_masked_event_is_rejected() {
        let (ps, enc) = setup(&small_cfg(2), 4);
        let tape = Tape::new(&ps);
        assert!(matches!(
            enc.embed_and_combine(&tape, &[0.0, 0.0], &[false, false], &DropoutPlan::none()),
            Err(Error::FullyMasked)
        ));
    }

    #[test]
    fn frozen_dynamics_return_initial_state() {
        let (mut ps, enc) = setup(&small_cfg(3), 5);
        let last = enc.flow.layers.last().unwrap();
        ps.data_mut(last.w).fill(0.0);
        ps.data_mut(last.b.unwrap()).fill(0.0);
        let tape = Tape::new(&ps);
        let s = seq();
        let reprs: Vec<_> = s.events().iter().map(|e| enc.event_repr(&tape, e, &DropoutPlan::none()).unwrap()).collect();
        let out = enc
            .encode_with(&tape, &s, &reprs, 0.1, 3.0, &DropoutPlan::none(), |s, _, _| s)
            .unwrap()
            .value();
        assert_eq!(out, ps.data(enc.s_init));
    }

    #[test]
    fn no_events_is_pure_flow() {
        let (ps, enc) = setup(&small_cfg(2), 6);
        let empty = EventSequence::new(2.0, 2, vec![]).unwrap();
        let tape = Tape::new(&ps);
        let s = enc.encode(&tape, &empty, 0.05, 2.0, &DropoutPlan::none()).unwrap().value();
        let mut y = ps.data(enc.s_init).to_vec();
        let mut rhs = |y: &Vec<f64>, t: f64, _| -> Result<Vec<f64>> {
            let tp = Tape::new(&ps);
            let mut inp = y.clone();
            inp.push(t / 2.0);
            Ok(enc.flow.forward(&tp, tp.constant(inp), None).value())
        };
        y = crate::ode::advance(y, 2.0, 0.0, 0.05, 0, &mut rhs).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradients_through_solver() {
        let (ps, enc) = setup(&small_cfg(3), 7);
        let s = seq();
        let report = check_gradients(&ps, 1e-5, 24, |tape| {
            Ok(enc.encode(tape, &s, 0.25, 3.0, &DropoutPlan::none())?.sq_norm())
        })
        .unwrap();
        let (name, err) = report.worst();
        assert!(err < 1e-3, "{name}: {err}");
    }
}
