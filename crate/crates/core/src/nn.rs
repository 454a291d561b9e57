//! Dense layers and small MLPs recorded on a [`Tape`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{ParamId, ParameterStore, Tape, Var};

/// `W x (+ b)` with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn register<R: Rng + ?Sized>(
        ps: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let w = ps.add(format!("{name}.w"), &[fan_out, fan_in], data);
        let b = bias.then(|| ps.add(format!("{name}.b"), &[fan_out], vec![0.0; fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Var<'t> {
        let y = tape.matvec(self.w, x);
        match self.b {
            Some(b) => y + tape.param(b),
            None => y,
        }
    }
}

/// Per-hidden-layer multiplicative masks (inverted dropout: kept units are
/// scaled by `1 / (1 - rate)`).
pub type DropoutMask = Vec<Vec<f64>>;

/// Linear layers joined by `tanh`; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`. `out_gain` scales the final layer's initial weights.
    pub fn register<R: Rng + ?Sized>(
        ps: &mut ParameterStore,
        name: &str,
        widths: &[usize],
        bias: bool,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::register(ps, &format!("{name}.{i}"), widths[i], widths[i + 1], bias, gain, rng)
            })
            .collect();
        Mlp { name: name.to_string(), layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>, dropout: Option<&DropoutMask>) -> Var<'t> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i < last {
                h = h.tanh();
                if let Some(mask) = dropout {
                    h = h * tape.constant(mask[i].clone());
                }
            }
        }
        h
    }

    pub fn sample_dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> DropoutMask {
        let keep = 1.0 / (1.0 - rate);
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| (0..l.fan_out).map(|_| if rng.random_bool(rate) { 0.0 } else { keep }).collect())
            .collect()
    }
}

/// Dropout masks for one forward pass, keyed by MLP name. Masks are drawn once
/// per sequence so ODE dynamics stay deterministic along the solver path.
#[derive(Debug, Clone, Default)]
pub struct DropoutPlan {
    masks: HashMap<String, DropoutMask>,
}

impl DropoutPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sample<'a, R: Rng + ?Sized>(mlps: impl IntoIterator<Item = &'a Mlp>, rate: f64, rng: &mut R) -> Self {
        let mut masks = HashMap::new();
        if rate > 0.0 {
            for m in mlps {
                masks.insert(m.name.clone(), m.sample_dropout(rate, rng));
            }
        }
        DropoutPlan { masks }
    }

    pub fn get(&self, mlp: &Mlp) -> Option<&DropoutMask> {
        self.masks.get(&mlp.name)
    }
}

/// LSTM cell with hidden state `h` and carried memory `c`. Gate order: input,
/// forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn register<R: Rng + ?Sized>(ps: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = Linear::register(ps, &format!("{name}.x"), input, 4 * hidden, false, 1.0, rng).w;
        let wh = Linear::register(ps, &format!("{name}.h"), hidden, 4 * hidden, false, 1.0, rng).w;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = ps.add(format!("{name}.b"), &[4 * hidden], bias);
        LstmCell { wx, wh, b, hidden }
    }

    /// Returns `(h', c')`.
    pub fn step<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> (Var<'t>, Var<'t>) {
        let n = self.hidden;
        let gates = tape.matvec(self.wx, x) + tape.matvec(self.wh, h) + tape.param(self.b);
        let i = gates.slice(0, n).sigmoid();
        let f = gates.slice(n, n).sigmoid();
        let g = gates.slice(2 * n, n).tanh();
        let o = gates.slice(3 * n, n).sigmoid();
        let c_next = f * c + i * g;
        let h_next = o * c_next.tanh();
        (h_next, c_next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParameterStore::new();
        let mlp = Mlp::register(&mut ps, "mlp", &[4, 6, 5, 3], true, 1.0, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.data_mut(id) {
                *v += 0.05;
            }
        }
        let report = check_gradients(&ps, 1e-5, 64, |tape| {
            let x = tape.constant(vec![0.2, -0.4, 0.9, 0.1]);
            Ok(mlp.forward(tape, x, None).softplus().sum())
        })
        .unwrap();
        let (name, err) = report.worst();
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn lstm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterStore::new();
        let cell = LstmCell::register(&mut ps, "lstm", 3, 4, &mut rng);
        let report = check_gradients(&ps, 1e-5, 64, |tape| {
            let x = tape.constant(vec![0.5, -1.0, 0.25]);
            let h = tape.constant(vec![0.1, 0.2, -0.3, 0.0]);
            let c = tape.constant(vec![0.4, -0.1, 0.0, 0.3]);
            let (h1, c1) = cell.step(tape, x, h, c);
            let (h2, _) = cell.step(tape, x, h1, c1);
            Ok(h2.sq_norm())
        })
        .unwrap();
        let (name, err) = report.worst();
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterStore::new();
        let mlp = Mlp::register(&mut ps, "m", &[2, 1000, 1], true, 1.0, &mut rng);
        let mask = mlp.sample_dropout(0.1, &mut rng);
        let dropped = mask[0].iter().filter(|&&v| v == 0.0).count();
        assert!((60..=140).contains(&dropped));
        assert!(mask[0].iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    }
}
