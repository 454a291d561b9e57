//! Central finite-difference oracle for tape gradients.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖))` per checked array.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (String, f64) {
        self.per_param
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, p| if p.1 > acc.1 { p } else { acc })
    }
}

/// Compares backward gradients of `f` against central differences with step `h`.
///
/// At most `max_entries` coordinates per array are perturbed (evenly strided);
/// arrays whose gradient is identically zero on both routes are reported as 0.
/// Arrays whose norm on both routes is below `1e-12` are skipped.
pub fn check_gradients<F>(store: &ParameterStore, h: f64, max_entries: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new(store);
        let root = f(&tape)?;
        tape.backward(root)?.params
    };
    let eval = |ps: &ParameterStore| -> Result<f64> {
        let tape = Tape::new(ps);
        Ok(f(&tape)?.scalar())
    };
    let mut probe = store.clone();
    let mut per_param = Vec::new();
    for id in store.ids() {
        let n = store.data(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for k in (0..n).step_by(stride) {
            let orig = store.data(id)[k];
            probe.data_mut(id)[k] = orig + h;
            let up = eval(&probe)?;
            probe.data_mut(id)[k] = orig - h;
            let down = eval(&probe)?;
            probe.data_mut(id)[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id)[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-12 {
            continue;
        }
        per_param.push((store.get(id).name.clone(), diff.sqrt() / scale));
    }
    Ok(GradCheckReport { per_param })
}
