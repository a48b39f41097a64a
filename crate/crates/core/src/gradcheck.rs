//! Central finite-difference checks of tape gradients at 64-bit.
//!
//! Only forward values enter the numerical side, so the check is independent
//! of every backward rule it validates.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Step for central differences.
pub const STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so probes whose true derivative is ~0 are judged on absolute error.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl Report {
    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.probes += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.probes += other.probes;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Checks `d loss / d inputs` for a function of plain input tensors. Probes
/// `probes` random coordinates of each input.
pub fn check_inputs<F, R>(inputs: &[Tensor<f64>], f: F, probes: usize, rng: &mut R) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = Report::default();
    for (k, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.wrt(&tape, v);
        for _ in 0..probes {
            let i = rng.random_range(0..x.len());
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            report.record(format!("input {k}[{i}]"), g.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a loss built from a parameter store at the
/// given `(parameter, flat index)` coordinates.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, coords: &[(ParamId, usize)]) -> Result<Report>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    work.accumulate(&tape, &grads);
    let mut report = Report::default();
    for &(id, i) in coords {
        let analytic = work.get(id).grad.as_ref().map_or(0.0, |g| g.data()[i]);
        let eval = |delta: f64| -> Result<f64> {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut()[i] += delta;
            let mut t = Tape::new();
            let l = f(&s, &mut t)?;
            Ok(t.value(l).data()[0])
        };
        let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        report.record(format!("{}[{i}]", store.get(id).name), analytic, numeric);
    }
    Ok(report)
}

/// Random probe coordinates: `per_param` entries from every parameter.
pub fn sample_coords<R: Rng>(store: &ParamStore<f64>, per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| {
            let n = p.value.len();
            (0..per_param.min(n)).map(move |k| (id, k)).collect::<Vec<_>>()
        })
        .map(|(id, k)| {
            let n = store.get(id).value.len();
            (id, if n <= per_param { k } else { rng.random_range(0..n) })
        })
        .collect()
}
