//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖), over checked entries.
    pub rel_err: f64,
    /// ‖analytic − numeric‖ over checked entries.
    pub abs_err: f64,
    pub analytic_norm: f64,
}

impl GradCheck {
    /// Relative error below `tol`, or both gradients zero up to
    /// finite-difference noise (for parameters the loss cannot see).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol || self.abs_err < 1e-9
    }
}

/// Compares tape gradients of `loss_fn` against central differences for each
/// named parameter. At most `max_entries` entries per tensor are probed,
/// chosen with a fixed seed.
pub fn check_params<F>(store: &ParamStore, names: &[&str], max_entries: usize, loss_fn: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    for &name in names {
        let n = store.get(name).map(|t| t.len()).unwrap_or(0);
        let analytic = grads.params().get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let idx: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let f = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(name).expect("param exists").data_mut()[i] += delta;
                let mut t = Tape::inference();
                let l = loss_fn(&mut t, &s)?;
                Ok(t.value(l).item())
            };
            num.push((f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP));
            a.push(analytic[i]);
        }
        out.push(GradCheck {
            name: name.to_string(),
            checked: idx.len(),
            rel_err: relative_error(&a, &num),
            abs_err: a.iter().zip(&num).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            analytic_norm: norm(&a),
        });
    }
    Ok(out)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
