//! Finite-difference verification of analytic gradients.
//!
//! The function under test may return any shape; it is contracted with a
//! fixed pseudo-random weight vector so every output element contributes.
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled
    /// deterministically); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: None, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn contraction_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn contracted_value(y: &Tensor, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Gradient check over named entries of a parameter store.
///
/// `f` builds the computation from `store` (binding entries with
/// [`Tape::param`]). Entries listed in `names` are perturbed.
pub fn grad_check_params<F, E>(f: F, store: &ParamStore, names: &[String], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let w = contraction_weights(tape.value(y).len(), opts.seed);
    let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w.clone())?);
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);

    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    for name in names {
        let base = store.tensor(name)?.clone();
        let n = base.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zeros = Tensor::zeros(base.shape().to_vec());
        let a_grad = analytic.get(name).unwrap_or(&zeros);
        for i in coords {
            let mut eval = |delta: f64| -> Result<f64, E> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                work.assign(name, t)?;
                let mut tp = Tape::new();
                let y = f(&mut tp, &work)?;
                Ok(contracted_value(tp.value(y), &w))
            };
            let numeric = (eval(opts.eps)? - eval(-opts.eps)?) / (2.0 * opts.eps);
            let e = rel_err(a_grad.data()[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
        work.assign(name, base)?;
    }
    Ok(report)
}

/// Gradient check of `f` with respect to positional `inputs`.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut store = ParamStore::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input.{i:03}")).collect();
    for (name, t) in names.iter().zip(inputs) {
        store.insert(name.clone(), "shared", t.clone(), true)?;
    }
    grad_check_params(
        |tape, st| {
            let vars = names.iter().map(|n| tape.param(st, n)).collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        &store,
        &names,
        opts,
    )
}
