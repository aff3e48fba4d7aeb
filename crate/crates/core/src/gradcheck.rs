//! Central-difference gradient oracle.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::session::Session;
use crate::tensor::Real;

/// A deterministic scalar objective that can be evaluated at any precision.
pub trait Objective {
    fn loss<F: Real>(&self, s: &mut Session<'_, F>) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    /// Element with the largest error: index, analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Precision of the analytic gradients.
    pub bits: u32,
    pub h: f64,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel).sum()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F: Real, O: Objective>(obj: &O, store: &ParamStore<F>) -> Result<F> {
    let mut s = Session::new(store);
    let l = obj.loss(&mut s)?;
    s.scalar(l)
}

/// Compares backward gradients computed at precision `A` with central
/// differences `(f(p+h) - f(p-h)) / 2h` evaluated at precision `O` on the same
/// parameter values. Frozen parameters in `params` are skipped.
pub fn grad_check_with<A: Real, O: Real, Obj: Objective>(
    obj: &Obj,
    store: &ParamStore<A>,
    params: &[ParamId],
    h: f64,
) -> Result<GradReport> {
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let analytic = {
        let mut s = Session::new(store);
        let l = obj.loss(&mut s)?;
        s.backward(l)?
    };
    let mut oracle: ParamStore<O> = store.cast();
    let base0 = eval(obj, &oracle)?;
    let base1 = eval(obj, &oracle)?;
    if base0.to_f64_lossy().to_bits() != base1.to_f64_lossy().to_bits() {
        return Err(Error::contract("objective is not deterministic"));
    }
    let mut reports = Vec::new();
    for &id in params {
        if !store.get(id).trainable {
            continue;
        }
        let name = store.get(id).name.clone();
        let n = store.get(id).value.len();
        let zeros;
        let grad = match analytic.get(id) {
            Some(g) => g.data(),
            None => {
                zeros = vec![A::zero(); n];
                &zeros
            }
        };
        let mut worst = 0.0f64;
        let mut worst_at = (0, 0.0, 0.0);
        let mut max_abs = 0.0f64;
        for i in 0..n {
            let orig = oracle.get(id).value.data()[i];
            oracle.get_mut(id).value.data_mut()[i] = orig + O::lit(h);
            let fp = eval(obj, &oracle)?.to_f64_lossy();
            oracle.get_mut(id).value.data_mut()[i] = orig - O::lit(h);
            let fm = eval(obj, &oracle)?.to_f64_lossy();
            oracle.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[i].to_f64_lossy();
            let e = relative_error(a, numeric);
            if e >= worst {
                worst = e;
                worst_at = (i, a, numeric);
            }
            max_abs = max_abs.max(a.abs());
        }
        reports.push(ParamReport {
            name,
            numel: n,
            max_rel_error: worst,
            max_abs_grad: max_abs,
            worst: worst_at,
        });
    }
    Ok(GradReport {
        bits: A::BITS,
        h,
        params: reports,
    })
}

/// Both sides at the precision of `store`.
pub fn grad_check<F: Real, Obj: Objective>(
    obj: &Obj,
    store: &ParamStore<F>,
    params: &[ParamId],
    h: f64,
) -> Result<GradReport> {
    grad_check_with::<F, F, Obj>(obj, store, params, h)
}
