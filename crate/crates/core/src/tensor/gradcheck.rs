use rayon::prelude::*;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Finite-difference settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn entry_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the tape's gradients of `loss` against central differences for every parameter.
///
/// `loss` must be deterministic: it is re-evaluated on fresh tapes with
/// perturbed copies of `store`.
pub fn grad_check<F>(store: &ParamStore, loss: F, options: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var> + Sync,
{
    grad_check_where(store, loss, options, |_| true)
}

/// Like [`grad_check`], restricted to the parameters whose names satisfy `keep`.
pub fn grad_check_where<F, K>(store: &ParamStore, loss: F, options: GradCheckOptions, keep: K) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var> + Sync,
    K: Fn(&str) -> bool,
{
    let tape = Tape::new();
    let out = loss(&tape, store)?;
    let analytic = tape.backward(out)?.param_grads(store);
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = loss(&tape, s)?;
        Ok(tape.scalar(v))
    };

    let jobs: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| keep(&p.name))
        .flat_map(|(id, p)| {
            entry_indices(p.value.len(), options.max_entries)
                .into_iter()
                .map(move |k| (id.index(), k))
        })
        .collect();

    let errors: Vec<Result<(usize, f64)>> = jobs
        .par_iter()
        .map_init(
            || store.clone(),
            |local, &(pi, k)| {
                let id = store.iter().nth(pi).map(|(id, _)| id).expect("param index");
                let original = local.get(id).value.data()[k];
                local.get_mut(id).value.data_mut()[k] = original + options.step;
                let plus = eval(local);
                local.get_mut(id).value.data_mut()[k] = original - options.step;
                let minus = eval(local);
                local.get_mut(id).value.data_mut()[k] = original;
                let numeric = (plus? - minus?) / (2.0 * options.step);
                Ok((pi, relative_error(analytic[pi].data()[k], numeric)))
            },
        )
        .collect();

    let mut params: Vec<ParamCheck> = store
        .iter()
        .map(|(_, p)| ParamCheck {
            name: p.name.clone(),
            entries_checked: 0,
            max_rel_error: 0.0,
            passed: true,
        })
        .collect();
    for e in errors {
        let (pi, err) = e?;
        let pc = &mut params[pi];
        pc.entries_checked += 1;
        pc.max_rel_error = pc.max_rel_error.max(err);
    }
    for pc in &mut params {
        pc.passed = pc.max_rel_error <= options.tolerance;
    }
    params.retain(|pc| keep(&pc.name));
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{OpKind, Tensor};

    #[test]
    fn quadratic_form_passes() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(&[0.3, -1.2, 2.0]), 0.0).unwrap();
        let a = Tensor::from_rows(&[[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]]).unwrap();
        let report = grad_check(
            &store,
            |tape, s| {
                let xv = tape.param(s, x);
                let av = tape.constant(a.clone());
                let ax = tape.matmul(xv, av)?;
                tape.sum(tape.mul(ax, xv)?)
            },
            GradCheckOptions {
                step: 1e-5,
                tolerance: 1e-6,
                max_entries: None,
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let mut store = ParamStore::new();
        let w = store.add("decoder.w", Tensor::row(&[0.4, -0.7]), 0.0).unwrap();
        let b = store.add("other.b", Tensor::row(&[0.1, 0.2]), 0.0).unwrap();
        let report = grad_check(
            &store,
            |tape, s| {
                tape.inject_sign_fault(OpKind::Softsign);
                let wv = tape.softsign(tape.param(s, w))?;
                let bv = tape.param(s, b);
                tape.sum(tape.add(tape.mul(wv, wv)?, tape.mul(bv, bv)?)?)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(failed, vec!["decoder.w"]);
    }

    #[test]
    fn entry_subsampling_is_spread() {
        assert_eq!(entry_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(entry_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
