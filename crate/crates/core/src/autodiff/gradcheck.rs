//! Central-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Knobs for [`finite_difference_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true gradient
    /// is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Compares backward-pass gradients against central differences for every
/// trainable parameter in `store`. `loss_fn` builds the loss on a fresh
/// evaluation-mode graph and must be deterministic.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        tolerance,
        ..GradCheckOptions::default()
    };
    finite_difference_check_with(store, loss_fn, &opts)
}

pub fn finite_difference_check_with<F>(
    store: &mut ParamStore,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        g.value(loss).item()
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        g.backward(loss, store)?;
    }

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let (len, analytic) = {
            let p = store.get(&name)?;
            (p.value.len(), p.grad.data().to_vec())
        };
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = store.get(&name)?.value.data()[i];
            store.get_mut(&name)?.value.data_mut()[i] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[i] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        params.push(ParamCheck {
            name,
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::cell::Cell;

    #[test]
    fn empty_store_gives_empty_report() {
        let mut store = ParamStore::new();
        let report = finite_difference_check(
            &mut store,
            |g, _| Ok(g.input(Tensor::scalar(1.0))),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn detects_nondeterminism() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true);
        let calls = Cell::new(0.0);
        let err = finite_difference_check(
            &mut store,
            |g, s| {
                calls.set(calls.get() + 1.0);
                let w = g.param(s, "w")?;
                Ok(g.add_scalar(w, calls.get()))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn quadratic_norm_matches_central_differences() {
        // loss = ‖W·v‖²
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap(),
            true,
        );
        let v = Tensor::matrix(3, 1, vec![1.5, -0.5, 2.0]).unwrap();
        let report = finite_difference_check(
            &mut store,
            |g, s| {
                let w = g.param(s, "w")?;
                let x = g.input(v.clone());
                let y = g.matmul(w, x)?;
                Ok(g.dot(y, y)?)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params[0].checked, 6);
    }
}
