//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Pass threshold on the per-entry error.
    pub tol: f64,
    /// Magnitude below which the error becomes absolute: the per-entry error
    /// is `|a - n| / max(floor, |a|, |n|)`.
    pub floor: f64,
    /// Entries probed per input; larger inputs are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Step and tolerance for `T`: 1e-3 / 1e-3 in single, 1e-6 / 1e-6 in double.
    pub fn for_precision<T: Scalar>() -> Self {
        Self {
            eps: T::FD_EPS,
            tol: if T::BYTES == 4 { 1e-3 } else { 1e-6 },
            floor: 1.0,
            max_entries: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_err <= self.tol)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "  {:<28} err {:.3e} (entry {}, analytic {:.6e}, numeric {:.6e}, {} probed)",
                r.name, r.max_err, r.worst_index, r.analytic, r.numeric, r.checked
            )?;
        }
        write!(f, "  max {:.3e} / tol {:.1e}: {}", self.max_err(), self.tol, if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn entry_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / floor.max(a.abs()).max(n.abs())
}

fn probe_indices(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if len <= opts.max_entries {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = sample(&mut rng, len, opts.max_entries).into_vec();
    idx.sort_unstable();
    idx
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", "scalar output", format!("{:?}", t.shape())));
    }
    Ok(t.data()[0].as_f64())
}

/// Checks `f` against central differences with respect to each named input.
/// `f` runs on an evaluation-mode graph.
pub fn grad_check<T, F>(inputs: &[(&str, Tensor<T>)], f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let mut values: Vec<Tensor<T>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let mut rep = InputReport {
            name: name.to_string(),
            max_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in probe_indices(t.len(), opts, k as u64 + 1) {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = T::of(orig.as_f64() + opts.eps);
            let plus = eval(&values)?;
            values[k].data_mut()[i] = T::of(orig.as_f64() - opts.eps);
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[k][i];
            let err = entry_err(a, numeric, opts.floor);
            rep.checked += 1;
            if err >= rep.max_err {
                rep.max_err = err;
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    Ok(GradReport {
        inputs: reports,
        tol: opts.tol,
    })
}

/// Checks `f` with respect to the parameters `ids` of `store`.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut probe = store.clone();
    probe.zero_grad();
    g.accumulate_param_grads(&mut probe);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };

    let mut reports = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = probe.grad(id).data().iter().map(|x| x.as_f64()).collect();
        let mut rep = InputReport {
            name: probe.get(id).name.clone(),
            max_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in probe_indices(analytic.len(), opts, k as u64 + 1) {
            let orig = probe.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = T::of(orig.as_f64() + opts.eps);
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = T::of(orig.as_f64() - opts.eps);
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = entry_err(analytic[i], numeric, opts.floor);
            rep.checked += 1;
            if err >= rep.max_err {
                rep.max_err = err;
                rep.worst_index = i;
                rep.analytic = analytic[i];
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    Ok(GradReport {
        inputs: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::graph::Backward;

    #[test]
    fn linear_passes_single_precision() {
        let x = Tensor::<f32>::from_fn(&[4, 8], |i| ((i * 37 % 17) as f32 - 8.0) / 8.0);
        let w = Tensor::<f32>::from_fn(&[8, 3], |i| ((i * 11 % 13) as f32 - 6.0) / 10.0);
        let b = Tensor::<f32>::from_fn(&[3], |i| i as f32 * 0.1);
        let rep = grad_check(
            &[("x", x), ("w", w), ("b", b)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                Ok(g.sum(y))
            },
            &GradCheckOptions::for_precision::<f32>(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
    }

    struct Corrupt;
    impl Backward<f64> for Corrupt {
        fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|v| v * 3.0).collect())]
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::<f64>::from_fn(&[5], |i| i as f64 * 0.3);
        let rep = grad_check(
            &[("x", x)],
            |g, v| {
                let y = g.value(v[0]).clone();
                let y = g.push(y, vec![v[0]], Box::new(Corrupt));
                Ok(g.sum(y))
            },
            &GradCheckOptions::for_precision::<f64>(),
        )
        .unwrap();
        assert!(!rep.passed());
        assert!((rep.max_err() - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_uses_absolute_floor() {
        let x = Tensor::<f64>::from_fn(&[6], |i| (i as f64).cos());
        let rep = grad_check(
            &[("x", x)],
            |g, v| {
                let y = g.softmax(v[0], 0)?;
                Ok(g.sum(y))
            },
            &GradCheckOptions::for_precision::<f64>(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
        assert!(rep.inputs[0].analytic.abs() < 1e-12);
    }
}
