//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl GradCheck {
    /// `f` builds a scalar from the given parameter leaves. It is re-run once
    /// for the analytic pass and twice per coordinate for the numeric pass.
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();

        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.check()?;
            let v = g.scalar(out);
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            Ok(v)
        };

        let mut work = params.to_vec();
        self.compare(&analytic, &mut work, |w| eval(w))
    }

    /// Same check for model code written against a [`Session`]: every entry of
    /// `store` is a checked parameter.
    pub fn run_store<F>(&self, f: F, store: &ParamStore) -> Result<GradReport>
    where
        F: Fn(&mut Session) -> Result<Var>,
    {
        let mut s = Session::train(store);
        let out = f(&mut s)?;
        s.g.backward(out)?;
        let grads = s.grads();
        let analytic: Vec<Vec<f64>> = (0..store.len())
            .map(|i| grads.get(i).map_or_else(|| vec![0.0; store.entry(i).1.len()], <[f64]>::to_vec))
            .collect();

        let mut work: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        self.compare(&analytic, &mut work, |w| {
            let mut perturbed = ParamStore::new();
            for (n, t) in names.iter().zip(w) {
                perturbed.insert(n.clone(), t.clone());
            }
            let mut s = Session::infer(&perturbed);
            let out = f(&mut s)?;
            s.g.check()?;
            Ok(s.g.scalar(out))
        })
    }

    fn compare(
        &self,
        analytic: &[Vec<f64>],
        work: &mut [Tensor],
        eval: impl Fn(&[Tensor]) -> Result<f64>,
    ) -> Result<GradReport> {
        let mut report = GradReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            tolerance: self.tolerance,
            coordinates: 0,
        };
        for pi in 0..work.len() {
            for k in 0..work[pi].len() {
                let orig = work[pi].data()[k];
                work[pi].data_mut()[k] = orig + self.step;
                let up = eval(work)?;
                work[pi].data_mut()[k] = orig - self.step;
                let down = eval(work)?;
                work[pi].data_mut()[k] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFinite { op: "grad_check" });
                }

                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[pi][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                report.coordinates += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (pi, k);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}
