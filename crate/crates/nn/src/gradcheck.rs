//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries_per_tensor = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Entries whose central difference straddled a kink and were settled
    /// by a one-sided or shorter-step estimate.
    pub kinks: usize,
    pub non_finite: bool,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (tol {:.0e}) over {} entries ({} at kinks), worst at {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.kinks,
            self.worst
        )
    }
}

/// Compare the analytic gradient of the scalar `f(params, inputs)` with
/// central differences, for every parameter in `store` and every input.
pub fn gradcheck<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&Params, &[Var]) -> Result<Var>,
{
    let params = Params::new(store, true);
    let input_vars: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let loss = f(&params, &input_vars)?;
    let grads = loss.backward();
    let param_grads = params.collect_grads(&grads);
    let input_grads: Vec<Tensor> = input_vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(loss);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let p = Params::new(store, false);
        let vars: Vec<Var> = inputs.iter().cloned().map(Var::constant).collect();
        Ok(f(&p, &vars)?.value().item())
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match opts.max_entries_per_tensor {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::from("-"),
        checked: 0,
        kinks: 0,
        non_finite: false,
        tolerance: opts.tolerance,
        passed: true,
    };
    let rel = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor)
    };
    let f0 = eval(store, inputs)?;

    // Central difference first. Piecewise-linear ops (bilinear sampling)
    // have kinks; when a kink falls inside the stencil the central estimate
    // is not an oracle, so retry one-sided on either side and at a tenth of
    // the step before calling the entry a mismatch.
    let mut check = |name: &str, i: usize, analytic: f64, f_at: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        report.checked += 1;
        let h = opts.step;
        let (fp, fm) = (f_at(h)?, f_at(-h)?);
        let central = (fp - fm) / (2.0 * h);
        if !analytic.is_finite() || !central.is_finite() {
            report.non_finite = true;
            report.worst = format!("{}[{}]", name, i);
            return Ok(());
        }
        let mut err = rel(analytic, central);
        if err >= opts.tolerance {
            let mut best = rel(analytic, (fp - f0) / h).min(rel(analytic, (f0 - fm) / h));
            if best >= opts.tolerance {
                let h2 = h / 10.0;
                let (fp2, fm2) = (f_at(h2)?, f_at(-h2)?);
                best = best
                    .min(rel(analytic, (fp2 - fm2) / (2.0 * h2)))
                    .min(rel(analytic, (fp2 - f0) / h2))
                    .min(rel(analytic, (f0 - fm2) / h2));
            }
            if best < opts.tolerance {
                report.kinks += 1;
            }
            err = best;
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{}[{}]", name, i);
        }
        Ok(())
    };

    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let Some(analytic) = param_grads.get(name) else { continue };
        for i in pick(analytic.numel()) {
            let orig = work.get(name).unwrap().data()[i];
            let mut f_at = |d: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[i] = orig + d;
                let v = eval(&work, inputs);
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                v
            };
            check(name, i, analytic.data()[i], &mut f_at)?;
        }
    }

    let mut work_inputs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let label = format!("input{}", k);
        for i in pick(analytic.numel()) {
            let orig = work_inputs[k].data()[i];
            let mut f_at = |d: f64| -> Result<f64> {
                work_inputs[k].data_mut()[i] = orig + d;
                let v = eval(store, &work_inputs);
                work_inputs[k].data_mut()[i] = orig;
                v
            };
            check(&label, i, analytic.data()[i], &mut f_at)?;
        }
    }

    report.passed = !report.non_finite && report.max_rel_error < opts.tolerance;
    Ok(report)
}
