//! Central-difference gradient checking.

use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Elements where both gradients are below this magnitude are compared
    /// by absolute error only.
    pub abs_floor: f64,
    /// Checks at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            abs_floor: 1e-7,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
    /// Elements under the absolute floor whose absolute error exceeded it.
    pub floor_violations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.floor_violations == 0
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. `f` must be deterministic.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves);
    assert_eq!(out.value().len(), 1, "gradient check needs a scalar output");
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.iter().map(|t| t.as_standard_layout().into_owned()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match opts.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let a_flat: Vec<f64> = analytic[i].as_standard_layout().iter().copied().collect();
        for e in (0..n).step_by(stride) {
            let orig = work[i].as_slice().unwrap()[e];
            work[i].as_slice_mut().unwrap()[e] = orig + opts.step;
            let plus = eval(&work);
            work[i].as_slice_mut().unwrap()[e] = orig - opts.step;
            let minus = eval(&work);
            work[i].as_slice_mut().unwrap()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = a_flat[e];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if scale < opts.abs_floor {
                if abs > opts.abs_floor {
                    report.floor_violations += 1;
                }
                continue;
            }
            let rel = abs / scale;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, e));
            }
        }
    }
    report
}
