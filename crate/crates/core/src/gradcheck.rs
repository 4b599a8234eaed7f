//! Central finite differences, used as the independent oracle for every
//! backward rule on the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Like [`finite_diff_grad`] for functions whose smoothness depends on a
/// discrete signature (the entmax supports). Coordinates where either probe
/// changes the signature are reported as `None`.
pub fn finite_diff_grad_stable(
    mut f: impl FnMut(&Tensor) -> (f64, Vec<bool>),
    x: &Tensor,
    h: f64,
) -> Vec<Option<f64>> {
    assert!(h > 0.0, "finite difference step must be positive");
    let (_, base) = f(x);
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let (plus, sig_plus) = f(&probe);
            probe.data_mut()[i] = orig - h;
            let (minus, sig_minus) = f(&probe);
            probe.data_mut()[i] = orig;
            (sig_plus == base && sig_minus == base).then(|| (plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Normwise relative error `‖a - n‖∞ / max(‖a‖∞, ‖n‖∞)`, skipping
/// coordinates where the numeric value is unavailable. Tiny gradients are
/// measured against an absolute floor of `1e-8`.
pub fn max_relative_error(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// [`max_relative_error`] with an explicit absolute floor on the scale.
pub fn relative_error_with_floor(analytic: &[f64], numeric: &[Option<f64>], floor: f64) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = floor;
    for (a, n) in analytic.iter().zip(numeric) {
        let Some(n) = n else { continue };
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

/// Outcome of [`check_tape_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest normwise relative error over the inputs.
    pub max_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a probe changed an attention support.
    pub skipped: usize,
}

/// Compares the tape gradient of the scalar built by `build` with respect
/// to each of `inputs` against central differences of step `h`. The inputs
/// enter `build` as leaves for the analytic pass and as constants for the
/// probes.
pub fn check_tape_gradients(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    // Central differences cannot resolve gradients below their own
    // rounding noise, roughly ε·|f| / h.
    let floor = 1e-8f64.max(1e4 * f64::EPSILON * tape.value(loss).item().abs() / h);
    let mut report = GradCheck {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut failure = None;
        let numeric = finite_diff_grad_stable(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                match build(&mut tape, &vars) {
                    Ok(loss) => (tape.value(loss).item(), tape.support_signature()),
                    Err(e) => {
                        failure.get_or_insert(e);
                        (f64::NAN, Vec::new())
                    }
                }
            },
            x,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let skipped = numeric.iter().filter(|n| n.is_none()).count();
        report.skipped += skipped;
        report.checked += numeric.len() - skipped;
        report.max_error =
            report
                .max_error
                .max(relative_error_with_floor(analytic.data(), &numeric, floor));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -4.0, 9.0]);
        let g = finite_diff_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn entmax_component_matches_closed_form_jvp() {
        use crate::normalize::{entmax, entmax_backward};
        let z = Tensor::vector(vec![0.4, -0.1, 0.9, -1.5]);
        let alpha = 1.5;
        let out = entmax(z.data(), alpha).unwrap();
        for k in 0..4 {
            let mut e = vec![0.0; 4];
            e[k] = 1.0;
            let analytic = entmax_backward(&out, alpha, &e);
            let numeric = finite_diff_grad_stable(
                |t| {
                    let o = entmax(t.data(), alpha).unwrap();
                    (o.probs[k], o.support)
                },
                &z,
                1e-5,
            );
            assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        }
    }
}
