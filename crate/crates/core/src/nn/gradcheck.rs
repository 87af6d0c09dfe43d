//! Central finite-difference checks of reverse-mode gradients (64-bit).

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, NnError, Tensor, Var};

/// Gradient norms below this are treated as zero. Central differences of an
/// exactly zero gradient still come out near 1e-10 from roundoff.
pub const ZERO_FLOOR: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-input relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, ZERO_FLOOR)`
    /// over the checked coordinates, `a` analytic and `n` numeric.
    pub max_rel_error: f64,
    /// Index of the input with the worst error.
    pub worst_input: usize,
    pub coordinates_checked: usize,
}

/// Compare the gradient of the scalar built by `f` against central
/// differences with step `h`.
///
/// At most `max_coords` coordinates per input are perturbed (chosen with
/// `rng`); `None` checks every coordinate.
pub fn check_gradients<F, R, E>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<NnError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        coordinates_checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*var, input.shape());
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        report.coordinates_checked += coords.len();
        // gradients that vanish identically (a key bias under softmax, say)
        // are compared against an absolute floor instead of their own norm
        let denom = a2.sqrt().max(n2.sqrt()).max(ZERO_FLOOR);
        let rel = diff2.sqrt() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_input = i;
        }
    }
    Ok(report)
}
