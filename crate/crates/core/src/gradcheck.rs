//! Central finite-difference gradient checking.
//!
//! The differentiation path here is independent of the reverse-mode engine:
//! only forward evaluations are used, so agreement between the two is a real
//! cross-check rather than a tautology.

/// Central differences (f(x+h) - f(x-h)) / 2h for every entry of every
/// parameter buffer. `eval` must be a pure function of the buffers.
pub fn fd_grads<F>(params: &[Vec<f64>], mut eval: F, h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for pi in 0..params.len() {
        for i in 0..params[pi].len() {
            let orig = work[pi][i];
            work[pi][i] = orig + h;
            let up = eval(&work);
            work[pi][i] = orig - h;
            let down = eval(&work);
            work[pi][i] = orig;
            grads[pi][i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Relative error with a small absolute floor so that near-zero gradient
/// pairs compare by absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

/// Largest relative error across paired buffers.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient buffers must pair up");
        for (&av, &nv) in a.iter().zip(n) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}
