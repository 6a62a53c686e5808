//! Central finite-difference gradient checking.
//!
//! Kept free of any tape machinery on the numeric side: the oracle only
//! ever calls the supplied closure on plain perturbed inputs.

/// Central differences of `f` w.r.t. every entry of every input vector.
pub fn central_differences(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += h;
            let mut minus = inputs.to_vec();
            minus[i][j] -= h;
            grad[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Maximum mixed relative/absolute error between two gradient sets.
pub fn max_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], abs_floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient length mismatch");
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(abs_floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Compare analytic gradients against central differences.
pub fn assert_gradients_close(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    h: f64,
    rel_tol: f64,
    context: &str,
) {
    let numeric = central_differences(f, inputs, h);
    let err = max_error(analytic, &numeric, 1e-3);
    assert!(
        err <= rel_tol,
        "{}: gradient mismatch, max rel err {:.3e} > {:.1e}\nanalytic: {:?}\nnumeric:  {:?}",
        context,
        err,
        rel_tol,
        analytic,
        numeric
    );
}
