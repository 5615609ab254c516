//! Training objective: an L1 penalty on each control axis in normalized
//! units, blended by `epsilon` (weight on the gain term).

/// Mean absolute error on gain and exposure, blended by `epsilon`:
/// `epsilon * mean|g_hat - g| + (1 - epsilon) * mean|e_hat - e|`.
/// Returns the loss and its gradient with respect to each prediction.
pub fn blended_l1(
    pred: &[(f64, f64)],
    target: &[(f64, f64)],
    epsilon: f64,
) -> (f64, Vec<(f64, f64)>) {
    assert_eq!(pred.len(), target.len());
    assert!(!pred.is_empty());
    let n = pred.len() as f64;
    let mut gain_err = 0.0;
    let mut exp_err = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&(pg, pe), &(tg, te)) in pred.iter().zip(target) {
        gain_err += (pg - tg).abs();
        exp_err += (pe - te).abs();
        // L1 subgradient; zero at an exact hit.
        let sg = if pg > tg { 1.0 } else if pg < tg { -1.0 } else { 0.0 };
        let se = if pe > te { 1.0 } else if pe < te { -1.0 } else { 0.0 };
        grad.push((epsilon * sg / n, (1.0 - epsilon) * se / n));
    }
    let loss = epsilon * gain_err / n + (1.0 - epsilon) * exp_err / n;
    (loss, grad)
}
