//! Independent oracles for tests: central finite differences and
//! brute-force metrics. Nothing here shares code with the implementations
//! it checks.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error, with `floor` guarding near-zero
/// denominators: `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Average precision by brute force: for every cut-off `k` in the ranking
/// recount true positives from scratch and weight precision@k by the recall
/// gained at that rank. Ties keep their input order (stable sort).
pub fn brute_force_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps this independent of the std sort used elsewhere
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] < scores[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=order.len() {
        let tp = order[..k].iter().filter(|&&i| labels[i]).count() as f64;
        let precision = tp / k as f64;
        let recall = tp / positives;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_cubic() {
        let g = central_difference(&mut |x| x[0].powi(3), &[2.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn brute_force_ap_hand_case() {
        let ap = brute_force_average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, true]);
        assert!((ap - (1.0 / 3.0 + 2.0 / 9.0 + 0.25)).abs() < 1e-15);
    }
}
