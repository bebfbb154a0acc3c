//! Central finite-difference oracle for gradient verification.

use alloc::vec::Vec;

use crate::rng::Rng;

use super::ParamStore;

/// Coordinates sampled per parameter when a tensor is larger than this.
const COORDS_PER_PARAM: usize = 64;

/// Compares the gradients currently stored in `params` (populated by a prior
/// `backward` pass) against central finite differences of `loss_fn`.
///
/// Large tensors are subsampled to at least [`COORDS_PER_PARAM`] seeded
/// coordinates per parameter. The relative error uses
/// `max(|fd|, |grad|, 1e-8)` as denominator; the maximum over all sampled
/// coordinates is returned.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore,
    eps: f64,
    seed: u64,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        let numel = params.by_index(p).1.numel();
        let coords: Vec<usize> = if numel <= COORDS_PER_PARAM {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            all.truncate(COORDS_PER_PARAM);
            all
        };
        for &c in &coords {
            let analytic = params
                .by_index(p)
                .1
                .grad()
                .map(|g| g[c])
                .unwrap_or(0.0);
            let orig = params.by_index(p).1.data()[c];
            params.by_index_mut(p).data_mut()[c] = orig + eps;
            let plus = loss_fn(params);
            params.by_index_mut(p).data_mut()[c] = orig - eps;
            let minus = loss_fn(params);
            params.by_index_mut(p).data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use alloc::vec;

    #[test]
    fn quadratic_loss_checks_out() {
        // loss = 0.5 * ||theta||^2, gradient = theta.
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![10], data).unwrap()).unwrap();

        let loss = |s: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(s, "theta").unwrap();
            let pt = tape.transpose(p);
            let sq = tape.matmul(p, pt).unwrap();
            let half = tape.scale(sq, 0.5);
            let l = tape.sum_all(half);
            tape.scalar_value(l).unwrap()
        };
        let mut tape = Tape::new();
        let p = tape.param(&store, "theta").unwrap();
        let pt = tape.transpose(p);
        let sq = tape.matmul(p, pt).unwrap();
        let half = tape.scale(sq, 0.5);
        let l = tape.sum_all(half);
        tape.backward(l, &mut store).unwrap();

        let err = finite_difference_check(loss, &mut store, 1e-5, 1);
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_toy_matches_analytic_gradient() {
        // For mean CE, d loss / d logits = (softmax - onehot) / rows.
        let logits = vec![0.4, -1.2, 0.7, 2.0, 0.0, -0.5];
        let labels = [2usize, 0];
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::new(vec![2, 3], logits.clone()).unwrap()).unwrap();

        let loss = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(s, "logits").unwrap();
            let l = tape.cross_entropy(x, &labels).unwrap();
            tape.scalar_value(l).unwrap()
        };
        let mut tape = Tape::new();
        let x = tape.param(&store, "logits").unwrap();
        let l = tape.cross_entropy(x, &labels).unwrap();
        tape.backward(l, &mut store).unwrap();

        // Analytic gradient, computed straight from the formula.
        let grads = store.get("logits").unwrap().grad().unwrap().to_vec();
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits[r * 3..(r + 1) * 3];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..3 {
                let mut want = exps[c] / sum;
                if c == label {
                    want -= 1.0;
                }
                want /= 2.0;
                assert!((grads[r * 3 + c] - want).abs() < 1e-12);
            }
        }

        let err = finite_difference_check(loss, &mut store, 1e-5, 2);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn subsampling_is_seeded_and_bounded() {
        // A 1000-element parameter must not evaluate all 2000 perturbations.
        let mut store = ParamStore::new();
        store.insert("big", Tensor::zeros(vec![1000])).unwrap();
        store.get_mut("big").unwrap().zero_grad();
        let mut calls = 0usize;
        let _ = finite_difference_check(
            |_| {
                calls += 1;
                0.0
            },
            &mut store,
            1e-5,
            3,
        );
        assert_eq!(calls, 2 * COORDS_PER_PARAM);
    }
}
