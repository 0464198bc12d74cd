//! Central finite-difference gradient verification. The checker re-runs the
//! forward pass at perturbed inputs and never touches the tape's backward
//! path, so it stays an independent oracle for it.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};

/// Largest relative disagreement between analytic and central-difference
/// gradients of `build` (a scalar-valued graph of one differentiable input),
/// over up to `max_coords` coordinates sampled with `seed`.
pub fn finite_diff_max_rel_err<F>(
    build: F,
    input: &ArrayD<f64>,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf_grad(input.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        g.grad(x).expect("loss must depend on the input").clone()
    };
    let eval = |pt: &ArrayD<f64>| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(pt.clone());
        let loss = build(&mut g, x);
        g.scalar(loss)
    };

    let n = input.len();
    let mut coords: Vec<usize> = (0..n).collect();
    if n > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }

    let flat_analytic = analytic.as_slice().expect("standard layout");
    let mut worst = 0.0_f64;
    let mut point = input.clone();
    for &i in &coords {
        let orig = point.as_slice().expect("standard layout")[i];
        point.as_slice_mut().unwrap()[i] = orig + eps;
        let f_plus = eval(&point);
        point.as_slice_mut().unwrap()[i] = orig - eps;
        let f_minus = eval(&point);
        point.as_slice_mut().unwrap()[i] = orig;
        let fd = (f_plus - f_minus) / (2.0 * eps);
        let an = flat_analytic[i];
        let denom = an.abs().max(fd.abs()).max(1e-5);
        worst = worst.max((an - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient_matches() {
        let x0 = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let err = finite_diff_max_rel_err(
            |g, x| {
                let sq = autodiff::mul(g, x, x);
                autodiff::mean_all(g, sq)
            },
            &x0,
            1e-5,
            16,
            0,
        );
        assert!(err < 1e-8, "rel err {err}");
    }
}
