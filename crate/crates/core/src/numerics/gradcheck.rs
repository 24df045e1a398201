//! Central finite-difference checks against the taped gradients.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for each input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds the scalar function `f` over `inputs` as graph variables and
/// compares its taped gradient with central differences of step `h`.
pub fn check_gradients<Fun>(inputs: &[Tensor<f64>], h: f64, f: Fun) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    Ok(GradCheck { rel_errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const POINTS: u64 = 10;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Projects a tensor output to a scalar with a fixed random weighting so
    /// every output entry contributes a distinct coefficient.
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let w = random(g.shape(y), &mut rng);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check_at_points(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = check_gradients(&inputs, H, |g, v| {
                let y = (&f)(g, v)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project(g, y, point)
                }
            })
            .unwrap();
            assert!(report.max_rel_error() < TOL, "point {point}: {:?}", report.rel_errors);
        }
    }

    #[test]
    fn sum_gradient_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn backward_on_foreign_node_errors() {
        let mut other = Graph::<f64>::new();
        let a = other.constant(Tensor::scalar(1.0));
        let b = other.constant(Tensor::scalar(1.0));
        let far = other.add(a, b).unwrap();
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(far), Err(crate::error::Error::BackwardBeforeForward)));
    }

    #[test]
    fn fd_matmul() {
        check_at_points(&[&[3, 3], &[3, 3]], |g, v| g.matmul(v[0], v[1]));
        check_at_points(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.matmul_ext(v[0], v[1], true, 0.7));
        check_at_points(&[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul_ext(v[0], v[1], false, 1.0));
    }

    #[test]
    fn fd_elementwise() {
        check_at_points(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
        check_at_points(&[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]));
        check_at_points(&[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
        check_at_points(&[&[4, 3], &[3]], |g, v| g.add_bias(v[0], v[1]));
        check_at_points(&[&[4, 3]], |g, v| Ok(g.scale(v[0], -1.7)));
        check_at_points(&[&[4, 3], &[4, 1]], |g, v| g.mul_rows(v[0], v[1]));
        check_at_points(&[&[4, 3]], |g, v| Ok(g.sigmoid(v[0])));
        check_at_points(&[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2]));
    }

    #[test]
    fn fd_relu_away_from_kink() {
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let mut x = random(&[3, 4], &mut rng);
            // keep |x| > 10h so the kink is never straddled
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 1e-3 {
                    *v += 0.01
                }
            });
            let r = check_gradients(&[x], H, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, point)
            })
            .unwrap();
            assert!(r.max_rel_error() < TOL);
        }
    }

    #[test]
    fn fd_layer_norm() {
        check_at_points(&[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn fd_softmax_and_masking() {
        check_at_points(&[&[3, 4]], |g, v| g.softmax(v[0]));
        let mask = Mask::new(&[3, 4], vec![false, true, false, false, true, false, false, true, false, false, true, false]).unwrap();
        check_at_points(&[&[3, 4]], move |g, v| {
            let m = g.mask_fill(v[0], mask.clone())?;
            g.softmax(m)
        });
    }

    #[test]
    fn masked_softmax_entries_get_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[1, 3], &[0.2, 0.9, -0.4]).unwrap());
        let mask = Mask::new(&[1, 3], vec![false, true, false]).unwrap();
        let m = g.mask_fill(x, mask).unwrap();
        let p = g.softmax(m).unwrap();
        let w = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let y = g.mul(p, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let d = grads.wrt(x).unwrap().data();
        assert_eq!(d[1], 0.0);
        assert!(d[0] != 0.0 && d[2] != 0.0);
    }

    #[test]
    fn fd_heads_and_embedding() {
        check_at_points(&[&[6, 4]], |g, v| g.split_heads(v[0], 2, 3, 2));
        check_at_points(&[&[4, 3, 2]], |g, v| g.merge_heads(v[0], 2, 2));
        check_at_points(&[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    }

    #[test]
    fn split_merge_round_trip() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = g.constant(random(&[6, 8], &mut rng));
        let s = g.split_heads(x, 2, 3, 4).unwrap();
        assert_eq!(g.shape(s), &[8, 3, 2]);
        let m = g.merge_heads(s, 2, 4).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn fd_cross_entropy() {
        check_at_points(&[&[4, 5]], |g, v| g.cross_entropy(v[0], &[1, 4, 0, 2], &[false, true, false, false]));
    }
}
