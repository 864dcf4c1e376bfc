use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Real;

use super::mlp::Mlp;

/// Anything with a flat parameter vector and an analytic gradient.
pub trait GradTarget<T: Real> {
    fn param_count(&self) -> usize;
    fn param(&self, i: usize) -> T;
    fn set_param(&mut self, i: usize, v: T);
    /// Loss and its gradient over every parameter, in flat order.
    fn loss_and_grad(&self) -> Result<(T, Vec<T>)>;
    fn loss(&self) -> Result<T> {
        self.loss_and_grad().map(|(l, _)| l)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero components
/// from turning difference-quotient noise into large ratios.
pub(crate) fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE)
}

/// Floor relative to the gradient scale: `1e-3 · max_i |g_i|`, at least 1e-6.
pub(crate) fn error_floor(grad: impl Iterator<Item = f64>) -> f64 {
    (grad.fold(0.0f64, |m, v| m.max(v.abs())) * 1e-3).max(1e-6)
}

/// Central differences over `samples` randomly chosen parameters; returns the
/// worst relative error against the analytic gradient (see [`error_floor`]).
pub fn gradient_check<T: Real, G: GradTarget<T>>(
    target: &mut G,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let n = target.param_count();
    let (_, analytic) = target.loss_and_grad()?;
    let floor = error_floor(analytic.iter().map(|v| v.as_f64()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, n, samples.min(n));
    let h = T::lit(step);
    let mut worst = 0.0f64;
    for i in picks.iter() {
        let orig = target.param(i);
        target.set_param(i, orig + h);
        let lp = target.loss()?;
        target.set_param(i, orig - h);
        let lm = target.loss()?;
        target.set_param(i, orig);
        let fd = (lp - lm).as_f64() / (2.0 * step);
        worst = worst.max(relative_error(analytic[i].as_f64(), fd, floor));
    }
    Ok(worst)
}

/// Loss functional `L(y)` returning its value and `∂L/∂y`.
pub type OutputLoss<'a, T> = dyn Fn(&[T]) -> (T, Vec<T>) + 'a;

/// Gradient-check harness for a single network on one probe input.
pub struct MlpProbe<'a, T> {
    pub mlp: Mlp<T>,
    pub input: Vec<T>,
    pub loss: &'a OutputLoss<'a, T>,
}

impl<T: Real> GradTarget<T> for MlpProbe<'_, T> {
    fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn param(&self, i: usize) -> T {
        self.mlp.param(i)
    }

    fn set_param(&mut self, i: usize, v: T) {
        self.mlp.set_param(i, v)
    }

    fn loss_and_grad(&self) -> Result<(T, Vec<T>)> {
        let (y, cache) = self.mlp.forward(&self.input)?;
        let (l, gy) = (self.loss)(&y);
        let (g, _) = self.mlp.backward(&cache, &gy)?;
        Ok((l, g.flat()))
    }

    fn loss(&self) -> Result<T> {
        let (y, _) = self.mlp.forward(&self.input)?;
        Ok((self.loss)(&y).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Head, Layer, MlpSpec};
    use ndarray::{Array1, Array2};
    use rand::Rng;

    fn dot_loss(c: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |y: &[f64]| (y.iter().zip(&c).map(|(a, b)| a * b).sum(), c.clone())
    }

    fn probe_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn two_layer_nets_pass_for_every_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for head in [Head::Linear, Head::Simplex, Head::UnitVector] {
            let mlp = Mlp::<f64>::init(&MlpSpec::new(5, vec![12], 4, head), &mut rng).unwrap();
            let loss = dot_loss(probe_input(&mut rng, 4));
            let mut probe = MlpProbe {
                mlp,
                input: probe_input(&mut rng, 5),
                loss: &loss,
            };
            let err = gradient_check(&mut probe, 60, 1e-4, 1).unwrap();
            assert!(err < 1e-4, "{head:?}: {err}");
        }
    }

    struct Corrupted<'a>(MlpProbe<'a, f64>);

    impl GradTarget<f64> for Corrupted<'_> {
        fn param_count(&self) -> usize {
            self.0.param_count()
        }
        fn param(&self, i: usize) -> f64 {
            self.0.param(i)
        }
        fn set_param(&mut self, i: usize, v: f64) {
            self.0.set_param(i, v)
        }
        fn loss_and_grad(&self) -> Result<(f64, Vec<f64>)> {
            let (l, g) = self.0.loss_and_grad()?;
            Ok((l, g.into_iter().map(|v| v * 1.5).collect()))
        }
        fn loss(&self) -> Result<f64> {
            self.0.loss()
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mlp = Mlp::<f64>::init(&MlpSpec::new(3, vec![8], 2, Head::Linear), &mut rng).unwrap();
        let loss = dot_loss(vec![1.0, -2.0]);
        let mut bad = Corrupted(MlpProbe {
            mlp,
            input: vec![0.2, 0.4, -0.1],
            loss: &loss,
        });
        assert!(gradient_check(&mut bad, 40, 1e-4, 3).unwrap() > 1e-2);
    }

    #[test]
    fn single_bias_network() {
        let mlp = Mlp::from_layers(
            vec![Layer {
                weight: Array2::zeros((1, 0)),
                bias: Array1::from_elem(1, 0.3),
            }],
            Activation::Identity,
            Head::Linear,
        )
        .unwrap();
        let loss = |y: &[f64]| (y[0] * y[0], vec![2.0 * y[0]]);
        let mut probe = MlpProbe {
            mlp,
            input: vec![],
            loss: &loss,
        };
        assert!(gradient_check(&mut probe, 1, 1e-4, 0).unwrap() < 1e-6);
    }
}
