use ndarray::Zip;

use crate::error::{check_dim, Result};
use crate::scalar::Real;

use super::mlp::{Layer, Mlp, MlpGrads};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Layer<T>>,
    v: Vec<Layer<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(mlp: &Mlp<T>) -> Self {
        let zeros = MlpGrads::zeros_like(mlp).layers;
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments, shaped like the network's layers.
    pub fn moments(&self) -> (&[Layer<T>], &[Layer<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds saved state, checking it matches `mlp`.
    pub fn from_moments(mlp: &Mlp<T>, m: Vec<Layer<T>>, v: Vec<Layer<T>>, step: u64) -> Result<Self> {
        check_dim("adam moment layers", mlp.layers().len(), m.len())?;
        check_dim("adam moment layers", mlp.layers().len(), v.len())?;
        for ((l, a), b) in mlp.layers().iter().zip(&m).zip(&v) {
            for x in [a, b] {
                check_dim("adam moment rows", l.output_dim(), x.output_dim())?;
                check_dim("adam moment cols", l.input_dim(), x.input_dim())?;
            }
        }
        Ok(AdamState { m, v, step })
    }

    /// Bias-corrected Adam update with learning rate `lr`.
    pub fn step(&mut self, mlp: &mut Mlp<T>, grads: &MlpGrads<T>, cfg: &AdamConfig, lr: f64) -> Result<()> {
        check_dim("adam layers", self.m.len(), grads.layers.len())?;
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps) = (T::one(), T::lit(cfg.eps));
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let step_size = T::lit(lr / c1);
        let inv_sqrt_c2 = T::lit(1.0 / c2.sqrt());
        let update = |p: &mut T, g: &T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p -= step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
        };
        for (((layer, g), m), v) in mlp
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Head};
    use ndarray::{array, Array1};

    fn scalar_net(x: f64) -> Mlp<f64> {
        // one bias-only parameter of interest: y = 0·in + b
        Mlp::from_layers(
            vec![Layer {
                weight: array![[0.0]],
                bias: Array1::from_elem(1, x),
            }],
            Activation::Identity,
            Head::Linear,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(1.5);
        let before = net.clone();
        let mut st = AdamState::new(&net);
        let g = MlpGrads::zeros_like(&net);
        for _ in 0..5 {
            st.step(&mut net, &g, &AdamConfig::default(), 1e-2).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        let mut st = AdamState::new(&net);
        let mut g = MlpGrads::zeros_like(&net);
        g.layers[0].bias[0] = 0.37;
        g.layers[0].weight[[0, 0]] = -4.0;
        st.step(&mut net, &g, &AdamConfig::default(), 0.01).unwrap();
        // m̂ = g, v̂ = g² → Δ = -lr · g/(|g| + eps)
        let expect = -0.01 * 0.37 / (0.37 + 1e-8);
        assert!((net.layers()[0].bias[0] - expect).abs() < 1e-12);
        assert!((net.layers()[0].weight[[0, 0]] - 0.01 * 4.0 / (4.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut net = scalar_net(0.0);
        let mut st = AdamState::new(&net);
        let cfg = AdamConfig::default();
        for _ in 0..200 {
            let x = net.layers()[0].bias[0];
            let mut g = MlpGrads::zeros_like(&net);
            g.layers[0].bias[0] = 2.0 * (x - 3.0);
            st.step(&mut net, &g, &cfg, 0.1).unwrap();
        }
        assert!((net.layers()[0].bias[0] - 3.0).abs() < 1e-2);
        assert_eq!(st.step_count(), 200);
    }
}
