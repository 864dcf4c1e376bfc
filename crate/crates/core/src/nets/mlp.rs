use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    /// `ln(1 + e^{βz}) / β`, a smooth ReLU.
    Softplus { beta: f64 },
}

// Beyond this the tails are below f32 resolution; evaluating them would
// produce subnormals, which are very slow on most CPUs.
const SOFTPLUS_TAIL: f64 = 40.0;

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Softplus { beta } => {
                let b = T::lit(beta);
                let t = z * b;
                if t > T::lit(20.0) {
                    z
                } else if t < -T::lit(SOFTPLUS_TAIL) {
                    T::zero()
                } else {
                    t.exp().ln_1p() / b
                }
            }
        }
    }

    #[inline]
    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Softplus { beta } => {
                let t = z * T::lit(beta);
                if t < -T::lit(SOFTPLUS_TAIL) {
                    T::zero()
                } else if t > T::lit(SOFTPLUS_TAIL) {
                    T::one()
                } else {
                    T::one() / (T::one() + (-t).exp())
                }
            }
        }
    }
}

/// Output transform applied after the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Linear,
    /// Softmax onto the probability simplex.
    Simplex,
    /// Projection onto the unit sphere.
    UnitVector,
}

/// Pre-head vectors shorter than this cannot be normalized.
pub const MIN_UNIT_HEAD_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub head: Head,
    /// Zero the last layer so the network starts as the zero map.
    pub zero_last: bool,
    /// Constant for the last-layer bias (ignored when `zero_last`).
    pub last_bias: f64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, head: Head) -> Self {
        MlpSpec {
            input,
            hidden,
            output,
            activation: Activation::Softplus { beta: 100.0 },
            head,
            zero_last: false,
            last_bias: 0.0,
        }
    }
}

/// One affine map; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    activation: Activation,
    head: Head,
    /// Changes whenever parameters change; caches remember the value they saw.
    generation: u64,
}

impl<T: Clone> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Mlp {
            layers: self.layers.clone(),
            activation: self.activation,
            head: self.head,
            generation: self.generation,
        }
    }
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, o: &Self) -> bool {
        self.layers == o.layers && self.activation == o.activation && self.head == o.head
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    generation: u64,
    /// Input of every layer (the first is the network input).
    inputs: Vec<Array2<T>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Array2<T>>,
    output: Array2<T>,
    /// Pre-head norms, unit-vector head only.
    norms: Option<Array1<T>>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Gradients shaped exactly like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer::zeros(l.output_dim(), l.input_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * s);
            l.bias.mapv_inplace(|v| v * s);
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Real> Mlp<T> {
    /// Uniform fan-in initialization, `U(-√(6/fan_in), √(6/fan_in))` for hidden
    /// layers and `U(-1/√fan_in, 1/√fan_in)` for the last layer.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.input == 0 || spec.output == 0 || spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut dims = vec![spec.input];
        dims.extend(&spec.hidden);
        dims.push(spec.output);
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (inp, out) = (dims[l], dims[l + 1]);
            let last = l + 1 == n;
            if last && spec.zero_last {
                layers.push(Layer::zeros(out, inp));
                continue;
            }
            let bound = if last {
                1.0 / (inp as f64).sqrt()
            } else {
                (6.0 / inp as f64).sqrt()
            };
            let dist = Uniform::new_inclusive(-bound, bound);
            let weight = Array2::from_shape_fn((out, inp), |_| T::lit(dist.sample(rng)));
            let bias = if last {
                Array1::from_elem(out, T::lit(spec.last_bias))
            } else {
                Array1::zeros(out)
            };
            layers.push(Layer { weight, bias });
        }
        Ok(Mlp {
            layers,
            activation: spec.activation,
            head: spec.head,
            generation: next_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Layer<T>>, activation: Activation, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network without layers"));
        }
        for w in layers.windows(2) {
            check_dim("layer chaining", w[0].output_dim(), w[1].input_dim())?;
        }
        for l in &layers {
            check_dim("bias length", l.output_dim(), l.bias.len())?;
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite parameter"));
            }
        }
        Ok(Mlp {
            layers,
            activation,
            head,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.output_dim())
            .collect()
    }

    /// Flat parameter order: per layer, row-major weights then bias.
    pub fn param(&self, mut i: usize) -> T {
        for l in &self.layers {
            if i < l.weight.len() {
                return l.weight.as_slice().expect("contiguous")[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, mut i: usize, v: T) {
        self.generation = next_generation();
        for l in &mut self.layers {
            if i < l.weight.len() {
                l.weight.as_slice_mut().expect("contiguous")[i] = v;
                return;
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                l.bias[i] = v;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, T>) -> Result<MlpCache<T>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(a);
            if l + 1 < n {
                let act = self.activation;
                a = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                a = z;
            }
        }
        let (output, norms) = match self.head {
            Head::Linear => (a, None),
            Head::Simplex => {
                for mut row in a.rows_mut() {
                    let m = row.fold(T::neg_infinity(), |m, v| m.max(*v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let s: T = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                (a, None)
            }
            Head::UnitVector => {
                let mut norms = Array1::zeros(a.nrows());
                for (mut row, nrm) in a.rows_mut().into_iter().zip(norms.iter_mut()) {
                    let len = row.dot(&row).sqrt();
                    if !(len >= T::lit(MIN_UNIT_HEAD_NORM)) {
                        return Err(Error::DegenerateNormal(len.as_f64()));
                    }
                    row.mapv_inplace(|v| v / len);
                    *nrm = len;
                }
                (a, Some(norms))
            }
        };
        Ok(MlpCache {
            generation: self.generation,
            inputs,
            pre,
            output,
            norms,
        })
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let cache = self.forward_batch(view)?;
        Ok((cache.output.row(0).to_vec(), cache))
    }

    /// Reverse pass: parameter gradients summed over the batch, plus the
    /// gradient with respect to each input row when `want_input` is set.
    pub fn backward_batch(
        &self,
        cache: &MlpCache<T>,
        output_grad: ArrayView2<'_, T>,
        want_input: bool,
    ) -> Result<(MlpGrads<T>, Option<Array2<T>>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache("cache from a different architecture".into()));
        }
        check_dim("output gradient rows", cache.output.nrows(), output_grad.nrows())?;
        check_dim("output gradient cols", cache.output.ncols(), output_grad.ncols())?;

        let mut gz = match self.head {
            Head::Linear => output_grad.to_owned(),
            Head::Simplex => {
                let y = &cache.output;
                let mut g = output_grad.to_owned();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s = grow.dot(&yrow);
                    grow.zip_mut_with(&yrow, |gv, yv| *gv = *yv * (*gv - s));
                }
                g
            }
            Head::UnitVector => {
                let y = &cache.output;
                let norms = cache.norms.as_ref().expect("unit head caches norms");
                let mut g = output_grad.to_owned();
                for ((mut grow, yrow), n) in g.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let s = grow.dot(&yrow);
                    let inv = T::one() / *n;
                    grow.zip_mut_with(&yrow, |gv, yv| *gv = (*gv - *yv * s) * inv);
                }
                g
            }
        };

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weight = gz.t().dot(&cache.inputs[l]);
            let bias = gz.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            if l > 0 {
                let mut ga = gz.dot(&layer.weight);
                let act = self.activation;
                ga.zip_mut_with(&cache.pre[l - 1], |g, z| *g = *g * act.derivative(*z));
                gz = ga;
            } else if want_input {
                input_grad = Some(gz.dot(&layer.weight));
            }
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, input_grad))
    }

    pub fn backward(&self, cache: &MlpCache<T>, output_grad: &[T]) -> Result<(MlpGrads<T>, Vec<T>)> {
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|_| Error::invalid("output gradient shape"))?;
        let (grads, gin) = self.backward_batch(cache, g, true)?;
        Ok((grads, gin.expect("requested").row(0).to_vec()))
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| U::lit(v.as_f64())),
                    bias: l.bias.mapv(|v| U::lit(v.as_f64())),
                })
                .collect(),
            activation: self.activation,
            head: self.head,
            generation: next_generation(),
        }
    }

    /// Order-sensitive digest of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut spec = MlpSpec::new(4, vec![8, 8], 2, Head::Linear);
        spec.zero_last = true;
        let mlp = Mlp::<f64>::init(&spec, &mut rng()).unwrap();
        let mut z = mlp.clone();
        for l in z.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let (y, _) = z.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let (y, _) = mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mlp = Mlp::from_layers(
            vec![Layer {
                weight: Array2::<f64>::eye(3),
                bias: Array1::zeros(3),
            }],
            Activation::Identity,
            Head::Linear,
        )
        .unwrap();
        let (y, _) = mlp.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(y, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mlp = Mlp::from_layers(
            vec![Layer {
                weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
                bias: array![0.1, 0.2, 0.3],
            }],
            Activation::Identity,
            Head::Linear,
        )
        .unwrap();
        let x = [0.7, -1.3];
        let c = [2.0, -1.0, 0.5];
        let (_, cache) = mlp.forward(&x).unwrap();
        let (g, gin) = mlp.backward(&cache, &c).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(g.layers[0].weight[[i, j]], c[i] * x[j]);
            }
            assert_eq!(g.layers[0].bias[i], c[i]);
        }
        assert_eq!(gin, vec![2.0 - 3.0 + 2.5, 4.0 - 4.0 + 3.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let spec = MlpSpec::new(3, vec![16, 16], 4, Head::Simplex);
        let mlp = Mlp::<f64>::init(&spec, &mut rng()).unwrap();
        let (_, cache) = mlp.forward(&[0.3, 0.1, -0.2]).unwrap();
        let (g, gin) = mlp.backward(&cache, &[0.0; 4]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heads_respect_contracts() {
        let mut r = rng();
        let simplex = Mlp::<f64>::init(&MlpSpec::new(3, vec![8], 5, Head::Simplex), &mut r).unwrap();
        let unit = Mlp::<f64>::init(&MlpSpec::new(3, vec![8], 3, Head::UnitVector), &mut r).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-50.0..50.0)).collect();
            let (y, _) = simplex.forward(&x).unwrap();
            assert!(y.iter().all(|v| *v >= 0.0));
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let (y, _) = unit.forward(&x).unwrap();
            assert!((y.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_head_rejects_degenerate_vector() {
        let mut spec = MlpSpec::new(3, vec![4], 3, Head::UnitVector);
        spec.zero_last = true;
        let mlp = Mlp::<f64>::init(&spec, &mut rng()).unwrap();
        assert!(matches!(mlp.forward(&[1.0, 2.0, 3.0]), Err(Error::DegenerateNormal(_))));
    }

    #[test]
    fn stale_and_mismatched_inputs_rejected() {
        let spec = MlpSpec::new(3, vec![4], 1, Head::Linear);
        let mut mlp = Mlp::<f64>::init(&spec, &mut rng()).unwrap();
        assert!(matches!(mlp.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        let (_, cache) = mlp.forward(&[1.0, 2.0, 3.0]).unwrap();
        mlp.set_param(0, 0.5);
        assert!(matches!(mlp.backward(&cache, &[1.0]), Err(Error::StaleCache(_))));
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let mlp = Mlp::<f64>::init(&MlpSpec::new(3, vec![16, 16], 2, Head::Linear), &mut rng()).unwrap();
        let xs = array![[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9]];
        let batch = mlp.forward_batch(xs.view()).unwrap();
        for (i, row) in xs.rows().into_iter().enumerate() {
            let (y, _) = mlp.forward(row.as_slice().unwrap()).unwrap();
            let (y2, _) = mlp.forward(row.as_slice().unwrap()).unwrap();
            assert_eq!(y, y2);
            for (a, b) in y.iter().zip(batch.output().row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable_and_smooth() {
        let a = Activation::Softplus { beta: 100.0 };
        assert_eq!(a.apply(5.0f64), 5.0);
        assert!(a.apply(-5.0f64) >= 0.0);
        assert!((a.apply(0.0f64) - 2f64.ln() / 100.0).abs() < 1e-15);
        assert!((a.derivative(0.0f64) - 0.5).abs() < 1e-15);
        assert!(a.apply(-1e3f32).is_finite() && a.apply(1e3f32).is_finite());
    }
}
