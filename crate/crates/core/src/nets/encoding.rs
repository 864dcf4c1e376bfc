use crate::geometry::Vec3;
use crate::scalar::Real;

/// Sinusoidal lifting of a 3-vector: optional raw input, then
/// `sin(2^l π x), cos(2^l π x)` for octaves `l = 0..frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingConfig {
    pub frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            frequencies: 6,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn output_dim(&self) -> usize {
        3 * (usize::from(self.include_input) + 2 * self.frequencies)
    }

    pub fn encode<T: Real>(&self, x: Vec3<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    /// Layout: `[x | sin(π x) | cos(π x) | sin(2π x) | cos(2π x) | ...]`.
    pub fn encode_into<T: Real>(&self, x: Vec3<T>, out: &mut [T]) {
        debug_assert_eq!(out.len(), self.output_dim());
        let mut k = 0;
        if self.include_input {
            out[..3].copy_from_slice(&x.0);
            k = 3;
        }
        let mut freq = T::PI();
        for _ in 0..self.frequencies {
            for c in 0..3 {
                let (s, co) = (x[c] * freq).sin_cos();
                out[k + c] = s;
                out[k + 3 + c] = co;
            }
            k += 6;
            freq = freq + freq;
        }
    }

    /// Pulls a gradient on the encoding back to the raw 3-vector.
    pub fn vjp<T: Real>(&self, x: Vec3<T>, g: &[T]) -> Vec3<T> {
        debug_assert_eq!(g.len(), self.output_dim());
        let mut out = Vec3::zero();
        let mut k = 0;
        if self.include_input {
            for c in 0..3 {
                out[c] += g[c];
            }
            k = 3;
        }
        let mut freq = T::PI();
        for _ in 0..self.frequencies {
            for c in 0..3 {
                let (s, co) = (x[c] * freq).sin_cos();
                out[c] += freq * (co * g[k + c] - s * g[k + 3 + c]);
            }
            k += 6;
            freq = freq + freq;
        }
        out
    }
}
