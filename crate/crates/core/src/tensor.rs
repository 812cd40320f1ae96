//! Dense row-major `f64` tensors, seeded initialization and the scalar
//! kernels (softmax, layer normalization) shared by the tape and by
//! inference code.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon for layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("tensor", "zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row slices; all rows must share a length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::Empty { op: "matrix" });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "matrix",
                    expected: vec![c],
                    got: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Seeded random source. The algorithm is fixed so a seed names one draw sequence.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream, e.g. one per epoch or per subsystem.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen())
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)); for matrices fan_out is the row count.
    FanScaled,
    Uniform(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn bound(self, shape: &[usize]) -> f64 {
        match self {
            Init::FanScaled => {
                let (fan_out, fan_in) = match shape {
                    [n] => (*n, *n),
                    [r, c] => (*r, *c),
                    _ => (shape[0], shape[1..].iter().product()),
                };
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            }
            Init::Uniform(b) => b,
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

pub fn init_params(shape: &[usize], rng: &mut Rng, scheme: Init) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::invalid("init_params", "zero extent"));
    }
    let n: usize = shape.iter().product();
    let data = match scheme {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::FanScaled | Init::Uniform(_) => {
            let b = scheme.bound(shape);
            (0..n).map(|_| rng.uniform(-b, b)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { op: "softmax" });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { op: "log_softmax" });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "log_softmax" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            expected: vec![x.len()],
            got: vec![gain.len(), bias.len()],
        });
    }
    if x.is_empty() {
        return Err(Error::Empty { op: "layer_norm" });
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm", "eps must be positive"));
    }
    let (mean, rstd) = moments(x, eps);
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b)
        .collect())
}

/// Mean and reciprocal standard deviation (population variance + eps).
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            let p = softmax(&[c, c, c]).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // exp(k)/Σexp evaluated by hand to 16 digits
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty { .. })));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let z = layer_norm(&[4.0; 5], &[1.0; 5], &[0.0; 5], LN_EPS).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));

        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], LN_EPS).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - s).abs() < 1e-15 && (y[1] + s).abs() < 1e-15);

        // mean 2, var 2/3: (x-2)/sqrt(2/3+1e-5)*2+1
        let y = layer_norm(&[1.0, 2.0, 3.0], &[2.0; 3], &[1.0; 3], LN_EPS).unwrap();
        let r = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [1.0 - 2.0 * r, 1.0, 1.0 + 2.0 * r];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((expected[0] - (-1.449_471_371_816_78)).abs() < 1e-9);

        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], LN_EPS).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&[16, 8], &mut Rng::new(3), Init::FanScaled).unwrap();
        let b = init_params(&[16, 8], &mut Rng::new(3), Init::FanScaled).unwrap();
        assert_eq!(a, b);
        let bias = init_params(&[8], &mut Rng::new(3), Init::Zeros).unwrap();
        assert!(bias.data().iter().all(|v| *v == 0.0));

        let big = init_params(&[768, 768], &mut Rng::new(11), Init::FanScaled).unwrap();
        let bound = (6.0f64 / 1536.0).sqrt();
        let (lo, hi) = big
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo >= -bound && hi <= bound);
        // a 590k-sample uniform draw fills most of the interval
        assert!(hi > 0.99 * bound && lo < -0.99 * bound);

        assert!(init_params(&[0, 3], &mut Rng::new(1), Init::FanScaled).is_err());
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }
}
