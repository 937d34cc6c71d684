//! Dense row-major `f32` tensors, the handful of kernels the engine needs,
//! and a counter-based random stream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::mask::AttentionMask;

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn slab(&self, index: usize) -> Result<Tensor> {
        let Some((&lead, rest)) = self.shape.split_first() else {
            return dim_err("cannot slice a scalar");
        };
        if index >= lead {
            return dim_err(format!("index {index} out of range for leading extent {lead}"));
        }
        let step: usize = rest.iter().product();
        Tensor::new(rest, self.data[index * step..(index + 1) * step].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return dim_err("cannot stack zero tensors");
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return dim_err(format!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return dim_err(format!(
            "matmul needs 2-d operands, got {:?} and {:?}",
            a.shape, b.shape
        ));
    };
    if k != k2 {
        return dim_err(format!("matmul inner extents {k} vs {k2}"));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Apply `weight[C_out×C_in]` to the last axis of `x`, without bias.
pub fn linear_nobias(weight: &Tensor, x: &Tensor) -> Result<Tensor> {
    let &[c_out, c_in] = weight.shape() else {
        return dim_err(format!("weight must be 2-d, got {:?}", weight.shape));
    };
    let Some(&last) = x.shape.last() else {
        return dim_err("linear on a scalar");
    };
    if last != c_in {
        return dim_err(format!("linear expects last extent {c_in}, got {last}"));
    }
    let rows = x.len() / c_in;
    let mut out = vec![0.0f32; rows * c_out];
    for r in 0..rows {
        matvec(
            weight.data(),
            c_in,
            &x.data[r * c_in..(r + 1) * c_in],
            &mut out[r * c_out..(r + 1) * c_out],
        );
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = c_out;
    Tensor::new(&shape, out)
}

/// `out = W · x` for a row-major `W` with `c_in` columns.
#[inline]
pub(crate) fn matvec(w: &[f32], c_in: usize, x: &[f32], out: &mut [f32]) {
    for (o, wrow) in out.iter_mut().zip(w.chunks_exact(c_in)) {
        *o = dot(wrow, x);
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Additive value used for blocked entries before normalisation.
pub const BLOCKED_SCORE: f32 = -1.0e30;

/// Softmax over the last axis, restricted to the entries the mask allows.
/// Blocked entries come out exactly zero.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() < 2 {
        return dim_err("masked_softmax needs at least [Q, KV]");
    }
    let (q, kv) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if mask.rows() != q || mask.cols() != kv {
        return dim_err(format!(
            "mask {}x{} does not match scores {q}x{kv}",
            mask.rows(),
            mask.cols()
        ));
    }
    let mut out = scores.data.clone();
    for block in out.chunks_exact_mut(q * kv) {
        for (i, row) in block.chunks_exact_mut(kv).enumerate() {
            softmax_row(row, mask.row(i))?;
        }
    }
    Tensor::new(shape, out)
}

/// In-place masked softmax of one row.
pub(crate) fn softmax_row(row: &mut [f32], allowed: &[bool]) -> Result<()> {
    let mut max = BLOCKED_SCORE;
    let mut any = false;
    for (&s, &a) in row.iter().zip(allowed) {
        if a {
            any = true;
            max = max.max(s);
        }
    }
    if !any {
        return Err(Error::Domain("fully masked attention row".into()));
    }
    let mut sum = 0.0f32;
    for (s, &a) in row.iter_mut().zip(allowed) {
        if a {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for (s, &a) in row.iter_mut().zip(allowed) {
        if a {
            *s *= inv;
        }
    }
    Ok(())
}

/// Deterministic random stream addressed by `(seed, counter)`.
///
/// Backed by ChaCha8; the counter is the generator's word position, so a
/// stream can be reopened at any point on any platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(counter as u128);
        Self { seed, rng }
    }

    /// Independent sub-stream `id` of this seed (for per-frame noise).
    pub fn substream(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f32 {
        self.rng.sample::<f64, _>(StandardNormal) as f32
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
