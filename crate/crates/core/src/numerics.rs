//! Dense linear-algebra kernels, stable softmax, a 2-layer MLP with manual
//! backprop, and a decoupled-weight-decay Adam optimizer. Everything is f64,
//! single-threaded, and deterministic given a seeded RNG.

use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from row-major data; rejects length mismatch and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric("non-finite matrix entry".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        DenseMatrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from (-bound, bound).
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (k, &a) in arow.iter().enumerate() {
                let brow = other.row(k);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul_nt {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "matmul_tn ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for b in 0..self.rows {
            let arow = self.row(b);
            let brow = other.row(b);
            for (i, &a) in arow.iter().enumerate() {
                let orow = out.row_mut(i);
                for (o, &v) in orow.iter_mut().zip(brow) {
                    *o += a * v;
                }
            }
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("scaled_add shape mismatch"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

/// Seeded RNG used everywhere initialization or sampling happens.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Max-shifted exponential normalization of a slice, in place.
/// The slice ends up non-negative and summing to 1.
pub fn softmax_inplace(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_inplace(out.row_mut(r));
    }
    out
}

/// Two-layer perceptron `y = w2 * relu(w1 * x + b1) + b2`.
///
/// `w1` is hidden x in, `w2` is out x hidden. Batched entry points treat
/// matrix rows as samples.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Pre-activations retained by the forward pass for backprop.
pub struct MlpCache {
    x: Vec<f64>,
    z1: Vec<f64>,
}

pub struct MlpBatchCache {
    x: DenseMatrix,
    z1: DenseMatrix,
}

/// Parameter gradients, shaped like [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    /// Fan-in scaled uniform initialization for weights and biases.
    pub fn new_seeded(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        Mlp {
            w1: DenseMatrix::uniform(hidden_dim, input_dim, bound1, rng),
            b1: (0..hidden_dim).map(|_| rng.gen_range(-bound1..bound1)).collect(),
            w2: DenseMatrix::uniform(output_dim, hidden_dim, bound2, rng),
            b2: (0..output_dim).map(|_| rng.gen_range(-bound2..bound2)).collect(),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Mlp {
            w1: DenseMatrix::zeros(hidden_dim, input_dim),
            b1: vec![0.0; hidden_dim],
            w2: DenseMatrix::zeros(output_dim, hidden_dim),
            b2: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn sum_sq(&self) -> f64 {
        self.w1.sum_sq()
            + self.b1.iter().map(|v| v * v).sum::<f64>()
            + self.w2.sum_sq()
            + self.b2.iter().map(|v| v * v).sum::<f64>()
    }

    /// Parameter slices in a fixed order (w1, b1, w2, b2), for the optimizer.
    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 4] {
        let Mlp { w1, b1, w2, b2 } = self;
        [w1.data_mut(), b1, w2.data_mut(), b2]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp input dim {} != {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut z1 = self.b1.clone();
        for (h, z) in z1.iter_mut().enumerate() {
            *z += dot(self.w1.row(h), x);
        }
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let mut y = self.b2.clone();
        for (o, v) in y.iter_mut().enumerate() {
            *v += dot(self.w2.row(o), &a1);
        }
        Ok((
            y,
            MlpCache {
                x: x.to_vec(),
                z1,
            },
        ))
    }

    /// Exact gradients of the forward map for a single sample.
    pub fn backward(&self, cache: &MlpCache, grad_y: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if grad_y.len() != self.output_dim() || cache.x.len() != self.input_dim() {
            return Err(Error::shape("mlp backward shape mismatch"));
        }
        let a1: Vec<f64> = cache.z1.iter().map(|&v| v.max(0.0)).collect();
        let mut grads = MlpGrads::zeros(self);
        // dW2 = grad_y outer a1; db2 = grad_y
        for (o, &g) in grad_y.iter().enumerate() {
            grads.b2[o] = g;
            for (w, &a) in grads.w2.row_mut(o).iter_mut().zip(&a1) {
                *w = g * a;
            }
        }
        // dZ1 = (W2^T grad_y) . relu'(z1)
        let mut dz1 = vec![0.0; self.hidden_dim()];
        for (o, &g) in grad_y.iter().enumerate() {
            for (dz, &w) in dz1.iter_mut().zip(self.w2.row(o)) {
                *dz += g * w;
            }
        }
        for (dz, &z) in dz1.iter_mut().zip(&cache.z1) {
            if z <= 0.0 {
                *dz = 0.0;
            }
        }
        for (h, &dz) in dz1.iter().enumerate() {
            grads.b1[h] = dz;
            for (w, &xv) in grads.w1.row_mut(h).iter_mut().zip(&cache.x) {
                *w = dz * xv;
            }
        }
        let mut grad_x = vec![0.0; self.input_dim()];
        for (h, &dz) in dz1.iter().enumerate() {
            for (gx, &w) in grad_x.iter_mut().zip(self.w1.row(h)) {
                *gx += dz * w;
            }
        }
        Ok((grads, grad_x))
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<(DenseMatrix, MlpBatchCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp batch input dim {} != {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut z1 = x.matmul_nt(&self.w1)?;
        for r in 0..z1.rows() {
            for (z, &b) in z1.row_mut(r).iter_mut().zip(&self.b1) {
                *z += b;
            }
        }
        let mut a1 = z1.clone();
        for v in a1.data_mut() {
            *v = v.max(0.0);
        }
        let mut y = a1.matmul_nt(&self.w2)?;
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok((
            y,
            MlpBatchCache {
                x: x.clone(),
                z1,
            },
        ))
    }

    /// Batched gradients; parameter gradients are summed over the batch rows.
    pub fn backward_batch(
        &self,
        cache: &MlpBatchCache,
        grad_y: &DenseMatrix,
    ) -> Result<(MlpGrads, DenseMatrix)> {
        if grad_y.rows() != cache.x.rows() || grad_y.cols() != self.output_dim() {
            return Err(Error::shape("mlp batch backward shape mismatch"));
        }
        let mut a1 = cache.z1.clone();
        for v in a1.data_mut() {
            *v = v.max(0.0);
        }
        let w2_grad = grad_y.matmul_tn(&a1)?;
        let b2_grad = column_sums(grad_y);
        let mut dz1 = grad_y.matmul(&self.w2)?;
        for (dz, &z) in dz1.data_mut().iter_mut().zip(cache.z1.data()) {
            if z <= 0.0 {
                *dz = 0.0;
            }
        }
        let w1_grad = dz1.matmul_tn(&cache.x)?;
        let b1_grad = column_sums(&dz1);
        let grad_x = dz1.matmul(&self.w1)?;
        Ok((
            MlpGrads {
                w1: w1_grad,
                b1: b1_grad,
                w2: w2_grad,
                b2: b2_grad,
            },
            grad_x,
        ))
    }
}

impl MlpGrads {
    pub fn zeros(mlp: &Mlp) -> Self {
        MlpGrads {
            w1: DenseMatrix::zeros(mlp.hidden_dim(), mlp.input_dim()),
            b1: vec![0.0; mlp.hidden_dim()],
            w2: DenseMatrix::zeros(mlp.output_dim(), mlp.hidden_dim()),
            b2: vec![0.0; mlp.output_dim()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub fn scale(&mut self, alpha: f64) {
        self.w1.scale(alpha);
        self.w2.scale(alpha);
        for v in &mut self.b1 {
            *v *= alpha;
        }
        for v in &mut self.b2 {
            *v *= alpha;
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        self.w1.scaled_add(1.0, &other.w1).expect("shape");
        self.w2.scaled_add(1.0, &other.w2).expect("shape");
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Adam with decoupled weight decay:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state from a checkpoint.
    pub fn restore(lr: f64, weight_decay: f64, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::shape("optimizer moment length mismatch"));
        }
        Ok(AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step,
            m,
            v,
        })
    }

    /// One update over parameter groups; slices are consumed in order and must
    /// jointly cover the state length exactly.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let p_len: usize = params.iter().map(|s| s.len()).sum();
        let g_len: usize = grads.iter().map(|s| s.len()).sum();
        if p_len != self.m.len() || g_len != self.m.len() || params.len() != grads.len() {
            return Err(Error::shape(format!(
                "adamw expects {} params, got {p_len} params / {g_len} grads",
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut offset = 0;
        for (pslice, gslice) in params.iter_mut().zip(grads) {
            if pslice.len() != gslice.len() {
                return Err(Error::shape("adamw group length mismatch"));
            }
            let m = &mut self.m[offset..offset + pslice.len()];
            let v = &mut self.v[offset..offset + pslice.len()];
            for i in 0..pslice.len() {
                let g = gslice[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pslice[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pslice[i]);
            }
            offset += pslice.len();
        }
        Ok(())
    }
}

/// Central finite differences of a scalar function at `x` (test oracle support).
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative error with an absolute floor, elementwise-maxed over both slices.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeded_rng(seed);
        DenseMatrix::uniform(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_hand_case() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_exact() {
        let a = random_matrix(4, 4, 7);
        let i = DenseMatrix::identity(4);
        assert_eq!(a.matmul(&i).unwrap().data(), a.data());
        assert_eq!(i.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_matrix(7, 5, 1);
        let b = random_matrix(5, 3, 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut expect = 0.0;
                for k in 0..5 {
                    expect += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = random_matrix(2, 3, 3);
        let b = random_matrix(2, 3, 4);
        assert!(a.matmul(&b).is_err());
        assert!(a.matmul_nt(&b).is_ok());
        assert!(a.matmul_tn(&b).is_ok());
    }

    #[test]
    fn matmul_nt_tn_match_explicit_transpose() {
        let a = random_matrix(4, 6, 5);
        let b = random_matrix(3, 6, 6);
        let nt = a.matmul_nt(&b).unwrap();
        let oracle = a.matmul(&b.transpose()).unwrap();
        assert!(max_rel_error(nt.data(), oracle.data()) < 1e-12);

        let c = random_matrix(4, 2, 8);
        let tn = a.matmul_tn(&c).unwrap();
        let oracle = a.transpose().matmul(&c).unwrap();
        assert!(max_rel_error(tn.data(), oracle.data()) < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let m = DenseMatrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&m);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = DenseMatrix::from_vec(1, 2, vec![1000.0, 1000.0]).unwrap();
        let s = softmax_rows(&m);
        assert!(s.is_finite());
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let m = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.at(0, j) - x.exp() / z).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e6f64..1e6, 1..24)) {
            let cols = vals.len();
            let m = DenseMatrix::from_vec(1, cols, vals).unwrap();
            let s = softmax_rows(&m);
            let total: f64 = s.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_zero_params_give_zero_output() {
        let mlp = Mlp::zeros(3, 4, 2);
        let (y, _) = mlp.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_identity_composition_on_nonneg_input() {
        let mut mlp = Mlp::zeros(3, 3, 3);
        mlp.w1 = DenseMatrix::identity(3);
        mlp.w2 = DenseMatrix::identity(3);
        let x = [0.5, 0.0, 2.0];
        let (y, _) = mlp.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_input_dim_checked() {
        let mlp = Mlp::zeros(3, 4, 2);
        assert!(mlp.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mlp_zero_upstream_grad_gives_zero_grads() {
        let mut rng = seeded_rng(11);
        let mlp = Mlp::new_seeded(4, 5, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = mlp.forward(&x).unwrap();
        let (grads, gx) = mlp.backward(&cache, &[0.0, 0.0, 0.0]).unwrap();
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    // Gradient of 0.5*|y|^2 through the MLP, checked against central
    // differences for every parameter and the input, across many seeds.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = seeded_rng(seed);
            let mlp = Mlp::new_seeded(3, 4, 2, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (y, cache) = mlp.forward(&x).unwrap();
            let (grads, grad_x) = mlp.backward(&cache, &y).unwrap();

            let loss_for = |m: &Mlp, xv: &[f64]| {
                let (y, _) = m.forward(xv).unwrap();
                0.5 * y.iter().map(|v| v * v).sum::<f64>()
            };

            let fd_w2 = central_difference(
                |w| {
                    let mut m = mlp.clone();
                    m.w2 = DenseMatrix::from_vec(2, 4, w.to_vec()).unwrap();
                    loss_for(&m, &x)
                },
                mlp.w2.data(),
                1e-5,
            );
            assert!(max_rel_error(grads.w2.data(), &fd_w2) < 1e-4, "seed {seed} w2");

            let fd_w1 = central_difference(
                |w| {
                    let mut m = mlp.clone();
                    m.w1 = DenseMatrix::from_vec(4, 3, w.to_vec()).unwrap();
                    loss_for(&m, &x)
                },
                mlp.w1.data(),
                1e-5,
            );
            assert!(max_rel_error(grads.w1.data(), &fd_w1) < 1e-4, "seed {seed} w1");

            let fd_x = central_difference(|xv| loss_for(&mlp, xv), &x, 1e-5);
            assert!(max_rel_error(&grad_x, &fd_x) < 1e-4, "seed {seed} x");
        }
    }

    #[test]
    fn mlp_batch_matches_single_sample_path() {
        let mut rng = seeded_rng(42);
        let mlp = Mlp::new_seeded(5, 7, 4, &mut rng);
        let x = DenseMatrix::uniform(6, 5, 1.0, &mut rng);
        let (y, cache) = mlp.forward_batch(&x).unwrap();
        let grad_y = y.clone();
        let (grads, grad_x) = mlp.backward_batch(&cache, &grad_y).unwrap();

        let mut want_grads = MlpGrads::zeros(&mlp);
        for r in 0..x.rows() {
            let (yr, cr) = mlp.forward(x.row(r)).unwrap();
            assert!(max_rel_error(&yr, y.row(r)) < 1e-12);
            let (g, gx) = mlp.backward(&cr, y.row(r)).unwrap();
            want_grads.add(&g);
            assert!(max_rel_error(&gx, grad_x.row(r)) < 1e-12);
            let _ = yr;
        }
        assert!(max_rel_error(grads.w1.data(), want_grads.w1.data()) < 1e-12);
        assert!(max_rel_error(grads.w2.data(), want_grads.w2.data()) < 1e-12);
        assert!(max_rel_error(&grads.b1, &want_grads.b1) < 1e-12);
        assert!(max_rel_error(&grads.b2, &want_grads.b2) < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(3, 1e-3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_decoupled_decay_arithmetic() {
        let mut opt = AdamW::new(1, 1e-3, 1e-2);
        let mut p = vec![1.0];
        opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
        assert!((p[0] - 0.99999).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_hand_unrolled_recurrence() {
        // One step on f(theta) = theta^2 at theta = 1, lr = 0.1, wd = 0.
        let mut opt = AdamW::new(1, 0.1, 0.0);
        let mut p = vec![1.0];
        let g = vec![2.0];
        opt.step(&mut [&mut p], &[&g]).unwrap();

        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let m = (1.0 - b1) * 2.0;
        let v = (1.0 - b2) * 4.0;
        let m_hat: f64 = m / (1.0 - b1);
        let v_hat: f64 = v / (1.0 - b2);
        let expect = 1.0 - 0.1 * (m_hat / (v_hat.sqrt() + eps));
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_mismatched_lengths() {
        let mut opt = AdamW::new(2, 1e-3, 0.0);
        let mut p = vec![1.0];
        assert!(opt.step(&mut [&mut p], &[&[0.0]]).is_err());
    }

    #[test]
    fn adamw_group_split_matches_single_slice() {
        let mut a = AdamW::new(4, 1e-2, 1e-2);
        let mut b = AdamW::new(4, 1e-2, 1e-2);
        let mut p1 = vec![0.3, -0.4, 0.9, 1.4];
        let mut p2 = p1.clone();
        let g = [0.2, -0.1, 0.0, 0.5];
        for _ in 0..5 {
            a.step(&mut [&mut p1], &[&g]).unwrap();
            let (left, right) = p2.split_at_mut(2);
            b.step(&mut [left, right], &[&g[..2], &g[2..]]).unwrap();
        }
        assert_eq!(p1, p2);
    }
}
