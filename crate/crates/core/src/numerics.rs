//! Dense kernels, parameter storage, the Adam update and a central-difference
//! gradient checker.
//!
//! Matrices are row-major. Every learnable weight in the model lives in a
//! [`ParamTensor`], which carries its own gradient accumulator so that the
//! separate loss terms of the training objective can be summed in place.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named matrix (or vector, `cols == 1`) of learnable values with a
/// same-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    /// When set, [`adam_step`] never touches `values`.
    pub frozen: bool,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; n],
            grad: vec![0.0; n],
            frozen: false,
        }
    }

    pub fn from_values(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{}x{} tensor given {} values",
                rows,
                cols,
                values.len()
            )));
        }
        let grad = vec![0.0; values.len()];
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            values,
            grad,
            frozen: false,
        })
    }

    /// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self::from_values(name, rows, cols, values).expect("shape is consistent")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    /// Values and gradient borrowed at the same time.
    pub fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grad)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// A collection of parameter tensors that can be visited in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        for t in self.tensors_mut() {
            t.frozen = frozen;
        }
    }

    fn checksum(&self) -> u64 {
        self.tensors()
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes
/// while keeping a fixed summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_generic(a, b)
}

#[inline(always)]
fn dot_generic(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = M v` for a row-major `rows x cols` slice.
pub fn matvec_into(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { matvec_into_avx2(m, rows, cols, v, out) };
    }
    matvec_into_generic(m, rows, cols, v, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matvec_into_avx2(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    matvec_into_generic(m, rows, cols, v, out)
}

#[inline(always)]
fn matvec_into_generic(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    let v = &v[..cols];
    let main = cols - cols % 4;
    let full = rows - rows % 4;
    for r in (0..full).step_by(4) {
        let block = &m[r * cols..(r + 4) * cols];
        let (m0, rest) = block.split_at(cols);
        let (m1, rest) = rest.split_at(cols);
        let (m2, m3) = rest.split_at(cols);
        let mut acc = [[0.0f64; 4]; 4];
        let pairs = m0.chunks_exact(4).zip(m1.chunks_exact(4));
        let pairs2 = m2.chunks_exact(4).zip(m3.chunks_exact(4));
        for (((c0, c1), (c2, c3)), vc) in pairs.zip(pairs2).zip(v.chunks_exact(4)) {
            for k in 0..4 {
                acc[0][k] += c0[k] * vc[k];
                acc[1][k] += c1[k] * vc[k];
                acc[2][k] += c2[k] * vc[k];
                acc[3][k] += c3[k] * vc[k];
            }
        }
        for (q, row) in [m0, m1, m2, m3].into_iter().enumerate() {
            out[r + q] = row_total(&acc[q], row, v, main);
        }
    }
    for r in full..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = [0.0f64; 4];
        for (c, vc) in row.chunks_exact(4).zip(v.chunks_exact(4)) {
            for k in 0..4 {
                acc[k] += c[k] * vc[k];
            }
        }
        out[r] = row_total(&acc, row, v, main);
    }
}

#[inline(always)]
fn row_total(acc: &[f64; 4], row: &[f64], v: &[f64], main: usize) -> f64 {
    let mut tail = 0.0;
    for (a, b) in row[main..].iter().zip(&v[main..]) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// `out += v^T M` for a row-major `rows x cols` slice (`v` has `rows` entries).
///
/// Each output element accumulates its terms in row order. Columns are
/// processed in register-sized blocks.
pub fn vecmat_acc(v: &[f64], m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { vecmat_acc_avx2(v, m, rows, cols, out) };
    }
    vecmat_acc_generic(v, m, rows, cols, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn vecmat_acc_avx2(v: &[f64], m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    vecmat_acc_generic(v, m, rows, cols, out)
}

#[inline(always)]
fn vecmat_acc_generic(v: &[f64], m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    const B: usize = 32;
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert!(v.len() >= rows && out.len() >= cols);
    let mut c0 = 0;
    while c0 + B <= cols {
        let mut acc: [f64; B] = out[c0..c0 + B].try_into().unwrap();
        for (r, &vr) in v[..rows].iter().enumerate() {
            let row: &[f64; B] = m[r * cols + c0..r * cols + c0 + B].try_into().unwrap();
            for k in 0..B {
                acc[k] += vr * row[k];
            }
        }
        out[c0..c0 + B].copy_from_slice(&acc);
        c0 += B;
    }
    for (c, o) in out.iter_mut().enumerate().take(cols).skip(c0) {
        let mut a = *o;
        for (r, &vr) in v[..rows].iter().enumerate() {
            a += vr * m[r * cols + c];
        }
        *o = a;
    }
}

/// `C += A^T B` where `A` is `n x m` and `B` is `n x k`, all row-major;
/// `C` is `m x k`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], n: usize, m: usize, k: usize, c: &mut [f64]) {
    assert!(a.len() >= n * m && b.len() >= n * k && c.len() >= m * k);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            k as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `g += a b^T` for a row-major `a.len() x b.len()` accumulator.
#[inline]
pub fn outer_acc(a: &[f64], b: &[f64], g: &mut [f64]) {
    let cols = b.len();
    debug_assert_eq!(g.len(), a.len() * cols);
    for (r, &ar) in a.iter().enumerate() {
        if ar != 0.0 {
            axpy(ar, b, &mut g[r * cols..(r + 1) * cols]);
        }
    }
}

/// Standard matrix-vector product `M v`.
pub fn matvec(matrix: &ParamTensor, vector: &[f64]) -> Result<Vec<f64>> {
    if matrix.cols != vector.len() {
        return Err(Error::Dimension(format!(
            "matvec: {} has {} columns, vector has {} entries",
            matrix.name,
            matrix.cols,
            vector.len()
        )));
    }
    let mut out = vec![0.0; matrix.rows];
    matvec_into(&matrix.values, matrix.rows, matrix.cols, vector, &mut out);
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::Numeric("softmax of NaN logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Hyperparameters for [`adam_step`].
///
/// Betas and epsilon default to the usual Adam values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-tensor Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }
}

/// One Adam update with decoupled weight decay; clears the gradient.
///
/// A frozen tensor keeps its values bit-identical (its gradient is still
/// cleared so nothing stale survives until it is unfrozen).
pub fn adam_step(param: &mut ParamTensor, state: &mut AdamState) -> Result<()> {
    if state.m.len() != param.len() {
        return Err(Error::Dimension(format!(
            "adam state for {} has {} entries, tensor has {}",
            param.name,
            state.m.len(),
            param.len()
        )));
    }
    if param.frozen {
        param.zero_grad();
        return Ok(());
    }
    if let Some(i) = param.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in {}[{}]",
            param.name, i
        )));
    }
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let decay = c.lr * c.weight_decay;
    for i in 0..param.values.len() {
        let g = param.grad[i];
        let m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        let v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let w = param.values[i] - decay * param.values[i];
        param.values[i] = w - c.lr * (m / bc1) / ((v / bc2).sqrt() + c.epsilon);
        param.grad[i] = 0.0;
    }
    Ok(())
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of every coordinate that was perturbed.
    pub coords: Vec<(String, usize)>,
    /// Coordinate with the largest relative error.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares the gradients already accumulated in `model` with central
/// differences of `loss`. Frozen tensors are skipped.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<M, F>(model: &mut M, loss: F, opts: FdOptions) -> Result<FdReport>
where
    M: ParamSet + ?Sized,
    F: Fn(&M) -> f64,
{
    let base = loss(model);
    let again = loss(model);
    if base.to_bits() != again.to_bits() {
        return Err(Error::InvalidCheck(format!(
            "loss is not deterministic ({base} vs {again})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let plan: Vec<(usize, String, Vec<usize>, Vec<f64>)> = model
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.frozen && !t.is_empty())
        .map(|(ti, t)| {
            let mut idx: Vec<usize> = match opts.coords_per_tensor {
                Some(k) if k < t.len() => sample(&mut rng, t.len(), k).into_vec(),
                _ => (0..t.len()).collect(),
            };
            idx.sort_unstable();
            let analytic = idx.iter().map(|&i| t.grad[i]).collect();
            (ti, t.name.clone(), idx, analytic)
        })
        .collect();

    let h = opts.step;
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords: Vec::new(),
        worst: None,
    };
    for (ti, name, idx, analytic) in plan {
        for (&i, &a) in idx.iter().zip(&analytic) {
            let orig = model.tensors()[ti].values[i];
            model.tensors_mut()[ti].values[i] = orig + h;
            let fp = loss(model);
            model.tensors_mut()[ti].values[i] = orig - h;
            let fm = loss(model);
            model.tensors_mut()[ti].values[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss around {name}[{i}]")));
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
            report.coords.push((name.clone(), i));
        }
    }
    Ok(report)
}
