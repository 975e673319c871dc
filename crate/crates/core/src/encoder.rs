//! Single-layer GRU (no biases) whose hidden states are averaged into a
//! running mean `S_t`, the shared state representation of every head.
//!
//! ```text
//! z_t = sigmoid(x_t U_z + s_{t-1} W_z)
//! r_t = sigmoid(x_t U_r + s_{t-1} W_r)
//! h_t = tanh(x_t U_h + (s_{t-1} * r_t) W_h)
//! s_t = z_t * s_{t-1} + (1 - z_t) * h_t
//! S_t = S_{t-1} + (s_t - S_{t-1}) / t
//! ```
//!
//! Input matrices are stored `input_dim x hidden` and recurrent ones
//! `hidden x hidden`, so both products are row-vector times matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{gemm_tn_acc, sigmoid, vecmat_acc, ParamSet, ParamTensor};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub u_z: ParamTensor,
    pub u_r: ParamTensor,
    pub u_h: ParamTensor,
    pub w_z: ParamTensor,
    pub w_r: ParamTensor,
    pub w_h: ParamTensor,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            u_z: ParamTensor::zeros("gru.u_z", input_dim, hidden),
            u_r: ParamTensor::zeros("gru.u_r", input_dim, hidden),
            u_h: ParamTensor::zeros("gru.u_h", input_dim, hidden),
            w_z: ParamTensor::zeros("gru.w_z", hidden, hidden),
            w_r: ParamTensor::zeros("gru.w_r", hidden, hidden),
            w_h: ParamTensor::zeros("gru.w_h", hidden, hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            u_z: ParamTensor::glorot("gru.u_z", input_dim, hidden, rng),
            u_r: ParamTensor::glorot("gru.u_r", input_dim, hidden, rng),
            u_h: ParamTensor::glorot("gru.u_h", input_dim, hidden, rng),
            w_z: ParamTensor::glorot("gru.w_z", hidden, hidden, rng),
            w_r: ParamTensor::glorot("gru.w_r", hidden, hidden, rng),
            w_h: ParamTensor::glorot("gru.w_h", hidden, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.u_z.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden());
        for u in [&self.u_z, &self.u_r, &self.u_h] {
            if u.shape() != (d, h) {
                return Err(Error::Dimension(format!("{} is {:?}, want {:?}", u.name(), u.shape(), (d, h))));
            }
        }
        for w in [&self.w_z, &self.w_r, &self.w_h] {
            if w.shape() != (h, h) {
                return Err(Error::Dimension(format!("{} is {:?}, want {:?}", w.name(), w.shape(), (h, h))));
            }
        }
        Ok(())
    }
}

impl ParamSet for GruParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.u_z, &self.u_r, &self.u_h, &self.w_z, &self.w_r, &self.w_h]
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
        ]
    }
}

/// Hidden state, running mean of all hidden states so far, and frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub hidden: Vec<f64>,
    pub mean: Vec<f64>,
    pub t: u64,
}

impl EncoderState {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden: vec![0.0; hidden],
            mean: vec![0.0; hidden],
            t: 0,
        }
    }
}

/// Gate activations of one step.
struct Gates<'a> {
    z: &'a mut [f64],
    r: &'a mut [f64],
    h: &'a mut [f64],
}

fn step_into(p: &GruParams, x: &[f64], s_prev: &[f64], g: Gates<'_>, s_out: &mut [f64], scratch: &mut [f64]) {
    let (d, hd) = (p.input_dim(), p.hidden());
    g.z.iter_mut().for_each(|v| *v = 0.0);
    g.r.iter_mut().for_each(|v| *v = 0.0);
    g.h.iter_mut().for_each(|v| *v = 0.0);
    vecmat_acc(x, p.u_z.values(), d, hd, g.z);
    vecmat_acc(s_prev, p.w_z.values(), hd, hd, g.z);
    vecmat_acc(x, p.u_r.values(), d, hd, g.r);
    vecmat_acc(s_prev, p.w_r.values(), hd, hd, g.r);
    g.z.iter_mut().for_each(|v| *v = sigmoid(*v));
    g.r.iter_mut().for_each(|v| *v = sigmoid(*v));
    for ((sr, s), r) in scratch.iter_mut().zip(s_prev).zip(g.r.iter()) {
        *sr = s * r;
    }
    vecmat_acc(x, p.u_h.values(), d, hd, g.h);
    vecmat_acc(scratch, p.w_h.values(), hd, hd, g.h);
    g.h.iter_mut().for_each(|v| *v = v.tanh());
    for i in 0..hd {
        s_out[i] = g.z[i] * s_prev[i] + (1.0 - g.z[i]) * g.h[i];
    }
}

fn update_mean(mean: &mut [f64], s: &[f64], t: u64) {
    let inv = 1.0 / t as f64;
    for (m, v) in mean.iter_mut().zip(s) {
        *m += (v - *m) * inv;
    }
}

/// One encoder step on a (normalized) input frame.
pub fn gru_step(x: &[f64], state: &EncoderState, params: &GruParams) -> Result<EncoderState> {
    let hd = params.hidden();
    if x.len() != params.input_dim() || state.hidden.len() != hd || state.mean.len() != hd {
        return Err(Error::Dimension(format!(
            "gru step: input {} (want {}), state {} (want {hd})",
            x.len(),
            params.input_dim(),
            state.hidden.len()
        )));
    }
    let (mut z, mut r, mut h, mut sr) = (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
    let mut next = EncoderState {
        hidden: vec![0.0; hd],
        mean: state.mean.clone(),
        t: state.t + 1,
    };
    step_into(
        params,
        x,
        &state.hidden,
        Gates { z: &mut z, r: &mut r, h: &mut h },
        &mut next.hidden,
        &mut sr,
    );
    update_mean(&mut next.mean, &next.hidden, next.t);
    Ok(next)
}

/// Forward record of a sequence, sufficient for backpropagation through
/// time. Rows are flattened; step `t` (1-based) lives at row `t - 1` of the
/// gate buffers and at row `t` of `hidden` (row 0 is the zero initial state).
#[derive(Debug, Clone, Default)]
pub struct GruTrace {
    input_dim: usize,
    hidden_dim: usize,
    xs: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    hs: Vec<f64>,
    ss: Vec<f64>,
    means: Vec<f64>,
    scratch: Vec<f64>,
}

impl GruTrace {
    pub fn new(params: &GruParams) -> Self {
        let hd = params.hidden();
        Self {
            input_dim: params.input_dim(),
            hidden_dim: hd,
            ss: vec![0.0; hd],
            scratch: vec![0.0; hd],
            ..Default::default()
        }
    }

    /// Forward over a whole sequence of frames.
    pub fn run<'a>(params: &GruParams, frames: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut tr = Self::new(params);
        for x in frames {
            tr.step(params, x)?;
        }
        Ok(tr)
    }

    /// Clears the record so the buffers can be reused for a new sequence.
    pub fn reset(&mut self, params: &GruParams) {
        let hd = params.hidden();
        self.input_dim = params.input_dim();
        self.hidden_dim = hd;
        self.xs.clear();
        self.zs.clear();
        self.rs.clear();
        self.hs.clear();
        self.means.clear();
        self.ss.clear();
        self.ss.resize(hd, 0.0);
        self.scratch.resize(hd, 0.0);
    }

    /// Consumes one frame and returns the new running mean.
    pub fn step(&mut self, params: &GruParams, x: &[f64]) -> Result<&[f64]> {
        let hd = self.hidden_dim;
        if x.len() != self.input_dim || params.hidden() != hd || params.input_dim() != self.input_dim {
            return Err(Error::Dimension(format!(
                "gru step: frame of {} values, encoder expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let t = self.len();
        self.xs.extend_from_slice(x);
        for buf in [&mut self.zs, &mut self.rs, &mut self.hs, &mut self.ss] {
            buf.resize(buf.len() + hd, 0.0);
        }
        let (prev, cur) = self.ss.split_at_mut(hd * (t + 1));
        step_into(
            params,
            x,
            &prev[hd * t..],
            Gates {
                z: &mut self.zs[hd * t..],
                r: &mut self.rs[hd * t..],
                h: &mut self.hs[hd * t..],
            },
            cur,
            &mut self.scratch,
        );
        if t == 0 {
            self.means.extend_from_slice(cur);
        } else {
            self.means.extend_from_within(hd * (t - 1)..hd * t);
            update_mean(&mut self.means[hd * t..], cur, t as u64 + 1);
        }
        Ok(&self.means[hd * t..])
    }

    pub fn len(&self) -> usize {
        self.zs.len() / self.hidden_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// `s_t` for `t` in `0..=len` (`s_0` is the zero vector).
    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.ss[t * self.hidden_dim..(t + 1) * self.hidden_dim]
    }

    /// `S_t` for `t` in `1..=len`.
    pub fn mean(&self, t: usize) -> &[f64] {
        assert!(t >= 1, "running mean is defined from the first frame on");
        &self.means[(t - 1) * self.hidden_dim..t * self.hidden_dim]
    }

    pub fn update_gate(&self, t: usize) -> &[f64] {
        &self.zs[(t - 1) * self.hidden_dim..t * self.hidden_dim]
    }

    pub fn reset_gate(&self, t: usize) -> &[f64] {
        &self.rs[(t - 1) * self.hidden_dim..t * self.hidden_dim]
    }

    pub fn candidate(&self, t: usize) -> &[f64] {
        &self.hs[(t - 1) * self.hidden_dim..t * self.hidden_dim]
    }

    /// State after the last frame.
    pub fn state(&self) -> EncoderState {
        let t = self.len();
        EncoderState {
            hidden: self.hidden(t).to_vec(),
            mean: if t == 0 {
                vec![0.0; self.hidden_dim]
            } else {
                self.mean(t).to_vec()
            },
            t: t as u64,
        }
    }
}

/// Upstream gradients for [`gru_backward`].
///
/// `mean` maps a 1-based frame index to `dL/dS_t`; `last_hidden` is an
/// optional `dL/ds_T` on the final hidden state.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub mean: Vec<(usize, Vec<f64>)>,
    pub last_hidden: Option<Vec<f64>>,
}

/// Backpropagation through time, through the running-mean operator and the
/// GRU recurrence. Parameter gradients are added to the tensors'
/// accumulators (frozen tensors included: freezing is enforced by the
/// optimizer). Returns `dL/dx_t` for every frame, row-major.
pub fn gru_backward(params: &mut GruParams, trace: &GruTrace, upstream: &Upstream) -> Result<Vec<f64>> {
    let mut dx = vec![0.0; trace.len() * params.input_dim()];
    backward_impl(params, trace, upstream, Some(&mut dx))?;
    Ok(dx)
}

/// [`gru_backward`] without the input gradients.
pub fn gru_backward_params(params: &mut GruParams, trace: &GruTrace, upstream: &Upstream) -> Result<()> {
    backward_impl(params, trace, upstream, None)
}

fn transpose(m: &ParamTensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let v = m.values();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// `out = M v` given `mt`, the `cols x rows` transpose of `M`.
fn mul_transposed(mt: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out[..rows].iter_mut().for_each(|o| *o = 0.0);
    vecmat_acc(v, mt, cols, rows, out);
}

fn backward_impl(
    params: &mut GruParams,
    trace: &GruTrace,
    upstream: &Upstream,
    mut dx: Option<&mut Vec<f64>>,
) -> Result<()> {
    let (d, hd) = (params.input_dim(), params.hidden());
    let n = trace.len();
    if trace.hidden_dim != hd || trace.input_dim != d {
        return Err(Error::Dimension("trace was recorded with different encoder dimensions".into()));
    }
    let mut dense = vec![0.0; n * hd];
    for (t, g) in &upstream.mean {
        if *t == 0 || *t > n || g.len() != hd {
            return Err(Error::Dimension(format!(
                "mean gradient at frame {t} (len {}) does not fit a {n}-frame trace of width {hd}",
                g.len()
            )));
        }
        for (a, b) in dense[(t - 1) * hd..t * hd].iter_mut().zip(g) {
            *a += b;
        }
    }
    if let Some(g) = &upstream.last_hidden {
        if g.len() != hd || n == 0 {
            return Err(Error::Dimension("final hidden gradient does not fit the trace".into()));
        }
    }

    let mut mean_acc = vec![0.0; hd];
    let mut ds_next = vec![0.0; hd];
    let mut ds = vec![0.0; hd];
    let (mut dz_all, mut dr_all, mut dh_all) = (vec![0.0; n * hd], vec![0.0; n * hd], vec![0.0; n * hd]);
    let mut sr_all = vec![0.0; n * hd];
    let mut dsr = vec![0.0; hd];
    let (mut back_z, mut back_r) = (vec![0.0; hd], vec![0.0; hd]);
    let (mut in_z, mut in_r, mut in_h) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (wt_z, wt_r, wt_h) = (transpose(&params.w_z), transpose(&params.w_r), transpose(&params.w_h));
    let ut = dx
        .is_some()
        .then(|| [transpose(&params.u_z), transpose(&params.u_r), transpose(&params.u_h)]);

    for t in (1..=n).rev() {
        let inv = 1.0 / t as f64;
        for (a, g) in mean_acc.iter_mut().zip(&dense[(t - 1) * hd..t * hd]) {
            *a += g * inv;
        }
        for i in 0..hd {
            ds[i] = ds_next[i] + mean_acc[i];
        }
        if t == n {
            if let Some(g) = &upstream.last_hidden {
                for (a, b) in ds.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        
        let s_prev = trace.hidden(t - 1);
        let (z, r, h) = (trace.update_gate(t), trace.reset_gate(t), trace.candidate(t));
        let span = (t - 1) * hd..t * hd;
        let da_z = &mut dz_all[span.clone()];
        let da_r = &mut dr_all[span.clone()];
        let da_h = &mut dh_all[span.clone()];
        let sr = &mut sr_all[span];

        for i in 0..hd {
            let dh = ds[i] * (1.0 - z[i]);
            let dz = ds[i] * (s_prev[i] - h[i]);
            da_h[i] = dh * (1.0 - h[i] * h[i]);
            da_z[i] = dz * z[i] * (1.0 - z[i]);
            sr[i] = s_prev[i] * r[i];
        }
        mul_transposed(&wt_h, hd, hd, da_h, &mut dsr);
        for i in 0..hd {
            da_r[i] = dsr[i] * s_prev[i] * r[i] * (1.0 - r[i]);
        }
        mul_transposed(&wt_z, hd, hd, da_z, &mut back_z);
        mul_transposed(&wt_r, hd, hd, da_r, &mut back_r);
        for i in 0..hd {
            ds_next[i] = ds[i] * z[i] + dsr[i] * r[i] + back_z[i] + back_r[i];
        }
        if let (Some(dx), Some([ut_z, ut_r, ut_h])) = (dx.as_deref_mut(), &ut) {
            mul_transposed(ut_z, d, hd, da_z, &mut in_z);
            mul_transposed(ut_r, d, hd, da_r, &mut in_r);
            mul_transposed(ut_h, d, hd, da_h, &mut in_h);
            for (j, v) in dx[(t - 1) * d..t * d].iter_mut().enumerate() {
                *v = in_z[j] + in_r[j] + in_h[j];
            }
        }
    }
    let xs = &trace.xs[..n * d];
    let s_prev = &trace.ss[..n * hd];
    gemm_tn_acc(xs, &dz_all, n, d, hd, params.u_z.grad_mut());
    gemm_tn_acc(xs, &dr_all, n, d, hd, params.u_r.grad_mut());
    gemm_tn_acc(xs, &dh_all, n, d, hd, params.u_h.grad_mut());
    gemm_tn_acc(s_prev, &dz_all, n, hd, hd, params.w_z.grad_mut());
    gemm_tn_acc(s_prev, &dr_all, n, hd, hd, params.w_r.grad_mut());
    gemm_tn_acc(&sr_all, &dh_all, n, hd, hd, params.w_h.grad_mut());
    Ok(())
}
