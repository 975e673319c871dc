//! Brute-force reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numeric paths; each routine is a
//! literal transcription of its definition and at most quadratic.

#![allow(dead_code)]

use std::fmt;

/// Outcome of comparing one implementation against its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub oracle: &'static str,
    pub instance: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Pass when the larger of the two deviations stays within tolerance
    /// according to `use_rel`.
    pub fn compare(oracle: &'static str, instance: String, got: &[f64], want: &[f64], tolerance: f64, use_rel: bool) -> Self {
        assert_eq!(got.len(), want.len(), "{oracle}: length mismatch");
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (g, w) in got.iter().zip(want) {
            let d = (g - w).abs();
            max_abs = max_abs.max(d);
            let scale = g.abs().max(w.abs());
            if scale > 0.0 {
                max_rel = max_rel.max(d / scale);
            }
        }
        let pass = if use_rel { max_rel < tolerance } else { max_abs <= tolerance };
        Self {
            oracle,
            instance,
            max_abs,
            max_rel,
            tolerance,
            pass,
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] max_abs={:.3e} max_rel={:.3e} tol={:.1e} {}",
            self.oracle,
            self.instance,
            self.max_abs,
            self.max_rel,
            self.tolerance,
            if self.pass { "ok" } else { "MISMATCH" }
        )
    }
}

/// `R_t = sum_{t'=t}^{T} gamma^(t'-t) r_t'` by explicit double loop.
pub fn oracle_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rewards.len());
    for t in 0..rewards.len() {
        let mut total = 0.0;
        let mut discount = 1.0;
        for r in &rewards[t..] {
            total += discount * r;
            discount *= gamma;
        }
        out.push(total);
    }
    out
}

/// Fraction of (positive, negative) pairs ranked correctly; ties count 1/2.
pub fn oracle_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// `S_t = (1/t) sum_{k<=t} s_k`, recomputed from scratch for every `t`.
pub fn oracle_running_means(hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (1..=hidden.len())
        .map(|t| {
            let mut m = vec![0.0; hidden[0].len()];
            for s in &hidden[..t] {
                for (a, v) in m.iter_mut().zip(s) {
                    *a += v;
                }
            }
            m.iter().map(|v| v / t as f64).collect()
        })
        .collect()
}

/// Population mean and standard deviation per dimension, two passes.
pub fn oracle_norm_stats(frames: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = frames.len() as f64;
    let dim = frames[0].len();
    let mut mean = vec![0.0; dim];
    for f in frames {
        for k in 0..dim {
            mean[k] += f[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for f in frames {
        for k in 0..dim {
            var[k] += (f[k] - mean[k]) * (f[k] - mean[k]);
        }
    }
    (mean, var.iter().map(|v| (v / n).sqrt()).collect())
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bias-free GRU weights as plain row-major matrices: `u_*` are
/// `input x hidden`, `w_*` are `hidden x hidden`.
#[derive(Debug, Clone)]
pub struct OracleGru {
    pub input: usize,
    pub hidden: usize,
    pub u_z: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u_h: Vec<f64>,
    pub w_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_h: Vec<f64>,
}

impl OracleGru {
    /// Parameter vector in the order u_z, u_r, u_h, w_z, w_r, w_h.
    pub fn flat(&self) -> Vec<f64> {
        [&self.u_z, &self.u_r, &self.u_h, &self.w_z, &self.w_r, &self.w_h]
            .iter()
            .flat_map(|m| m.iter().copied())
            .collect()
    }

    pub fn from_flat(input: usize, hidden: usize, p: &[f64]) -> Self {
        let (a, b) = (input * hidden, hidden * hidden);
        Self {
            input,
            hidden,
            u_z: p[0..a].to_vec(),
            u_r: p[a..2 * a].to_vec(),
            u_h: p[2 * a..3 * a].to_vec(),
            w_z: p[3 * a..3 * a + b].to_vec(),
            w_r: p[3 * a + b..3 * a + 2 * b].to_vec(),
            w_h: p[3 * a + 2 * b..3 * a + 3 * b].to_vec(),
        }
    }

    pub fn n_params(input: usize, hidden: usize) -> usize {
        3 * input * hidden + 3 * hidden * hidden
    }

    /// Hidden states `s_1..s_T` from `s_0 = 0`.
    pub fn hidden_states(&self, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let mut s = vec![0.0; h];
        let mut out = Vec::with_capacity(frames.len());
        for x in frames {
            let gate = |u: &[f64], w: &[f64], j: usize| {
                let mut a = 0.0;
                for i in 0..self.input {
                    a += x[i] * u[i * h + j];
                }
                for i in 0..h {
                    a += s[i] * w[i * h + j];
                }
                logistic(a)
            };
            let z: Vec<f64> = (0..h).map(|j| gate(&self.u_z, &self.w_z, j)).collect();
            let r: Vec<f64> = (0..h).map(|j| gate(&self.u_r, &self.w_r, j)).collect();
            let mut next = vec![0.0; h];
            for j in 0..h {
                let mut a = 0.0;
                for (i, xi) in x.iter().enumerate() {
                    a += xi * self.u_h[i * h + j];
                }
                for i in 0..h {
                    a += r[i] * s[i] * self.w_h[i * h + j];
                }
                next[j] = z[j] * s[j] + (1.0 - z[j]) * a.tanh();
            }
            out.push(next.clone());
            s = next;
        }
        out
    }

    /// Running means `S_1..S_T`.
    pub fn means(&self, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
        oracle_running_means(&self.hidden_states(frames))
    }
}

/// Two-action softmax over `w·s + b`, rows ordered as the policy's actions.
pub fn oracle_policy_probs(w: &[f64], b: &[f64], state: &[f64]) -> [f64; 2] {
    let h = state.len();
    let l0: f64 = (0..h).map(|i| w[i] * state[i]).sum::<f64>() + b[0];
    let l1: f64 = (0..h).map(|i| w[h + i] * state[i]).sum::<f64>() + b[1];
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// `sum_a pi(a) * grad log pi(a) * r(a)` for a one-step, two-action
/// problem with fixed state. Returns gradients on `(w, b)`.
pub fn oracle_bandit_gradient(w: &[f64], b: &[f64], state: &[f64], reward: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
    let h = state.len();
    let pi = oracle_policy_probs(w, b, state);
    let mut gw = vec![0.0; 2 * h];
    let mut gb = vec![0.0; 2];
    for a in 0..2 {
        for k in 0..2 {
            // d log pi(a) / d logit_k = [a == k] - pi(k)
            let dl = if a == k { 1.0 } else { 0.0 } - pi[k];
            let coef = pi[a] * dl * reward[a];
            gb[k] += coef;
            for i in 0..h {
                gw[k * h + i] += coef * state[i];
            }
        }
    }
    (gw, gb)
}

/// Exponentially weighted mean and variance of `xs` evaluated directly
/// from the weights: observation `i` of `n` has weight
/// `(1 - decay) * decay^(n - 1 - i)` and the zero initial state holds the
/// remaining `decay^n`.
pub fn oracle_ema(xs: &[f64], decay: f64) -> (f64, f64) {
    let n = xs.len();
    let weight = |i: usize| (1.0 - decay) * decay.powi((n - 1 - i) as i32);
    let prior = decay.powi(n as i32);
    let mean: f64 = xs.iter().enumerate().map(|(i, x)| weight(i) * x).sum();
    let var: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| weight(i) * (x - mean) * (x - mean))
        .sum::<f64>()
        + prior * mean * mean;
    (mean, var)
}

/// Logistic cross-entropy `-(y ln d + (1-y) ln(1-d))` of `d = sigma(logit)`.
pub fn oracle_bce(logit: f64, target: f64) -> f64 {
    let d = logistic(logit);
    -(target * d.ln() + (1.0 - target) * (1.0 - d).ln())
}

pub fn oracle_sigmoid(x: f64) -> f64 {
    logistic(x)
}
