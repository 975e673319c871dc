//! Single-layer heads on the running-mean state `S_t`: emotion classifier,
//! wait/terminate policy, and the baseline return estimator.

use rand::Rng;

use crate::numerics::{dot, sigmoid, softmax, ParamSet, ParamTensor};

/// Clamp for probabilities entering the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Neutral,
    Angry,
}

impl Emotion {
    /// 1 for angry, 0 for neutral.
    pub fn target(self) -> f64 {
        match self {
            Emotion::Angry => 1.0,
            Emotion::Neutral => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Neutral => "neutral",
        }
    }
}

impl std::fmt::Display for Emotion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Policy actions, in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Wait = 0,
    Terminate = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Sample from the policy (training).
    Stochastic,
    /// Highest-probability action; ties go to terminate (evaluation).
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl ClassifierParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: ParamTensor::zeros("classifier.w", 1, hidden),
            b: ParamTensor::zeros("classifier.b", 1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            w: ParamTensor::glorot("classifier.w", 1, hidden, rng),
            b: ParamTensor::zeros("classifier.b", 1, 1),
        }
    }

    pub fn logit(&self, state: &[f64]) -> f64 {
        dot(self.w.values(), state) + self.b.values()[0]
    }

    /// Adds `dlogit * dlogit/dθ` to the accumulators and returns `dL/dS`.
    pub fn backward(&mut self, state: &[f64], dlogit: f64) -> Vec<f64> {
        for (g, s) in self.w.grad_mut().iter_mut().zip(state) {
            *g += dlogit * s;
        }
        self.b.grad_mut()[0] += dlogit;
        self.w.values().iter().map(|w| w * dlogit).collect()
    }
}

impl ParamSet for ClassifierParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `2 x hidden`, rows ordered [wait, terminate].
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl PolicyParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: ParamTensor::zeros("policy.w", 2, hidden),
            b: ParamTensor::zeros("policy.b", 2, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            w: ParamTensor::glorot("policy.w", 2, hidden, rng),
            b: ParamTensor::zeros("policy.b", 2, 1),
        }
    }

    pub fn logits(&self, state: &[f64]) -> [f64; 2] {
        let b = self.b.values();
        [dot(self.w.row(0), state) + b[0], dot(self.w.row(1), state) + b[1]]
    }

    /// Adds `scale * d log pi(action | S) / dθ` to the accumulators and
    /// returns `scale * d log pi / dS`.
    pub fn backward_log_prob(&mut self, state: &[f64], probs: [f64; 2], action: Action, scale: f64) -> Vec<f64> {
        let hidden = state.len();
        let mut dlogits = [-probs[0] * scale, -probs[1] * scale];
        dlogits[action.index()] += scale;
        {
            let g = self.w.grad_mut();
            for (k, dl) in dlogits.iter().enumerate() {
                for (gi, s) in g[k * hidden..(k + 1) * hidden].iter_mut().zip(state) {
                    *gi += dl * s;
                }
            }
        }
        let gb = self.b.grad_mut();
        gb[0] += dlogits[0];
        gb[1] += dlogits[1];
        let (w0, w1) = (self.w.row(0), self.w.row(1));
        w0.iter()
            .zip(w1)
            .map(|(a, b)| a * dlogits[0] + b * dlogits[1])
            .collect()
    }
}

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl BaselineParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: ParamTensor::zeros("baseline.w", 1, hidden),
            b: ParamTensor::zeros("baseline.b", 1, 1),
        }
    }

    /// Accumulates `dvalue * d b_t / dθ_b`. The state is detached, so no
    /// state gradient is produced.
    pub fn backward(&mut self, state: &[f64], dvalue: f64) {
        for (g, s) in self.w.grad_mut().iter_mut().zip(state) {
            *g += dvalue * s;
        }
        self.b.grad_mut()[0] += dvalue;
    }
}

impl ParamSet for BaselineParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// `d_t = sigmoid(w·S_t + b)`; angry iff `d_t > 0.5`.
pub fn classify(state: &[f64], params: &ClassifierParams) -> (f64, Emotion) {
    let d = sigmoid(params.logit(state));
    (d, decide(d))
}

pub fn decide(d: f64) -> Emotion {
    if d > 0.5 {
        Emotion::Angry
    } else {
        Emotion::Neutral
    }
}

/// Binary cross-entropy of the clamped probability and its gradient with
/// respect to the classifier logit.
pub fn classification_loss(d: f64, truth: Emotion) -> (f64, f64) {
    let y = truth.target();
    let p = d.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    (loss, d - y)
}

/// Softmax over `[wait, terminate]` logits.
pub fn policy_distribution(state: &[f64], params: &PolicyParams) -> [f64; 2] {
    let p = softmax(&params.logits(state)).expect("finite state yields finite logits");
    [p[0], p[1]]
}

/// Chooses an action and returns it with its log-probability.
pub fn select_action<R: Rng + ?Sized>(probs: [f64; 2], mode: SelectionMode, rng: &mut R) -> (Action, f64) {
    let action = match mode {
        SelectionMode::Greedy => {
            if probs[Action::Wait.index()] > probs[Action::Terminate.index()] {
                Action::Wait
            } else {
                Action::Terminate
            }
        }
        SelectionMode::Stochastic => {
            let u: f64 = rng.random();
            if u < probs[Action::Wait.index()] {
                Action::Wait
            } else {
                Action::Terminate
            }
        }
    };
    (action, probs[action.index()].ln())
}

pub fn baseline_value(state: &[f64], params: &BaselineParams) -> f64 {
    dot(params.w.values(), state) + params.b.values()[0]
}
