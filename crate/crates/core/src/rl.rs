//! Terminal rewards, discounted returns, baseline-subtracted and rescaled
//! advantages, and the REINFORCE / baseline-regression gradient terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Action, BaselineParams, Emotion, PolicyParams};

/// Accuracy rewards keyed on (decision, truth), plus the discount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Decided angry, truth angry.
    pub true_positive: f64,
    /// Decided neutral, truth neutral.
    pub true_negative: f64,
    /// Decided angry, truth neutral.
    pub false_alarm: f64,
    /// Decided neutral, truth angry.
    pub missed: f64,
    /// Episode ended without a terminate action.
    pub no_decision: f64,
    pub gamma: f64,
    /// Add the latency bonus on forced cutoffs as well.
    pub latency_on_cutoff: bool,
    /// What the `t` in the latency bonus counts.
    pub latency_clock: LatencyClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyClock {
    /// Decision steps taken before ending (0 for the first query).
    DecisionSteps,
    /// Frames consumed minus one.
    Frames,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            true_positive: 1.0,
            true_negative: 1.0,
            false_alarm: -1.0,
            missed: -1.0,
            no_decision: -1.0,
            gamma: 0.99,
            latency_on_cutoff: true,
            latency_clock: LatencyClock::DecisionSteps,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

pub fn accuracy_reward(decision: Emotion, truth: Emotion, terminated_by_policy: bool, cfg: &RewardConfig) -> f64 {
    if !terminated_by_policy {
        return cfg.no_decision;
    }
    match (decision, truth) {
        (Emotion::Angry, Emotion::Angry) => cfg.true_positive,
        (Emotion::Neutral, Emotion::Neutral) => cfg.true_negative,
        (Emotion::Angry, Emotion::Neutral) => cfg.false_alarm,
        (Emotion::Neutral, Emotion::Angry) => cfg.missed,
    }
}

/// `1 / (t + 1)` for the decision step `t` at which the episode ended.
pub fn latency_reward(step: usize) -> f64 {
    1.0 / (step as f64 + 1.0)
}

pub fn terminal_reward(
    decision: Emotion,
    truth: Emotion,
    terminated_by_policy: bool,
    step: usize,
    cfg: &RewardConfig,
) -> f64 {
    let acc = accuracy_reward(decision, truth, terminated_by_policy, cfg);
    if terminated_by_policy || cfg.latency_on_cutoff {
        acc + latency_reward(step)
    } else {
        acc
    }
}

/// Discounted returns `R_t = sum_{t' >= t} gamma^(t' - t) r_t'`.
///
/// Only nonzero rewards are propagated, each with an explicit power of the
/// discount, so a terminal-only episode gives exactly `gamma^(T-t) * r_T`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for (tp, &r) in rewards.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        for (t, o) in out.iter_mut().enumerate().take(tp + 1) {
            *o += gamma.powi((tp - t) as i32) * r;
        }
    }
    out
}

/// Exponentially weighted mean and variance of baseline-subtracted returns.
///
/// Each observation `x` updates
/// `mean += (1 - decay) * (x - mean)` and
/// `var = decay * (var + (1 - decay) * (x - mean_old)^2)`,
/// which is the weighted population variance of all observations so far
/// with weights `(1 - decay) * decay^age` (the initial zero state carries
/// the remaining weight).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageNormalizer {
    pub mean: f64,
    pub var: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for AdvantageNormalizer {
    fn default() -> Self {
        Self::new(0.9, 1e-8)
    }
}

impl AdvantageNormalizer {
    pub fn new(decay: f64, epsilon: f64) -> Self {
        Self {
            mean: 0.0,
            var: 0.0,
            decay,
            epsilon,
        }
    }

    pub fn update(&mut self, x: f64) {
        let delta = x - self.mean;
        self.mean += (1.0 - self.decay) * delta;
        self.var = self.decay * (self.var + (1.0 - self.decay) * delta * delta);
    }

    pub fn scale(&self, x: f64) -> f64 {
        (x - self.mean) / (self.var + self.epsilon).sqrt()
    }
}

/// `R~_t = (R_t - b_t - mean) / sqrt(var + eps)`, with the running statistics
/// first updated with every `R_t - b_t` of the episode, in order.
pub fn advantages(returns: &[f64], baselines: &[f64], normalizer: &mut AdvantageNormalizer) -> Result<Vec<f64>> {
    if returns.len() != baselines.len() {
        return Err(Error::Dimension(format!(
            "{} returns vs {} baseline values",
            returns.len(),
            baselines.len()
        )));
    }
    let centered: Vec<f64> = returns.iter().zip(baselines).map(|(r, b)| r - b).collect();
    for &x in &centered {
        normalizer.update(x);
    }
    Ok(centered.into_iter().map(|x| normalizer.scale(x)).collect())
}

/// One policy query within an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStep {
    /// Decision step index (0-based).
    pub step: usize,
    /// Frames consumed when the decision was taken (1-based frame index).
    pub frame: usize,
    /// Running-mean state `S_t` the heads saw.
    pub state: Vec<f64>,
    pub probs: [f64; 2],
    pub action: Action,
    pub log_prob: f64,
    /// Baseline estimate; a detached copy of the head output.
    pub baseline: f64,
    pub reward: f64,
}

/// Record of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<DecisionStep>,
    pub terminated_by_policy: bool,
    /// Classifier decision at the last step (reported even on forced cutoff).
    pub decision: Emotion,
    /// Classifier probability `d_t` at the last step.
    pub prob: f64,
    pub truth: Emotion,
    /// Frames consumed at the end of the episode.
    pub termination_frame: usize,
    /// Total frames in the utterance.
    pub length: usize,
}

impl EpisodeTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn baselines(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.baseline).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Index of the final decision step.
    pub fn termination_step(&self) -> usize {
        self.steps.last().map_or(0, |s| s.step)
    }

    pub fn relative_latency(&self) -> f64 {
        self.termination_frame as f64 / self.length as f64
    }

    /// Checks the structural invariants of a finished episode.
    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::Validation("episode has no decision steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let last = i + 1 == n;
            if s.action == Action::Terminate && !last {
                return Err(Error::Validation(format!("terminate at step {i} is not the last step")));
            }
            if !last && s.reward != 0.0 {
                return Err(Error::Validation(format!("non-terminal step {i} has reward {}", s.reward)));
            }
        }
        let ended_by_terminate = self.steps[n - 1].action == Action::Terminate;
        if ended_by_terminate != self.terminated_by_policy {
            return Err(Error::Validation("termination flag disagrees with last action".into()));
        }
        Ok(())
    }
}

/// Accumulates `scale * sum_t grad log pi(a_t | S_t) * advantage_t` into the
/// policy gradient buffers (`scale = 1` is the ascent direction) and returns
/// the matching gradients on each step's state as `(frame, dS)` pairs.
pub fn policy_gradient_accumulate(
    trace: &EpisodeTrace,
    advantages: &[f64],
    policy: &mut PolicyParams,
    scale: f64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if advantages.len() != trace.steps.len() {
        return Err(Error::Dimension(format!(
            "{} advantages for {} steps",
            advantages.len(),
            trace.steps.len()
        )));
    }
    Ok(trace
        .steps
        .iter()
        .zip(advantages)
        .map(|(s, &a)| (s.frame, policy.backward_log_prob(&s.state, s.probs, s.action, scale * a)))
        .collect())
}

/// `J_b = sum_t (R_t - b_t)^2`; gradients go to the baseline head only.
pub fn baseline_loss(returns: &[f64], trace: &EpisodeTrace, baseline: &mut BaselineParams) -> Result<f64> {
    if returns.len() != trace.steps.len() {
        return Err(Error::Dimension(format!(
            "{} returns for {} steps",
            returns.len(),
            trace.steps.len()
        )));
    }
    let mut loss = 0.0;
    for (s, &r) in trace.steps.iter().zip(returns) {
        let diff = r - s.baseline;
        loss += diff * diff;
        baseline.backward(&s.state, -2.0 * diff);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn reward_table() {
        use Emotion::*;
        let c = cfg();
        assert_eq!(accuracy_reward(Angry, Angry, true, &c), 1.0);
        assert_eq!(accuracy_reward(Neutral, Angry, true, &c), -1.0);
        assert_eq!(accuracy_reward(Angry, Neutral, true, &c), -1.0);
        assert_eq!(accuracy_reward(Neutral, Neutral, true, &c), 1.0);
        assert_eq!(accuracy_reward(Angry, Neutral, false, &c), -1.0);
        assert_eq!(accuracy_reward(Neutral, Neutral, false, &c), -1.0);
    }

    #[test]
    fn latency_examples() {
        assert_eq!(latency_reward(0), 1.0);
        assert_eq!(latency_reward(9), 0.1);
        for t in 0..1000 {
            assert!(latency_reward(t + 1) < latency_reward(t));
        }
    }

    #[test]
    fn terminal_examples() {
        use Emotion::*;
        let c = cfg();
        assert_eq!(terminal_reward(Angry, Angry, true, 0, &c), 2.0);
        assert_eq!(terminal_reward(Angry, Neutral, true, 9, &c), -0.9);
        assert_eq!(terminal_reward(Neutral, Neutral, false, 49, &c), -1.0 + 1.0 / 50.0);
        let no_bonus = RewardConfig {
            latency_on_cutoff: false,
            ..c
        };
        assert_eq!(terminal_reward(Neutral, Neutral, false, 49, &no_bonus), -1.0);
    }

    #[test]
    fn returns_examples() {
        let r = returns(&[0.0, 0.0, 2.0], 0.99);
        assert_eq!(r[2], 2.0);
        assert!((r[1] - 1.98).abs() < 1e-15);
        assert!((r[0] - 1.9602).abs() < 1e-15);
        assert_eq!(returns(&[0.0, 0.0, -1.0], 1.0), vec![-1.0; 3]);
        assert_eq!(returns(&[], 0.5), Vec::<f64>::new());
    }

    #[test]
    fn gamma_validation() {
        assert!(RewardConfig { gamma: 0.0, ..cfg() }.validate().is_err());
        assert!(RewardConfig { gamma: 1.0, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn advantages_at_the_mean_are_zero() {
        let mut n = AdvantageNormalizer::new(0.9, 1e-8);
        n.mean = 0.5;
        n.var = 0.2;
        let a = advantages(&[1.5, 0.5], &[1.0, 0.0], &mut n).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_variance_stays_finite() {
        let mut n = AdvantageNormalizer::new(0.9, 1e-8);
        let a = advantages(&[0.0, 0.0], &[0.0, 0.0], &mut n).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(n.var >= 0.0);
    }

    #[test]
    fn mismatched_lengths() {
        let mut n = AdvantageNormalizer::default();
        assert!(advantages(&[1.0], &[], &mut n).is_err());
    }

    fn one_step_trace(action: Action, state: Vec<f64>, probs: [f64; 2], baseline: f64) -> EpisodeTrace {
        EpisodeTrace {
            steps: vec![DecisionStep {
                step: 0,
                frame: 1,
                state,
                probs,
                action,
                log_prob: probs[action.index()].ln(),
                baseline,
                reward: 2.0,
            }],
            terminated_by_policy: action == Action::Terminate,
            decision: Emotion::Angry,
            prob: 0.9,
            truth: Emotion::Angry,
            termination_frame: 1,
            length: 10,
        }
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let mut p = PolicyParams::zeros(3);
        p.w.values_mut().copy_from_slice(&[0.1, 0.2, 0.3, -0.1, 0.0, 0.5]);
        let tr = one_step_trace(Action::Terminate, vec![1.0, -1.0, 0.5], [0.4, 0.6], 0.0);
        let ds = policy_gradient_accumulate(&tr, &[0.0], &mut p, 1.0).unwrap();
        assert!(ds[0].1.iter().all(|&v| v == 0.0));
        assert!(p.tensors().iter().all(|t| t.grad().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn gradient_is_linear_in_advantage() {
        let tr = one_step_trace(Action::Wait, vec![1.0, -1.0, 0.5], [0.4, 0.6], 0.0);
        let mut p1 = PolicyParams::zeros(3);
        let mut p2 = PolicyParams::zeros(3);
        let d1 = policy_gradient_accumulate(&tr, &[0.75], &mut p1, 1.0).unwrap();
        let d2 = policy_gradient_accumulate(&tr, &[1.5], &mut p2, 1.0).unwrap();
        for (a, b) in p1.w.grad().iter().zip(p2.w.grad()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in d1[0].1.iter().zip(&d2[0].1) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn baseline_loss_example() {
        let tr = one_step_trace(Action::Terminate, vec![0.0, 0.0], [0.5, 0.5], 0.0);
        let mut b = BaselineParams::zeros(2);
        let loss = baseline_loss(&[2.0], &tr, &mut b).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(b.b.grad()[0], -4.0);
        let tr = one_step_trace(Action::Terminate, vec![0.3, 0.1], [0.5, 0.5], 2.0);
        let mut b = BaselineParams::zeros(2);
        assert_eq!(baseline_loss(&[2.0], &tr, &mut b).unwrap(), 0.0);
    }

    #[test]
    fn trace_validation() {
        let mut tr = one_step_trace(Action::Terminate, vec![0.0], [0.5, 0.5], 0.0);
        assert!(tr.validate().is_ok());
        let mut early = tr.steps[0].clone();
        early.reward = 0.0;
        tr.steps.insert(0, early);
        assert!(tr.validate().is_err(), "terminate before the last step");
    }
}
