use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{decision_frame, Checkpoint};
use crate::encoder::{gru_step, EncoderState};
use crate::error::{Error, Result};
use crate::heads::{classify, policy_distribution, select_action, Action, Emotion, SelectionMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamOutcome {
    Wait,
    /// The policy chose to stop.
    Terminate { decision: Emotion, prob: f64 },
    /// The utterance or the step budget ran out first.
    Forced { decision: Emotion, prob: f64 },
}

/// One decision point of a streamed utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEvent {
    pub step: usize,
    /// Frames consumed so far (1-based index of the decision frame).
    pub frame: usize,
    pub p_terminate: f64,
    pub outcome: StreamOutcome,
}

impl StreamEvent {
    pub fn is_final(&self) -> bool {
        !matches!(self.outcome, StreamOutcome::Wait)
    }
}

/// Greedy agent fed one raw (unnormalized) frame at a time.
///
/// Decisions match [`run_episode`](super::run_episode) in greedy mode on the
/// same utterance: the policy is queried every decision interval, once more
/// at the final frame, and the episode is cut at the step budget.
#[derive(Debug)]
pub struct StreamSession<'a> {
    ckpt: &'a Checkpoint,
    state: EncoderState,
    step: usize,
    last_decision_frame: usize,
    done: bool,
    force_terminate: bool,
    rng: ChaCha8Rng,
}

impl<'a> StreamSession<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self {
            ckpt,
            state: EncoderState::new(ckpt.model.hidden()),
            step: 0,
            last_decision_frame: 0,
            done: false,
            force_terminate: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Debug switch: terminate at the first decision point regardless of the
    /// policy.
    pub fn with_forced_termination(mut self, on: bool) -> Self {
        self.force_terminate = on;
        self
    }

    pub fn frames(&self) -> usize {
        self.state.t as usize
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Consumes one frame; returns the event when it lands on a decision point.
    pub fn push(&mut self, frame: &[f64]) -> Result<Option<StreamEvent>> {
        if self.done {
            return Err(Error::Validation("stream already ended with a decision".into()));
        }
        if frame.len() != self.ckpt.norm.dim() {
            return Err(Error::Dimension(format!(
                "frame has {} values, checkpoint expects {}",
                frame.len(),
                self.ckpt.norm.dim()
            )));
        }
        let x = self.ckpt.norm.normalize(frame);
        self.state = gru_step(&x, &self.state, &self.ckpt.model.gru)?;
        let cfg = &self.ckpt.config;
        if self.frames() == decision_frame(self.step, cfg.decision_interval, usize::MAX) {
            let cutoff = self.step + 1 == cfg.max_steps();
            return self.decide(cutoff).map(Some);
        }
        Ok(None)
    }

    /// Signals end of audio. Emits the closing event unless a decision was
    /// already final.
    pub fn finish(&mut self) -> Result<Option<StreamEvent>> {
        if self.done {
            return Ok(None);
        }
        if self.frames() == 0 {
            return Err(Error::Empty("stream ended before the first frame".into()));
        }
        if self.last_decision_frame == self.frames() {
            // The last query already happened on this frame and chose to wait.
            self.step -= 1;
            self.done = true;
            let (prob, decision) = classify(&self.state.mean, &self.ckpt.model.classifier);
            let p = policy_distribution(&self.state.mean, &self.ckpt.model.policy)[Action::Terminate.index()];
            return Ok(Some(StreamEvent {
                step: self.step,
                frame: self.frames(),
                p_terminate: p,
                outcome: StreamOutcome::Forced { decision, prob },
            }));
        }
        self.decide(true).map(Some)
    }

    fn decide(&mut self, last_chance: bool) -> Result<StreamEvent> {
        let s = &self.state.mean;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite encoder state at frame {}", self.frames())));
        }
        let probs = policy_distribution(s, &self.ckpt.model.policy);
        let (mut action, _) = select_action(probs, SelectionMode::Greedy, &mut self.rng);
        if self.force_terminate {
            action = Action::Terminate;
        }
        let (prob, decision) = classify(s, &self.ckpt.model.classifier);
        let outcome = match action {
            Action::Terminate => StreamOutcome::Terminate { decision, prob },
            Action::Wait if last_chance => StreamOutcome::Forced { decision, prob },
            Action::Wait => StreamOutcome::Wait,
        };
        let event = StreamEvent {
            step: self.step,
            frame: self.frames(),
            p_terminate: probs[Action::Terminate.index()],
            outcome,
        };
        self.last_decision_frame = self.frames();
        self.step += 1;
        self.done = event.is_final();
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureSeq, NormStats};
    use crate::trainer::{run_episode, TrainConfig};
    use rand::Rng;

    fn checkpoint(term_bias: f64, seed: u64) -> Checkpoint {
        let cfg = TrainConfig {
            hidden: 6,
            decision_interval: 7,
            seed,
            ..Default::default()
        };
        let mut ck = Checkpoint::new(cfg, NormStats::identity(4)).unwrap();
        ck.model.policy.b.values_mut()[Action::Terminate.index()] = term_bias;
        ck
    }

    fn utterance(len: usize, seed: u64) -> FeatureSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureSeq::from_flat(4, data).unwrap()
    }

    fn stream_all(ck: &Checkpoint, f: &FeatureSeq) -> Vec<StreamEvent> {
        let mut s = StreamSession::new(ck);
        let mut events = Vec::new();
        for x in f.frames() {
            if let Some(e) = s.push(x).unwrap() {
                events.push(e);
                if e.is_final() {
                    return events;
                }
            }
        }
        events.extend(s.finish().unwrap());
        events
    }

    #[test]
    fn matches_greedy_episodes() {
        for seed in 0..40 {
            let ck = checkpoint([-3.0, -0.3, 0.0, 0.4][seed as usize % 4], seed);
            let f = utterance(5 + seed as usize * 3, seed);
            let events = stream_all(&ck, &f);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let tr = run_episode(&ck.model, &f, Emotion::Angry, &ck.config, SelectionMode::Greedy, &mut rng).unwrap();
            let last = events.last().unwrap();
            assert_eq!(events.iter().filter(|e| e.is_final()).count(), 1);
            assert_eq!(last.frame, tr.termination_frame, "seed {seed}");
            assert_eq!(last.step, tr.termination_step());
            let (decision, prob) = match last.outcome {
                StreamOutcome::Terminate { decision, prob } => {
                    assert!(tr.terminated_by_policy);
                    (decision, prob)
                }
                StreamOutcome::Forced { decision, prob } => {
                    assert!(!tr.terminated_by_policy);
                    (decision, prob)
                }
                StreamOutcome::Wait => unreachable!(),
            };
            assert_eq!((decision, prob), (tr.decision, tr.prob));
        }
    }

    #[test]
    fn forced_termination_fires_at_step_zero() {
        let ck = checkpoint(-30.0, 1);
        let f = utterance(40, 2);
        let mut s = StreamSession::new(&ck).with_forced_termination(true);
        let mut first = None;
        for x in f.frames() {
            if let Some(e) = s.push(x).unwrap() {
                first = Some(e);
                break;
            }
        }
        let e = first.unwrap();
        assert_eq!((e.step, e.frame), (0, 7));
        assert!(matches!(e.outcome, StreamOutcome::Terminate { .. }));
        assert!(s.push(f.frame(8)).is_err());
    }

    #[test]
    fn waiting_policy_is_cut_at_the_step_budget() {
        let mut ck = checkpoint(-30.0, 3);
        ck.config.max_steps = Some(2);
        let events = stream_all(&ck, &utterance(40, 4));
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].frame, 14);
        assert!(matches!(events[1].outcome, StreamOutcome::Forced { .. }));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let ck = checkpoint(0.0, 0);
        assert!(StreamSession::new(&ck).finish().is_err());
    }
}
