//! Supervised pre-training, episode rollouts and the joint policy-gradient
//! training loop.

mod checkpoint;
mod stream;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use stream::{StreamEvent, StreamOutcome, StreamSession};

use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::encoder::{gru_backward_params, GruParams, GruTrace, Upstream, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::features::{compute_norm_stats, FeatureSeq, NormStats};
use crate::heads::{
    baseline_value, classification_loss, classify, policy_distribution, select_action, Action, BaselineParams,
    ClassifierParams, Emotion, PolicyParams, SelectionMode,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, ParamTensor};
use crate::rl::{
    advantages, baseline_loss, policy_gradient_accumulate, returns, terminal_reward, AdvantageNormalizer,
    DecisionStep, EpisodeTrace, LatencyClock, RewardConfig,
};

/// Frames per second of the default 10 ms hop.
const FRAMES_PER_SECOND: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the training utterances held out for early stopping.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-5,
            validation_fraction: 0.1,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub hidden: usize,
    /// Frames between policy queries (30 frames = 300 ms).
    pub decision_interval: usize,
    /// Cutoff in decision steps; defaults to ten seconds of audio.
    pub max_steps: Option<usize>,
    /// Total reinforcement-learning episodes.
    pub episodes: u64,
    /// Episodes during which the encoder and classifier stay fixed.
    pub freeze_episodes: u64,
    pub normalizer_decay: f64,
    pub normalizer_epsilon: f64,
    pub adam: AdamConfig,
    pub rewards: RewardConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            decision_interval: 30,
            max_steps: None,
            episodes: 20_000,
            freeze_episodes: 5_000,
            normalizer_decay: 0.9,
            normalizer_epsilon: 1e-8,
            adam: AdamConfig::default(),
            rewards: RewardConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn max_steps(&self) -> usize {
        self.max_steps
            .unwrap_or_else(|| (10 * FRAMES_PER_SECOND).div_ceil(self.decision_interval.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if self.decision_interval == 0 {
            return bad("decision interval must be at least one frame");
        }
        if self.max_steps == Some(0) {
            return bad("max decision steps must be positive");
        }
        if !(self.adam.lr > 0.0 && self.pretrain.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.adam.weight_decay >= 0.0 && self.pretrain.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.normalizer_decay) || self.normalizer_epsilon <= 0.0 {
            return bad("normalizer decay must lie in [0, 1) and epsilon be positive");
        }
        if !(0.0..1.0).contains(&self.pretrain.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        self.rewards.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoder plus the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub gru: GruParams,
    pub classifier: ClassifierParams,
    pub policy: PolicyParams,
    pub baseline: BaselineParams,
}

impl Model {
    pub fn init<R: rand::Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            gru: GruParams::init(input_dim, hidden, rng),
            classifier: ClassifierParams::init(hidden, rng),
            policy: PolicyParams::init(hidden, rng),
            baseline: BaselineParams::zeros(hidden),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            gru: GruParams::zeros(input_dim, hidden),
            classifier: ClassifierParams::zeros(hidden),
            policy: PolicyParams::zeros(hidden),
            baseline: BaselineParams::zeros(hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gru.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden()
    }

    /// Freezes or releases the encoder and the classifier.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.gru.set_frozen(frozen);
        self.classifier.set_frozen(frozen);
    }

    /// Running mean after the first `frames` frames, or after all of them.
    pub fn encode(&self, features: &FeatureSeq, frames: Option<usize>) -> Result<Vec<f64>> {
        let n = frames.unwrap_or(features.len()).min(features.len());
        if n == 0 {
            return Err(Error::Empty("cannot encode zero frames".into()));
        }
        let trace = GruTrace::run(&self.gru, features.frames().take(n))?;
        Ok(trace.mean(n).to_vec())
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.gru.tensors();
        v.extend(self.classifier.tensors());
        v.extend(self.policy.tensors());
        v.extend(self.baseline.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.gru.tensors_mut();
        v.extend(self.classifier.tensors_mut());
        v.extend(self.policy.tensors_mut());
        v.extend(self.baseline.tensors_mut());
        v
    }
}

/// Everything needed to evaluate or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub model: Model,
    /// Adam moments for the reinforcement phase, one per model tensor.
    pub optimizer: Vec<AdamState>,
    /// Reinforcement-learning episodes completed.
    pub episode: u64,
    pub rng: ChaCha8Rng,
    pub normalizer: AdvantageNormalizer,
}

impl Checkpoint {
    /// Fresh model and optimizer state for `input_dim`-wide features.
    pub fn new(config: TrainConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(norm.dim(), config.hidden, &mut rng);
        let optimizer = fresh_optimizer(&model, config.adam);
        let normalizer = AdvantageNormalizer::new(config.normalizer_decay, config.normalizer_epsilon);
        Ok(Self {
            config,
            norm,
            model,
            optimizer,
            episode: 0,
            rng,
            normalizer,
        })
    }

    pub fn normalize(&self, features: &FeatureSeq) -> Result<FeatureSeq> {
        self.norm.normalize_seq(features)
    }

    /// Replaces the seed before reinforcement training starts. The episode
    /// order and the action-sampling stream both follow the new seed.
    pub fn reseed(&mut self, seed: u64) -> Result<()> {
        if self.episode > 0 {
            return Err(Error::Config(format!(
                "cannot reseed a run that has completed {} episodes",
                self.episode
            )));
        }
        self.config.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(())
    }
}

fn fresh_optimizer<M: ParamSet + ?Sized>(model: &M, config: AdamConfig) -> Vec<AdamState> {
    model.tensors().iter().map(|t| AdamState::new(t.len(), config)).collect()
}

fn optimizer_step<M: ParamSet + ?Sized>(model: &mut M, states: &mut [AdamState]) -> Result<()> {
    for (t, s) in model.tensors_mut().into_iter().zip(states.iter_mut()) {
        adam_step(t, s)?;
    }
    Ok(())
}

/// Independent shuffling stream for `(seed, purpose, epoch)`.
fn shuffle_rng(seed: u64, purpose: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 48 | epoch);
    rng
}

const STREAM_SPLIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_EPISODES: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per completed epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation loss per completed epoch (empty without a split).
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept (0 means the initialization).
    pub best_epoch: usize,
}

fn bce_on_final_mean(model: &Model, features: &FeatureSeq, truth: Emotion) -> Result<f64> {
    let s = model.encode(features, None)?;
    let (d, _) = classify(&s, &model.classifier);
    Ok(classification_loss(d, truth).0)
}

fn mean_bce(model: &Model, set: &[(FeatureSeq, Emotion)]) -> Result<f64> {
    let mut total = 0.0;
    for (f, y) in set {
        total += bce_on_final_mean(model, f, *y)?;
    }
    Ok(total / set.len() as f64)
}

/// Trains the encoder and classifier on full utterances with cross-entropy
/// on the final running mean. Normalization statistics come from `corpus`.
/// The policy and baseline heads keep their initial values.
pub fn pretrain(corpus: &[Utterance], config: &TrainConfig) -> Result<(Checkpoint, PretrainReport)> {
    let usable: Vec<&Utterance> = corpus.iter().filter(|u| !u.features.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("pre-training corpus has no frames".into()));
    }
    let norm = compute_norm_stats(usable.iter().map(|u| &u.features))?;
    let mut ckpt = Checkpoint::new(config.clone(), norm)?;
    let pc = &config.pretrain;

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut shuffle_rng(config.seed, STREAM_SPLIT, 0));
    let n_val = ((usable.len() as f64) * pc.validation_fraction).floor() as usize;
    let n_val = if usable.len() - n_val == 0 { 0 } else { n_val };
    let normalized = |idx: &[usize]| -> Result<Vec<(FeatureSeq, Emotion)>> {
        idx.iter()
            .map(|&i| Ok((ckpt.norm.normalize_seq(&usable[i].features)?, usable[i].label)))
            .collect()
    };
    let val = normalized(&order[..n_val])?;
    let train = normalized(&order[n_val..])?;

    let mut model = ckpt.model.clone();
    model.policy.set_frozen(true);
    model.baseline.set_frozen(true);
    let adam = AdamConfig {
        lr: pc.lr,
        weight_decay: pc.weight_decay,
        ..config.adam
    };
    let mut opt = fresh_optimizer(&model, adam);
    let mut report = PretrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best = (if val.is_empty() { f64::INFINITY } else { mean_bce(&model, &val)? }, model.clone());
    let mut since_best = 0;
    let mut trace = GruTrace::new(&model.gru);

    for epoch in 0..pc.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut shuffle_rng(config.seed, STREAM_PRETRAIN, epoch as u64));
        let mut total = 0.0;
        for &i in &idx {
            let (x, y) = &train[i];
            trace.reset(&model.gru);
            for f in x.frames() {
                trace.step(&model.gru, f)?;
            }
            let n = trace.len();
            let s = trace.mean(n);
            let (d, _) = classify(s, &model.classifier);
            let (loss, dlogit) = classification_loss(d, *y);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    episode: epoch as u64,
                    detail: format!("pre-training loss {loss} on a {n}-frame utterance"),
                });
            }
            total += loss;
            let ds = model.classifier.backward(s, dlogit);
            gru_backward_params(
                &mut model.gru,
                &trace,
                &Upstream {
                    mean: vec![(n, ds)],
                    last_hidden: None,
                },
            )?;
            optimizer_step(&mut model, &mut opt)?;
        }
        let train_loss = total / train.len() as f64;
        report.train_loss.push(train_loss);
        if val.is_empty() {
            best = (train_loss, model.clone());
            report.best_epoch = epoch + 1;
            info!("pretrain epoch {}: loss {train_loss:.5}", epoch + 1);
            continue;
        }
        let val_loss = mean_bce(&model, &val)?;
        report.val_loss.push(val_loss);
        info!("pretrain epoch {}: loss {train_loss:.5}, validation {val_loss:.5}", epoch + 1);
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            report.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= pc.patience {
                info!("early stop after epoch {}; keeping epoch {}", epoch + 1, report.best_epoch);
                break;
            }
        }
    }
    let mut model = best.1;
    model.policy.set_frozen(false);
    model.baseline.set_frozen(false);
    ckpt.model = model;
    Ok((ckpt, report))
}

/// An episode record together with the encoder activations it consumed.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trace: EpisodeTrace,
    /// Absent when the states came from a precomputed cache.
    pub encoder: Option<GruTrace>,
}

/// Frame (1-based) at which decision step `k` is taken.
pub fn decision_frame(step: usize, interval: usize, len: usize) -> usize {
    (interval * (step + 1)).min(len)
}

/// Running means at every decision frame the rollout can reach.
pub fn decision_states(model: &Model, features: &FeatureSeq, config: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let len = features.len();
    let mut trace = GruTrace::new(&model.gru);
    let mut out = Vec::new();
    for k in 0..config.max_steps() {
        let frame = decision_frame(k, config.decision_interval, len);
        while trace.len() < frame {
            trace.step(&model.gru, features.frame(trace.len()))?;
        }
        out.push(trace.mean(frame).to_vec());
        if frame == len {
            break;
        }
    }
    Ok(out)
}

fn rollout_impl<R: rand::Rng + ?Sized>(
    model: &Model,
    features: &FeatureSeq,
    truth: Emotion,
    config: &TrainConfig,
    mode: SelectionMode,
    rng: &mut R,
    cache: Option<&[Vec<f64>]>,
) -> Result<Rollout> {
    let len = features.len();
    if len == 0 {
        return Err(Error::Empty("utterance has no frames".into()));
    }
    let max_steps = config.max_steps();
    let mut encoder = cache.is_none().then(|| GruTrace::new(&model.gru));
    let mut steps: Vec<DecisionStep> = Vec::new();
    for k in 0..max_steps {
        let frame = decision_frame(k, config.decision_interval, len);
        let state = match (&mut encoder, cache) {
            (Some(tr), _) => {
                while tr.len() < frame {
                    tr.step(&model.gru, features.frame(tr.len()))?;
                }
                tr.mean(frame).to_vec()
            }
            (None, Some(c)) => c[k].clone(),
            (None, None) => unreachable!(),
        };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite encoder state at frame {frame}")));
        }
        let probs = policy_distribution(&state, &model.policy);
        let (action, log_prob) = select_action(probs, mode, rng);
        let baseline = baseline_value(&state, &model.baseline);
        steps.push(DecisionStep {
            step: k,
            frame,
            state,
            probs,
            action,
            log_prob,
            baseline,
            reward: 0.0,
        });
        if action == Action::Terminate || frame == len {
            break;
        }
    }
    let last = steps.last_mut().expect("at least one decision step");
    let terminated_by_policy = last.action == Action::Terminate;
    let (prob, decision) = classify(&last.state, &model.classifier);
    let t = match config.rewards.latency_clock {
        LatencyClock::DecisionSteps => last.step,
        LatencyClock::Frames => last.frame - 1,
    };
    last.reward = terminal_reward(decision, truth, terminated_by_policy, t, &config.rewards);
    let termination_frame = last.frame;
    Ok(Rollout {
        trace: EpisodeTrace {
            steps,
            terminated_by_policy,
            decision,
            prob,
            truth,
            termination_frame,
            length: len,
        },
        encoder,
    })
}

/// Plays one episode over already-normalized `features`: the policy is
/// queried every decision interval (and at the last frame) until it
/// terminates or the utterance or step budget runs out.
pub fn run_episode<R: rand::Rng + ?Sized>(
    model: &Model,
    features: &FeatureSeq,
    truth: Emotion,
    config: &TrainConfig,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    Ok(rollout_impl(model, features, truth, config, mode, rng, None)?.trace)
}

/// [`run_episode`] keeping the encoder activations for backpropagation.
pub fn rollout<R: rand::Rng + ?Sized>(
    model: &Model,
    features: &FeatureSeq,
    truth: Emotion,
    config: &TrainConfig,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<Rollout> {
    rollout_impl(model, features, truth, config, mode, rng, None)
}

/// Which parts of `J = -J_a + J_c + J_b` to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub actor: bool,
    pub classifier: bool,
    pub baseline: bool,
}

impl LossTerms {
    pub const ALL: Self = Self {
        actor: true,
        classifier: true,
        baseline: true,
    };
}

/// Values of the three loss components for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    /// `-sum_t log pi(a_t | S_t) * advantage_t`.
    pub actor: f64,
    /// Cross-entropy of the classification at the last step.
    pub classifier: f64,
    pub baseline: f64,
}

impl LossValues {
    pub fn total(&self) -> f64 {
        self.actor + self.classifier + self.baseline
    }
}

/// Adds the gradient of the selected loss terms to the model's
/// accumulators. Encoder gradients are skipped when the encoder is frozen
/// or the rollout carries no activations.
pub fn accumulate_gradients(
    model: &mut Model,
    rollout: &Rollout,
    advantages: &[f64],
    returns: &[f64],
    terms: LossTerms,
) -> Result<LossValues> {
    let trace = &rollout.trace;
    let mut values = LossValues::default();
    let mut upstream = Upstream::default();
    if terms.actor {
        values.actor = -trace
            .steps
            .iter()
            .zip(advantages)
            .map(|(s, a)| s.log_prob * a)
            .sum::<f64>();
        upstream
            .mean
            .extend(policy_gradient_accumulate(trace, advantages, &mut model.policy, -1.0)?);
    }
    if terms.classifier {
        let last = trace.steps.last().ok_or_else(|| Error::Empty("episode without steps".into()))?;
        let (loss, dlogit) = classification_loss(trace.prob, trace.truth);
        values.classifier = loss;
        upstream.mean.push((last.frame, model.classifier.backward(&last.state, dlogit)));
    }
    if terms.baseline {
        values.baseline = baseline_loss(returns, trace, &mut model.baseline)?;
    }
    let encoder_frozen = model.gru.tensors().iter().all(|t| t.frozen);
    if let (Some(enc), false) = (&rollout.encoder, encoder_frozen || upstream.mean.is_empty()) {
        gru_backward_params(&mut model.gru, enc, &upstream)?;
    }
    Ok(values)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: u64,
    pub utterance: String,
    pub reward: f64,
    pub termination_step: usize,
    pub terminated_by_policy: bool,
    pub correct: bool,
    pub relative_latency: f64,
    pub losses: LossValues,
}

impl fmt::Display for EpisodeLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episode={} utt={} reward={:.6} step={} policy_stop={} correct={} latency={:.4} \
             loss_actor={:.6} loss_cls={:.6} loss_baseline={:.6}",
            self.episode,
            self.utterance,
            self.reward,
            self.termination_step,
            self.terminated_by_policy,
            self.correct,
            self.relative_latency,
            self.losses.actor,
            self.losses.classifier,
            self.losses.baseline
        )
    }
}

fn dump_episode(u: &Utterance, trace: &EpisodeTrace) -> String {
    let mut s = format!("utterance {} ({} frames, truth {}):", u.id, trace.length, trace.truth);
    for st in &trace.steps {
        s.push_str(&format!(
            "\n  step {} frame {} probs [{:.6}, {:.6}] action {:?} baseline {} reward {} |S|max {}",
            st.step,
            st.frame,
            st.probs[0],
            st.probs[1],
            st.action,
            st.baseline,
            st.reward,
            st.state.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        ));
    }
    s
}

/// Continues reinforcement training until `until_episode` episodes have
/// been completed, calling `observe` after every episode.
///
/// Episode `e` plays utterance `perm_k[e mod n]`, where `perm_k` is the
/// shuffle of epoch `k = e / n` derived from the seed, so a resumed run
/// visits exactly the utterances an uninterrupted one would.
pub fn train_with<F>(ckpt: &mut Checkpoint, corpus: &[Utterance], until_episode: u64, mut observe: F) -> Result<()>
where
    F: FnMut(&Model, &EpisodeLog) -> Result<()>,
{
    let config = ckpt.config.clone();
    config.validate()?;
    let usable: Vec<&Utterance> = corpus.iter().filter(|u| !u.features.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("training corpus has no frames".into()));
    }
    if ckpt.optimizer.len() != ckpt.model.tensors().len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    let feats: Vec<FeatureSeq> = usable
        .iter()
        .map(|u| ckpt.norm.normalize_seq(&u.features))
        .collect::<Result<_>>()?;
    let n = usable.len() as u64;
    let mut cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; usable.len()];
    let mut perm: (u64, Vec<usize>) = (u64::MAX, Vec::new());

    while ckpt.episode < until_episode {
        let e = ckpt.episode;
        let epoch = e / n;
        if perm.0 != epoch {
            let mut p: Vec<usize> = (0..usable.len()).collect();
            p.shuffle(&mut shuffle_rng(config.seed, STREAM_EPISODES, epoch));
            perm = (epoch, p);
        }
        let i = perm.1[(e % n) as usize];
        let utt = usable[i];
        let frozen = e < config.freeze_episodes;
        ckpt.model.set_encoder_frozen(frozen);

        let ro = if frozen {
            if cache[i].is_none() {
                cache[i] = Some(decision_states(&ckpt.model, &feats[i], &config)?);
            }
            rollout_impl(
                &ckpt.model,
                &feats[i],
                utt.label,
                &config,
                SelectionMode::Stochastic,
                &mut ckpt.rng,
                cache[i].as_deref(),
            )
        } else {
            rollout_impl(&ckpt.model, &feats[i], utt.label, &config, SelectionMode::Stochastic, &mut ckpt.rng, None)
        }
        .map_err(|err| Error::Diverged {
            episode: e + 1,
            detail: format!("rollout failed on {}: {err}", utt.id),
        })?;

        let rets = returns(&ro.trace.rewards(), config.rewards.gamma);
        let adv = advantages(&rets, &ro.trace.baselines(), &mut ckpt.normalizer)?;
        let terms = LossTerms {
            classifier: !frozen,
            ..LossTerms::ALL
        };
        let losses = accumulate_gradients(&mut ckpt.model, &ro, &adv, &rets, terms)?;
        if !losses.total().is_finite() {
            return Err(Error::Diverged {
                episode: e + 1,
                detail: format!("loss {:?}\n{}", losses, dump_episode(utt, &ro.trace)),
            });
        }
        optimizer_step(&mut ckpt.model, &mut ckpt.optimizer).map_err(|err| Error::Diverged {
            episode: e + 1,
            detail: format!("{err}\n{}", dump_episode(utt, &ro.trace)),
        })?;
        ckpt.episode += 1;

        let log = EpisodeLog {
            episode: ckpt.episode,
            utterance: utt.id.clone(),
            reward: ro.trace.total_reward(),
            termination_step: ro.trace.termination_step(),
            terminated_by_policy: ro.trace.terminated_by_policy,
            correct: ro.trace.decision == ro.trace.truth,
            relative_latency: ro.trace.relative_latency(),
            losses,
        };
        debug!("{log}");
        observe(&ckpt.model, &log)?;
    }
    ckpt.model.set_encoder_frozen(false);
    Ok(())
}

/// [`train_with`] collecting the log lines.
pub fn train(ckpt: &mut Checkpoint, corpus: &[Utterance], until_episode: u64) -> Result<Vec<EpisodeLog>> {
    let mut logs = Vec::new();
    train_with(ckpt, corpus, until_episode, |_, l| {
        logs.push(l.clone());
        Ok(())
    })?;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            decision_interval: 10,
            freeze_episodes: 20,
            pretrain: PretrainConfig {
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_corpus() -> Vec<Utterance> {
        generate_synthetic(&SyntheticConfig {
            utterances: 12,
            speakers: 3,
            min_frames: 30,
            max_frames: 60,
            onset_range: (0.0, 0.3),
            cue_frames: 5,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    fn seq(len: usize) -> FeatureSeq {
        FeatureSeq::from_flat(33, (0..len * 33).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect()).unwrap()
    }

    fn model_with_policy_bias(wait: f64, terminate: f64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::init(33, 6, &mut rng);
        m.policy.w.values_mut().fill(0.0);
        m.policy.b.values_mut().copy_from_slice(&[wait, terminate]);
        m
    }

    #[test]
    fn default_max_steps_covers_ten_seconds() {
        assert_eq!(TrainConfig::default().max_steps(), 34);
        let c = TrainConfig {
            decision_interval: 10,
            ..Default::default()
        };
        assert_eq!(c.max_steps(), 100);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = tiny_config();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("decision_interval = 0").is_err());
    }

    #[test]
    fn short_utterance_gets_one_forced_step() {
        let m = model_with_policy_bias(50.0, -50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = run_episode(&m, &seq(7), Emotion::Angry, &tiny_config(), SelectionMode::Greedy, &mut rng).unwrap();
        assert_eq!(tr.steps.len(), 1);
        assert_eq!(tr.termination_frame, 7);
        assert!(!tr.terminated_by_policy);
        tr.validate().unwrap();
    }

    #[test]
    fn always_terminate_stops_at_step_zero() {
        let m = model_with_policy_bias(-50.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = run_episode(&m, &seq(45), Emotion::Angry, &tiny_config(), SelectionMode::Greedy, &mut rng).unwrap();
        assert_eq!(tr.termination_step(), 0);
        assert!(tr.terminated_by_policy);
        assert_eq!(tr.relative_latency(), 10.0 / 45.0);
    }

    #[test]
    fn always_wait_is_cut_off_with_no_decision_penalty() {
        let m = model_with_policy_bias(50.0, -50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_config();
        let tr = run_episode(&m, &seq(45), Emotion::Angry, &cfg, SelectionMode::Greedy, &mut rng).unwrap();
        assert!(!tr.terminated_by_policy);
        assert_eq!(tr.steps.len(), 5);
        assert_eq!(tr.termination_frame, 45);
        assert_eq!(tr.total_reward(), -1.0 + 1.0 / 5.0);

        let mut frames = cfg.clone();
        frames.rewards.latency_clock = LatencyClock::Frames;
        let tr = run_episode(&m, &seq(45), Emotion::Angry, &frames, SelectionMode::Greedy, &mut rng).unwrap();
        assert_eq!(tr.total_reward(), -1.0 + 1.0 / 45.0);

        let capped = TrainConfig {
            max_steps: Some(2),
            ..cfg
        };
        let tr = run_episode(&m, &seq(45), Emotion::Angry, &capped, SelectionMode::Greedy, &mut rng).unwrap();
        assert_eq!(tr.steps.len(), 2);
        assert_eq!(tr.termination_frame, 20);
    }

    #[test]
    fn cached_states_match_incremental_rollout() {
        let m = model_with_policy_bias(0.3, -0.2);
        let cfg = tiny_config();
        let x = seq(53);
        let cache = decision_states(&m, &x, &cfg).unwrap();
        let a = rollout_impl(&m, &x, Emotion::Neutral, &cfg, SelectionMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(4), None).unwrap();
        let b = rollout_impl(
            &m,
            &x,
            Emotion::Neutral,
            &cfg,
            SelectionMode::Stochastic,
            &mut ChaCha8Rng::seed_from_u64(4),
            Some(&cache),
        )
        .unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            pretrain: PretrainConfig {
                epochs: 0,
                ..Default::default()
            },
            ..tiny_config()
        };
        let (ckpt, report) = pretrain(&corpus, &cfg).unwrap();
        let fresh = Checkpoint::new(cfg, ckpt.norm.clone()).unwrap();
        assert_eq!(ckpt.model, fresh.model);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn pretrain_leaves_policy_and_baseline_untouched() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.pretrain.validation_fraction = 0.0;
        let (ckpt, _) = pretrain(&corpus, &cfg).unwrap();
        let fresh = Checkpoint::new(cfg, ckpt.norm.clone()).unwrap();
        assert_eq!(ckpt.model.policy, fresh.model.policy);
        assert_eq!(ckpt.model.baseline, fresh.model.baseline);
        assert_ne!(ckpt.model.gru, fresh.model.gru);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(pretrain(&[], &tiny_config()), Err(Error::Empty(_))));
    }

    #[test]
    fn freeze_then_release() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let (mut ckpt, _) = pretrain(&corpus, &cfg).unwrap();
        let enc = (ckpt.model.gru.checksum(), ckpt.model.classifier.checksum());
        let mut during = Vec::new();
        train_with(&mut ckpt, &corpus, 40, |m, l| {
            during.push((l.episode, m.gru.checksum(), m.classifier.checksum()));
            Ok(())
        })
        .unwrap();
        for (e, g, c) in &during {
            if *e <= 20 {
                assert_eq!((*g, *c), enc, "episode {e}");
            }
        }
        assert_ne!(during.last().unwrap().1, enc.0);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let run = || {
            let (mut c, _) = pretrain(&corpus, &cfg).unwrap();
            let logs = train(&mut c, &corpus, 30).unwrap();
            (c, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }
}
