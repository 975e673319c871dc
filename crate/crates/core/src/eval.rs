//! Metrics, greedy policy evaluation, fixed-truncation baselines and
//! leave-one-speaker-out cross-validation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::encoder::GruTrace;
use crate::error::{Error, Result};
use crate::heads::{classify, Emotion, SelectionMode};
use crate::trainer::{pretrain, run_episode, train_with, Checkpoint, TrainConfig};

/// Report name of the early-termination agent.
pub const POLICY_MODEL: &str = "EmoRL";
/// Report name of the supervised full-sequence model used for truncation rows.
pub const BASELINE_MODEL: &str = "GRU_Baseline";

/// Default utterance fractions for the truncation baseline.
pub const DEFAULT_RATIOS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 1.00];

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied
/// scores share their average rank, so a tied pair counts one half.
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension(format!("{} scores vs {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(decisions: &[Emotion], truths: &[Emotion]) -> Result<f64> {
    if decisions.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} decisions vs {} truths",
            decisions.len(),
            truths.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::Empty("accuracy of zero decisions".into()));
    }
    let correct = decisions.iter().zip(truths).filter(|(d, t)| d == t).count();
    Ok(correct as f64 / decisions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyMetrics {
    pub mean_relative_latency: f64,
    pub speed_up: f64,
}

impl LatencyMetrics {
    pub fn from_mean(mean_relative_latency: f64) -> Self {
        Self {
            mean_relative_latency,
            speed_up: 1.0 / mean_relative_latency,
        }
    }
}

/// Mean of `termination_frame / length` and its reciprocal. Zero-length
/// utterances are skipped with a warning.
pub fn latency_metrics(episodes: &[(usize, usize)]) -> Result<LatencyMetrics> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(frame, len) in episodes {
        if len == 0 {
            warn!("skipping zero-length utterance in latency metrics");
            continue;
        }
        if frame == 0 || frame > len {
            return Err(Error::Validation(format!("termination frame {frame} outside 1..={len}")));
        }
        sum += frame as f64 / len as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no utterances with frames".into()));
    }
    Ok(LatencyMetrics::from_mean(sum / n as f64))
}

/// Outcome for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub speaker: String,
    /// Classifier probability of "angry" at the decision point.
    pub score: f64,
    pub decision: Emotion,
    pub truth: Emotion,
    pub termination_frame: usize,
    pub length: usize,
}

/// Metrics for one model on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `None` when the test set holds a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub latency: LatencyMetrics,
    pub results: Vec<UtteranceResult>,
}

impl Metrics {
    /// Computes the metrics; `latency` overrides the per-utterance relative
    /// latency (truncation baselines report their ratio).
    pub fn from_results(results: Vec<UtteranceResult>, latency: Option<f64>) -> Result<Self> {
        let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
        let pos: Vec<bool> = results.iter().map(|r| r.truth == Emotion::Angry).collect();
        let auc = match auc_roc(&scores, &pos) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(m)) => {
                warn!("AUC undefined: {m}");
                None
            }
            Err(e) => return Err(e),
        };
        let decisions: Vec<Emotion> = results.iter().map(|r| r.decision).collect();
        let truths: Vec<Emotion> = results.iter().map(|r| r.truth).collect();
        let acc = accuracy(&decisions, &truths)?;
        let latency = match latency {
            Some(p) => LatencyMetrics::from_mean(p),
            None => latency_metrics(
                &results
                    .iter()
                    .map(|r| (r.termination_frame, r.length))
                    .collect::<Vec<_>>(),
            )?,
        };
        Ok(Self {
            auc,
            accuracy: acc,
            latency,
            results,
        })
    }
}

/// Greedy policy rollouts over a raw (unnormalized) test corpus.
pub fn evaluate_policy(ckpt: &Checkpoint, corpus: &[Utterance]) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut results = Vec::with_capacity(corpus.len());
    for u in corpus.iter().filter(|u| !u.features.is_empty()) {
        let x = ckpt.normalize(&u.features)?;
        let tr = run_episode(&ckpt.model, &x, u.label, &ckpt.config, SelectionMode::Greedy, &mut rng)?;
        results.push(UtteranceResult {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            score: tr.prob,
            decision: tr.decision,
            truth: u.label,
            termination_frame: tr.termination_frame,
            length: tr.length,
        });
    }
    Metrics::from_results(results, None)
}

/// Frame `ceil(ratio * len)`, at least 1.
pub fn truncation_frame(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).ceil() as usize).clamp(1, len)
}

/// Classifies every utterance from the running mean after a fixed fraction
/// of its frames, once per ratio. Only the encoder and classifier are used.
pub fn truncation_baseline_eval(
    ckpt: &Checkpoint,
    corpus: &[Utterance],
    ratios: &[f64],
) -> Result<Vec<(f64, Metrics)>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config("ratios must be non-empty and lie in (0, 1]".into()));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ratios must be strictly increasing".into()));
    }
    let mut per_ratio: Vec<Vec<UtteranceResult>> = vec![Vec::new(); ratios.len()];
    let mut trace = GruTrace::new(&ckpt.model.gru);
    for u in corpus.iter().filter(|u| !u.features.is_empty()) {
        let x = ckpt.normalize(&u.features)?;
        let len = x.len();
        let last = truncation_frame(ratios[ratios.len() - 1], len);
        trace.reset(&ckpt.model.gru);
        for f in x.frames().take(last) {
            trace.step(&ckpt.model.gru, f)?;
        }
        for (k, &p) in ratios.iter().enumerate() {
            let frame = truncation_frame(p, len);
            let (score, decision) = classify(trace.mean(frame), &ckpt.model.classifier);
            per_ratio[k].push(UtteranceResult {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                score,
                decision,
                truth: u.label,
                termination_frame: frame,
                length: len,
            });
        }
    }
    ratios
        .iter()
        .zip(per_ratio)
        .map(|(&p, res)| Ok((p, Metrics::from_results(res, Some(p))?)))
        .collect()
}

/// Identity of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldInfo {
    pub speaker: String,
    pub seed: u64,
}

/// Held-out speaker, training indices, test indices.
pub type Fold = (String, Vec<usize>, Vec<usize>);

/// Splits utterance indices by held-out speaker, in sorted speaker order.
pub fn speaker_folds(corpus: &[Utterance]) -> Result<Vec<Fold>> {
    let speakers: BTreeSet<&str> = corpus.iter().map(|u| u.speaker.as_str()).collect();
    if speakers.len() < 2 {
        return Err(Error::Validation(format!(
            "leave-one-speaker-out needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    Ok(speakers
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| corpus[i].speaker == s);
            (s.to_string(), train, test)
        })
        .collect())
}

/// Runs `train` on all speakers but one and `eval` on the held-out speaker,
/// for every speaker and seed.
pub fn leave_one_speaker_out<M, R, T, E>(
    corpus: &[Utterance],
    seeds: &[u64],
    mut train: T,
    mut eval: E,
) -> Result<Vec<(FoldInfo, R)>>
where
    T: FnMut(&[Utterance], &FoldInfo) -> Result<M>,
    E: FnMut(&M, &[Utterance], &FoldInfo) -> Result<R>,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let folds = speaker_folds(corpus)?;
    let mut out = Vec::with_capacity(folds.len() * seeds.len());
    for (speaker, train_idx, test_idx) in &folds {
        let train_set: Vec<Utterance> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
        let test_set: Vec<Utterance> = test_idx.iter().map(|&i| corpus[i].clone()).collect();
        if train_set.iter().any(|u| &u.speaker == speaker) {
            return Err(Error::Validation(format!("speaker {speaker} leaked into its training fold")));
        }
        for &seed in seeds {
            let info = FoldInfo {
                speaker: speaker.clone(),
                seed,
            };
            let model = train(&train_set, &info)?;
            let r = eval(&model, &test_set, &info)?;
            out.push((info, r));
        }
    }
    Ok(out)
}

/// Appends the policy row (from `trained`) and one truncation row per ratio
/// (from the supervised `pretrained` checkpoint) for one fold.
pub fn report_fold(
    report: &mut EvalReport,
    pretrained: &Checkpoint,
    trained: &Checkpoint,
    test: &[Utterance],
    fold: &FoldInfo,
    ratios: &[f64],
) -> Result<()> {
    let policy = evaluate_policy(trained, test)?;
    report.push(ReportRow::new(POLICY_MODEL, None, fold.clone(), &policy));
    for (p, m) in truncation_baseline_eval(pretrained, test, ratios)? {
        report.push(ReportRow::new(BASELINE_MODEL, Some(p), fold.clone(), &m));
    }
    Ok(())
}

/// Full leave-one-speaker-out protocol: for every held-out speaker and seed,
/// pre-train, run `config.episodes` reinforcement episodes, then report the
/// policy and the truncation baselines on the held-out speaker.
pub fn loso_report(corpus: &[Utterance], config: &TrainConfig, seeds: &[u64], ratios: &[f64]) -> Result<EvalReport> {
    let folds = leave_one_speaker_out(
        corpus,
        seeds,
        |train, fold| {
            let cfg = TrainConfig {
                seed: fold.seed,
                ..config.clone()
            };
            let (pre, _) = pretrain(train, &cfg)?;
            let mut ck = pre.clone();
            train_with(&mut ck, train, cfg.episodes, |_, _| Ok(()))?;
            info!("fold {} seed {}: trained", fold.speaker, fold.seed);
            Ok((pre, ck))
        },
        |(pre, ck), test, fold| {
            let mut part = EvalReport::default();
            report_fold(&mut part, pre, ck, test, fold, ratios)?;
            Ok(part)
        },
    )?;
    let mut report = EvalReport::default();
    for (_, part) in folds {
        report.rows.extend(part.rows);
    }
    Ok(report)
}

/// One report row: a model (or truncation ratio) on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    /// Fraction of the utterance used; `None` for the early-termination policy.
    pub ratio: Option<f64>,
    pub fold: FoldInfo,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub latency: f64,
    pub speed_up: f64,
}

impl ReportRow {
    pub fn new(model: &str, ratio: Option<f64>, fold: FoldInfo, m: &Metrics) -> Self {
        Self {
            model: model.to_string(),
            ratio,
            fold,
            auc: m.auc,
            accuracy: m.accuracy,
            latency: m.latency.mean_relative_latency,
            speed_up: m.latency.speed_up,
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

/// Aggregate over folds and seeds for one (model, ratio) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: String,
    pub ratio: Option<f64>,
    /// Over folds where AUC is defined.
    pub auc: Option<Summary>,
    pub accuracy: Summary,
    pub latency: Summary,
    /// Reciprocal of the mean latency.
    pub speed_up: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// One aggregate per distinct (model, ratio), in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, Option<f64>)> = Vec::new();
        for r in &self.rows {
            let k = (r.model.clone(), r.ratio);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(model, ratio)| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.model == model && r.ratio == ratio).collect();
                let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
                if aucs.len() < rows.len() {
                    warn!("{model}: AUC undefined on {} of {} folds", rows.len() - aucs.len(), rows.len());
                }
                let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
                let lat: Vec<f64> = rows.iter().map(|r| r.latency).collect();
                let latency = Summary::of(&lat).expect("at least one row per key");
                Aggregate {
                    model,
                    ratio,
                    auc: Summary::of(&aucs),
                    accuracy: Summary::of(&acc).expect("at least one row per key"),
                    speed_up: 1.0 / latency.mean,
                    latency,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,ratio,fold,seed,auc,accuracy,relative_latency,speed_up\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model,
                r.ratio.map_or(String::new(), |p| p.to_string()),
                r.fold.speaker,
                r.fold.seed,
                r.auc.map_or(String::new(), |a| a.to_string()),
                r.accuracy,
                r.latency,
                r.speed_up
            );
        }
        s
    }

    /// Human-readable table of the aggregates.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>9} {:>15} {:>15} {:>15} {:>9}\n",
            "Model", "% used", "AUC", "Accuracy", "Rel. latency", "Speed-up"
        );
        for a in self.aggregates() {
            let pct = a.ratio.map_or("-".to_string(), |p| format!("{:.0}%", p * 100.0));
            let auc = a
                .auc
                .map_or("n/a".to_string(), |x| format!("{:.3}±{:.3}", x.mean, x.std));
            let _ = writeln!(
                s,
                "{:<16} {:>9} {:>15} {:>15} {:>15} {:>8.2}x",
                a.model,
                pct,
                auc,
                format!("{:.1}%±{:.1}", a.accuracy.mean * 100.0, a.accuracy.std * 100.0),
                format!("{:.3}±{:.3}", a.latency.mean, a.latency.std),
                a.speed_up
            );
        }
        s
    }
}
