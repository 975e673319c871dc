//! Corpus manifests, annotator-consensus filtering, and the synthetic
//! early-cue corpus generator.
//!
//! Manifest lines are tab separated:
//!
//! ```text
//! id  speaker  label-or-annotations  feature-path  frames
//! ```
//!
//! A single label means the record is already resolved; a comma-separated
//! list holds one label per annotator. Blank lines and lines starting with
//! `#` are ignored. Relative feature paths resolve against the manifest's
//! directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureSeq, FEATURE_MAGIC};
use crate::heads::Emotion;

/// Maps an annotation string to one of the two target classes.
pub fn parse_emotion(label: &str) -> Option<Emotion> {
    match label.trim().to_ascii_lowercase().as_str() {
        "angry" | "anger" | "ang" => Some(Emotion::Angry),
        "neutral" | "neu" => Some(Emotion::Neutral),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub annotations: Vec<String>,
    /// `None` when the record is excluded.
    pub label: Option<Emotion>,
    pub source: PathBuf,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exclusion {
    NoAnnotations,
    /// Three or more distinct labels among the annotators.
    Disagreement(usize),
    /// No label was chosen by at least two annotators, or the top count is tied.
    NoConsensus,
    /// Consensus reached on a class outside angry/neutral.
    OtherEmotion(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub included: Vec<UtteranceRecord>,
    pub excluded: Vec<(String, Exclusion)>,
}

/// Resolves the label of a single record from its annotations.
pub fn resolve_annotations(annotations: &[String]) -> std::result::Result<Emotion, Exclusion> {
    let labels: Vec<String> = annotations.iter().map(|a| a.trim().to_ascii_lowercase()).collect();
    match labels.len() {
        0 => return Err(Exclusion::NoAnnotations),
        1 => return parse_emotion(&labels[0]).ok_or_else(|| Exclusion::OtherEmotion(labels[0].clone())),
        _ => {}
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    if counts.len() >= 3 {
        return Err(Exclusion::Disagreement(counts.len()));
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let winners: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l).collect();
    if top < 2 || winners.len() != 1 {
        return Err(Exclusion::NoConsensus);
    }
    parse_emotion(winners[0]).ok_or_else(|| Exclusion::OtherEmotion(winners[0].to_string()))
}

/// Keeps records with an angry/neutral consensus and sets their resolved
/// label. Annotations are left untouched.
pub fn filter_annotations(records: &[UtteranceRecord]) -> FilterOutcome {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for r in records {
        match resolve_annotations(&r.annotations) {
            Ok(label) => included.push(UtteranceRecord {
                label: Some(label),
                ..r.clone()
            }),
            Err(why) => excluded.push((r.id.clone(), why)),
        }
    }
    let disagreements = excluded
        .iter()
        .filter(|(_, e)| matches!(e, Exclusion::Disagreement(_)))
        .count();
    info!(
        "annotation filter: kept {}, excluded {} ({} with three or more distinct labels)",
        included.len(),
        excluded.len(),
        disagreements
    );
    FilterOutcome { included, excluded }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative feature paths resolve against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn feature_path(&self, record: &UtteranceRecord) -> PathBuf {
        if record.source.is_absolute() {
            record.source.clone()
        } else {
            self.base_dir.join(&record.source)
        }
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn manifest_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses a manifest; labels are resolved and excluded records dropped.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = fs::File::open(path).map_err(|e| manifest_err(path, 0, format!("cannot open: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(manifest_err(path, lineno, format!("expected 5 tab-separated columns, found {}", cols.len())));
        }
        let frames = cols[4]
            .trim()
            .parse::<usize>()
            .map_err(|e| manifest_err(path, lineno, format!("bad frame count {:?}: {e}", cols[4])))?;
        let annotations: Vec<String> = cols[2]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        records.push(UtteranceRecord {
            id: cols[0].trim().to_string(),
            speaker: cols[1].trim().to_string(),
            annotations,
            label: None,
            source: PathBuf::from(cols[3].trim()),
            frames,
        });
    }
    let outcome = filter_annotations(&records);
    for (id, why) in &outcome.excluded {
        warn!("{}: excluded {id}: {why:?}", path.display());
    }
    Ok(CorpusManifest {
        records: outcome.included,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; 20];
    fs::File::open(path)?.read_exact(&mut head)?;
    if &head[..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{} is not a feature file", path.display()),
        });
    }
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let frames = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    Ok((dim, frames))
}

/// Checks ids are unique, speakers non-empty, and every feature file exists
/// with the expected width and frame count.
pub fn validate_manifest(manifest: &CorpusManifest, dim: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if r.id.is_empty() {
            return Err(Error::Validation("record with empty id".into()));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate id {}", r.id)));
        }
        if r.speaker.is_empty() {
            return Err(Error::Validation(format!("{}: empty speaker id", r.id)));
        }
        let path = manifest.feature_path(r);
        if !path.is_file() {
            return Err(Error::Validation(format!("{}: feature file {} not found", r.id, path.display())));
        }
        let (d, n) = read_feature_header(&path).map_err(|e| Error::Validation(format!("{}: {e}", r.id)))?;
        if d != dim {
            return Err(Error::Validation(format!("{}: feature width {d}, expected {dim}", r.id)));
        }
        if n != r.frames {
            return Err(Error::Validation(format!("{}: file has {n} frames, manifest says {}", r.id, r.frames)));
        }
    }
    Ok(())
}

/// Writes a manifest with resolved labels and paths relative to `base_dir`
/// where possible.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::from("# id\tspeaker\tlabel\tfeatures\tframes\n");
    for r in records {
        let label = match r.label {
            Some(l) => l.as_str().to_string(),
            None => r.annotations.join(","),
        };
        let src = r.source.strip_prefix(base).unwrap_or(&r.source);
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id, r.speaker, label, src.display(), r.frames));
    }
    fs::write(path, out)?;
    Ok(())
}

/// A labelled utterance with its feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub label: Emotion,
    pub features: FeatureSeq,
}

/// Reads the feature files of every included record.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<Utterance>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let label = r
                .label
                .ok_or_else(|| Error::Validation(format!("{}: record has no resolved label", r.id)))?;
            Ok(Utterance {
                id: r.id.clone(),
                speaker: r.speaker.clone(),
                label,
                features: read_features(&manifest.feature_path(r))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub utterances: usize,
    pub speakers: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Cue onset is drawn uniformly from this fraction range of the length.
    pub onset_range: (f64, f64),
    pub cue_frames: usize,
    /// Norm of the cue vector, in multiples of the noise std.
    pub cue_magnitude: f64,
    pub noise_std: f64,
    /// Per-dimension std of each speaker's constant offset.
    pub speaker_offset_std: f64,
    pub angry_prior: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            utterances: 1000,
            speakers: 10,
            min_frames: 100,
            max_frames: 300,
            onset_range: (0.0, 0.3),
            cue_frames: 10,
            cue_magnitude: 3.0,
            noise_std: 1.0,
            speaker_offset_std: 0.3,
            angry_prior: 0.5,
            dim: crate::features::FEATURE_DIM,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.utterances == 0 || self.speakers == 0 || self.dim == 0 {
            return bad("utterance, speaker and dimension counts must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("invalid frame range {}..={}", self.min_frames, self.max_frames));
        }
        let (lo, hi) = self.onset_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad(format!("onset range ({lo}, {hi}) must satisfy 0 <= lo <= hi < 1"));
        }
        for len in self.min_frames..=self.max_frames {
            let latest = (hi * len as f64).floor() as usize;
            if latest + self.cue_frames > len {
                return bad(format!(
                    "cue of {} frames starting at frame {latest} overruns {len}-frame utterances",
                    self.cue_frames
                ));
            }
        }
        if !(self.noise_std >= 0.0 && self.cue_magnitude >= 0.0 && self.speaker_offset_std >= 0.0) {
            return bad("noise, cue and offset scales must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.angry_prior) {
            return bad(format!("angry prior {} outside [0, 1]", self.angry_prior));
        }
        Ok(())
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates the corpus in memory. Values are rounded to `f32` so the
/// result equals what a feature-file round trip would give.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let offset = Normal::new(0.0, cfg.speaker_offset_std).map_err(|e| Error::Config(e.to_string()))?;
    let cue: Vec<f64> = unit_vector(cfg.dim, &mut rng)
        .into_iter()
        .map(|x| x * cfg.cue_magnitude * cfg.noise_std)
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.speakers)
        .map(|_| (0..cfg.dim).map(|_| offset.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.utterances);
    for i in 0..cfg.utterances {
        let spk = i % cfg.speakers;
        let len = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let label = if rng.random_bool(cfg.angry_prior) {
            Emotion::Angry
        } else {
            Emotion::Neutral
        };
        let lo = (cfg.onset_range.0 * len as f64).floor() as usize;
        let hi = (cfg.onset_range.1 * len as f64).floor() as usize;
        let onset = rng.random_range(lo..=hi);
        let mut data = Vec::with_capacity(len * cfg.dim);
        for t in 0..len {
            let cued = label == Emotion::Angry && (onset..onset + cfg.cue_frames).contains(&t);
            for d in 0..cfg.dim {
                let mut v = offsets[spk][d] + noise.sample(&mut rng);
                if cued {
                    v += cue[d];
                }
                data.push(v as f32 as f64);
            }
        }
        out.push(Utterance {
            id: format!("utt{i:05}"),
            speaker: format!("spk{spk:02}"),
            label,
            features: FeatureSeq::from_flat(cfg.dim, data)?,
        });
    }
    Ok(out)
}

/// Generates the corpus and writes `manifest.tsv` plus one feature file per
/// utterance under `dir/features/`.
pub fn write_synthetic(cfg: &SyntheticConfig, dir: &Path) -> Result<CorpusManifest> {
    let corpus = generate_synthetic(cfg)?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut records = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let rel = PathBuf::from("features").join(format!("{}.fea", u.id));
        write_features(&dir.join(&rel), &u.features)?;
        records.push(UtteranceRecord {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            annotations: vec![u.label.as_str().to_string()],
            label: Some(u.label),
            source: rel,
            frames: u.features.len(),
        });
    }
    let manifest_path = dir.join("manifest.tsv");
    write_manifest(&manifest_path, &records)?;
    Ok(CorpusManifest {
        records,
        base_dir: dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn rec(id: &str, labels: &[&str]) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            speaker: "s".into(),
            annotations: ann(labels),
            label: None,
            source: PathBuf::from("x.fea"),
            frames: 1,
        }
    }

    #[test]
    fn consensus_rules() {
        assert_eq!(resolve_annotations(&ann(&["angry", "angry", "neutral"])), Ok(Emotion::Angry));
        assert_eq!(
            resolve_annotations(&ann(&["angry", "neutral", "sad"])),
            Err(Exclusion::Disagreement(3))
        );
        assert_eq!(
            resolve_annotations(&ann(&["happy", "happy"])),
            Err(Exclusion::OtherEmotion("happy".into()))
        );
        assert_eq!(resolve_annotations(&ann(&["angry", "neutral"])), Err(Exclusion::NoConsensus));
        assert_eq!(
            resolve_annotations(&ann(&["angry", "angry", "neutral", "neutral"])),
            Err(Exclusion::NoConsensus)
        );
        assert_eq!(resolve_annotations(&ann(&["Neutral"])), Ok(Emotion::Neutral));
        assert_eq!(resolve_annotations(&[]), Err(Exclusion::NoAnnotations));
    }

    #[test]
    fn filter_keeps_annotations_and_is_idempotent() {
        let recs = vec![
            rec("a", &["angry", "angry", "neutral"]),
            rec("b", &["angry", "neutral", "sad"]),
            rec("c", &["neutral", "neutral"]),
        ];
        let once = filter_annotations(&recs);
        assert_eq!(once.included.len(), 2);
        assert_eq!(once.included[0].annotations, recs[0].annotations);
        let twice = filter_annotations(&once.included);
        assert_eq!(twice.included, once.included);
        assert!(twice.excluded.is_empty());
    }

    #[test]
    fn infeasible_cue_is_rejected() {
        let cfg = SyntheticConfig {
            min_frames: 20,
            max_frames: 40,
            onset_range: (0.0, 0.5),
            cue_frames: 15,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_speaker_round_robin() {
        let cfg = SyntheticConfig {
            utterances: 30,
            speakers: 3,
            seed: 5,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[4].speaker, "spk01");
        assert!(a.iter().all(|u| (100..=300).contains(&u.features.len())));
    }

    #[test]
    fn cue_touches_only_angry_cue_frames() {
        let base = SyntheticConfig {
            utterances: 40,
            speakers: 2,
            seed: 1,
            ..Default::default()
        };
        let silent = SyntheticConfig {
            cue_magnitude: 0.0,
            ..base.clone()
        };
        let (a, b) = (generate_synthetic(&base).unwrap(), generate_synthetic(&silent).unwrap());
        for (u, v) in a.iter().zip(&b) {
            let differing = u.features.frames().zip(v.features.frames()).filter(|(x, y)| x != y).count();
            match u.label {
                Emotion::Neutral => assert_eq!(differing, 0),
                Emotion::Angry => assert_eq!(differing, 10),
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            utterances: 10,
            speakers: 2,
            seed: 3,
            ..Default::default()
        };
        let written = write_synthetic(&cfg, dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.records.len(), 10);
        assert_eq!(loaded.records, written.records);
        validate_manifest(&loaded, 33).unwrap();
        assert!(validate_manifest(&loaded, 48).is_err());

        let mut dup = loaded.clone();
        dup.records.push(dup.records[0].clone());
        let err = validate_manifest(&dup, 33).unwrap_err().to_string();
        assert!(err.contains("duplicate id utt00000"), "{err}");

        let mut missing = loaded.clone();
        missing.records[3].source = PathBuf::from("features/nope.fea");
        let err = validate_manifest(&missing, 33).unwrap_err().to_string();
        assert!(err.contains("utt00003"), "{err}");

        let corpus = load_corpus(&loaded).unwrap();
        assert_eq!(corpus, generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "# header\na\ts\tangry\tx.fea\t10\nb\ts\tangry\tx.fea\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
