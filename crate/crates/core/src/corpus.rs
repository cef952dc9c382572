//! Utterance metadata, embedding ingestion, temporal pooling, standardization,
//! metadata filters and train/val/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// Standard deviations below this are replaced to keep constant features finite.
pub const STD_FLOOR: f64 = 1e-8;

/// Condition keys with a fixed meaning in the experiment manifests.
pub const RESERVED_CONDITIONS: [&str; 6] = [
    "background",
    "direction",
    "emotion",
    "language",
    "style",
    "pitch_condition",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" => Ok(Sex::M),
            "F" | "f" => Ok(Sex::F),
            other => Err(Error::invalid(format!("sex must be M or F, got {other:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::M => "M",
            Sex::F => "F",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub speaker_id: String,
    pub sex: Sex,
    pub dataset: String,
    #[serde(default)]
    pub sentence_id: String,
    #[serde(default)]
    pub conditions: BTreeMap<String, String>,
    pub duration_s: f64,
    pub path: String,
}

/// An ordered, id-unique list of utterances.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    utterances: Vec<UtteranceMeta>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(utterances: Vec<UtteranceMeta>) -> Result<Self> {
        let mut index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if !(u.duration_s.is_finite() && u.duration_s >= 0.0) {
                return Err(Error::invalid(format!(
                    "utterance {:?} has invalid duration {}",
                    u.utterance_id, u.duration_s
                )));
            }
            if index.insert(u.utterance_id.clone(), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate utterance id {:?}",
                    u.utterance_id
                )));
            }
        }
        Ok(Manifest { utterances, index })
    }

    /// Loads a manifest from CSV, or from a JSON array when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<Vec<UtteranceMeta>>(&text)
                .map_err(|e| Error::ingest(path, e.to_string()))
                .and_then(Manifest::new)
        } else {
            Manifest::from_csv(&text)
        };
        parsed.map_err(|e| match e {
            Error::Ingest { .. } => e,
            other => Error::ingest(path, other.to_string()),
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::invalid(e.to_string()))?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("manifest missing column {name:?}")))
        };
        let (id, spk, sex, ds, sent, dur, path) = (
            col("utterance_id")?,
            col("speaker_id")?,
            col("sex")?,
            col("dataset")?,
            col("sentence_id")?,
            col("duration_s")?,
            col("path")?,
        );
        let cond_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix("cond:").map(|k| (i, k.to_string())))
            .collect();

        let mut utterances = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::invalid(e.to_string()))?;
            let field = |i: usize| record.get(i).unwrap_or("").to_string();
            let duration_s = field(dur).parse::<f64>().map_err(|_| {
                Error::invalid(format!("row {}: bad duration_s {:?}", line + 1, field(dur)))
            })?;
            let conditions = cond_cols
                .iter()
                .filter(|(i, _)| !field(*i).is_empty())
                .map(|(i, k)| (k.clone(), field(*i)))
                .collect();
            utterances.push(UtteranceMeta {
                utterance_id: field(id),
                speaker_id: field(spk),
                sex: field(sex).parse()?,
                dataset: field(ds),
                sentence_id: field(sent),
                conditions,
                duration_s,
                path: field(path),
            });
        }
        Manifest::new(utterances)
    }

    pub fn to_csv(&self) -> String {
        let keys: BTreeSet<&String> = self
            .utterances
            .iter()
            .flat_map(|u| u.conditions.keys())
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "utterance_id".to_string(),
            "speaker_id".into(),
            "sex".into(),
            "dataset".into(),
            "sentence_id".into(),
            "duration_s".into(),
            "path".into(),
        ];
        header.extend(keys.iter().map(|k| format!("cond:{k}")));
        w.write_record(&header).unwrap();
        for u in &self.utterances {
            let mut row = vec![
                u.utterance_id.clone(),
                u.speaker_id.clone(),
                u.sex.to_string(),
                u.dataset.clone(),
                u.sentence_id.clone(),
                u.duration_s.to_string(),
                u.path.clone(),
            ];
            row.extend(keys.iter().map(|k| u.conditions.get(*k).cloned().unwrap_or_default()));
            w.write_record(&row).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UtteranceMeta> {
        self.utterances.iter()
    }

    pub fn utterances(&self) -> &[UtteranceMeta] {
        &self.utterances
    }

    pub fn get(&self, utterance_id: &str) -> Option<&UtteranceMeta> {
        self.index.get(utterance_id).map(|&i| &self.utterances[i])
    }

    pub fn position(&self, utterance_id: &str) -> Option<usize> {
        self.index.get(utterance_id).copied()
    }

    /// Speaker ids in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.utterances
            .iter()
            .filter(|u| seen.insert(u.speaker_id.as_str()))
            .map(|u| u.speaker_id.clone())
            .collect()
    }

    pub fn has_condition_key(&self, key: &str) -> bool {
        self.utterances.iter().any(|u| u.conditions.contains_key(key))
    }

    /// Keeps the utterances for which `keep` returns true, preserving order.
    pub fn retain(&self, keep: impl Fn(&UtteranceMeta) -> bool) -> Manifest {
        let kept = self.utterances.iter().filter(|u| keep(u)).cloned().collect();
        Manifest::new(kept).expect("subset of a valid manifest")
    }

    pub fn filter(&self, filter: &Filter) -> Result<Manifest> {
        filter.validate(self)?;
        Ok(self.retain(|u| filter.matches(u)))
    }
}

/// A frame-level embedding of one utterance under one model/layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub frames: Array2<f64>,
    pub model_tag: String,
    pub layer_tag: String,
}

impl EmbeddingMatrix {
    pub fn new(frames: Array2<f64>, model_tag: &str, layer_tag: &str) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::invalid("embedding needs at least one frame and one feature"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in embedding"));
        }
        Ok(EmbeddingMatrix {
            frames,
            model_tag: model_tag.into(),
            layer_tag: layer_tag.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn load_embedding(path: &Path, model_tag: &str, layer_tag: &str) -> Result<EmbeddingMatrix> {
    let frames = npy::load_matrix(path)?;
    if frames.nrows() == 0 || frames.ncols() == 0 {
        return Err(Error::ingest(path, "empty array"));
    }
    Ok(EmbeddingMatrix {
        frames,
        model_tag: model_tag.into(),
        layer_tag: layer_tag.into(),
    })
}

/// Mean+max pooled utterance vector: `[mean_0..mean_D, max_0..max_D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector(pub Array1<f64>);

impl PooledVector {
    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn pool(m: &EmbeddingMatrix) -> PooledVector {
    pool_frames(m.frames.view())
}

pub fn pool_frames(frames: ArrayView2<f64>) -> PooledVector {
    let d = frames.ncols();
    let mut out = Array1::zeros(2 * d);
    let mean = frames.mean_axis(Axis(0)).expect("at least one frame");
    out.slice_mut(ndarray::s![..d]).assign(&mean);
    for (j, col) in frames.axis_iter(Axis(1)).enumerate() {
        out[d + j] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    PooledVector(out)
}

/// Per-feature z-scoring with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    /// Fits on the rows of `data`.
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::invalid("cannot fit a standardizer on an empty set"));
        }
        let mean = data.mean_axis(Axis(0)).unwrap();
        let std = data.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Standardizer { mean, std })
    }

    pub fn fit_vectors(vectors: &[PooledVector]) -> Result<Self> {
        Self::fit(stack_pooled(vectors)?.view())
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        (&v - &self.mean) / &self.std
    }

    pub fn apply_rows(&self, data: ArrayView2<f64>) -> Array2<f64> {
        (&data - &self.mean) / &self.std
    }
}

pub fn stack_pooled(vectors: &[PooledVector]) -> Result<Array2<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("no vectors to stack"))?;
    let d = first.len();
    let mut out = Array2::zeros((vectors.len(), d));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "vector {i} has length {}, expected {d}",
                v.len()
            )));
        }
        out.row_mut(i).assign(&v.0);
    }
    Ok(out)
}

/// A metadata field a filter clause can test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Field {
    Utterance,
    Speaker,
    Sex,
    Dataset,
    Sentence,
    Condition(String),
}

/// Conjunction of `field = value` clauses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    clauses: Vec<(Field, String)>,
}

impl Filter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, field: Field, value: impl Into<String>) -> Self {
        self.clauses.push((field, value.into()));
        self
    }

    /// Parses `k=v[,k=v...]`. Keys are `speaker_id`, `sex`, `dataset`,
    /// `sentence_id`, `utterance_id`, or a condition key written bare,
    /// as `cond:<key>` or as `conditions.<key>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut filter = Filter::new();
        for clause in text.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let (k, v) = clause
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("filter clause {clause:?} is not k=v")))?;
            let k = k.trim();
            let field = match k {
                "utterance_id" => Field::Utterance,
                "speaker_id" | "speaker" => Field::Speaker,
                "sex" => Field::Sex,
                "dataset" => Field::Dataset,
                "sentence_id" | "sentence" => Field::Sentence,
                other => {
                    let key = other
                        .strip_prefix("cond:")
                        .or_else(|| other.strip_prefix("conditions."))
                        .unwrap_or(other);
                    Field::Condition(key.to_string())
                }
            };
            filter.clauses.push((field, v.trim().to_string()));
        }
        Ok(filter)
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Errors if a condition key is absent from every utterance of `manifest`.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        for (field, _) in &self.clauses {
            if let Field::Condition(key) = field {
                if !manifest.has_condition_key(key) {
                    return Err(Error::UnknownKey(key.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn matches(&self, u: &UtteranceMeta) -> bool {
        self.clauses.iter().all(|(field, value)| match field {
            Field::Utterance => &u.utterance_id == value,
            Field::Speaker => &u.speaker_id == value,
            Field::Sex => u.sex.to_string().eq_ignore_ascii_case(value),
            Field::Dataset => &u.dataset == value,
            Field::Sentence => &u.sentence_id == value,
            Field::Condition(k) => u.conditions.get(k) == Some(value),
        })
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.clauses.is_empty() {
            return f.write_str("all");
        }
        let parts: Vec<String> = self
            .clauses
            .iter()
            .map(|(field, v)| {
                let k = match field {
                    Field::Utterance => "utterance_id".to_string(),
                    Field::Speaker => "speaker_id".to_string(),
                    Field::Sex => "sex".to_string(),
                    Field::Dataset => "dataset".to_string(),
                    Field::Sentence => "sentence_id".to_string(),
                    Field::Condition(k) => k.clone(),
                };
                format!("{k}={v}")
            })
            .collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "1" => Ok(Partition::Train),
            "val" | "dev" | "valid" | "2" => Ok(Partition::Val),
            "test" | "3" => Ok(Partition::Test),
            other => Err(Error::invalid(format!("unknown partition {other:?}"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSpec {
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitSpec {
    pub fn partition_of(&self, utterance_id: &str) -> Option<Partition> {
        self.assignment.get(utterance_id).copied()
    }

    /// Ids of `manifest` assigned to `part`, in manifest order.
    pub fn ids(&self, manifest: &Manifest, part: Partition) -> Vec<String> {
        manifest
            .iter()
            .filter(|u| self.partition_of(&u.utterance_id) == Some(part))
            .map(|u| u.utterance_id.clone())
            .collect()
    }

    pub fn subset(&self, manifest: &Manifest, part: Partition) -> Manifest {
        manifest.retain(|u| self.partition_of(&u.utterance_id) == Some(part))
    }

    /// Loads `utterance_id,partition` CSV rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut assignment = BTreeMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::invalid(e.to_string()))?;
            let id = record.get(0).unwrap_or("").to_string();
            let part: Partition = record.get(1).unwrap_or("").parse()?;
            assignment.insert(id, part);
        }
        Ok(SplitSpec { assignment })
    }
}

pub enum SplitStrategy<'a> {
    /// Per speaker, `round(train * n)` utterances go to train and
    /// `round(val * n)` to val; the rest go to test.
    PerSpeakerRatio { train: f64, val: f64, seed: u64 },
    /// Explicit id → partition map.
    Explicit(&'a BTreeMap<String, Partition>),
    /// Benchmark list lines `<1|2|3> <relative path>`, matched on the manifest path column.
    BenchmarkList(&'a str),
}

pub fn split(manifest: &Manifest, strategy: SplitStrategy<'_>) -> Result<SplitSpec> {
    match strategy {
        SplitStrategy::PerSpeakerRatio { train, val, seed } => {
            split_per_speaker(manifest, train, val, seed)
        }
        SplitStrategy::Explicit(map) => {
            for id in map.keys() {
                if manifest.get(id).is_none() {
                    return Err(Error::invalid(format!("split references unknown utterance {id:?}")));
                }
            }
            Ok(SplitSpec {
                assignment: map.clone(),
            })
        }
        SplitStrategy::BenchmarkList(text) => {
            let by_path: HashMap<&str, &str> = manifest
                .iter()
                .map(|u| (u.path.as_str(), u.utterance_id.as_str()))
                .collect();
            let mut assignment = BTreeMap::new();
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let (part, path) = line
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| Error::invalid(format!("bad split line {line:?}")))?;
                let id = by_path.get(path.trim()).ok_or_else(|| {
                    Error::invalid(format!("split references unknown path {:?}", path.trim()))
                })?;
                assignment.insert(id.to_string(), part.parse()?);
            }
            Ok(SplitSpec { assignment })
        }
    }
}

fn split_per_speaker(manifest: &Manifest, train: f64, val: f64, seed: u64) -> Result<SplitSpec> {
    if !(train > 0.0 && train < 1.0) {
        return Err(Error::invalid(format!("train ratio {train} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&val) || train + val > 1.0 {
        return Err(Error::invalid(format!("val ratio {val} incompatible with train {train}")));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for u in manifest.iter() {
        by_speaker
            .entry(u.speaker_id.as_str())
            .or_default()
            .push(u.utterance_id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for (speaker, mut ids) in by_speaker {
        let n = ids.len();
        if n == 1 {
            log::warn!("speaker {speaker} has a single utterance; assigned to train");
            assignment.insert(ids[0].to_string(), Partition::Train);
            continue;
        }
        ids.shuffle(&mut rng);
        let n_train = ((train * n as f64).round() as usize).clamp(1, n - 1);
        let n_val = ((val * n as f64).round() as usize).min(n - n_train - 1);
        for (i, id) in ids.into_iter().enumerate() {
            let part = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Val
            } else {
                Partition::Test
            };
            assignment.insert(id.to_string(), part);
        }
    }
    Ok(SplitSpec { assignment })
}

/// Draws `n_speakers` speakers, half from each sex, seeded.
/// With an odd count the extra speaker comes from the larger group.
pub fn balanced_speaker_sample(manifest: &Manifest, n_speakers: usize, seed: u64) -> Result<Manifest> {
    let mut groups: BTreeMap<Sex, Vec<String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for u in manifest.iter() {
        if seen.insert(u.speaker_id.clone()) {
            groups.entry(u.sex).or_default().push(u.speaker_id.clone());
        }
    }
    let males = groups.remove(&Sex::M).unwrap_or_default();
    let females = groups.remove(&Sex::F).unwrap_or_default();
    let half = n_speakers / 2;
    let (mut n_m, mut n_f) = (half, half);
    if n_speakers % 2 == 1 {
        if males.len() >= females.len() {
            n_m += 1
        } else {
            n_f += 1
        }
    }
    if males.len() < n_m || females.len() < n_f {
        return Err(Error::invalid(format!(
            "cannot draw {n_m} male and {n_f} female speakers from {} and {}",
            males.len(),
            females.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<String> = males
        .choose_multiple(&mut rng, n_m)
        .chain(females.choose_multiple(&mut rng, n_f))
        .cloned()
        .collect();
    Ok(manifest.retain(|u| chosen.contains(&u.speaker_id)))
}

/// Pooled vectors for an ordered list of utterances, one row each.
#[derive(Debug, Clone)]
pub struct PooledSet {
    pub ids: Vec<String>,
    pub vectors: Array2<f64>,
    index: HashMap<String, usize>,
}

impl PooledSet {
    pub fn new(ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate id {id:?} in pooled set")));
            }
        }
        Ok(PooledSet { ids, vectors, index })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.index.get(id).map(|&i| self.vectors.row(i))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Rows for `ids` in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (r, id) in ids.iter().enumerate() {
            let row = self
                .row(id)
                .ok_or_else(|| Error::invalid(format!("no embedding for utterance {id:?}")))?;
            out.row_mut(r).assign(&row);
        }
        Ok(out)
    }

    pub fn same_ids(&self, other: &PooledSet) -> bool {
        self.ids.len() == other.ids.len() && self.ids.iter().all(|id| other.index.contains_key(id))
    }
}

/// Location of the embedding file of `utt` under `dir`, optionally inside a layer subdirectory.
pub fn embedding_path(dir: &Path, layer: Option<&str>, utt: &UtteranceMeta) -> PathBuf {
    match layer {
        Some(l) if !l.is_empty() => dir.join(l).join(&utt.path),
        _ => dir.join(&utt.path),
    }
}

/// Loads and pools every utterance of `manifest` in parallel.
pub fn load_pooled(manifest: &Manifest, dir: &Path, layer: Option<&str>) -> Result<PooledSet> {
    let pooled: Vec<PooledVector> = manifest
        .utterances()
        .par_iter()
        .map(|u| {
            let path = embedding_path(dir, layer, u);
            load_embedding(&path, "", layer.unwrap_or("")).map(|m| pool(&m))
        })
        .collect::<Result<_>>()?;
    let ids = manifest.iter().map(|u| u.utterance_id.clone()).collect();
    let dims: BTreeSet<usize> = pooled.iter().map(|p| p.len()).collect();
    if dims.len() > 1 {
        return Err(Error::Shape(format!(
            "embeddings of layer {:?} have differing feature counts {dims:?}",
            layer.unwrap_or("")
        )));
    }
    PooledSet::new(ids, stack_pooled(&pooled)?)
}

/// Loads the frame matrices of every utterance in parallel.
pub fn load_frames(manifest: &Manifest, dir: &Path, layer: Option<&str>) -> Result<Vec<Array2<f64>>> {
    manifest
        .utterances()
        .par_iter()
        .map(|u| {
            let path = embedding_path(dir, layer, u);
            load_embedding(&path, "", layer.unwrap_or("")).map(|m| m.frames)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn meta(id: &str, spk: &str, sex: Sex, sentence: &str) -> UtteranceMeta {
        UtteranceMeta {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            sex,
            dataset: "t".into(),
            sentence_id: sentence.into(),
            conditions: BTreeMap::new(),
            duration_s: 1.0,
            path: format!("{id}.npy"),
        }
    }

    #[test]
    fn pool_mean_then_max() {
        let m = EmbeddingMatrix::new(array![[1.0, 2.0], [3.0, 4.0]], "m", "l").unwrap();
        assert_eq!(pool(&m).0, array![2.0, 3.0, 3.0, 4.0]);
        let single = EmbeddingMatrix::new(array![[7.0, -1.0]], "m", "l").unwrap();
        assert_eq!(pool(&single).0, array![7.0, -1.0, 7.0, -1.0]);
        let zeros = EmbeddingMatrix::new(Array2::zeros((3, 2)), "m", "l").unwrap();
        assert_eq!(pool(&zeros).0, array![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(EmbeddingMatrix::new(array![[1.0, f64::NAN]], "m", "l").is_err());
    }

    #[test]
    fn standardizer_examples() {
        let s = Standardizer::fit(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.apply(array![2.0].view())[0], 1.0);

        let c = Standardizer::fit(array![[5.0], [5.0]].view()).unwrap();
        assert_eq!(c.std[0], STD_FLOOR);
        assert_eq!(c.apply(array![5.0].view())[0], 0.0);

        assert!(Standardizer::fit(Array2::<f64>::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn standardizer_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((100, 1), |_| StandardNormal.sample(&mut rng));
        let s = Standardizer::fit(data.view()).unwrap();
        let out = s.apply_rows(data.view());
        let col: Vec<f64> = out.column(0).to_vec();
        assert!(crate::stats::mean(&col).abs() < 0.3);
        let sd = crate::stats::std_pop(&col);
        assert!((0.7..=1.3).contains(&sd));
        assert!(crate::stats::mean(&col).abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn manifest_csv_round_trip_with_conditions() {
        let text = "utterance_id,speaker_id,sex,dataset,sentence_id,duration_s,path,cond:direction\n\
                    u1,s1,M,vc1,a,1.5,s1/u1.npy,forward\n\
                    u2,s1,M,vc1,b,2.0,s1/u2.npy,backward\n";
        let m = Manifest::from_csv(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.get("u2").unwrap().conditions["direction"], "backward");
        let again = Manifest::from_csv(&m.to_csv()).unwrap();
        assert_eq!(again.utterances(), m.utterances());
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_sex() {
        let dup = vec![meta("a", "s", Sex::M, ""), meta("a", "s", Sex::M, "")];
        assert!(Manifest::new(dup).is_err());
        let text = "utterance_id,speaker_id,sex,dataset,sentence_id,duration_s,path\nu,s,X,d,,1,p\n";
        assert!(Manifest::from_csv(text).is_err());
    }

    #[test]
    fn manifest_json_equivalent() {
        let json = r#"[{"utterance_id":"u1","speaker_id":"s1","sex":"F","dataset":"d",
            "sentence_id":"x","conditions":{"style":"read"},"duration_s":3.0,"path":"u1.npy"}]"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, json).unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.get("u1").unwrap().sex, Sex::F);
        assert_eq!(m.get("u1").unwrap().conditions["style"], "read");
    }

    fn mixed_manifest() -> Manifest {
        let mut us = Vec::new();
        for (i, dir) in ["forward", "backward", "forward", "backward"].iter().enumerate() {
            let mut u = meta(&format!("u{i}"), "s", if i < 2 { Sex::F } else { Sex::M }, "");
            u.conditions.insert("direction".into(), dir.to_string());
            u.conditions.insert("pitch_condition".into(), "low".into());
            us.push(u);
        }
        Manifest::new(us).unwrap()
    }

    #[test]
    fn filter_by_condition_and_sex() {
        let m = mixed_manifest();
        let fwd = m.filter(&Filter::parse("direction=forward").unwrap()).unwrap();
        let ids: Vec<_> = fwd.iter().map(|u| u.utterance_id.as_str()).collect();
        assert_eq!(ids, vec!["u0", "u2"]);
        let f = m.filter(&Filter::parse("sex=F").unwrap()).unwrap();
        assert_eq!(f.len(), 2);
        let none = m.filter(&Filter::parse("direction=sideways").unwrap()).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn filter_unknown_key_is_an_error() {
        let m = mixed_manifest();
        let err = m.filter(&Filter::parse("pitch=low").unwrap()).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(k) if k == "pitch"));
    }

    fn speaker_manifest(counts: &[usize]) -> Manifest {
        let mut us = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                us.push(meta(&format!("s{s}_{i}"), &format!("s{s}"), Sex::M, ""));
            }
        }
        Manifest::new(us).unwrap()
    }

    #[test]
    fn per_speaker_ratio_counts() {
        let m = speaker_manifest(&[10, 2, 1]);
        let spec = split(&m, SplitStrategy::PerSpeakerRatio { train: 0.7, val: 0.0, seed: 3 }).unwrap();
        let count = |spk: &str, part| {
            m.iter()
                .filter(|u| u.speaker_id == spk && spec.partition_of(&u.utterance_id) == Some(part))
                .count()
        };
        assert_eq!((count("s0", Partition::Train), count("s0", Partition::Test)), (7, 3));
        assert_eq!((count("s1", Partition::Train), count("s1", Partition::Test)), (1, 1));
        assert_eq!(count("s2", Partition::Train), 1);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let m = speaker_manifest(&[10, 7, 5]);
        let strategy = || SplitStrategy::PerSpeakerRatio { train: 0.6, val: 0.2, seed: 9 };
        assert_eq!(split(&m, strategy()).unwrap(), split(&m, strategy()).unwrap());
    }

    #[test]
    fn explicit_split_is_identity() {
        let m = speaker_manifest(&[2]);
        let map: BTreeMap<String, Partition> = [
            ("s0_0".to_string(), Partition::Train),
            ("s0_1".to_string(), Partition::Test),
        ]
        .into();
        let spec = split(&m, SplitStrategy::Explicit(&map)).unwrap();
        assert_eq!(spec.assignment, map);
        let bad: BTreeMap<String, Partition> = [("zz".to_string(), Partition::Train)].into();
        assert!(split(&m, SplitStrategy::Explicit(&bad)).is_err());
    }

    #[test]
    fn benchmark_list_matches_paths() {
        let m = speaker_manifest(&[3]);
        let list = "1 s0_0.npy\n2 s0_1.npy\n3 s0_2.npy\n";
        let spec = split(&m, SplitStrategy::BenchmarkList(list)).unwrap();
        assert_eq!(spec.partition_of("s0_1"), Some(Partition::Val));
        assert_eq!(spec.partition_of("s0_2"), Some(Partition::Test));
    }

    #[test]
    fn balanced_sample_is_sex_stratified() {
        let mut us = Vec::new();
        for s in 0..10 {
            let sex = if s % 2 == 0 { Sex::M } else { Sex::F };
            us.push(meta(&format!("u{s}"), &format!("s{s}"), sex, ""));
        }
        let m = Manifest::new(us).unwrap();
        let sub = balanced_speaker_sample(&m, 4, 1).unwrap();
        let males = sub.iter().filter(|u| u.sex == Sex::M).count();
        assert_eq!((sub.len(), males), (4, 2));
        assert!(balanced_speaker_sample(&m, 12, 1).is_err());
    }

    #[test]
    fn load_pooled_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("L1")).unwrap();
        let m = speaker_manifest(&[2]);
        for (i, u) in m.iter().enumerate() {
            let frames = array![[i as f64, 1.0], [i as f64 + 2.0, 3.0]];
            npy::save_matrix(&dir.path().join("L1").join(&u.path), frames.view()).unwrap();
        }
        let set = load_pooled(&m, dir.path(), Some("L1")).unwrap();
        assert_eq!(set.vectors.dim(), (2, 4));
        assert_eq!(set.row("s0_1").unwrap().to_vec(), vec![2.0, 2.0, 3.0, 3.0]);
        assert!(load_pooled(&m, dir.path(), Some("missing")).is_err());
    }
}
