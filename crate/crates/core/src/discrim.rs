//! Speaker discrimination: same/different pair decoders and bootstrapped
//! speaker-identification confusion.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{self, Correlation, Response};
use crate::corpus::{Manifest, PooledSet, Sex, Standardizer};
use crate::distances::DistanceMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Batches, Head, InMemory, Mlp, Targets, TrainOptions, TrainReport};
use crate::probe::{self, LabeledSet, ProbeConfig};
use crate::stimsel::TrialSpec;

/// Label of a same-speaker pair; different-speaker pairs are 0.
pub const SAME: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub input: Array1<f64>,
    pub label: f64,
    pub utt_a: String,
    pub utt_b: String,
}

struct SpeakerPool {
    sex: Sex,
    /// Row indices into the pooled set, with their sentence ids.
    utts: Vec<(usize, String)>,
}

/// Lazily generated, balanced same/different pairs.
///
/// Pair `i` of an epoch belongs to triplet `i / 2`; every triplet draws an
/// anchor, a same-speaker utterance with a different sentence and a
/// same-sex utterance from another speaker, all from a random stream keyed
/// by `(seed, epoch, triplet)`. Even indices emit the same pair, odd ones
/// the different pair, and either may have its halves swapped.
pub struct PairGenerator<'a> {
    pooled: &'a PooledSet,
    speakers: Vec<SpeakerPool>,
    anchors: Vec<usize>,
    /// Same-sex alternatives for each speaker.
    others: Vec<Vec<usize>>,
    n_pairs: usize,
    seed: u64,
}

impl<'a> PairGenerator<'a> {
    pub fn new(manifest: &Manifest, pooled: &'a PooledSet, n_pairs: usize, seed: u64) -> Result<Self> {
        if n_pairs % 2 != 0 || n_pairs == 0 {
            return Err(Error::invalid(format!("n_pairs = {n_pairs} must be even and positive")));
        }
        let mut grouped: BTreeMap<&str, SpeakerPool> = BTreeMap::new();
        for u in manifest.iter() {
            let Some(row) = pooled.position(&u.utterance_id) else { continue };
            grouped
                .entry(&u.speaker_id)
                .or_insert_with(|| SpeakerPool { sex: u.sex, utts: Vec::new() })
                .utts
                .push((row, u.sentence_id.clone()));
        }
        let names: Vec<String> = grouped.keys().map(|k| k.to_string()).collect();
        let speakers: Vec<SpeakerPool> = grouped.into_values().collect();
        let others: Vec<Vec<usize>> = (0..speakers.len())
            .map(|s| (0..speakers.len()).filter(|&t| t != s && speakers[t].sex == speakers[s].sex).collect())
            .collect();
        let mut anchors = Vec::new();
        for (s, pool) in speakers.iter().enumerate() {
            let first = &pool.utts[0].1;
            let two_sentences = pool.utts.iter().any(|(_, sent)| sent != first);
            if !two_sentences {
                log::warn!("speaker {} skipped: fewer than two distinct sentences", names[s]);
            } else if others[s].is_empty() {
                log::warn!("speaker {} skipped: no other speaker of the same sex", names[s]);
            } else {
                anchors.push(s);
            }
        }
        if anchors.is_empty() {
            return Err(Error::invalid("no speaker can anchor a same/different triplet"));
        }
        Ok(PairGenerator { pooled, speakers, anchors, others, n_pairs, seed })
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn input_dim(&self) -> usize {
        2 * self.pooled.dim()
    }

    fn rng(&self, epoch: usize, triplet: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 40) | triplet as u64);
        rng
    }

    /// Row indices of the two halves and the label of pair `index`.
    fn draw(&self, epoch: usize, index: usize) -> (usize, usize, f64) {
        let mut rng = self.rng(epoch, index / 2);
        let s = *self.anchors.choose(&mut rng).unwrap();
        let pool = &self.speakers[s];
        let (anchor, sentence) = pool.utts.choose(&mut rng).unwrap();
        let candidates: Vec<usize> = pool.utts.iter().filter(|(_, sent)| sent != sentence).map(|p| p.0).collect();
        let positive = *candidates.choose(&mut rng).unwrap();
        let t = *self.others[s].choose(&mut rng).unwrap();
        let negative = self.speakers[t].utts.choose(&mut rng).unwrap().0;
        let swaps: [bool; 2] = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let (mut a, mut b, label) = if index % 2 == 0 { (*anchor, positive, SAME) } else { (*anchor, negative, 0.0) };
        if swaps[index % 2] {
            std::mem::swap(&mut a, &mut b);
        }
        (a, b, label)
    }

    pub fn sample(&self, epoch: usize, index: usize) -> PairSample {
        let (a, b, label) = self.draw(epoch, index);
        let rows = &self.pooled.vectors;
        PairSample {
            input: concatenate![Axis(0), rows.row(a), rows.row(b)],
            label,
            utt_a: self.pooled.ids[a].clone(),
            utt_b: self.pooled.ids[b].clone(),
        }
    }

    fn rows(&self, epoch: usize, range: std::ops::Range<usize>) -> (Array2<f64>, Vec<f64>) {
        let d = self.pooled.dim();
        let mut x = Array2::zeros((range.len(), 2 * d));
        let mut y = Vec::with_capacity(range.len());
        for (r, i) in range.enumerate() {
            let (a, b, label) = self.draw(epoch, i);
            x.row_mut(r).slice_mut(ndarray::s![..d]).assign(&self.pooled.vectors.row(a));
            x.row_mut(r).slice_mut(ndarray::s![d..]).assign(&self.pooled.vectors.row(b));
            y.push(label);
        }
        (x, y)
    }

    /// The whole of one epoch as a matrix; used for fixed validation sets.
    pub fn materialize(&self, epoch: usize) -> (Array2<f64>, Vec<f64>) {
        self.rows(epoch, 0..self.n_pairs)
    }

    pub fn batches(&self, batch_size: usize) -> GeneratorBatches<'_, 'a> {
        GeneratorBatches { generator: self, batch_size: batch_size.max(1) }
    }
}

pub struct GeneratorBatches<'g, 'a> {
    generator: &'g PairGenerator<'a>,
    batch_size: usize,
}

impl Batches for GeneratorBatches<'_, '_> {
    fn batches_per_epoch(&self) -> usize {
        self.generator.n_pairs.div_ceil(self.batch_size)
    }

    fn batch(&self, epoch: usize, index: usize) -> (Array2<f64>, Targets) {
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(self.generator.n_pairs);
        let (x, y) = self.generator.rows(epoch, start..end);
        (x, Targets::Binary(y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layer_sizes: vec![4096],
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

/// The decoder hyperparameter grid: every batch size × learning rate ×
/// layer stack, then a round over single-layer widths.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub layer_sets: Vec<Vec<usize>>,
    pub node_grid: Vec<usize>,
}

impl Default for DecoderGrid {
    fn default() -> Self {
        DecoderGrid {
            batch_sizes: vec![64, 128, 256],
            learning_rates: vec![1e-4, 1e-3],
            layer_sets: vec![vec![4096], vec![4096, 256], vec![4096, 256, 128], vec![4096, 256, 128, 64]],
            node_grid: vec![512, 1024, 2048, 4096],
        }
    }
}

impl DecoderGrid {
    pub fn table(&self, base: &DecoderConfig) -> Vec<DecoderConfig> {
        let mut out = Vec::new();
        for layers in &self.layer_sets {
            for &lr in &self.learning_rates {
                for &batch in &self.batch_sizes {
                    out.push(DecoderConfig { layer_sizes: layers.clone(), learning_rate: lr, batch_size: batch, ..base.clone() });
                }
            }
        }
        out
    }

    /// Single-layer width sweep at the learning rate and batch size of `best`.
    pub fn node_round(&self, best: &DecoderConfig) -> Vec<DecoderConfig> {
        self.node_grid.iter().map(|&n| DecoderConfig { layer_sizes: vec![n], ..best.clone() }).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    mlp: Mlp,
    pub config: DecoderConfig,
    /// Applied to each pooled vector before concatenation.
    pub standardizer: Option<Standardizer>,
    pub val_accuracy: f64,
    #[serde(skip)]
    pub report: Option<TrainReport>,
}

impl Decoder {
    /// P(same) per row of concatenated inputs.
    pub fn probability_same(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.mlp.predict_proba(x).column(0).to_vec()
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[f64]) -> f64 {
        let p = self.probability_same(x);
        let hits = p.iter().zip(y).filter(|(p, &y)| (**p > 0.5) == (y == SAME)).count();
        hits as f64 / y.len() as f64
    }
}

fn both_labels(y: &[f64]) -> bool {
    y.contains(&SAME) && y.iter().any(|&v| v != SAME)
}

/// Trains a sigmoid-output decoder with binary cross-entropy, keeping the
/// lowest validation-loss checkpoint.
pub fn train_decoder(train: &dyn Batches, val_x: ArrayView2<f64>, val_y: &[f64], cfg: &DecoderConfig) -> Result<Decoder> {
    if !both_labels(val_y) {
        return Err(Error::Degenerate("validation stream (one label only)".into()));
    }
    let probe_batches = train.batches_per_epoch().min(4);
    let mut seen = Vec::new();
    for b in 0..probe_batches {
        if let (_, Targets::Binary(y)) = train.batch(0, b) {
            seen.extend(y);
        }
    }
    if !both_labels(&seen) {
        return Err(Error::Degenerate("training stream (one label only)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::new(val_x.ncols(), &cfg.layer_sizes, 1, cfg.activation, Head::Sigmoid, &mut rng);
    let targets = Targets::Binary(val_y.to_vec());
    let opts = TrainOptions {
        learning_rate: cfg.learning_rate,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let report = nn::fit(&mut mlp, train, val_x, &targets, &opts)?;
    let mut d = Decoder { mlp, config: cfg.clone(), standardizer: None, val_accuracy: 0.0, report: Some(report) };
    d.val_accuracy = d.accuracy(val_x, val_y);
    Ok(d)
}

/// Decoder trained on an in-memory labelled pair set (e.g. a shuffled-label control).
pub fn train_decoder_fixed(x: ArrayView2<f64>, y: &[f64], val_x: ArrayView2<f64>, val_y: &[f64], cfg: &DecoderConfig) -> Result<Decoder> {
    let targets = Targets::Binary(y.to_vec());
    let batches = InMemory { x, y: &targets, batch_size: cfg.batch_size, seed: cfg.seed };
    train_decoder(&batches, val_x, val_y, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: DecoderConfig,
    pub val_accuracy: f64,
}

/// Trains every configuration on the generator's stream and scores it on the fixed validation pairs.
pub fn grid_search(
    train: &PairGenerator<'_>,
    val_x: ArrayView2<f64>,
    val_y: &[f64],
    configs: &[DecoderConfig],
) -> Result<Vec<GridRow>> {
    configs
        .par_iter()
        .map(|cfg| {
            let d = train_decoder(&train.batches(cfg.batch_size), val_x, val_y, cfg)?;
            Ok(GridRow { config: cfg.clone(), val_accuracy: d.val_accuracy })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDecision {
    pub trial_id: usize,
    pub probability_same: f64,
    pub decision: Response,
}

/// Decoder judgments on a behavioral trial list.
pub fn evaluate_on_trials(decoder: &Decoder, trials: &[TrialSpec], pooled: &PooledSet) -> Result<Vec<TrialDecision>> {
    if trials.is_empty() {
        return Ok(Vec::new());
    }
    let fetch = |id: &str| -> Result<Array1<f64>> {
        let row = pooled.row(id).ok_or_else(|| Error::invalid(format!("trial utterance {id:?} has no embedding")))?;
        Ok(match &decoder.standardizer {
            Some(s) => s.apply(row),
            None => row.to_owned(),
        })
    };
    let d = pooled.dim();
    let mut x = Array2::zeros((trials.len(), 2 * d));
    for (r, t) in trials.iter().enumerate() {
        x.row_mut(r).slice_mut(ndarray::s![..d]).assign(&fetch(&t.stim_1)?);
        x.row_mut(r).slice_mut(ndarray::s![d..]).assign(&fetch(&t.stim_2)?);
    }
    Ok(trials
        .iter()
        .zip(decoder.probability_same(x.view()))
        .map(|(t, p)| TrialDecision {
            trial_id: t.trial_id,
            probability_same: p,
            decision: if p > 0.5 { Response::Same } else { Response::Different },
        })
        .collect())
}

/// Speaker-by-speaker identification counts accumulated over bootstrap trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// Row (and column) order: ascending misidentification total, then speaker id.
    pub speakers: Vec<String>,
    /// `counts[[i, j]]`: test utterances of speaker `i` labelled as speaker `j`.
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    fn sorted(speakers: Vec<String>, counts: Array2<u64>) -> Self {
        let totals: Vec<u64> = (0..speakers.len()).map(|i| counts.row(i).sum() - counts[[i, i]]).collect();
        let mut order: Vec<usize> = (0..speakers.len()).collect();
        order.sort_by(|&a, &b| totals[a].cmp(&totals[b]).then_with(|| speakers[a].cmp(&speakers[b])));
        let counts = counts.select(Axis(0), &order).select(Axis(1), &order);
        ConfusionMatrix { speakers: order.iter().map(|&i| speakers[i].clone()).collect(), counts }
    }

    pub fn misidentifications(&self) -> Vec<u64> {
        (0..self.speakers.len()).map(|i| self.counts.row(i).sum() - self.counts[[i, i]]).collect()
    }

    pub fn off_diagonal_total(&self) -> u64 {
        self.misidentifications().iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub n_trials: usize,
    pub train_per_speaker: usize,
    pub test_per_speaker: usize,
    pub seed: u64,
    /// Shallow probe used in every trial; only its first learning rate is used.
    pub probe: ProbeConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_trials: 10_000,
            train_per_speaker: 7,
            test_per_speaker: 3,
            seed: 0,
            probe: ProbeConfig { learning_rate_grid: vec![1e-3], repeats: 1, ..ProbeConfig::default() },
        }
    }
}

fn bootstrap_trial(
    pooled: &PooledSet,
    by_speaker: &[(String, Vec<usize>)],
    cfg: &BootstrapConfig,
    trial: usize,
) -> Result<Array2<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let k = cfg.train_per_speaker + cfg.test_per_speaker;
    let (mut train_rows, mut train_labels, mut test_rows, mut test_labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (speaker, rows) in by_speaker {
        let picked: Vec<usize> = rows.choose_multiple(&mut rng, k).copied().collect();
        for (i, &r) in picked.iter().enumerate() {
            if i < cfg.train_per_speaker {
                train_rows.push(r);
                train_labels.push(speaker.clone());
            } else {
                test_rows.push(r);
                test_labels.push(speaker.clone());
            }
        }
    }
    let train_x = pooled.vectors.select(Axis(0), &train_rows);
    let s = Standardizer::fit(train_x.view())?;
    let train = LabeledSet::new(s.apply_rows(train_x.view()), train_labels)?;
    let test = LabeledSet::new(s.apply_rows(pooled.vectors.select(Axis(0), &test_rows).view()), test_labels)?;
    let lr = *cfg.probe.learning_rate_grid.first().ok_or_else(|| Error::invalid("empty learning-rate grid"))?;
    let probe_cfg = ProbeConfig { learning_rate_grid: vec![lr], seed: probe::run_seed(cfg.seed, trial), ..cfg.probe.clone() };
    // no validation split here: early stopping watches the training loss
    let p = probe::train_probe(&train, &train, &probe_cfg)?;
    Ok(probe::evaluate_probe(&p, &test)?.confusion)
}

/// Repeated train/test resampling of every speaker's utterances, summing
/// each trial's test confusion. Each trial draws from its own stream keyed
/// by `(seed, trial)`, so the result does not depend on thread count.
pub fn bootstrap_confusion(pooled: &PooledSet, manifest: &Manifest, cfg: &BootstrapConfig) -> Result<ConfusionMatrix> {
    if cfg.train_per_speaker == 0 || cfg.test_per_speaker == 0 || cfg.n_trials == 0 {
        return Err(Error::invalid("bootstrap needs positive trial, train and test counts"));
    }
    let mut grouped: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for u in manifest.iter() {
        if let Some(r) = pooled.position(&u.utterance_id) {
            grouped.entry(u.speaker_id.clone()).or_default().push(r);
        }
    }
    let need = cfg.train_per_speaker + cfg.test_per_speaker;
    for (s, rows) in &grouped {
        if rows.len() < need {
            return Err(Error::invalid(format!("speaker {s} has {} utterances, {need} needed", rows.len())));
        }
    }
    if grouped.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least two speakers"));
    }
    let by_speaker: Vec<(String, Vec<usize>)> = grouped.into_iter().collect();
    let c = by_speaker.len();
    let total = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| bootstrap_trial(pooled, &by_speaker, cfg, t))
        .try_reduce(|| Array2::zeros((c, c)), |a, b| Ok(a + b))?;
    Ok(ConfusionMatrix::sorted(by_speaker.into_iter().map(|p| p.0).collect(), total))
}

/// Mean utterance duration per speaker.
pub fn mean_durations(manifest: &Manifest) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for u in manifest.iter() {
        let e = acc.entry(u.speaker_id.clone()).or_default();
        e.0 += u.duration_s;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub x: String,
    pub y: String,
    pub result: Correlation,
}

/// Pearson correlations over speakers between misidentification totals,
/// mean durations and each metric's mean distance to the other speakers.
pub fn confusion_vs_distance(
    confusion: &ConfusionMatrix,
    distances: &[DistanceMatrix],
    durations: &BTreeMap<String, f64>,
) -> Result<Vec<CorrelationRow>> {
    let mut ids = confusion.speakers.clone();
    ids.sort();
    let mismatch = |what: &str| Error::invalid(format!("{what} speaker ids differ from the confusion matrix"));
    let mis = confusion.misidentifications();
    let lookup: BTreeMap<&str, u64> = confusion.speakers.iter().map(String::as_str).zip(mis).collect();
    let mut vars: Vec<(String, Vec<f64>)> = vec![("misidentifications".into(), ids.iter().map(|s| lookup[s.as_str()] as f64).collect())];
    let dur: Vec<f64> = ids.iter().map(|s| durations.get(s).copied().ok_or_else(|| mismatch("duration"))).collect::<Result<_>>()?;
    vars.push(("duration".into(), dur));
    for d in distances {
        let mut sorted = d.ids.clone();
        sorted.sort();
        if sorted != ids {
            return Err(mismatch(d.metric.name()));
        }
        let means = ids
            .iter()
            .map(|s| {
                let i = d.ids.iter().position(|x| x == s).unwrap();
                let vals: Vec<f64> =
                    (0..d.ids.len()).filter(|&j| j != i).map(|j| d.values[[i, j]]).filter(|v| v.is_finite()).collect();
                crate::stats::mean(&vals)
            })
            .collect();
        vars.push((d.metric.name().to_string(), means));
    }
    let mut out = Vec::new();
    for a in 0..vars.len() {
        for b in a + 1..vars.len() {
            out.push(CorrelationRow {
                x: vars[a].0.clone(),
                y: vars[b].0.clone(),
                result: behavior::pearson(&vars[a].1, &vars[b].1)?,
            });
        }
    }
    Ok(out)
}
