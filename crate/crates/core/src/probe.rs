//! Shallow speaker-identification probes on pooled embeddings.
//!
//! A probe is a one-hidden-layer network with a softmax output trained with
//! Adam and validation early stopping. Results are reported as unweighted
//! average recall (UAR), the mean of per-class recalls.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Filter, Manifest, Partition, PooledSet, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Head, InMemory, Mlp, Targets, TrainOptions, TrainReport};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden_layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub learning_rate_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_layer_sizes: vec![100],
            activation: Activation::Relu,
            learning_rate_grid: vec![1e-4, 1e-3, 1e-2],
            max_epochs: 200,
            patience: 20,
            batch_size: 256,
            repeats: 3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate_grid.is_empty() {
            return Err(Error::invalid("learning-rate grid is empty"));
        }
        if self.learning_rate_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.hidden_layer_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid("patience must be smaller than max_epochs"));
        }
        if self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::invalid("batch_size and repeats must be positive"));
        }
        Ok(())
    }
}

/// Feature rows with one string label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub labels: Vec<String>,
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        Ok(LabeledSet { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers rows of `set` for `ids`, labelled by speaker.
    pub fn speakers(set: &PooledSet, manifest: &Manifest, ids: &[String]) -> Result<Self> {
        let labels = ids
            .iter()
            .map(|id| {
                manifest
                    .get(id)
                    .map(|u| u.speaker_id.clone())
                    .ok_or_else(|| Error::invalid(format!("utterance {id:?} not in manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::new(set.select(ids)?, labels)
    }

    fn standardized(&self, s: &Standardizer) -> LabeledSet {
        LabeledSet {
            x: s.apply_rows(self.x.view()),
            labels: self.labels.clone(),
        }
    }
}

/// Unweighted average recall over the classes present in `truth`.
pub fn uar<L: Eq + Hash>(predictions: &[L], truth: &[L]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("uar of an empty label set"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut per_class: HashMap<&L, (usize, usize)> = HashMap::new();
    for (p, t) in predictions.iter().zip(truth) {
        let e = per_class.entry(t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    // sum in a fixed order so the result does not depend on hash iteration
    let mut recalls: Vec<f64> = per_class
        .values()
        .map(|&(hit, n)| hit as f64 / n as f64)
        .collect();
    recalls.sort_by(f64::total_cmp);
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// A trained probe and the class list it predicts over.
#[derive(Debug, Clone)]
pub struct Probe {
    mlp: Mlp,
    classes: Vec<String>,
    pub learning_rate: f64,
    pub val_uar: f64,
    pub report: TrainReport,
}

impl Probe {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<String> {
        self.mlp
            .predict(x)
            .into_iter()
            .map(|k| self.classes[k].clone())
            .collect()
    }

    pub fn val_loss(&self) -> f64 {
        self.report.best_val_loss()
    }
}

fn class_index(classes: &[String], labels: &[String]) -> Result<Vec<usize>> {
    let lookup: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    labels
        .iter()
        .map(|l| {
            lookup
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownLabel(l.clone()))
        })
        .collect()
}

fn train_one(train: &LabeledSet, val: &LabeledSet, classes: &[String], cfg: &ProbeConfig, lr: f64, seed: u64) -> Result<Probe> {
    let y_train = Targets::Classes(class_index(classes, &train.labels)?);
    let y_val = Targets::Classes(class_index(classes, &val.labels)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::new(
        train.x.ncols(),
        &cfg.hidden_layer_sizes,
        classes.len(),
        cfg.activation,
        Head::Softmax,
        &mut rng,
    );
    let batches = InMemory {
        x: train.x.view(),
        y: &y_train,
        batch_size: cfg.batch_size,
        seed,
    };
    let opts = TrainOptions {
        learning_rate: lr,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        batch_size: cfg.batch_size,
        seed,
    };
    let report = nn::fit(&mut mlp, &batches, val.x.view(), &y_val, &opts)?;
    let pred: Vec<usize> = mlp.predict(val.x.view());
    let truth = match &y_val {
        Targets::Classes(c) => c,
        Targets::Binary(_) => unreachable!(),
    };
    let val_uar = uar(&pred, truth)?;
    Ok(Probe {
        mlp,
        classes: classes.to_vec(),
        learning_rate: lr,
        val_uar,
        report,
    })
}

/// Trains one probe per learning rate and keeps the one with the best
/// validation UAR (ties go to the lower learning rate).
pub fn train_probe(train: &LabeledSet, val: &LabeledSet, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let classes: Vec<String> = train.labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("probe training needs at least two classes"));
    }
    if let Some(missing) = val.labels.iter().find(|l| classes.binary_search(l).is_err()) {
        return Err(Error::invalid(format!(
            "class {missing:?} appears in validation but not in training"
        )));
    }
    let mut lrs = cfg.learning_rate_grid.clone();
    lrs.sort_by(f64::total_cmp);
    let probes: Vec<Probe> = lrs
        .par_iter()
        .map(|&lr| train_one(train, val, &classes, cfg, lr, cfg.seed))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, p) in probes.iter().enumerate() {
        if p.val_uar > probes[best].val_uar {
            best = i;
        }
    }
    Ok(probes.into_iter().nth(best).unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub uar: f64,
    /// Rows are true classes, columns predicted classes, both in probe class order.
    pub confusion: Array2<u64>,
    /// NaN for classes without test samples.
    pub per_class_recall: Vec<f64>,
}

pub fn evaluate_probe(probe: &Probe, test: &LabeledSet) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let truth = class_index(&probe.classes, &test.labels)?;
    let pred = probe.mlp.predict(test.x.view());
    let c = probe.classes.len();
    let mut confusion = Array2::zeros((c, c));
    for (&t, &p) in truth.iter().zip(&pred) {
        confusion[[t, p]] += 1;
    }
    let per_class_recall = (0..c)
        .map(|k| {
            let n: u64 = confusion.row(k).sum();
            if n == 0 {
                f64::NAN
            } else {
                confusion[[k, k]] as f64 / n as f64
            }
        })
        .collect();
    Ok(Evaluation {
        uar: uar(&pred, &truth)?,
        confusion,
        per_class_recall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub uar_per_run: Vec<f64>,
    pub lr_per_run: Vec<f64>,
    pub mean_uar: f64,
    /// Population standard deviation over runs.
    pub std_uar: f64,
    pub best_learning_rate: f64,
    pub classes: Vec<String>,
    /// Confusion of the run with the best validation UAR.
    pub confusion: Array2<u64>,
    pub per_class_recall: Vec<f64>,
}

impl ProbeResult {
    fn from_runs(runs: Vec<(Probe, Evaluation)>) -> Self {
        let uar_per_run: Vec<f64> = runs.iter().map(|(_, e)| e.uar).collect();
        let lr_per_run: Vec<f64> = runs.iter().map(|(p, _)| p.learning_rate).collect();
        let mut best = 0;
        for (i, (p, _)) in runs.iter().enumerate() {
            if p.val_uar > runs[best].0.val_uar {
                best = i;
            }
        }
        let (probe, eval) = runs.into_iter().nth(best).unwrap();
        ProbeResult {
            mean_uar: stats::mean(&uar_per_run),
            std_uar: stats::std_pop(&uar_per_run),
            uar_per_run,
            lr_per_run,
            best_learning_rate: probe.learning_rate,
            classes: probe.classes,
            confusion: eval.confusion,
            per_class_recall: eval.per_class_recall,
        }
    }
}

/// Seed for repeat `run` of a configuration seeded with `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(run as u64)
}

/// Trains and evaluates `cfg.repeats` probes with distinct seeds.
pub fn run_probe(train: &LabeledSet, val: &LabeledSet, test: &LabeledSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let runs: Vec<(Probe, Evaluation)> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let run_cfg = ProbeConfig {
                seed: run_seed(cfg.seed, r),
                ..cfg.clone()
            };
            let probe = train_probe(train, val, &run_cfg)?;
            let eval = evaluate_probe(&probe, test)?;
            Ok((probe, eval))
        })
        .collect::<Result<_>>()?;
    Ok(ProbeResult::from_runs(runs))
}

/// Train/val/test sets for one pooled set, standardized on the train rows.
pub fn prepare_splits(
    set: &PooledSet,
    manifest: &Manifest,
    split: &SplitSpec,
) -> Result<(LabeledSet, LabeledSet, LabeledSet)> {
    let ids = |part| -> Vec<String> {
        manifest
            .iter()
            .filter(|u| split.partition_of(&u.utterance_id) == Some(part) && set.position(&u.utterance_id).is_some())
            .map(|u| u.utterance_id.clone())
            .collect()
    };
    let train = LabeledSet::speakers(set, manifest, &ids(Partition::Train))?;
    let val = LabeledSet::speakers(set, manifest, &ids(Partition::Val))?;
    let test = LabeledSet::speakers(set, manifest, &ids(Partition::Test))?;
    if train.is_empty() {
        return Err(Error::invalid("training partition is empty"));
    }
    let s = Standardizer::fit(train.x.view())?;
    Ok((train.standardized(&s), val.standardized(&s), test.standardized(&s)))
}

#[derive(Debug, Clone)]
pub struct LayerwiseTable {
    pub rows: Vec<(String, ProbeResult)>,
    pub best_layer: String,
}

/// Runs the probe pipeline on every layer. Every layer must cover the same utterances.
pub fn layerwise(
    layers: &[(String, PooledSet)],
    manifest: &Manifest,
    split: &SplitSpec,
    cfg: &ProbeConfig,
) -> Result<LayerwiseTable> {
    let (_, first) = layers
        .first()
        .ok_or_else(|| Error::invalid("no layers given"))?;
    for (tag, set) in layers {
        if !set.same_ids(first) {
            return Err(Error::invalid(format!(
                "layer {tag:?} covers a different utterance set than {:?}",
                layers[0].0
            )));
        }
    }
    let rows: Vec<(String, ProbeResult)> = layers
        .par_iter()
        .map(|(tag, set)| {
            let (train, val, test) = prepare_splits(set, manifest, split)?;
            Ok((tag.clone(), run_probe(&train, &val, &test, cfg)?))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, r)) in rows.iter().enumerate() {
        if r.mean_uar > rows[best].1.mean_uar {
            best = i;
        }
    }
    Ok(LayerwiseTable {
        best_layer: rows[best].0.clone(),
        rows,
    })
}

/// Hyperparameter grid for cross-condition evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub learning_rates: Vec<f64>,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            hidden: vec![50, 100, 200],
            activations: vec![Activation::Relu, Activation::Tanh, Activation::Identity],
            learning_rates: vec![1e-4, 1e-3, 1e-2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub hidden: usize,
    pub activation: Activation,
    pub learning_rate: f64,
}

impl ProbeGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &activation in &self.activations {
                for &learning_rate in &self.learning_rates {
                    out.push(GridPoint {
                        hidden,
                        activation,
                        learning_rate,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub condition: String,
    /// `uar_per_run` holds one test UAR per grid point, in grid order.
    pub result: ProbeResult,
    pub grid: Vec<GridPoint>,
    /// Test UAR of the grid point with the best validation UAR.
    pub selected_uar: f64,
}

/// Trains on the train-partition utterances matching `train_filter` and
/// evaluates every grid point on the test-partition utterances matching each
/// of `test_filters`.
pub fn cross_condition(
    set: &PooledSet,
    manifest: &Manifest,
    split: &SplitSpec,
    train_filter: &Filter,
    test_filters: &[Filter],
    grid: &ProbeGrid,
    cfg: &ProbeConfig,
) -> Result<Vec<ConditionResult>> {
    let train_m = manifest.filter(train_filter)?;
    let (train, val, _) = prepare_raw(set, &train_m, split)?;
    if train.is_empty() {
        return Err(Error::invalid("training condition selects no training utterances"));
    }
    let train_speakers: BTreeSet<&String> = train.labels.iter().collect();
    let mut tests = Vec::with_capacity(test_filters.len());
    for f in test_filters {
        let m = manifest.filter(f)?;
        let ids = split.ids(&m, Partition::Test);
        let ids: Vec<String> = ids.into_iter().filter(|id| set.position(id).is_some()).collect();
        let test = LabeledSet::speakers(set, manifest, &ids)?;
        if test.is_empty() {
            return Err(Error::invalid(format!("test condition {f} selects no test utterances")));
        }
        if let Some(unseen) = test.labels.iter().find(|l| !train_speakers.contains(l)) {
            return Err(Error::invalid(format!(
                "test condition {f} introduces speaker {unseen:?} absent from training"
            )));
        }
        tests.push((f.to_string(), test));
    }
    let s = Standardizer::fit(train.x.view())?;
    let train = train.standardized(&s);
    let val = val.standardized(&s);
    let tests: Vec<(String, LabeledSet)> = tests
        .into_iter()
        .map(|(name, t)| (name, t.standardized(&s)))
        .collect();

    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("hyperparameter grid is empty"));
    }
    let trained: Vec<Probe> = points
        .par_iter()
        .map(|p| {
            let point_cfg = ProbeConfig {
                hidden_layer_sizes: vec![p.hidden],
                activation: p.activation,
                learning_rate_grid: vec![p.learning_rate],
                ..cfg.clone()
            };
            train_probe(&train, &val, &point_cfg)
        })
        .collect::<Result<_>>()?;

    tests
        .iter()
        .map(|(name, test)| {
            let runs = trained
                .iter()
                .map(|p| Ok((p.clone(), evaluate_probe(p, test)?)))
                .collect::<Result<Vec<_>>>()?;
            let result = ProbeResult::from_runs(runs);
            let mut best = 0;
            for (i, p) in trained.iter().enumerate() {
                if p.val_uar > trained[best].val_uar {
                    best = i;
                }
            }
            Ok(ConditionResult {
                condition: name.clone(),
                selected_uar: result.uar_per_run[best],
                result,
                grid: points.clone(),
            })
        })
        .collect()
}

fn prepare_raw(set: &PooledSet, manifest: &Manifest, split: &SplitSpec) -> Result<(LabeledSet, LabeledSet, LabeledSet)> {
    let ids = |part| -> Vec<String> {
        split
            .ids(manifest, part)
            .into_iter()
            .filter(|id| set.position(id).is_some())
            .collect()
    };
    Ok((
        LabeledSet::speakers(set, manifest, &ids(Partition::Train))?,
        LabeledSet::speakers(set, manifest, &ids(Partition::Val))?,
        LabeledSet::speakers(set, manifest, &ids(Partition::Test))?,
    ))
}
