//! Voxel-wise encoding and decoding over fMRI runs.
//!
//! Encoding maps time-lagged stimulus features to every target column with
//! ridge regression; the penalty (per target) and lag set are chosen by
//! leave-one-run-out cross-validation inside the training runs. Decoding
//! predicts a binary "voice active" label per TR with a class-balanced
//! linear SVM.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::behavior;
use crate::corpus::Standardizer;
use crate::error::{Error, Result};
use crate::{npy, probe};

/// One acquisition run: TR-aligned stimulus features and target time series.
///
/// Target reads go through [`RunSeries::targets`], which counts them so tests
/// can check that held-out targets stay untouched during model selection.
#[derive(Debug)]
pub struct RunSeries {
    pub run_id: String,
    pub features: Array2<f64>,
    targets: Array2<f64>,
    pub tr_s: f64,
    reads: AtomicUsize,
}

impl Clone for RunSeries {
    fn clone(&self) -> Self {
        RunSeries {
            run_id: self.run_id.clone(),
            features: self.features.clone(),
            targets: self.targets.clone(),
            tr_s: self.tr_s,
            reads: AtomicUsize::new(0),
        }
    }
}

impl RunSeries {
    pub fn new(run_id: &str, features: Array2<f64>, targets: Array2<f64>, tr_s: f64) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "run {run_id}: {} feature rows but {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("run {run_id}: non-finite value")));
        }
        if !(tr_s > 0.0) {
            return Err(Error::invalid(format!("run {run_id}: TR must be positive")));
        }
        Ok(RunSeries { run_id: run_id.to_string(), features, targets, tr_s, reads: AtomicUsize::new(0) })
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.targets.view()
    }

    pub fn target_reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn n_trs(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.ncols()
    }
}

#[derive(Deserialize)]
struct RunRow {
    run_id: String,
    features_path: String,
    #[serde(default)]
    targets_path: String,
    tr_s: f64,
}

/// Rows of a runs CSV (`run_id,features_path,targets_path,tr_s`), paths resolved against its directory.
pub fn read_runs_csv(path: &Path) -> Result<Vec<(String, std::path::PathBuf, Option<std::path::PathBuf>, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RunRow>().enumerate() {
        let r = row.map_err(|e| Error::ingest(path, format!("row {}: {e}", i + 2)))?;
        let targets = (!r.targets_path.is_empty()).then(|| base.join(&r.targets_path));
        out.push((r.run_id, base.join(&r.features_path), targets, r.tr_s));
    }
    if out.is_empty() {
        return Err(Error::ingest(path, "no runs listed"));
    }
    Ok(out)
}

/// Loads every run listed in a runs CSV; each needs a targets file.
pub fn load_runs(path: &Path) -> Result<Vec<RunSeries>> {
    read_runs_csv(path)?
        .into_iter()
        .map(|(id, f, t, tr)| {
            let t = t.ok_or_else(|| Error::ingest(path, format!("run {id} has no targets_path")))?;
            RunSeries::new(&id, npy::load_matrix(&f)?, npy::load_matrix(&t)?, tr)
        })
        .collect()
}

/// Columns of `x` shifted down by each lag (zero-filled at the top), side by side.
pub fn delay_features(x: ArrayView2<f64>, lags: &[usize]) -> Result<Array2<f64>> {
    if lags.is_empty() {
        return Err(Error::invalid("at least one lag is required"));
    }
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d * lags.len()));
    for (k, &lag) in lags.iter().enumerate() {
        if lag >= n {
            return Err(Error::invalid(format!("lag {lag} is not shorter than the run ({n} TRs)")));
        }
        out.slice_mut(s![lag.., k * d..(k + 1) * d]).assign(&x.slice(s![..n - lag, ..]));
    }
    Ok(out)
}

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("ridge penalty {alpha} must be positive and finite")));
    }
    Ok(())
}

fn finite(w: Array2<f64>) -> Result<Array2<f64>> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(w)
    } else {
        Err(Error::Degenerate("ridge solve (non-finite weights)".into()))
    }
}

fn spd_solve(mut a: Array2<f64>, alpha: f64, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    for i in 0..a.nrows() {
        a[[i, i]] += alpha;
    }
    let chol = to_na(a.view())
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge system (not positive definite)".into()))?;
    Ok(from_na(&chol.solve(&to_na(b))))
}

/// `(XᵀX + αI)⁻¹ XᵀY`.
pub fn ridge_primal(x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    finite(spd_solve(x.t().dot(&x), alpha, x.t().dot(&y).view())?)
}

/// `Xᵀ (XXᵀ + αI)⁻¹ Y`, the same solution through the n×n Gram matrix.
pub fn ridge_dual(x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    finite(x.t().dot(&spd_solve(x.dot(&x.t()), alpha, y)?))
}

/// Ridge weights, solved in whichever of the primal and dual forms is smaller.
pub fn ridge_fit(x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} design rows vs {} target rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < x.ncols() {
        ridge_dual(x, y, alpha)
    } else {
        ridge_primal(x, y, alpha)
    }
}

/// One eigendecomposition, weights for any number of penalties.
struct RidgePath {
    /// p×k map from spectral coordinates to weights.
    basis: Array2<f64>,
    eig: Array1<f64>,
    /// k×G projected targets.
    proj: Array2<f64>,
}

impl RidgePath {
    fn new(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Self {
        if x.nrows() < x.ncols() {
            let e = SymmetricEigen::new(to_na(x.dot(&x.t()).view()));
            let u = from_na(&e.eigenvectors);
            RidgePath { basis: x.t().dot(&u), eig: e.eigenvalues.iter().map(|v| v.max(0.0)).collect(), proj: u.t().dot(&y) }
        } else {
            let e = SymmetricEigen::new(to_na(x.t().dot(&x).view()));
            let v = from_na(&e.eigenvectors);
            let proj = v.t().dot(&x.t().dot(&y));
            RidgePath { basis: v, eig: e.eigenvalues.iter().map(|v| v.max(0.0)).collect(), proj }
        }
    }

    fn weights(&self, alpha: f64) -> Array2<f64> {
        let mut scaled = self.proj.clone();
        for (mut row, &l) in scaled.axis_iter_mut(Axis(0)).zip(&self.eig) {
            row /= l + alpha;
        }
        self.basis.dot(&scaled)
    }
}

/// (Pearson r, R²) of a prediction against the truth.
pub fn r2_and_pearson(predicted: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", predicted.len(), truth.len())));
    }
    if truth.len() < 3 {
        return Err(Error::invalid("scores need at least 3 samples"));
    }
    let mean = truth.mean().unwrap();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("target (constant truth)".into()));
    }
    let ss_res: f64 = predicted.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let r = behavior::pearson(&predicted.to_vec(), &truth.to_vec())?.r;
    Ok((r, 1.0 - ss_res / ss_tot))
}

/// Correlation used for model selection: 0 when either side is constant.
fn selection_r(p: ArrayView1<f64>, t: ArrayView1<f64>) -> f64 {
    crate::stats::pearson_r(&p.to_vec(), &t.to_vec()).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Inner cross-validation over the training runs.
    Selection,
    /// Final fit on all training runs.
    Refit,
    /// Prediction and scoring on the held-out run.
    Scoring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingConfig {
    pub alpha_grid: Vec<f64>,
    /// Candidate lag sets; one is chosen for all targets.
    pub lags_grid: Vec<Vec<usize>>,
    /// One penalty per target (true) or a single shared penalty.
    pub per_target_alpha: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            alpha_grid: (-1..=5).map(|k| 10f64.powi(k)).collect(),
            lags_grid: vec![vec![1, 2, 3, 4]],
            per_target_alpha: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingResult {
    pub holdout_run: String,
    pub r: Vec<f64>,
    pub r2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lags: Vec<usize>,
}

/// Design and centred targets for a set of runs, standardized with statistics from those runs.
struct Design {
    x: Array2<f64>,
    y: Array2<f64>,
    scaler: Standardizer,
    y_mean: Array1<f64>,
}

fn delayed(runs: &[&RunSeries], lags: &[usize]) -> Result<Vec<Array2<f64>>> {
    runs.iter().map(|r| delay_features(r.features.view(), lags)).collect()
}

fn stack(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(0), parts).expect("matching widths")
}

fn design(x_parts: &[Array2<f64>], runs: &[&RunSeries]) -> Result<Design> {
    let views: Vec<_> = x_parts.iter().map(|a| a.view()).collect();
    let x = stack(&views);
    let scaler = Standardizer::fit(x.view())?;
    let ys: Vec<ArrayView2<f64>> = runs.iter().map(|r| r.targets()).collect();
    let y = stack(&ys);
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    Ok(Design { x: scaler.apply_rows(x.view()), y: &y - &y_mean, scaler, y_mean })
}

/// Mean validation r over inner folds, indexed `[alpha][target]`.
fn inner_scores(train: &[&RunSeries], lags: &[usize], alphas: &[f64]) -> Result<Array2<f64>> {
    let xs = delayed(train, lags)?;
    let g = train[0].n_targets();
    let folds: Vec<Array2<f64>> = (0..train.len())
        .into_par_iter()
        .map(|v| {
            let idx: Vec<usize> = (0..train.len()).filter(|&i| i != v).collect();
            let parts: Vec<Array2<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
            let runs: Vec<&RunSeries> = idx.iter().map(|&i| train[i]).collect();
            let d = design(&parts, &runs)?;
            let path = RidgePath::new(d.x.view(), d.y.view());
            let xv = d.scaler.apply_rows(xs[v].view());
            let yv = train[v].targets();
            let mut scores = Array2::zeros((alphas.len(), g));
            for (a, &alpha) in alphas.iter().enumerate() {
                let pred = xv.dot(&path.weights(alpha)) + &d.y_mean;
                for t in 0..g {
                    scores[[a, t]] = selection_r(pred.column(t), yv.column(t));
                }
            }
            Ok(scores)
        })
        .collect::<Result<_>>()?;
    let mut total = Array2::zeros((alphas.len(), g));
    for f in &folds {
        total += f;
    }
    Ok(total / folds.len() as f64)
}

/// Holds out run `holdout`, picks lags and penalties by leave-one-run-out
/// CV on the remaining runs, refits on all of them and scores every target
/// on the held-out run. `observer` is told when each phase starts.
pub fn loro_cv_observed(
    runs: &[RunSeries],
    holdout: usize,
    cfg: &EncodingConfig,
    observer: &mut dyn FnMut(Phase),
) -> Result<EncodingResult> {
    if runs.len() < 3 {
        return Err(Error::invalid("leave-one-run-out encoding needs at least 3 runs"));
    }
    if holdout >= runs.len() {
        return Err(Error::invalid(format!("held-out run index {holdout} out of range")));
    }
    if cfg.alpha_grid.is_empty() || cfg.lags_grid.is_empty() {
        return Err(Error::invalid("alpha and lag grids must be non-empty"));
    }
    for &a in &cfg.alpha_grid {
        check_alpha(a)?;
    }
    let (d, g) = (runs[0].features.ncols(), runs[0].n_targets());
    for r in runs {
        if r.features.ncols() != d || r.n_targets() != g {
            return Err(Error::Shape(format!("run {} does not match the feature/target widths of run {}", r.run_id, runs[0].run_id)));
        }
    }
    let train: Vec<&RunSeries> = runs.iter().enumerate().filter(|(i, _)| *i != holdout).map(|(_, r)| r).collect();

    observer(Phase::Selection);
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for (li, lags) in cfg.lags_grid.iter().enumerate() {
        let scores = inner_scores(&train, lags, &cfg.alpha_grid)?;
        let choice: Vec<usize> = if cfg.per_target_alpha {
            (0..g).map(|t| argmax(scores.column(t))).collect()
        } else {
            vec![argmax(scores.mean_axis(Axis(1)).unwrap().view()); g]
        };
        let value = (0..g).map(|t| scores[[choice[t], t]]).sum::<f64>() / g as f64;
        if best.as_ref().is_none_or(|b| value > b.0) {
            best = Some((value, li, choice));
        }
    }
    let (_, li, choice) = best.unwrap();
    let lags = cfg.lags_grid[li].clone();

    observer(Phase::Refit);
    let xs = delayed(&train, &lags)?;
    let full = design(&xs, &train)?;
    let path = RidgePath::new(full.x.view(), full.y.view());
    let mut w = Array2::zeros((full.x.ncols(), g));
    let mut used: Vec<usize> = choice.clone();
    used.sort_unstable();
    used.dedup();
    for a in used {
        let wa = path.weights(cfg.alpha_grid[a]);
        for t in (0..g).filter(|&t| choice[t] == a) {
            w.column_mut(t).assign(&wa.column(t));
        }
    }

    observer(Phase::Scoring);
    let held = &runs[holdout];
    let xh = full.scaler.apply_rows(delay_features(held.features.view(), &lags)?.view());
    let pred = xh.dot(&w) + &full.y_mean;
    let yh = held.targets();
    let mut r = Vec::with_capacity(g);
    let mut r2 = Vec::with_capacity(g);
    for t in 0..g {
        let (rt, r2t) = r2_and_pearson(pred.column(t), yh.column(t))
            .map_err(|e| Error::invalid(format!("run {}, target {t}: {e}", held.run_id)))?;
        r.push(rt);
        r2.push(r2t);
    }
    Ok(EncodingResult {
        holdout_run: held.run_id.clone(),
        r,
        r2,
        alpha: choice.iter().map(|&a| cfg.alpha_grid[a]).collect(),
        lags,
    })
}

pub fn loro_cv(runs: &[RunSeries], holdout: usize, cfg: &EncodingConfig) -> Result<EncodingResult> {
    loro_cv_observed(runs, holdout, cfg, &mut |_| {})
}

/// First index of the maximum.
fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Canonical double-gamma haemodynamic response parameters (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrfParams {
    pub peak: f64,
    pub undershoot: f64,
    pub peak_fwhm: f64,
    pub undershoot_fwhm: f64,
    pub ratio: f64,
    pub length_s: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        HrfParams { peak: 5.4, undershoot: 10.8, peak_fwhm: 5.2, undershoot_fwhm: 7.35, ratio: 0.35, length_s: 32.0 }
    }
}

impl HrfParams {
    fn gamma_term(t: f64, d: f64, w: f64) -> f64 {
        let ln2x8 = 8.0 * std::f64::consts::LN_2;
        let a = ln2x8 * (d / w).powi(2);
        let b = w * w / (ln2x8 * d);
        (t / d).powf(a) * (-(t - d) / b).exp()
    }

    pub fn at(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        Self::gamma_term(t, self.peak, self.peak_fwhm) - self.ratio * Self::gamma_term(t, self.undershoot, self.undershoot_fwhm)
    }

    /// Response sampled every `tr_s` seconds from 0 to `length_s`.
    pub fn sampled(&self, tr_s: f64) -> Vec<f64> {
        let n = (self.length_s / tr_s).floor() as usize + 1;
        (0..n).map(|k| self.at(k as f64 * tr_s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelMode {
    Shift(usize),
    Hrf(HrfParams),
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "hrf" {
            return Ok(LabelMode::Hrf(HrfParams::default()));
        }
        let k = s.strip_prefix("shift:").or_else(|| s.strip_prefix("shift")).unwrap_or(s);
        k.parse()
            .map(LabelMode::Shift)
            .map_err(|_| Error::invalid(format!("label mode {s:?}: expected shift:K or hrf")))
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelMode::Shift(k) => write!(f, "shift:{k}"),
            LabelMode::Hrf(_) => f.write_str("hrf"),
        }
    }
}

/// A TR is 1 when merged segments cover more than half of it.
fn coverage_labels(segments: &[(f64, f64)], n_trs: usize, tr_s: f64) -> Result<Vec<u8>> {
    let end = n_trs as f64 * tr_s;
    let mut segs: Vec<(f64, f64)> = segments.to_vec();
    for &(a, b) in &segs {
        if !(a >= 0.0 && b >= a) {
            return Err(Error::invalid(format!("segment [{a}, {b}] is malformed")));
        }
        if b > end + 1e-9 {
            return Err(Error::invalid(format!("segment [{a}, {b}] runs past the end of the run ({end} s)")));
        }
    }
    segs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in segs {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    Ok((0..n_trs)
        .map(|t| {
            let (lo, hi) = (t as f64 * tr_s, (t + 1) as f64 * tr_s);
            let covered: f64 = merged.iter().map(|&(a, b)| (b.min(hi) - a.max(lo)).max(0.0)).sum();
            u8::from(covered > 0.5 * tr_s)
        })
        .collect())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Binary per-TR labels from speech segments (seconds from run start).
pub fn align_labels(segments: &[(f64, f64)], n_trs: usize, tr_s: f64, mode: LabelMode) -> Result<Vec<u8>> {
    if n_trs == 0 || !(tr_s > 0.0) {
        return Err(Error::invalid("label alignment needs a positive TR count and TR length"));
    }
    let base = coverage_labels(segments, n_trs, tr_s)?;
    match mode {
        LabelMode::Shift(k) => {
            let mut out = vec![0u8; n_trs];
            for t in k..n_trs {
                out[t] = base[t - k];
            }
            Ok(out)
        }
        LabelMode::Hrf(p) => {
            let h = p.sampled(tr_s);
            let conv: Vec<f64> = (0..n_trs)
                .map(|t| (0..=t.min(h.len() - 1)).map(|k| base[t - k] as f64 * h[k]).sum())
                .collect();
            let m = median(&conv);
            Ok(conv.iter().map(|&c| u8::from(c > m)).collect())
        }
    }
}

/// Balanced accuracy: mean recall of the classes present in `truth`.
pub fn balanced_accuracy(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    probe::uar(predicted, truth)
}

/// Linear max-margin classifier with class-balanced hinge loss, trained by
/// dual coordinate descent. The bias is learned as the weight of a constant
/// feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvc {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LinearSvc {
    pub fn fit(x: ArrayView2<f64>, labels: &[u8], c: f64, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} rows for {} labels", labels.len())));
        }
        if !(c > 0.0) {
            return Err(Error::invalid(format!("C = {c} must be positive")));
        }
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            return Err(Error::invalid("svm training needs both classes"));
        }
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let bound: Vec<f64> = labels
            .iter()
            .map(|&l| c * n as f64 / (2.0 * if l == 1 { pos } else { n - pos } as f64))
            .collect();
        let d = x.ncols();
        let q: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
        let mut w = Array1::<f64>::zeros(d + 1);
        let mut alpha = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            order.shuffle(&mut rng);
            let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
            for &i in &order {
                let xi = x.row(i);
                let g = y[i] * (w.slice(s![..d]).dot(&xi) + w[d]) - 1.0;
                let pg = if alpha[i] == 0.0 {
                    g.min(0.0)
                } else if alpha[i] == bound[i] {
                    g.max(0.0)
                } else {
                    g
                };
                pg_max = pg_max.max(pg);
                pg_min = pg_min.min(pg);
                if pg.abs() > 1e-12 {
                    let old = alpha[i];
                    alpha[i] = (old - g / q[i]).clamp(0.0, bound[i]);
                    let step = (alpha[i] - old) * y[i];
                    w.slice_mut(s![..d]).scaled_add(step, &xi);
                    w[d] += step;
                }
            }
            if pg_max - pg_min < 1e-4 {
                break;
            }
        }
        Ok(LinearSvc { weights: w.slice(s![..d]).to_owned(), bias: w[d] })
    }

    pub fn decision(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.bias
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u8> {
        self.decision(x).iter().map(|&v| u8::from(v > 0.0)).collect()
    }
}

/// A run of target-space features with per-TR binary labels.
#[derive(Debug, Clone)]
pub struct LabelRun {
    pub run_id: String,
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub holdout_run: String,
    pub c: f64,
    pub balanced_accuracy: f64,
}

fn fit_and_score(train: &[&LabelRun], test: &LabelRun, lags: &[usize], c: f64, seed: u64) -> Result<f64> {
    let parts: Vec<Array2<f64>> = train.iter().map(|r| delay_features(r.features.view(), lags)).collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    let x = stack(&views);
    let scaler = Standardizer::fit(x.view())?;
    let y: Vec<u8> = train.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let svc = LinearSvc::fit(scaler.apply_rows(x.view()).view(), &y, c, seed)?;
    let xt = scaler.apply_rows(delay_features(test.features.view(), lags)?.view());
    balanced_accuracy(&svc.predict(xt.view()), &test.labels)
}

/// Holds out one run, picks C by inner leave-one-run-out balanced accuracy
/// (ties to the smaller C), refits and scores the held-out run.
pub fn svc_decode(runs: &[LabelRun], holdout: usize, c_grid: &[f64], lags: &[usize], seed: u64) -> Result<DecodeResult> {
    if runs.len() < 3 {
        return Err(Error::invalid("leave-one-run-out decoding needs at least 3 runs"));
    }
    if holdout >= runs.len() || c_grid.is_empty() {
        return Err(Error::invalid("bad held-out run index or empty C grid"));
    }
    for r in runs {
        if r.labels.len() != r.features.nrows() {
            return Err(Error::Shape(format!("run {}: {} labels for {} TRs", r.run_id, r.labels.len(), r.features.nrows())));
        }
    }
    let train: Vec<&LabelRun> = runs.iter().enumerate().filter(|(i, _)| *i != holdout).map(|(_, r)| r).collect();
    let mut grid = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&c| {
            let mut total = 0.0;
            for v in 0..train.len() {
                let inner: Vec<&LabelRun> = train.iter().enumerate().filter(|(i, _)| *i != v).map(|(_, r)| *r).collect();
                total += fit_and_score(&inner, train[v], lags, c, seed)?;
            }
            Ok(total / train.len() as f64)
        })
        .collect::<Result<_>>()?;
    let best = argmax(ndarray::ArrayView1::from(&scores[..]));
    let c = grid[best];
    Ok(DecodeResult {
        holdout_run: runs[holdout].run_id.clone(),
        c,
        balanced_accuracy: fit_and_score(&train, &runs[holdout], lags, c, seed)?,
    })
}

/// Segments CSV: `start_s,end_s` with an optional `run_id` column.
pub fn read_segments(text: &str) -> Result<Vec<(Option<String>, f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        #[serde(default)]
        run_id: Option<String>,
        start_s: f64,
        end_s: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    rdr.deserialize::<Row>()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| Error::invalid(format!("segment row {}: {e}", i + 2)))?;
            Ok((r.run_id.filter(|s| !s.is_empty()), r.start_s, r.end_s))
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
    }

    /// Runs whose targets follow `Y = delay(X) W + noise`.
    pub(crate) fn planted_runs(n_runs: usize, trs: usize, d: usize, g: usize, noise: f64, null: bool, seed: u64) -> Vec<RunSeries> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gauss(4 * d, g, &mut rng);
        (0..n_runs)
            .map(|k| {
                let x = gauss(trs, d, &mut rng);
                let y = if null {
                    gauss(trs, g, &mut rng)
                } else {
                    delay_features(x.view(), &[1, 2, 3, 4]).unwrap().dot(&w) + gauss(trs, g, &mut rng) * noise
                };
                RunSeries::new(&format!("run{k}"), x, y, 2.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn delay_examples() {
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        assert_eq!(delay_features(x.view(), &[0]).unwrap(), x);
        assert_eq!(delay_features(x.view(), &[1]).unwrap(), array![[0.0, 0.0], [1.0, 10.0], [2.0, 20.0]]);
        let both = delay_features(x.view(), &[0, 1]).unwrap();
        assert_eq!(both.ncols(), 4);
        for t in 0..3 {
            for j in 0..2 {
                assert_eq!(both[[t, j]], x[[t, j]]);
                assert_eq!(both[[t, 2 + j]], if t >= 1 { x[[t - 1, j]] } else { 0.0 });
            }
        }
        let twice = delay_features(delay_features(x.view(), &[1]).unwrap().view(), &[1]).unwrap();
        assert_eq!(twice, delay_features(x.view(), &[2]).unwrap());
        assert!(delay_features(x.view(), &[3]).is_err());
        assert!(delay_features(x.view(), &[]).is_err());
    }

    #[test]
    fn ridge_examples() {
        let x = Array2::<f64>::eye(2);
        let y = array![[1.0], [0.0]];
        let w = ridge_fit(x.view(), y.view(), 1.0).unwrap();
        assert!((w[[0, 0]] - 0.5).abs() < 1e-15 && w[[1, 0]].abs() < 1e-15);
        let huge = ridge_fit(x.view(), y.view(), 1e12).unwrap();
        assert!(huge.iter().all(|v| v.abs() < 1e-11));
        assert!(ridge_fit(x.view(), y.view(), 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gauss(20, 5, &mut rng);
        let y = gauss(20, 3, &mut rng);
        let p = ridge_primal(x.view(), y.view(), 0.7).unwrap();
        let d = ridge_dual(x.view(), y.view(), 0.7).unwrap();
        let scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((&p - &d).iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn ridge_path_matches_direct_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, p) in [(30, 6), (6, 30)] {
            let x = gauss(n, p, &mut rng);
            let y = gauss(n, 4, &mut rng);
            let path = RidgePath::new(x.view(), y.view());
            for alpha in [0.1, 1.0, 50.0] {
                let direct = ridge_fit(x.view(), y.view(), alpha).unwrap();
                let diff = (&path.weights(alpha) - &direct).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff < 1e-8, "n={n} p={p} alpha={alpha} diff={diff}");
            }
        }
    }

    #[test]
    fn score_examples() {
        let t = array![1.0, 3.0, 2.0, 5.0];
        assert_eq!(r2_and_pearson(t.view(), t.view()).unwrap(), (1.0, 1.0));
        let mean = Array1::from_elem(4, 2.75);
        assert!(r2_and_pearson(mean.view(), t.view()).is_err()); // constant prediction has no r
        let p = array![1.5, 2.0, 2.5, 4.0];
        let (r, r2) = r2_and_pearson(p.view(), t.view()).unwrap();
        let ss_res: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
        let ss_tot: f64 = t.iter().map(|b| (b - 2.75f64).powi(2)).sum();
        assert!((r2 - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
        assert!((r - crate::stats::pearson_r(&p.to_vec(), &t.to_vec()).unwrap()).abs() < 1e-15);
        assert!(r2_and_pearson(p.view(), Array1::from_elem(4, 1.0).view()).is_err());
    }

    #[test]
    fn planted_model_is_recovered() {
        let runs = planted_runs(4, 120, 6, 10, 0.3, false, 1);
        let res = loro_cv(&runs, 3, &EncodingConfig::default()).unwrap();
        let mut r = res.r.clone();
        r.sort_by(f64::total_cmp);
        assert!(r[5] > 0.9, "{r:?}");
        assert_eq!(res.lags, vec![1, 2, 3, 4]);
        assert!(res.r2.iter().all(|&v| v <= 1.0));

        let single = EncodingConfig { alpha_grid: vec![3.0], ..EncodingConfig::default() };
        assert!(loro_cv(&runs, 0, &single).unwrap().alpha.iter().all(|&a| a == 3.0));
        assert!(loro_cv(&runs[..2], 0, &single).is_err());
    }

    #[test]
    fn held_out_targets_untouched_until_scoring() {
        let runs = planted_runs(4, 60, 4, 5, 0.5, false, 2);
        let mut seen = Vec::new();
        let cfg = EncodingConfig { lags_grid: vec![vec![1], vec![1, 2]], ..EncodingConfig::default() };
        loro_cv_observed(&runs, 1, &cfg, &mut |p| seen.push((p, runs[1].target_reads()))).unwrap();
        assert_eq!(seen, vec![(Phase::Selection, 0), (Phase::Refit, 0), (Phase::Scoring, 0)]);
        assert_eq!(runs[1].target_reads(), 1);
        assert!(runs[0].target_reads() > 0);
    }

    #[test]
    fn hrf_shape() {
        let h = HrfParams::default();
        let lobe = |t: f64| HrfParams::gamma_term(t, 5.4, 5.2);
        let peak = (0..3200).map(|k| k as f64 * 0.01).max_by(|a, b| lobe(*a).total_cmp(&lobe(*b))).unwrap();
        assert!((peak - 5.4).abs() < 0.011, "{peak}");
        assert_eq!(lobe(5.4), 1.0);
        assert!((h.at(5.4) - (1.0 - 0.35 * HrfParams::gamma_term(5.4, 10.8, 7.35))).abs() < 1e-12);
        assert!(h.at(15.0) < 0.0);
    }

    #[test]
    fn label_examples() {
        let seg = [(6.0, 12.0)];
        let base = align_labels(&seg, 10, 2.0, LabelMode::Shift(0)).unwrap();
        assert_eq!(base, vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 0]);
        let shifted = align_labels(&seg, 10, 2.0, LabelMode::Shift(2)).unwrap();
        assert_eq!(shifted, vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 0]);
        // exactly half a TR is not a majority
        assert_eq!(align_labels(&[(1.0, 2.0)], 2, 2.0, LabelMode::Shift(0)).unwrap(), vec![0, 0]);
        // overlapping pieces merge before coverage is measured
        assert_eq!(align_labels(&[(0.0, 0.8), (0.5, 1.2)], 1, 2.0, LabelMode::Shift(0)).unwrap(), vec![1]);
        assert!(align_labels(&[(18.0, 21.0)], 10, 2.0, LabelMode::Shift(0)).is_err());
    }

    #[test]
    fn hrf_labels_match_direct_convolution() {
        let n = 30;
        let tr = 2.0;
        let labels = align_labels(&[(10.0, 12.0)], n, tr, LabelMode::Hrf(HrfParams::default())).unwrap();
        let h = HrfParams::default();
        let signal: Vec<f64> = (0..n).map(|t| if t >= 5 && (t - 5) as f64 * tr <= 32.0 { h.at((t - 5) as f64 * tr) } else { 0.0 }).collect();
        let mut sorted = signal.clone();
        sorted.sort_by(f64::total_cmp);
        let med = 0.5 * (sorted[14] + sorted[15]);
        let expected: Vec<u8> = signal.iter().map(|&v| u8::from(v > med)).collect();
        assert_eq!(labels, expected);
        assert!(labels.iter().any(|&l| l == 1));
    }

    #[test]
    fn balanced_accuracy_examples() {
        let truth: Vec<u8> = (0..100).map(|i| u8::from(i < 90)).collect();
        assert_eq!(balanced_accuracy(&[1; 100], &truth).unwrap(), 0.5);
        let pred: Vec<u8> = truth.iter().map(|&t| 1 - t).collect();
        assert_eq!(balanced_accuracy(&pred, &truth).unwrap(), 0.0);
    }

    pub(crate) fn label_runs(n_runs: usize, trs: usize, g: usize, margin: f64, shuffle: bool, seed: u64) -> Vec<LabelRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir: Vec<f64> = (0..g).map(|_| StandardNormal.sample(&mut rng)).collect();
        (0..n_runs)
            .map(|k| {
                let mut labels: Vec<u8> = (0..trs).map(|_| u8::from(rng.random_bool(0.4))).collect();
                let mut x = gauss(trs, g, &mut rng);
                for (t, &l) in labels.iter().enumerate() {
                    let sign = if l == 1 { margin } else { -margin };
                    for j in 0..g {
                        x[[t, j]] += sign * dir[j];
                    }
                }
                if shuffle {
                    labels.shuffle(&mut rng);
                }
                LabelRun { run_id: format!("run{k}"), features: x, labels }
            })
            .collect()
    }

    #[test]
    fn svc_separates_and_shuffles_to_chance() {
        let runs = label_runs(4, 80, 10, 1.5, false, 3);
        let res = svc_decode(&runs, 3, &[0.01, 0.1, 1.0], &[0], 0).unwrap();
        assert!(res.balanced_accuracy >= 0.95, "{res:?}");
        let null = label_runs(4, 200, 10, 1.5, true, 4);
        let res = svc_decode(&null, 0, &[0.1], &[0], 0).unwrap();
        assert!((res.balanced_accuracy - 0.5).abs() <= 0.1, "{res:?}");
    }

    #[test]
    fn svc_rejects_single_class() {
        let x = Array2::zeros((4, 2));
        assert!(LinearSvc::fit(x.view(), &[1, 1, 1, 1], 1.0, 0).is_err());
    }

    #[test]
    fn label_mode_text() {
        assert_eq!("shift:2".parse::<LabelMode>().unwrap(), LabelMode::Shift(2));
        assert!(matches!("hrf".parse::<LabelMode>().unwrap(), LabelMode::Hrf(_)));
        assert!("gauss".parse::<LabelMode>().is_err());
    }
}
