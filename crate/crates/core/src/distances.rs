//! Pairwise distances and correlations between utterance embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{pool_frames, Manifest};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
    Hausdorff,
    Spearman,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Euclidean, Metric::Cosine, Metric::Hausdorff, Metric::Spearman];

    /// Spearman is a similarity: larger means closer.
    pub fn is_similarity(self) -> bool {
        self == Metric::Spearman
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
            Metric::Hausdorff => "hausdorff",
            Metric::Spearman => "spearman",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn same_len(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    Ok(())
}

pub fn euclidean(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `1 - cos(x, y)`, so identical directions score 0 and opposite ones 2.
pub fn cosine_distance(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    same_len(x, y)?;
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine distance of a zero-norm vector"));
    }
    Ok((1.0 - x.dot(&y) / (nx * ny)).clamp(0.0, 2.0))
}

/// Directed Hausdorff distance squared: max over `a` of min over `b`.
fn directed_sq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for ra in a.rows() {
        let mut best = f64::INFINITY;
        for rb in b.rows() {
            let mut d = 0.0;
            for (p, q) in ra.iter().zip(rb) {
                d += (p - q) * (p - q);
            }
            if d < best {
                best = d;
                // cannot raise the running maximum any more
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between two frame sets (rows are frames).
pub fn hausdorff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("hausdorff distance of an empty frame set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("frame dimensions {} and {}", a.ncols(), b.ncols())));
    }
    Ok(directed_sq(a, b).max(directed_sq(b, a)).sqrt())
}

pub fn spearman_corr(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    same_len(x, y)?;
    if x.len() < 3 {
        return Err(Error::invalid("spearman correlation needs at least 3 values"));
    }
    stats::spearman_rho(&x.to_vec(), &y.to_vec())
}

/// What the entities being compared look like.
#[derive(Clone, Copy)]
pub enum Representation<'a> {
    /// One pooled vector per row.
    Pooled(ArrayView2<'a, f64>),
    /// One frame matrix per entity.
    Frames(&'a [Array2<f64>]),
}

impl Representation<'_> {
    fn len(&self) -> usize {
        match self {
            Representation::Pooled(x) => x.nrows(),
            Representation::Frames(f) => f.len(),
        }
    }
}

/// Pooled vectors for the vector metrics; frame sets (or single-row sets
/// of pooled vectors) for Hausdorff.
struct Prepared<'a> {
    borrowed: Option<ArrayView2<'a, f64>>,
    owned: Option<Array2<f64>>,
    frames: Option<&'a [Array2<f64>]>,
}

impl<'a> Prepared<'a> {
    fn new(rep: Representation<'a>, metric: Metric) -> Result<Self> {
        Ok(match rep {
            Representation::Pooled(x) => Prepared { borrowed: Some(x), owned: None, frames: None },
            Representation::Frames(f) => {
                let owned = if metric == Metric::Hausdorff {
                    None
                } else {
                    let rows: Vec<_> = f.iter().map(|m| pool_frames(m.view())).collect();
                    Some(crate::corpus::stack_pooled(&rows)?)
                };
                Prepared { borrowed: None, owned, frames: Some(f) }
            }
        })
    }

    fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        match (&self.owned, &self.borrowed) {
            (Some(o), _) => o.row(i),
            (None, Some(b)) => b.row(i),
            (None, None) => unreachable!("frames only prepared for hausdorff"),
        }
    }

    fn value(&self, metric: Metric, i: usize, j: usize) -> Result<f64> {
        match metric {
            Metric::Euclidean => euclidean(self.row(i), self.row(j)),
            Metric::Cosine => cosine_distance(self.row(i), self.row(j)),
            Metric::Spearman => spearman_corr(self.row(i), self.row(j)),
            Metric::Hausdorff => match (self.frames, self.borrowed) {
                (Some(f), _) => hausdorff(f[i].view(), f[j].view()),
                (None, Some(v)) => {
                    let (a, b) = (v.row(i), v.row(j));
                    hausdorff(a.insert_axis(ndarray::Axis(0)), b.insert_axis(ndarray::Axis(0)))
                }
                (None, None) => unreachable!(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub values: Array2<f64>,
    pub metric: Metric,
}

impl DistanceMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == a)?;
        let j = self.ids.iter().position(|x| x == b)?;
        Some(self.values[[i, j]])
    }

    /// Upper-triangle cells `(id_a, id_b, value)`, row-major.
    pub fn upper(&self) -> Vec<(&str, &str, f64)> {
        let n = self.ids.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push((self.ids[i].as_str(), self.ids[j].as_str(), self.values[[i, j]]));
            }
        }
        out
    }
}

/// Full symmetric matrix of `metric` over all entities, rows filled in parallel.
pub fn pairwise_matrix(ids: &[String], rep: Representation<'_>, metric: Metric) -> Result<DistanceMatrix> {
    let n = rep.len();
    if ids.len() != n {
        return Err(Error::Shape(format!("{} ids for {} entities", ids.len(), n)));
    }
    if n < 2 {
        return Err(Error::invalid("a distance matrix needs at least 2 entities"));
    }
    let prep = Prepared::new(rep, metric)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    prep.value(metric, i, j).map_err(|e| {
                        Error::invalid(format!("{metric} between {} and {}: {e}", ids[i], ids[j]))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let diag = if metric.is_similarity() { 1.0 } else { 0.0 };
    let mut values = Array2::from_elem((n, n), diag);
    for (i, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix { ids: ids.to_vec(), values, metric })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub utt_a: String,
    pub utt_b: String,
    pub same_speaker: bool,
    pub metrics: BTreeMap<Metric, f64>,
    pub z: BTreeMap<Metric, f64>,
    pub score: Option<f64>,
}

impl PairRecord {
    pub fn new(utt_a: &str, utt_b: &str, same_speaker: bool) -> Self {
        PairRecord {
            utt_a: utt_a.to_string(),
            utt_b: utt_b.to_string(),
            same_speaker,
            metrics: BTreeMap::new(),
            z: BTreeMap::new(),
            score: None,
        }
    }

    /// Order-independent identity of the pair.
    pub fn key(&self) -> (String, String) {
        pair_key(&self.utt_a, &self.utt_b)
    }
}

pub fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// One record per unordered utterance pair with the requested metrics filled in.
pub fn pair_records(
    manifest: &Manifest,
    ids: &[String],
    pooled: ArrayView2<f64>,
    frames: Option<&[Array2<f64>]>,
    metrics: &[Metric],
) -> Result<Vec<PairRecord>> {
    let speaker = |id: &str| {
        manifest
            .get(id)
            .map(|u| u.speaker_id.clone())
            .ok_or_else(|| Error::invalid(format!("utterance {id:?} not in manifest")))
    };
    let speakers: Vec<String> = ids.iter().map(|id| speaker(id)).collect::<Result<_>>()?;
    let mut mats = Vec::new();
    for &m in metrics {
        let rep = match (m, frames) {
            (Metric::Hausdorff, Some(f)) => Representation::Frames(f),
            _ => Representation::Pooled(pooled),
        };
        mats.push(pairwise_matrix(ids, rep, m)?);
    }
    let n = ids.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut r = PairRecord::new(&ids[i], &ids[j], speakers[i] == speakers[j]);
            for mat in &mats {
                r.metrics.insert(mat.metric, mat.values[[i, j]]);
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean of `metric` over utterance pairs grouped by speaker pair. Within-speaker
/// cells with no pair (single-utterance speakers) are NaN.
pub fn speaker_aggregate(records: &[PairRecord], manifest: &Manifest, metric: Metric) -> Result<DistanceMatrix> {
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    let mut speakers = std::collections::BTreeSet::new();
    for r in records {
        if r.utt_a == r.utt_b {
            continue;
        }
        let sa = &manifest
            .get(&r.utt_a)
            .ok_or_else(|| Error::invalid(format!("utterance {:?} not in manifest", r.utt_a)))?
            .speaker_id;
        let sb = &manifest
            .get(&r.utt_b)
            .ok_or_else(|| Error::invalid(format!("utterance {:?} not in manifest", r.utt_b)))?
            .speaker_id;
        let v = *r
            .metrics
            .get(&metric)
            .ok_or_else(|| Error::invalid(format!("pair {}/{} lacks {metric}", r.utt_a, r.utt_b)))?;
        speakers.insert(sa.clone());
        speakers.insert(sb.clone());
        let e = sums.entry(pair_key(sa, sb)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let ids: Vec<String> = speakers.into_iter().collect();
    let n = ids.len();
    let mut values = Array2::from_elem((n, n), f64::NAN);
    for i in 0..n {
        for j in i..n {
            if let Some(&(s, c)) = sums.get(&pair_key(&ids[i], &ids[j])) {
                values[[i, j]] = s / c as f64;
                values[[j, i]] = s / c as f64;
            }
        }
    }
    Ok(DistanceMatrix { ids, values, metric })
}

/// Population z-scores of `metric` over all records.
pub fn standardize_pairs(records: &mut [PairRecord], metric: Metric) -> Result<()> {
    if records.len() < 2 {
        return Err(Error::invalid("standardization needs at least 2 records"));
    }
    let values: Vec<f64> = records
        .iter()
        .map(|r| {
            r.metrics
                .get(&metric)
                .copied()
                .ok_or_else(|| Error::invalid(format!("pair {}/{} lacks {metric}", r.utt_a, r.utt_b)))
        })
        .collect::<Result<_>>()?;
    let m = stats::mean(&values);
    let s = stats::std_pop(&values);
    if s == 0.0 || !s.is_finite() {
        return Err(Error::Degenerate(format!("{metric} population (zero variance)")));
    }
    for (r, v) in records.iter_mut().zip(values) {
        r.z.insert(metric, (v - m) / s);
    }
    Ok(())
}
