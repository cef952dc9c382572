//! Linear centered kernel alignment (CKA) between representations, plus
//! neighbourhood (KNN) and distance-rank (CPD) preservation scores for
//! low-dimensional embeddings.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Standardizer;
use crate::error::{Error, Result};
use crate::stats;

/// Above this many samples `cka` switches to the tiled path.
pub const DEFAULT_TILE_THRESHOLD: usize = 4096;
pub const DEFAULT_TILE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub kind: KernelKind,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

pub fn linear_kernel(x: ArrayView2<f64>) -> Result<KernelMatrix> {
    if x.nrows() < 2 {
        return Err(Error::invalid("a kernel needs at least 2 samples"));
    }
    Ok(KernelMatrix {
        values: x.dot(&x.t()),
        kind: KernelKind::Linear,
    })
}

/// `tr(K H L H) / (n-1)^2` with `H = I - 11ᵀ/n`, evaluated without forming `H`:
/// `HKH` has entries `K_ij - r_i - c_j + g` for row means `r`, column means `c`
/// and grand mean `g`.
pub fn hsic0(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    let n = k.n();
    if n < 2 || k.values.ncols() != n {
        return Err(Error::invalid("kernels must be square with n >= 2"));
    }
    if l.values.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "kernel sizes {n} and {} differ",
            l.n()
        )));
    }
    let row = k.values.mean_axis(Axis(1)).unwrap();
    let col = k.values.mean_axis(Axis(0)).unwrap();
    let grand = row.mean().unwrap();
    let total: f64 = k
        .values
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(l.values.axis_iter(Axis(0)))
        .enumerate()
        .map(|(i, (krow, lrow))| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += (krow[j] - row[i] - col[j] + grand) * lrow[j];
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let d = (n - 1) as f64;
    Ok(total / (d * d))
}

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "representations have {} and {} samples",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("cka needs at least 2 samples"));
    }
    Ok(())
}

fn normalise(xy: f64, xx: f64, yy: f64) -> Result<f64> {
    if xx <= 0.0 || yy <= 0.0 {
        return Err(Error::Degenerate("representation (zero centered norm)".into()));
    }
    Ok((xy / (xx.sqrt() * yy.sqrt())).clamp(0.0, 1.0))
}

/// CKA through full kernel matrices.
pub fn cka_dense(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    let k = linear_kernel(x)?;
    let l = linear_kernel(y)?;
    normalise(hsic0(&k, &l)?, hsic0(&k, &k)?, hsic0(&l, &l)?)
}

/// CKA accumulated over `tile × tile` blocks of the centered kernels, so no
/// n×n matrix is ever allocated. Blocks are reduced in a fixed order, which
/// makes the result reproducible for a given tile size.
pub fn cka_tiled(x: ArrayView2<f64>, y: ArrayView2<f64>, tile: usize) -> Result<f64> {
    check_pair(x, y)?;
    let tile = tile.max(1);
    // centering the features gives HKH = (HX)(HX)ᵀ for the linear kernel
    let xc = &x - &x.mean_axis(Axis(0)).unwrap();
    let yc = &y - &y.mean_axis(Axis(0)).unwrap();
    let n = x.nrows();
    let blocks: Vec<usize> = (0..n).step_by(tile).collect();

    let partial: Vec<[f64; 3]> = blocks
        .par_iter()
        .map(|&i0| {
            let i1 = (i0 + tile).min(n);
            let xi = xc.slice(s![i0..i1, ..]);
            let yi = yc.slice(s![i0..i1, ..]);
            let mut acc = [0.0; 3];
            for &j0 in blocks.iter().filter(|&&j0| j0 >= i0) {
                let j1 = (j0 + tile).min(n);
                let kt = xi.dot(&xc.slice(s![j0..j1, ..]).t());
                let lt = yi.dot(&yc.slice(s![j0..j1, ..]).t());
                let w = if j0 == i0 { 1.0 } else { 2.0 };
                let (mut kl, mut kk, mut ll) = (0.0, 0.0, 0.0);
                ndarray::Zip::from(&kt).and(&lt).for_each(|&a, &b| {
                    kl += a * b;
                    kk += a * a;
                    ll += b * b;
                });
                acc[0] += w * kl;
                acc[1] += w * kk;
                acc[2] += w * ll;
            }
            acc
        })
        .collect();
    let mut tot = [0.0; 3];
    for p in &partial {
        for k in 0..3 {
            tot[k] += p[k];
        }
    }
    normalise(tot[0], tot[1], tot[2])
}

/// Linear CKA, dense below `DEFAULT_TILE_THRESHOLD` samples and tiled above.
pub fn cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() > DEFAULT_TILE_THRESHOLD {
        cka_tiled(x, y, DEFAULT_TILE)
    } else {
        cka_dense(x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaTable {
    pub tags: Vec<String>,
    pub values: Array2<f64>,
}

/// A representation: model tag, ordered sample ids and one row per sample.
pub struct Representation<'a> {
    pub tag: String,
    pub ids: &'a [String],
    pub features: ArrayView2<'a, f64>,
}

/// Pairwise CKA between standardized representations of the same ordered samples.
pub fn cka_table(models: &[Representation<'_>]) -> Result<CkaTable> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("no models given"))?;
    for m in models {
        if m.ids != first.ids {
            return Err(Error::invalid(format!(
                "model {:?} lists samples in a different order than {:?}",
                m.tag, first.tag
            )));
        }
        if m.features.nrows() != m.ids.len() {
            return Err(Error::Shape(format!("model {:?} has {} rows for {} ids", m.tag, m.features.nrows(), m.ids.len())));
        }
    }
    let standardized: Vec<Array2<f64>> = models
        .iter()
        .map(|m| Ok(Standardizer::fit(m.features)?.apply_rows(m.features)))
        .collect::<Result<_>>()?;
    let k = models.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| cka(standardized[i].view(), standardized[j].view()))
        .collect::<Result<_>>()?;
    let mut values = Array2::eye(k);
    for (&(i, j), &v) in pairs.iter().zip(&scores) {
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    Ok(CkaTable {
        tags: models.iter().map(|m| m.tag.clone()).collect(),
        values,
    })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest neighbours of every row, self excluded, ties by index.
fn knn_sets(x: ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(x.row(i), x.row(j)), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut nn: Vec<usize> = d[..k].iter().map(|p| p.1).collect();
            nn.sort_unstable();
            nn
        })
        .collect()
}

/// Mean fraction of each point's `k` nearest neighbours (euclidean) that survive the embedding.
pub fn knn_preservation(high: ArrayView2<f64>, low: ArrayView2<f64>, k: usize) -> Result<f64> {
    let n = high.nrows();
    if low.nrows() != n {
        return Err(Error::Shape(format!("{} vs {} points", n, low.nrows())));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must lie in [1, n) with n = {n}")));
    }
    let a = knn_sets(high, k);
    let b = knn_sets(low, k);
    let total: usize = a
        .iter()
        .zip(&b)
        .map(|(p, q)| p.iter().filter(|i| q.binary_search(i).is_ok()).count())
        .sum();
    Ok(total as f64 / (n * k) as f64)
}

fn pairwise_distances(x: ArrayView2<f64>, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            out.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    out
}

/// Spearman correlation between pairwise distances before and after embedding,
/// over `sample_size` points drawn without replacement (all points if fewer).
pub fn cpd(high: ArrayView2<f64>, low: ArrayView2<f64>, sample_size: usize, seed: u64) -> Result<f64> {
    let n = high.nrows();
    if low.nrows() != n {
        return Err(Error::Shape(format!("{} vs {} points", n, low.nrows())));
    }
    if n < 3 {
        return Err(Error::invalid("cpd needs at least 3 points"));
    }
    let idx: Vec<usize> = if n <= sample_size {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, n, sample_size).into_vec();
        v.sort_unstable();
        v
    };
    stats::spearman_rho(&pairwise_distances(high, &idx), &pairwise_distances(low, &idx))
}

/// Column means, exposed for callers that centre features themselves.
pub fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap()
}
