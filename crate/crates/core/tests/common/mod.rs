//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use voiceprobe::corpus::{Manifest, PooledSet, Sex, UtteranceMeta};
use voiceprobe::npy;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))
}

pub fn meta(id: &str, speaker: &str, sex: Sex, sentence: &str) -> UtteranceMeta {
    UtteranceMeta {
        utterance_id: id.into(),
        speaker_id: speaker.into(),
        sex,
        dataset: "fixture".into(),
        sentence_id: sentence.into(),
        conditions: BTreeMap::new(),
        duration_s: 2.0,
        path: format!("{id}.npy"),
    }
}

/// Speakers `spk00..`, alternating F/M, each reading distinct sentences.
pub struct Blobs {
    pub manifest: Manifest,
    pub centers: Array2<f64>,
    /// Pooled rows in manifest order.
    pub pooled: Array2<f64>,
}

/// Gaussian clusters: speaker centers ~ N(0, 1) in `dim` dimensions, utterances at `spread` around them.
pub fn blobs(speakers: usize, per: usize, dim: usize, spread: f64, seed: u64) -> Blobs {
    let mut r = rng(seed);
    let centers = gauss(speakers, dim, &mut r);
    let mut utts = Vec::new();
    let mut pooled = Array2::zeros((speakers * per, dim));
    for s in 0..speakers {
        let sex = if s % 2 == 0 { Sex::F } else { Sex::M };
        for u in 0..per {
            let id = format!("spk{s:02}_u{u:02}");
            let mut m = meta(&id, &format!("spk{s:02}"), sex, &format!("t{u}"));
            m.duration_s = 1.0 + ((s * 7 + u * 3) % 11) as f64 * 0.1;
            utts.push(m);
            let row = s * per + u;
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut r);
                pooled[[row, j]] = centers[[s, j]] + spread * e;
            }
        }
    }
    Blobs { manifest: Manifest::new(utts).unwrap(), centers, pooled }
}

impl Blobs {
    pub fn pooled_set(&self) -> PooledSet {
        let ids = self.manifest.iter().map(|u| u.utterance_id.clone()).collect();
        PooledSet::new(ids, self.pooled.clone()).unwrap()
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.iter().map(|u| u.utterance_id.clone()).collect()
    }

    pub fn speakers_of(&self, ids: &[String]) -> Vec<String> {
        ids.iter().map(|id| self.manifest.get(id).unwrap().speaker_id.clone()).collect()
    }
}

/// Writes each utterance as a small frame matrix whose mean is its pooled row.
pub fn write_embeddings(dir: &Path, manifest: &Manifest, pooled: &Array2<f64>, frames: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = rng(seed);
    let jitter = Normal::new(0.0, 0.05).unwrap();
    for (i, u) in manifest.iter().enumerate() {
        let mut m = Array2::zeros((frames, pooled.ncols()));
        for j in 0..pooled.ncols() {
            let offsets: Vec<f64> = (0..frames).map(|_| jitter.sample(&mut r)).collect();
            let mean = offsets.iter().sum::<f64>() / frames as f64;
            for f in 0..frames {
                m[[f, j]] = pooled[[i, j]] + offsets[f] - mean;
            }
        }
        npy::save_matrix(&dir.join(&u.path), m.view()).unwrap();
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) {
    std::fs::write(path, manifest.to_csv()).unwrap();
}

/// Targets `Y = delay(X, 1..=4) W + noise` (or pure noise) for `n_runs` runs.
pub struct EncodingFixture {
    pub features: Vec<Array2<f64>>,
    pub targets: Vec<Array2<f64>>,
}

pub fn encoding_fixture(n_runs: usize, trs: usize, d: usize, g: usize, noise: f64, null: bool, seed: u64) -> EncodingFixture {
    let mut r = rng(seed);
    let w = gauss(4 * d, g, &mut r);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n_runs {
        let x = gauss(trs, d, &mut r);
        let y = if null {
            gauss(trs, g, &mut r)
        } else {
            voiceprobe::encoding::delay_features(x.view(), &[1, 2, 3, 4]).unwrap().dot(&w) + gauss(trs, g, &mut r) * noise
        };
        features.push(x);
        targets.push(y);
    }
    EncodingFixture { features, targets }
}

/// Writes a runs CSV (`run_id,features_path,targets_path,tr_s`) plus the matrices.
pub fn write_runs(dir: &Path, features: &[Array2<f64>], targets: Option<&[Array2<f64>]>, tr_s: f64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut csv = String::from("run_id,features_path,targets_path,tr_s\n");
    for (k, x) in features.iter().enumerate() {
        let f = format!("run{k}_x.npy");
        npy::save_matrix(&dir.join(&f), x.view()).unwrap();
        let t = match targets {
            Some(ts) => {
                let t = format!("run{k}_y.npy");
                npy::save_matrix(&dir.join(&t), ts[k].view()).unwrap();
                t
            }
            None => String::new(),
        };
        csv.push_str(&format!("run{k},{f},{t},{tr_s}\n"));
    }
    let path = dir.join("runs.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

/// Time series whose mean shifts along a fixed direction while a voice segment is on.
pub fn voice_fixture(n_runs: usize, trs: usize, g: usize, tr_s: f64, margin: f64, seed: u64) -> (Vec<Array2<f64>>, Vec<(usize, f64, f64)>) {
    let mut r = rng(seed);
    let dir: Array1<f64> = (0..g).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut runs = Vec::new();
    let mut segments = Vec::new();
    for k in 0..n_runs {
        let mut on = vec![false; trs];
        let mut t = 2 + k;
        while t + 6 < trs {
            for s in t..t + 4 {
                on[s] = true;
            }
            segments.push((k, t as f64 * tr_s, (t + 4) as f64 * tr_s));
            t += 9 + (k + t) % 3;
        }
        let mut x = gauss(trs, g, &mut r);
        for (i, &v) in on.iter().enumerate() {
            let sign = if v { margin } else { -margin };
            for j in 0..g {
                x[[i, j]] += sign * dir[j];
            }
        }
        runs.push(x);
    }
    (runs, segments)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voiceprobe")
}

pub struct Outcome {
    pub code: i32,
    pub stderr: String,
}

pub fn run_cli(args: &[&str]) -> Outcome {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    Outcome { code: out.status.code().unwrap_or(-1), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

/// Header comment value `# key: value` of an output file.
pub fn header_value(text: &str, key: &str) -> Option<String> {
    let prefix = format!("# {key}: ");
    text.lines().find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
}

/// First non-comment line.
pub fn column_header(text: &str) -> String {
    text.lines().find(|l| !l.starts_with('#')).unwrap_or("").to_string()
}
