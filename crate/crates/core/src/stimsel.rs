//! Picking same/different trial pairs from the ambiguous middle of the
//! distance distributions.
//!
//! Stages are plain functions over `PairRecord` lists and compose into
//! [`select_stimuli`]:
//! filter → standardize → per-metric overlap → intersect → score → extremes → noise order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, UtteranceMeta};
use crate::distances::{pair_key, standardize_pairs, Metric, PairRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Truth {
    Same,
    Different,
}

impl FromStr for Truth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" | "s" => Ok(Truth::Same),
            "different" | "diff" | "d" => Ok(Truth::Different),
            _ => Err(Error::invalid(format!("unknown truth value {s:?}"))),
        }
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Same => "Same",
            Truth::Different => "Different",
        })
    }
}

/// Which stimulus of a trial carries the background noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseOrder {
    /// clean first, noisy second
    CleanNoisy,
    /// noisy first, clean second
    NoisyClean,
}

impl FromStr for NoiseOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C-N" | "CN" => Ok(NoiseOrder::CleanNoisy),
            "N-C" | "NC" => Ok(NoiseOrder::NoisyClean),
            _ => Err(Error::invalid(format!("unknown noise order {s:?}"))),
        }
    }
}

impl fmt::Display for NoiseOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseOrder::CleanNoisy => "C-N",
            NoiseOrder::NoisyClean => "N-C",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: usize,
    pub stim_1: String,
    pub stim_2: String,
    pub truth: Truth,
    pub noise_order: NoiseOrder,
    pub score: f64,
}

fn meta<'a>(manifest: &'a Manifest, id: &str) -> Result<&'a UtteranceMeta> {
    manifest
        .get(id)
        .ok_or_else(|| Error::invalid(format!("utterance {id:?} has no manifest entry")))
}

fn sentence(u: &UtteranceMeta) -> Result<&str> {
    if u.sentence_id.is_empty() {
        return Err(Error::invalid(format!("utterance {:?} has no sentence_id", u.utterance_id)));
    }
    Ok(&u.sentence_id)
}

/// Drops identical files, same-speaker repeats of a sentence, cross-sex
/// pairs and different speakers reading the same sentence. The
/// `same_speaker` flag is refreshed from the manifest.
pub fn filter_pairs(records: Vec<PairRecord>, manifest: &Manifest) -> Result<Vec<PairRecord>> {
    let mut kept = Vec::with_capacity(records.len());
    for mut r in records {
        let a = meta(manifest, &r.utt_a)?;
        let b = meta(manifest, &r.utt_b)?;
        let same_sentence = sentence(a)? == sentence(b)?;
        if r.utt_a == r.utt_b || a.path == b.path {
            continue;
        }
        r.same_speaker = a.speaker_id == b.speaker_id;
        let keep = if r.same_speaker { !same_sentence } else { a.sex == b.sex && !same_sentence };
        if keep {
            kept.push(r);
        }
    }
    Ok(kept)
}

fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx]
}

/// Records whose standardized `metric` falls inside the closed interval where
/// the same- and different-speaker populations overlap.
///
/// For distances the interval is [min different, max same]; for the
/// similarity metric it is [min same, max different]. `trim` moves each
/// endpoint inward to the `trim` / `1 - trim` quantile (0 keeps the full
/// envelope).
pub fn overlap_filter_trimmed(records: &[PairRecord], metric: Metric, trim: f64) -> Result<Vec<PairRecord>> {
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::invalid(format!("trim {trim} must lie in [0, 0.5)")));
    }
    let z = |r: &PairRecord| {
        r.z.get(&metric)
            .copied()
            .ok_or_else(|| Error::invalid(format!("pair {}/{} has no standardized {metric}", r.utt_a, r.utt_b)))
    };
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for r in records {
        if r.same_speaker { same.push(z(r)?) } else { diff.push(z(r)?) }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::invalid(format!("{metric}: overlap needs both same and different pairs")));
    }
    same.sort_by(f64::total_cmp);
    diff.sort_by(f64::total_cmp);
    let (low_pop, high_pop) = if metric.is_similarity() { (&same, &diff) } else { (&diff, &same) };
    let lo = lower_quantile(low_pop, trim);
    let hi = lower_quantile(high_pop, 1.0 - trim);
    if lo > hi {
        log::warn!("{metric}: same and different populations do not overlap");
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for r in records {
        let v = z(r)?;
        if v >= lo && v <= hi {
            out.push(r.clone());
        }
    }
    Ok(out)
}

pub fn overlap_filter(records: &[PairRecord], metric: Metric) -> Result<Vec<PairRecord>> {
    overlap_filter_trimmed(records, metric, 0.0)
}

/// Pairs present in every set (unordered identity), in the order of the first set.
pub fn intersect_common(sets: &[Vec<PairRecord>]) -> Vec<PairRecord> {
    let Some((first, rest)) = sets.split_first() else {
        return Vec::new();
    };
    let keys: Vec<BTreeSet<(String, String)>> =
        rest.iter().map(|s| s.iter().map(PairRecord::key).collect()).collect();
    first
        .iter()
        .filter(|r| {
            let k = r.key();
            keys.iter().all(|set| set.contains(&k))
        })
        .cloned()
        .collect()
}

/// (same, different) counts.
pub fn truth_counts(records: &[PairRecord]) -> (usize, usize) {
    let same = records.iter().filter(|r| r.same_speaker).count();
    (same, records.len() - same)
}

/// Mean of the three distance values and one minus the correlation; low means close.
pub fn score(record: &PairRecord, raw: bool) -> Result<f64> {
    let src = if raw { &record.metrics } else { &record.z };
    let get = |m: Metric| {
        src.get(&m).copied().ok_or_else(|| {
            Error::invalid(format!("pair {}/{} lacks {}{m}", record.utt_a, record.utt_b, if raw { "" } else { "standardized " }))
        })
    };
    Ok((get(Metric::Euclidean)? + get(Metric::Cosine)? + get(Metric::Hausdorff)? + (1.0 - get(Metric::Spearman)?)) / 4.0)
}

fn ranked<'a>(records: impl Iterator<Item = &'a PairRecord>, descending: bool) -> Result<Vec<&'a PairRecord>> {
    let mut v: Vec<(f64, &PairRecord)> = records
        .map(|r| {
            r.score
                .map(|s| (s, r))
                .ok_or_else(|| Error::invalid(format!("pair {}/{} is not scored", r.utt_a, r.utt_b)))
        })
        .collect::<Result<_>>()?;
    v.sort_by(|a, b| {
        let by_score = if descending { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
        by_score.then_with(|| (&a.1.utt_a, &a.1.utt_b).cmp(&(&b.1.utt_a, &b.1.utt_b)))
    });
    Ok(v.into_iter().map(|(_, r)| r).collect())
}

/// The `k` highest-scoring same pairs and the `k` lowest-scoring different
/// pairs. Excluded pairs (unordered ids) are skipped, so the next-ranked
/// pair takes their place.
pub fn select_extremes(
    records: &[PairRecord],
    k: usize,
    exclude: &BTreeSet<(String, String)>,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>)> {
    let pick = |same: bool| -> Result<Vec<PairRecord>> {
        let pool = ranked(records.iter().filter(|r| r.same_speaker == same), same)?;
        let chosen: Vec<PairRecord> =
            pool.into_iter().filter(|r| !exclude.contains(&r.key())).take(k).cloned().collect();
        if chosen.len() < k {
            return Err(Error::invalid(format!(
                "only {} {} pairs available, {k} requested",
                chosen.len(),
                if same { "same" } else { "different" }
            )));
        }
        Ok(chosen)
    };
    Ok((pick(true)?, pick(false)?))
}

/// Balanced noise orders within each truth condition, then a seeded trial order.
pub fn assign_noise_order(same: &[PairRecord], different: &[PairRecord], seed: u64) -> Result<Vec<TrialSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(same.len() + different.len());
    for (truth, picks) in [(Truth::Same, same), (Truth::Different, different)] {
        if picks.len() % 2 != 0 {
            return Err(Error::invalid(format!("{} {truth} pairs cannot split evenly between noise orders", picks.len())));
        }
        let mut idx: Vec<usize> = (0..picks.len()).collect();
        idx.shuffle(&mut rng);
        let mut order = vec![NoiseOrder::NoisyClean; picks.len()];
        for &i in &idx[..picks.len() / 2] {
            order[i] = NoiseOrder::CleanNoisy;
        }
        for (r, o) in picks.iter().zip(order) {
            trials.push(TrialSpec {
                trial_id: 0,
                stim_1: r.utt_a.clone(),
                stim_2: r.utt_b.clone(),
                truth,
                noise_order: o,
                score: r.score.unwrap_or(f64::NAN),
            });
        }
    }
    trials.shuffle(&mut rng);
    for (i, t) in trials.iter_mut().enumerate() {
        t.trial_id = i + 1;
    }
    Ok(trials)
}

/// Swaps the noisy stimulus of each trial for its noisy recording.
///
/// A noisy variant of `u` is a manifest entry with condition
/// `background=noisy` whose `source` condition names `u`, or failing that,
/// the noisy entry with the same speaker and sentence.
pub fn attach_noisy_variants(trials: &[TrialSpec], manifest: &Manifest) -> Result<Vec<TrialSpec>> {
    let noisy: Vec<&UtteranceMeta> = manifest
        .iter()
        .filter(|u| u.conditions.get("background").map(String::as_str) == Some("noisy"))
        .collect();
    let mut by_source: BTreeMap<&str, &str> = BTreeMap::new();
    let mut by_content: BTreeMap<(&str, &str), &str> = BTreeMap::new();
    for u in &noisy {
        if let Some(src) = u.conditions.get("source") {
            by_source.insert(src, &u.utterance_id);
        }
        by_content.entry((&u.speaker_id, &u.sentence_id)).or_insert(&u.utterance_id);
    }
    let variant = |id: &str| -> Result<String> {
        if let Some(v) = by_source.get(id) {
            return Ok(v.to_string());
        }
        let u = meta(manifest, id)?;
        by_content
            .get(&(u.speaker_id.as_str(), u.sentence_id.as_str()))
            .map(|v| v.to_string())
            .ok_or_else(|| Error::invalid(format!("no noisy variant for utterance {id:?}")))
    };
    trials
        .iter()
        .map(|t| {
            let mut t = t.clone();
            match t.noise_order {
                NoiseOrder::CleanNoisy => t.stim_2 = variant(&t.stim_2)?,
                NoiseOrder::NoisyClean => t.stim_1 = variant(&t.stim_1)?,
            }
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StimselConfig {
    pub k: usize,
    pub seed: u64,
    pub raw_scores: bool,
    pub trim: f64,
    pub exclude: BTreeSet<(String, String)>,
}

impl Default for StimselConfig {
    fn default() -> Self {
        StimselConfig { k: 50, seed: 0, raw_scores: false, trim: 0.0, exclude: BTreeSet::new() }
    }
}

#[derive(Debug, Clone)]
pub struct StimselOutcome {
    pub retained: usize,
    /// (same, different) counts after intersecting the per-metric overlaps.
    pub common: (usize, usize),
    pub trials: Vec<TrialSpec>,
}

/// The whole selection pipeline; a pure function of its inputs.
pub fn select_stimuli(records: Vec<PairRecord>, manifest: &Manifest, cfg: &StimselConfig) -> Result<StimselOutcome> {
    let mut kept = filter_pairs(records, manifest)?;
    for m in Metric::ALL {
        standardize_pairs(&mut kept, m)?;
    }
    let per_metric: Vec<Vec<PairRecord>> = Metric::ALL
        .iter()
        .map(|&m| overlap_filter_trimmed(&kept, m, cfg.trim))
        .collect::<Result<_>>()?;
    let mut common = intersect_common(&per_metric);
    for r in &mut common {
        r.score = Some(score(r, cfg.raw_scores)?);
    }
    let counts = truth_counts(&common);
    log::info!("{} common pairs ({} same, {} different)", common.len(), counts.0, counts.1);
    let (same, diff) = select_extremes(&common, cfg.k, &cfg.exclude)?;
    Ok(StimselOutcome {
        retained: kept.len(),
        common: counts,
        trials: assign_noise_order(&same, &diff, cfg.seed)?,
    })
}

/// Exclusion list: one pair per line, two ids separated by a comma or whitespace; `#` comments.
pub fn parse_exclusions(text: &str) -> Result<BTreeSet<(String, String)>> {
    let mut out = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let ids: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if ids.len() != 2 {
            return Err(Error::invalid(format!("exclusion line {}: expected two utterance ids", n + 1)));
        }
        out.insert(pair_key(ids[0], ids[1]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sex;

    fn utt(id: &str, spk: &str, sex: Sex, sentence: &str) -> UtteranceMeta {
        UtteranceMeta {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            sex,
            dataset: "d".into(),
            sentence_id: sentence.into(),
            conditions: BTreeMap::new(),
            duration_s: 2.0,
            path: format!("{id}.npy"),
        }
    }

    fn rec(a: &str, b: &str, same: bool) -> PairRecord {
        PairRecord::new(a, b, same)
    }

    fn with_z(a: &str, b: &str, same: bool, metric: Metric, z: f64) -> PairRecord {
        let mut r = rec(a, b, same);
        r.z.insert(metric, z);
        r
    }

    fn scored(a: &str, b: &str, same: bool, s: f64) -> PairRecord {
        let mut r = rec(a, b, same);
        r.score = Some(s);
        r
    }

    #[test]
    fn filter_examples() {
        let m = Manifest::new(vec![
            utt("a1", "A", Sex::F, "s1"),
            utt("a2", "A", Sex::F, "s2"),
            utt("a3", "A", Sex::F, "s1"),
            utt("b1", "B", Sex::F, "s1"),
            utt("b2", "B", Sex::F, "s3"),
            utt("c1", "C", Sex::M, "s4"),
        ])
        .unwrap();
        let input = vec![
            rec("a1", "a1", true),  // identical file
            rec("a1", "a2", true),  // same speaker, new sentence: keep
            rec("a1", "a3", true),  // same speaker, same sentence
            rec("a1", "b1", false), // different speakers, same sentence
            rec("a2", "b2", false), // same sex, different sentences: keep
            rec("a2", "c1", false), // cross-sex
        ];
        let kept: Vec<_> = filter_pairs(input, &m).unwrap().iter().map(|r| r.key()).collect();
        assert_eq!(kept, vec![pair_key("a1", "a2"), pair_key("a2", "b2")]);

        assert!(filter_pairs(vec![rec("a1", "zz", false)], &m).is_err());
        let no_sentence = Manifest::new(vec![utt("x", "X", Sex::F, ""), utt("y", "Y", Sex::F, "s")]).unwrap();
        assert!(filter_pairs(vec![rec("x", "y", false)], &no_sentence).is_err());
    }

    #[test]
    fn overlap_examples() {
        let m = Metric::Euclidean;
        let disjoint = vec![with_z("a", "b", true, m, -2.0), with_z("a", "c", true, m, -1.0), with_z("a", "d", false, m, 1.0)];
        assert!(overlap_filter(&disjoint, m).unwrap().is_empty());

        let same_pop = vec![with_z("a", "b", true, m, 0.5), with_z("a", "c", false, m, 0.5)];
        assert_eq!(overlap_filter(&same_pop, m).unwrap().len(), 2);

        // same: {-1, 0.2, 0.8}, different: {0.1, 0.5, 2}. Interval [0.1, 0.8]
        let zs = [(true, -1.0), (true, 0.2), (true, 0.8), (false, 0.1), (false, 0.5), (false, 2.0)];
        let recs: Vec<_> = zs.iter().enumerate().map(|(i, &(s, z))| with_z("x", &format!("y{i}"), s, m, z)).collect();
        let got: Vec<f64> = overlap_filter(&recs, m).unwrap().iter().map(|r| r.z[&m]).collect();
        let expected: Vec<f64> = zs.iter().map(|p| p.1).filter(|&z| (0.1..=0.8).contains(&z)).collect();
        assert_eq!(got, expected);

        // spearman flips the roles: [min same, max different] = [-1, 2] keeps everything
        let sp: Vec<_> = zs.iter().enumerate().map(|(i, &(s, z))| with_z("x", &format!("y{i}"), s, Metric::Spearman, z)).collect();
        assert_eq!(overlap_filter(&sp, Metric::Spearman).unwrap().len(), 6);

        assert!(overlap_filter(&[with_z("a", "b", true, m, 0.0)], m).is_err());
        assert!(overlap_filter(&[rec("a", "b", true), rec("a", "c", false)], m).is_err());
    }

    #[test]
    fn intersect_examples() {
        let a = vec![rec("x", "y", true), rec("x", "z", false)];
        assert_eq!(intersect_common(std::slice::from_ref(&a)), a);
        let b = vec![rec("p", "q", true)];
        assert!(intersect_common(&[a.clone(), b]).is_empty());
        let swapped = vec![rec("z", "x", false)];
        assert_eq!(intersect_common(&[a, swapped]), vec![rec("x", "z", false)]);
    }

    #[test]
    fn score_examples() {
        let mut r = rec("a", "b", true);
        for (m, v) in Metric::ALL.iter().zip([0.0, 0.0, 0.0, 1.0]) {
            r.z.insert(*m, v);
        }
        assert_eq!(score(&r, false).unwrap(), 0.0);
        for (m, v) in Metric::ALL.iter().zip([1.0, 1.0, 1.0, -1.0]) {
            r.z.insert(*m, v);
        }
        assert_eq!(score(&r, false).unwrap(), 1.25);
        assert!(score(&r, true).is_err());

        // spreadsheet-style recomputation
        let vals = [(0.3, -1.2, 2.5, 0.7), (-0.4, 0.9, -0.1, -0.6)];
        for &(e, c, h, s) in &vals {
            let mut r = rec("a", "b", false);
            r.z.insert(Metric::Euclidean, e);
            r.z.insert(Metric::Cosine, c);
            r.z.insert(Metric::Hausdorff, h);
            r.z.insert(Metric::Spearman, s);
            let expected = (e + c + h + 1.0 - s) * 0.25;
            assert!((score(&r, false).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn extremes_examples() {
        let pool = vec![scored("a", "b", true, 0.7), scored("a", "c", true, 0.9), scored("d", "e", false, 0.1)];
        let none = BTreeSet::new();
        let (s, d) = select_extremes(&pool, 1, &none).unwrap();
        assert_eq!(s[0].score, Some(0.9));
        assert_eq!(d[0].utt_a, "d");

        let excl: BTreeSet<_> = [pair_key("c", "a")].into_iter().collect();
        let (s, _) = select_extremes(&pool, 1, &excl).unwrap();
        assert_eq!(s[0].score, Some(0.7));

        let ties = vec![scored("m", "n", true, 0.5), scored("b", "z", true, 0.5), scored("b", "c", true, 0.5), scored("x", "y", false, 0.0)];
        let (s, _) = select_extremes(&ties, 1, &none).unwrap();
        assert_eq!((s[0].utt_a.as_str(), s[0].utt_b.as_str()), ("b", "c"));

        assert!(select_extremes(&pool, 2, &none).is_err());
    }

    fn picks(n: usize, same: bool) -> Vec<PairRecord> {
        (0..n).map(|i| scored(&format!("{same}a{i}"), &format!("{same}b{i}"), same, i as f64)).collect()
    }

    #[test]
    fn noise_order_is_balanced_and_seeded() {
        let (s, d) = (picks(50, true), picks(50, false));
        let t = assign_noise_order(&s, &d, 7).unwrap();
        assert_eq!(t.len(), 100);
        for seed in [7u64, 8, 9] {
            let t = assign_noise_order(&s, &d, seed).unwrap();
            let mut cells: BTreeMap<(Truth, NoiseOrder), usize> = BTreeMap::new();
            for x in &t {
                *cells.entry((x.truth, x.noise_order)).or_default() += 1;
            }
            assert_eq!(cells.len(), 4);
            assert!(cells.values().all(|&c| c == 25));
            assert_eq!(t.iter().map(|x| x.trial_id).collect::<Vec<_>>(), (1..=100).collect::<Vec<_>>());
        }
        assert_eq!(t, assign_noise_order(&s, &d, 7).unwrap());
        assert_ne!(t, assign_noise_order(&s, &d, 8).unwrap());
        assert!(assign_noise_order(&picks(3, true), &picks(4, false), 0).is_err());
    }

    #[test]
    fn noisy_variants_replace_the_noisy_slot() {
        let mut n1 = utt("a1n", "A", Sex::F, "s1");
        n1.conditions.insert("background".into(), "noisy".into());
        let mut n2 = utt("b2n", "B", Sex::F, "s2");
        n2.conditions.insert("background".into(), "noisy".into());
        n2.conditions.insert("source".into(), "b2".into());
        let m = Manifest::new(vec![utt("a1", "A", Sex::F, "s1"), utt("b2", "B", Sex::F, "s2"), n1, n2]).unwrap();
        let t = |order| TrialSpec { trial_id: 1, stim_1: "a1".into(), stim_2: "b2".into(), truth: Truth::Different, noise_order: order, score: 0.0 };
        let out = attach_noisy_variants(&[t(NoiseOrder::NoisyClean), t(NoiseOrder::CleanNoisy)], &m).unwrap();
        assert_eq!((out[0].stim_1.as_str(), out[0].stim_2.as_str()), ("a1n", "b2"));
        assert_eq!((out[1].stim_1.as_str(), out[1].stim_2.as_str()), ("a1", "b2n"));
        let bare = Manifest::new(vec![utt("a1", "A", Sex::F, "s1"), utt("b2", "B", Sex::F, "s2")]).unwrap();
        assert!(attach_noisy_variants(&[t(NoiseOrder::NoisyClean)], &bare).is_err());
    }

    #[test]
    fn exclusions_parse() {
        let e = parse_exclusions("# manual screen\nb,a\n c  d \n").unwrap();
        assert!(e.contains(&pair_key("a", "b")) && e.contains(&pair_key("d", "c")));
        assert!(parse_exclusions("a,b,c").is_err());
    }

    #[test]
    fn noise_order_text() {
        for o in [NoiseOrder::CleanNoisy, NoiseOrder::NoisyClean] {
            assert_eq!(o.to_string().parse::<NoiseOrder>().unwrap(), o);
        }
        assert_eq!("different".parse::<Truth>().unwrap(), Truth::Different);
    }
}
