//! Scoring same/different discrimination responses: accuracy tables,
//! signal-detection sensitivity, effect sizes and correlations.
//!
//! A "hit" is answering *different* on a Different trial; a false alarm is
//! answering *different* on a Same trial.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
pub use crate::stimsel::{NoiseOrder, Truth};

/// Name of the extreme-rate correction, echoed into output metadata.
pub const DPRIME_CORRECTION: &str = "loglinear";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Response {
    Same,
    Different,
}

impl FromStr for Response {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" | "s" => Ok(Response::Same),
            "different" | "diff" | "d" => Ok(Response::Different),
            _ => Err(Error::invalid(format!("unknown response {s:?}"))),
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Response::Same => "same",
            Response::Different => "different",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResponse {
    pub subject_id: String,
    pub trial_id: usize,
    pub truth: Truth,
    pub response: Response,
    pub confidence: u8,
    pub rt_s: f64,
    pub noise_order: NoiseOrder,
}

impl TrialResponse {
    pub fn correct(&self) -> bool {
        (self.truth == Truth::Different) == (self.response == Response::Different)
    }
}

#[derive(Deserialize)]
struct RawResponse {
    subject_id: String,
    trial_id: usize,
    truth: String,
    response: String,
    confidence: u8,
    rt_s: f64,
    noise_order: String,
}

/// Parses `subject_id,trial_id,truth,response,confidence,rt_s,noise_order`.
pub fn responses_from_csv(text: &str) -> Result<Vec<TrialResponse>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RawResponse>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::invalid(format!("response row {line}: {e}")))?;
        if !(1..=7).contains(&r.confidence) {
            return Err(Error::invalid(format!("response row {line}: confidence {} outside 1-7", r.confidence)));
        }
        if !(r.rt_s > 0.0 && r.rt_s.is_finite()) {
            return Err(Error::invalid(format!("response row {line}: reaction time must be positive")));
        }
        out.push(TrialResponse {
            subject_id: r.subject_id,
            trial_id: r.trial_id,
            truth: r.truth.parse()?,
            response: r.response.parse()?,
            confidence: r.confidence,
            rt_s: r.rt_s,
            noise_order: r.noise_order.parse()?,
        });
    }
    Ok(out)
}

/// Hit and false-alarm counts with their denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub hits: usize,
    pub n_signal: usize,
    pub false_alarms: usize,
    pub n_noise: usize,
}

pub fn tally(responses: &[TrialResponse]) -> Tally {
    let mut t = Tally::default();
    for r in responses {
        let said_diff = r.response == Response::Different;
        match r.truth {
            Truth::Different => {
                t.n_signal += 1;
                t.hits += said_diff as usize;
            }
            Truth::Same => {
                t.n_noise += 1;
                t.false_alarms += said_diff as usize;
            }
        }
    }
    t
}

/// (hit rate, false-alarm rate).
pub fn rates(responses: &[TrialResponse]) -> Result<(f64, f64)> {
    let t = tally(responses);
    if t.n_signal == 0 || t.n_noise == 0 {
        return Err(Error::invalid("rates need at least one Same and one Different trial"));
    }
    Ok((t.hits as f64 / t.n_signal as f64, t.false_alarms as f64 / t.n_noise as f64))
}

fn loglinear(rate: f64, n: usize) -> f64 {
    (rate * n as f64 + 0.5) / (n as f64 + 1.0)
}

/// Sensitivity `z(H') - z(F')` with the log-linear correction
/// `(count + 0.5) / (n + 1)` applied to both rates.
pub fn d_prime(hit_rate: f64, fa_rate: f64, n_signal: usize, n_noise: usize) -> Result<f64> {
    if n_signal == 0 || n_noise == 0 {
        return Err(Error::invalid("d' needs at least one trial of each kind"));
    }
    for r in [hit_rate, fa_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("rate {r} outside [0, 1]")));
        }
    }
    Ok(stats::norm_ppf(loglinear(hit_rate, n_signal)) - stats::norm_ppf(loglinear(fa_rate, n_noise)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub n_trials: usize,
    pub accuracy: f64,
    pub hit_rate: f64,
    pub fa_rate: f64,
    pub d_prime: f64,
    pub mean_rt: f64,
}

pub fn summarize_subject(subject_id: &str, responses: &[TrialResponse]) -> Result<SubjectSummary> {
    let (h, f) = rates(responses)?;
    let t = tally(responses);
    Ok(SubjectSummary {
        subject_id: subject_id.to_string(),
        n_trials: responses.len(),
        accuracy: responses.iter().filter(|r| r.correct()).count() as f64 / responses.len() as f64,
        hit_rate: h,
        fa_rate: f,
        d_prime: d_prime(h, f, t.n_signal, t.n_noise)?,
        mean_rt: stats::mean(&responses.iter().map(|r| r.rt_s).collect::<Vec<_>>()),
    })
}

/// One summary per subject, ordered by subject id.
pub fn summarize(responses: &[TrialResponse]) -> Result<Vec<SubjectSummary>> {
    let mut by_subject: BTreeMap<&str, Vec<TrialResponse>> = BTreeMap::new();
    for r in responses {
        by_subject.entry(&r.subject_id).or_default().push(r.clone());
    }
    by_subject.iter().map(|(s, rs)| summarize_subject(s, rs)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Truth,
    NoiseOrder,
    Confidence,
}

impl FromStr for GroupKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "truth" => Ok(GroupKey::Truth),
            "noise_order" => Ok(GroupKey::NoiseOrder),
            "confidence" => Ok(GroupKey::Confidence),
            other => Err(Error::UnknownKey(other.to_string())),
        }
    }
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Truth => "truth",
            GroupKey::NoiseOrder => "noise_order",
            GroupKey::Confidence => "confidence",
        }
    }

    fn levels(self) -> Vec<String> {
        match self {
            GroupKey::Truth => vec![Truth::Same.to_string(), Truth::Different.to_string()],
            GroupKey::NoiseOrder => vec![NoiseOrder::CleanNoisy.to_string(), NoiseOrder::NoisyClean.to_string()],
            GroupKey::Confidence => (1..=7).map(|c| c.to_string()).collect(),
        }
    }

    fn level_of(self, r: &TrialResponse) -> String {
        match self {
            GroupKey::Truth => r.truth.to_string(),
            GroupKey::NoiseOrder => r.noise_order.to_string(),
            GroupKey::Confidence => r.confidence.to_string(),
        }
    }
}

pub fn parse_group_keys(text: &str) -> Result<Vec<GroupKey>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// One level per grouping key, in key order.
    pub levels: Vec<String>,
    pub count: usize,
    /// `None` for empty cells.
    pub accuracy: Option<f64>,
}

/// Accuracy for every combination of levels of `keys` (all cells listed, empty ones as `None`).
pub fn breakdown(responses: &[TrialResponse], keys: &[GroupKey]) -> Result<Vec<Cell>> {
    if responses.is_empty() {
        return Err(Error::invalid("no responses to break down"));
    }
    let mut tallies: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
    for r in responses {
        let e = tallies.entry(keys.iter().map(|k| k.level_of(r)).collect()).or_default();
        e.0 += 1;
        e.1 += r.correct() as usize;
    }
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for k in keys {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                k.levels().into_iter().map(move |l| {
                    let mut c = c.clone();
                    c.push(l);
                    c
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .map(|levels| {
            let (count, correct) = tallies.get(&levels).copied().unwrap_or((0, 0));
            Cell { levels, count, accuracy: (count > 0).then(|| correct as f64 / count as f64) }
        })
        .collect())
}

/// Mean correctness per trial across subjects.
pub fn per_trial_accuracy(responses: &[TrialResponse]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in responses {
        let e = acc.entry(r.trial_id).or_default();
        e.0 += 1;
        e.1 += r.correct() as usize;
    }
    acc.into_iter().map(|(t, (n, c))| (t, c as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

fn correlation(x: &[f64], y: &[f64], rank: bool) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 observations"));
    }
    let r = if rank { stats::spearman_rho(x, y)? } else { stats::pearson_r(x, y)? };
    Ok(Correlation { r, p: stats::correlation_p_value(r, x.len()), n: x.len() })
}

/// Pearson r with a two-sided Student-t p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    correlation(x, y, false)
}

/// Spearman rho (Pearson on average ranks) with the same p-value machinery.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    correlation(x, y, true)
}

/// Standardized mean difference with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each group needs at least 2 values"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * stats::var_sample(a) + (nb - 1.0) * stats::var_sample(b)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(Error::Degenerate("groups (zero pooled standard deviation)".into()));
    }
    Ok((stats::mean(a) - stats::mean(b)) / pooled)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::erf::erfc;

    pub(crate) fn resp(subject: &str, trial: usize, truth: Truth, response: Response) -> TrialResponse {
        TrialResponse {
            subject_id: subject.into(),
            trial_id: trial,
            truth,
            response,
            confidence: 4,
            rt_s: 1.5,
            noise_order: if trial % 2 == 0 { NoiseOrder::CleanNoisy } else { NoiseOrder::NoisyClean },
        }
    }

    fn norm_cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    /// z(p) by bisection on the erfc-based CDF.
    fn z_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_cdf(mid) < p { lo = mid } else { hi = mid }
        }
        0.5 * (lo + hi)
    }

    /// Two-sided Student-t tail probability for integer degrees of freedom
    /// from the closed-form finite series for P(|T| <= t).
    pub(crate) fn t_two_sided(t: f64, nu: usize) -> f64 {
        let theta = (t.abs() / (nu as f64).sqrt()).atan();
        let (s, c) = theta.sin_cos();
        let a = if nu % 2 == 1 {
            let mut sum = 0.0;
            if nu > 1 {
                let mut term = c;
                sum = term;
                let mut k = 3;
                while k < nu {
                    term *= c * c * (k - 1) as f64 / k as f64;
                    sum += term;
                    k += 2;
                }
            }
            2.0 / std::f64::consts::PI * (theta + s * sum)
        } else {
            let mut term = 1.0;
            let mut sum = 1.0;
            let mut k = 2;
            while k < nu {
                term *= c * c * (k - 1) as f64 / k as f64;
                sum += term;
                k += 2;
            }
            s * sum
        };
        1.0 - a
    }

    #[test]
    fn t_series_oracle_is_sane() {
        // nu = 1 is Cauchy: P(|T| > 1) = 0.5
        assert!((t_two_sided(1.0, 1) - 0.5).abs() < 1e-15);
        // nu = 2: P(|T| > t) = 1 - t / sqrt(2 + t^2)
        assert!((t_two_sided(1.5, 2) - (1.0 - 1.5 / (2.0f64 + 2.25).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn rates_examples() {
        let all_correct = vec![resp("s", 1, Truth::Different, Response::Different), resp("s", 2, Truth::Same, Response::Same)];
        assert_eq!(rates(&all_correct).unwrap(), (1.0, 0.0));
        let always_diff = vec![resp("s", 1, Truth::Different, Response::Different), resp("s", 2, Truth::Same, Response::Different)];
        assert_eq!(rates(&always_diff).unwrap(), (1.0, 1.0));
        assert!(rates(&all_correct[..1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fixture: Vec<_> = (0..50)
            .map(|i| {
                let truth = if rng.random_bool(0.5) { Truth::Same } else { Truth::Different };
                let r = if rng.random_bool(0.5) { Response::Same } else { Response::Different };
                resp("s", i, truth, r)
            })
            .collect();
        let mut cells = [[0usize; 2]; 2];
        for r in &fixture {
            cells[(r.truth == Truth::Different) as usize][(r.response == Response::Different) as usize] += 1;
        }
        let (h, f) = rates(&fixture).unwrap();
        assert_eq!(h, cells[1][1] as f64 / (cells[1][0] + cells[1][1]) as f64);
        assert_eq!(f, cells[0][1] as f64 / (cells[0][0] + cells[0][1]) as f64);
    }

    #[test]
    fn d_prime_examples() {
        assert_eq!(d_prime(0.3, 0.3, 20, 20).unwrap(), 0.0);
        let big = d_prime(0.9, 0.1, 10_000_000, 10_000_000).unwrap();
        assert!((big - 2.0 * 1.2815515655446004).abs() < 1e-6, "{big}");
        assert!((big - 2.5631).abs() < 1e-4);
        let extreme = d_prime(1.0, 0.0, 50, 50).unwrap();
        let expected = z_oracle(50.5 / 51.0) - z_oracle(0.5 / 51.0);
        assert!(extreme.is_finite());
        assert!((extreme - expected).abs() < 1e-9);
        assert!(d_prime(0.5, 0.5, 0, 3).is_err());
    }

    #[test]
    fn breakdown_examples() {
        let rs = vec![
            resp("a", 1, Truth::Same, Response::Same),
            resp("a", 2, Truth::Same, Response::Different),
            resp("a", 3, Truth::Different, Response::Different),
            resp("a", 4, Truth::Different, Response::Different),
        ];
        let t = breakdown(&rs, &[GroupKey::Truth]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].levels[0].as_str(), t[0].accuracy), ("Same", Some(0.5)));
        assert_eq!((t[1].levels[0].as_str(), t[1].accuracy), ("Different", Some(1.0)));

        let all = breakdown(&rs, &[]).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].accuracy, Some(0.75));

        let conf = breakdown(&rs, &[GroupKey::Confidence]).unwrap();
        assert!(conf.len() <= 7);
        assert_eq!(conf.iter().filter(|c| c.accuracy.is_some()).count(), 1);
        assert!(conf.iter().filter(|c| c.count == 0).all(|c| c.accuracy.is_none()));

        assert!(matches!(parse_group_keys("truth,colour"), Err(Error::UnknownKey(_))));
        assert!(breakdown(&[], &[GroupKey::Truth]).is_err());
    }

    #[test]
    fn per_trial_examples() {
        let mut rs = Vec::new();
        for s in ["a", "b", "c", "d"] {
            rs.push(resp(s, 1, Truth::Same, Response::Same));
        }
        for (s, r) in [("a", Response::Different), ("b", Response::Different), ("c", Response::Different), ("d", Response::Same)] {
            rs.push(resp(s, 2, Truth::Different, r));
        }
        let acc = per_trial_accuracy(&rs);
        assert_eq!(acc[&1], 1.0);
        assert_eq!(acc[&2], 0.75);
        // overall accuracy is the count-weighted mean of trial accuracies
        assert_eq!(breakdown(&rs, &[]).unwrap()[0].accuracy, Some((acc[&1] * 4.0 + acc[&2] * 4.0) / 8.0));
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let c = pearson(&x, &x).unwrap();
        assert_eq!(c.r, 1.0);
        assert!(c.p < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).unwrap().r, -1.0);
        assert!(pearson(&x, &[1.0; 8]).is_err());
        assert!(pearson(&x[..2], &x[..2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.6..0.6)).collect();
        let c = pearson(&a, &b).unwrap();
        // direct product-moment sum
        let (ma, mb) = (stats::mean(&a), stats::mean(&b));
        let num: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let den = (a.iter().map(|p| (p - ma).powi(2)).sum::<f64>() * b.iter().map(|q| (q - mb).powi(2)).sum::<f64>()).sqrt();
        assert!((c.r - num / den).abs() < 1e-9);
        let t = c.r * (8.0 / (1.0 - c.r * c.r)).sqrt();
        assert!((c.p - t_two_sided(t, 8)).abs() < 1e-6, "{} vs {}", c.p, t_two_sided(t, 8));

        let s = spearman(&a, &b).unwrap();
        let ts = s.r * (8.0 / (1.0 - s.r * s.r)).sqrt();
        assert!((s.p - t_two_sided(ts, 8)).abs() < 1e-6);
    }

    #[test]
    fn cohens_d_examples() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // sample variance of each group is 1
        assert!((cohens_d(&[0.0, 1.0, 2.0], &[-1.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let a = [2.0, 4.0, 7.0, 1.0];
        let b = [3.0, 3.5, 0.5];
        let va = a.iter().map(|v| (v - 3.5f64).powi(2)).sum::<f64>() / 3.0;
        let vb = b.iter().map(|v| (v - 7.0f64 / 3.0).powi(2)).sum::<f64>() / 2.0;
        let expected = (3.5 - 7.0 / 3.0) / ((3.0 * va + 2.0 * vb) / 5.0f64).sqrt();
        assert!((cohens_d(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(cohens_d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_round() {
        let text = "subject_id,trial_id,truth,response,confidence,rt_s,noise_order\n\
                    p1,1,Same,same,5,1.2,C-N\np1,2,Different,same,3,0.8,N-C\n";
        let rs = responses_from_csv(text).unwrap();
        assert_eq!(rs.len(), 2);
        assert!(rs[0].correct() && !rs[1].correct());
        assert!(responses_from_csv(&text.replace(",5,", ",9,")).is_err());
        assert!(responses_from_csv(&text.replace("0.8", "-1")).is_err());
    }
}
