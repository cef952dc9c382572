//! The `voiceprobe` command line.
//!
//! Every subcommand is described by a table of named parameters. A run's
//! parameters are resolved in three layers — built-in defaults, then an
//! optional `key=value` config file, then explicit flags — and the resolved
//! set is canonicalized (`key=value\n`, sorted) and hashed. The hash and the
//! seed head every output file so results can be traced to their settings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::behavior::{self, DPRIME_CORRECTION};
use crate::corpus::{self, Filter, Manifest, SplitSpec, SplitStrategy, Standardizer};
use crate::discrim::{self, BootstrapConfig, Decoder, DecoderConfig, DecoderGrid, PairGenerator};
use crate::distances::{self, DistanceMatrix, Metric, PairRecord};
use crate::encoding::{self, EncodingConfig, LabelMode, LabelRun};
use crate::error::Error;
use crate::nn::Activation;
use crate::probe::{self, ProbeConfig, ProbeGrid, ProbeResult};
use crate::similarity;
use crate::stimsel::{self, NoiseOrder, StimselConfig, TrialSpec, Truth};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Keys that never enter the config hash: where output goes and how fast it is made.
const UNHASHED: [&str; 4] = ["out", "threads", "json", "config"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Copy)]
enum Kind {
    Value,
    /// Repeatable; occurrences are joined with `;`.
    Multi,
    Flag,
}

struct Param {
    name: &'static str,
    help: &'static str,
    default: Option<&'static str>,
    required: bool,
    kind: Kind,
}

const fn opt(name: &'static str, default: &'static str, help: &'static str) -> Param {
    Param { name, help, default: Some(default), required: false, kind: Kind::Value }
}

const fn maybe(name: &'static str, help: &'static str) -> Param {
    Param { name, help, default: None, required: false, kind: Kind::Value }
}

const fn req(name: &'static str, help: &'static str) -> Param {
    Param { name, help, default: None, required: true, kind: Kind::Value }
}

const fn flag(name: &'static str, help: &'static str) -> Param {
    Param { name, help, default: Some("false"), required: false, kind: Kind::Flag }
}

const fn multi(name: &'static str, help: &'static str) -> Param {
    Param { name, help, default: None, required: false, kind: Kind::Multi }
}

const COMMON: &[Param] = &[
    opt("seed", "0", "Random seed"),
    req("out", "Output CSV path"),
    maybe("config", "key=value config file; flags override it"),
    opt("threads", "0", "Worker threads (0 = all cores)"),
    flag("json", "Also write a JSON mirror next to the CSV"),
];

const EMBEDDINGS: &[Param] = &[
    req("manifest", "Utterance manifest (CSV or JSON)"),
    req("embeddings_dir", "Directory of per-utterance embedding files"),
    maybe("layer", "Layer subdirectory inside the embeddings directory"),
];

const SPLIT: &[Param] = &[
    maybe("split", "Split file: `utterance_id,partition` CSV or `<1|2|3> <path>` list"),
    opt("train_ratio", "0.7", "Per-speaker train fraction when no split file is given"),
    opt("val_ratio", "0.15", "Per-speaker validation fraction when no split file is given"),
];

const PROBE: &[Param] = &[
    opt("hidden", "100", "Hidden layer sizes, comma-separated"),
    opt("activation", "relu", "relu | tanh | identity"),
    opt("lrs", "0.0001,0.001,0.01", "Learning-rate grid"),
    opt("max_epochs", "200", "Epoch limit"),
    opt("patience", "20", "Early-stopping patience (epochs)"),
    opt("batch_size", "256", "Minibatch size"),
    opt("repeats", "3", "Independent runs per configuration"),
];

struct Sub {
    name: &'static str,
    about: &'static str,
    groups: &'static [&'static [Param]],
}

const SUBS: &[Sub] = &[
    Sub {
        name: "probe",
        about: "Speaker-identification probe on one layer's pooled embeddings",
        groups: &[EMBEDDINGS, SPLIT, PROBE, &[maybe("filter", "Restrict to utterances matching k=v[,k=v]")]],
    },
    Sub {
        name: "layerwise",
        about: "Probe every layer and report the best one",
        groups: &[
            &[
                req("manifest", "Utterance manifest (CSV or JSON)"),
                req("embeddings_dir", "Directory with one subdirectory per layer"),
                req("layers", "Layer subdirectories, comma-separated"),
            ],
            SPLIT,
            PROBE,
        ],
    },
    Sub {
        name: "crosscond",
        about: "Train a probe grid on one condition, test on others",
        groups: &[
            EMBEDDINGS,
            SPLIT,
            PROBE,
            &[
                req("train_cond", "Training condition k=v[,k=v]"),
                multi("test_cond", "Test condition k=v[,k=v]; repeat for several"),
                opt("hidden_grid", "50,100,200", "Hidden sizes searched"),
                opt("activation_grid", "relu,tanh,identity", "Activations searched"),
                opt("lr_grid", "0.0001,0.001,0.01", "Learning rates searched"),
            ],
        ],
    },
    Sub {
        name: "cka",
        about: "Linear CKA between models on the same utterances",
        groups: &[&[
            req("manifest", "Utterance manifest (CSV or JSON)"),
            req("models", "tag=dir pairs, comma-separated"),
            maybe("layer", "Layer subdirectory inside every model directory"),
        ]],
    },
    Sub {
        name: "distmat",
        about: "Pairwise utterance or speaker distances in long form",
        groups: &[
            EMBEDDINGS,
            &[
                opt("metric", "all", "euclidean | cosine | hausdorff | spearman | all, comma-separated"),
                opt("level", "utterance", "utterance | speaker"),
                opt("hausdorff_frames", "true", "Hausdorff over frame sets (false: over pooled vectors)"),
            ],
        ],
    },
    Sub {
        name: "stimsel",
        about: "Select same/different listening-test trials from pair distances",
        groups: &[&[
            req("pairs", "Long-form pair CSV `id_a,id_b,metric,value` with all four metrics"),
            req("manifest", "Utterance manifest (CSV or JSON)"),
            opt("k", "50", "Trials per truth condition"),
            maybe("exclude", "Pairs to exclude, one per line"),
            opt("trim", "0", "Quantile trimmed from each population's tails before overlap"),
            flag("raw_scores", "Score raw distances instead of z-scores"),
            flag("noisy_variants", "Swap the noisy side of each trial for its noisy recording"),
        ]],
    },
    Sub {
        name: "behave",
        about: "Listening-test accuracy, d-prime and breakdowns",
        groups: &[&[
            req("responses", "Response CSV"),
            maybe("trials", "Trial CSV written by stimsel"),
            opt("group_by", "truth,noise_order", "Breakdown keys: truth, noise_order, confidence"),
            maybe("correlate_with", "Long-form distance CSV to correlate with per-trial accuracy"),
        ]],
    },
    Sub {
        name: "aspd train",
        about: "Grid-search same/different pair decoders",
        groups: &[
            EMBEDDINGS,
            SPLIT,
            &[
                opt("n_pairs", "10000", "Training pairs per epoch"),
                opt("val_pairs", "2000", "Fixed validation pairs"),
                opt("lr_grid", "0.0001,0.001", "Learning rates"),
                opt("batch_grid", "64,128,256", "Batch sizes"),
                opt("layers_grid", "4096;4096,256;4096,256,128;4096,256,128,64", "Layer stacks, `;`-separated"),
                opt("node_grid", "512,1024,2048,4096", "Single-layer widths for the second round (empty to skip)"),
                opt("max_epochs", "100", "Epoch limit"),
                opt("patience", "10", "Early-stopping patience (epochs)"),
                maybe("model_out", "Where to save the best decoder (JSON)"),
            ],
        ],
    },
    Sub {
        name: "aspd eval",
        about: "Apply a trained pair decoder to a trial list",
        groups: &[
            EMBEDDINGS,
            &[req("model", "Decoder JSON from `aspd train`"), req("trials", "Trial CSV")],
        ],
    },
    Sub {
        name: "confusion",
        about: "Bootstrapped speaker-identification confusion matrix",
        groups: &[
            EMBEDDINGS,
            &[
                opt("n_trials", "10000", "Bootstrap trials"),
                opt("train_per_speaker", "7", "Training utterances per speaker and trial"),
                opt("test_per_speaker", "3", "Test utterances per speaker and trial"),
                opt("hidden", "100", "Probe hidden layer sizes"),
                opt("lr", "0.001", "Probe learning rate"),
                opt("max_epochs", "200", "Epoch limit"),
                opt("patience", "20", "Early-stopping patience (epochs)"),
                maybe("distances", "Speaker-level long-form distance CSV to correlate with"),
                maybe("correlations_out", "Where to write the correlation table"),
            ],
        ],
    },
    Sub {
        name: "encode",
        about: "Leave-one-run-out ridge encoding model",
        groups: &[&[
            req("runs", "Runs CSV `run_id,features_path,targets_path,tr_s`"),
            maybe("holdout_run", "Held-out run id (default: last run)"),
            opt("alpha_grid", "0.1,1,10,100,1000,10000,100000", "Ridge penalties"),
            opt("lags", "1,2,3,4", "Lag sets in TRs; `;` separates candidate sets"),
            opt("alpha_mode", "per_target", "per_target | global"),
        ]],
    },
    Sub {
        name: "decode-labels",
        about: "Decode voice-activity labels from target time series",
        groups: &[&[
            req("runs", "Runs CSV; features_path holds the decoded time series"),
            req("segments", "Segments CSV `start_s,end_s` with optional run_id"),
            opt("mode", "shift:2", "shift:K | hrf"),
            maybe("holdout_run", "Held-out run id (default: every run in turn)"),
            opt("c_grid", "0.001,0.01,0.1,1,10", "SVM C values"),
            opt("lags", "0", "Feature lags in TRs"),
        ]],
    },
];

fn params(sub: &Sub) -> impl Iterator<Item = &Param> {
    sub.groups.iter().flat_map(|g| g.iter()).chain(COMMON.iter())
}

fn flag_name(name: &str) -> String {
    name.replace('_', "-")
}

fn leaf(sub: &Sub, name: &'static str) -> Command {
    let mut cmd = Command::new(name).about(sub.about);
    for p in params(sub) {
        let mut arg = Arg::new(p.name).long(flag_name(p.name)).help(p.help);
        arg = match p.kind {
            Kind::Flag => arg.action(ArgAction::SetTrue),
            Kind::Multi => arg.action(ArgAction::Append).num_args(1),
            Kind::Value => arg.num_args(1),
        };
        if let Some(d) = p.default {
            if !matches!(p.kind, Kind::Flag) {
                arg = arg.help(format!("{} [default: {d}]", p.help));
            }
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn command() -> Command {
    let mut root = Command::new("voiceprobe")
        .version(TOOL_VERSION)
        .about("Speaker-identity analysis over precomputed speech embeddings")
        .subcommand_required(true)
        .arg_required_else_help(true);
    let mut aspd = Command::new("aspd")
        .about("Same/different pair decoders (train | eval)")
        .subcommand_required(true);
    for sub in SUBS {
        match sub.name.strip_prefix("aspd ") {
            Some(mode) => aspd = aspd.subcommand(leaf(sub, mode)),
            None => root = root.subcommand(leaf(sub, sub.name)),
        }
    }
    root.subcommand(aspd)
}

/// Canonical form of a resolved configuration: sorted `key=value` lines.
pub fn canonical_config(config: &BTreeMap<String, String>) -> String {
    config
        .iter()
        .filter(|(k, _)| !UNHASHED.contains(&k.as_str()))
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    hex::encode(Sha256::digest(canonical_config(config).as_bytes()))
}

/// `key=value` lines; blank lines and `#` comments ignored, dashes in keys read as underscores.
pub fn parse_config_file(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

/// The resolved parameter set of one invocation.
pub struct Params {
    pub command: &'static str,
    values: BTreeMap<String, String>,
}

impl Params {
    fn resolve(sub: &'static Sub, m: &ArgMatches) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for p in params(sub) {
            if let Some(d) = p.default {
                values.insert(p.name.to_string(), d.to_string());
            }
        }
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(Error::io(path, e)))?;
            for (k, v) in parse_config_file(&text)? {
                if k == "config" || !params(sub).any(|p| p.name == k) {
                    return Err(usage(format!("unknown config key {k:?} for {}", sub.name)));
                }
                values.insert(k, v);
            }
        }
        for p in params(sub) {
            if m.value_source(p.name) != Some(ValueSource::CommandLine) {
                continue;
            }
            let v = match p.kind {
                Kind::Flag => m.get_flag(p.name).to_string(),
                Kind::Multi => m.get_many::<String>(p.name).unwrap().cloned().collect::<Vec<_>>().join(";"),
                Kind::Value => m.get_one::<String>(p.name).unwrap().clone(),
            };
            values.insert(p.name.to_string(), v);
        }
        for p in params(sub) {
            if p.required && values.get(p.name).is_none_or(|v| v.is_empty()) {
                return Err(usage(format!("{} requires --{}", sub.name, flag_name(p.name))));
            }
        }
        values.insert("command".into(), sub.name.to_string());
        Ok(Params { command: sub.name, values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn opt(&self, k: &str) -> Option<&str> {
        self.values.get(k).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn text(&self, k: &str) -> CliResult<&str> {
        self.opt(k).ok_or_else(|| usage(format!("missing --{}", flag_name(k))))
    }

    fn path(&self, k: &str) -> CliResult<PathBuf> {
        self.text(k).map(PathBuf::from)
    }

    fn get<T: FromStr>(&self, k: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        let v = self.text(k)?;
        v.parse().map_err(|e| usage(format!("--{} {v:?}: {e}", flag_name(k))))
    }

    fn list<T: FromStr>(&self, k: &str) -> CliResult<Vec<T>>
    where
        T::Err: Display,
    {
        parse_list(self.opt(k).unwrap_or(""), ',').map_err(|e| usage(format!("--{}: {e}", flag_name(k))))
    }

    fn flag(&self, k: &str) -> CliResult<bool> {
        self.get(k)
    }

    fn seed(&self) -> CliResult<u64> {
        self.get("seed")
    }
}

fn parse_list<T: FromStr>(text: &str, sep: char) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    text.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// A tabular result: extra header notes, column names and stringified rows.
pub struct Table {
    pub notes: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { notes: Vec::new(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn note(&mut self, k: &str, v: impl Display) {
        self.notes.push((k.to_string(), v.to_string()));
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn metadata(p: &Params) -> Vec<(String, String)> {
    vec![
        ("tool_version".into(), TOOL_VERSION.into()),
        ("seed".into(), p.values["seed"].clone()),
        ("config_hash".into(), config_hash(&p.values)),
    ]
}

fn write_table(p: &Params, path: &Path, table: &Table) -> crate::Result<()> {
    let meta = metadata(p);
    let mut text = String::new();
    for (k, v) in meta.iter().chain(&table.notes) {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(&table.header).map_err(io)?;
    for r in &table.rows {
        w.write_record(r).map_err(io)?;
    }
    text.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields"));
    write_atomic(path, text.as_bytes())?;

    if p.flag("json").unwrap_or(false) {
        let mut obj = serde_json::Map::new();
        for (k, v) in meta.iter().chain(&table.notes) {
            obj.insert(k.clone(), v.clone().into());
        }
        obj.insert("config".into(), serde_json::to_value(&p.values).expect("string map"));
        obj.insert("columns".into(), serde_json::to_value(&table.header).expect("strings"));
        obj.insert("rows".into(), serde_json::to_value(&table.rows).expect("strings"));
        let body = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json value");
        write_atomic(&path.with_extension("json"), body.as_bytes())?;
    }
    Ok(())
}

fn load_split(p: &Params, manifest: &Manifest) -> CliResult<SplitSpec> {
    Ok(match p.opt("split") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#')).unwrap_or("");
            let spec = if first.contains(',') {
                SplitSpec::from_csv(&text)
            } else {
                corpus::split(manifest, SplitStrategy::BenchmarkList(&text))
            };
            spec.map_err(|e| Error::ingest(path, e.to_string()))?
        }
        None => corpus::split(
            manifest,
            SplitStrategy::PerSpeakerRatio { train: p.get("train_ratio")?, val: p.get("val_ratio")?, seed: p.seed()? },
        )?,
    })
}

fn probe_config(p: &Params) -> CliResult<ProbeConfig> {
    let cfg = ProbeConfig {
        hidden_layer_sizes: p.list("hidden")?,
        activation: p.get("activation")?,
        learning_rate_grid: p.list("lrs")?,
        max_epochs: p.get("max_epochs")?,
        patience: p.get("patience")?,
        batch_size: p.get("batch_size")?,
        repeats: p.get("repeats")?,
        seed: p.seed()?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn manifest(p: &Params) -> CliResult<Manifest> {
    Ok(Manifest::load(&p.path("manifest")?)?)
}

fn probe_rows(table: &mut Table, layer: &str, condition: &str, r: &ProbeResult) {
    for (i, (uar, lr)) in r.uar_per_run.iter().zip(&r.lr_per_run).enumerate() {
        table.push(row![layer, condition, i, lr, uar, r.std_uar]);
    }
    table.push(row![layer, condition, "mean", r.best_learning_rate, r.mean_uar, r.std_uar]);
}

const PROBE_HEADER: [&str; 6] = ["layer", "condition", "run", "lr", "uar", "std_uar"];

fn run_probe_cmd(p: &Params) -> CliResult<Table> {
    let cfg = probe_config(p)?;
    let full = manifest(p)?;
    let filter = Filter::parse(p.opt("filter").unwrap_or("")).map_err(|e| usage(e.to_string()))?;
    let m = full.filter(&filter)?;
    if m.is_empty() {
        return Err(CliError::Data(Error::invalid(format!("filter {filter} selects no utterances"))));
    }
    let layer = p.opt("layer");
    let set = corpus::load_pooled(&m, &p.path("embeddings_dir")?, layer)?;
    let split = load_split(p, &m)?;
    let (train, val, test) = probe::prepare_splits(&set, &m, &split)?;
    let result = probe::run_probe(&train, &val, &test, &cfg)?;
    let mut t = Table::new(&PROBE_HEADER);
    probe_rows(&mut t, layer.unwrap_or(""), &filter.to_string(), &result);
    Ok(t)
}

fn run_layerwise(p: &Params) -> CliResult<Table> {
    let cfg = probe_config(p)?;
    let m = manifest(p)?;
    let dir = p.path("embeddings_dir")?;
    let tags: Vec<String> = p.list("layers")?;
    let layers = tags
        .iter()
        .map(|l| Ok((l.clone(), corpus::load_pooled(&m, &dir, Some(l))?)))
        .collect::<CliResult<Vec<_>>>()?;
    let split = load_split(p, &m)?;
    let table = probe::layerwise(&layers, &m, &split, &cfg)?;
    let mut t = Table::new(&PROBE_HEADER);
    t.note("best_layer", &table.best_layer);
    for (layer, r) in &table.rows {
        probe_rows(&mut t, layer, "all", r);
    }
    Ok(t)
}

fn run_crosscond(p: &Params) -> CliResult<Table> {
    let cfg = probe_config(p)?;
    let m = manifest(p)?;
    let layer = p.opt("layer");
    let set = corpus::load_pooled(&m, &p.path("embeddings_dir")?, layer)?;
    let split = load_split(p, &m)?;
    let train = Filter::parse(p.text("train_cond")?).map_err(|e| usage(e.to_string()))?;
    let tests: Vec<Filter> = p
        .text("test_cond")?
        .split(';')
        .map(|s| Filter::parse(s).map_err(|e| usage(e.to_string())))
        .collect::<CliResult<_>>()?;
    let grid = ProbeGrid {
        hidden: p.list("hidden_grid")?,
        activations: p.list::<Activation>("activation_grid")?,
        learning_rates: p.list("lr_grid")?,
    };
    let results = probe::cross_condition(&set, &m, &split, &train, &tests, &grid, &cfg)?;
    let mut t = Table::new(&PROBE_HEADER);
    t.note("train_condition", &train);
    for c in &results {
        let r = &c.result;
        for (i, (uar, g)) in r.uar_per_run.iter().zip(&c.grid).enumerate() {
            t.push(row![layer.unwrap_or(""), c.condition, format!("{i}:{}/{}", g.hidden, g.activation), g.learning_rate, uar, r.std_uar]);
        }
        t.push(row![layer.unwrap_or(""), c.condition, "selected", r.best_learning_rate, c.selected_uar, r.std_uar]);
    }
    Ok(t)
}

fn run_cka(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let layer = p.opt("layer");
    let models: Vec<(String, PathBuf)> = p
        .text("models")?
        .split(',')
        .map(|s| {
            s.split_once('=')
                .map(|(t, d)| (t.trim().to_string(), PathBuf::from(d.trim())))
                .ok_or_else(|| usage(format!("--models entry {s:?} is not tag=dir")))
        })
        .collect::<CliResult<_>>()?;
    let sets = models
        .iter()
        .map(|(_, dir)| Ok(corpus::load_pooled(&m, dir, layer)?))
        .collect::<CliResult<Vec<_>>>()?;
    let reps: Vec<similarity::Representation> = models
        .iter()
        .zip(&sets)
        .map(|((tag, _), s)| similarity::Representation { tag: tag.clone(), ids: &s.ids, features: s.vectors.view() })
        .collect();
    let table = similarity::cka_table(&reps)?;
    let mut header = vec!["model".to_string()];
    header.extend(table.tags.iter().cloned());
    let mut t = Table { notes: Vec::new(), header, rows: Vec::new() };
    for (i, tag) in table.tags.iter().enumerate() {
        let mut r = vec![tag.clone()];
        r.extend(table.values.row(i).iter().map(|v| v.to_string()));
        t.push(r);
    }
    Ok(t)
}

fn metrics(p: &Params) -> CliResult<Vec<Metric>> {
    let text = p.text("metric")?;
    if text == "all" {
        return Ok(Metric::ALL.to_vec());
    }
    let ms: Vec<Metric> = p.list("metric")?;
    if ms.is_empty() {
        return Err(usage("--metric is empty"));
    }
    Ok(ms)
}

fn run_distmat(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let ms = metrics(p)?;
    let dir = p.path("embeddings_dir")?;
    let layer = p.opt("layer");
    let set = corpus::load_pooled(&m, &dir, layer)?;
    let frames = if ms.contains(&Metric::Hausdorff) && p.flag("hausdorff_frames")? {
        Some(corpus::load_frames(&m, &dir, layer)?)
    } else {
        None
    };
    let mut t = Table::new(&["id_a", "id_b", "metric", "value"]);
    match p.text("level")? {
        "utterance" => {
            for &metric in &ms {
                let rep = match (&frames, metric) {
                    (Some(f), Metric::Hausdorff) => distances::Representation::Frames(f),
                    _ => distances::Representation::Pooled(set.vectors.view()),
                };
                let mat = distances::pairwise_matrix(&set.ids, rep, metric)?;
                for (a, b, v) in mat.upper() {
                    t.push(row![a, b, metric, v]);
                }
            }
        }
        "speaker" => {
            let records = distances::pair_records(&m, &set.ids, set.vectors.view(), frames.as_deref(), &ms)?;
            for &metric in &ms {
                let mat = distances::speaker_aggregate(&records, &m, metric)?;
                let n = mat.ids.len();
                for i in 0..n {
                    for j in i..n {
                        t.push(row![mat.ids[i], mat.ids[j], metric, mat.values[[i, j]]]);
                    }
                }
            }
        }
        other => return Err(usage(format!("--level {other:?}: expected utterance or speaker"))),
    }
    Ok(t)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> crate::Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::ingest(path, format!("missing column {name:?}")))
}

/// Rows `(id_a, id_b, metric, value)` of a long-form distance file.
pub fn read_long_form(path: &Path) -> crate::Result<Vec<(String, String, Metric, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv_reader(&text);
    let h = rdr.headers().map_err(|e| Error::ingest(path, e.to_string()))?.clone();
    let cols = [column(&h, "id_a", path)?, column(&h, "id_b", path)?, column(&h, "metric", path)?, column(&h, "value", path)?];
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let bad = |why: String| Error::ingest(path, format!("record {}: {why}", n + 1));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let metric: Metric = rec[cols[2]].parse().map_err(|e: Error| bad(e.to_string()))?;
        let value: f64 = rec[cols[3]].parse().map_err(|_| bad(format!("value {:?} is not a number", &rec[cols[3]])))?;
        out.push((rec[cols[0]].to_string(), rec[cols[1]].to_string(), metric, value));
    }
    Ok(out)
}

/// Trial list written by `stimsel`.
pub fn read_trials(path: &Path) -> crate::Result<Vec<TrialSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv_reader(&text);
    let h = rdr.headers().map_err(|e| Error::ingest(path, e.to_string()))?.clone();
    let names = ["trial_id", "stim_1", "stim_2", "truth", "noise_order", "score"];
    let cols: Vec<usize> = names.iter().map(|n| column(&h, n, path)).collect::<crate::Result<_>>()?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let bad = |why: String| Error::ingest(path, format!("trial record {}: {why}", n + 1));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        out.push(TrialSpec {
            trial_id: rec[cols[0]].parse().map_err(|_| bad("bad trial_id".into()))?,
            stim_1: rec[cols[1]].to_string(),
            stim_2: rec[cols[2]].to_string(),
            truth: rec[cols[3]].parse::<Truth>().map_err(|e| bad(e.to_string()))?,
            noise_order: rec[cols[4]].parse::<NoiseOrder>().map_err(|e| bad(e.to_string()))?,
            score: rec[cols[5]].parse().map_err(|_| bad("bad score".into()))?,
        });
    }
    Ok(out)
}

fn run_stimsel(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let pairs_path = p.path("pairs")?;
    let mut by_pair: BTreeMap<(String, String), PairRecord> = BTreeMap::new();
    for (a, b, metric, v) in read_long_form(&pairs_path)? {
        let key = distances::pair_key(&a, &b);
        by_pair.entry(key).or_insert_with(|| PairRecord::new(&a, &b, false)).metrics.insert(metric, v);
    }
    for r in by_pair.values() {
        if let Some(missing) = Metric::ALL.iter().find(|m| !r.metrics.contains_key(m)) {
            return Err(Error::ingest(&pairs_path, format!("pair ({}, {}) has no {missing} value", r.utt_a, r.utt_b)).into());
        }
    }
    let exclude = match p.opt("exclude") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            stimsel::parse_exclusions(&text).map_err(|e| Error::ingest(path, e.to_string()))?
        }
        None => Default::default(),
    };
    let cfg = StimselConfig { k: p.get("k")?, seed: p.seed()?, raw_scores: p.flag("raw_scores")?, trim: p.get("trim")?, exclude };
    let outcome = stimsel::select_stimuli(by_pair.into_values().collect(), &m, &cfg)?;
    let trials = if p.flag("noisy_variants")? {
        stimsel::attach_noisy_variants(&outcome.trials, &m)?
    } else {
        outcome.trials
    };
    let mut t = Table::new(&["trial_id", "stim_1", "stim_2", "truth", "noise_order", "score"]);
    t.note("retained_pairs", outcome.retained);
    t.note("common_same", outcome.common.0);
    t.note("common_different", outcome.common.1);
    for tr in &trials {
        t.push(row![tr.trial_id, tr.stim_1, tr.stim_2, tr.truth, tr.noise_order, tr.score]);
    }
    Ok(t)
}

fn run_behave(p: &Params) -> CliResult<Table> {
    let path = p.path("responses")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let responses = behavior::responses_from_csv(&text).map_err(|e| Error::ingest(&path, e.to_string()))?;
    let keys = behavior::parse_group_keys(p.opt("group_by").unwrap_or("")).map_err(|e| usage(e.to_string()))?;
    let mut t = Table::new(&["section", "key", "statistic", "value"]);
    t.note("dprime_correction", DPRIME_CORRECTION);

    let subjects = behavior::summarize(&responses)?;
    for s in &subjects {
        for (stat, v) in [
            ("n_trials", s.n_trials as f64),
            ("accuracy", s.accuracy),
            ("hit_rate", s.hit_rate),
            ("fa_rate", s.fa_rate),
            ("d_prime", s.d_prime),
            ("mean_rt", s.mean_rt),
        ] {
            t.push(row!["subject", s.subject_id, stat, v]);
        }
    }
    let acc: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
    let dp: Vec<f64> = subjects.iter().map(|s| s.d_prime).collect();
    let sd = |v: &[f64]| if v.len() > 1 { crate::stats::var_sample(v).sqrt() } else { f64::NAN };
    for (stat, v) in [
        ("n_subjects", subjects.len() as f64),
        ("mean_accuracy", crate::stats::mean(&acc)),
        ("sd_accuracy", sd(&acc)),
        ("mean_d_prime", crate::stats::mean(&dp)),
        ("sd_d_prime", sd(&dp)),
    ] {
        t.push(row!["overall", "all", stat, v]);
    }
    if !keys.is_empty() {
        for c in behavior::breakdown(&responses, &keys)? {
            let key: Vec<String> = keys.iter().zip(&c.levels).map(|(k, l)| format!("{}={l}", k.name())).collect();
            let key = key.join("|");
            t.push(row!["group", key, "count", c.count]);
            t.push(row!["group", key, "accuracy", c.accuracy.map_or("NA".to_string(), |a| a.to_string())]);
        }
    }
    let per_trial = behavior::per_trial_accuracy(&responses);
    for (trial, a) in &per_trial {
        t.push(row!["trial", trial, "accuracy", a]);
    }
    if let Some(dist) = p.opt("correlate_with") {
        let trials_path = p.path("trials").map_err(|_| usage("--correlate-with needs --trials"))?;
        let trials = read_trials(&trials_path)?;
        let dist_path = PathBuf::from(dist);
        let mut by_metric: BTreeMap<Metric, BTreeMap<(String, String), f64>> = BTreeMap::new();
        for (a, b, metric, v) in read_long_form(&dist_path)? {
            by_metric.entry(metric).or_default().insert(distances::pair_key(&a, &b), v);
        }
        for (metric, values) in &by_metric {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for tr in &trials {
                let Some(a) = per_trial.get(&tr.trial_id) else { continue };
                let key = distances::pair_key(&tr.stim_1, &tr.stim_2);
                let v = values.get(&key).ok_or_else(|| {
                    Error::ingest(&dist_path, format!("no {metric} value for trial {} ({}, {})", tr.trial_id, tr.stim_1, tr.stim_2))
                })?;
                x.push(*v);
                y.push(*a);
            }
            let pr = behavior::pearson(&x, &y)?;
            let sr = behavior::spearman(&x, &y)?;
            for (stat, v) in [("pearson_r", pr.r), ("pearson_p", pr.p), ("spearman_r", sr.r), ("spearman_p", sr.p), ("n", pr.n as f64)] {
                t.push(row!["correlation", metric, stat, v]);
            }
        }
    } else if p.opt("trials").is_some() {
        // the trial list is only needed for correlations; still check it parses
        read_trials(&p.path("trials")?)?;
    }
    Ok(t)
}

/// Pooled set standardized with statistics from the rows in `fit_ids`.
fn standardized(set: &corpus::PooledSet, fit_ids: &[String]) -> crate::Result<(corpus::PooledSet, Standardizer)> {
    let s = Standardizer::fit(set.select(fit_ids)?.view())?;
    Ok((corpus::PooledSet::new(set.ids.clone(), s.apply_rows(set.vectors.view()))?, s))
}

fn run_aspd_train(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let seed = p.seed()?;
    let set = corpus::load_pooled(&m, &p.path("embeddings_dir")?, p.opt("layer"))?;
    let split = load_split(p, &m)?;
    let train_m = split.subset(&m, corpus::Partition::Train);
    let val_m = split.subset(&m, corpus::Partition::Val);
    let train_ids: Vec<String> = train_m.iter().map(|u| u.utterance_id.clone()).collect();
    let (set, scaler) = standardized(&set, &train_ids)?;
    let train_gen = PairGenerator::new(&train_m, &set, p.get("n_pairs")?, seed)?;
    let val_gen = PairGenerator::new(&val_m, &set, p.get("val_pairs")?, seed ^ 0x5A5A_5A5A)?;
    let (val_x, val_y) = val_gen.materialize(0);

    let layers: Vec<Vec<usize>> = p
        .text("layers_grid")?
        .split(';')
        .map(|s| parse_list(s, ','))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("--layers-grid: {e}")))?;
    let grid = DecoderGrid {
        batch_sizes: p.list("batch_grid")?,
        learning_rates: p.list("lr_grid")?,
        layer_sets: layers,
        node_grid: p.list("node_grid")?,
    };
    let base = DecoderConfig { max_epochs: p.get("max_epochs")?, patience: p.get("patience")?, seed, ..DecoderConfig::default() };
    let first = grid.table(&base);
    if first.is_empty() {
        return Err(usage("decoder grid is empty"));
    }
    let mut rows = discrim::grid_search(&train_gen, val_x.view(), &val_y, &first)?;
    let best_of = |rows: &[discrim::GridRow]| {
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            if r.val_accuracy > rows[best].val_accuracy {
                best = i;
            }
        }
        rows[best].config.clone()
    };
    let round = grid.node_round(&best_of(&rows));
    if !round.is_empty() {
        rows.extend(discrim::grid_search(&train_gen, val_x.view(), &val_y, &round)?);
    }
    let best = best_of(&rows);
    let mut t = Table::new(&["lr", "batch", "layers", "val_acc"]);
    for r in &rows {
        let layers: Vec<String> = r.config.layer_sizes.iter().map(|n| n.to_string()).collect();
        t.push(row![r.config.learning_rate, r.config.batch_size, layers.join("-"), r.val_accuracy]);
    }
    if let Some(path) = p.opt("model_out") {
        let mut decoder = discrim::train_decoder(&train_gen.batches(best.batch_size), val_x.view(), &val_y, &best)?;
        decoder.standardizer = Some(scaler);
        t.note("best_val_acc", decoder.val_accuracy);
        let json = serde_json::to_string(&decoder).map_err(|e| Error::invalid(format!("decoder serialization: {e}")))?;
        write_atomic(Path::new(path), json.as_bytes())?;
    }
    Ok(t)
}

fn run_aspd_eval(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let set = corpus::load_pooled(&m, &p.path("embeddings_dir")?, p.opt("layer"))?;
    let model_path = p.path("model")?;
    let text = std::fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let decoder: Decoder = serde_json::from_str(&text).map_err(|e| Error::ingest(&model_path, e.to_string()))?;
    if decoder_input(&decoder) != Some(2 * set.dim()) {
        return Err(Error::ingest(&model_path, format!("decoder does not take pairs of {}-dimensional embeddings", set.dim())).into());
    }
    let trials = read_trials(&p.path("trials")?)?;
    let decisions = discrim::evaluate_on_trials(&decoder, &trials, &set)?;
    let mut t = Table::new(&["trial_id", "stim_1", "stim_2", "truth", "probability_same", "decision", "correct"]);
    let mut correct = 0usize;
    for (tr, d) in trials.iter().zip(&decisions) {
        let ok = (d.decision == behavior::Response::Same) == (tr.truth == Truth::Same);
        correct += ok as usize;
        t.push(row![tr.trial_id, tr.stim_1, tr.stim_2, tr.truth, d.probability_same, d.decision, ok as u8]);
    }
    if !trials.is_empty() {
        t.note("accuracy", correct as f64 / trials.len() as f64);
    }
    Ok(t)
}

fn decoder_input(d: &Decoder) -> Option<usize> {
    d.standardizer.as_ref().map(|s| 2 * s.mean.len())
}

fn speaker_matrices(path: &Path) -> crate::Result<Vec<DistanceMatrix>> {
    let mut by_metric: BTreeMap<Metric, Vec<(String, String, f64)>> = BTreeMap::new();
    for (a, b, metric, v) in read_long_form(path)? {
        by_metric.entry(metric).or_default().push((a, b, v));
    }
    Ok(by_metric
        .into_iter()
        .map(|(metric, cells)| {
            let mut ids: Vec<String> = cells.iter().flat_map(|(a, b, _)| [a.clone(), b.clone()]).collect();
            ids.sort();
            ids.dedup();
            let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut values = Array2::from_elem((ids.len(), ids.len()), f64::NAN);
            for (a, b, v) in &cells {
                let (i, j) = (pos[a.as_str()], pos[b.as_str()]);
                values[[i, j]] = *v;
                values[[j, i]] = *v;
            }
            DistanceMatrix { ids, values, metric }
        })
        .collect())
}

fn run_confusion(p: &Params) -> CliResult<Table> {
    let m = manifest(p)?;
    let set = corpus::load_pooled(&m, &p.path("embeddings_dir")?, p.opt("layer"))?;
    let cfg = BootstrapConfig {
        n_trials: p.get("n_trials")?,
        train_per_speaker: p.get("train_per_speaker")?,
        test_per_speaker: p.get("test_per_speaker")?,
        seed: p.seed()?,
        probe: ProbeConfig {
            hidden_layer_sizes: p.list("hidden")?,
            learning_rate_grid: vec![p.get("lr")?],
            max_epochs: p.get("max_epochs")?,
            patience: p.get("patience")?,
            repeats: 1,
            ..ProbeConfig::default()
        },
    };
    let conf = discrim::bootstrap_confusion(&set, &m, &cfg)?;
    let mut header = vec!["speaker".to_string()];
    header.extend(conf.speakers.iter().cloned());
    header.push("misidentifications".into());
    let mut t = Table { notes: Vec::new(), header, rows: Vec::new() };
    let mis = conf.misidentifications();
    for (i, s) in conf.speakers.iter().enumerate() {
        let mut r = vec![s.clone()];
        r.extend(conf.counts.row(i).iter().map(|c| c.to_string()));
        r.push(mis[i].to_string());
        t.push(r);
    }
    t.note("off_diagonal_total", conf.off_diagonal_total());
    if let Some(dist) = p.opt("distances") {
        let out = p.path("correlations_out").map_err(|_| usage("--distances needs --correlations-out"))?;
        let mats = speaker_matrices(Path::new(dist))?;
        let rows = discrim::confusion_vs_distance(&conf, &mats, &discrim::mean_durations(&m))?;
        let mut ct = Table::new(&["x", "y", "r", "p", "n"]);
        for r in rows {
            ct.push(row![r.x, r.y, r.result.r, r.result.p, r.result.n]);
        }
        write_table(p, &out, &ct)?;
    }
    Ok(t)
}

fn holdout_index(ids: &[&str], wanted: Option<&str>) -> CliResult<Option<usize>> {
    match wanted {
        None => Ok(None),
        Some(w) => ids
            .iter()
            .position(|id| *id == w)
            .map(Some)
            .ok_or_else(|| usage(format!("--holdout-run {w:?} is not in the runs file"))),
    }
}

fn lag_sets(p: &Params) -> CliResult<Vec<Vec<usize>>> {
    p.text("lags")?
        .split(';')
        .map(|s| parse_list(s, ','))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("--lags: {e}")))
}

fn run_encode(p: &Params) -> CliResult<Table> {
    let runs = encoding::load_runs(&p.path("runs")?)?;
    let ids: Vec<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
    let holdout = holdout_index(&ids, p.opt("holdout_run"))?.unwrap_or(runs.len() - 1);
    let per_target_alpha = match p.text("alpha_mode")? {
        "per_target" => true,
        "global" => false,
        other => return Err(usage(format!("--alpha-mode {other:?}: expected per_target or global"))),
    };
    let cfg = EncodingConfig { alpha_grid: p.list("alpha_grid")?, lags_grid: lag_sets(p)?, per_target_alpha };
    let res = encoding::loro_cv(&runs, holdout, &cfg)?;
    let mut t = Table::new(&["target_index", "r", "r2", "alpha"]);
    t.note("holdout_run", &res.holdout_run);
    t.note("lags", res.lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
    for (i, ((r, r2), a)) in res.r.iter().zip(&res.r2).zip(&res.alpha).enumerate() {
        t.push(row![i, r, r2, a]);
    }
    Ok(t)
}

fn run_decode_labels(p: &Params) -> CliResult<Table> {
    let runs_path = p.path("runs")?;
    let listed = encoding::read_runs_csv(&runs_path)?;
    let seg_path = p.path("segments")?;
    let seg_text = std::fs::read_to_string(&seg_path).map_err(|e| Error::io(&seg_path, e))?;
    let segments = encoding::read_segments(&seg_text).map_err(|e| Error::ingest(&seg_path, e.to_string()))?;
    let mode: LabelMode = p.get("mode")?;
    let mut runs = Vec::with_capacity(listed.len());
    for (id, features, _, tr) in &listed {
        let x = crate::npy::load_matrix(features)?;
        let mine: Vec<(f64, f64)> = segments
            .iter()
            .filter(|(run, _, _)| run.as_deref().is_none_or(|r| r == id))
            .map(|&(_, a, b)| (a, b))
            .collect();
        let labels = encoding::align_labels(&mine, x.nrows(), *tr, mode)
            .map_err(|e| Error::ingest(&seg_path, format!("run {id}: {e}")))?;
        runs.push(LabelRun { run_id: id.clone(), features: x, labels });
    }
    let ids: Vec<&str> = listed.iter().map(|r| r.0.as_str()).collect();
    let holdouts: Vec<usize> = match holdout_index(&ids, p.opt("holdout_run"))? {
        Some(h) => vec![h],
        None => (0..runs.len()).collect(),
    };
    let c_grid: Vec<f64> = p.list("c_grid")?;
    let lags: Vec<usize> = p.list("lags")?;
    let seed = p.seed()?;
    let mut t = Table::new(&["holdout_run", "mode", "c", "balanced_accuracy"]);
    for h in holdouts {
        let res = encoding::svc_decode(&runs, h, &c_grid, &lags, seed)?;
        t.push(row![res.holdout_run, mode, res.c, res.balanced_accuracy]);
    }
    Ok(t)
}

fn run(p: &Params) -> CliResult<Table> {
    match p.command {
        "probe" => run_probe_cmd(p),
        "layerwise" => run_layerwise(p),
        "crosscond" => run_crosscond(p),
        "cka" => run_cka(p),
        "distmat" => run_distmat(p),
        "stimsel" => run_stimsel(p),
        "behave" => run_behave(p),
        "aspd train" => run_aspd_train(p),
        "aspd eval" => run_aspd_eval(p),
        "confusion" => run_confusion(p),
        "encode" => run_encode(p),
        "decode-labels" => run_decode_labels(p),
        other => Err(usage(format!("unknown subcommand {other}"))),
    }
}

/// Resolves the subcommand and its parameters from parsed arguments.
fn resolve(m: &ArgMatches) -> CliResult<Params> {
    let (name, sm) = m.subcommand().ok_or_else(|| usage("no subcommand given"))?;
    let (full, leaf_m) = match sm.subcommand() {
        Some((mode, lm)) if name == "aspd" => (format!("aspd {mode}"), lm),
        _ => (name.to_string(), sm),
    };
    let sub = SUBS.iter().find(|s| s.name == full).ok_or_else(|| usage(format!("unknown subcommand {full}")))?;
    Params::resolve(sub, leaf_m)
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    1
                }
                _ => {
                    let msg = e.to_string();
                    eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
                    1
                }
            };
        }
    };
    let outcome = resolve(&matches).and_then(|p| {
        let threads: usize = p.get("threads")?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| usage(format!("--threads: {e}")))?;
        let out = p.path("out")?;
        pool.install(|| {
            let table = run(&p)?;
            write_table(&p, &out, &table)?;
            Ok(())
        })
    });
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// The canonical configuration and its hash for `argv`, without running anything.
pub fn resolved_config<I, T>(argv: I) -> std::result::Result<(String, String), String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command().try_get_matches_from(argv).map_err(|e| e.to_string())?;
    let p = resolve(&m).map_err(|e| match e {
        CliError::Usage(s) => s,
        CliError::Data(e) => e.to_string(),
    })?;
    Ok((canonical_config(&p.values), config_hash(&p.values)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("voiceprobe".to_string()).chain(s.split_whitespace().map(String::from)).collect()
    }

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
        for sub in SUBS {
            let mut names: Vec<&str> = params(sub).map(|p| p.name).collect();
            names.sort_unstable();
            let n = names.len();
            names.dedup();
            assert_eq!(n, names.len(), "duplicate parameter in {}", sub.name);
        }
    }

    #[test]
    fn hash_is_over_sorted_lines() {
        let mut c = BTreeMap::new();
        c.insert("seed".to_string(), "3".to_string());
        c.insert("k".to_string(), "50".to_string());
        c.insert("out".to_string(), "x.csv".to_string());
        assert_eq!(canonical_config(&c), "k=50\nseed=3\n");
        let expected = hex::encode(Sha256::digest(b"k=50\nseed=3\n"));
        assert_eq!(config_hash(&c), expected);
    }

    #[test]
    fn precedence_and_output_independence() {
        let (a, ha) = resolved_config(argv("encode --runs r.csv --out a.csv")).unwrap();
        let (_, hb) = resolved_config(argv("encode --runs r.csv --out b.csv --threads 3")).unwrap();
        assert_eq!(ha, hb);
        assert!(a.contains("alpha_mode=per_target\n") && a.contains("command=encode\n"));
        let (_, hc) = resolved_config(argv("encode --runs r.csv --out a.csv --seed 9")).unwrap();
        assert_ne!(ha, hc);

        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "# grid\nalpha-mode = global\nseed=4\n").unwrap();
        let c = cfg.display();
        let (text, _) = resolved_config(argv(&format!("encode --runs r.csv --out a.csv --config {c}"))).unwrap();
        assert!(text.contains("alpha_mode=global\n") && text.contains("seed=4\n"));
        let (text, _) = resolved_config(argv(&format!("encode --runs r.csv --out a.csv --config {c} --seed 5"))).unwrap();
        assert!(text.contains("seed=5\n"));

        std::fs::write(&cfg, "bogus=1\n").unwrap();
        let err = resolved_config(argv(&format!("encode --runs r.csv --out a.csv --config {c}"))).unwrap_err();
        assert!(err.contains("bogus"));
    }

    #[test]
    fn required_parameters_can_come_from_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "runs=r.csv\nout=o.csv\n").unwrap();
        assert!(resolved_config(argv(&format!("encode --config {}", cfg.display()))).is_ok());
        assert!(resolved_config(argv("encode --out o.csv")).unwrap_err().contains("--runs"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(argv("frobnicate")), 1);
        // the runs file is missing: a data error
        assert_eq!(dispatch(argv("encode --runs /nonexistent/r.csv --out o.csv")), 2);
        assert_eq!(dispatch(argv("encode --out o.csv")), 1);
        assert_eq!(dispatch(argv("--help")), 0);
    }
}
