//! Text formats: pairs TSV, token tables, model checkpoints, trial logs,
//! metrics JSON and benchmark CSV.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{Dataset, EmbeddingModel};
use crate::train::{EpochStats, Method};

pub const CHECKPOINT_MAGIC: &str = "VSEENS";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRIAL_LOG_HEADER: &str = "epoch,mean_trials,updates,skipped,wall_time_seconds";
pub const BENCH_HEADER: &str =
    "method,epoch,mean_trials,updates,skipped,ns_per_draw,wall_time_seconds";

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Token ↔ dense index table; indices follow first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(Error::config(format!("duplicate token '{t}'")));
            }
            v.intern(&t);
        }
        Ok(v)
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Writes `index\ttoken` lines in index order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for (i, t) in vocab.tokens().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{t}");
    }
    write_string(path, &out)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_to_string(path)?;
    let mut vocab = Vocab::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, token) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, lineno, "expected '<index>\\t<token>'"))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad index '{idx}'")))?;
        if idx != vocab.len() {
            return Err(parse_error(path, lineno, format!("expected index {}, got {idx}", vocab.len())));
        }
        if token.is_empty() || token.contains('\t') || vocab.get(token).is_some() {
            return Err(parse_error(path, lineno, format!("invalid or repeated token '{token}'")));
        }
        vocab.intern(token);
    }
    Ok(vocab)
}

/// Raw pairs read from a TSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairList {
    /// Unique pairs in first-seen order.
    pub pairs: Vec<(usize, usize)>,
    pub duplicates: usize,
}

/// Parses `image\tannotation` lines, interning tokens into the given tables.
/// `#` lines and blank lines are skipped.
pub fn read_pairs(path: &Path, images: &mut Vocab, annotations: &mut Vocab) -> Result<PairList> {
    let text = read_to_string(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    let mut duplicates = 0;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(parse_error(path, lineno, "empty token"));
        }
        let pair = (images.intern(fields[0]), annotations.intern(fields[1]));
        if seen.insert(pair) {
            pairs.push(pair);
        } else {
            duplicates += 1;
        }
    }
    Ok(PairList { pairs, duplicates })
}

#[derive(Clone, Debug)]
pub struct LoadedPairs {
    pub dataset: Dataset,
    pub images: Vocab,
    pub annotations: Vocab,
    pub duplicates: usize,
}

/// Loads a pairs file with fresh token tables.
pub fn load_pairs(path: &Path) -> Result<LoadedPairs> {
    load_pairs_with(path, Vocab::new(), Vocab::new())
}

/// Loads a pairs file, extending existing token tables. The dataset spans
/// every token in the tables.
pub fn load_pairs_with(path: &Path, mut images: Vocab, mut annotations: Vocab) -> Result<LoadedPairs> {
    let list = read_pairs(path, &mut images, &mut annotations)?;
    if list.pairs.is_empty() {
        return Err(Error::config(format!("{}: no pairs found", path.display())));
    }
    let dataset = Dataset::from_pairs(images.len(), annotations.len(), list.pairs)?;
    Ok(LoadedPairs {
        dataset,
        images,
        annotations,
        duplicates: list.duplicates,
    })
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)], images: &Vocab, annotations: &Vocab) -> Result<()> {
    let mut out = String::new();
    for &(i, a) in pairs {
        let _ = writeln!(out, "{}\t{}", images.token(i), annotations.token(a));
    }
    write_string(path, &out)
}

/// Checkpoint text: header `VSEENS 1 <images> <annotations> <k>`, then image
/// rows and annotation rows, one per line. Values round-trip exactly.
pub fn model_to_string(model: &EmbeddingModel) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {} {}",
        model.num_images(),
        model.num_annotations(),
        model.k()
    );
    let k = model.k();
    for row in model
        .image_factors()
        .chunks_exact(k)
        .chain(model.annotation_factors().chunks_exact(k))
    {
        for (f, v) in row.iter().enumerate() {
            if f > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_model(path: &Path, model: &EmbeddingModel) -> Result<()> {
    write_string(path, &model_to_string(model))
}

pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    parse_model(path, &read_to_string(path)?)
}

fn parse_model(path: &Path, text: &str) -> Result<EmbeddingModel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_error(path, 1, "empty checkpoint"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != CHECKPOINT_MAGIC {
        return Err(parse_error(path, 1, "expected 'VSEENS 1 <images> <annotations> <k>'"));
    }
    if fields[1] != CHECKPOINT_VERSION.to_string() {
        return Err(parse_error(path, 1, format!("unsupported version {}", fields[1])));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_error(path, 1, format!("bad dimension '{s}'")))
    };
    let (ni, na, k) = (dim(fields[2])?, dim(fields[3])?, dim(fields[4])?);
    if k == 0 {
        return Err(parse_error(path, 1, "k must be positive"));
    }
    let mut values = Vec::with_capacity((ni + na) * k);
    let mut rows = 0;
    for (n, line) in lines {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        if rows == ni + na {
            return Err(parse_error(path, lineno, "more rows than the header declares"));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_error(path, lineno, format!("bad number '{tok}'")))?;
            if !v.is_finite() {
                return Err(parse_error(path, lineno, "non-finite value"));
            }
            values.push(v);
        }
        if values.len() - before != k {
            return Err(parse_error(
                path,
                lineno,
                format!("expected {k} values, found {}", values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != ni + na {
        return Err(parse_error(
            path,
            text.lines().count(),
            format!("expected {} rows, found {rows}", ni + na),
        ));
    }
    let annotation = values.split_off(ni * k);
    EmbeddingModel::from_parts(ni, na, k, values, annotation)
}

pub fn trial_log_to_string(log: &[EpochStats]) -> String {
    let mut out = String::from(TRIAL_LOG_HEADER);
    out.push('\n');
    for s in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch, s.mean_trials, s.updates, s.skipped, s.wall_time
        );
    }
    out
}

pub fn write_trial_log(path: &Path, log: &[EpochStats]) -> Result<()> {
    if log.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::config("trial log epochs must be strictly increasing"));
    }
    write_string(path, &trial_log_to_string(log))
}

pub fn metrics_to_json(report: &MetricsReport) -> String {
    serde_json::to_string(report).expect("metrics serialize")
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut s = metrics_to_json(report);
    s.push('\n');
    write_string(path, &s)
}

pub fn bench_to_string(runs: &[(Method, Vec<EpochStats>)]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for (method, log) in runs {
        for s in log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                method.name(),
                s.epoch,
                s.mean_trials,
                s.updates,
                s.skipped,
                s.ns_per_draw(),
                s.wall_time
            );
        }
    }
    out
}

pub fn write_bench(path: &Path, runs: &[(Method, Vec<EpochStats>)]) -> Result<()> {
    write_string(path, &bench_to_string(runs))
}
