//! Pre-tokenized corpora, windowed n-gram counts and smoothed conditional matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{decode, encode, ConditionalOperator, Language};
use crate::error::{Error, Result};
use crate::modes::ModeDecomposition;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub records: Vec<Vec<u32>>,
    pub alphabet_size: usize,
}

impl TokenStream {
    pub fn new(records: Vec<Vec<u32>>, alphabet_size: usize) -> Result<Self> {
        if alphabet_size == 0 {
            return Err(Error::InvalidArgument("alphabet size must be >= 1".into()));
        }
        for doc in &records {
            if doc.is_empty() {
                return Err(Error::InvalidArgument("documents must be non-empty".into()));
            }
            if let Some(&t) = doc.iter().find(|&&t| t as usize >= alphabet_size) {
                return Err(Error::TokenOutOfRange { token: t, alphabet: alphabet_size });
            }
        }
        Ok(Self { records, alphabet_size })
    }

    /// Parses the `#alphabet <n>` header followed by one record per line.
    ///
    /// Blank lines are skipped. Line numbers in errors are 1-based.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut alphabet = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if alphabet.is_none() {
                let n = trimmed
                    .strip_prefix("#alphabet")
                    .and_then(|rest| rest.trim().parse::<usize>().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Format {
                        line: lineno,
                        message: "expected header `#alphabet <n>` with n >= 1".into(),
                    })?;
                alphabet = Some(n);
                continue;
            }
            let n = alphabet.unwrap_or_default();
            let mut doc = Vec::new();
            for field in trimmed.split_whitespace() {
                let token: u32 = field.parse().map_err(|_| Error::Format {
                    line: lineno,
                    message: format!("invalid token id `{field}`"),
                })?;
                if token as usize >= n {
                    return Err(Error::Format {
                        line: lineno,
                        message: format!("token id {token} out of range for alphabet of size {n}"),
                    });
                }
                doc.push(token);
            }
            records.push(doc);
        }
        let alphabet_size = alphabet.ok_or(Error::EmptyCorpus)?;
        Self::new(records, alphabet_size)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#alphabet {}", self.alphabet_size)?;
        for doc in &self.records {
            let line: Vec<String> = doc.iter().map(u32::to_string).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// `count(x)` is the raw occurrence count; columns may be sub-stochastic.
    Paper,
    /// `count(x)` is the sum of retained `(x, y)` counts; columns sum to 1.
    #[default]
    Stochastic,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Paper => "paper",
            Policy::Stochastic => "stochastic",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Policy::Paper),
            "stochastic" => Ok(Policy::Stochastic),
            other => Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
        }
    }
}

pub type Seq = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub xy_counts: BTreeMap<(Seq, Seq), u64>,
    /// Occurrences of each retained `x` anywhere in a document, including
    /// positions too close to the end to have a continuation.
    pub x_counts: BTreeMap<Seq, u64>,
    pub min_count: u64,
    pub min_y_count: u64,
    /// Windows seen before filtering.
    pub total_windows: u64,
}

impl CountTable {
    /// Number of windows starting with each retained `x`.
    pub fn window_counts(&self) -> BTreeMap<Seq, u64> {
        let mut out = BTreeMap::new();
        for ((x, _), c) in &self.xy_counts {
            *out.entry(x.clone()).or_insert(0) += c;
        }
        out
    }

    pub fn y_set(&self) -> Vec<Seq> {
        let mut ys: Vec<Seq> = self.xy_counts.keys().map(|(_, y)| y.clone()).collect();
        ys.sort();
        ys.dedup();
        ys
    }

    /// `x_ids<TAB>y_ids<TAB>count`, ids comma-separated, keys in sorted order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for ((x, y), c) in &self.xy_counts {
            writeln!(w, "{}\t{}\t{}", join_ids(x), join_ids(y), c)?;
        }
        Ok(())
    }

    /// `x_ids<TAB>count` for the occurrence counts.
    pub fn write_x_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (x, c) in &self.x_counts {
            writeln!(w, "{}\t{}", join_ids(x), c)?;
        }
        Ok(())
    }

    /// Rebuilds a table from its two TSV exports and the filter metadata.
    pub fn read_tsv<R: BufRead, S: BufRead>(xy: R, x: S, meta: &CountMeta) -> Result<Self> {
        let mut xy_counts = BTreeMap::new();
        for (i, line) in xy.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format { line: i + 1, message: "expected 3 tab-separated fields".into() });
            }
            let xs = parse_ids(fields[0], i + 1, meta.k, meta.alphabet_size)?;
            let ys = parse_ids(fields[1], i + 1, meta.l, meta.alphabet_size)?;
            let c = parse_count(fields[2], i + 1)?;
            xy_counts.insert((xs, ys), c);
        }
        let mut x_counts = BTreeMap::new();
        for (i, line) in x.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Format { line: i + 1, message: "expected 2 tab-separated fields".into() });
            }
            let xs = parse_ids(fields[0], i + 1, meta.k, meta.alphabet_size)?;
            x_counts.insert(xs, parse_count(fields[1], i + 1)?);
        }
        Ok(Self {
            k: meta.k,
            l: meta.l,
            alphabet_size: meta.alphabet_size,
            xy_counts,
            x_counts,
            min_count: meta.min_count,
            min_y_count: meta.min_y_count,
            total_windows: meta.total_windows,
        })
    }

    pub fn meta(&self) -> CountMeta {
        CountMeta {
            k: self.k,
            l: self.l,
            alphabet_size: self.alphabet_size,
            min_count: self.min_count,
            min_y_count: self.min_y_count,
            total_windows: self.total_windows,
            retained_x: self.x_counts.len(),
            retained_y: self.y_set().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMeta {
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub min_count: u64,
    pub min_y_count: u64,
    pub total_windows: u64,
    pub retained_x: usize,
    pub retained_y: usize,
}

pub fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_ids(field: &str, line: usize, len: usize, alphabet: usize) -> Result<Seq> {
    let ids = field
        .split(',')
        .map(|t| t.trim().parse::<u32>())
        .collect::<std::result::Result<Seq, _>>()
        .map_err(|_| Error::Format { line, message: format!("invalid id list `{field}`") })?;
    if ids.len() != len {
        return Err(Error::Format { line, message: format!("expected {len} ids, got {}", ids.len()) });
    }
    if let Some(&t) = ids.iter().find(|&&t| t as usize >= alphabet) {
        return Err(Error::Format { line, message: format!("token id {t} out of range") });
    }
    Ok(ids)
}

fn parse_count(field: &str, line: usize) -> Result<u64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format { line, message: format!("invalid count `{field}`") })
}

#[derive(Default)]
struct RawCounts {
    xy: BTreeMap<(Seq, Seq), u64>,
    x: BTreeMap<Seq, u64>,
    windows: u64,
}

impl RawCounts {
    fn merge(mut self, other: RawCounts) -> RawCounts {
        for (key, c) in other.xy {
            *self.xy.entry(key).or_insert(0) += c;
        }
        for (key, c) in other.x {
            *self.x.entry(key).or_insert(0) += c;
        }
        self.windows += other.windows;
        self
    }
}

fn count_document(doc: &[u32], k: usize, l: usize) -> RawCounts {
    let mut raw = RawCounts::default();
    if doc.len() < k {
        return raw;
    }
    for i in 0..=(doc.len() - k) {
        let x = &doc[i..i + k];
        *raw.x.entry(x.to_vec()).or_insert(0) += 1;
        if i + k + l <= doc.len() {
            *raw.xy.entry((x.to_vec(), doc[i + k..i + k + l].to_vec())).or_insert(0) += 1;
            raw.windows += 1;
        }
    }
    raw
}

/// Counts every stride-1 window `(x, y)` inside each document, then keeps the
/// `x` occurring at least `min_count` times and, among windows with a retained
/// `x`, the `y` occurring at least `min_y_count` times.
pub fn stream_ngram_counts(
    stream: &TokenStream,
    k: usize,
    l: usize,
    min_count: u64,
    min_y_count: u64,
) -> Result<CountTable> {
    if k == 0 || l == 0 {
        return Err(Error::InvalidArgument("k and l must be >= 1".into()));
    }
    if stream.records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let raw = stream
        .records
        .par_iter()
        .map(|doc| count_document(doc, k, l))
        .reduce(RawCounts::default, RawCounts::merge);
    if raw.windows == 0 {
        return Err(Error::NoWindows(k + l));
    }
    let x_counts: BTreeMap<Seq, u64> = raw.x.into_iter().filter(|(_, c)| *c >= min_count).collect();
    let mut y_totals: BTreeMap<&Seq, u64> = BTreeMap::new();
    for ((x, y), c) in &raw.xy {
        if x_counts.contains_key(x) {
            *y_totals.entry(y).or_insert(0) += c;
        }
    }
    let xy_counts = raw
        .xy
        .iter()
        .filter(|((x, y), _)| x_counts.contains_key(x) && y_totals.get(y).is_some_and(|&c| c >= min_y_count))
        .map(|(key, c)| (key.clone(), *c))
        .collect();
    Ok(CountTable {
        k,
        l,
        alphabet_size: stream.alphabet_size,
        xy_counts,
        x_counts,
        min_count,
        min_y_count,
        total_windows: raw.windows,
    })
}

/// Laplace-smoothed `P(y|x) = (count(x,y) + λ) / (count(x) + λ|Y|)`.
///
/// Contexts whose policy count is zero carry no marginal mass and are dropped.
pub fn build_conditional_matrix(counts: &CountTable, lambda_smooth: f64, policy: Policy) -> Result<ConditionalOperator> {
    if !(lambda_smooth >= 0.0 && lambda_smooth.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda_smooth must be >= 0, got {lambda_smooth}")));
    }
    let ys = counts.y_set();
    if ys.is_empty() {
        return Err(Error::EmptyTable);
    }
    let y_index: BTreeMap<&Seq, usize> = ys.iter().enumerate().map(|(i, y)| (y, i)).collect();
    let window_counts = counts.window_counts();
    let mut by_x: BTreeMap<&Seq, Vec<(&Seq, u64)>> = BTreeMap::new();
    for ((x, y), &c) in &counts.xy_counts {
        by_x.entry(x).or_default().push((y, c));
    }
    let mut x_labels = Vec::new();
    let mut denominators = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (x, &occ) in &counts.x_counts {
        let base = match policy {
            Policy::Stochastic => window_counts.get(x).copied().unwrap_or(0),
            Policy::Paper => occ,
        };
        if base == 0 {
            continue;
        }
        let mut col = vec![0.0; ys.len()];
        for (y, c) in by_x.get(x).into_iter().flatten() {
            col[y_index[y]] = *c as f64;
        }
        let denom = base as f64 + lambda_smooth * ys.len() as f64;
        for v in col.iter_mut() {
            *v = (*v + lambda_smooth) / denom;
        }
        x_labels.push(x.clone());
        denominators.push(base as f64);
        columns.push(col);
    }
    if x_labels.is_empty() {
        return Err(Error::EmptyTable);
    }
    let total: f64 = denominators.iter().sum();
    let marginal = DVector::from_iterator(denominators.len(), denominators.iter().map(|c| c / total));
    let matrix = DMatrix::from_fn(ys.len(), x_labels.len(), |y, x| columns[x][y]);
    let mut op = ConditionalOperator::new(counts.k, counts.l, counts.alphabet_size, x_labels, ys, matrix, marginal)?;
    op.meta.policy = Some(policy.to_string());
    op.meta.smoothing = Some(lambda_smooth);
    op.meta.source = Some("corpus".into());
    Ok(op)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualExample {
    pub document: usize,
    pub position: usize,
    pub before: Seq,
    pub x: Seq,
    pub y: Seq,
    pub after: Seq,
}

/// Occurrences of the component's top continuation after a highly loaded context.
///
/// The context band starts at `loading_fraction` of the maximum right loading
/// and widens by 0.1 up to 0.5 until some occurrence is found.
pub fn extract_contextual_examples(
    stream: &TokenStream,
    dec: &ModeDecomposition,
    component: usize,
    window: usize,
    loading_fraction: f64,
) -> Result<Vec<ContextualExample>> {
    if component >= dec.n_plus {
        return Err(Error::OutOfRange { index: component, len: dec.n_plus });
    }
    if !(loading_fraction > 0.0 && loading_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("loading_fraction must lie in (0, 1], got {loading_fraction}")));
    }
    let u = dec.left.column(component);
    let mut top_y = 0;
    for (i, v) in u.iter().enumerate() {
        if v.abs() > u[top_y].abs() {
            top_y = i;
        }
    }
    let y = &dec.y_labels[top_y];
    let v = dec.right.column(component);
    let vmax = v.amax();
    let (k, l) = (dec.k, dec.l);

    let mut band = loading_fraction;
    loop {
        let threshold = (1.0 - band) * vmax;
        let xs: Vec<&Seq> = dec
            .x_labels
            .iter()
            .zip(v.iter())
            .filter(|(_, val)| val.abs() >= threshold)
            .map(|(x, _)| x)
            .collect();
        let mut found = Vec::new();
        for (d, doc) in stream.records.iter().enumerate() {
            if doc.len() < k + l {
                continue;
            }
            for i in 0..=(doc.len() - k - l) {
                let (wx, wy) = (&doc[i..i + k], &doc[i + k..i + k + l]);
                if wy == y.as_slice() && xs.iter().any(|x| x.as_slice() == wx) {
                    let end = (i + k + l + window).min(doc.len());
                    found.push(ContextualExample {
                        document: d,
                        position: i,
                        before: doc[i.saturating_sub(window)..i].to_vec(),
                        x: wx.to_vec(),
                        y: wy.to_vec(),
                        after: doc[i + k + l..end].to_vec(),
                    });
                }
            }
        }
        if !found.is_empty() || band >= 0.5 - 1e-12 {
            return Ok(found);
        }
        band = (band + 0.1).min(0.5);
    }
}

fn draw(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in weights.enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Documents of `doc_len` tokens drawn from a language: the first `K` tokens
/// from the joint, each later token from `q(t | previous K−1 tokens)`.
pub fn synthetic_corpus(lang: &Language, docs: usize, doc_len: usize, seed: u64) -> Result<TokenStream> {
    let big_k = lang.max_len();
    let s = lang.alphabet_size();
    if doc_len < big_k {
        return Err(Error::InvalidArgument(format!("documents need at least K = {big_k} tokens")));
    }
    let joint = lang.joint();
    let mut records = Vec::with_capacity(docs);
    for d in 0..docs {
        let mut g = rng::stream(seed, rng::DATASET, (1 << 32) | d as u64);
        let first = draw(joint.data.iter().copied(), g.random::<f64>() * joint.sum());
        let mut doc = decode(first, big_k, s);
        while doc.len() < doc_len {
            let ctx = &doc[doc.len() + 1 - big_k..];
            let base = encode(ctx, s) * s;
            let row = &joint.data[base..base + s];
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return Err(Error::InvalidArgument(format!("context {ctx:?} has zero probability")));
            }
            doc.push(draw(row.iter().copied(), g.random::<f64>() * mass) as u32);
        }
        records.push(doc);
    }
    TokenStream::new(records, s)
}
