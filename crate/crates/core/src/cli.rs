//! The `seqmodes` command-line front end.
//!
//! Every command resolves a [`RunConfig`] from an optional JSON file plus flag
//! overrides, echoes it to `<out>/config.json`, and writes its outputs next to
//! it. Exit codes: 0 success, 2 input error, 3 missing upstream artifact,
//! 4 numerical failure (with `<out>/diagnostics.json`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_conditional_matrix, extract_contextual_examples, stream_ngram_counts, synthetic_corpus, CountMeta,
    CountTable, Policy, TokenStream,
};
use crate::distribution::{random_language, uniform_marginal_language, Alphabet, ConditionalOperator, Language};
use crate::error::Error;
use crate::experiment::{coupled_on_datasets, llc_on_dataset};
use crate::io::{fmt_f64, read_operator_csv, write_effective_csv, write_operator_csv, write_operator_tsv};
use crate::model::{entropy_rate_bound, sample_coupled, sample_dataset, FitConfig, Parametrization, SoftmaxModel};
use crate::modes::weighted_svd;
use crate::sgld::{
    bound_f, bound_g, bound_mu, main_theorem_bound, write_coupled_csv, write_trace_csv, Preset, SGLDConfig,
    StepSchedule,
};
use crate::truncation::{truncate, Solver, TruncationSpec, FULL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub k: usize,
    pub l: usize,
    pub min_count: u64,
    pub min_y_count: u64,
    pub lambda_smooth: f64,
    pub policy: Policy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { path: None, k: 1, l: 1, min_count: 1, min_y_count: 1, lambda_smooth: 0.0, policy: Policy::Stochastic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub rank_tol: f64,
    /// Components listed in the report.
    pub rank: usize,
    /// Loadings listed per singular vector.
    pub top_n: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self { rank_tol: crate::modes::DEFAULT_RANK_TOL, rank: 5, top_n: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    /// Highest retained mode index; `None` keeps every mode.
    pub chi: Option<usize>,
    pub solver: Solver,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        let spec = TruncationSpec::default();
        Self { chi: None, solver: Solver::Kl, tolerance: spec.tolerance, max_iterations: spec.max_iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldSection {
    pub preset: Preset,
    /// Dataset size `n`.
    pub n: usize,
    pub chains: usize,
    pub parametrization: Parametrization,
    pub n_beta: Option<f64>,
    pub gamma: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub epsilon: Option<f64>,
    pub burn_in: Option<f64>,
    pub weight_norm_cap: Option<f64>,
}

impl Default for SgldSection {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            n: 1000,
            chains: 4,
            parametrization: Parametrization::FullTable,
            n_beta: None,
            gamma: None,
            batch_size: None,
            steps: None,
            epsilon: None,
            burn_in: None,
            weight_norm_cap: None,
        }
    }
}

impl SgldSection {
    pub fn resolve(&self, seed: u64) -> SGLDConfig {
        let mut c = SGLDConfig::preset(self.preset, self.n, seed);
        if let Some(v) = self.n_beta {
            c.n_beta = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.epsilon {
            c.schedule = StepSchedule::Constant { epsilon: v };
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        c.weight_norm_cap = self.weight_norm_cap;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub a: f64,
    pub b: f64,
    pub xi: f64,
    pub kappa: f64,
    pub q: f64,
    pub m: f64,
    pub delta: f64,
    pub t_max: usize,
    /// Entropy rate `H` for the insensitivity threshold; skipped when absent.
    pub entropy_rate: Option<f64>,
    pub alphabet_size: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            xi: 0.0,
            kappa: 0.0,
            q: 1.0,
            m: 1.0,
            delta: 0.0,
            t_max: 100,
            entropy_rate: None,
            alphabet_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExamplesConfig {
    pub component: usize,
    pub window: usize,
    pub loading_fraction: f64,
    pub max_examples: usize,
}

impl Default for ExamplesConfig {
    fn default() -> Self {
        Self { component: 0, window: 3, loading_fraction: 0.5, max_examples: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub alphabet_size: usize,
    #[serde(rename = "K")]
    pub big_k: usize,
    pub concentration: f64,
    pub uniform_marginal: bool,
    pub docs: usize,
    pub doc_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { alphabet_size: 3, big_k: 2, concentration: 1.0, uniform_marginal: false, docs: 50, doc_len: 200 }
    }
}

/// Everything a run needs; the file alone reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub decomposition: DecompositionConfig,
    pub truncation: TruncationConfig,
    pub sgld: SgldSection,
    pub bounds: BoundsConfig,
    pub examples: ExamplesConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            decomposition: DecompositionConfig::default(),
            truncation: TruncationConfig::default(),
            sgld: SgldSection::default(),
            bounds: BoundsConfig::default(),
            examples: ExamplesConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqmodes", version, about = "Modes of sequence distributions, truncation and LLC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Count (x, y) windows of a corpus.
    Ingest,
    /// Build the conditional operator from counts and decompose it.
    Decompose,
    /// Truncate the operator to modes 0..=chi.
    Truncate,
    /// Estimate the LLC of a model fitted to samples of the operator.
    Llc,
    /// Coupled chains under the operator and its truncation.
    Couple,
    /// Tabulate the trajectory and LLC bounds for given constants.
    Bounds,
    /// Corpus passages around the highest-loading contexts of a component.
    Examples,
    /// Sample a random language and a corpus from it.
    Synth,
    /// ingest, decompose, truncate, llc, couple and examples in sequence.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Decompose => "decompose",
            Command::Truncate => "truncate",
            Command::Llc => "llc",
            Command::Couple => "couple",
            Command::Bounds => "bounds",
            Command::Examples => "examples",
            Command::Synth => "synth",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Input corpus.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub l: Option<usize>,
    /// Highest retained mode index, or `full`.
    #[arg(long, global = true)]
    pub chi: Option<String>,
    #[arg(long = "lambda-smooth", global = true)]
    pub lambda_smooth: Option<f64>,
    /// `paper` or `stochastic`.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// `paper` or `tuned`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Missing(PathBuf),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Missing(p) => write!(f, "missing upstream artifact: {}", p.display()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Core(e) => match e {
                Error::NonFinite(_)
                | Error::IncompleteDecomposition
                | Error::Infeasible(_)
                | Error::Diverged { .. }
                | Error::DegenerateFit(_) => EXIT_NUMERICAL,
                _ => EXIT_INPUT,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input_error(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::InvalidArgument(msg.into()))
}

/// Loads the config file (if any) and applies flag overrides.
pub fn resolve_config(o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| input_error(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &o.corpus {
        cfg.corpus.path = Some(v.clone());
    }
    if let Some(v) = o.k {
        cfg.corpus.k = v;
    }
    if let Some(v) = o.l {
        cfg.corpus.l = v;
    }
    if let Some(v) = &o.chi {
        cfg.truncation.chi = match v.as_str() {
            "full" => None,
            s => Some(s.parse().map_err(|_| input_error(format!("--chi expects an integer or `full`, got `{s}`")))?),
        };
    }
    if let Some(v) = o.lambda_smooth {
        cfg.corpus.lambda_smooth = v;
    }
    if let Some(v) = &o.policy {
        cfg.corpus.policy = v.parse()?;
    }
    if let Some(v) = &o.preset {
        cfg.sgld.preset = v.parse()?;
    }
    Ok(cfg)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.path(name);
        if p.is_file() { Ok(p) } else { Err(CliError::Missing(p)) }
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn report<T: Serialize>(&self, name: &str, command: &str, result: &T) -> CliResult<()> {
        self.write_json(name, &Report { command, seed: self.cfg.seed, config: self.cfg, result })
    }

    fn operator(&self) -> CliResult<ConditionalOperator> {
        let p = self.require("operator.csv")?;
        Ok(read_operator_csv(BufReader::new(File::open(p)?))?.0)
    }

    fn corpus(&self) -> CliResult<TokenStream> {
        let p = self.cfg.corpus.path.as_ref().ok_or_else(|| input_error("no corpus given (--corpus or corpus.path)"))?;
        let f = File::open(p).map_err(|e| input_error(format!("cannot read corpus {}: {e}", p.display())))?;
        Ok(TokenStream::parse(BufReader::new(f))?)
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    result: &'a T,
}

fn cmd_ingest(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.cfg.corpus;
    let stream = ctx.corpus()?;
    let counts = stream_ngram_counts(&stream, c.k, c.l, c.min_count, c.min_y_count)?;
    let mut w = ctx.create("counts.tsv")?;
    counts.write_tsv(&mut w)?;
    w.flush()?;
    let mut w = ctx.create("x_counts.tsv")?;
    counts.write_x_tsv(&mut w)?;
    w.flush()?;
    ctx.write_json("counts_meta.json", &counts.meta())?;
    Ok(())
}

fn load_counts(ctx: &Ctx) -> CliResult<CountTable> {
    let xy = ctx.require("counts.tsv")?;
    let x = ctx.require("x_counts.tsv")?;
    let meta: CountMeta = serde_json::from_reader(BufReader::new(File::open(ctx.require("counts_meta.json")?)?))?;
    Ok(CountTable::read_tsv(BufReader::new(File::open(xy)?), BufReader::new(File::open(x)?), &meta)?)
}

fn cmd_decompose(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.cfg.corpus;
    let counts = load_counts(ctx)?;
    let op = build_conditional_matrix(&counts, c.lambda_smooth, c.policy)?;
    let mut w = ctx.create("operator.csv")?;
    write_operator_csv(&op, None, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("operator.tsv")?;
    write_operator_tsv(&op, None, &mut w)?;
    w.flush()?;
    let d = &ctx.cfg.decomposition;
    let dec = weighted_svd(&op, d.rank_tol)?;
    let report = dec.report(d.rank, d.top_n);
    ctx.report("decomposition.json", "decompose", &report)?;
    let mut w = ctx.create("decomposition.txt")?;
    write!(w, "{}", report.to_text(&|ids: &str| ids.to_string()))?;
    if report.padded {
        writeln!(w, "requested {} components, only {} nonzero; padded with zeros", report.requested_rank, report.n_plus)?;
    }
    w.flush()?;
    Ok(())
}

fn truncation_spec(cfg: &TruncationConfig) -> TruncationSpec {
    TruncationSpec {
        chi: cfg.chi.unwrap_or(FULL),
        solver: cfg.solver,
        tolerance: cfg.tolerance,
        max_iterations: cfg.max_iterations,
    }
}

fn cmd_truncate(ctx: &Ctx) -> CliResult<()> {
    let op = ctx.operator()?;
    let dec = weighted_svd(&op, ctx.cfg.decomposition.rank_tol)?;
    let eff = truncate(&dec, &truncation_spec(&ctx.cfg.truncation))?;
    let mut w = ctx.create("effective.csv")?;
    write_effective_csv(&eff, &mut w)?;
    w.flush()?;
    ctx.report("truncation.json", "truncate", &eff.provenance)?;
    Ok(())
}

fn cmd_llc(ctx: &Ctx) -> CliResult<()> {
    let op = ctx.operator()?;
    let s = &ctx.cfg.sgld;
    let config = s.resolve(ctx.cfg.seed);
    let model = SoftmaxModel::for_operator(&op, s.parametrization)?;
    let data = sample_dataset(&op, config.n, ctx.cfg.seed);
    let mut w = ctx.create("dataset.tsv")?;
    data.write_tsv(&op, &mut w)?;
    w.flush()?;
    let (report, traces) = llc_on_dataset(&model, &data, &config, s.chains, &FitConfig::default())?;
    ctx.write_json("weights.json", &model.to_file(&report.fit.weights(), op.alphabet_size))?;
    let mut w = ctx.create("trace.csv")?;
    write_trace_csv(&traces[0], &report.fit.weights(), &mut w)?;
    w.flush()?;
    ctx.report("llc.json", "llc", &report)?;
    Ok(())
}

fn cmd_couple(ctx: &Ctx) -> CliResult<()> {
    let op = ctx.operator()?;
    let p = ctx.require("effective.csv")?;
    let (op_chi, _) = read_operator_csv(BufReader::new(File::open(p)?))?;
    if op.x_labels != op_chi.x_labels || op.y_labels != op_chi.y_labels {
        return Err(input_error("effective.csv does not match operator.csv"));
    }
    let s = &ctx.cfg.sgld;
    let config = s.resolve(ctx.cfg.seed);
    let model = SoftmaxModel::for_operator(&op, s.parametrization)?;
    let data = sample_coupled(&[&op, &op_chi], config.n, ctx.cfg.seed);
    let (report, run) = coupled_on_datasets(&model, &data[0], &data[1], &config, &FitConfig::default())?;
    let g = (!report.g.is_empty()).then_some(report.g.as_slice());
    let mut w = ctx.create("couple.csv")?;
    write_coupled_csv(&run, &report.fit.weights(), g, &mut w)?;
    w.flush()?;
    if let Some(msg) = &report.warning {
        eprintln!("warning: {msg}");
    }
    ctx.report("couple.json", "couple", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct BoundsResult {
    mu: f64,
    main_bound: f64,
    g_limit: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    entropy: Option<crate::model::EntropyBound>,
}

fn cmd_bounds(ctx: &Ctx) -> CliResult<()> {
    let b = &ctx.cfg.bounds;
    let config = ctx.cfg.sgld.resolve(ctx.cfg.seed);
    config.validate()?;
    if b.t_max == 0 {
        return Err(input_error("bounds.t_max must be >= 1"));
    }
    let mu = bound_mu(&config, b.m)?;
    let main_bound = main_theorem_bound(b.a, b.b, b.xi, b.kappa, b.q, b.m, &config)?;
    let mut w = ctx.create("bounds.csv")?;
    writeln!(w, "t,g,f")?;
    for t in 1..=b.t_max {
        writeln!(w, "{t},{},{}", fmt_f64(bound_g(t, b.a, b.xi, &config, b.m)?), fmt_f64(bound_f(t, b.delta)))?;
    }
    w.flush()?;
    let ratio = config.epsilon_max() / config.epsilon_min();
    let g_limit = ratio * (b.a + b.xi) / (config.gamma / config.n_beta - b.m);
    let entropy = match b.entropy_rate {
        Some(h) => Some(entropy_rate_bound(ctx.cfg.corpus.k, ctx.cfg.corpus.l, b.alphabet_size, h, b.a)?),
        None => None,
    };
    ctx.report("bounds.json", "bounds", &BoundsResult { mu, main_bound, g_limit, entropy })?;
    Ok(())
}

fn cmd_examples(ctx: &Ctx) -> CliResult<()> {
    let op = ctx.operator()?;
    let stream = ctx.corpus()?;
    let dec = weighted_svd(&op, ctx.cfg.decomposition.rank_tol)?;
    let e = &ctx.cfg.examples;
    let found = extract_contextual_examples(&stream, &dec, e.component, e.window, e.loading_fraction)?;
    let ids = |s: &[u32]| s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let mut w = ctx.create("examples.txt")?;
    writeln!(w, "component {}: s = {}", e.component, fmt_f64(dec.singular_values[e.component]))?;
    for ex in found.iter().take(e.max_examples) {
        writeln!(
            w,
            "doc {} pos {}: {} [{}] -> {} | {}",
            ex.document,
            ex.position,
            ids(&ex.before),
            ids(&ex.x),
            ids(&ex.y),
            ids(&ex.after)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let s = &ctx.cfg.synth;
    let alphabet = Alphabet::new(s.alphabet_size)?;
    let lang: Language = if s.uniform_marginal {
        uniform_marginal_language(ctx.cfg.seed, alphabet, s.big_k, s.concentration)?
    } else {
        random_language(ctx.cfg.seed, alphabet, s.big_k, s.concentration)?
    };
    ctx.write_json("language.json", &lang.to_file())?;
    let stream = synthetic_corpus(&lang, s.docs, s.doc_len, ctx.cfg.seed)?;
    let mut w = ctx.create("corpus.txt")?;
    stream.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn dispatch(command: Command, ctx: &Ctx) -> CliResult<()> {
    match command {
        Command::Ingest => cmd_ingest(ctx),
        Command::Decompose => cmd_decompose(ctx),
        Command::Truncate => cmd_truncate(ctx),
        Command::Llc => cmd_llc(ctx),
        Command::Couple => cmd_couple(ctx),
        Command::Bounds => cmd_bounds(ctx),
        Command::Examples => cmd_examples(ctx),
        Command::Synth => cmd_synth(ctx),
        Command::Pipeline => {
            for c in [
                Command::Ingest,
                Command::Decompose,
                Command::Truncate,
                Command::Llc,
                Command::Couple,
                Command::Examples,
            ] {
                dispatch(c, ctx)?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    command: &'a str,
    error: String,
    config: &'a RunConfig,
}

/// Runs one command and returns its exit code; errors go to stderr.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match resolve_config(&cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Err(e) = fs::create_dir_all(&cfg.out) {
        eprintln!("error: cannot create {}: {e}", cfg.out.display());
        return EXIT_INPUT;
    }
    let ctx = Ctx { cfg: &cfg, out: &cfg.out };
    let result = ctx.write_json("config.json", &cfg).and_then(|_| dispatch(cli.command, &ctx));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == EXIT_NUMERICAL {
                let d = Diagnostics { command: cli.command.name(), error: e.to_string(), config: &cfg };
                if let Err(e2) = ctx.write_json("diagnostics.json", &d) {
                    eprintln!("error: cannot write diagnostics: {e2}");
                }
            }
            code
        }
    }
}

pub fn main_entry() -> i32 {
    run(&Cli::parse())
}
