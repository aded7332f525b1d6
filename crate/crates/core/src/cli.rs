//! Command-line entry points: gen, train, match, eval, audit.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::dataio::{
    generate_synthetic, read_checkpoint, read_container, write_checkpoint, write_container, SynthConfig,
};
use crate::dfa::{CodingConfig, Norm};
use crate::error::PifrError;
use crate::eval::{
    audit_matcher, auc, cmc_rank_k, roc_tar_at_far, tpir_at_fpir, IdentificationScores, MetricsReport, ProbeSearch,
    ScoreSet,
};
use crate::pipeline::Matcher;
use crate::rsa::{RsaConfig, RsaModel};
use crate::setrep::{FeatureSet, Summation};
use crate::training::{train, Level2, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "pifr", version, about = "Permutation-invariant feature-set matching")]
pub struct Cli {
    /// Worker threads (falls back to PIFR_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled task and write it as a container.
    Gen(GenArgs),
    /// Train the restructuring stack and write a checkpoint.
    Train(TrainArgs),
    /// Score one probe set against one gallery set.
    Match(MatchArgs),
    /// Verification / identification metrics over a labeled container.
    Eval(EvalArgs),
    /// Check that scores do not change when set elements are shuffled.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub ids: usize,
    #[arg(long = "sets-per-id", default_value_t = 4)]
    pub sets_per_id: usize,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub h: usize,
    #[arg(long, default_value_t = 4)]
    pub w: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub redundancy: f64,
    #[arg(long = "redundancy-noise", default_value_t = 1.0)]
    pub redundancy_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace file (default: <out>.log).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = RsaConfig::DEFAULT_BLOCKS)]
    pub blocks: usize,
    #[arg(long, default_value_t = RsaConfig::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Embedding width (default: max(1, D/2)).
    #[arg(long = "embed-dim")]
    pub embed_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub p: u32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long = "level1-epochs", default_value_t = 10)]
    pub level1_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Gradient norm cap per step; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `off` trains the restructuring-only model (contrastive second level).
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub level2: OnOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Meanl2,
    Avepool,
}

/// How sets are compared; shared by match, eval and audit.
#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Trained checkpoint; without one the restructuring is the identity.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub p: u32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Average both coding directions.
    #[arg(long)]
    pub symmetric: bool,
    /// Compare restructured set means instead of coding.
    #[arg(long = "rsa-only", conflicts_with = "baseline")]
    pub rsa_only: bool,
    /// Skip restructuring and coding entirely.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Which set of the probe container to use.
    #[arg(long = "probe-index", default_value_t = 0)]
    pub probe_index: usize,
    #[arg(long = "gallery-index", default_value_t = 0)]
    pub gallery_index: usize,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Verify,
    IdentifyClosed,
    IdentifyOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Kv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// False-accept (or false-alarm) budgets.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.1])]
    pub far: Vec<f64>,
    /// CMC ranks.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10])]
    pub ranks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Write metrics here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input-order reductions; deviations are reported, not failed, up to 1e-9.
    #[arg(long)]
    pub diagnostic: bool,
}

/// Outcome classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag values (exit 2).
    Usage(String),
    /// Failure while doing the work (exit 1).
    Runtime(PifrError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid arguments: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<PifrError> for CliError {
    fn from(e: PifrError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(e: PifrError) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Largest deviation tolerated in diagnostic (input-order) audits.
pub const DIAGNOSTIC_TOLERANCE: f64 = 1e-9;

/// Parses `args` and runs the command, writing reports to `out`. Parse
/// failures come back as [`clap::Error`] so the caller can print usage.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> std::result::Result<CliResult<()>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    Ok(run(cli, out))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Match(a) => cmd_match(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Audit(a) => cmd_audit(&a, out),
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PIFR_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("PIFR_THREADS must be a count, got {v:?}")))?,
            ),
            _ => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("thread count must be >= 1".into()));
        }
        // A second call in the same process (tests) keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            info!("thread pool already configured; keeping it");
        }
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = SynthConfig {
        identities: a.ids,
        sets_per_identity: a.sets_per_id,
        n_per_set: a.n,
        h: a.h,
        w: a.w,
        d: a.d,
        noise_sigma: a.noise,
        redundancy_rate: a.redundancy,
        redundancy_noise: a.redundancy_noise,
        seed: a.seed,
    };
    config.validate().map_err(usage)?;
    let task = generate_synthetic(&config)?;
    write_container(&task.sets, &a.out)?;
    let maps: usize = task.sets.iter().map(FeatureSet::len).sum();
    writeln!(
        out,
        "sets={} identities={} maps={} dims={}x{}x{} path={}",
        task.sets.len(),
        a.ids,
        maps,
        a.h,
        a.w,
        a.d,
        a.out.display()
    )?;
    Ok(())
}

fn coding_config(p: u32, lambda: f64) -> CliResult<CodingConfig> {
    let c = CodingConfig::new(Norm::from_p(p).map_err(usage)?, lambda);
    c.validate().map_err(usage)?;
    Ok(c)
}

fn load_sets(path: &Path) -> CliResult<Vec<FeatureSet>> {
    let sets = read_container(path)?;
    if sets.is_empty() {
        return Err(CliError::Runtime(PifrError::Data(format!("{} holds no sets", path.display()))));
    }
    Ok(sets)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let coding = coding_config(a.p, a.lambda)?;
    let config = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        pairs_per_epoch: a.pairs,
        margin: a.margin,
        seed: a.seed,
        coding,
        level1_epochs: a.level1_epochs,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        ..TrainConfig::default()
    };
    config.validate().map_err(usage)?;
    if a.clip < 0.0 || !a.clip.is_finite() {
        return Err(CliError::Usage(format!("clip must be >= 0, got {}", a.clip)));
    }
    let sets = load_sets(&a.data)?;
    let d = sets[0].d();
    let mut rsa = RsaConfig::for_dim(d);
    rsa.blocks = a.blocks;
    rsa.sigma = a.sigma;
    if let Some(e) = a.embed_dim {
        rsa.embed_dim = e;
    }
    rsa.validate().map_err(usage)?;

    let level2 = match a.level2 {
        OnOff::On => Level2::Bilevel,
        OnOff::Off => Level2::Contrastive,
    };
    let outcome = train(&sets, &rsa, &config, level2)?;
    write_checkpoint(&outcome.params, &rsa, &a.out)?;

    let mut log = String::new();
    for (k, ce) in outcome.level1_history.iter().enumerate() {
        log.push_str(&format!("level1 epoch={} sets={} mean_ce={ce:.9}\n", k + 1, sets.len()));
    }
    if let Some(l2) = &outcome.level2 {
        let tag = match level2 {
            Level2::Contrastive => "contrastive",
            _ => "level2",
        };
        for line in l2.log_lines().lines() {
            log.push_str(&format!("{tag} {line}\n"));
        }
    }
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    fs::write(&log_path, log)?;
    writeln!(
        out,
        "checkpoint={} log={} sets={} level1_epochs={} level2={}",
        a.out.display(),
        log_path.display(),
        sets.len(),
        outcome.level1_history.len(),
        outcome.level2.as_ref().map_or(0, |l| l.epochs.len())
    )?;
    Ok(())
}

fn build_matcher(m: &MethodArgs, d: usize, summation: Summation) -> CliResult<Matcher> {
    let coding = coding_config(m.p, m.lambda)?;
    if let Some(b) = m.baseline {
        if m.ckpt.is_some() {
            warn!("--baseline ignores the checkpoint");
        }
        return Ok(match b {
            Baseline::Meanl2 => Matcher::MeanL2 { summation },
            Baseline::Avepool => Matcher::AvePool { summation },
        });
    }
    let model = match &m.ckpt {
        Some(path) => {
            let (params, config) = read_checkpoint(path)?;
            if params.d() != d {
                return Err(CliError::Runtime(PifrError::Dimension(format!(
                    "checkpoint expects D = {}, data has D = {d}",
                    params.d()
                ))));
            }
            RsaModel { config, params }
        }
        None => RsaModel::identity(RsaConfig::for_dim(d), d),
    };
    let matcher = if m.rsa_only {
        Matcher::RsaOnly { model }
    } else {
        Matcher::Pifr {
            model,
            coding,
            symmetric: m.symmetric,
        }
    };
    Ok(matcher.with_summation(summation))
}

fn pick(sets: &[FeatureSet], index: usize, path: &Path) -> CliResult<FeatureSet> {
    sets.get(index).cloned().ok_or_else(|| {
        CliError::Usage(format!("{} holds {} sets, no index {index}", path.display(), sets.len()))
    })
}

pub fn cmd_match(a: &MatchArgs, out: &mut dyn Write) -> CliResult<()> {
    coding_config(a.method.p, a.method.lambda)?;
    let probe = pick(&load_sets(&a.probe)?, a.probe_index, &a.probe)?;
    let gallery = pick(&load_sets(&a.gallery)?, a.gallery_index, &a.gallery)?;
    let matcher = build_matcher(&a.method, probe.d(), Summation::Canonical)?;
    let score = matcher.score(&probe, &gallery)?;
    writeln!(out, "{score}")?;
    Ok(())
}

fn labeled(sets: &[FeatureSet]) -> CliResult<Vec<u32>> {
    let ids: Vec<u32> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.identity()
                .ok_or_else(|| PifrError::Data(format!("set {i} has no identity label")))
        })
        .collect::<Result<_, _>>()?;
    let mut distinct = ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CliError::Runtime(PifrError::Data(format!(
            "evaluation needs at least 2 identities, found {}",
            distinct.len()
        ))));
    }
    Ok(ids)
}

/// Verification scores over all unordered pairs of sets.
pub fn verification_scores(matcher: &Matcher, sets: &[FeatureSet]) -> crate::Result<ScoreSet> {
    let prepared = matcher.prepare_all(sets)?;
    let mut scores = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let s = matcher.score_prepared(&prepared[i], &prepared[j])?;
            scores.push((s, sets[i].identity() == sets[j].identity()));
        }
    }
    ScoreSet::new(scores)
}

/// Gallery = first set of each enrolled identity (file order); probes =
/// every other set. With `open`, identities at odd positions in ascending
/// id order are not enrolled and their sets become non-mated probes.
pub fn identification_scores(matcher: &Matcher, sets: &[FeatureSet], open: bool) -> crate::Result<IdentificationScores> {
    let mut ids: Vec<u32> = sets.iter().filter_map(FeatureSet::identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let enrolled: Vec<u32> = ids
        .iter()
        .enumerate()
        .filter(|(k, _)| !open || k % 2 == 0)
        .map(|(_, &id)| id)
        .collect();
    let mut gallery_sets = Vec::new();
    let mut gallery_ids = Vec::new();
    let mut probes = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        let id = s.identity();
        let is_enrolled = id.is_some_and(|v| enrolled.contains(&v));
        if is_enrolled && !gallery_ids.contains(&id) {
            gallery_ids.push(id);
            gallery_sets.push(i);
        } else {
            probes.push(i);
        }
    }
    let prepared = matcher.prepare_all(sets)?;
    let searches = probes
        .iter()
        .map(|&p| {
            let scores = gallery_sets
                .iter()
                .map(|&g| matcher.score_prepared(&prepared[p], &prepared[g]))
                .collect::<crate::Result<Vec<f64>>>()?;
            let mate = gallery_ids.iter().position(|&g| g == sets[p].identity());
            Ok(ProbeSearch { scores, mate })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    if searches.iter().all(|s| s.mate.is_none()) {
        return Err(PifrError::Data("no identity has a second set to use as a mated probe".into()));
    }
    IdentificationScores::new(searches)
}

fn mated_as_verification(s: &IdentificationScores) -> crate::Result<ScoreSet> {
    let mut out = Vec::new();
    for p in &s.probes {
        for (g, &v) in p.scores.iter().enumerate() {
            out.push((v, p.mate == Some(g)));
        }
    }
    ScoreSet::new(out)
}

pub fn evaluate(mode: EvalMode, matcher: &Matcher, sets: &[FeatureSet], far: &[f64], ranks: &[usize]) -> crate::Result<MetricsReport> {
    let mut report = MetricsReport::default();
    report.note("mode", format!("{mode:?}").to_lowercase());
    report.note("sets", sets.len());
    match mode {
        EvalMode::Verify => {
            let s = verification_scores(matcher, sets)?;
            report.note("positives", s.genuine().len());
            report.note("negatives", s.impostor().len());
            for (f, t) in far.iter().zip(roc_tar_at_far(&s, far)?) {
                report.push("tar", format!("far={f}"), t);
            }
            report.push("auc", "", auc(&s)?);
        }
        EvalMode::IdentifyClosed => {
            let s = identification_scores(matcher, sets, false)?;
            report.note("probes", s.probes.len());
            report.note("gallery", s.probes[0].scores.len());
            for &k in ranks {
                report.push("cmc", format!("rank={k}"), cmc_rank_k(&s, k)?);
            }
            report.push("auc", "", auc(&mated_as_verification(&s)?)?);
        }
        EvalMode::IdentifyOpen => {
            let s = identification_scores(matcher, sets, true)?;
            let mated = s.probes.iter().filter(|p| p.mate.is_some()).count();
            report.note("mated_probes", mated);
            report.note("non_mated_probes", s.probes.len() - mated);
            report.note("gallery", s.probes[0].scores.len());
            for (f, t) in far.iter().zip(tpir_at_fpir(&s, far)?) {
                report.push("tpir", format!("fpir={f}"), t);
            }
            let closed = IdentificationScores::new(s.probes.iter().filter(|p| p.mate.is_some()).cloned().collect())?;
            report.push("cmc", "rank=1", cmc_rank_k(&closed, 1)?);
            report.push("auc", "", auc(&mated_as_verification(&closed)?)?);
        }
    }
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    coding_config(a.method.p, a.method.lambda)?;
    if let Some(f) = a.far.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(CliError::Usage(format!("rate budget {f} outside [0, 1]")));
    }
    if a.ranks.contains(&0) {
        return Err(CliError::Usage("CMC ranks start at 1".into()));
    }
    let sets = load_sets(&a.data)?;
    labeled(&sets)?;
    let matcher = build_matcher(&a.method, sets[0].d(), Summation::Canonical)?;
    let report = evaluate(a.mode, &matcher, &sets, &a.far, &a.ranks)?;
    let text = match a.format {
        OutputFormat::Csv => report.to_csv(),
        OutputFormat::Kv => report.to_key_value(),
    };
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_audit(a: &AuditArgs, out: &mut dyn Write) -> CliResult<()> {
    coding_config(a.method.p, a.method.lambda)?;
    let sets = load_sets(&a.data)?;
    let mode = if a.diagnostic {
        Summation::InputOrder
    } else {
        Summation::Canonical
    };
    let matcher = build_matcher(&a.method, sets[0].d(), mode)?;
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in 0..sets.len() {
            if i == j && sets.len() > 1 {
                continue;
            }
            let seed = a.seed ^ ((i as u64) << 32 | j as u64);
            worst = worst.max(audit_matcher(&sets[i], &sets[j], &matcher, a.trials, seed)?);
            pairs += 1;
        }
    }
    writeln!(
        out,
        "pairs={pairs} trials={} mode={} max_deviation={worst:e}",
        a.trials,
        if a.diagnostic { "diagnostic" } else { "canonical" }
    )?;
    if a.diagnostic {
        warn!("diagnostic mode: reductions follow input order");
        if worst > DIAGNOSTIC_TOLERANCE {
            return Err(CliError::Runtime(PifrError::Data(format!(
                "deviation {worst:e} exceeds {DIAGNOSTIC_TOLERANCE:e}"
            ))));
        }
    } else if worst != 0.0 {
        return Err(CliError::Runtime(PifrError::Data(format!(
            "scores changed under shuffling (max deviation {worst:e})"
        ))));
    }
    Ok(())
}
