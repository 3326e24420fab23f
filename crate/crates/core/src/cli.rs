//! Command-line entry points: `train`, `eval`, `predict` and `dump-scope`.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ARTIFACT_VERSION};
use crate::data::{read_corpus, Vocabs};
use crate::error::{Error, Result};
use crate::infer::{self, DecodeMode, MetricReport, Prediction};
use crate::model::{Ablations, Ssran};
use crate::train::{self, format_history, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ssran", version, about = "Multi-intent slot filling and intent detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint plus its history.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Write predictions (and optionally scope matrices) for a corpus.
    Predict(PredictArgs),
    /// Write one scope-weight CSV per utterance.
    DumpScope(DumpScopeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub ckpt_out: PathBuf,
    /// History file (defaults to `<ckpt-out>.history.tsv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// TOML file with a `[train]` table; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// none, no_sr, no_ran, no_aux or basic_model.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// topk or threshold (default: topk, or threshold for no_aux models).
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt_in: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt_in: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Prediction file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-utterance scope CSVs.
    #[arg(long)]
    pub dump_scope: Option<PathBuf>,
    /// Read one whitespace-tokenised utterance per line instead of a
    /// labelled corpus.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct DumpScopeArgs {
    #[arg(long)]
    pub ckpt_in: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub raw: bool,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: Option<String>,
    pub threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path, what: &str) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Config(format!(
            "directory for {what} {} does not exist",
            path.display()
        ))),
        _ => Ok(()),
    }
}

/// Merges `train` flags over the file configuration.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = FileConfig::load(args.config.as_deref())?.train;
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.alpha {
        c.alpha = v;
    }
    if let Some(v) = args.lambda {
        c.lambda = v;
    }
    if let Some(v) = &args.ablation {
        c.ablation = v.parse::<Ablations>()?;
    }
    if let Some(v) = args.max_len {
        c.max_len = v;
    }
    c.validate()?;
    Ok(c)
}

/// Decode mode from flags, then the config file, then the model default.
pub fn resolve_decode(args: &DecodeArgs, file: &DecodeSection, model: &Ssran) -> Result<DecodeMode> {
    let mode = args.decode.as_deref().or(file.mode.as_deref());
    let threshold = args.threshold.or(file.threshold);
    let resolved = match (mode, threshold) {
        (Some("topk"), Some(_)) => {
            return Err(Error::Config("--threshold only applies to --decode threshold".into()))
        }
        (Some(m), t) => match m.parse::<DecodeMode>()? {
            DecodeMode::Threshold(d) => DecodeMode::Threshold(t.unwrap_or(d)),
            other => other,
        },
        (None, Some(t)) => DecodeMode::Threshold(t),
        (None, None) => DecodeMode::default_for(model),
    };
    if let DecodeMode::Threshold(t) = resolved {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
    }
    Ok(resolved)
}

fn report_header(lines: &[(&str, String)]) -> String {
    let mut out = format!("# ssran {ARTIFACT_VERSION}\n");
    for (k, v) in lines {
        for (i, line) in v.lines().enumerate() {
            if i == 0 {
                let _ = writeln!(out, "# {k}: {line}");
            } else {
                let _ = writeln!(out, "#   {line}");
            }
        }
    }
    out
}

fn emit(report: &str, path: Option<&Path>) -> Result<()> {
    print!("{report}");
    io::stdout().flush()?;
    if let Some(p) = path {
        fs::write(p, report)?;
    }
    Ok(())
}

fn model_description(model: &Ssran) -> String {
    toml::to_string(model.config()).expect("model config serializes")
}

pub fn history_path(args: &TrainArgs) -> PathBuf {
    args.history.clone().unwrap_or_else(|| {
        let mut p = args.ckpt_out.clone().into_os_string();
        p.push(".history.tsv");
        PathBuf::from(p)
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<MetricReport> {
    require_file(&args.train, "training corpus")?;
    require_file(&args.dev, "dev corpus")?;
    require_parent(&args.ckpt_out, "checkpoint")?;
    let history = history_path(args);
    require_parent(&history, "history file")?;
    if let Some(r) = &args.report {
        require_parent(r, "report")?;
    }
    let config = resolve_train_config(args)?;
    let train_set = read_corpus(&args.train)?;
    let dev_set = read_corpus(&args.dev)?;

    let trained = train::fit(&train_set, &dev_set, &config, |r| println!("{}", r.log_line()))?;
    checkpoint::save(&args.ckpt_out, &trained.model, &trained.vocabs)?;
    fs::write(&history, format_history(&trained.history))?;

    let best = trained.best();
    let header = report_header(&[
        ("command", "train".into()),
        ("train", args.train.display().to_string()),
        ("dev", args.dev.display().to_string()),
        ("checkpoint", args.ckpt_out.display().to_string()),
        ("dropped", trained.dropped.to_string()),
        ("best_epoch", trained.best_epoch.to_string()),
        ("config", config.to_toml()),
    ]);
    emit(&format!("{header}{}{}", best.dev, best.dev.to_kv()), args.report.as_deref())?;
    Ok(best.dev.clone())
}

fn load_model(path: &Path) -> Result<(Ssran, Vocabs)> {
    require_file(path, "checkpoint")?;
    checkpoint::load(path)
}

fn read_inputs(path: &Path, raw: bool) -> Result<(Vec<Vec<String>>, Option<Vec<crate::data::Utterance>>)> {
    if raw {
        let text = fs::read_to_string(path)?;
        Ok((infer::parse_raw(&text), None))
    } else {
        let utts = read_corpus(path)?;
        Ok((utts.iter().map(|u| u.tokens.clone()).collect(), Some(utts)))
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    require_file(&args.test, "test corpus")?;
    if let Some(r) = &args.report {
        require_parent(r, "report")?;
    }
    let file = FileConfig::load(args.config.as_deref())?;
    let (model, vocabs) = load_model(&args.ckpt_in)?;
    let mode = resolve_decode(&args.decode, &file.decode, &model)?;
    let utts = read_corpus(&args.test)?;
    vocabs.check_covers(&utts)?;
    let (report, _) = infer::evaluate(&model, &vocabs, &utts, mode)?;
    let header = report_header(&[
        ("command", "eval".into()),
        ("checkpoint", args.ckpt_in.display().to_string()),
        ("test", args.test.display().to_string()),
        ("decode", mode.to_string()),
        ("model", model_description(&model)),
    ]);
    emit(&format!("{header}{report}{}", report.to_kv()), args.report.as_deref())?;
    Ok(report)
}

/// Writes `utt_<i>.csv` per utterance and an `index.tsv` listing them.
pub fn write_scope_dir(dir: &Path, preds: &[Prediction]) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("utterance\tfile\ttokens\n");
    let mut written = 0;
    for (i, p) in preds.iter().enumerate() {
        let Some(m) = &p.scope else { continue };
        let name = format!("utt_{i:05}.csv");
        let mut csv = String::new();
        for row in m {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        fs::write(dir.join(&name), csv)?;
        let _ = writeln!(index, "{i}\t{name}\t{}", p.tokens.join(" "));
        written += 1;
    }
    fs::write(dir.join("index.tsv"), index)?;
    Ok(written)
}

fn scope_capable(model: &Ssran) -> Result<()> {
    if model.scope.is_none() {
        return Err(Error::Config(format!(
            "checkpoint was trained with ablation {} and has no scope weights",
            model.config().ablations
        )));
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<Prediction>> {
    require_file(&args.test, "input corpus")?;
    if let Some(o) = &args.out {
        require_parent(o, "prediction file")?;
    }
    let file = FileConfig::load(args.config.as_deref())?;
    let (model, vocabs) = load_model(&args.ckpt_in)?;
    let mode = resolve_decode(&args.decode, &file.decode, &model)?;
    if args.dump_scope.is_some() {
        scope_capable(&model)?;
    }
    let (seqs, labelled) = read_inputs(&args.test, args.raw)?;
    if let Some(utts) = &labelled {
        vocabs.check_covers(utts)?;
    }
    let preds = infer::predict(&model, &vocabs, &seqs, mode, args.dump_scope.is_some())?;
    let text = infer::format_predictions(&preds);
    match &args.out {
        Some(p) => fs::write(p, &text)?,
        None => {
            print!("{text}");
            io::stdout().flush()?;
        }
    }
    if let Some(dir) = &args.dump_scope {
        write_scope_dir(dir, &preds)?;
    }
    Ok(preds)
}

pub fn cmd_dump_scope(args: &DumpScopeArgs) -> Result<usize> {
    require_file(&args.test, "input corpus")?;
    let (model, vocabs) = load_model(&args.ckpt_in)?;
    scope_capable(&model)?;
    let (seqs, _) = read_inputs(&args.test, args.raw)?;
    let preds = infer::predict(&model, &vocabs, &seqs, DecodeMode::default_for(&model), true)?;
    let n = write_scope_dir(&args.out_dir, &preds)?;
    println!("wrote {n} scope matrices to {}", args.out_dir.display());
    Ok(n)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Predict(a) => cmd_predict(a).map(drop),
        Command::DumpScope(a) => cmd_dump_scope(a).map(drop),
    }
}

/// Parses `std::env::args`, runs the subcommand and maps errors to a
/// non-zero exit status.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ssran").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "[train]\nepochs = 9\nalpha = 0.5\nseed = 3\n").unwrap();
        let cli = parse(&[
            "train", "--train", "a", "--dev", "b", "--ckpt-out", "c",
            "--config", cfg.to_str().unwrap(), "--epochs", "4", "--ablation", "no_sr",
        ]);
        let Command::Train(a) = cli.command else { panic!() };
        let c = resolve_train_config(&a).unwrap();
        assert_eq!((c.epochs, c.alpha, c.seed), (4, 0.5, 3));
        assert!(c.ablation.no_sr);
        assert_eq!(history_path(&a), PathBuf::from("c.history.tsv"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let cli = parse(&["train", "--train", "a", "--dev", "b", "--ckpt-out", "c", "--alpha", "2"]);
        let Command::Train(a) = cli.command else { panic!() };
        assert!(resolve_train_config(&a).is_err());
        let cli = parse(&["train", "--train", "a", "--dev", "b", "--ckpt-out", "c", "--ablation", "x"]);
        let Command::Train(a) = cli.command else { panic!() };
        assert!(resolve_train_config(&a).is_err());
    }

    #[test]
    fn missing_inputs_fail_before_compute() {
        let cli = parse(&["train", "--train", "/nonexistent/a", "--dev", "b", "--ckpt-out", "c"]);
        let Command::Train(a) = cli.command else { panic!() };
        assert!(matches!(cmd_train(&a), Err(Error::Config(_))));
    }
}
