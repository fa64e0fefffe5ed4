//! The `harmonia` command line: `prepare`, `train`, `harmonize` and `eval`.
//!
//! Settings resolve in three layers: built-in defaults (the full-size model
//! and schedule), then a flat `key=value` config file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    ingest_leadsheet, read_corpus, slice_snippets, split_songs, synth_corpus, write_corpus,
    CorpusFile, LeadSheet, Meter, Sample, Split, DEFAULT_VAL_FRACTION,
};
use crate::encodings::{decode_chord_grid, encode_melody_grid, ChordEvent, MelodyNote, STEPS};
use crate::error::Error;
use crate::evaluation::{compare_table, evaluate, swap_harmonize, write_reports, EvalReport};
use crate::model::{load_checkpoint, ModelConfig};
use crate::training::{train_epochs, TrainSchedule, Variant};

#[derive(Debug, Parser)]
#[command(name = "harmonia", version, about = "Melody-conditioned chord VAE with adversarial disentanglement")]
pub struct Cli {
    /// Flat key=value config file (model, schedule and run keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialization, batching and corruption [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path: corpus file, run directory, lead sheet or report directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest or synthesize lead sheets, slice, split and write a corpus file.
    Prepare(PrepareArgs),
    /// Train one variant and write per-epoch checkpoints plus metrics.log.
    Train(TrainArgs),
    /// Harmonize a melody in the harmonic style of another lead sheet.
    Harmonize(HarmonizeArgs),
    /// Similarity probe and harmony histograms for one or more checkpoints.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of interchange-format lead sheets.
    #[arg(long = "in", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading files.
    #[arg(long)]
    pub synthetic: bool,
    /// Synthetic song count.
    #[arg(long, default_value_t = 200)]
    pub songs: usize,
    /// Bars per synthetic song.
    #[arg(long, default_value_t = 16)]
    pub bars: u32,
    /// Fraction of songs held out for validation [paper: 0.05].
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    pub val_frac: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus file written by `prepare`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// dat | non-dat | mask-cr | non-cr [paper main model: dat].
    #[arg(long)]
    pub variant: Option<String>,
    /// Use the full paper model and schedule, ignoring model and schedule
    /// keys from --config (batch 256, alpha 0.1, i/j/k/l 10/1/5/5, 20 epochs).
    #[arg(long)]
    pub paper_config: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Override the epoch count [paper: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the batch size [paper: 256].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// augmented | raw: what one epoch iterates over [default: augmented].
    #[arg(long)]
    pub epoch_basis: Option<String>,
    /// Stop after this many epochs of the schedule (decays still span all epochs).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lead sheet A providing the harmonic style (its first 32 beats).
    #[arg(long)]
    pub style: PathBuf,
    /// Lead sheet B providing the melody (its first 128 sixteenths).
    #[arg(long)]
    pub melody: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint(s) to evaluate.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Corpus file; its untransposed validation samples are evaluated.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Also write a side-by-side table of all checkpoints.
    #[arg(long)]
    pub compare: bool,
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Schedule(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything a run needs, after defaults, config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub variant: Variant,
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::paper(),
            schedule: TrainSchedule::paper(),
            variant: Variant::Dat,
            corpus: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Applies `key=value` lines. With `paths_only`, model and schedule keys
    /// are accepted but ignored.
    pub fn apply_text(&mut self, text: &str, paths_only: bool) -> Result<(), Error> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let known = match k {
                "variant" => {
                    self.variant = v.parse()?;
                    true
                }
                "corpus" => {
                    self.corpus = Some(v.into());
                    true
                }
                "out_dir" => {
                    self.out_dir = Some(v.into());
                    true
                }
                "checkpoint" => {
                    self.checkpoint = Some(v.into());
                    true
                }
                _ if paths_only => {
                    ModelConfig::default().set(k, v)? || TrainSchedule::default().set(k, v)?
                }
                _ => self.model.set(k, v)? || self.schedule.set(k, v)?,
            };
            if !known {
                return Err(Error::Config(format!("config line {}: unknown key '{k}'", n + 1)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        for (k, v) in [("corpus", &self.corpus), ("out_dir", &self.out_dir), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k}={}", p.display());
            }
        }
        for (k, v) in self.model.entries() {
            if k != "discriminator" {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        for (k, v) in self.schedule.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.schedule.validate()
    }
}

fn read_config(path: Option<&Path>) -> CliResult<Option<String>> {
    match path {
        None => Ok(None),
        Some(p) => std::fs::read_to_string(p)
            .map(Some)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display()))),
    }
}

/// Resolves the run configuration for `cli`.
pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut rc = RunConfig::default();
    let paper = matches!(&cli.command, Command::Train(t) if t.paper_config);
    if let Some(text) = read_config(cli.config.as_deref())? {
        rc.apply_text(&text, paper)?;
    }
    if let Some(seed) = cli.seed {
        rc.schedule.seed = seed;
    }
    if let Command::Train(t) = &cli.command {
        if let Some(v) = &t.variant {
            rc.variant = v.parse()?;
        }
        if let Some(c) = &t.corpus {
            rc.corpus = Some(c.clone());
        }
        if let Some(e) = t.epochs {
            rc.schedule.epochs = e;
        }
        if let Some(b) = t.batch_size {
            rc.schedule.batch_size = b;
        }
        if let Some(b) = &t.epoch_basis {
            rc.schedule.epoch_basis = b.parse()?;
        }
        if let Some(o) = &cli.out {
            rc.out_dir = Some(o.clone());
        }
    }
    rc.model.discriminator = rc.variant.discriminator();
    rc.validate()?;
    Ok(rc)
}

/// Parses `args` and runs the command, writing user-facing text to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
                return Ok(());
            }
            return Err(CliError {
                code,
                message: e.to_string(),
            });
        }
    };
    let rc = resolve(&cli)?;
    let text = match &cli.command {
        Command::Prepare(a) => cmd_prepare(&cli, a, &rc)?,
        Command::Train(a) => cmd_train(a, &rc)?,
        Command::Harmonize(a) => cmd_harmonize(&cli, a, &rc)?,
        Command::Eval(a) => cmd_eval(&cli, a, &rc)?,
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::from(Error::io("<stdout>", e)))
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn read_dir_sheets(dir: &Path) -> CliResult<(Vec<LeadSheet>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("input directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::from(Error::io(dir, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut sheets = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match ingest_leadsheet(&p) {
            Ok(s) => sheets.push(s),
            Err(Error::MeterRejected { song_id, meter }) => {
                log::warn!("skipping {song_id}: meter {meter}");
                skipped.push(format!("{} meter={meter}", p.display()));
            }
            Err(e) => return Err(CliError::from(e)),
        }
    }
    Ok((sheets, skipped))
}

/// Human-readable corpus summary.
pub fn corpus_summary(corpus: &CorpusFile) -> String {
    let train_songs = corpus.song_ids(Split::Train).len();
    let val_songs = corpus.song_ids(Split::Val).len();
    let raw_train = corpus
        .samples(Split::Train)
        .filter(|s| s.transposition_tag == 0)
        .count();
    let val = corpus.samples(Split::Val).count();
    format!(
        "songs={}\nsnippets={}\ntrain_songs={train_songs}\nval_songs={val_songs}\ntrain_samples={}\nval_samples={val}\nsplit_seed={}\nval_fraction={}\n",
        train_songs + val_songs,
        raw_train + val,
        corpus.header.train_count,
        corpus.header.split_seed,
        corpus.header.val_fraction,
    )
}

fn cmd_prepare(cli: &Cli, a: &PrepareArgs, rc: &RunConfig) -> CliResult<String> {
    let seed = rc.schedule.seed;
    let (sheets, skipped) = match (&a.input, a.synthetic) {
        (Some(dir), _) => read_dir_sheets(dir)?,
        (None, true) => (synth_corpus(a.songs, a.bars, seed)?, Vec::new()),
        (None, false) => return Err(CliError::usage("prepare needs --in DIR or --synthetic")),
    };
    let samples: Vec<Sample> = sheets
        .iter()
        .map(slice_snippets)
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let corpus = split_songs(&samples, a.val_frac, seed)?;
    let out = out_path(cli, "corpus.hdat");
    write_corpus(&corpus, &out)?;
    let mut summary = corpus_summary(&corpus);
    for s in &skipped {
        let _ = writeln!(summary, "skipped {s}");
    }
    let summary_path = out.with_extension("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| CliError::from(Error::io(&summary_path, e)))?;
    Ok(format!("wrote {}\n{summary}", out.display()))
}

fn cmd_train(a: &TrainArgs, rc: &RunConfig) -> CliResult<String> {
    if a.dry_run {
        return Ok(rc.to_text());
    }
    let corpus_path = rc
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::usage("train needs --corpus or corpus= in the config"))?;
    let corpus = read_corpus(corpus_path)?;
    let out = rc.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::from(Error::io(&out, e)))?;
    std::fs::write(out.join("run.cfg"), rc.to_text()).map_err(|e| CliError::from(Error::io(out.join("run.cfg"), e)))?;
    let run = a.stop_after.unwrap_or(rc.schedule.epochs);
    let outcome = train_epochs(&corpus, rc.model.clone(), &rc.schedule, rc.variant, Some(&out), run)?;
    let last = outcome
        .checkpoints
        .last()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    Ok(format!(
        "variant={} steps={} checkpoint={last}\n",
        rc.variant,
        outcome.log.steps().count()
    ))
}

fn first_window(sheet: &LeadSheet) -> CliResult<Sample> {
    if let Some(s) = slice_snippets(sheet)?.into_iter().next() {
        return Ok(s);
    }
    Err(CliError::usage(format!("lead sheet '{}' is shorter than 32 beats", sheet.song_id)))
}

fn cmd_harmonize(cli: &Cli, a: &HarmonizeArgs, rc: &RunConfig) -> CliResult<String> {
    let expected = cli.config.as_ref().map(|_| &rc.model);
    let (model, _) = load_checkpoint(&a.checkpoint, expected)?;
    let style = first_window(&ingest_leadsheet(&a.style)?)?;
    let sheet_b = ingest_leadsheet(&a.melody)?;
    let notes: Vec<MelodyNote> = sheet_b
        .melody_notes
        .iter()
        .filter(|n| (n.onset as usize) < STEPS)
        .map(|n| MelodyNote::new(n.onset, n.duration.min(STEPS as u32 - n.onset), n.pitch))
        .collect();
    let melody = encode_melody_grid(&notes)?;
    let grid = swap_harmonize(&model, &style, &melody)?;
    let chord_events: Vec<ChordEvent> = decode_chord_grid(&grid)
        .into_iter()
        .map(|s| ChordEvent::from_pitch_classes(s.onset_beat, &s.pitch_classes))
        .collect();
    let out_sheet = LeadSheet {
        song_id: format!("{}-in-style-of-{}", sheet_b.song_id, style.song_id),
        meter: Meter::FourFour,
        melody_notes: notes,
        chord_events,
    };
    let text = out_sheet.to_interchange();
    let out = out_path(cli, "harmonized.txt");
    std::fs::write(&out, &text).map_err(|e| CliError::from(Error::io(&out, e)))?;
    Ok(format!("wrote {}\n", out.display()))
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, rc: &RunConfig) -> CliResult<String> {
    let corpus_path = a
        .corpus
        .clone()
        .or_else(|| rc.corpus.clone())
        .ok_or_else(|| CliError::usage("eval needs --corpus or corpus= in the config"))?;
    let corpus = read_corpus(&corpus_path)?;
    let samples: Vec<&Sample> = corpus
        .samples(Split::Val)
        .filter(|s| s.transposition_tag == 0)
        .collect();
    let out = out_path(cli, "eval");
    let expected = cli.config.as_ref().map(|_| &rc.model);
    let mut named: Vec<(String, EvalReport)> = Vec::new();
    let mut text = String::new();
    for ckpt in &a.checkpoint {
        let (model, _) = load_checkpoint(ckpt, expected)?;
        let report = evaluate(&model, &samples, rc.schedule.seed)?;
        let name = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let dir = if a.checkpoint.len() == 1 { out.clone() } else { out.join(&name) };
        write_reports(&report, &dir)?;
        let _ = writeln!(
            text,
            "{name}: mean_similarity_1_11={} others={} reports={}",
            report.similarity.mean_nontrivial(),
            report
                .controllability
                .generated
                .fraction(crate::evaluation::Bucket::Others),
            dir.display()
        );
        named.push((name, report));
    }
    if a.compare {
        let path = out.join("compare.csv");
        std::fs::create_dir_all(&out).map_err(|e| CliError::from(Error::io(&out, e)))?;
        std::fs::write(&path, compare_table(&named)).map_err(|e| CliError::from(Error::io(&path, e)))?;
        let _ = writeln!(text, "wrote {}", path.display());
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("harmonia").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn paper_config_resolves_paper_values() {
        let rc = resolve(&parse(&["train", "--paper-config", "--dry-run"])).unwrap();
        assert_eq!(rc.schedule.batch_size, 256);
        assert_eq!(rc.model.alpha, 0.1);
        assert_eq!((rc.schedule.i, rc.schedule.j, rc.schedule.k, rc.schedule.l), (10, 1, 5, 5));
        assert_eq!(rc.schedule.epochs, 20);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# desk run\nd_z=16\nepochs=4\nvariant=non-cr\n").unwrap();
        let c = cfg.to_str().unwrap();
        let rc = resolve(&parse(&["--config", c, "train", "--epochs", "3"])).unwrap();
        assert_eq!(rc.model.d_z, 16);
        assert_eq!(rc.schedule.epochs, 3);
        assert_eq!(rc.variant, Variant::NonCr);
        let rc = resolve(&parse(&["--config", c, "train", "--paper-config"])).unwrap();
        assert_eq!(rc.model.d_z, 128);
        assert_eq!(rc.schedule.epochs, 20);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "no_such_key=1\n").unwrap();
        let err = resolve(&parse(&["--config", cfg.to_str().unwrap(), "train"])).unwrap_err();
        assert_eq!(err.code, 2);
        let err = resolve(&parse(&["train", "--epochs", "1"])).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn dry_run_prints_config() {
        let mut out = Vec::new();
        run(["harmonia", "train", "--dry-run", "--variant", "non-dat"], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("variant=non-dat"));
        assert!(text.contains("batch_size=256"));
    }

    #[test]
    fn missing_input_dir_exits_2() {
        let err = run(["harmonia", "prepare", "--in", "/no/such/dir"], &mut Vec::new()).unwrap_err();
        assert_eq!(err.code, 2);
    }
}
