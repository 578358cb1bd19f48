//! Command-line front end: `gen`, `train`, `eval` and `report`.
//!
//! `train` reads an optional TOML run file, applies command-line flags on
//! top, and writes the resolved configuration next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_corpus, make_folds, save_corpus, select_folds, synth_generate, Corpus, Emotion, FoldScheme,
    GeneratorSpec, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::metrics::{attention_report, confusion_render, cross_fold_summary, FoldRow};
use crate::trainer::{evaluate, predict_records, train, Mode, NegStrategy, SecondView, TrainPlan};
use crate::views::{Checkpoint, Readout, ViewConfig, ViewKind};

#[derive(Debug, Parser)]
#[command(name = "emoview", version, about = "Multimodal and multi-view emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a view (or a pair of views) over cross-validation folds.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Write per-utterance attention and gate reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator spec (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output corpus (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run file (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub view: Option<ViewKind>,
    /// Second view for joint-multiview.
    #[arg(long)]
    pub second_view: Option<ViewKind>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Frozen second view for the frozen-teacher modes.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// `all` or comma-separated fold ids.
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub neg_strategy: Option<NegStrategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub beta_a: Option<f64>,
    #[arg(long)]
    pub beta_m: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Restrict to one fold's split; every record otherwise.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Drop tokens, word vectors and alignments before evaluating.
    #[arg(long)]
    pub strip_lexical: bool,
    /// Also write attention/gate reports for every evaluated utterance.
    #[arg(long)]
    pub reports: bool,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated utterance ids.
    #[arg(long, conflicts_with = "all")]
    pub ids: Option<String>,
    /// Report every utterance in the corpus.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Shape of the view(s) to build; input widths come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSettings {
    pub kind: ViewKind,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout_p: f64,
    pub attn_dim: usize,
    pub readout: Readout,
}

impl Default for ViewSettings {
    fn default() -> Self {
        let c = ViewConfig::new(ViewKind::BAco1, 0, 0);
        ViewSettings {
            kind: c.kind,
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            dropout_p: c.dropout_p,
            attn_dim: c.attn_dim,
            readout: c.readout,
        }
    }
}

impl ViewSettings {
    pub fn to_config(&self, kind: ViewKind, corpus: &Corpus) -> ViewConfig {
        let mut c = ViewConfig::new(
            kind,
            corpus.frame_dim().unwrap_or(0),
            corpus.word_dim().unwrap_or(0),
        );
        c.hidden_dim = self.hidden_dim;
        c.num_layers = self.num_layers;
        c.dropout_p = self.dropout_p;
        c.attn_dim = self.attn_dim;
        c.readout = self.readout;
        c
    }
}

/// Fully resolved settings of a `train` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub folds: String,
    pub single_arrangement: bool,
    pub second_view: Option<ViewKind>,
    pub teacher: Option<PathBuf>,
    pub view: ViewSettings,
    pub train: TrainPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            out: PathBuf::from("runs"),
            folds: "all".into(),
            single_arrangement: false,
            second_view: None,
            teacher: None,
            view: ViewSettings::default(),
            train: TrainPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    /// File values (if any), then flags.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut c = match &args.config {
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::file(p, e))?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &args.corpus {
            c.corpus = Some(v.clone());
        }
        if let Some(v) = &args.out {
            c.out = v.clone();
        }
        if let Some(v) = &args.folds {
            c.folds = v.clone();
        }
        if let Some(v) = args.view {
            c.view.kind = v;
        }
        if let Some(v) = args.second_view {
            c.second_view = Some(v);
        }
        if let Some(v) = &args.teacher {
            c.teacher = Some(v.clone());
        }
        if let Some(v) = args.hidden {
            c.view.hidden_dim = v;
        }
        if let Some(v) = args.layers {
            c.view.num_layers = v;
        }
        if let Some(v) = args.dropout {
            c.view.dropout_p = v;
        }
        let t = &mut c.train;
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if let Some(v) = args.mode {
            t.mode = v;
        }
        if let Some(v) = args.neg_strategy {
            t.neg_strategy = v;
        }
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.lr {
            t.lr = v;
        }
        if let Some(v) = args.batch {
            t.batch_size = v;
        }
        if let Some(v) = args.margin {
            t.weights.margin = v;
        }
        if let Some(v) = args.beta_a {
            t.weights.beta_a = v;
        }
        if let Some(v) = args.beta_m {
            t.weights.beta_m = v;
        }
        if let Some(v) = args.rho {
            t.weights.rho = Some(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mode = self.train.mode;
        if self.corpus.is_none() {
            return Err(Error::Config("no corpus given (--corpus or `corpus` in the run file)".into()));
        }
        if mode.is_frozen() && self.teacher.is_none() {
            return Err(Error::Config(format!("mode {mode} needs --teacher")));
        }
        if !mode.is_frozen() && self.teacher.is_some() {
            return Err(Error::Config(format!("--teacher only applies to frozen modes, not {mode}")));
        }
        if mode != Mode::JointMultiview && self.second_view.is_some() {
            return Err(Error::Config(format!("--second-view only applies to joint-multiview, not {mode}")));
        }
        Ok(())
    }
}

/// Tab-separated class counts per speaker, then totals.
pub fn distribution_table(corpus: &Corpus) -> String {
    let mut rows: Vec<((u32, String), [usize; NUM_CLASSES])> = Vec::new();
    for r in &corpus.records {
        let key = (r.session, r.speaker.clone());
        let pos = match rows.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                rows.push((key, [0; NUM_CLASSES]));
                rows.len() - 1
            }
        };
        rows[pos].1[r.label.index()] += 1;
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut s = String::from("session\tspeaker");
    for e in Emotion::ALL {
        let _ = write!(s, "\t{e}");
    }
    s.push_str("\ttotal\n");
    let mut totals = [0usize; NUM_CLASSES];
    for ((session, speaker), counts) in &rows {
        let _ = write!(s, "{session}\t{speaker}");
        for (c, n) in counts.iter().enumerate() {
            totals[c] += n;
            let _ = write!(s, "\t{n}");
        }
        let _ = writeln!(s, "\t{}", counts.iter().sum::<usize>());
    }
    s.push_str("total\t-");
    for n in totals {
        let _ = write!(s, "\t{n}");
    }
    let _ = writeln!(s, "\t{}", totals.iter().sum::<usize>());
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let spec = match &args.config {
        Some(p) => GeneratorSpec::load(p)?,
        None => GeneratorSpec::default(),
    };
    let corpus = synth_generate(&spec, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_corpus(&corpus, &args.out)?;
    write_text(&args.out.with_extension("spec.toml"), &spec.to_toml())?;
    Ok(distribution_table(&corpus))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let corpus_path = cfg.corpus.as_ref().expect("validated");
    let corpus = load_corpus(corpus_path)?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
    let folds = make_folds(
        &corpus,
        FoldScheme {
            single_arrangement: cfg.single_arrangement,
        },
    )?;
    let folds = select_folds(&folds, &cfg.folds)?;
    let plan = &cfg.train;
    let teacher = match &cfg.teacher {
        Some(p) => Some(Checkpoint::load(p)?.view),
        None => None,
    };
    let primary_cfg = cfg.view.to_config(cfg.view.kind, &corpus);
    let mut rows = Vec::new();
    for fold in &folds {
        let part = fold.partition(&corpus);
        let second = match plan.mode {
            Mode::SingleView => None,
            Mode::JointMultiview => {
                let kind = cfg.second_view.unwrap_or(ViewKind::HMm4);
                Some(SecondView::Joint(cfg.view.to_config(kind, &corpus)))
            }
            Mode::FrozenTeacherCe | Mode::FrozenTeacherKl => {
                Some(SecondView::Teacher(teacher.clone().expect("validated")))
            }
        };
        log::info!("fold {}: {} train, {} validation, {} test", fold.fold_id, part.train.len(), part.validation.len(), part.test.len());
        let mut out = train(&corpus, &part, &primary_cfg, second, plan)?;
        let dir = cfg.out.join(format!("fold{:02}", fold.fold_id));
        create_dir(&dir)?;
        out.primary.meta.insert("fold".into(), fold.fold_id.to_string());
        out.primary.save(&dir.join(format!("{}.ckpt", primary_cfg.kind)))?;
        if plan.mode == Mode::JointMultiview {
            if let Some(s) = &mut out.second {
                s.meta.insert("fold".into(), fold.fold_id.to_string());
                s.save(&dir.join(format!("second-{}.ckpt", s.view.kind())))?;
            }
        }
        let mut log = String::new();
        for e in &out.log {
            let _ = writeln!(log, "{}", serde_json::to_string(e).expect("plain record"));
        }
        write_text(&dir.join("epochs.jsonl"), &log)?;
        let mut view = out.primary.view;
        let dev = evaluate(&mut view, &corpus, &part.validation, plan.limits, plan.batch_size)?;
        let test = if part.test.is_empty() {
            log::warn!("fold {} has no test utterances", fold.fold_id);
            f64::NAN
        } else {
            evaluate(&mut view, &corpus, &part.test, plan.limits, plan.batch_size)?.result.ua
        };
        rows.push(FoldRow {
            fold: fold.fold_id,
            dev_ua: dev.result.ua,
            test_ua: test,
        });
    }
    let tsv = cross_fold_summary(&rows)?.to_tsv(&primary_cfg.kind.to_string());
    write_text(&cfg.out.join("summary.tsv"), &tsv)?;
    Ok(tsv)
}

fn split_indices(corpus: &Corpus, fold: Option<usize>, split: Split) -> Result<Vec<usize>> {
    let Some(id) = fold else {
        return Ok((0..corpus.len()).collect());
    };
    let folds = make_folds(corpus, FoldScheme::default())?;
    let f = select_folds(&folds, &id.to_string())?;
    let p = f[0].partition(corpus);
    Ok(match split {
        Split::Train => p.train,
        Split::Validation => p.validation,
        Split::Test => p.test,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let mut view = Checkpoint::load(&args.checkpoint)?.view;
    let mut corpus = load_corpus(&args.corpus)?;
    if args.strip_lexical {
        corpus = corpus.strip_lexical();
    }
    let idx = split_indices(&corpus, args.fold, args.split)?;
    let limits = TrainPlan::default().limits;
    let ev = evaluate(&mut view, &corpus, &idx, limits, args.batch)?;
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&ev.result).expect("plain record");
    write_text(&args.out.join("eval.json"), &(json + "\n"))?;
    confusion_render(&ev.result, &args.out.join("confusion"), &format!("{} on {} utterances", view.kind(), idx.len()))?;
    let mut preds = String::from("id\tlabel\tpredicted");
    for e in Emotion::ALL {
        let _ = write!(preds, "\tp_{e}");
    }
    preds.push('\n');
    for p in &ev.predictions {
        let _ = write!(preds, "{}\t{}\t{}", p.id, Emotion::ALL[p.label], Emotion::ALL[p.predicted]);
        for q in &p.probs {
            let _ = write!(preds, "\t{q:.12}");
        }
        preds.push('\n');
    }
    write_text(&args.out.join("predictions.tsv"), &preds)?;
    if args.reports {
        let dir = args.out.join("reports");
        create_dir(&dir)?;
        for (p, &i) in ev.predictions.iter().zip(&idx) {
            attention_report(&corpus.records[i], view.kind(), p)?.write(&dir)?;
        }
    }
    Ok(format!(
        "{}\tua={:.6}\taccuracy={:.6}\tn={}\n",
        view.kind(),
        ev.result.ua,
        ev.result.accuracy,
        idx.len()
    ))
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let mut view = Checkpoint::load(&args.checkpoint)?.view;
    let corpus = load_corpus(&args.corpus)?;
    let idx: Vec<usize> = if args.all {
        (0..corpus.len()).collect()
    } else {
        let ids = args
            .ids
            .as_deref()
            .ok_or_else(|| Error::Config("give --ids or --all".into()))?;
        ids.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|id| {
                corpus
                    .records
                    .iter()
                    .position(|r| r.id == id)
                    .ok_or_else(|| Error::Config(format!("unknown utterance id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    if idx.is_empty() {
        return Err(Error::Config("no utterances selected".into()));
    }
    create_dir(&args.out)?;
    let limits = TrainPlan::default().limits;
    let mut listing = String::new();
    for &i in &idx {
        let u = &corpus.records[i];
        let p = predict_records(&mut view, &[u], limits, 1)?;
        let (txt, svg) = attention_report(u, view.kind(), &p[0])?.write(&args.out)?;
        let _ = writeln!(listing, "{}\t{}", txt.display(), svg.display());
    }
    Ok(listing)
}

/// 2 for configuration and input errors, 3 for numeric failures.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => RunConfig::resolve(a).and_then(|cfg| {
            eprint!("{}", cfg.to_toml()?);
            cmd_train(&cfg)
        }),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
