//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::alphabet::Alphabet;
use crate::beamsearch::{beam_search, DecodeConfig, LexiconMode, ModelEmitter};
use crate::bundle::ModelBundle;
use crate::decoder::AttentionMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, standard_filter, EvalSummary};
use crate::image::GrayImage;
use crate::lexicon::LexiconTrie;
use crate::model::{Model, ModelConfig};
use crate::ngram::{NgramModel, DEFAULT_DELTA, DEFAULT_ORDER};
use crate::synthdata::{
    builtin_words, load_dataset, load_word_list, render_range, sample_words, save_dataset, split_words,
    RenderConfig, Sample,
};
use crate::trainer::{gradient_check, toy_gradcheck_case, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "glyphread", version, about = "Attention-based word image recognition")]
pub struct Cli {
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Model bundle to read (decode, eval, ablate) or write (train)
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    /// Worker threads for evaluation
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on rendered words or a dataset directory
    Train(TrainArgs),
    /// Recognize one or more PGM images
    Decode(DecodeArgs),
    /// Word accuracy on a dataset directory
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a toy model
    Gradcheck(GradcheckArgs),
    /// Render a synthetic dataset directory
    GenData(GenDataArgs),
    /// Baseline / attention / +LM / +LM+lexicon accuracy table
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Word list to sample the vocabulary from (built-in list if omitted)
    #[arg(long, conflicts_with = "data")]
    pub corpus: Option<PathBuf>,
    /// Dataset directory with images/ and labels.tsv
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output bundle (same as --model)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log TSV (defaults to <out>.log.tsv)
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub words: usize,
    #[arg(long, default_value_t = 10)]
    pub renders: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Final learning rate as a fraction of --lr (cosine decay; 1 = constant)
    #[arg(long, default_value_t = 1.0)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Stop once validation accuracy (0 to 1) reaches this value
    #[arg(long)]
    pub stop_at: Option<f64>,
    /// Encoder channels of the three conv layers
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub embed: usize,
    #[arg(long, default_value_t = 64)]
    pub attention: usize,
    /// Train the no-attention baseline (features fed at the first step only)
    #[arg(long)]
    pub baseline: bool,
    /// Order of the n-gram model stored in the bundle (0 stores none)
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    pub lm_order: usize,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LexiconModeArg {
    Prune,
    Edit,
}

#[derive(Debug, Args)]
pub struct DecodeOptions {
    #[arg(long, default_value_t = 16)]
    pub beam: usize,
    /// Fuse a character LM: the bundle's when given without a value,
    /// otherwise one fitted to the word list at PATH
    #[arg(long, num_args = 0..=1, default_missing_value = "", value_name = "PATH")]
    pub lm: Option<String>,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    /// Leave END out of the LM term
    #[arg(long)]
    pub lm_skip_end: bool,
    /// Restrict output to the words in this list
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LexiconModeArg::Prune)]
    pub lexicon_mode: LexiconModeArg,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub options: DecodeOptions,
    /// Results to print per image
    #[arg(long, default_value_t = 1)]
    pub top: usize,
    /// Write per-step attention heat maps and steps.csv here
    #[arg(long, value_name = "DIR")]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub options: DecodeOptions,
    /// Skip ground-truth words shorter than this or with non-alphanumerics (0 keeps all)
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    /// Per-sample results TSV
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value = "ab")]
    pub target: String,
    #[arg(long)]
    pub baseline: bool,
    /// Also print per-tensor differences
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub words: usize,
    #[arg(long, default_value_t = 10)]
    pub renders: usize,
    /// Also write DIR/test with this many further renders per word
    #[arg(long, default_value_t = 0)]
    pub test_renders: usize,
    /// Hold out this fraction of words as DIR/test instead
    #[arg(long, conflicts_with = "test_renders")]
    pub held_out_words: Option<f64>,
    /// Index of the first render (keeps seeds disjoint across calls)
    #[arg(long, default_value_t = 0)]
    pub first_render: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub jitter: i64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// No-attention baseline bundle
    #[arg(long)]
    pub baseline_model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Word list for the LM (bundle LM if omitted)
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Word list for the lexicon rows (bundle lexicon if omitted)
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub beam: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    /// Output TSV (stdout if omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::GenData(a) => cmd_gen_data(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

fn required_model(cli: &Cli) -> Result<&Path> {
    cli.model.as_deref().ok_or_else(|| Error::Input("--model is required".into()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn corpus_words(corpus: Option<&Path>) -> Result<Vec<String>> {
    match corpus {
        Some(p) => load_word_list(p),
        None => Ok(builtin_words()),
    }
}

fn gen_render_config(seed: u64, noise: f64, jitter: i64) -> RenderConfig {
    RenderConfig {
        seed,
        noise_sigma: noise,
        jitter,
        ..Default::default()
    }
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let out = a
        .out
        .clone()
        .or_else(|| cli.model.clone())
        .ok_or_else(|| Error::Input("--out (or --model) is required".into()))?;
    if a.channels.len() != 3 {
        return Err(Error::Input(format!("--channels needs 3 values, got {}", a.channels.len())));
    }
    let (dataset, vocabulary) = match &a.data {
        Some(dir) => {
            let data = load_dataset(dir)?;
            let mut vocab: Vec<String> = data.iter().map(|s| s.word.clone()).collect();
            vocab.sort();
            vocab.dedup();
            (data, vocab)
        }
        None => {
            let words = sample_words(&corpus_words(a.corpus.as_deref())?, a.words, cli.seed);
            let rc = gen_render_config(cli.seed, a.noise, 1);
            (render_range(&words, 0, a.renders, &rc)?, words)
        }
    };
    let model_config = ModelConfig {
        encoder: EncoderConfig::with_channels(&[a.channels[0], a.channels[1], a.channels[2]]),
        attention_dim: a.attention,
        hidden_dim: a.hidden,
        embed_dim: a.embed,
        mode: if a.baseline { AttentionMode::FirstStepOnly } else { AttentionMode::Soft },
    };
    let train_config = TrainConfig {
        learning_rate: a.lr,
        final_lr_fraction: a.lr_final,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: cli.seed,
        validation_fraction: a.val_fraction,
        stop_at_val_acc: a.stop_at,
        verbose: !a.quiet,
        ..Default::default()
    };
    let (model, log) = train(&model_config, &train_config, &dataset)?;
    let mut bundle = ModelBundle::new(model);
    if a.lm_order > 0 {
        let lm_corpus = match &a.corpus {
            Some(p) => load_word_list(p)?,
            None if a.data.is_some() => vocabulary.clone(),
            None => builtin_words(),
        };
        bundle.lm = Some(NgramModel::fit(&lm_corpus, a.lm_order, DEFAULT_DELTA)?);
    }
    bundle.lexicon = Some(vocabulary);
    bundle.save(&out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    write_file(&log_path, log.to_tsv().as_bytes())?;
    Ok(0)
}

/// Resolved decode resources; borrowed by [`DecodeConfig`].
struct DecodeResources {
    lm: Option<NgramModel>,
    trie: Option<LexiconTrie>,
}

impl DecodeResources {
    fn load(opts: &DecodeOptions, bundle: &ModelBundle) -> Result<Self> {
        let lm = match opts.lm.as_deref() {
            None => None,
            Some("") => Some(
                bundle
                    .lm
                    .clone()
                    .ok_or_else(|| Error::Input("--lm given without a path but the bundle has no LM".into()))?,
            ),
            Some(path) => Some(NgramModel::fit(&load_word_list(Path::new(path))?, DEFAULT_ORDER, DEFAULT_DELTA)?),
        };
        let trie = match &opts.lexicon {
            Some(p) => Some(LexiconTrie::build(&load_word_list(p)?)?),
            None => None,
        };
        Ok(DecodeResources { lm, trie })
    }

    fn config(&self, opts: &DecodeOptions) -> DecodeConfig<'_> {
        DecodeConfig {
            beam_width: opts.beam,
            lm_weight: opts.alpha,
            lm: self.lm.as_ref(),
            lm_scores_end: !opts.lm_skip_end,
            trie: self.trie.as_ref(),
            lexicon_mode: match opts.lexicon_mode {
                LexiconModeArg::Prune => LexiconMode::Prune,
                LexiconModeArg::Edit => LexiconMode::Edit,
            },
            ..Default::default()
        }
    }
}

pub fn cmd_decode(cli: &Cli, a: &DecodeArgs) -> Result<i32> {
    let bundle = ModelBundle::load(required_model(cli)?)?;
    let res = DecodeResources::load(&a.options, &bundle)?;
    let config = res.config(&a.options);
    config.validate()?;
    if a.dump_attention.is_some() && a.images.len() != 1 {
        return Err(Error::Input("--dump-attention takes exactly one image".into()));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for path in &a.images {
        let image = GrayImage::load_pgm(path)?;
        let emitter = ModelEmitter::new(&bundle.model, &image)?;
        let results = beam_search(&emitter, &config)?;
        if a.images.len() > 1 {
            let _ = writeln!(out, "# {}", path.display());
        }
        for r in results.iter().take(a.top.max(1)) {
            let _ = writeln!(out, "{}\t{:.6}", r.word, r.score);
        }
        if let (Some(dir), Some(best)) = (&a.dump_attention, results.first()) {
            dump_attention(dir, &emitter, &image, &best.symbols)?;
        }
    }
    Ok(0)
}

/// One `step_<t>.pgm` per decode step (weights spread over the image by
/// nearest receptive-field center, scaled to the step maximum) and
/// `steps.csv` rows `step,symbol,w_1,…,w_K`.
fn dump_attention(dir: &Path, emitter: &ModelEmitter, image: &GrayImage, symbols: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trace = emitter.attention_trace(symbols)?;
    let centers = &emitter.features.grid.centers;
    let mut nearest = vec![0usize; image.height() * image.width()];
    for r in 0..image.height() {
        for c in 0..image.width() {
            let d = |&(cr, cc): &(f64, f64)| (cr - r as f64).powi(2) + (cc - c as f64).powi(2);
            nearest[r * image.width() + c] = (0..centers.len())
                .min_by(|&i, &j| d(&centers[i]).total_cmp(&d(&centers[j])))
                .unwrap_or(0);
        }
    }
    let mut csv = String::new();
    for (t, (step, &sym)) in trace.iter().zip(symbols).enumerate() {
        let w = step.weights.data();
        let peak = w.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let pixels = nearest.iter().map(|&k| w[k] / peak).collect();
        GrayImage::new(image.height(), image.width(), pixels)?.save_pgm(&dir.join(format!("step_{t}.pgm")))?;
        csv.push_str(&format!("{t},{}", Alphabet.label(sym)));
        for v in w {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    write_file(&dir.join("steps.csv"), csv.as_bytes())
}

fn run_eval(model: &Model, samples: &[Sample], config: &DecodeConfig, jobs: usize) -> Result<EvalSummary> {
    evaluate(
        samples,
        |img| {
            let best = beam_search(&ModelEmitter::new(model, img)?, config)?;
            Ok(best.into_iter().next().map(|d| d.word).unwrap_or_default())
        },
        jobs,
    )
}

fn filtered_dataset(dir: &Path, min_len: usize) -> Result<Vec<Sample>> {
    let data = load_dataset(dir)?;
    let data = if min_len > 0 { standard_filter(data, min_len) } else { data };
    if data.is_empty() {
        return Err(Error::Input(format!("{}: no samples to evaluate", dir.display())));
    }
    Ok(data)
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let bundle = ModelBundle::load(required_model(cli)?)?;
    let data = filtered_dataset(&a.data, a.min_len)?;
    let res = DecodeResources::load(&a.options, &bundle)?;
    let config = res.config(&a.options);
    config.validate()?;
    let summary = run_eval(&bundle.model, &data, &config, cli.jobs)?;
    println!("total\t{}", summary.total);
    println!("correct\t{}", summary.correct);
    println!("accuracy\t{:.2}", summary.accuracy);
    println!("mean_norm_edit\t{:.4}", summary.mean_norm_edit);
    if let Some(p) = &a.per_sample {
        write_file(p, summary.records_tsv().as_bytes())?;
    }
    Ok(0)
}

pub fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<i32> {
    let (mut model, image, _) = toy_gradcheck_case(cli.seed)?;
    if a.baseline {
        model.config.mode = AttentionMode::FirstStepOnly;
    }
    let report = gradient_check(&model, &image, &a.target, a.eps, a.tol)?;
    if a.verbose {
        print!("{report}");
    } else {
        for g in &report.groups {
            println!("{}\t{:.3e}\t{}", g.group, g.max_rel_error, if g.passed { "PASS" } else { "FAIL" });
        }
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}

pub fn cmd_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<i32> {
    let words = sample_words(&corpus_words(a.corpus.as_deref())?, a.words, cli.seed);
    let rc = gen_render_config(cli.seed, a.noise, a.jitter);
    if let Some(frac) = a.held_out_words {
        let (train_words, test_words) = split_words(&words, frac, cli.seed);
        save_dataset(&a.out.join("train"), &render_range(&train_words, a.first_render, a.renders, &rc)?)?;
        save_dataset(&a.out.join("test"), &render_range(&test_words, a.first_render, a.renders, &rc)?)?;
    } else if a.test_renders > 0 {
        save_dataset(&a.out.join("train"), &render_range(&words, a.first_render, a.renders, &rc)?)?;
        let test = render_range(&words, a.first_render + a.renders, a.test_renders, &rc)?;
        save_dataset(&a.out.join("test"), &test)?;
    } else {
        save_dataset(&a.out, &render_range(&words, a.first_render, a.renders, &rc)?)?;
    }
    Ok(0)
}

/// Rows of the ablation table.
pub const ABLATION_ROWS: [&str; 4] = ["baseline", "attention", "attention+lm", "attention+lm+lexicon"];

pub fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<i32> {
    let attention = ModelBundle::load(required_model(cli)?)?;
    let baseline = ModelBundle::load(&a.baseline_model)?;
    let data = filtered_dataset(&a.data, a.min_len)?;
    let lm = match &a.lm {
        Some(p) => NgramModel::fit(&load_word_list(p)?, DEFAULT_ORDER, DEFAULT_DELTA)?,
        None => attention
            .lm
            .clone()
            .ok_or_else(|| Error::Input("the attention bundle has no LM; pass --lm".into()))?,
    };
    let words = match &a.lexicon {
        Some(p) => load_word_list(p)?,
        None => attention
            .lexicon
            .clone()
            .ok_or_else(|| Error::Input("the attention bundle has no lexicon; pass --lexicon".into()))?,
    };
    let trie = LexiconTrie::build(&words)?;
    let plain = DecodeConfig { beam_width: a.beam, lm_weight: a.alpha, ..Default::default() };
    let with_lm = DecodeConfig { lm: Some(&lm), ..plain.clone() };
    let with_lex = DecodeConfig { trie: Some(&trie), ..with_lm.clone() };
    let runs: [(&Model, &DecodeConfig); 4] = [
        (&baseline.model, &plain),
        (&attention.model, &plain),
        (&attention.model, &with_lm),
        (&attention.model, &with_lex),
    ];
    let mut table = String::from("config\taccuracy\tcorrect\ttotal\tmean_norm_edit\n");
    for (name, (model, config)) in ABLATION_ROWS.iter().zip(runs) {
        let s = run_eval(model, &data, config, cli.jobs)?;
        table.push_str(&format!(
            "{name}\t{:.2}\t{}\t{}\t{:.4}\n",
            s.accuracy, s.correct, s.total, s.mean_norm_edit
        ));
    }
    match &a.out {
        Some(p) => write_file(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(0)
}
