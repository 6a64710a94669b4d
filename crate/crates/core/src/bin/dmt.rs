use std::error::Error;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmt::backtranslation::{generate_pseudo_parallel, mix, BtDirection, BtOptions, PseudoParallelCorpus};
use dmt::bleu::{score_lines, BleuConfig};
use dmt::corpus::{load_monolingual, load_parallel, split, write_lines, LanguageTag, ParallelCorpus, SentencePair};
use dmt::decoding::{translate_batch, DecodeConfig};
use dmt::experiment::{
    collect_results, render_markdown, render_tsv, run_experiment, runs_root, ExperimentConfig, KeyValues,
};
use dmt::models::{build_model, Arch, ModelConfig};
use dmt::pipeline::{Side, TextPipeline};
use dmt::subword::{apply_bpe, build_vocab, encode, learn_bpe, read_ids, undo_bpe, BpeModel, Vocabulary};
use dmt::textnorm::{detokenize, normalize, tokenize, transliterate, ScriptId, TokenizedSentence};
use dmt::training::{train, Checkpoint, DevSurface, EncodedPair, TrainConfig, TrainOptions};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "dmt", version, about = "Neural machine translation toolkit for low-resource Indic language pairs")]
struct Cli {
    /// Log progress (info level) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Text preparation steps.
    #[command(subcommand)]
    Prep(PrepCommand),
    /// Byte-pair encoding.
    #[command(subcommand)]
    Bpe(BpeCommand),
    /// Vocabularies.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Map subword lines to id lines.
    Binarize(BinarizeArgs),
    /// Partition a parallel corpus into train/dev/test.
    Split(SplitArgs),
    /// Train a model on binarized data.
    Train(TrainArgs),
    /// Translate text with a checkpoint.
    Translate(TranslateArgs),
    /// Build a pseudo-parallel corpus from monolingual text.
    Backtranslate(BacktranslateArgs),
    /// Mix real and pseudo-parallel corpora.
    Mix(MixArgs),
    /// Mean sentence BLEU of candidates against references.
    Score(ScoreArgs),
    /// Aggregate results of several runs into a systems × pairs table.
    Report(ReportArgs),
    /// Run a configured experiment end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct Io {
    /// Input file; stdin when omitted.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PrepCommand {
    /// Unicode and script-specific normalization.
    Normalize {
        #[arg(long)]
        lang: String,
        #[command(flatten)]
        io: Io,
    },
    /// Split punctuation from words.
    Tokenize {
        #[command(flatten)]
        io: Io,
    },
    /// Rejoin tokenized text.
    Detok {
        #[command(flatten)]
        io: Io,
    },
    /// Map text between Indic script blocks.
    Translit {
        /// Script of the input.
        #[arg(long)]
        from: ScriptId,
        /// Script of the output.
        #[arg(long, default_value = "devanagari")]
        to: ScriptId,
        #[command(flatten)]
        io: Io,
    },
}

#[derive(Subcommand)]
enum BpeCommand {
    /// Learn merges from tokenized text files.
    Learn {
        /// Training files (space-tokenized, one sentence per line).
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10000)]
        merges: usize,
        /// Merge file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment tokenized text.
    Apply {
        #[arg(long)]
        codes: PathBuf,
        #[command(flatten)]
        io: Io,
    },
    /// Remove continuation markers.
    Undo {
        #[command(flatten)]
        io: Io,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Count subwords and write a vocabulary.
    Build {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        /// Largest vocabulary size, specials excluded.
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BinarizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    io: Io,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    #[arg(long)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    dev: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Shuffle before splitting; contiguous slices when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes {train,dev,test}.{src,tgt} here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// BPE merge file.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    /// Skip pooling scripts into Devanagari.
    #[arg(long, default_value_t = false)]
    no_translit: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Output length cap; 2·source+10 when omitted.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Binarized source/target training files.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    train_ids: Vec<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    dev_ids: Vec<PathBuf>,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[arg(long, default_value = "transformer")]
    arch: Arch,
    /// key=value settings file (model.*, train.*).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as key=value; wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    /// Continue from the newest epoch checkpoint in --out-dir.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Receives checkpoints, best.dmt and report.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    io: Io,
}

#[derive(Args)]
struct BacktranslateArgs {
    /// Checkpoint of the model translating from the monolingual language.
    #[arg(long)]
    reverse_checkpoint: PathBuf,
    /// Monolingual text in the reverse model's source language.
    #[arg(long)]
    mono: PathBuf,
    /// Output prefix: writes PREFIX.src, PREFIX.tgt and PREFIX.prov.
    #[arg(long)]
    out: PathBuf,
    /// Pipeline of the reverse model (its source is the mono language).
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long, value_enum, default_value_t = DirectionArg::SyntheticSource)]
    direction: DirectionArg,
    /// Keep pairs whose token ratio lies in [LO, HI], e.g. 0.5,2.0.
    #[arg(long, value_parser = parse_ratio)]
    length_ratio: Option<(f64, f64)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    SyntheticSource,
    SyntheticTarget,
}

fn parse_ratio(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((
        lo.trim().parse().map_err(|_| format!("bad bound {lo:?}"))?,
        hi.trim().parse().map_err(|_| format!("bad bound {hi:?}"))?,
    ))
}

#[derive(Args)]
struct MixArgs {
    /// Real corpus prefix (PREFIX.src, PREFIX.tgt).
    #[arg(long)]
    real: PathBuf,
    /// Pseudo corpus prefix (PREFIX.src, PREFIX.tgt, PREFIX.prov).
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long, default_value_t = 1)]
    upsample_real: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    /// Output prefix: writes PREFIX.src, PREFIX.tgt and PREFIX.synthetic (0/1 per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    cand: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Remove BPE continuation markers first.
    #[arg(long, default_value_t = false)]
    undo_bpe: bool,
    /// Detokenize first.
    #[arg(long, default_value_t = false)]
    detok: bool,
    /// Map Devanagari text back into this script first.
    #[arg(long)]
    detranslit: Option<ScriptId>,
    /// Print per-sentence scores as TSV.
    #[arg(long, default_value_t = false)]
    detailed: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Markdown,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories; every run under the runs root when omitted.
    runs: Vec<PathBuf>,
    /// Runs root (falls back to DMT_RUNS_DIR, then ./runs).
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides as key=value; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the run name.
    #[arg(long)]
    name: Option<String>,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs root (falls back to DMT_RUNS_DIR, then ./runs).
    #[arg(long)]
    runs_dir: Option<PathBuf>,
}

fn read_input(path: Option<&Path>) -> CliResult<String> {
    match path {
        Some(p) if p != Path::new("-") => Ok(fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?),
        _ => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text)?;
            Ok(text)
        }
    }
}

fn write_output(path: Option<&Path>, lines: &[String]) -> CliResult {
    match path {
        Some(p) if p != Path::new("-") => Ok(write_lines(p, lines)?),
        _ => {
            let mut out = std::io::stdout().lock();
            for line in lines {
                writeln!(out, "{line}")?;
            }
            Ok(())
        }
    }
}

/// Applies `f` to every input line.
fn map_lines(io: &Io, f: impl Fn(&str) -> String) -> CliResult {
    let text = read_input(io.input.as_deref())?;
    let lines: Vec<String> = text.lines().map(f).collect();
    write_output(io.output.as_deref(), &lines)
}

fn lang(code: &str) -> CliResult<LanguageTag> {
    Ok(LanguageTag::parse(code).or_else(|_| LanguageTag::custom(code))?)
}

fn load_pipeline(args: &PipelineArgs) -> CliResult<TextPipeline> {
    let side = |code: &str| -> CliResult<Side> {
        let l = lang(code)?;
        Ok(if args.no_translit { Side::without_script(l) } else { Side::for_lang(l) })
    };
    Ok(TextPipeline {
        source: side(&args.src_lang)?,
        target: side(&args.tgt_lang)?,
        bpe: BpeModel::load(&args.codes)?,
        src_vocab: Vocabulary::load(&args.src_vocab)?,
        tgt_vocab: Vocabulary::load(&args.tgt_vocab)?,
    })
}

fn load_checkpoint(path: &Path, pipeline: &TextPipeline) -> CliResult<Checkpoint> {
    let checkpoint = Checkpoint::load(path)?;
    checkpoint.check_vocabs(&pipeline.src_vocab, &pipeline.tgt_vocab)?;
    Ok(checkpoint)
}

fn apply_overrides(kv: &mut KeyValues, overrides: &[String]) -> CliResult {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

fn tokenized_files(paths: &[PathBuf]) -> CliResult<Vec<TokenizedSentence>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_input(Some(p))?.lines().map(TokenizedSentence::from_spaced));
    }
    Ok(out)
}

fn prep(cmd: PrepCommand) -> CliResult {
    match cmd {
        PrepCommand::Normalize { lang: code, io } => {
            let l = lang(&code)?;
            map_lines(&io, |line| normalize(line, &l))
        }
        PrepCommand::Tokenize { io } => map_lines(&io, |line| tokenize(line).joined()),
        PrepCommand::Detok { io } => map_lines(&io, |line| detokenize(&TokenizedSentence::from_spaced(line))),
        PrepCommand::Translit { from, to, io } => map_lines(&io, |line| transliterate(line, from, to).text),
    }
}

fn bpe(cmd: BpeCommand) -> CliResult {
    match cmd {
        BpeCommand::Learn { inputs, merges, out } => {
            let corpus = tokenized_files(&inputs)?;
            let model = learn_bpe(corpus.iter(), merges);
            log::info!("learned {} merges", model.len());
            Ok(model.save(&out)?)
        }
        BpeCommand::Apply { codes, io } => {
            let model = BpeModel::load(&codes)?;
            map_lines(&io, |line| apply_bpe(&model, &TokenizedSentence::from_spaced(line)).join(" "))
        }
        BpeCommand::Undo { io } => map_lines(&io, |line| {
            let pieces: Vec<&str> = line.split_whitespace().collect();
            undo_bpe(&pieces).joined()
        }),
    }
}

fn vocab(cmd: VocabCommand) -> CliResult {
    let VocabCommand::Build {
        inputs,
        min_count,
        max_size,
        out,
    } = cmd;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for p in &inputs {
        rows.extend(
            read_input(Some(p))?
                .lines()
                .map(|l| l.split_whitespace().map(str::to_string).collect()),
        );
    }
    let vocab = build_vocab(rows.iter().map(Vec::as_slice), min_count, max_size);
    log::info!("vocabulary of {} entries", vocab.len());
    Ok(vocab.save(&out)?)
}

fn binarize(args: BinarizeArgs) -> CliResult {
    let vocab = Vocabulary::load(&args.vocab)?;
    map_lines(&args.io, |line| {
        encode(&vocab, &line.split_whitespace().collect::<Vec<_>>())
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn split_cmd(args: SplitArgs) -> CliResult {
    let (corpus, report) = load_parallel(&args.src, &args.tgt, lang(&args.src_lang)?, lang(&args.tgt_lang)?)?;
    if report.blank + report.one_sided > 0 {
        log::warn!("dropped {} blank and {} one-sided lines", report.blank, report.one_sided);
    }
    let (train_set, dev, test) = split(&corpus, args.train, args.dev, args.test, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;
    for (name, part) in [("train", train_set), ("dev", dev), ("test", test)] {
        part.write(
            &args.out_dir.join(format!("{name}.src")),
            &args.out_dir.join(format!("{name}.tgt")),
        )?;
    }
    Ok(())
}

fn load_id_pairs(files: &[PathBuf], src: &Vocabulary, tgt: &Vocabulary) -> CliResult<Vec<EncodedPair>> {
    let s = read_ids(&files[0], src.len())?;
    let t = read_ids(&files[1], tgt.len())?;
    if s.len() != t.len() {
        return Err(format!("{} has {} lines but {} has {}", files[0].display(), s.len(), files[1].display(), t.len()).into());
    }
    Ok(s.into_iter().zip(t).map(|(s, t)| EncodedPair::new(s, t)).collect())
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let src_vocab = Vocabulary::load(&args.src_vocab)?;
    let tgt_vocab = Vocabulary::load(&args.tgt_vocab)?;
    let mut kv = match &args.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if kv.get("arch").is_none() {
        kv.set("arch", args.arch.name());
    }
    apply_overrides(&mut kv, &args.overrides)?;
    let get = |k: &str| kv.get(k).map(str::to_string);
    let model_config = ModelConfig::from_lookup(&get)?;
    let config = TrainConfig::from_lookup(model_config.arch(), &get)?;
    let train_set = load_id_pairs(&args.train_ids, &src_vocab, &tgt_vocab)?;
    let dev_set = load_id_pairs(&args.dev_ids, &src_vocab, &tgt_vocab)?;
    let mut model = build_model(&model_config, src_vocab.len(), tgt_vocab.len(), args.model_seed)?;
    let options = TrainOptions {
        run_dir: Some(args.out_dir.clone()),
        fingerprints: (src_vocab.fingerprint(), tgt_vocab.fingerprint()),
        surface: Some(DevSurface::Text(&tgt_vocab)),
        resume: args.resume,
    };
    let outcome = train(&mut model, &train_set, &dev_set, &config, &options)?;
    let best = outcome.report.best().map_or(0.0, |r| r.dev_bleu);
    println!(
        "best epoch {} dev_bleu {best:.4} ({} epochs, {:.1}s)",
        outcome.report.best_epoch,
        outcome.report.epochs.len(),
        outcome.report.wall_seconds
    );
    Ok(())
}

fn translate_cmd(args: TranslateArgs) -> CliResult {
    let pipeline = load_pipeline(&args.pipeline)?;
    let model = load_checkpoint(&args.checkpoint, &pipeline)?.to_model()?;
    let text = read_input(args.io.input.as_deref())?;
    let lines: Vec<&str> = text.lines().collect();
    let out = translate_batch(&model, &lines, &pipeline, &args.decode.config())?;
    write_output(args.io.output.as_deref(), &out)
}

fn backtranslate_cmd(args: BacktranslateArgs) -> CliResult {
    let pipeline = load_pipeline(&args.pipeline)?;
    let checkpoint = load_checkpoint(&args.reverse_checkpoint, &pipeline)?;
    let mono = load_monolingual(&args.mono, pipeline.source.lang.clone())?;
    let options = BtOptions {
        decode: args.decode.config(),
        direction: match args.direction {
            DirectionArg::SyntheticSource => BtDirection::SyntheticSource,
            DirectionArg::SyntheticTarget => BtDirection::SyntheticTarget,
        },
        length_ratio: args.length_ratio,
    };
    let pseudo = generate_pseudo_parallel(&checkpoint, &mono, &pipeline, &options)?;
    pseudo.save(&args.out)?;
    eprintln!(
        "{} pseudo pairs from {} lines ({} empty, {} filtered)",
        pseudo.len(),
        mono.sentences.len(),
        pseudo.dropped_empty,
        pseudo.dropped_ratio
    );
    Ok(())
}

fn mix_cmd(args: MixArgs) -> CliResult {
    let (src_lang, tgt_lang) = (lang(&args.src_lang)?, lang(&args.tgt_lang)?);
    let [src, tgt, _] = PseudoParallelCorpus::paths(&args.real);
    let (real, _) = load_parallel(&src, &tgt, src_lang.clone(), tgt_lang.clone())?;
    let pseudo = PseudoParallelCorpus::load(&args.pseudo, src_lang, tgt_lang)?;
    let mixed: ParallelCorpus = mix(&real, &pseudo.corpus, args.upsample_real, args.seed)?;
    let [out_src, out_tgt, _] = PseudoParallelCorpus::paths(&args.out);
    mixed.write(&out_src, &out_tgt)?;
    let flags: Vec<&str> = mixed
        .pairs
        .iter()
        .map(|p: &SentencePair| if p.synthetic { "1" } else { "0" })
        .collect();
    let mut flag_path = args.out.into_os_string();
    flag_path.push(".synthetic");
    write_lines(Path::new(&flag_path), &flags)?;
    eprintln!("{} pairs ({} synthetic)", mixed.len(), pseudo.len());
    Ok(())
}

fn score_cmd(args: ScoreArgs) -> CliResult {
    let prep = |line: &str| -> String {
        let mut text = line.to_string();
        if args.undo_bpe {
            let pieces: Vec<&str> = text.split_whitespace().collect();
            text = undo_bpe(&pieces).joined();
        }
        if args.detok {
            text = detokenize(&TokenizedSentence::from_spaced(&text));
        }
        if let Some(script) = args.detranslit {
            text = transliterate(&text, ScriptId::Devanagari, script).text;
        }
        text
    };
    let cands: Vec<String> = read_input(Some(&args.cand))?.lines().map(prep).collect();
    let refs: Vec<String> = read_input(Some(&args.reference))?.lines().map(prep).collect();
    let report = score_lines(&cands, &refs, &BleuConfig::default())?;
    if args.detailed {
        print!("{}", report.to_tsv());
    } else {
        println!("{:.4}", report.mean);
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> CliResult {
    let dirs = if args.runs.is_empty() {
        let root = runs_root(args.runs_dir.as_deref());
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| format!("{}: {e}", root.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        dirs
    } else {
        args.runs
    };
    let rows = collect_results(&dirs)?;
    if rows.is_empty() {
        return Err("no results.tsv found in the given runs".into());
    }
    print!(
        "{}",
        match args.format {
            Format::Tsv => render_tsv(&rows),
            Format::Markdown => render_markdown(&rows),
        }
    );
    Ok(())
}

fn run_cmd(args: RunArgs) -> CliResult {
    let mut kv = KeyValues::load(&args.config)?;
    apply_overrides(&mut kv, &args.overrides)?;
    if let Some(name) = &args.name {
        kv.set("name", name);
    }
    if let Some(seed) = args.seed {
        kv.set("seed", &seed.to_string());
    }
    let base = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let config = ExperimentConfig::from_kv(&kv, base)?;
    let summary = run_experiment(&config, &runs_root(args.runs_dir.as_deref()))?;
    println!("{}\t{}\t{:.4}", summary.run_dir.display(), config.system, summary.bleu);
    Ok(())
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
            eprintln!("{stamp} {} {}", record.level(), record.args());
        }
    }

    fn flush(&self) {}
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = log::set_logger(&StderrLogger);
    log::set_max_level(if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    });
    let result = match cli.command {
        Command::Prep(c) => prep(c),
        Command::Bpe(c) => bpe(c),
        Command::Vocab(c) => vocab(c),
        Command::Binarize(a) => binarize(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Backtranslate(a) => backtranslate_cmd(a),
        Command::Mix(a) => mix_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = e.source();
            while let Some(s) = source {
                msg.push_str(": ");
                msg.push_str(&s.to_string());
                source = s.source();
            }
            eprintln!("dmt: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
