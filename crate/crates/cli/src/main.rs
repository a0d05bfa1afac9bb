use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ctrsgen::corpus::{build_vocabulary_with, CorpusStats};
use ctrsgen::decoder::{generate, Strategy};
use ctrsgen::encoders::load_embeddings;
use ctrsgen::evaluation::{evaluate_corpus, generate_all, SliceKey};
use ctrsgen::gradcheck::{run_suite, TOLERANCE};
use ctrsgen::training::{Checkpoint, EpochRecord, TrainConfig, Trainer};
use ctrsgen::{encode_quadruple, load_corpus, split_corpus, EncodedQuadruple, Vocabulary};

#[derive(Parser)]
#[command(
    name = "ctrsgen",
    version,
    about = "Generate query intent descriptions from relevant and irrelevant documents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, split and encode a JSONL corpus.
    Prep(PrepArgs),
    /// Train a model on prepared splits.
    Train(TrainArgs),
    /// Write one description per input instance.
    Generate(GenerateArgs),
    /// Score generated descriptions with ROUGE recall.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Dump per-step sentence attention of generated descriptions.
    InspectAttention(InspectArgs),
}

macro_rules! overrides {
    ($($field:ident: $ty:ty),* $(,)?) => {
        /// Per-field overrides of the training configuration.
        #[derive(Args, Debug, Default)]
        struct ConfigArgs {
            /// File of `key = value` lines applied before the flags below.
            #[arg(long)]
            config: Option<PathBuf>,
            $(#[arg(long)] $field: Option<$ty>,)*
        }

        impl ConfigArgs {
            fn apply_flags(&self, config: &mut TrainConfig) -> Result<()> {
                $(if let Some(v) = &self.$field {
                    config.set(stringify!($field), &v.to_string())?;
                })*
                Ok(())
            }
        }
    };
}

overrides!(
    lr: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    batch_size: usize,
    clip_norm: f64,
    lambda: f64,
    hidden: usize,
    embedding_dim: usize,
    init_range: f64,
    vocab_max: usize,
    include_descriptions: bool,
    untie_doc_encoders: bool,
    epochs: usize,
    patience: usize,
    seed: u64,
    max_query_len: usize,
    max_sentence_len: usize,
    max_sentences: usize,
    max_description_len: usize,
);

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut config = base;
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config
                .apply_kv(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        self.apply_flags(&mut config)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct PrepArgs {
    /// Raw corpus, one JSON quadruple per line.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test sizes.
    #[arg(long, default_value = "5000,100,258", value_parser = parse_split)]
    split: (usize, usize, usize),
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Text file of `token v1 … vD` lines used to initialize embeddings.
    #[arg(long, conflicts_with = "resume")]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width; 1 or absent means greedy.
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum number of decoding steps.
    #[arg(long, default_value_t = 60)]
    max_len: usize,
}

impl DecodeArgs {
    fn strategy(&self) -> Result<Strategy> {
        Ok(match self.beam {
            None | Some(1) => Strategy::Greedy,
            Some(0) => bail!("--beam must be at least 1"),
            Some(w) => Strategy::Beam(w),
        })
    }
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Encoded split written by `prep`, or a raw corpus with `--raw`.
    #[arg(long)]
    input: PathBuf,
    /// Treat `--input` as a raw corpus and encode it with the checkpoint vocabulary.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// JSONL output; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Directory for report.json and report.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Slicing keys: query_type, irrelevant, sentences.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "query_type,irrelevant,sentences"
    )]
    slices: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Directory receiving one TSV per instance.
    #[arg(long)]
    out: PathBuf,
    /// Only these instance ids.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn parse_split(s: &str) -> Result<(usize, usize, usize), String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated sizes".into()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_encoded(path: &Path) -> Result<Vec<EncodedQuadruple>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prep(args: PrepArgs) -> Result<()> {
    let config = args.config.resolve(TrainConfig::default())?;
    let corpus = load_corpus(&args.input)?;
    let split = split_corpus(&corpus, config.seed, args.split)?;
    let vocab = build_vocabulary_with(&split.train, config.vocab_options());
    let caps = config.caps();
    fs::create_dir_all(&args.out)?;
    for (name, part) in [
        ("train", &split.train),
        ("valid", &split.valid),
        ("test", &split.test),
    ] {
        let encoded = part
            .iter()
            .map(|q| encode_quadruple(q, &vocab, &caps))
            .collect::<Result<Vec<_>, _>>()?;
        write_jsonl(&args.out.join(format!("{name}.jsonl")), &encoded)?;
    }
    write_file(&args.out.join("vocab.txt"), vocab.to_text())?;
    #[derive(Serialize)]
    struct Stats {
        corpus: CorpusStats,
        train: CorpusStats,
        valid: CorpusStats,
        test: CorpusStats,
        vocabulary: usize,
    }
    let stats = Stats {
        corpus: CorpusStats::compute(&corpus),
        train: CorpusStats::compute(&split.train),
        valid: CorpusStats::compute(&split.valid),
        test: CorpusStats::compute(&split.test),
        vocabulary: vocab.len(),
    };
    write_file(
        &args.out.join("stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    write_file(&args.out.join("config.effective"), config.to_kv())?;
    println!(
        "{} queries, avg {:.2} words per query, {:.2} relevant and {:.2} irrelevant docs per query; vocabulary {}",
        stats.corpus.queries,
        stats.corpus.avg_query_words,
        stats.corpus.avg_relevant_docs,
        stats.corpus.avg_irrelevant_docs,
        vocab.len()
    );
    Ok(())
}

fn loss_log(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tsteps\ttrain_loss\tvalid_loss\tgrad_norm\n");
    for r in history {
        let valid = r
            .valid_loss
            .map_or_else(|| "NA".to_string(), |v| v.to_string());
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.steps, r.train_loss, valid, r.grad_norm
        );
    }
    out
}

fn train(args: TrainArgs) -> Result<()> {
    let vocab = Vocabulary::from_text(
        &fs::read_to_string(args.data.join("vocab.txt")).context("reading vocab.txt")?,
    )?;
    let train_split = read_encoded(&args.data.join("train.jsonl"))?;
    let valid_split = read_encoded(&args.data.join("valid.jsonl"))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ensure!(
                ckpt.vocab == vocab,
                "checkpoint vocabulary differs from {}",
                args.data.display()
            );
            let config = args.config.resolve(ckpt.config.clone())?;
            ensure!(
                config.model_config(vocab.len()) == ckpt.params.config,
                "architecture settings cannot change when resuming"
            );
            let mut trainer = Trainer::from_checkpoint(ckpt);
            trainer.adam.config = config.adam();
            trainer.config = config;
            trainer
        }
        None => {
            let config = args.config.resolve(TrainConfig::default())?;
            let mut trainer = Trainer::new(config, vocab)?;
            if let Some(path) = &args.embeddings {
                let file =
                    File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let n = load_embeddings(BufReader::new(file), &trainer.vocab, &mut trainer.params)?;
                eprintln!("loaded {n} embedding rows");
            }
            trainer
        }
    };
    fs::create_dir_all(&args.out)?;
    write_file(&args.out.join("config.effective"), trainer.config.to_kv())?;
    trainer.check_data(&train_split, &valid_split)?;
    while let Some(outcome) = trainer.next_epoch(&train_split, &valid_split)? {
        let r = &outcome.record;
        eprintln!(
            "epoch {} step {} train {:.4} valid {}",
            r.epoch,
            r.steps,
            r.train_loss,
            r.valid_loss.map_or("NA".into(), |v| format!("{v:.4}"))
        );
        if outcome.improved {
            if let Some(best) = trainer.best() {
                best.save(args.out.join("best.ckpt"))?;
            }
        }
        trainer.checkpoint().save(args.out.join("last.ckpt"))?;
        write_file(&args.out.join("loss_log.tsv"), loss_log(&trainer.history))?;
    }
    Ok(())
}

fn load_inputs(args: &InputArgs) -> Result<(Checkpoint, Vec<EncodedQuadruple>)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = if args.raw {
        let caps = ckpt.config.caps();
        load_corpus(&args.input)?
            .iter()
            .map(|q| encode_quadruple(q, &ckpt.vocab, &caps))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        read_encoded(&args.input)?
    };
    Ok((ckpt, data))
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let (ckpt, data) = load_inputs(&args.input)?;
    let predictions = generate_all(
        &ckpt.params,
        &ckpt.vocab,
        &data,
        args.decode.max_len,
        args.decode.strategy()?,
    )?;
    let mut out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        description: String,
    }
    for (q, p) in data.iter().zip(predictions) {
        serde_json::to_writer(
            &mut out,
            &Line {
                id: &q.id,
                description: p.join(" "),
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let keys = args
        .slices
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| SliceKey::parse(s).with_context(|| format!("unknown slice key {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let (ckpt, data) = load_inputs(&args.input)?;
    let report = evaluate_corpus(
        &ckpt.params,
        &ckpt.vocab,
        &data,
        &keys,
        args.decode.max_len,
        args.decode.strategy()?,
    )?;
    fs::create_dir_all(&args.out)?;
    write_file(
        &args.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_file(&args.out.join("report.tsv"), report.to_tsv())?;
    let mut effective = ckpt.config.to_kv();
    effective += &format!(
        "beam = {}\nmax_len = {}\n",
        args.decode.beam.unwrap_or(1),
        args.decode.max_len
    );
    write_file(&args.out.join("config.effective"), effective)?;
    let s = report.overall.scores;
    println!(
        "{} instances: rouge1 {:.4} rouge2 {:.4} rougeL {:.4}",
        report.overall.count, s.rouge1_recall, s.rouge2_recall, s.rouge_l_recall
    );
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<bool> {
    let mut ok = true;
    println!("check\tmax_rel_error\tcoordinates\tstatus");
    for e in run_suite(args.seed)? {
        ok &= e.passed();
        println!(
            "{}\t{:.3e}\t{}\t{}",
            e.name,
            e.report.max_error,
            e.report.coordinates,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    if !ok {
        eprintln!("some relative errors reached {TOLERANCE:e}");
    }
    Ok(ok)
}

/// File-name-safe form of an instance id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (ckpt, data) = load_inputs(&args.input)?;
    let strategy = args.decode.strategy()?;
    fs::create_dir_all(&args.out)?;
    let mut written = 0;
    for q in &data {
        if !args.ids.is_empty() && !args.ids.contains(&q.id) {
            continue;
        }
        let gen = generate(&ckpt.params, q, args.decode.max_len, strategy)?;
        let path = args.out.join(format!("{}.tsv", file_stem(&q.id)));
        let mut w = BufWriter::new(File::create(&path)?);
        gen.write_attention_tsv(&mut w)?;
        w.flush()?;
        println!("{}\t{}", q.id, ckpt.vocab.decode(&gen.tokens).join(" "));
        written += 1;
    }
    ensure!(written > 0, "no matching instances");
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CTRSGEN_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("CTRSGEN_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Prep(a) => prep(a)?,
        Command::Train(a) => train(a)?,
        Command::Generate(a) => generate_cmd(a)?,
        Command::Eval(a) => eval(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::InspectAttention(a) => inspect(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_flags_means_defaults() {
        let cli = Cli::try_parse_from(["ctrsgen", "train", "--data", "d", "--out", "o"]).unwrap();
        let Command::Train(args) = cli.command else {
            panic!()
        };
        assert_eq!(
            args.config.resolve(TrainConfig::default()).unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        fs::write(&path, "lr = 0.1\nhidden = 8\n").unwrap();
        let cli = Cli::try_parse_from([
            "ctrsgen",
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            path.to_str().unwrap(),
            "--hidden",
            "16",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!()
        };
        let c = args.config.resolve(TrainConfig::default()).unwrap();
        assert_eq!((c.lr, c.hidden), (0.1, 16));
    }

    #[test]
    fn unknown_flags_rejected() {
        assert!(Cli::try_parse_from([
            "ctrsgen",
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--learning-rate",
            "1"
        ])
        .is_err());
        assert!(Cli::try_parse_from(["ctrsgen", "eval", "--input", "x", "--out", "o"]).is_err());
    }

    #[test]
    fn stems_are_safe() {
        assert_eq!(file_stem("a/b c-1"), "a_b_c-1");
    }
}
