use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use cwlm::grid::{run_grid, GridSpec, PointOutcome};
use cwlm::pipeline::{read_text, run_training, PreparedData};
use cwlm::{
    load_checkpoint, oov_followup_analysis, param_count, parse_config, perplexity, relative_change,
    relative_improvement, tokenize_lines, CharVocab, Checkpoint, RunConfig, SizeSpec, Vocabulary,
};
use cwlm::evaluation::ScoredModel;

#[derive(Parser)]
#[command(name = "cwlm", version, about = "Character-word LSTM language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build vocabularies from a training split and report corpus statistics.
    Prep(PrepArgs),
    /// Train a model and write config.txt, train.log and model.ckpt.
    Train(RunArgs),
    /// Perplexity of a checkpoint on a text file.
    Eval(EvalArgs),
    /// Compare a character-word model and a word model after unknown words.
    AnalyzeOov(OovArgs),
    /// Parameter counts for a model size.
    ParamCount(CountArgs),
    /// Relative improvement of one perplexity over another.
    Compare(CompareArgs),
    /// Train every point of a grid and write results.tsv.
    Grid(GridArgs),
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    /// Directory for vocab.txt and chars.txt.
    #[arg(long)]
    out: PathBuf,
}

/// Run settings. Flags become `key=value` overrides applied after `--config`.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_chars: Option<usize>,
    #[arg(long)]
    char_emb: Option<usize>,
    #[arg(long)]
    char_order: Option<String>,
    #[arg(long)]
    shared_weights: bool,
    #[arg(long)]
    random_control: bool,
    #[arg(long)]
    use_oov_surfaces: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any configuration key, e.g. `--set keep_prob=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("preset", self.preset.clone());
        push("train", path(&self.train));
        push("valid", path(&self.valid));
        push("test", path(&self.test));
        push("vocab_size", self.vocab_size.map(|v| v.to_string()));
        push("hidden", self.hidden.map(|v| v.to_string()));
        push("total_epochs", self.epochs.map(|v| v.to_string()));
        push("n_chars", self.n_chars.map(|v| v.to_string()));
        push("char_emb", self.char_emb.map(|v| v.to_string()));
        push("char_order", self.char_order.clone());
        push("shared_weights", self.shared_weights.then(|| "true".into()));
        push("random_control", self.random_control.then(|| "true".into()));
        push("use_oov_surfaces", self.use_oov_surfaces.then(|| "true".into()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("out", path(&self.out));
        o.extend(self.sets.iter().cloned());
        o
    }

    fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => read_text(p)?,
            None => String::new(),
        };
        Ok(parse_config(&text, &self.overrides())?)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to score, one sentence per line.
    #[arg(long)]
    data: PathBuf,
    /// Chunk length; defaults to the training unroll.
    #[arg(long)]
    unroll: Option<usize>,
    /// Write per-token log-probabilities here, one per line.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct OovArgs {
    /// Character-word checkpoint first, word-level second.
    #[arg(long, num_args = 1, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    unroll: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    /// Total embedding size (equal to the hidden size).
    #[arg(long)]
    embedding: usize,
    #[arg(long, default_value_t = 0)]
    n_chars: usize,
    #[arg(long, default_value_t = 0)]
    char_emb: usize,
    /// Number of real characters.
    #[arg(long, default_value_t = 48)]
    char_vocab: usize,
    #[arg(long)]
    shared_weights: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Count only the embedding tables.
    #[arg(long)]
    embedding_only: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Candidate perplexity, or a checkpoint scored on `--data`.
    #[arg(long)]
    candidate: String,
    /// Baseline perplexity, or a checkpoint scored on `--data`.
    #[arg(long)]
    baseline: String,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Grid file: `key = v1, v2` lines.
    #[arg(long)]
    grid: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cwlm: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep(a) => prep(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeOov(a) => analyze_oov(a),
        Command::ParamCount(a) => count(a),
        Command::Compare(a) => compare(a),
        Command::Grid(a) => grid(a),
    }
}

fn prep(a: PrepArgs) -> Result<()> {
    let text = read_text(&a.train)?;
    let tokens = tokenize_lines(&text);
    let vocab = Vocabulary::build(tokens.iter().copied(), a.vocab_size)?;
    let chars = CharVocab::build(tokens.iter().copied());
    let stream = vocab.encode_stream(&tokens);
    let unk = stream.ids.iter().filter(|&&id| id == Vocabulary::UNK_ID).count();
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    write(&a.out.join("vocab.txt"), &vocab.to_text())?;
    let char_lines: String = chars.chars().iter().map(|c| format!("{c}\n")).collect();
    write(&a.out.join("chars.txt"), &char_lines)?;
    println!("tokens = {}", stream.len());
    println!("vocab = {}", vocab.len());
    println!("chars = {}", chars.real_count());
    println!("unk_tokens = {unk}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| path.display().to_string())
}

fn train(a: RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let out = cfg.out.clone().context("`out` is required for training")?;
    let data = PreparedData::load(&cfg)?;
    println!("epoch\tlr\ttrain_ppl\tvalid_ppl\tseconds");
    let result = run_training(&cfg, &data, Some(&out), &mut |r| println!("{}", r.to_line()))?;
    println!("params = {}", result.param_count);
    println!("valid: {}", result.valid.summary_line());
    if let Some(t) = &result.test {
        println!("test: {}", t.summary_line());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint(path).with_context(|| path.display().to_string())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_model(&a.checkpoint)?;
    let text = read_text(&a.data)?;
    let stream = ckpt.vocab.encode_stream(&tokenize_lines(&text));
    let unroll = a.unroll.unwrap_or(ckpt.config.train.unroll);
    let report = perplexity(&ckpt.params, &ckpt.encoder(), &stream, unroll, a.trace.is_some())?;
    if let (Some(path), Some(trace)) = (&a.trace, &report.trace) {
        let lines: String = trace.iter().map(|lp| format!("{lp}\n")).collect();
        write(path, &lines)?;
    }
    print!("{}", report.to_key_values());
    Ok(())
}

fn analyze_oov(a: OovArgs) -> Result<()> {
    ensure!(
        a.checkpoint.len() == 2,
        "expected two --checkpoint values (character-word, then word-level), got {}",
        a.checkpoint.len()
    );
    let cw = load_model(&a.checkpoint[0])?;
    let word = load_model(&a.checkpoint[1])?;
    ensure!(
        cw.vocab == word.vocab,
        "the two checkpoints were trained with different word vocabularies"
    );
    let text = read_text(&a.data)?;
    let stream = cw.vocab.encode_stream(&tokenize_lines(&text));
    let unroll = a.unroll.unwrap_or(cw.config.train.unroll);
    let (ecw, eword) = (cw.encoder(), word.encoder());
    let report = oov_followup_analysis(
        ScoredModel { params: &cw.params, encoder: &ecw },
        ScoredModel { params: &word.params, encoder: &eword },
        &stream,
        unroll,
    )?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let spec = SizeSpec {
        vocab: a.vocab_size,
        embedding: a.embedding,
        n_chars: a.n_chars,
        char_emb: a.char_emb,
        char_vocab: a.char_vocab,
        shared: a.shared_weights,
        layers: a.layers,
    };
    println!("{}", param_count(&spec, a.embedding_only)?);
    Ok(())
}

fn ppl_of(arg: &str, data: Option<&Path>) -> Result<f64> {
    if let Ok(v) = arg.parse::<f64>() {
        ensure!(v.is_finite() && v > 0.0, "perplexity {arg} must be positive");
        return Ok(v);
    }
    let Some(data) = data else {
        bail!("`{arg}` is not a number; scoring a checkpoint needs --data");
    };
    let ckpt = load_model(Path::new(arg))?;
    let stream = ckpt.vocab.encode_stream(&tokenize_lines(&read_text(data)?));
    Ok(perplexity(&ckpt.params, &ckpt.encoder(), &stream, ckpt.config.train.unroll, false)?.perplexity)
}

fn compare(a: CompareArgs) -> Result<()> {
    let c = ppl_of(&a.candidate, a.data.as_deref())?;
    let b = ppl_of(&a.baseline, a.data.as_deref())?;
    println!("candidate_ppl = {c:.4}");
    println!("baseline_ppl = {b:.4}");
    println!("relative_improvement = {:.2}", relative_improvement(c, b));
    println!("relative_change = {:.2}", relative_change(c, b));
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let spec = GridSpec::parse(&read_text(&a.grid)?)?;
    let base = a.run.resolve()?;
    let out = base.out.clone().context("`out` is required for a grid")?;
    let data = PreparedData::load(&base)?;
    let table = run_grid(&base, &spec, &mut |label, cfg| {
        eprintln!("running {label}");
        let result = run_training(cfg, &data, Some(&out.join(label)), &mut |r| eprintln!("  {}", r.to_line()))
            .map_err(|e| e.to_string())?;
        Ok(PointOutcome {
            valid_ppl: result.valid.perplexity,
            test_ppl: result.test.map(|t| t.perplexity),
            params: result.param_count,
        })
    });
    for row in table.skipped() {
        eprintln!("warning: skipped {}", row.label);
    }
    let tsv = table.to_tsv();
    fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    write(&out.join("results.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}
