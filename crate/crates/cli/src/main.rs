use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use cer::corpus::{encode_corpus, read_parallel, Vocabulary};
use cer::evaluation::{
    bleu, decode_all, robustness_eval, DecodeConfig, Method, RobustnessConfig, System, TestSet,
    DEFAULT_RATES, DEFAULT_SEEDS,
};
use cer::model::{load_checkpoint, save_checkpoint, Model};
use cer::perturb::Strategy;
use cer::training::gradcheck::run_suite;
use cer::training::{fine_tune, train, ExperimentConfig, Trainer, Variant, VariantConfig};

#[derive(Parser)]
#[command(
    name = "cer",
    version,
    about = "Noise-robust toy Transformer translation with context-enhanced reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a parallel corpus.
    Train(TrainArgs),
    /// Continue training a checkpoint on a new corpus with a fresh optimizer.
    Finetune(FinetuneArgs),
    /// Translate one sentence per line.
    Translate(TranslateArgs),
    /// Print corpus BLEU (x100, two decimals).
    Evaluate(EvaluateArgs),
    /// BLEU under test-time source noise for one or more checkpoints.
    Ablate(AblateArgs),
    /// Finite-difference checks of the numerics and the training objective.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Corpus {
    /// Source side, one sentence per line.
    #[arg(long)]
    src: PathBuf,
    /// Target side, aligned with `--src`.
    #[arg(long)]
    tgt: PathBuf,
}

#[derive(Args)]
struct Overrides {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Step log, one JSON object per line. Defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: Corpus,
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint path; vocabularies go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    #[command(flatten)]
    corpus: Corpus,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            method: if self.greedy {
                Method::Greedy
            } else {
                Method::Beam
            },
            beam: self.beam,
            alpha: self.alpha,
            ..DecodeConfig::default()
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, conflicts_with = "no_nal")]
    nal_active: bool,
    #[arg(long)]
    no_nal: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Hypothesis file; alternatively decode `--src` with `--checkpoint`.
    #[arg(long, conflicts_with_all = ["checkpoint", "src"])]
    hyp: Option<PathBuf>,
    #[arg(long, requires = "src")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    src: Option<PathBuf>,
    /// Reference file, or the stem of `ref.0`, `ref.1`, ...
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, conflicts_with = "no_nal")]
    nal_active: bool,
    #[arg(long)]
    no_nal: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// System names, one per checkpoint. Defaults to file stems.
    #[arg(long = "name")]
    names: Vec<String>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "madeup")]
    strategy: Strategy,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATES)]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Neighbours for the semantic strategy.
    #[arg(long, default_value_t = cer::perturb::DEFAULT_NEIGHBORS)]
    m: usize,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn vocab_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    (
        with_suffix(ckpt, ".src.vocab"),
        with_suffix(ckpt, ".tgt.vocab"),
    )
}

fn load_system(ckpt: &Path) -> Result<(Model<f32>, Vocabulary, Vocabulary)> {
    let model = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (sp, tp) = vocab_paths(ckpt);
    let sv = Vocabulary::load(&sp).with_context(|| format!("loading {}", sp.display()))?;
    let tv = Vocabulary::load(&tp).with_context(|| format!("loading {}", tp.display()))?;
    Ok((model, sv, tv))
}

fn save_system(out: &Path, model: &Model<f32>, sv: &Vocabulary, tv: &Vocabulary) -> Result<()> {
    save_checkpoint(out, model).with_context(|| format!("writing {}", out.display()))?;
    let (sp, tp) = vocab_paths(out);
    sv.save(sp)?;
    tv.save(tp)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// `path` itself, or `path.0`, `path.1`, ... when it does not exist.
fn read_references(path: &Path) -> Result<Vec<Vec<String>>> {
    if path.exists() {
        return Ok(read_lines(path)?.into_iter().map(|l| vec![l]).collect());
    }
    let mut sets = Vec::new();
    while with_suffix(path, &format!(".{}", sets.len())).exists() {
        sets.push(read_lines(&with_suffix(path, &format!(".{}", sets.len())))?);
    }
    ensure!(
        !sets.is_empty(),
        "no reference file {} (or {}.0)",
        path.display(),
        path.display()
    );
    let n = sets[0].len();
    ensure!(
        sets.iter().all(|s| s.len() == n),
        "reference files of {} differ in length",
        path.display()
    );
    Ok((0..n)
        .map(|i| sets.iter().map(|s| s[i].clone()).collect())
        .collect())
}

fn experiment(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &o.config {
        Some(p) => toml::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.variant {
        cfg.variant.variant = v;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.train.steps = s;
    }
    Ok(cfg)
}

fn log_writer(o: &Overrides, out: &Path) -> Result<BufWriter<fs::File>> {
    let path = o
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".log.jsonl"));
    Ok(BufWriter::new(
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn step_logger(
    mut w: BufWriter<fs::File>,
    every: u64,
) -> impl FnMut(&cer::training::StepLog) -> cer::Result<()> {
    move |log| {
        writeln!(w, "{}", serde_json::to_string(log)?)?;
        if log.step % every == 0 {
            log::info!(
                "step {} l_nmt {:.4} l_nal_x {:.4} l_nal_y {:.4}",
                log.step,
                log.l_nmt,
                log.l_nal_x,
                log.l_nal_y
            );
            w.flush()?;
        }
        Ok(())
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = experiment(&a.overrides)?;
    let (src, tgt) = read_parallel(&a.corpus.src, &a.corpus.tgt)?;
    let sv = Vocabulary::build(
        src.iter().map(String::as_str),
        cfg.train.max_vocab,
        cfg.train.madeup,
    )?;
    let tv = Vocabulary::build(tgt.iter().map(String::as_str), cfg.train.max_vocab, 0)?;
    let pairs = encode_corpus(
        src.iter()
            .map(String::as_str)
            .zip(tgt.iter().map(String::as_str)),
        &sv,
        &tv,
    );
    let mut mcfg = cfg.model.clone();
    mcfg.src_vocab = sv.total_size();
    mcfg.tgt_vocab = tv.total_size();
    cfg.variant.variant.configure(&mut mcfg);
    let model = Model::<f32>::new(mcfg, sv.real_size(), cfg.train.seed)?;
    let mut trainer = Trainer::new(
        model,
        cfg.variant.clone(),
        cfg.noise.clone(),
        cfg.optim.clone(),
        sv.clone(),
        tv.clone(),
        cfg.train.seed,
    )?;
    let mut log = step_logger(log_writer(&a.overrides, &a.out)?, 50);
    train(
        &mut trainer,
        pairs,
        cfg.train.steps,
        cfg.train.batch_tokens,
        |l, _| log(l),
    )?;
    save_system(&a.out, &trainer.model, &sv, &tv)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let cfg = experiment(&a.overrides)?;
    let (base, sv, tv) = load_system(&a.base)?;
    let (src, tgt) = read_parallel(&a.corpus.src, &a.corpus.tgt)?;
    let pairs = encode_corpus(
        src.iter()
            .map(String::as_str)
            .zip(tgt.iter().map(String::as_str)),
        &sv,
        &tv,
    );
    let mut log = step_logger(log_writer(&a.overrides, &a.out)?, 50);
    let (model, _) = fine_tune(
        &base,
        &sv,
        &tv,
        pairs,
        VariantConfig {
            variant: a.overrides.variant.unwrap_or(Variant::Baseline),
            ..cfg.variant.clone()
        },
        cfg.noise,
        cfg.optim,
        cfg.train.steps,
        cfg.train.batch_tokens,
        cfg.train.seed,
        |l, _| log(l),
    )?;
    save_system(&a.out, &model, &sv, &tv)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn nal_flag(model: &Model<f32>, on: bool, off: bool) -> bool {
    if on {
        true
    } else if off {
        false
    } else {
        model.config.nal_active_at_test
    }
}

fn translate_lines(
    model: &Model<f32>,
    sv: &Vocabulary,
    tv: &Vocabulary,
    lines: &[String],
    nal: bool,
    d: &DecodeArgs,
) -> Result<Vec<String>> {
    let srcs: Vec<Vec<u32>> = lines.iter().map(|l| sv.encode(l)).collect();
    let out = decode_all(model, &srcs, &d.config(), nal)?;
    Ok(out.iter().map(|ids| tv.decode(ids)).collect())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let (model, sv, tv) = load_system(&a.checkpoint)?;
    let nal = nal_flag(&model, a.nal_active, a.no_nal);
    let hyps = translate_lines(&model, &sv, &tv, &read_lines(&a.input)?, nal, &a.decode)?;
    let mut text = hyps.join("\n");
    if !hyps.is_empty() {
        text.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let refs = read_references(&a.reference)?;
    let hyps = match (&a.hyp, &a.checkpoint, &a.src) {
        (Some(h), _, _) => read_lines(h)?,
        (None, Some(c), Some(s)) => {
            let (model, sv, tv) = load_system(c)?;
            let nal = nal_flag(&model, a.nal_active, a.no_nal);
            translate_lines(&model, &sv, &tv, &read_lines(s)?, nal, &a.decode)?
        }
        _ => bail!("give either --hyp or both --checkpoint and --src"),
    };
    println!("{:.2}", 100.0 * bleu(&hyps, &refs)?);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    ensure!(
        a.names.is_empty() || a.names.len() == a.checkpoints.len(),
        "{} names for {} checkpoints",
        a.names.len(),
        a.checkpoints.len()
    );
    let loaded: Vec<_> = a
        .checkpoints
        .iter()
        .map(|c| load_system(c))
        .collect::<Result<_>>()?;
    let names: Vec<String> = if a.names.is_empty() {
        a.checkpoints
            .iter()
            .map(|c| {
                c.file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect()
    } else {
        a.names.clone()
    };
    let (_, sv, tv) = &loaded[0];
    for (name, (_, s, t)) in names.iter().zip(&loaded).skip(1) {
        ensure!(
            s == sv && t == tv,
            "system `{name}` does not share the first system's vocabularies"
        );
    }
    let src = read_lines(&a.src)?;
    let refs = read_references(&a.reference)?;
    ensure!(
        src.len() == refs.len(),
        "{} sources vs {} references",
        src.len(),
        refs.len()
    );
    let test = TestSet {
        src: src.iter().map(|l| sv.encode(l)).collect(),
        refs,
    };
    let systems: Vec<System<f32>> = names
        .iter()
        .zip(&loaded)
        .map(|(n, (m, _, _))| System {
            name: n,
            model: m,
            nal_active: m.config.nal_active_at_test,
        })
        .collect();
    let cfg = RobustnessConfig {
        strategy: a.strategy,
        rates: a.rates.clone(),
        seeds: a.seeds.clone(),
        m: a.m,
        decode: a.decode.config(),
        ..RobustnessConfig::default()
    };
    let report = robustness_eval(&systems, &test, sv, tv, &cfg)?;
    match &a.json {
        Some(p) => fs::write(p, report.to_json()?)?,
        None => println!("{}", report.to_json()?),
    }
    if let Some(p) = &a.tsv {
        fs::write(p, report.to_tsv())?;
    }
    for row in report.summary() {
        eprintln!(
            "{:>5} {:<12} {:6.2} ± {:.2} ({:+.2})",
            row.rate,
            row.system,
            100.0 * row.mean,
            100.0 * row.sd,
            100.0 * row.delta
        );
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let mut ok = true;
    for (name, r) in run_suite(seed)? {
        println!(
            "{:<24} {} max rel err {:.2e} (tol {:.0e})",
            name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.tol
        );
        ok &= r.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Finetune(a) => cmd_finetune(a)?,
        Command::Translate(a) => cmd_translate(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Gradcheck { seed } => return cmd_gradcheck(*seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
