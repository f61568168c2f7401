use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use toml::Value;
use xdlm::corpus::{
    load_parallel, load_tsv, synth_copy_corpus, synth_mapping_corpus, with_lang_suffix, MappingTable, ParallelCorpus,
    Split,
};
use xdlm::decoding::{step_grid, sweep_csv, Decoder};
use xdlm::diffusion::NoiseKind;
use xdlm::evaluation::{evaluate as score_files, EvalMode};
use xdlm::model::{build_model, load_checkpoint, DenoiserModel};
use xdlm::oracle::{run_oracle_suite, OracleBounds};
use xdlm::schedule::{schedule_table_csv, NoiseSchedule};
use xdlm::seeding::{derive_seed, CORPUS_STREAM, INIT_STREAM};
use xdlm::tokenizer::{bpe_train as fit_bpe, vocab_build, BpeModel, Vocabulary};
use xdlm::training::{EncodedCorpus, EncodedPair, Task, Trainer};

use crate::config::{parse_override, resolve, RunConfig, SNAPSHOT_NAME};
use crate::Common;

const MERGES_FILE: &str = "merges.txt";
const VOCAB_FILE: &str = "vocab.txt";

type Overrides = Vec<(Vec<String>, Value)>;

fn push<V: Into<Value>>(o: &mut Overrides, key: &str, v: Option<V>) {
    if let Some(v) = v {
        o.push((key.split('.').map(str::to_string).collect(), v.into()));
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn paths_value(ps: &[PathBuf]) -> Option<Value> {
    (!ps.is_empty()).then(|| Value::Array(ps.iter().map(|p| path_value(p)).collect()))
}

fn to_i64(n: usize) -> i64 {
    i64::try_from(n).unwrap_or(i64::MAX)
}

fn resolved(common: &Common, mut extra: Overrides, pretrain: bool) -> Result<RunConfig> {
    let mut all = Overrides::new();
    push(&mut all, "seed", common.seed.map(|s| i64::try_from(s).unwrap_or(i64::MAX)));
    for s in &common.overrides {
        all.push(parse_override(s)?);
    }
    // Dedicated flags win over `--set`.
    all.append(&mut extra);
    if let Some(p) = &common.config {
        require(p, "config file")?;
    }
    resolve(common.profile, common.config.as_deref(), &all, pretrain)
}

fn require(path: &Path, what: &str) -> Result<()> {
    ensure!(path.exists(), "{what} {} does not exist", path.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn corpus_files(cfg: &RunConfig, prefix: &Path, reversed: bool) -> (PathBuf, PathBuf, String, String) {
    let (s, t) = (&cfg.data.source_lang, &cfg.data.target_lang);
    let (s, t) = if reversed { (t, s) } else { (s, t) };
    (with_lang_suffix(prefix, s), with_lang_suffix(prefix, t), s.clone(), t.clone())
}

fn check_corpus(cfg: &RunConfig, prefix: &Path, reversed: bool) -> Result<()> {
    let (src, tgt, _, _) = corpus_files(cfg, prefix, reversed);
    require(&src, "corpus file")?;
    require(&tgt, "corpus file")
}

fn load_corpus(cfg: &RunConfig, prefix: &Path, reversed: bool, split: Split) -> Result<ParallelCorpus> {
    let (src, tgt, sl, tl) = corpus_files(cfg, prefix, reversed);
    load_parallel(&src, &tgt, &sl, &tl, split).with_context(|| format!("loading corpus {}", prefix.display()))
}

/// Every training corpus, forward ones first.
fn training_corpora(cfg: &RunConfig) -> Result<Vec<ParallelCorpus>> {
    ensure!(
        !cfg.data.train.is_empty() || !cfg.data.train_reversed.is_empty(),
        "no training data; pass --data"
    );
    let entries: Vec<(&PathBuf, bool)> = cfg
        .data
        .train
        .iter()
        .map(|p| (p, false))
        .chain(cfg.data.train_reversed.iter().map(|p| (p, true)))
        .collect();
    for &(p, rev) in &entries {
        check_corpus(cfg, p, rev)?;
    }
    entries.into_iter().map(|(p, rev)| load_corpus(cfg, p, rev, Split::Train)).collect()
}

fn tokenizer_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.data.tokenizer.as_deref().context("no tokenizer; pass --tokenizer")?;
    for f in [MERGES_FILE, VOCAB_FILE] {
        require(&dir.join(f), "tokenizer file")?;
    }
    Ok(dir)
}

fn load_tokenizer(dir: &Path) -> Result<(BpeModel, Vocabulary)> {
    Ok((BpeModel::load(&dir.join(MERGES_FILE))?, Vocabulary::load(&dir.join(VOCAB_FILE))?))
}

/// Loads a checkpoint for decoding together with its schedule and noise.
fn load_for_decoding(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(DenoiserModel, NoiseSchedule, NoiseKind)> {
    let path = cfg.data.checkpoint.as_deref().context("no checkpoint; pass --checkpoint")?;
    require(path, "checkpoint")?;
    let (model, meta) = load_checkpoint(path, Some(&vocab.content_hash()))
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((model, meta.schedule.build()?, NoiseKind::from_name(&meta.noise, vocab)?))
}

fn decoder<'a>(
    cfg: &RunConfig,
    model: &'a DenoiserModel,
    schedule: &'a NoiseSchedule,
    noise: &'a NoiseKind,
    vocab: &'a Vocabulary,
    bpe: &'a BpeModel,
) -> Decoder<'a> {
    Decoder {
        model,
        schedule,
        noise,
        vocab,
        bpe,
        source_lang: cfg.data.source_lang.clone(),
        target_lang: cfg.data.target_lang.clone(),
    }
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Source-side line file.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    /// Target-side line file, aligned with `--source`.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// `source<TAB>target` file instead of two line files.
    #[arg(long, conflicts_with_all = ["source", "synth"])]
    tsv: Option<PathBuf>,
    /// Synthesize a toy corpus: `copy` or `mapping` (digits to number words).
    #[arg(long, conflicts_with = "source")]
    synth: Option<String>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Symbols in the copy-task alphabet.
    #[arg(long)]
    alphabet: Option<usize>,
    /// Synthetic pairs written to the test split.
    #[arg(long)]
    held_out: Option<usize>,
    /// Split name for file input.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    source_lang: Option<String>,
    #[arg(long)]
    target_lang: Option<String>,
    /// Output directory; splits are written as `{split}.{lang}`.
    #[arg(long)]
    out: PathBuf,
}

fn relabel(mut corpus: ParallelCorpus, cfg: &RunConfig) -> ParallelCorpus {
    for p in &mut corpus.pairs {
        p.source_lang.clone_from(&cfg.data.source_lang);
        p.target_lang.clone_from(&cfg.data.target_lang);
    }
    corpus
}

pub fn prepare(common: &Common, a: PrepareArgs) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "prepare.synth", a.synth.clone());
    push(&mut o, "prepare.source", a.source.as_deref().map(path_value));
    push(&mut o, "prepare.target", a.target.as_deref().map(path_value));
    push(&mut o, "prepare.tsv", a.tsv.as_deref().map(path_value));
    push(&mut o, "prepare.n_pairs", a.n_pairs.map(to_i64));
    push(&mut o, "prepare.min_len", a.min_len.map(to_i64));
    push(&mut o, "prepare.max_len", a.max_len.map(to_i64));
    push(&mut o, "prepare.alphabet", a.alphabet.map(to_i64));
    push(&mut o, "prepare.held_out", a.held_out.map(to_i64));
    push(&mut o, "data.source_lang", a.source_lang.clone());
    push(&mut o, "data.target_lang", a.target_lang.clone());
    let cfg = resolved(common, o, false)?;
    let p = &cfg.prepare;
    let (sl, tl) = (cfg.data.source_lang.as_str(), cfg.data.target_lang.as_str());
    let split: Split = a.split.parse()?;
    let corpora: Vec<ParallelCorpus> = if let Some(kind) = &p.synth {
        let seed = |k: u64| derive_seed(cfg.seed, CORPUS_STREAM + k, 0);
        let make = |n: usize, s: u64| -> Result<ParallelCorpus> {
            Ok(match kind.as_str() {
                "copy" => synth_copy_corpus(n, p.min_len, p.max_len, p.alphabet, s)?,
                "mapping" => synth_mapping_corpus(n, &MappingTable::digits_to_words(), p.min_len, p.max_len, s)?,
                other => bail!("unknown synthetic corpus {other:?}; expected copy or mapping"),
            })
        };
        let mut out = vec![relabel(make(p.n_pairs, seed(0))?, &cfg)];
        if p.held_out > 0 {
            let mut test = relabel(make(p.held_out, seed(1))?, &cfg);
            test.split = Split::Test;
            out.push(test);
        }
        out
    } else if let Some(tsv) = &p.tsv {
        require(tsv, "corpus file")?;
        vec![load_tsv(tsv, sl, tl, split)?]
    } else {
        let (Some(src), Some(tgt)) = (&p.source, &p.target) else {
            bail!("prepare needs --source and --target, --tsv, or --synth");
        };
        require(src, "corpus file")?;
        require(tgt, "corpus file")?;
        vec![load_parallel(src, tgt, sl, tl, split)?]
    };
    create_dir(&a.out)?;
    for c in &corpora {
        ensure!(!c.is_empty(), "the {} split has no usable pairs", c.split);
        c.save(&a.out.join(c.split.to_string()))?;
        let s = c.stats();
        println!(
            "{}={} dropped={} src_tokens={} tgt_tokens={}",
            s.split, s.n_pairs, s.n_dropped, s.src_tokens, s.tgt_tokens
        );
    }
    cfg.write_snapshot(&a.out.join(SNAPSHOT_NAME))
}

#[derive(Args)]
pub struct BpeTrainArgs {
    /// Corpus prefix (`{prefix}.{lang}` files). Repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Corpus prefix read with source and target swapped. Repeatable.
    #[arg(long)]
    reversed_data: Vec<PathBuf>,
    #[arg(long)]
    merges: Option<usize>,
    /// Output directory for `merges.txt` and `vocab.txt`.
    #[arg(long)]
    out: PathBuf,
}

pub fn bpe_train(common: &Common, a: BpeTrainArgs) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "data.train", paths_value(&a.data));
    push(&mut o, "data.train_reversed", paths_value(&a.reversed_data));
    push(&mut o, "data.bpe_merges", a.merges.map(to_i64));
    let cfg = resolved(common, o, false)?;
    let corpora = training_corpora(&cfg)?;
    let refs: Vec<&ParallelCorpus> = corpora.iter().collect();
    let bpe = fit_bpe(&refs, cfg.data.bpe_merges)?;
    let vocab = vocab_build(&bpe, &refs, &[&cfg.data.source_lang, &cfg.data.target_lang])?;
    create_dir(&a.out)?;
    bpe.save(&a.out.join(MERGES_FILE))?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT_NAME))?;
    println!("merges={} vocab={}", bpe.merges().len(), vocab.len());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus prefix. Repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Corpus prefix read with source and target swapped. Repeatable.
    #[arg(long)]
    reversed_data: Vec<PathBuf>,
    /// Directory from `bpe-train`.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Start from this checkpoint.
    #[arg(long, conflicts_with = "from_scratch")]
    init_checkpoint: Option<PathBuf>,
    /// Fine-tune a freshly initialized model.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Print progress every this many steps; 0 disables it.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Output directory for checkpoints, `trace.csv` and the config snapshot.
    #[arg(long)]
    out: PathBuf,
}

pub fn train(common: &Common, a: TrainArgs, finetune: bool) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "data.train", paths_value(&a.data));
    push(&mut o, "data.train_reversed", paths_value(&a.reversed_data));
    push(&mut o, "data.tokenizer", a.tokenizer.as_deref().map(path_value));
    push(&mut o, "data.init_checkpoint", a.init_checkpoint.as_deref().map(path_value));
    push(&mut o, "data.from_scratch", a.from_scratch.then_some(true));
    push(&mut o, "train.n_steps", a.steps.map(|s| i64::try_from(s).unwrap_or(i64::MAX)));
    push(&mut o, "train.lr", a.lr);
    let cfg = resolved(common, o, !finetune)?;
    let init = cfg.data.init_checkpoint.as_deref();
    if finetune {
        match (init, cfg.data.from_scratch) {
            (None, false) => bail!("finetune needs --init-checkpoint, or --from-scratch to train a fresh model"),
            (Some(_), true) => bail!("--init-checkpoint and --from-scratch are exclusive"),
            _ => {}
        }
    }
    if let Some(p) = init {
        require(p, "checkpoint")?;
    }
    let (bpe, vocab) = load_tokenizer(tokenizer_dir(&cfg)?)?;
    let mut pairs: Vec<EncodedPair> = Vec::new();
    for c in training_corpora(&cfg)? {
        let enc = EncodedCorpus::encode(&c, &vocab, &bpe, cfg.train.max_len)?;
        if enc.n_truncated > 0 || enc.n_skipped > 0 {
            eprintln!("note: {} pairs truncated, {} skipped", enc.n_truncated, enc.n_skipped);
        }
        pairs.extend(enc.pairs);
    }
    let model = match init {
        Some(p) => {
            load_checkpoint(p, Some(&vocab.content_hash()))
                .with_context(|| format!("loading checkpoint {}", p.display()))?
                .0
        }
        None => {
            let mc = cfg.model.build(vocab.len(), vocab.languages().len(), &cfg.train);
            build_model(&mc, derive_seed(cfg.seed, INIT_STREAM, 0))?
        }
    };
    create_dir(&a.out)?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT_NAME))?;
    let task = if finetune { Task::Finetune } else { Task::Tdlm };
    let mut trainer = Trainer::new(model, pairs, task, cfg.train.clone(), &vocab)?.with_checkpoint_dir(&a.out);
    let log_every = a.log_every;
    let outcome = trainer.run_with(cfg.train.n_steps, |_, r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {} token_loss {:.4} length_loss {:.4} lr {:.3e}",
                r.step, r.token_loss, r.length_loss, r.lr
            );
        }
        Ok(true)
    });
    trainer.write_trace(&a.out.join("trace.csv"))?;
    if let Err(e) = outcome {
        let kept = trainer
            .last_checkpoint()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string());
        return Err(anyhow::Error::new(e).context(format!("training stopped; last checkpoint: {kept}")));
    }
    let last = trainer.trace().last();
    println!(
        "steps={} token_loss={:.6} checkpoint={}",
        trainer.steps_done(),
        last.map_or(f64::NAN, |r| r.token_loss),
        a.out.join("final.safetensors").display()
    );
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Source lines; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Hypotheses, one per line; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    length_beam: Option<usize>,
    /// `topk` or `stochastic`.
    #[arg(long)]
    routing: Option<String>,
    /// Write every intermediate state to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn generate(common: &Common, a: GenerateArgs) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "data.checkpoint", a.checkpoint.as_deref().map(path_value));
    push(&mut o, "data.tokenizer", a.tokenizer.as_deref().map(path_value));
    push(&mut o, "decode.n_iterations", a.iterations.map(to_i64));
    push(&mut o, "decode.length_beam", a.length_beam.map(to_i64));
    push(&mut o, "decode.routing", a.routing.clone());
    let cfg = resolved(common, o, false)?;
    let (bpe, vocab) = load_tokenizer(tokenizer_dir(&cfg)?)?;
    let (model, schedule, noise) = load_for_decoding(&cfg, &vocab)?;
    let lines: Vec<String> = match &a.input {
        Some(p) => {
            require(p, "input")?;
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .map(str::to_string)
                .collect()
        }
        None => std::io::stdin().lock().lines().collect::<std::io::Result<_>>()?,
    };
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        bail!("input line {} is empty", i + 1);
    }
    let dc = cfg.decode_config(a.trace.is_some());
    let out = decoder(&cfg, &model, &schedule, &noise, &vocab, &bpe).generate_all(&lines, &dc)?;
    let mut text = String::new();
    for t in &out {
        text.push_str(&t.hypothesis);
        text.push('\n');
    }
    match &a.output {
        Some(p) => {
            write_file(p, &text)?;
            let mut snap = p.as_os_str().to_owned();
            snap.push(".");
            snap.push(SNAPSHOT_NAME);
            cfg.write_snapshot(Path::new(&snap))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = &a.trace {
        let mut steps = step_grid(schedule.steps(), dc.n_iterations)?;
        steps.push(0);
        let mut s = String::new();
        for (i, t) in out.iter().enumerate() {
            s.push_str(&format!("# {} {}\n", i + 1, t.source));
            for (state, step) in t.trace.iter().flatten().zip(&steps) {
                s.push_str(&format!("t={step}\t{}\n", vocab.render(state)));
            }
        }
        write_file(p, &s)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Needed for BPE-level scores.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// `word`, `bpe` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
}

pub fn evaluate(common: &Common, a: EvaluateArgs) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "data.tokenizer", a.tokenizer.as_deref().map(path_value));
    let cfg = resolved(common, o, false)?;
    let mode: EvalMode = a.mode.parse()?;
    require(&a.hyp, "hypothesis file")?;
    require(&a.reference, "reference file")?;
    let bpe = match mode {
        EvalMode::Word => BpeModel::from_merges(Vec::new())?,
        EvalMode::Bpe | EvalMode::Both => load_tokenizer(tokenizer_dir(&cfg)?)?.0,
    };
    println!("{}", score_files(&a.hyp, &a.reference, &bpe, mode)?.summary_line());
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Test corpus prefix.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated iteration counts; defaults to 1,2,5,10,T.
    #[arg(long, value_delimiter = ',')]
    iterations: Vec<usize>,
    /// `word`, `bpe` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
    /// Output directory for `sweep.csv`, `schedule.csv` and the config snapshot.
    #[arg(long)]
    out: PathBuf,
}

pub fn sweep(common: &Common, a: SweepArgs) -> Result<()> {
    let mut o = Overrides::new();
    push(&mut o, "data.checkpoint", a.checkpoint.as_deref().map(path_value));
    push(&mut o, "data.tokenizer", a.tokenizer.as_deref().map(path_value));
    push(&mut o, "data.test", a.test.as_deref().map(path_value));
    let cfg = resolved(common, o, false)?;
    let mode: EvalMode = a.mode.parse()?;
    let test_prefix = cfg.data.test.as_deref().context("no test corpus; pass --test")?;
    check_corpus(&cfg, test_prefix, false)?;
    let (bpe, vocab) = load_tokenizer(tokenizer_dir(&cfg)?)?;
    let (model, schedule, noise) = load_for_decoding(&cfg, &vocab)?;
    let test = load_corpus(&cfg, test_prefix, false, Split::Test)?;
    let steps = schedule.steps();
    let mut counts = if a.iterations.is_empty() {
        [1, 2, 5, 10, steps].into_iter().filter(|&n| n <= steps).collect()
    } else {
        a.iterations.clone()
    };
    counts.dedup();
    let reports = decoder(&cfg, &model, &schedule, &noise, &vocab, &bpe).sweep_iterations(
        &test,
        &counts,
        &cfg.decode_config(false),
        mode,
    )?;
    create_dir(&a.out)?;
    let csv = sweep_csv(&reports);
    write_file(&a.out.join("sweep.csv"), &csv)?;
    write_file(&a.out.join("schedule.csv"), &schedule_table_csv(&schedule, &noise))?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT_NAME))?;
    print!("{csv}");
    Ok(())
}

#[derive(Args)]
pub struct OracleArgs {
    /// Largest number of distinct tokens, the mask included.
    #[arg(long, default_value_t = 5)]
    max_vocab: usize,
    #[arg(long, default_value_t = 3)]
    max_len: usize,
    #[arg(long, default_value_t = 4)]
    max_steps: usize,
    /// Largest accepted total-variation distance.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

pub fn oracle_check(a: OracleArgs) -> Result<()> {
    let bounds = OracleBounds {
        max_vocab: a.max_vocab,
        max_len: a.max_len,
        max_steps: a.max_steps,
    };
    let r = run_oracle_suite(bounds, a.tolerance)?;
    println!(
        "posterior_instances={} marginal_instances={} max_tv={:.3e} violations={}",
        r.n_posterior,
        r.n_marginal,
        r.max_tv,
        r.violations.len()
    );
    for v in r.violations.iter().take(20) {
        println!("violation: {v}");
    }
    ensure!(r.passed(), "{} oracle violations", r.violations.len());
    Ok(())
}
