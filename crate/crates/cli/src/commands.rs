use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use jtw::checkpoint::{self, CheckpointError, CheckpointMeta};
use jtw::corpus::{build_instances, default_stopwords, parse_stopwords, tokenize, Stopwords, Vocabulary};
use jtw::densemode::{dense_aggregate, DenseCorpus, DenseObjective, DenseVectors};
use jtw::eval::{eval_lexsub, eval_word_similarity, npmi_coherence, parse_lexsub, LexsubMode, SimBenchmark, COHERENCE_WINDOW};
use jtw::inference::{aggregate_corpus, distributions_csv, sentence_topic_distribution, topic_top_words, topics_tsv, OccurrenceAggregate};
use jtw::model::{InputMode, JtwModel, ModelConfig};
use jtw::trainer::{train_with_hook, EpochStats, Objective, TrainConfig, TrainError, TrainReport};
use jtw::word2vec::WordVectors;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{pick, FileConfig, Mode};

pub const DEFAULT_VOCAB_SIZE: usize = 8000;
pub const DEFAULT_WINDOW: usize = 10;

/// Global settings shared by every subcommand.
pub struct Globals {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub file: FileConfig,
}

impl Globals {
    fn seed(&self) -> u64 {
        pick(self.seed, self.file.seed, 0)
    }

    fn mode(&self) -> Option<Mode> {
        self.mode.or(self.file.mode)
    }
}

/// The checkpoint was trained against a different vocabulary file.
#[derive(Debug)]
pub struct VocabMismatch {
    pub checkpoint: String,
    pub vocab: String,
}

impl fmt::Display for VocabMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vocabulary hash {} does not match the checkpoint's {}",
            self.vocab, self.checkpoint
        )
    }
}

impl std::error::Error for VocabMismatch {}

fn echo<T: Serialize>(command: &str, resolved: &T) {
    let json = serde_json::to_string(resolved).expect("config serializes");
    eprintln!("jtw {command}: resolved config {json}");
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    // Stopwords never enter the vocabulary, so dropping them or dropping
    // out-of-vocabulary tokens gives the same id sequences.
    Vocabulary::from_tsv(&read(path)?, Stopwords::new()).with_context(|| format!("parsing vocabulary {}", path.display()))
}

/// One document per line, mapped to in-vocabulary ids.
fn load_docs(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let none = Stopwords::new();
    Ok(read(path)?.lines().map(|l| vocab.encode(&tokenize(l, &none))).collect())
}

fn load_dense(path: &Path, docs: &[Vec<usize>], vocab: &Vocabulary, window: usize) -> Result<DenseCorpus> {
    let vectors = DenseVectors::parse(&read(path)?).with_context(|| format!("parsing vectors {}", path.display()))?;
    let corpus = DenseCorpus::build(docs, vocab, &vectors, window)?;
    if corpus.missing > 0 {
        log::warn!("{} in-vocabulary tokens have no dense vector and were skipped", corpus.missing);
    }
    Ok(corpus)
}

struct Loaded {
    model: JtwModel,
    meta: CheckpointMeta,
    vocab: Vocabulary,
}

fn load_model(ckpt: &Path, vocab_path: &Path, g: &Globals) -> Result<Loaded> {
    let (model, meta) = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let vocab = load_vocab(vocab_path)?;
    let hash = vocab.content_hash();
    if hash != meta.vocab_hash {
        return Err(VocabMismatch {
            checkpoint: meta.vocab_hash,
            vocab: hash,
        }
        .into());
    }
    let stored = match model.config().input {
        InputMode::Bow => Mode::Bow,
        InputMode::Dense { .. } => Mode::Dense,
    };
    if let Some(m) = g.mode() {
        if m != stored {
            bail!("--mode {m:?} requested but the checkpoint was trained in {stored:?} mode");
        }
    }
    Ok(Loaded { model, meta, vocab })
}

fn aggregate(l: &Loaded, docs: &[Vec<usize>], dense: Option<&Path>, window: usize) -> Result<OccurrenceAggregate> {
    match (l.model.config().input, dense) {
        (InputMode::Bow, _) => Ok(aggregate_corpus(&l.model, docs, window)?),
        (InputMode::Dense { .. }, Some(path)) => {
            let corpus = load_dense(path, docs, &l.vocab, window)?;
            Ok(dense_aggregate(&l.model, &corpus))
        }
        (InputMode::Dense { .. }, None) => bail!("dense-mode checkpoint needs --dense-vectors"),
    }
}

// ------------------------------------------------------------ build-vocab

#[derive(Args, Debug, Serialize)]
pub struct BuildVocabArgs {
    /// Corpus, one document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Maximum vocabulary size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Stopword list replacing the built-in one.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn build_vocab(args: &BuildVocabArgs, g: &Globals) -> Result<()> {
    let size = pick(args.size, g.file.vocab_size, DEFAULT_VOCAB_SIZE);
    echo("build-vocab", &serde_json::json!({ "args": args, "size": size }));
    let stop = match &args.stopwords {
        Some(p) => parse_stopwords(&read(p)?),
        None => default_stopwords(),
    };
    let text = read(&args.corpus)?;
    let vocab = Vocabulary::build(text.lines().map(|l| tokenize(l, &stop)), size, &stop)?;
    write(&args.output, &vocab.to_tsv())?;
    log::info!("wrote {} types to {}", vocab.len(), args.output.display());
    Ok(())
}

// ------------------------------------------------------------ train

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub output: PathBuf,
    /// Per-epoch statistics; defaults to `<output>.report.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Pre-trained vectors for dense mode (word2vec text).
    #[arg(long)]
    pub dense_vectors: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    /// Also write the checkpoint every K epochs (0 = only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl From<Optimizer> for jtw::trainer::OptimizerKind {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam => Self::Adam,
        }
    }
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    args: &'a TrainArgs,
    seed: u64,
    mode: Mode,
    window: usize,
    checkpoint_every: usize,
    report: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub fn train(args: &TrainArgs, g: &Globals) -> Result<()> {
    let (fm, ft) = (&g.file.model, &g.file.train);
    let seed = g.seed();
    let mode = g.mode().unwrap_or(Mode::Bow);
    let window = pick(args.window, g.file.window, DEFAULT_WINDOW);
    let checkpoint_every = pick(args.checkpoint_every, ft.checkpoint_every, 0);
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        eta0: pick(args.eta0, ft.eta0, defaults.eta0),
        lr_decay: pick(args.lr_decay, ft.lr_decay, defaults.lr_decay),
        max_iter: pick(args.max_iter, ft.max_iter, defaults.max_iter),
        batch_size: pick(args.batch_size, ft.batch_size, defaults.batch_size),
        seed,
        optimizer: pick(args.optimizer.map(Into::into), ft.optimizer, defaults.optimizer),
        convergence_tol: pick(args.convergence_tol, ft.convergence_tol, defaults.convergence_tol),
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.csv", args.output.display())));

    let vocab = load_vocab(&args.vocab)?;
    let docs = load_docs(&args.corpus, &vocab)?;
    let dense = match (mode, &args.dense_vectors) {
        (Mode::Dense, Some(p)) => Some(load_dense(p, &docs, &vocab, window)?),
        (Mode::Dense, None) => bail!("--mode dense needs --dense-vectors"),
        (Mode::Bow, Some(_)) => bail!("--dense-vectors given without --mode dense"),
        (Mode::Bow, None) => None,
    };
    let base = ModelConfig::new(vocab.len());
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        latent_dim: pick(args.latent_dim, fm.latent_dim, base.latent_dim),
        topics: pick(args.topics, fm.topics, base.topics),
        hidden: pick(args.hidden, fm.hidden, base.hidden),
        samples: pick(args.samples, fm.samples, base.samples),
        input: match &dense {
            Some(c) => InputMode::Dense { dim: c.dim },
            None => InputMode::Bow,
        },
    };
    echo(
        "train",
        &ResolvedTrain {
            args,
            seed,
            mode,
            window,
            checkpoint_every,
            report: &report_path,
            model: &cfg,
            train: &tc,
        },
    );
    tc.validate()?;
    let model = JtwModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let meta = CheckpointMeta {
        seed,
        vocab_hash: vocab.content_hash(),
        train: tc.clone(),
        window,
    };
    let ckpt = Checkpointer {
        path: &args.output,
        meta: &meta,
        every: checkpoint_every,
    };

    let (model, report) = match dense {
        None => {
            let (instances, stats) = build_instances(&docs, window);
            log::info!("{} documents, {} tokens, {} instances", stats.n_documents, stats.n_tokens, stats.n_instances);
            let mut model = model;
            let report = ckpt.run(&mut model, &instances, &tc, |m: &JtwModel| m)?;
            (model, report)
        }
        Some(corpus) => {
            log::info!("{} dense instances", corpus.instances.len());
            let mut obj = DenseObjective::new(model, &corpus)?;
            let report = ckpt.run(&mut obj, &corpus.instances, &tc, |o: &DenseObjective<'_>| &o.model)?;
            (obj.model, report)
        }
    };
    checkpoint::save(&args.output, &model, &meta).with_context(|| format!("writing {}", args.output.display()))?;
    write(&report_path, &report.to_csv())?;
    log::info!(
        "trained {} epochs (converged: {}), checkpoint {}",
        report.epochs.len(),
        report.converged,
        args.output.display()
    );
    Ok(())
}

struct Checkpointer<'a> {
    path: &'a Path,
    meta: &'a CheckpointMeta,
    every: usize,
}

impl Checkpointer<'_> {
    fn run<O: Objective>(
        &self,
        obj: &mut O,
        instances: &[O::Instance],
        tc: &TrainConfig,
        model_of: impl Fn(&O) -> &JtwModel,
    ) -> Result<TrainReport> {
        let mut failure: Option<CheckpointError> = None;
        let hook = |stats: &EpochStats, o: &O| {
            if self.every == 0 || (stats.epoch + 1) % self.every != 0 {
                return Ok(());
            }
            checkpoint::save(self.path, model_of(o), self.meta).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                msg
            })
        };
        match train_with_hook(obj, instances, tc, hook) {
            Ok(r) => Ok(r),
            Err(TrainError::Hook { epoch, .. }) if failure.is_some() => {
                let err = failure.take().expect("checked");
                Err(anyhow::Error::new(err).context(format!("periodic checkpoint after epoch {epoch}")))
            }
            Err(e) => Err(e.into()),
        }
    }
}

// ------------------------------------------------------------ embed

#[derive(Args, Debug, Serialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus whose occurrences are aggregated.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Context window; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub window: Option<usize>,
    /// Pre-trained vectors, required for dense-mode checkpoints.
    #[arg(long)]
    pub dense_vectors: Option<PathBuf>,
}

impl CorpusArgs {
    fn aggregate(&self, g: &Globals, command: &str, extra: serde_json::Value) -> Result<(Loaded, OccurrenceAggregate)> {
        let l = load_model(&self.checkpoint, &self.vocab, g)?;
        let window = self.window.unwrap_or(l.meta.window);
        echo(
            command,
            &serde_json::json!({ "args": self, "window": window, "model": l.model.config(), "extra": extra }),
        );
        let docs = load_docs(&self.corpus, &l.vocab)?;
        let agg = aggregate(&l, &docs, self.dense_vectors.as_deref(), window)?;
        Ok((l, agg))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    /// word2vec text output.
    #[arg(long)]
    pub output: PathBuf,
}

fn universal_vectors(l: &Loaded, agg: &OccurrenceAggregate) -> WordVectors {
    WordVectors {
        dim: l.model.config().latent_dim,
        entries: agg
            .universal()
            .into_values()
            .map(|e| (l.vocab.token(e.word).to_string(), e.mean))
            .collect(),
    }
}

pub fn embed(args: &EmbedArgs, g: &Globals) -> Result<()> {
    let (l, agg) = args.input.aggregate(g, "embed", serde_json::json!({ "output": args.output }))?;
    let vectors = universal_vectors(&l, &agg);
    write(&args.output, &vectors.to_text())?;
    log::info!("wrote {} vectors to {}", vectors.entries.len(), args.output.display());
    Ok(())
}

// ------------------------------------------------------------ topics

#[derive(Args, Debug, Serialize)]
pub struct TopicsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Words per topic.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// TSV output: topic, rank, word, probability.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn topics(args: &TopicsArgs, g: &Globals) -> Result<()> {
    let l = load_model(&args.checkpoint, &args.vocab, g)?;
    echo("topics", &serde_json::json!({ "args": args, "model": l.model.config() }));
    let tables = topic_top_words(&l.model, args.k);
    write(&args.output, &topics_tsv(&tables, &l.vocab))
}

// ------------------------------------------------------------ word-topics

#[derive(Args, Debug, Serialize)]
pub struct WordTopicsArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    /// Restrict output to these words (comma separated); default is every
    /// word seen in the corpus.
    #[arg(long, value_delimiter = ',')]
    pub words: Vec<String>,
    /// CSV output: word followed by one column per topic.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn word_topics(args: &WordTopicsArgs, g: &Globals) -> Result<()> {
    let (l, agg) = args.input.aggregate(g, "word-topics", serde_json::json!({ "words": args.words, "output": args.output }))?;
    let ids: Vec<usize> = if args.words.is_empty() {
        agg.words().collect()
    } else {
        args.words
            .iter()
            .map(|w| l.vocab.id(&w.to_lowercase()).with_context(|| format!("`{w}` is not in the vocabulary")))
            .collect::<Result<_>>()?
    };
    let rows = ids
        .into_iter()
        .map(|id| Ok((l.vocab.token(id).to_string(), agg.topic_distribution(id)?)))
        .collect::<Result<Vec<_>>>()?;
    write(&args.output, &distributions_csv(&rows))
}

// ------------------------------------------------------------ sentence-topics

#[derive(Args, Debug, Serialize)]
pub struct SentenceTopicsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// CSV output labelled by 1-based line number.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn sentence_topics(args: &SentenceTopicsArgs, g: &Globals) -> Result<()> {
    let l = load_model(&args.checkpoint, &args.vocab, g)?;
    echo("sentence-topics", &serde_json::json!({ "args": args, "model": l.model.config() }));
    if l.model.config().input != InputMode::Bow {
        bail!("sentence-topics needs a bag-of-words checkpoint");
    }
    let mut rows = Vec::new();
    for (i, sentence) in load_docs(&args.input, &l.vocab)?.iter().enumerate() {
        if sentence.is_empty() {
            log::warn!("line {} has no in-vocabulary tokens, skipped", i + 1);
            continue;
        }
        rows.push(((i + 1).to_string(), sentence_topic_distribution(&l.model, sentence)?));
    }
    write(&args.output, &distributions_csv(&rows))
}

// ------------------------------------------------------------ eval-sim

#[derive(Args, Debug, Serialize)]
pub struct EvalSimArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    /// Word-pair benchmarks: `word1<TAB>word2<TAB>score`.
    #[arg(long, required = true, num_args = 1..)]
    pub benchmark: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn eval_sim(args: &EvalSimArgs, g: &Globals) -> Result<()> {
    let (l, agg) = args.input.aggregate(g, "eval-sim", serde_json::json!({ "benchmark": args.benchmark, "output": args.output }))?;
    let embeddings: BTreeMap<String, Vec<f64>> = universal_vectors(&l, &agg).entries.into_iter().collect();
    let mut out = String::from("benchmark,rho,covered,total,coverage\n");
    for path in &args.benchmark {
        let bench = SimBenchmark::parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        let r = eval_word_similarity(&bench, &embeddings).with_context(|| format!("scoring {}", path.display()))?;
        out.push_str(&format!("{},{},{},{},{}\n", path.display(), r.rho, r.covered, r.total, r.coverage()));
    }
    write(&args.output, &out)
}

// ------------------------------------------------------------ eval-lexsub

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LexsubMethod {
    /// Posterior means under the sentence context.
    Contextual,
    /// BalAdd over universal vectors aggregated from `--corpus`.
    Baladd,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalLexsubArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Lexical substitution files: `target<TAB>position<TAB>sentence<TAB>candidates<TAB>gold`.
    #[arg(long, required = true, num_args = 1..)]
    pub benchmark: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = LexsubMethod::Contextual)]
    pub method: LexsubMethod,
    /// Corpus for universal vectors (BalAdd only).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub dense_vectors: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn eval_lexsub_cmd(args: &EvalLexsubArgs, g: &Globals) -> Result<()> {
    let l = load_model(&args.checkpoint, &args.vocab, g)?;
    let window = args.window.unwrap_or(l.meta.window);
    echo("eval-lexsub", &serde_json::json!({ "args": args, "window": window, "model": l.model.config() }));
    let universal = match args.method {
        LexsubMethod::Contextual => {
            if l.model.config().input != InputMode::Bow {
                bail!("contextual lexical substitution needs a bag-of-words checkpoint");
            }
            None
        }
        LexsubMethod::Baladd => {
            let corpus = args.corpus.as_deref().context("--method baladd needs --corpus")?;
            let docs = load_docs(corpus, &l.vocab)?;
            Some(aggregate(&l, &docs, args.dense_vectors.as_deref(), window)?.universal())
        }
    };
    let mode = match &universal {
        Some(u) => LexsubMode::BalAdd(u),
        None => LexsubMode::Contextual,
    };
    let method = match args.method {
        LexsubMethod::Contextual => "contextual",
        LexsubMethod::Baladd => "baladd",
    };
    let mut out = String::from("benchmark,method,accuracy,hits,scored,excluded,skipped_candidates\n");
    for path in &args.benchmark {
        let instances = parse_lexsub(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        let r = eval_lexsub(&instances, &l.model, &l.vocab, mode)?;
        out.push_str(&format!(
            "{},{method},{},{},{},{},{}\n",
            path.display(),
            r.accuracy(),
            r.hits,
            r.scored,
            r.excluded,
            r.skipped_candidates
        ));
    }
    write(&args.output, &out)
}

// ------------------------------------------------------------ eval-coherence

#[derive(Args, Debug, Serialize)]
pub struct EvalCoherenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Reference corpus for co-occurrence counts, one document per line.
    #[arg(long)]
    pub reference: PathBuf,
    /// Top words per topic.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Sliding window size in tokens.
    #[arg(long, default_value_t = COHERENCE_WINDOW)]
    pub window: usize,
    /// CSV output: one row per topic, then the mean.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn eval_coherence(args: &EvalCoherenceArgs, g: &Globals) -> Result<()> {
    let l = load_model(&args.checkpoint, &args.vocab, g)?;
    echo("eval-coherence", &serde_json::json!({ "args": args, "model": l.model.config() }));
    let topics: Vec<Vec<usize>> = topic_top_words(&l.model, args.k)
        .into_iter()
        .map(|t| t.into_iter().map(|(w, _)| w).collect())
        .collect();
    let docs = load_docs(&args.reference, &l.vocab)?;
    let c = npmi_coherence(&topics, &docs, args.window)?;
    if !c.missing.is_empty() {
        log::warn!("{} top words never occur in the reference corpus", c.missing.len());
    }
    let mut out = String::from("topic,npmi\n");
    for (t, s) in c.per_topic.iter().enumerate() {
        out.push_str(&format!("{t},{s}\n"));
    }
    out.push_str(&format!("mean,{}\n", c.mean));
    write(&args.output, &out)
}
