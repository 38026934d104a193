//! Experiment configuration and the report-producing drivers behind the
//! command-line tool.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment.
//! Every key has a default (see [`ExperimentConfig::default`]) and unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::alibi::modified_alibi;
use crate::data::{gen_synthetic, read_corpus, CorpusSizes, PromptTemplate, SentencePair, SyntheticTask};
use crate::engine::{simul_generate, Decoder, GenerateOptions, Generation, GenerationMode};
use crate::error::{Error, Result};
use crate::mask::simul_mask;
use crate::metrics::{fit_exponent, flops_generate, laal, metrics_csv, quality_proxy, FlopModel, MetricsRow};
use crate::model::{
    fine_tune, init_model, load_checkpoint, loss_curve_csv, save_checkpoint, BiasMode, CacheBias, FineTuneReport,
    MaskMode, ModelConfig, ModelParams, Optimizer, TrainConfig,
};
use crate::par;
use crate::policy::{DecisionPolicy, PromptLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Seeds the model, the shuffle and the synthetic corpora.
    pub seed: u64,
    pub train_k: usize,
    pub eval_k: Vec<usize>,
    pub mask: MaskMode,
    pub bias: BiasMode,
    pub modes: Vec<GenerationMode>,
    pub task: SyntheticTask,
    pub sizes: CorpusSizes,
    /// Training corpus file; synthetic data when absent.
    pub data: Option<PathBuf>,
    /// Evaluation corpus file; a fresh synthetic corpus when absent.
    pub eval_data: Option<PathBuf>,
    pub eval_sentences: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: String,
    /// `0` disables clipping.
    pub clip_norm: f64,
    /// Load these parameters instead of training.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            train_k: 5,
            eval_k: vec![1, 3, 5],
            mask: MaskMode::SimulMask,
            bias: BiasMode::Modified,
            modes: vec![GenerationMode::Cached],
            task: SyntheticTask::Copy,
            sizes: CorpusSizes {
                sentences: 200,
                min_len: 8,
                max_len: 16,
            },
            data: None,
            eval_data: None,
            eval_sentences: 50,
            epochs: 1,
            learning_rate: 0.05,
            batch_size: 16,
            optimizer: "sgd".into(),
            clip_norm: 1.0,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

pub fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    match s {
        "causal" => Ok(MaskMode::Causal),
        "simulmask" => Ok(MaskMode::SimulMask),
        _ => Err(Error::Config(format!("unknown mask mode {s:?}"))),
    }
}

pub fn parse_bias_mode(s: &str) -> Result<BiasMode> {
    match s {
        "standard" => Ok(BiasMode::Standard),
        "modified" => Ok(BiasMode::Modified),
        _ => Err(Error::Config(format!("unknown bias mode {s:?}"))),
    }
}

pub fn mask_mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Causal => "causal",
        MaskMode::SimulMask => "simulmask",
    }
}

pub fn bias_mode_name(b: BiasMode) -> &'static str {
    match b {
        BiasMode::Standard => "standard",
        BiasMode::Modified => "modified",
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 25] = [
        "seed",
        "n_layers",
        "n_heads",
        "d_model",
        "vocab_size",
        "max_seq_len",
        "train_k",
        "eval_k",
        "mask",
        "bias",
        "mode",
        "task",
        "sentences",
        "min_len",
        "max_len",
        "data",
        "eval_data",
        "eval_sentences",
        "epochs",
        "learning_rate",
        "batch_size",
        "optimizer",
        "clip_norm",
        "checkpoint",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.model.seed = self.seed;
            }
            "n_layers" => self.model.n_layers = parse_num(key, v)?,
            "n_heads" => self.model.n_heads = parse_num(key, v)?,
            "d_model" => self.model.d_model = parse_num(key, v)?,
            "vocab_size" => self.model.vocab_size = parse_num(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse_num(key, v)?,
            "train_k" => self.train_k = parse_num(key, v)?,
            "eval_k" => self.eval_k = parse_list(key, v)?,
            "mask" => self.mask = parse_mask_mode(v)?,
            "bias" => self.bias = parse_bias_mode(v)?,
            "mode" => self.modes = parse_list(key, v)?,
            "task" => self.task = v.parse()?,
            "sentences" => self.sizes.sentences = parse_num(key, v)?,
            "min_len" => self.sizes.min_len = parse_num(key, v)?,
            "max_len" => self.sizes.max_len = parse_num(key, v)?,
            "data" => self.data = opt_path(v),
            "eval_data" => self.eval_data = opt_path(v),
            "eval_sentences" => self.eval_sentences = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "optimizer" => self.optimizer = v.to_string(),
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "checkpoint" => self.checkpoint = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let m = &self.model;
        let pairs = [
            ("seed", self.seed.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_model", m.d_model.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("train_k", self.train_k.to_string()),
            ("eval_k", join(&self.eval_k)),
            ("mask", mask_mode_name(self.mask).into()),
            ("bias", bias_mode_name(self.bias).into()),
            ("mode", join(&self.modes)),
            ("task", self.task.to_string()),
            ("sentences", self.sizes.sentences.to_string()),
            ("min_len", self.sizes.min_len.to_string()),
            ("max_len", self.sizes.max_len.to_string()),
            ("data", path(&self.data)),
            ("eval_data", path(&self.eval_data)),
            ("eval_sentences", self.eval_sentences.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.clone()),
            ("clip_norm", self.clip_norm.to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("out", self.out.display().to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_k == 0 {
            return Err(Error::Config("train_k must be >= 1".into()));
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(Error::Config("eval_k values must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one generation mode is required".into()));
        }
        if self.eval_sentences == 0 {
            return Err(Error::Config("eval_sentences must be >= 1".into()));
        }
        self.optimizer_kind()?;
        for p in [&self.data, &self.eval_data, &self.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Data(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> Result<Optimizer> {
        match self.optimizer.as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            o => Err(Error::Config(format!("unknown optimizer {o:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            template: PromptTemplate::default(),
            train_k: self.train_k,
            mask_mode: self.mask,
            bias_mode: self.bias,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            optimizer: self.optimizer_kind()?,
            shuffle_seed: self.seed,
        })
    }

    pub fn training_corpus(&self) -> Result<Vec<SentencePair>> {
        match &self.data {
            Some(p) => read_corpus(p, self.model.vocab_size),
            None => gen_synthetic(self.task, self.sizes, self.model.vocab_size, self.seed),
        }
    }

    pub fn eval_corpus(&self) -> Result<Vec<SentencePair>> {
        match &self.eval_data {
            Some(p) => read_corpus(p, self.model.vocab_size),
            None => gen_synthetic(
                self.task,
                CorpusSizes {
                    sentences: self.eval_sentences,
                    ..self.sizes
                },
                self.model.vocab_size,
                self.seed.wrapping_add(1),
            ),
        }
    }
}

/// Files written into an output directory; removed again unless the run
/// completes.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    keep: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: vec![],
            keep: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))?;
        Ok(p)
    }

    fn keep(mut self) -> Vec<PathBuf> {
        self.keep = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

/// Trains according to `cfg` (or loads its checkpoint).
pub fn train_model(cfg: &ExperimentConfig) -> Result<(ModelParams<f32>, Option<FineTuneReport>)> {
    if let Some(p) = &cfg.checkpoint {
        let params: ModelParams<f32> = load_checkpoint(p)?;
        if params.config().vocab_size != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "checkpoint vocabulary {} differs from configured {}",
                params.config().vocab_size,
                cfg.model.vocab_size
            )));
        }
        return Ok((params, None));
    }
    let params = init_model::<f32>(&ModelConfig {
        seed: cfg.seed,
        ..cfg.model
    })?;
    if cfg.epochs == 0 {
        return Ok((params, None));
    }
    let corpus = cfg.training_corpus()?;
    info!("fine-tuning on {} sentences for {} epochs", corpus.len(), cfg.epochs);
    let (params, report) = fine_tune(params, &corpus, &cfg.train_config()?)?;
    Ok((params, Some(report)))
}

/// Greedy simultaneous decoding of every sentence, each bounded by its
/// reference length.
pub fn decode_corpus(
    params: &ModelParams<f32>,
    corpus: &[SentencePair],
    k: usize,
    mode: GenerationMode,
    cache_bias: CacheBias,
) -> Result<Vec<Generation<f32>>> {
    let template = PromptTemplate::default();
    par::map(corpus, |pair| {
        let policy = DecisionPolicy::wait_k(k, pair.source.len())?;
        simul_generate(
            params,
            &policy,
            &template.pre,
            &pair.source,
            &template.mid,
            &GenerateOptions {
                mode,
                max_target_len: pair.target.len(),
                decoder: Decoder::Greedy,
                cache_bias,
            },
        )
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub eval_k: usize,
    pub mode: GenerationMode,
    pub token_acc: f64,
    pub exact_match: f64,
    pub laal: f64,
    pub flops_initial: f64,
    pub flops_recompute: f64,
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:>6} {:>9} {:>9} {:>9} {:>7} {:>14} {:>14}\n",
        "eval_k", "mode", "token_acc", "exact", "laal", "flops_initial", "flops_recomp"
    );
    for r in rows {
        writeln!(
            s,
            "{:>6} {:>9} {:>9.4} {:>9.4} {:>7.3} {:>14.0} {:>14.0}",
            r.eval_k, r.mode.to_string(), r.token_acc, r.exact_match, r.laal, r.flops_initial, r.flops_recompute
        )
        .unwrap();
    }
    s
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("eval_k,mode,token_acc,exact_match,laal,flops_initial,flops_recompute\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.eval_k, r.mode, r.token_acc, r.exact_match, r.laal, r.flops_initial, r.flops_recompute
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

fn evaluate_into(
    out: &mut Outputs,
    params: &ModelParams<f32>,
    cfg: &ExperimentConfig,
) -> Result<Vec<SummaryRow>> {
    let corpus = cfg.eval_corpus()?;
    let references: Vec<_> = corpus.iter().map(|p| p.target.clone()).collect();
    let flop_model = FlopModel::new(*params.config());
    let mut summary = vec![];
    for &mode in &cfg.modes {
        let mut rows = vec![];
        for &k in &cfg.eval_k {
            info!("decoding {} sentences at wait-{k} ({mode})", corpus.len());
            let gens = decode_corpus(params, &corpus, k, mode, CacheBias::CanonicalRank)?;
            let mut traces = vec![];
            let (mut lat, mut fi, mut fr) = (0.0, 0.0, 0.0);
            for (i, (g, r)) in gens.iter().zip(&references).enumerate() {
                let q = quality_proxy(std::slice::from_ref(&g.tokens), std::slice::from_ref(r))?;
                let l = laal(&g.trace, r.len())?;
                let f = flops_generate(&g.trace, &flop_model, mode)?;
                lat += l;
                fi += f.initial as f64;
                fr += f.recompute as f64;
                rows.push(MetricsRow {
                    sentence_id: i,
                    k_or_chunk: k.to_string(),
                    laal: l,
                    flops_initial: f.initial,
                    flops_recompute: f.recompute,
                    token_acc: q.token_accuracy,
                    exact_match: q.exact_match,
                });
                g.trace.write_jsonl(&mut traces)?;
            }
            out.write(&format!("traces_k{k}_{mode}.jsonl"), traces)?;
            let hyps: Vec<_> = gens.into_iter().map(|g| g.tokens).collect();
            let q = quality_proxy(&hyps, &references)?;
            let n = corpus.len() as f64;
            summary.push(SummaryRow {
                eval_k: k,
                mode,
                token_acc: q.token_accuracy,
                exact_match: q.exact_match,
                laal: lat / n,
                flops_initial: fi / n,
                flops_recompute: fr / n,
            });
        }
        out.write(&format!("metrics_{mode}.csv"), metrics_csv(&rows))?;
    }
    // Illustrations for the first evaluation sentence.
    let first = &corpus[0];
    let layout = PromptTemplate::default().layout(first)?;
    for &k in &cfg.eval_k {
        let policy = DecisionPolicy::wait_k(k, first.source.len())?;
        let p = out.path(&format!("mask_k{k}.txt"));
        mask_dump(&layout, &policy, &p)?;
        let p = out.path(&format!("bias_k{k}.csv"));
        bias_dump(&layout, &policy, params.slopes().as_slice()[0], &p)?;
    }
    Ok(summary)
}

/// Trains (or loads), evaluates every requested `(eval_k, mode)` pair and
/// writes the report files into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("config.txt", cfg.to_kv())?;
    let (params, report) = train_model(cfg)?;
    if let Some(r) = &report {
        out.write("loss.csv", loss_curve_csv(&r.loss_curve))?;
    }
    let ckpt = out.path("model.ckpt");
    save_checkpoint(&ckpt, &params)?;
    let summary = evaluate_into(&mut out, &params, cfg)?;
    out.write("summary.csv", summary_csv(&summary))?;
    out.write("summary.txt", summary_table(&summary))?;
    Ok(ExperimentReport {
        summary,
        files: out.keep(),
    })
}

/// Training only: checkpoint and loss curve.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("config.txt", cfg.to_kv())?;
    let (params, report) = train_model(cfg)?;
    if let Some(r) = &report {
        out.write("loss.csv", loss_curve_csv(&r.loss_curve))?;
    }
    let ckpt = out.path("model.ckpt");
    save_checkpoint(&ckpt, &params)?;
    Ok(out.keep())
}

/// Evaluation of `cfg.checkpoint` (or an untrained model) without training.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let params = match &cfg.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => init_model::<f32>(&cfg.model)?,
    };
    let mut out = Outputs::new(&cfg.out)?;
    let summary = evaluate_into(&mut out, &params, cfg)?;
    out.write("summary.csv", summary_csv(&summary))?;
    out.write("summary.txt", summary_table(&summary))?;
    Ok(ExperimentReport {
        summary,
        files: out.keep(),
    })
}

pub fn mask_dump(layout: &PromptLayout, policy: &DecisionPolicy, out: &Path) -> Result<()> {
    let mask = simul_mask(layout, policy)?;
    std::fs::write(out, mask.to_ascii(&policy.to_string())).map_err(|e| Error::io(out.display().to_string(), e))
}

pub fn bias_dump(layout: &PromptLayout, policy: &DecisionPolicy, slope: f64, out: &Path) -> Result<()> {
    let mask = simul_mask(layout, policy)?;
    let bias = modified_alibi(&mask, slope)?;
    std::fs::write(out, bias.to_csv()).map_err(|e| Error::io(out.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    /// Fitted power of sequence length for the initial share.
    pub initial_exponent: f64,
    /// Same for the recompute share, over sentences that recompute anything.
    pub recompute_exponent: f64,
    pub cached_below_recompute: bool,
    pub prefix_steps: usize,
    pub simulmask_steps: usize,
}

/// Analytic cost of every evaluation sentence at `cfg.train_k`, in both
/// modes, plus training-step counts of prefix expansion versus SimulMask.
pub fn flops_report(cfg: &ExperimentConfig) -> Result<(FlopsReport, Vec<PathBuf>)> {
    cfg.validate()?;
    let corpus = cfg.eval_corpus()?;
    let params = init_model::<f32>(&cfg.model)?;
    let fm = FlopModel::new(cfg.model);
    let template = PromptTemplate::default();
    let traces = par::map(&corpus, |pair| -> Result<_> {
        let policy = DecisionPolicy::wait_k(cfg.train_k, pair.source.len())?;
        let g = simul_generate(
            &params,
            &policy,
            &template.pre,
            &pair.source,
            &template.mid,
            &GenerateOptions {
                decoder: Decoder::Forced(&pair.target),
                ..Default::default()
            },
        )?;
        Ok(g.trace)
    });
    let mut csv = String::from("sentence_id,seq_len,initial,recompute,cached_total,recompute_total\n");
    let (mut xs, mut init, mut rx, mut rec) = (vec![], vec![], vec![], vec![]);
    let mut ordered = true;
    for (i, (t, pair)) in traces.into_iter().zip(&corpus).enumerate() {
        let t = t?;
        let c = flops_generate(&t, &fm, GenerationMode::Cached)?;
        let r = flops_generate(&t, &fm, GenerationMode::Recompute)?;
        let len = template.sequence(pair).len() as f64;
        writeln!(csv, "{i},{len},{},{},{},{}", r.initial, r.recompute, c.total, r.total).unwrap();
        xs.push(len);
        init.push(r.initial as f64);
        if r.recompute > 0 {
            rx.push(len);
            rec.push(r.recompute as f64);
        }
        if t.d.len() >= 2 && c.total >= r.total {
            ordered = false;
        }
    }
    let prefix_steps = corpus
        .iter()
        .map(|p| (p.source.len() + 1).saturating_sub(cfg.train_k).max(p.target.len()))
        .sum();
    let report = FlopsReport {
        initial_exponent: fit_exponent(&xs, &init)?,
        recompute_exponent: fit_exponent(&rx, &rec)?,
        cached_below_recompute: ordered,
        prefix_steps,
        simulmask_steps: corpus.len(),
    };
    let mut out = Outputs::new(&cfg.out)?;
    out.write("flops.csv", csv)?;
    out.write("flops_summary.json", serde_json::to_string_pretty(&report)?)?;
    Ok((report, out.keep()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub eval_k: usize,
    pub variant: String,
    pub token_acc: f64,
    /// Largest logit gap to recompute-mode decoding of the same model.
    pub max_logit_diff: f64,
    pub flops_total: f64,
}

fn max_logit_diff(a: &[Generation<f32>], b: &[Generation<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.logits.iter().zip(&y.logits))
        .flat_map(|(r, s)| r.iter().zip(s))
        .map(|(u, v)| f64::from((u - v).abs()))
        .fold(0.0, f64::max)
}

/// Cached versus recompute decoding, the stale-position cache, and the mask
/// and bias ablations, one trained model per ablation.
pub fn compare(cfg: &ExperimentConfig) -> Result<(Vec<CompareRow>, Vec<PathBuf>)> {
    cfg.validate()?;
    let corpus = cfg.eval_corpus()?;
    let references: Vec<_> = corpus.iter().map(|p| p.target.clone()).collect();
    let fm = FlopModel::new(cfg.model);
    let ablations = [
        (MaskMode::SimulMask, BiasMode::Modified),
        (MaskMode::SimulMask, BiasMode::Standard),
        (MaskMode::Causal, BiasMode::Standard),
    ];
    let mut rows = vec![];
    for (mask, bias) in ablations {
        let variant_cfg = ExperimentConfig {
            mask,
            bias,
            ..cfg.clone()
        };
        let (params, _) = train_model(&variant_cfg)?;
        let name = format!("{}-{}", mask_mode_name(mask), bias_mode_name(bias));
        for &k in &cfg.eval_k {
            let rec = decode_corpus(&params, &corpus, k, GenerationMode::Recompute, CacheBias::CanonicalRank)?;
            let cached = decode_corpus(&params, &corpus, k, GenerationMode::Cached, CacheBias::CanonicalRank)?;
            let stale = decode_corpus(&params, &corpus, k, GenerationMode::Cached, CacheBias::StaleAbsolute)?;
            for (suffix, gens, mode) in [
                ("recompute", &rec, GenerationMode::Recompute),
                ("cached", &cached, GenerationMode::Cached),
                ("cached-stale", &stale, GenerationMode::Cached),
            ] {
                let hyps: Vec<_> = gens.iter().map(|g| g.tokens.clone()).collect();
                let q = quality_proxy(&hyps, &references)?;
                let flops = gens
                    .iter()
                    .map(|g| flops_generate(&g.trace, &fm, mode).map(|f| f.total as f64))
                    .sum::<Result<f64>>()?;
                rows.push(CompareRow {
                    eval_k: k,
                    variant: format!("{name}/{suffix}"),
                    token_acc: q.token_accuracy,
                    max_logit_diff: max_logit_diff(gens, &rec),
                    flops_total: flops / corpus.len() as f64,
                });
            }
        }
    }
    let mut csv = String::from("eval_k,variant,token_acc,max_logit_diff,flops_total\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.eval_k, r.variant, r.token_acc, r.max_logit_diff, r.flops_total).unwrap();
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write("compare.csv", csv)?;
    Ok((rows, out.keep()))
}
