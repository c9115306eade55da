//! End-to-end commands behind the `embsqueeze` binary.
//!
//! Every command writes its artifacts into an output directory. Files never
//! contain wall-clock measurements, so a command repeated with the same
//! config and seed rewrites byte-identical files; timings only go to the
//! returned summaries' `timing` fields, which the binary prints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{flop_report, time_inference, FlopReport, HardwareCostModel, TimingStats};
use crate::data::{load_tsv, make_synthetic, Dataset, Split, SyntheticSpec, Vocabulary};
use crate::embedding::{
    choose_rank, load_glove_text, offline_compress_rank, random_init, synthetic_pretrained, CompressionPlan,
    EmbeddingTable,
};
use crate::error::{Error, Result};
use crate::format::ModelFile;
use crate::models::{DanConfig, DanModel, EmbeddingLayer, LstmModel, Model, ModelKind, DEFAULT_LSTM_HIDDEN};
use crate::optim::{train, CalrConfig, TrainConfig};
use crate::quantize::{quantize_model, Bits, REFERENCE_BITS};

pub const MODEL_FILE: &str = "model.emsq";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPRESSED_FILE: &str = "compressed.emsq";
pub const OFFLINE_FILE: &str = "offline.emsq";
pub const ANALYSIS_FILE: &str = "analysis.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVAL_FILE: &str = "eval.json";

pub fn quantized_file_name(bits: Bits) -> String {
    format!("quantized_q{}.emsq", bits.get())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub dan_hidden: [usize; 2],
    pub lstm_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Dan,
            dan_hidden: DanConfig::default().hidden,
            lstm_hidden: DEFAULT_LSTM_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Tsv {
        train: PathBuf,
        dev: PathBuf,
        /// Falls back to `dev` when absent.
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_min_count")]
        min_count: usize,
    },
}

fn default_min_count() -> usize {
    1
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Where the initial embedding table comes from. Random draws use the
/// pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    Random {
        dim: usize,
    },
    Glove {
        path: PathBuf,
    },
    /// [`synthetic_pretrained`]; only valid with synthetic data.
    SyntheticPretrained {
        dim: usize,
        signal: f64,
        noise: f64,
    },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::SyntheticPretrained {
            dim: 64,
            signal: 0.03,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSection {
    /// Retained fraction; give at most one of `p`, `r`, `rank`.
    pub p: Option<f64>,
    /// Size reduction, `1 - p`.
    pub r: Option<f64>,
    /// Explicit rank, bypassing the rank formula.
    pub rank: Option<usize>,
    /// Defaults to `train.epochs`.
    pub retrain_epochs: Option<usize>,
    /// Reductions visited by `sweep`.
    pub r_list: Vec<f64>,
}

/// Requested compression level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Fraction(f64),
    Rank(usize),
}

impl CompressionSection {
    pub fn target(&self) -> Result<Target> {
        match (self.p, self.r, self.rank) {
            (Some(p), None, None) => Ok(Target::Fraction(p)),
            // rounded so 1 - 0.9 lands on 0.1, not just below it
            (None, Some(r), None) => Ok(Target::Fraction(((1.0 - r) * 1e12).round() / 1e12)),
            (None, None, Some(k)) => Ok(Target::Rank(k)),
            (None, None, None) => Ok(Target::Fraction(0.1)),
            _ => Err(Error::Config("give only one of compression.p, compression.r, compression.rank".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub m: usize,
    pub n: usize,
    pub p_list: Vec<f64>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            m: 10000,
            n: 300,
            p_list: vec![0.1, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives embedding init, dense init, shuffling and dropout; replaces
    /// `train.seed`.
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSource,
    pub embedding: EmbeddingSource,
    pub train: TrainConfig,
    pub calr: CalrConfig,
    pub compression: CompressionSection,
    pub quantize_bits: u32,
    /// Token cap applied to LSTM inputs.
    pub max_len: usize,
    pub hardware: HardwareCostModel,
    pub analyze: AnalyzeSection,
    /// Timed passes per inference measurement (stdout only).
    pub timing_repeats: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            data: DataSource::default(),
            embedding: EmbeddingSource::default(),
            train: TrainConfig {
                epochs: 6,
                ..TrainConfig::default()
            },
            calr: CalrConfig {
                lr_ub_init: 0.2,
                ..CalrConfig::default()
            },
            compression: CompressionSection {
                r_list: vec![0.5, 0.9],
                ..CompressionSection::default()
            },
            quantize_bits: 8,
            max_len: 400,
            hardware: HardwareCostModel::default(),
            analyze: AnalyzeSection::default(),
            timing_repeats: 3,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.compression.retrain_epochs.unwrap_or(self.train.epochs),
            ..self.train_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.calr.validate()?;
        self.hardware.validate()?;
        self.compression.target()?;
        Bits::from_u32(self.quantize_bits)?;
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if matches!(
            (&self.embedding, &self.data),
            (EmbeddingSource::SyntheticPretrained { .. }, DataSource::Tsv { .. })
        ) {
            return Err(Error::Config("synthetic_pretrained embeddings need synthetic data".into()));
        }
        Ok(())
    }
}

/// Train/dev/test splits sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub class_tokens: Option<Vec<Vec<usize>>>,
}

/// Loads the configured data. With `vocab` given (an existing model's),
/// the training split is encoded against it instead of building one.
pub fn load_corpus(cfg: &PipelineConfig, vocab: Option<&Vocabulary>) -> Result<Corpus> {
    let mut corpus = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let c = make_synthetic(spec)?;
            if let Some(v) = vocab {
                if v != &c.vocab {
                    return Err(Error::invalid("model vocabulary does not match the synthetic corpus"));
                }
            }
            Corpus {
                vocab: c.vocab,
                train: c.train,
                dev: c.dev,
                test: c.test,
                class_tokens: Some(c.class_tokens),
            }
        }
        DataSource::Tsv {
            train,
            dev,
            test,
            min_count,
        } => {
            let (train, vocab) = load_tsv(train, vocab, Split::Train, *min_count)?;
            let (dev, _) = load_tsv(dev, Some(&vocab), Split::Dev, *min_count)?;
            let test = match test {
                Some(p) => load_tsv(p, Some(&vocab), Split::Test, *min_count)?.0,
                None => dev.clone(),
            };
            let classes = train.num_classes.max(dev.num_classes).max(test.num_classes);
            let widen = |mut d: Dataset| {
                d.num_classes = classes;
                d
            };
            Corpus {
                vocab,
                train: widen(train),
                dev: widen(dev),
                test: widen(test),
                class_tokens: None,
            }
        }
    };
    if cfg.model.kind == ModelKind::Lstm {
        corpus.train = corpus.train.truncated(cfg.max_len);
        corpus.dev = corpus.dev.truncated(cfg.max_len);
        corpus.test = corpus.test.truncated(cfg.max_len);
    }
    Ok(corpus)
}

/// Initial embedding table and, for GloVe, the found fraction.
pub fn initial_embedding(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(EmbeddingTable, Option<f64>)> {
    let vocab_size = corpus.vocab.len();
    match &cfg.embedding {
        EmbeddingSource::Random { dim } => {
            if *dim == 0 {
                return Err(Error::Config("embedding dim must be positive".into()));
            }
            Ok((random_init(vocab_size, *dim, cfg.seed), None))
        }
        EmbeddingSource::Glove { path } => {
            let (t, cov) = load_glove_text(path, &corpus.vocab, cfg.seed)?;
            Ok((t, Some(cov.fraction())))
        }
        EmbeddingSource::SyntheticPretrained { dim, signal, noise } => {
            let classes = corpus
                .class_tokens
                .as_ref()
                .ok_or_else(|| Error::Config("synthetic_pretrained embeddings need synthetic data".into()))?;
            Ok((synthetic_pretrained(vocab_size, *dim, classes, *signal, *noise, cfg.seed)?, None))
        }
    }
}

/// Fresh classifier on top of `table`; dense-layer init uses the pipeline seed.
pub fn build_model(cfg: &PipelineConfig, table: EmbeddingTable, num_classes: usize) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696e_6974);
    let emb = EmbeddingLayer::Plain(table);
    Ok(match cfg.model.kind {
        ModelKind::Dan => Model::Dan(DanModel::new(
            emb,
            num_classes,
            &DanConfig {
                hidden: cfg.model.dan_hidden,
            },
            &mut rng,
        )?),
        ModelKind::Lstm => Model::Lstm(LstmModel::new(emb, num_classes, cfg.model.lstm_hidden, &mut rng)?),
    })
}

/// Accuracy rounded to four decimals for reports.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn mb(bytes: u64) -> f64 {
    (bytes as f64 / 1e6 * 100.0).round() / 100.0
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Vocabulary stored next to a model file.
pub fn vocab_path_for(model_path: &Path) -> PathBuf {
    model_path.with_file_name(VOCAB_FILE)
}

/// Loads a model file and the vocabulary next to it.
pub fn load_model_with_vocab(model_path: &Path) -> Result<(ModelFile, Vocabulary)> {
    let file = ModelFile::load(model_path)?;
    let vocab = Vocabulary::load(&vocab_path_for(model_path))?;
    let model_vocab = file.to_model()?.embedding().vocab_size();
    if model_vocab != vocab.len() {
        return Err(Error::invalid(format!(
            "{} has {model_vocab} embedding rows but {} lists {} tokens",
            model_path.display(),
            VOCAB_FILE,
            vocab.len()
        )));
    }
    Ok((file, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileSize {
    pub bytes: u64,
    pub mb: f64,
    pub embedding_payload_bytes: u64,
}

impl FileSize {
    fn of(file: &ModelFile, bytes: u64) -> Self {
        Self {
            bytes,
            mb: mb(bytes),
            embedding_payload_bytes: file.embedding_payload_bytes() as u64,
        }
    }
}

fn save_model(model: &Model, path: &Path) -> Result<FileSize> {
    let file = ModelFile::from_model(model);
    let bytes = file.save(path)?;
    Ok(FileSize::of(&file, bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub parameters: usize,
    pub file: FileSize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glove_coverage: Option<f64>,
    #[serde(skip)]
    pub timing: Option<TimingStats>,
}

/// Trains an uncompressed model.
pub fn cmd_train(cfg: &PipelineConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_dir(out)?;
    let corpus = load_corpus(cfg, None)?;
    let (table, coverage) = initial_embedding(cfg, &corpus)?;
    let model = build_model(cfg, table, corpus.train.num_classes)?;
    let tcfg = cfg.train_config();
    let outcome = train(model, &corpus.train, &corpus.dev, &tcfg, &cfg.calr)?;

    let model_path = out.join(MODEL_FILE);
    let file = save_model(&outcome.model, &model_path)?;
    corpus.vocab.save(&out.join(VOCAB_FILE))?;
    write_text(&out.join(METRICS_FILE), &outcome.log.to_csv())?;
    let summary = TrainSummary {
        model_kind: cfg.model.kind,
        seed: cfg.seed,
        epochs: tcfg.epochs,
        best_epoch: outcome.best_epoch,
        dev_accuracy: round4(outcome.best_dev_accuracy),
        test_accuracy: round4(outcome.model.accuracy(&corpus.test)?),
        parameters: outcome.model.parameter_count(),
        file,
        glove_coverage: coverage.map(round4),
        timing: Some(time_inference(&outcome.model, &corpus.test, cfg.timing_repeats.max(1))?),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressSummary {
    pub k: usize,
    pub p: f64,
    pub pre_retrain_dev_accuracy: f64,
    pub pre_retrain_test_accuracy: f64,
    pub post_retrain_dev_accuracy: f64,
    pub post_retrain_test_accuracy: f64,
    pub retrain_epochs: usize,
    pub input_file: FileSize,
    pub output_file: FileSize,
    #[serde(skip)]
    pub timing: Option<TimingStats>,
}

fn rank_plan(m: usize, n: usize, k: usize) -> CompressionPlan {
    let p = k as f64 * (m + n) as f64 / (m * n) as f64;
    CompressionPlan {
        m,
        n,
        p,
        r_pct: 1.0 - p,
        k,
    }
}

/// Factorizes `model` in place per the configured target.
pub fn compress(model: &mut Model, target: Target) -> Result<CompressionPlan> {
    let table = model.embedding().lookup_table();
    let (m, n) = table.shape();
    match target {
        Target::Fraction(p) => model.factorize_embedding(p),
        Target::Rank(k) => {
            model.factorize_embedding_rank(k)?;
            Ok(rank_plan(m, n, k))
        }
    }
}

/// Factorizes a trained model's embedding and retrains every parameter.
pub fn cmd_compress_retrain(cfg: &PipelineConfig, model_path: &Path, out: &Path) -> Result<CompressSummary> {
    cfg.validate()?;
    let (input, vocab) = load_model_with_vocab(model_path)?;
    if input.quantized_bits().is_some() {
        return Err(Error::invalid("compress-retrain needs a full-precision model"));
    }
    let input_size = FileSize::of(&input, fs::metadata(model_path).map_err(|e| Error::io(model_path, e))?.len());
    let corpus = load_corpus(cfg, Some(&vocab))?;
    let mut model = input.to_model()?;
    if model.embedding().is_factorized() {
        return Err(Error::invalid(format!("{} already has a factorized embedding", model_path.display())));
    }
    let plan = compress(&mut model, cfg.compression.target()?)?;
    let pre_dev = model.accuracy(&corpus.dev)?;
    let pre_test = model.accuracy(&corpus.test)?;

    let tcfg = cfg.retrain_config();
    let outcome = train(model, &corpus.train, &corpus.dev, &tcfg, &cfg.calr)?;
    ensure_dir(out)?;
    let output_file = save_model(&outcome.model, &out.join(COMPRESSED_FILE))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_text(&out.join(METRICS_FILE), &outcome.log.to_csv())?;
    let summary = CompressSummary {
        k: plan.k,
        p: plan.p,
        pre_retrain_dev_accuracy: round4(pre_dev),
        pre_retrain_test_accuracy: round4(pre_test),
        post_retrain_dev_accuracy: round4(outcome.best_dev_accuracy),
        post_retrain_test_accuracy: round4(outcome.model.accuracy(&corpus.test)?),
        retrain_epochs: tcfg.epochs,
        input_file: input_size,
        output_file,
        timing: Some(time_inference(&outcome.model, &corpus.test, cfg.timing_repeats.max(1))?),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeSummary {
    pub bits: u32,
    pub weight_payload_bytes: u64,
    /// Same weights at 32 bits.
    pub reference_payload_bytes: u64,
    pub payload_ratio: f64,
    pub input_file_bytes: u64,
    pub output_file: FileSize,
    pub test_accuracy: f64,
}

/// Quantizes every tensor of a full-precision model; no retraining.
pub fn cmd_quantize(cfg: &PipelineConfig, model_path: &Path, bits: u32, out: &Path) -> Result<QuantizeSummary> {
    let bits = Bits::from_u32(bits)?;
    let (input, vocab) = load_model_with_vocab(model_path)?;
    let input_bytes = fs::metadata(model_path).map_err(|e| Error::io(model_path, e))?.len();
    let output = match input.quantized_bits() {
        Some(b) if b == bits => input.clone(),
        Some(b) => {
            return Err(Error::invalid(format!(
                "{} is already quantized at {} bits",
                model_path.display(),
                b.get()
            )))
        }
        None => ModelFile::from_quantized(&quantize_model(&input.to_model()?, bits)?),
    };
    let corpus = load_corpus(cfg, Some(&vocab))?;
    let accuracy = output.to_model()?.accuracy(&corpus.test)?;

    ensure_dir(out)?;
    let size = output.save(&out.join(quantized_file_name(bits)))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let payload = output.payload_bytes() as u64;
    let codes: u64 = output.tensors.iter().map(|(_, t)| (t.shape().0 * t.shape().1) as u64).sum();
    let reference = codes * u64::from(REFERENCE_BITS) / 8;
    let summary = QuantizeSummary {
        bits: bits.get(),
        weight_payload_bytes: payload,
        reference_payload_bytes: reference,
        payload_ratio: payload as f64 / reference as f64,
        input_file_bytes: input_bytes,
        output_file: FileSize::of(&output, size),
        test_accuracy: round4(accuracy),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCount {
    pub label: usize,
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub split: String,
    pub accuracy: f64,
    pub per_class: Vec<ClassCount>,
}

/// Eval-mode accuracy of any model file on the configured split.
pub fn cmd_eval(cfg: &PipelineConfig, model_path: &Path, split: Split, out: Option<&Path>) -> Result<EvalSummary> {
    let (file, vocab) = load_model_with_vocab(model_path)?;
    let model = file.to_model()?;
    let corpus = load_corpus(cfg, Some(&vocab))?;
    let data = match split {
        Split::Train => &corpus.train,
        Split::Dev => &corpus.dev,
        Split::Test => &corpus.test,
    };
    if data.num_classes > model.num_classes() {
        return Err(Error::invalid(format!(
            "data has {} classes but the model predicts {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let preds = model.predict_all(data)?;
    let mut per_class: Vec<ClassCount> = (0..model.num_classes())
        .map(|label| ClassCount {
            label,
            total: 0,
            correct: 0,
        })
        .collect();
    for (p, s) in preds.iter().zip(&data.sentences) {
        per_class[s.label].total += 1;
        per_class[s.label].correct += usize::from(*p == s.label);
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let summary = EvalSummary {
        split: format!("{split:?}").to_lowercase(),
        accuracy: round4(correct as f64 / data.len() as f64),
        per_class,
    };
    if let Some(out) = out {
        ensure_dir(out)?;
        write_json(&out.join(EVAL_FILE), &summary)?;
    }
    Ok(summary)
}

/// FLOP/space/latency table for each p in the analyze section.
pub fn cmd_analyze(cfg: &PipelineConfig, out: &Path) -> Result<Vec<FlopReport>> {
    cfg.hardware.validate()?;
    let a = &cfg.analyze;
    let reports = a
        .p_list
        .iter()
        .map(|&p| flop_report(a.m, a.n, p, &cfg.hardware))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    let mut csv = String::from(FlopReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&out.join(ANALYSIS_FILE), &csv)?;
    Ok(reports)
}

/// Human-readable rendering of [`cmd_analyze`] output.
pub fn analysis_text(reports: &[FlopReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "p={} m={} n={} k={}: F_Q={} F_S={} | space {} | fewer FLOPs exact {} (k < {:.3}), approx {} (k < {:.3}) | latency exact {}, approx {}\n",
            r.p,
            r.m,
            r.n,
            r.k,
            r.f_q,
            r.f_s,
            r.space.holds,
            r.fewer_flops.holds,
            r.fewer_flops.threshold,
            r.fewer_flops.approx_holds,
            r.fewer_flops.approx_threshold,
            r.latency.exact.holds,
            r.latency.approx.holds,
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OfflineSummary {
    pub k: usize,
    pub p: f64,
    pub first_layer_input_width: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub file: FileSize,
    #[serde(skip)]
    pub timing: Option<TimingStats>,
}

/// Rank-`k` embedding built before training: truncated SVD of pretrained
/// vectors, or a width-`k` random table for the random source.
pub fn offline_embedding(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    target: Target,
) -> Result<(EmbeddingTable, CompressionPlan)> {
    let (table, _) = initial_embedding(cfg, corpus)?;
    let (m, n) = table.weights().shape();
    let plan = match target {
        Target::Fraction(p) => choose_rank(p, m, n)?,
        Target::Rank(k) => rank_plan(m, n, k),
    };
    match cfg.embedding {
        EmbeddingSource::Random { .. } => Ok((random_init(m, plan.k, cfg.seed), plan)),
        _ => Ok((offline_compress_rank(&table, plan.k)?, plan)),
    }
}

/// Trains from scratch on an embedding compressed before training.
pub fn cmd_baseline_offline(cfg: &PipelineConfig, out: &Path) -> Result<OfflineSummary> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, None)?;
    let (table, plan) = offline_embedding(cfg, &corpus, cfg.compression.target()?)?;
    let model = build_model(cfg, table, corpus.train.num_classes)?;
    let outcome = train(model, &corpus.train, &corpus.dev, &cfg.train_config(), &cfg.calr)?;
    ensure_dir(out)?;
    let file = save_model(&outcome.model, &out.join(OFFLINE_FILE))?;
    corpus.vocab.save(&out.join(VOCAB_FILE))?;
    write_text(&out.join(METRICS_FILE), &outcome.log.to_csv())?;
    let summary = OfflineSummary {
        k: plan.k,
        p: plan.p,
        first_layer_input_width: outcome.model.embedding().output_width(),
        dev_accuracy: round4(outcome.best_dev_accuracy),
        test_accuracy: round4(outcome.model.accuracy(&corpus.test)?),
        file,
        timing: Some(time_inference(&outcome.model, &corpus.test, cfg.timing_repeats.max(1))?),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    /// Size reduction of the embedding layer, when it applies.
    pub r: Option<f64>,
    pub k: Option<usize>,
    pub size_bytes: u64,
    pub size_mb: f64,
    pub test_accuracy: f64,
    /// Accuracy right after factorization, before retraining.
    pub pre_retrain_test_accuracy: Option<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "method,r,k,size_bytes,size_mb,test_accuracy,pre_retrain_test_accuracy";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{:.2},{:.4},{}",
            self.method,
            opt(self.r.map(|r| r.to_string())),
            opt(self.k.map(|k| k.to_string())),
            self.size_bytes,
            self.size_mb,
            self.test_accuracy,
            opt(self.pre_retrain_test_accuracy.map(|a| format!("{a:.4}"))),
        )
    }
}

/// Uncompressed, 16/8-bit quantized, and per-R proposed and offline runs.
pub fn sweep_rows(cfg: &PipelineConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, None)?;
    let (table, _) = initial_embedding(cfg, &corpus)?;
    let model = build_model(cfg, table, corpus.train.num_classes)?;
    let base = train(model, &corpus.train, &corpus.dev, &cfg.train_config(), &cfg.calr)?.model;

    let size_of = |f: &ModelFile| -> Result<u64> { Ok(f.to_bytes()?.len() as u64) };
    let mut rows = Vec::new();
    let base_file = ModelFile::from_model(&base);
    let base_bytes = size_of(&base_file)?;
    rows.push(SweepRow {
        method: "uncompressed".into(),
        r: None,
        k: None,
        size_bytes: base_bytes,
        size_mb: mb(base_bytes),
        test_accuracy: round4(base.accuracy(&corpus.test)?),
        pre_retrain_test_accuracy: None,
    });
    for bits in [Bits::B16, Bits::B8] {
        let q = ModelFile::from_quantized(&quantize_model(&base, bits)?);
        let bytes = size_of(&q)?;
        rows.push(SweepRow {
            method: format!("quantized_{}bit", bits.get()),
            r: None,
            k: None,
            size_bytes: bytes,
            size_mb: mb(bytes),
            test_accuracy: round4(q.to_model()?.accuracy(&corpus.test)?),
            pre_retrain_test_accuracy: None,
        });
    }
    for &r in &cfg.compression.r_list {
        let target = CompressionSection {
            r: Some(r),
            ..CompressionSection::default()
        }
        .target()?;
        let mut model = base.clone();
        let plan = compress(&mut model, target)?;
        let pre = model.accuracy(&corpus.test)?;
        let proposed = train(model, &corpus.train, &corpus.dev, &cfg.retrain_config(), &cfg.calr)?.model;
        let bytes = size_of(&ModelFile::from_model(&proposed))?;
        rows.push(SweepRow {
            method: "proposed".into(),
            r: Some(r),
            k: Some(plan.k),
            size_bytes: bytes,
            size_mb: mb(bytes),
            test_accuracy: round4(proposed.accuracy(&corpus.test)?),
            pre_retrain_test_accuracy: Some(round4(pre)),
        });

        let (table, plan) = offline_embedding(cfg, &corpus, target)?;
        let model = build_model(cfg, table, corpus.train.num_classes)?;
        let offline = train(model, &corpus.train, &corpus.dev, &cfg.train_config(), &cfg.calr)?.model;
        let bytes = size_of(&ModelFile::from_model(&offline))?;
        rows.push(SweepRow {
            method: "offline".into(),
            r: Some(r),
            k: Some(plan.k),
            size_bytes: bytes,
            size_mb: mb(bytes),
            test_accuracy: round4(offline.accuracy(&corpus.test)?),
            pre_retrain_test_accuracy: None,
        });
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &PipelineConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep_rows(cfg)?;
    ensure_dir(out)?;
    let mut csv = String::from(SweepRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&out.join(SWEEP_FILE), &csv)?;
    Ok(rows)
}
