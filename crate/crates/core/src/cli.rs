//! Command-line front end. Each command returns the text it prints so the
//! binary and the tests share one code path.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diff::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::error::{Error, Result};
use crate::evalkit::{
    attention_ranking, evaluate, rerank_i2t, Direction, RetrievalReport, SimilarityMatrix,
};
use crate::featurestore::{
    generate_synthetic, load_dataset, synthesize, Dataset, FeatureSet, SyntheticConfig,
};
use crate::model::Model;
use crate::params::{BnAccess, Ctx};
use crate::train::{split, train, TrainLog};
use crate::visual::fusion_layers_for;

#[derive(Debug, Parser)]
#[command(
    name = "dsran",
    version,
    about = "Dual semantic relations attention network over precomputed features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Top-ranked items for one query, with node attention rankings.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per joint-relation count K.
    SweepK(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub items: usize,
    #[arg(long, default_value_t = 16)]
    pub global_nodes: usize,
    #[arg(long, default_value_t = 12)]
    pub regional_nodes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab: usize,
    #[arg(long, default_value_t = 12)]
    pub max_words: usize,
    #[arg(long, default_value_t = 5)]
    pub captions: usize,
    /// Latent concepts; defaults to one per item (capped at 16 on larger sets).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Flags shared by every command that builds or runs a model. Each one
/// overrides the matching field of `--config`.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub train_items: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub jsr_k: Option<usize>,
    #[arg(long)]
    pub no_bn: bool,
    #[arg(long)]
    pub no_global: bool,
    #[arg(long)]
    pub no_regional: bool,
    #[arg(long)]
    pub no_ssr: bool,
    #[arg(long)]
    pub no_jsr: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.lr.unwrap_or(t.learning_rate);
        if self.train_items.is_some() {
            t.train_items = self.train_items;
        }
        cfg.loss.margin = self.margin.unwrap_or(cfg.loss.margin);
        let m = &mut cfg.model;
        m.embed_dim = self.embed_dim.unwrap_or(m.embed_dim);
        m.word_dim = self.word_dim.unwrap_or(m.word_dim);
        m.heads = self.heads.unwrap_or(m.heads);
        m.jsr_k = self.jsr_k.unwrap_or(m.jsr_k);
        m.use_bn &= !self.no_bn;
        m.use_global &= !self.no_global;
        m.use_regional &= !self.no_regional;
        m.use_ssr &= !self.no_ssr;
        m.use_jsr &= !self.no_jsr;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Re-rank each image query's top candidates.
    #[arg(long)]
    pub rerank: bool,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Further checkpoints whose similarity scores are averaged in.
    #[arg(long)]
    pub ensemble: Vec<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionArg {
    I2t,
    T2i,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image index for i2t, caption index for t2i.
    #[arg(long)]
    pub query: usize,
    #[arg(long, value_enum, default_value_t = DirectionArg::I2t)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Nodes listed per path in the attention ranking.
    #[arg(long, default_value_t = 5)]
    pub nodes: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 0)]
    pub coords: usize,
    /// Scale the matrix-product gradient by this factor (negative control).
    #[arg(long)]
    pub fault: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Text to print and the process exit code.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: u8,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, code: 0 }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_environmental() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::SweepK(a) => cmd_sweep_k(&a),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(a: &GenArgs) -> Result<Outcome> {
    let synth = SyntheticConfig {
        seed: a.seed,
        n_items: a.items,
        global_nodes: a.global_nodes,
        regional_nodes: a.regional_nodes,
        feature_dim: a.dim,
        vocab_size: a.vocab,
        max_words: a.max_words,
        captions_per_image: a.captions,
        cluster_count: a.clusters.unwrap_or(a.items.min(16)),
    };
    let manifest = generate_synthetic(&synth, &a.out)?;
    Ok(Outcome::ok(if a.json {
        to_json(&manifest)
    } else {
        format!(
            "wrote {} items ({} captions each) to {}\n",
            manifest.n_items,
            manifest.captions_per_image,
            a.out.display()
        )
    }))
}

/// Loads the configured dataset and adopts its feature and vocabulary sizes.
fn dataset_for(cfg: &mut RunConfig) -> Result<Dataset> {
    let ds = load_dataset(cfg.dataset_path()?)?;
    cfg.model.feature_dim = ds.manifest.feature_dim;
    cfg.model.vocab_size = ds.manifest.vocab_size;
    Ok(ds)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epochs: usize,
    final_loss: f64,
    validation: Option<&'a RetrievalReport>,
    checkpoint: PathBuf,
}

fn fit(cfg: &RunConfig, dataset: &Dataset) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let log = train(&mut model, dataset, &cfg.train_config(), &cfg.loss)?;
    Ok((model, log))
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let mut cfg = a.run.resolve()?;
    let dataset = dataset_for(&mut cfg)?;
    let (model, log) = fit(&cfg, &dataset)?;

    let ckpt = cfg.out.join("model.ckpt");
    let run = serde_json::to_value(&cfg).expect("config serializes");
    checkpoint::save(&ckpt, &model, log.epochs.len(), run)?;
    write_file(&cfg.out.join("train_log.json"), &to_json(&log))?;
    write_file(&cfg.out.join("config.json"), &cfg.to_json())?;

    let summary = TrainSummary {
        epochs: log.epochs.len(),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        validation: log.final_validation(),
        checkpoint: ckpt,
    };
    Ok(Outcome::ok(if a.run.json {
        to_json(&summary)
    } else {
        let mut s = format!(
            "trained {} epochs, final loss {:.6}, checkpoint {}\n",
            summary.epochs,
            summary.final_loss,
            summary.checkpoint.display()
        );
        if let Some(v) = summary.validation {
            s.push_str(&v.to_string());
        }
        s
    }))
}

/// Similarity matrix of one checkpoint over `dataset`.
fn checkpoint_similarity(path: &Path, dataset: &Dataset) -> Result<SimilarityMatrix> {
    let (model, _) = checkpoint::load(path)?;
    model.similarity(dataset)
}

/// Mean similarity over every listed checkpoint.
fn ensemble_similarity(paths: &[PathBuf], dataset: &Dataset) -> Result<SimilarityMatrix> {
    let mut sum: Option<SimilarityMatrix> = None;
    for p in paths {
        let sim = checkpoint_similarity(p, dataset)?;
        sum = Some(match sum {
            None => sim,
            Some(acc) => {
                SimilarityMatrix::new(acc.scores() + sim.scores(), sim.captions_per_image())?
            }
        });
    }
    let sum = sum.ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    if paths.len() == 1 {
        return Ok(sum);
    }
    SimilarityMatrix::new(sum.scores() / paths.len() as f64, sum.captions_per_image())
}

#[derive(Serialize)]
struct EvalSummary {
    report: RetrievalReport,
    folds: Vec<RetrievalReport>,
    reranked: bool,
    models: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let mut cfg = a.run.resolve()?;
    if a.rerank {
        cfg.eval.rerank = true;
    }
    cfg.eval.top_n = a.top_n.unwrap_or(cfg.eval.top_n);
    cfg.eval.lambda = a.lambda.unwrap_or(cfg.eval.lambda);
    cfg.eval.folds = a.folds.unwrap_or(cfg.eval.folds);
    cfg.eval.ensemble.extend(a.ensemble.iter().cloned());
    if cfg.eval.folds == 0 {
        return Err(Error::Config("folds must be ≥ 1".into()));
    }
    let dataset = load_dataset(cfg.dataset_path()?)?;

    let mut paths = vec![a.checkpoint.clone()];
    paths.extend(cfg.eval.ensemble.iter().cloned());
    let sim = ensemble_similarity(&paths, &dataset)?;

    let n = sim.n_images();
    let folds = cfg.eval.folds;
    if !n.is_multiple_of(folds) {
        return Err(Error::Config(format!(
            "{n} images cannot be split into {folds} equal folds"
        )));
    }
    let size = n / folds;
    let mut parts = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut part = if folds == 1 {
            sim.clone()
        } else {
            sim.sub_matrix(f * size..(f + 1) * size)?
        };
        if cfg.eval.rerank {
            part = rerank_i2t(&part, &cfg.eval.rerank_config())?;
        }
        parts.push(evaluate(&part)?);
    }
    let report = if folds == 1 {
        parts[0].clone()
    } else {
        RetrievalReport::mean(&parts)?
    };
    let summary = EvalSummary {
        report,
        folds: if folds == 1 { Vec::new() } else { parts },
        reranked: cfg.eval.rerank,
        models: paths.len(),
    };
    let json = to_json(&summary);
    if let Some(out) = &a.run.out {
        write_file(&out.join("eval.json"), &json)?;
    }
    Ok(Outcome::ok(if a.run.json {
        json
    } else {
        summary.report.to_string()
    }))
}

#[derive(Serialize)]
struct Hit {
    index: usize,
    score: f64,
}

#[derive(Serialize)]
struct AttentionRanking {
    image: usize,
    global: Option<Vec<usize>>,
    regional: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct RetrieveSummary {
    direction: DirectionArg,
    query: usize,
    results: Vec<Hit>,
    attention: AttentionRanking,
}

fn node_ranking(
    model: &Model,
    image: &FeatureSet,
    index: usize,
    top: usize,
) -> Result<AttentionRanking> {
    let trace = model.trace_image(image)?;
    let rank = |nodes: &Option<crate::diff::Tensor>| -> Result<Option<Vec<usize>>> {
        nodes
            .as_ref()
            .map(|n| attention_ranking(trace.rep.row(0), n, top.min(n.nrows())))
            .transpose()
    };
    Ok(AttentionRanking {
        image: index,
        global: rank(&trace.global_nodes)?,
        regional: rank(&trace.regional_nodes)?,
    })
}

pub fn cmd_retrieve(a: &RetrieveArgs) -> Result<Outcome> {
    let cfg = a.run.resolve()?;
    let dataset = load_dataset(cfg.dataset_path()?)?;
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let sim = model.similarity(&dataset)?;
    let (limit, order) = match a.direction {
        DirectionArg::I2t => (sim.n_images(), Direction::I2T),
        DirectionArg::T2i => (sim.n_texts(), Direction::T2I),
    };
    if a.query >= limit {
        return Err(Error::Config(format!(
            "query {} out of range for {limit} items",
            a.query
        )));
    }
    let ranked = match order {
        Direction::I2T => sim.i2t_order(a.query),
        Direction::T2I => sim.t2i_order(a.query),
    };
    let results: Vec<Hit> = ranked
        .into_iter()
        .take(a.top)
        .map(|j| Hit {
            index: j,
            score: match order {
                Direction::I2T => sim.scores()[[a.query, j]],
                Direction::T2I => sim.scores()[[j, a.query]],
            },
        })
        .collect();
    let image = match order {
        Direction::I2T => a.query,
        Direction::T2I => results
            .first()
            .map(|h| h.index)
            .unwrap_or(sim.image_of(a.query)),
    };
    let attention = node_ranking(&model, &dataset.items[image], image, a.nodes)?;
    let summary = RetrieveSummary {
        direction: a.direction,
        query: a.query,
        results,
        attention,
    };
    let json = to_json(&summary);
    if let Some(out) = &a.run.out {
        write_file(&out.join("retrieve.json"), &json)?;
    }
    Ok(Outcome::ok(if a.run.json {
        json
    } else {
        let mut s = String::new();
        for (rank, h) in summary.results.iter().enumerate() {
            s.push_str(&format!(
                "{:>3}  {:>5}  {:.6}\n",
                rank + 1,
                h.index,
                h.score
            ));
        }
        s
    }))
}

#[derive(Serialize)]
pub struct GradcheckSummary {
    pub batch: usize,
    pub parameters: Vec<String>,
    pub report: GradcheckReport,
}

/// Runs the finite-difference check over every parameter tensor of `model`
/// on the first `batch` items of `dataset` (first caption each).
pub fn gradcheck_model(
    model: &Model,
    dataset: &Dataset,
    batch: usize,
    opts: &GradcheckOptions,
    fault: Option<f64>,
    loss: &crate::matcher::LossConfig,
) -> Result<GradcheckReport> {
    if batch < 2 || batch > dataset.len() {
        return Err(Error::Config(format!(
            "gradcheck batch {batch} must lie in 2..={}",
            dataset.len()
        )));
    }
    let images: Vec<&FeatureSet> = dataset.items[..batch].iter().collect();
    let captions: Vec<&[u32]> = dataset.items[..batch]
        .iter()
        .map(|f| f.captions[0].as_slice())
        .collect();
    gradcheck(
        |tape, vars| {
            if let Some(scale) = fault {
                tape.inject_matmul_grad_fault(scale);
            }
            let mut bn = model.store.bn_states().to_vec();
            let mut ctx = Ctx::new(tape, vars, BnAccess::Update(&mut bn));
            model.batch_loss(&mut ctx, &images, &captions, loss)
        },
        model.store.values(),
        opts,
    )
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let mut cfg = a.run.resolve()?;
    let dataset = match &cfg.dataset {
        Some(_) => dataset_for(&mut cfg)?,
        None => {
            let synth = SyntheticConfig {
                seed: cfg.seed,
                feature_dim: cfg.model.feature_dim,
                vocab_size: cfg.model.vocab_size,
                ..SyntheticConfig::default()
            };
            synthesize(&synth)?
        }
    };
    cfg.model.visual().validate()?;
    cfg.loss.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let opts = GradcheckOptions {
        step: a.step,
        tol: a.tol,
        max_coords_per_param: (a.coords > 0).then_some(a.coords),
        seed: cfg.seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck_model(&model, &dataset, a.batch, &opts, a.fault, &cfg.loss)?;
    let summary = GradcheckSummary {
        batch: a.batch,
        parameters: model.store.names().to_vec(),
        report,
    };
    let code = if summary.report.passed { 0 } else { 1 };
    let json = to_json(&summary);
    if let Some(out) = &a.run.out {
        write_file(&out.join("gradcheck.json"), &json)?;
    }
    let stdout = if a.run.json {
        json
    } else {
        let r = &summary.report;
        let mut s = String::new();
        for p in &r.params {
            s.push_str(&format!(
                "{:<40} {:>6} coords  max rel err {:.3e}\n",
                summary.parameters[p.index], p.coords_checked, p.max_rel_error
            ));
        }
        s.push_str(&format!(
            "{}: max relative error {:.3e} (tol {:.1e}) over {} coordinates\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.tol,
            r.coords_checked
        ));
        s
    };
    Ok(Outcome { stdout, code })
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    final_loss: f64,
    report: RetrievalReport,
}

pub fn cmd_sweep_k(a: &SweepArgs) -> Result<Outcome> {
    let mut cfg = a.run.resolve()?;
    if a.ks.is_empty() {
        return Err(Error::Config("empty K list".into()));
    }
    for &k in &a.ks {
        fusion_layers_for(k)?;
    }
    if !cfg.model.use_jsr {
        return Err(Error::Config(
            "sweep-k needs joint relations enabled".into(),
        ));
    }
    let dataset = dataset_for(&mut cfg)?;
    let (_, val) = split(&dataset, &cfg.train_config())?;
    let mut rows = Vec::with_capacity(a.ks.len());
    for &k in &a.ks {
        let mut run = cfg.clone();
        run.model.jsr_k = k;
        let (model, log) = fit(&run, &dataset)?;
        rows.push(SweepRow {
            k,
            final_loss: log.final_loss().unwrap_or(f64::NAN),
            report: match log.final_validation() {
                Some(r) => r.clone(),
                None => evaluate(&model.similarity(&val)?)?,
            },
        });
    }
    let json = to_json(&json!({ "rows": rows }));
    write_file(&cfg.out.join("sweep_k.json"), &json)?;
    Ok(Outcome::ok(if a.run.json {
        json
    } else {
        let mut s = format!("{:>3} {:>10} {:>8}\n", "K", "loss", "Rsum");
        for r in &rows {
            s.push_str(&format!(
                "{:>3} {:>10.6} {:>8.2}\n",
                r.k, r.final_loss, r.report.rsum
            ));
        }
        s
    }))
}
