//! Pipeline stages, both as plain functions over in-memory values and as
//! [`Session`] methods that persist their outputs under one directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{generate_corpus, read_features, write_features, Corpus};
use crate::downstream::{
    contextual_features, eval_relation, eval_verb, masked_retrieval_eval, pair_features, train_linear_probe,
    train_relation_end_to_end, FeatureSource, LinearProbe, MetricsReport,
};
use crate::error::{Error, Result};
use crate::nn::{Backbone, ParamStore, TxE};
use crate::pretrain::{event_targets, pretrain_backbone, pretrain_txe, MaskLoss, MaskSampler, StepMetrics};
use crate::rng::{derive_seed, rng_from_seed};
use crate::runtime::checkpoint::{load_stage, save_checkpoint, Checkpoint, Stage};
use crate::runtime::config::RunConfig;
use crate::runtime::lock::DirLock;
use crate::runtime::metrics::MetricsSink;
use crate::tensor::Tensor;

pub const N_RELATIONS: usize = 4;

/// Training and held-out corpora of a run.
pub fn build_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let (train, _) = generate_corpus(&cfg.data)?;
    let (eval, _) = generate_corpus(&cfg.eval_data())?;
    Ok((train, eval))
}

/// The backbone before any training; pretraining starts from these weights.
pub fn initial_backbone(cfg: &RunConfig) -> Result<Backbone> {
    Backbone::init(cfg.backbone.clone(), derive_seed(cfg.contrastive.seed, "backbone-init"))
}

/// The contextualizer before any training; pretraining starts from these weights.
pub fn initial_txe(cfg: &RunConfig) -> Result<TxE> {
    TxE::init(cfg.txe.clone(), derive_seed(cfg.mask.seed, "txe-init"))
}

pub fn fit_backbone(cfg: &RunConfig, train: &Corpus, on_step: &mut dyn FnMut(usize, f64)) -> Result<Backbone> {
    pretrain_backbone(train, &cfg.backbone, &cfg.contrastive, on_step)
}

/// Mask-prediction pretraining on the training corpus, restrided by
/// `cfg.stride` first.
pub fn fit_txe(cfg: &RunConfig, train: &Corpus, backbone: &Backbone, on_step: &mut dyn FnMut(&StepMetrics)) -> Result<TxE> {
    let strided;
    let corpus = if cfg.stride > 1 {
        strided = train.restride(cfg.stride, cfg.txe.seq_len)?;
        &strided
    } else {
        train
    };
    pretrain_txe(corpus, backbone, &cfg.txe, &cfg.mask, on_step)
}

fn tag(mut r: MetricsReport, cfg: &RunConfig) -> MetricsReport {
    r.seed = cfg.seed;
    r.config_hash = cfg.hash();
    r
}

pub fn verb_probe(cfg: &RunConfig, backbone: &Backbone, train: &Corpus, eval: &Corpus) -> Result<(LinearProbe, MetricsReport)> {
    let probe = train_linear_probe(&event_targets(train, backbone)?, &train.verbs(), cfg.data.n_verbs, &cfg.probe)?;
    let report = eval_verb(&probe, &event_targets(eval, backbone)?, &eval.verbs())?;
    Ok((probe, tag(report, cfg)))
}

/// Per-event features from either source, one row per event.
pub fn event_features(corpus: &Corpus, backbone: &Backbone, txe: Option<&TxE>, source: FeatureSource) -> Result<Tensor> {
    let targets = event_targets(corpus, backbone)?;
    match (source, txe) {
        (FeatureSource::Backbone, _) => Ok(targets),
        (FeatureSource::Contextualized, Some(t)) => contextual_features(corpus, &targets, t),
        (FeatureSource::Contextualized, None) => Err(Error::InvalidArgument(
            "contextualized features need a contextualizer".into(),
        )),
    }
}

/// Linear relation probe over concatenated pair features.
pub fn relation_probe(
    cfg: &RunConfig,
    train_features: &Tensor,
    eval_features: &Tensor,
    train: &Corpus,
    eval: &Corpus,
) -> Result<(LinearProbe, MetricsReport)> {
    let (x, y) = pair_features(train_features, &train.triplets)?;
    let probe = train_linear_probe(&x, &y, N_RELATIONS, &cfg.probe)?;
    let (xe, ye) = pair_features(eval_features, &eval.triplets)?;
    Ok((probe.clone(), tag(eval_relation(&probe, &xe, &ye)?, cfg)))
}

/// Chance control for [`relation_probe`]: probes trained on independently
/// permuted training labels and scored on the true held-out labels.
/// A single shuffle lands anywhere in roughly 0.19..0.29 at default scale.
/// A random function of clustered features still correlates with the labels
/// by accident, so the report averages `probe_shuffle_repeats` shuffles and
/// also records their spread.
pub fn shuffled_relation_control(
    cfg: &RunConfig,
    train_features: &Tensor,
    eval_features: &Tensor,
    train: &Corpus,
    eval: &Corpus,
) -> Result<MetricsReport> {
    let repeats = cfg.probe_shuffle_repeats;
    let (x, y) = pair_features(train_features, &train.triplets)?;
    let (xe, ye) = pair_features(eval_features, &eval.triplets)?;
    let mut accs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut shuffled = y.clone();
        shuffled.shuffle(&mut rng_from_seed(derive_seed(cfg.probe.seed, &format!("label-shuffle-{r}"))));
        let probe = train_linear_probe(&x, &shuffled, N_RELATIONS, &cfg.probe)?;
        accs.push(eval_relation(&probe, &xe, &ye)?.get("mean_acc").expect("relation metric"));
    }
    let mean = accs.iter().sum::<f64>() / repeats as f64;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
    Ok(tag(
        MetricsReport::new("relation", ye.len())
            .with("mean_acc", mean)
            .with("mean_acc_sd", sd)
            .with("repeats", repeats as f64),
        cfg,
    ))
}

/// A scratch contextualizer and relation head trained jointly on labels only.
pub fn relation_end_to_end(cfg: &RunConfig, backbone: &Backbone, train: &Corpus, eval: &Corpus) -> Result<MetricsReport> {
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.epochs = cfg.probe_e2e_epochs;
    let mut txe = TxE::init(cfg.txe.clone(), derive_seed(cfg.probe.seed, "scratch-txe"))?;
    let targets = event_targets(train, backbone)?;
    let probe = train_relation_end_to_end(train, &targets, &mut txe, &probe_cfg, cfg.probe_txe_lr)?;
    let features = contextual_features(eval, &event_targets(eval, backbone)?, &txe)?;
    let (xe, ye) = pair_features(&features, &eval.triplets)?;
    Ok(tag(eval_relation(&probe, &xe, &ye)?, cfg))
}

/// Masked retrieval on the held-out corpus.
pub fn retrieval(cfg: &RunConfig, eval: &Corpus, backbone: &Backbone, txe: &TxE) -> Result<MetricsReport> {
    let targets = event_targets(eval, backbone)?;
    let r = masked_retrieval_eval(eval, &targets, txe, &cfg.retrieval)?;
    Ok(tag(
        MetricsReport::new("retrieval", r.n_queries)
            .with("retrieval@1", r.top1)
            .with("chance", r.chance())
            .with("chance_std", r.chance_std()),
        cfg,
    ))
}

/// A config axis swept by [`ablation_settings`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    MaskSize,
    Stride,
    Loss,
    Sampler,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask-size" => Ok(AblationAxis::MaskSize),
            "stride" => Ok(AblationAxis::Stride),
            "loss" => Ok(AblationAxis::Loss),
            "sampler" => Ok(AblationAxis::Sampler),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?} (mask-size, stride, loss, sampler)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MaskSize => "mask-size",
            AblationAxis::Stride => "stride",
            AblationAxis::Loss => "loss",
            AblationAxis::Sampler => "sampler",
        }
    }
}

/// Mask-size set `{1, ..., m}` expressed as the ratio that yields it.
pub fn alpha_for_max_size(m: usize, n: usize) -> f64 {
    m as f64 / n as f64
}

/// Labelled config variants along an axis.
pub fn ablation_settings(base: &RunConfig, axis: AblationAxis) -> Result<Vec<(String, RunConfig)>> {
    let n = base.txe.seq_len;
    let mut out = Vec::new();
    let mut push = |label: String, f: &dyn Fn(&mut RunConfig)| -> Result<()> {
        let mut c = base.clone();
        f(&mut c);
        c.validate()?;
        out.push((label, c));
        Ok(())
    };
    match axis {
        AblationAxis::MaskSize => {
            for m in 1..=n.min(4) {
                let set: Vec<String> = (1..=m).map(|k| k.to_string()).collect();
                let alpha = alpha_for_max_size(m, n);
                push(format!("{{{}}}", set.join(",")), &|c| c.mask.alpha = alpha)?;
            }
        }
        AblationAxis::Stride => {
            for s in 1..=3 {
                if base.data.seq_len.div_ceil(s) >= n {
                    push(format!("stride {s}"), &|c| c.stride = s)?;
                }
            }
        }
        AblationAxis::Loss => {
            for l in [MaskLoss::Contrastive, MaskLoss::L2] {
                push(l.name().to_string(), &|c| c.mask.loss = l)?;
            }
        }
        AblationAxis::Sampler => {
            for s in [MaskSampler::Uniform, MaskSampler::MaxDiscrepancy] {
                push(s.name().to_string(), &|c| c.mask.sampler = s)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub retrieval_top1: f64,
    pub relation_mean_acc: f64,
}

/// Pretrains one contextualizer for the variant and measures it.
pub fn ablation_row(label: &str, cfg: &RunConfig, backbone: &Backbone, train: &Corpus, eval: &Corpus) -> Result<AblationRow> {
    let txe = fit_txe(cfg, train, backbone, &mut |_| {})?;
    ablation_row_from(label, cfg, backbone, &txe, train, eval)
}

pub fn ablation_row_from(label: &str, cfg: &RunConfig, backbone: &Backbone, txe: &TxE, train: &Corpus, eval: &Corpus) -> Result<AblationRow> {
    let r = retrieval(cfg, eval, backbone, txe)?;
    let ft = event_features(train, backbone, Some(txe), FeatureSource::Contextualized)?;
    let fe = event_features(eval, backbone, Some(txe), FeatureSource::Contextualized)?;
    let (_, rel) = relation_probe(cfg, &ft, &fe, train, eval)?;
    Ok(AblationRow {
        label: label.to_string(),
        retrieval_top1: r.get("retrieval@1").expect("retrieval metric"),
        relation_mean_acc: rel.get("mean_acc").expect("relation metric"),
    })
}

pub fn format_ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(axis.name().len());
    let mut s = format!("{:<w$}  retrieval@1  relation mean_acc\n", axis.name());
    for r in rows {
        s.push_str(&format!("{:<w$}  {:>11.4}  {:>17.4}\n", r.label, r.retrieval_top1, r.relation_mean_acc));
    }
    s
}

/// File layout of an output directory.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("train.evsq")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("eval.evsq")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone.ckpt")
    }

    pub fn txe(&self) -> PathBuf {
        self.root.join("txe.ckpt")
    }

    pub fn probe(&self, name: &str) -> PathBuf {
        self.root.join(format!("probe_{name}.ckpt"))
    }

    /// Fingerprint of the generator settings behind the feature files.
    pub fn data_fingerprint(&self) -> PathBuf {
        self.root.join("data.fingerprint")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
}

/// A locked output directory plus the resolved configuration.
pub struct Session {
    pub cfg: RunConfig,
    pub out: OutDir,
    sink: MetricsSink,
    _lock: DirLock,
}

impl Session {
    /// Locks `dir`, writes the resolved config and opens the metrics log.
    pub fn open(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = OutDir::new(dir);
        fs::create_dir_all(out.root())?;
        let lock = DirLock::acquire(out.root())?;
        fs::write(out.config(), cfg.to_text())?;
        let sink = MetricsSink::open(out.metrics())?;
        Ok(Self {
            cfg,
            out,
            sink,
            _lock: lock,
        })
    }

    pub fn log(&self, report: MetricsReport) -> Result<MetricsReport> {
        let r = tag(report, &self.cfg);
        self.sink.log(&r)?;
        Ok(r)
    }

    fn checkpoint(&self, stage: Stage, params: &ParamStore<f32>) -> Checkpoint {
        Checkpoint {
            stage,
            config_hash: self.cfg.hash(),
            config: self.cfg.to_text(),
            params: params.clone(),
        }
    }

    pub fn generate_data(&self) -> Result<(Corpus, Corpus)> {
        let (train, eval) = build_corpora(&self.cfg)?;
        write_features(&train, self.out.train_data())?;
        write_features(&eval, self.out.eval_data())?;
        fs::write(self.out.data_fingerprint(), format!("{:016x}\n", data_fingerprint(&self.cfg)))?;
        self.log(
            MetricsReport::new("generate_data", train.n_events())
                .with("train_events", train.n_events() as f64)
                .with("eval_events", eval.n_events() as f64)
                .with("train_triplets", train.triplets.len() as f64),
        )?;
        Ok((train, eval))
    }

    /// Reads the feature files, generating them first if absent.
    pub fn load_data(&self) -> Result<(Corpus, Corpus)> {
        if self.out.train_data().exists() && self.out.eval_data().exists() {
            let want = format!("{:016x}", data_fingerprint(&self.cfg));
            let have = fs::read_to_string(self.out.data_fingerprint()).unwrap_or_default();
            if have.trim() != want {
                return Err(Error::Config(format!(
                    "feature files in {} were generated with different data settings; rerun generate-data",
                    self.out.root().display()
                )));
            }
            let train = read_features(self.out.train_data())?;
            let eval = read_features(self.out.eval_data())?;
            if train.d_in != self.cfg.data.d_in || train.window != self.cfg.data.window {
                return Err(Error::DimensionDisagreement(format!(
                    "feature file has d_in={} T={}, config expects d_in={} T={}",
                    train.d_in, train.window, self.cfg.data.d_in, self.cfg.data.window
                )));
            }
            Ok((train, eval))
        } else {
            log::info!("feature files not found in {}; generating", self.out.root().display());
            self.generate_data()
        }
    }

    pub fn pretrain_backbone(&self) -> Result<Backbone> {
        let (train, _) = self.load_data()?;
        let mut err = None;
        let backbone = fit_backbone(&self.cfg, &train, &mut |step, loss| {
            if err.is_none() && (step % 100 == 0 || step + 1 == self.cfg.contrastive.steps) {
                let r = MetricsReport::new("pretrain_backbone", step).with("step", step as f64).with("loss", loss);
                err = self.log(r).err();
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        save_checkpoint(&self.checkpoint(Stage::Backbone, &backbone.params), self.out.backbone())?;
        Ok(backbone)
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let ckpt = load_stage(self.out.backbone(), Stage::Backbone)?;
        let produced = RunConfig::parse(&ckpt.config)?;
        if produced.backbone != self.cfg.backbone {
            return Err(Error::DimensionDisagreement(format!(
                "backbone checkpoint was built with {:?}, config has {:?}",
                produced.backbone, self.cfg.backbone
            )));
        }
        let mut b = Backbone::init(self.cfg.backbone.clone(), 0)?;
        b.params.load_from(&ckpt.params)?;
        Ok(b)
    }

    pub fn pretrain_txe(&self) -> Result<TxE> {
        let backbone = self.load_backbone()?;
        let (train, _) = self.load_data()?;
        let mut err = None;
        let txe = fit_txe(&self.cfg, &train, &backbone, &mut |m| {
            if err.is_none() && (m.step % 100 == 0 || m.step + 1 == self.cfg.mask.steps) {
                let mut r = MetricsReport::new("pretrain_txe", m.step)
                    .with("step", m.step as f64)
                    .with("loss", m.loss)
                    .with("queue_fill", m.queue_fill as f64);
                for (i, &c) in m.mask_sizes.iter().enumerate() {
                    r = r.with(&format!("mask_size_{}", i + 1), c as f64);
                }
                err = self.log(r).err();
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        save_checkpoint(&self.checkpoint(Stage::Txe, &txe.params), self.out.txe())?;
        Ok(txe)
    }

    pub fn load_txe(&self) -> Result<TxE> {
        let ckpt = load_stage(self.out.txe(), Stage::Txe)?;
        let produced = RunConfig::parse(&ckpt.config)?;
        if produced.txe != self.cfg.txe {
            return Err(Error::DimensionDisagreement(format!(
                "txe checkpoint was built with {:?}, config has {:?}",
                produced.txe, self.cfg.txe
            )));
        }
        let mut t = TxE::init(self.cfg.txe.clone(), 0)?;
        t.params.load_from(&ckpt.params)?;
        Ok(t)
    }

    fn load_probe(&self, name: &str) -> Result<Option<LinearProbe>> {
        let path = self.out.probe(name);
        if !path.exists() {
            return Ok(None);
        }
        let ckpt = load_stage(&path, Stage::Probe)?;
        let w = ckpt
            .params
            .iter()
            .next()
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Corrupt(format!("probe checkpoint {} has no tensors", path.display())))?;
        let mut p = LinearProbe::init(w.rows(), w.cols(), 0);
        p.params.load_from(&ckpt.params)?;
        Ok(Some(p))
    }

    /// Trains the verb probe and the relation probes on every available
    /// feature source, saving each head.
    pub fn probe(&self) -> Result<Vec<MetricsReport>> {
        let backbone = self.load_backbone()?;
        let txe = match self.load_txe() {
            Ok(t) => Some(t),
            Err(Error::MissingCheckpoint { .. }) => {
                log::warn!("no contextualizer checkpoint; skipping contextualized relation probe");
                None
            }
            Err(e) => return Err(e),
        };
        let (train, eval) = self.load_data()?;
        let mut reports = Vec::new();
        let (p, r) = verb_probe(&self.cfg, &backbone, &train, &eval)?;
        save_checkpoint(&self.checkpoint(Stage::Probe, &p.params), self.out.probe("verb"))?;
        reports.push(self.log(rename(r, "verb/backbone"))?);
        for source in [FeatureSource::Backbone, FeatureSource::Contextualized] {
            if source == FeatureSource::Contextualized && txe.is_none() {
                continue;
            }
            let ft = event_features(&train, &backbone, txe.as_ref(), source)?;
            let fe = event_features(&eval, &backbone, txe.as_ref(), source)?;
            let (p, r) = relation_probe(&self.cfg, &ft, &fe, &train, &eval)?;
            let name = format!("relation_{}", source_name(source));
            save_checkpoint(&self.checkpoint(Stage::Probe, &p.params), self.out.probe(&name))?;
            reports.push(self.log(rename(r, &format!("relation/{}", source_name(source))))?);
            let r = shuffled_relation_control(&self.cfg, &ft, &fe, &train, &eval)?;
            reports.push(self.log(rename(r, &format!("relation/{}/shuffled", source_name(source))))?);
        }
        Ok(reports)
    }

    /// Evaluates saved heads on the held-out corpus and runs masked retrieval.
    pub fn eval(&self) -> Result<Vec<MetricsReport>> {
        let backbone = self.load_backbone()?;
        let txe = self.load_txe()?;
        let (_, eval) = self.load_data()?;
        let mut reports = Vec::new();
        if let Some(p) = self.load_probe("verb")? {
            let r = eval_verb(&p, &event_targets(&eval, &backbone)?, &eval.verbs())?;
            reports.push(self.log(rename(r, "eval/verb/backbone"))?);
        }
        for source in [FeatureSource::Backbone, FeatureSource::Contextualized] {
            if let Some(p) = self.load_probe(&format!("relation_{}", source_name(source)))? {
                let f = event_features(&eval, &backbone, Some(&txe), source)?;
                let (x, y) = pair_features(&f, &eval.triplets)?;
                let r = eval_relation(&p, &x, &y)?;
                reports.push(self.log(rename(r, &format!("eval/relation/{}", source_name(source))))?);
            }
        }
        reports.push(self.log(retrieval(&self.cfg, &eval, &backbone, &txe)?)?);
        let random = initial_txe(&self.cfg)?;
        reports.push(self.log(rename(retrieval(&self.cfg, &eval, &backbone, &random)?, "retrieval/untrained"))?);
        Ok(reports)
    }

    /// Sweeps one axis against the saved backbone.
    pub fn ablate(&self, axis: AblationAxis) -> Result<Vec<AblationRow>> {
        let backbone = self.load_backbone()?;
        let (train, eval) = self.load_data()?;
        let mut rows = Vec::new();
        for (label, cfg) in ablation_settings(&self.cfg, axis)? {
            let row = ablation_row(&label, &cfg, &backbone, &train, &eval)?;
            let mut r = MetricsReport::new(format!("ablate/{}/{}", axis.name(), label), 0)
                .with("retrieval@1", row.retrieval_top1)
                .with("relation_mean_acc", row.relation_mean_acc);
            r.seed = cfg.seed;
            r.config_hash = cfg.hash();
            self.sink.log(&r)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Hash of the config lines that determine the generated corpora.
pub fn data_fingerprint(cfg: &RunConfig) -> u64 {
    let text: String = cfg
        .to_text()
        .lines()
        .filter(|l| l.starts_with("data.") || l.starts_with("run.seed"))
        .map(|l| format!("{l}\n"))
        .collect();
    crate::rng::fnv1a64(text.as_bytes())
}

fn source_name(s: FeatureSource) -> &'static str {
    match s {
        FeatureSource::Backbone => "backbone",
        FeatureSource::Contextualized => "contextualized",
    }
}

fn rename(mut r: MetricsReport, task: &str) -> MetricsReport {
    r.task = task.to_string();
    r
}
