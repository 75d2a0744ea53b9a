//! SGD training, validation-based model selection, and the evaluation
//! protocols built on top of it (held-out domain, ablation ladder, single source).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{
    generate, leave_one_domain_out, single_source, split_train_val, BatchSampler, DataSpec,
    DomainDataset,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelGraph, ParamGrads};
use crate::selfreg::{objective, BatchDraw, LossBreakdown, SelfRegConfig};
use crate::swa::SwaState;

/// Stream tags for [`stream`].
pub const SPLIT_STREAM: u64 = 1;
pub const BATCH_STREAM: u64 = 2;
pub const PAIR_STREAM: u64 = 3;
pub const DISTANCE_STREAM: u64 = 4;

/// Independent generator for one consumer of a seed.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn split_seed(data_seed: u64) -> u64 {
    stream(data_seed, SPLIT_STREAM).random()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Data generation and the train/val split.
    pub data: u64,
    /// Parameter initialization.
    pub init: u64,
    /// Batch order, pairing and mixing draws.
    pub train: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            train: seed,
        }
    }
}

/// Network widths; input and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_dims: Vec<usize>,
    pub feat_dim: usize,
    pub cdpl_hidden_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            feat_dim: 16,
            cdpl_hidden_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on every domain but `target_domain`, test on it.
    #[default]
    LeaveOneOut,
    /// Train on `source_domain` only, test on every other domain.
    SingleSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub decay_factor: f64,
    pub swa: bool,
    /// Fraction of each source `(domain, class)` cell used for training.
    pub train_fraction: f64,
    /// Upper bound on same-class pairs used by the distance report.
    pub distance_sample_cap: usize,
    pub protocol: Protocol,
    pub target_domain: usize,
    pub source_domain: usize,
    pub seeds: Seeds,
    pub data: DataSpec,
    pub model: ArchConfig,
    pub selfreg: SelfRegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.004,
            lr_decay_epoch: 24,
            decay_factor: 0.1,
            swa: false,
            train_fraction: 0.9,
            distance_sample_cap: 2000,
            protocol: Protocol::LeaveOneOut,
            target_domain: 0,
            source_domain: 0,
            seeds: Seeds::default(),
            data: DataSpec::default(),
            model: ArchConfig::default(),
            selfreg: SelfRegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch statistics need >= 2 rows"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be finite and > 0, got {}", self.lr)));
        }
        if self.lr_decay_epoch > self.epochs {
            return Err(Error::config(
                "lr_decay_epoch",
                format!("{} exceeds epochs = {}", self.lr_decay_epoch, self.epochs),
            ));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::config("decay_factor", "must be finite and > 0"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        if self.distance_sample_cap == 0 {
            return Err(Error::config("distance_sample_cap", "must be >= 1"));
        }
        self.data.validate().map_err(|e| e.within("data"))?;
        self.model_config().validate().map_err(|e| e.within("model"))?;
        self.selfreg.validate().map_err(|e| e.within("selfreg"))?;
        for (field, d) in [("target_domain", self.target_domain), ("source_domain", self.source_domain)] {
            if d >= self.data.num_domains {
                return Err(Error::config(
                    field,
                    format!("domain {d} does not exist ({} domains)", self.data.num_domains),
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            feat_dim: self.model.feat_dim,
            cdpl_hidden_dim: self.model.cdpl_hidden_dim,
            num_classes: self.data.num_classes,
            init_seed: self.seeds.init,
        }
    }
}

/// Step decay, disabled while weights are being averaged.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if !cfg.swa && epoch >= cfg.lr_decay_epoch {
        cfg.lr * cfg.decay_factor
    } else {
        cfg.lr
    }
}

/// `w <- w - lr * g` for every parameter; consumes the gradients.
pub fn sgd_step(model: &mut Model, grads: ParamGrads, lr: f64) -> Result<()> {
    if grads.entries.len() != model.params().len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.entries.len(),
            model.params().len()
        )));
    }
    for (i, (w, g)) in model.params_mut().tensors_mut().zip(grads.entries).enumerate() {
        if g.len() != w.len() {
            return Err(Error::Contract(format!(
                "gradient {i} has {} entries for {} weights",
                g.len(),
                w.len()
            )));
        }
        for (wi, gi) in w.data_mut().iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `None` for classes absent from the dataset.
    pub per_class: Vec<Option<f64>>,
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate(model: &Model, ds: &DomainDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::config("dataset", "cannot evaluate on an empty dataset"));
    }
    let (_, logits) = model.predict(&ds.features())?;
    let preds = argmax_rows(&logits);
    let k = model.config().num_classes;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (p, e) in preds.iter().zip(&ds.examples) {
        counts[e.class] += 1;
        if *p == e.class {
            hits[e.class] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        correct,
        total: ds.len(),
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Mean Euclidean distance between same-class feature vectors.
    pub feature: f64,
    /// Mean Euclidean distance between same-class logit vectors.
    pub logit: f64,
    pub pairs: usize,
    /// Every same-class pair was used rather than a sample.
    pub exhaustive: bool,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean same-class distances; all pairs when there are at most `sample_cap`,
/// otherwise `sample_cap` uniformly drawn pairs.
pub fn distance_report<R: Rng + ?Sized>(
    model: &Model,
    ds: &DomainDataset,
    sample_cap: usize,
    rng: &mut R,
) -> Result<DistanceReport> {
    let mut groups = vec![Vec::new(); ds.num_classes];
    for (i, e) in ds.examples.iter().enumerate() {
        groups[e.class].push(i);
    }
    let pair_counts: Vec<usize> = groups.iter().map(|g| g.len() * g.len().saturating_sub(1) / 2).collect();
    let total: usize = pair_counts.iter().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no class has two examples".into()));
    }
    let (z, logits) = model.predict(&ds.features())?;
    let mut feat = 0.0;
    let mut logit = 0.0;
    let mut add = |i: usize, j: usize| {
        feat += euclid(z.row(i), z.row(j));
        logit += euclid(logits.row(i), logits.row(j));
    };
    let used = if total <= sample_cap {
        for g in &groups {
            for (a, &i) in g.iter().enumerate() {
                for &j in &g[a + 1..] {
                    add(i, j);
                }
            }
        }
        total
    } else {
        for _ in 0..sample_cap {
            let mut r = rng.random_range(0..total);
            let c = pair_counts
                .iter()
                .position(|&n| {
                    let hit = r < n;
                    if !hit {
                        r -= n;
                    }
                    hit
                })
                .expect("rank below total");
            let g = &groups[c];
            let a = rng.random_range(0..g.len());
            let mut b = rng.random_range(0..g.len() - 1);
            if b >= a {
                b += 1;
            }
            add(g[a], g[b]);
        }
        sample_cap
    };
    Ok(DistanceReport {
        feature: feat / used as f64,
        logit: logit / used as f64,
        pairs: used,
        exhaustive: total <= sample_cap,
    })
}

/// One row of the per-epoch metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_ind_feat: f64,
    pub l_hdl_feat: f64,
    pub l_feature: f64,
    pub l_logit: f64,
    pub l_selfreg: f64,
    pub l_total: f64,
    pub val_acc: f64,
    pub feat_dist: f64,
    pub logit_dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    /// Rows of the batch that came from a held-out domain.
    pub target_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub domain: usize,
    /// Accuracy of the best-validation checkpoint.
    pub best: f64,
    /// Accuracy of the last-epoch weights.
    pub last: f64,
    pub swa: Option<f64>,
}

impl TargetScore {
    /// The SWA model when one was trained, otherwise the selected checkpoint.
    pub fn reported(&self) -> f64 {
        self.swa.unwrap_or(self.best)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_model: Model,
    pub final_model: Model,
    pub swa_model: Option<Model>,
    pub swa_snapshots: usize,
    pub targets: Vec<TargetScore>,
    /// Held-out rows seen in training batches; always 0.
    pub target_rows_seen: usize,
}

impl TrainResult {
    fn mean_over_targets(&self, f: impl Fn(&TargetScore) -> f64) -> f64 {
        self.targets.iter().map(f).sum::<f64>() / self.targets.len() as f64
    }

    pub fn target_acc(&self) -> f64 {
        self.mean_over_targets(|t| t.best)
    }

    pub fn final_target_acc(&self) -> f64 {
        self.mean_over_targets(|t| t.last)
    }

    pub fn swa_target_acc(&self) -> Option<f64> {
        self.swa_model.as_ref()?;
        Some(self.mean_over_targets(|t| t.swa.unwrap_or(f64::NAN)))
    }

    pub fn reported_acc(&self) -> f64 {
        self.mean_over_targets(TargetScore::reported)
    }
}

/// Generates the data and trains under `cfg.protocol`.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let ds = generate(&cfg.data, cfg.seeds.data)?;
    let (source, held_out) = match cfg.protocol {
        Protocol::LeaveOneOut => leave_one_domain_out(&ds, cfg.target_domain)?,
        Protocol::SingleSource => single_source(&ds, cfg.source_domain)?,
    };
    train_on(cfg, &source, &held_out)
}

/// Trains on `source` (split into train/val) and scores every domain of `held_out`.
pub fn train_on(
    cfg: &TrainConfig,
    source: &DomainDataset,
    held_out: &DomainDataset,
) -> Result<TrainResult> {
    cfg.validate()?;
    let (train_set, val_set) = split_train_val(source, cfg.train_fraction, split_seed(cfg.seeds.data))?;
    let source_domains = train_set.domains_present();
    let held_out_domains = held_out.domains_present();
    if let Some(d) = source_domains.intersection(&held_out_domains).next() {
        return Err(Error::Contract(format!("domain {d} is both a source and a target")));
    }

    let mut model = Model::init(cfg.model_config())?;
    let mut sampler = BatchSampler::new(&train_set, &source_domains, cfg.batch_size)?;
    let spe = sampler.steps_per_epoch();
    let mut batch_rng = stream(cfg.seeds.train, BATCH_STREAM);
    let mut pair_rng = stream(cfg.seeds.train, PAIR_STREAM);
    let mut swa = if cfg.swa {
        Some(SwaState::epoch_end(model.params(), spe, cfg.epochs)?)
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * spe);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut target_rows_seen = 0;
    let mut bad_streak = 0;
    let mut global = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut sum = LossBreakdown::default();
        let mut good_steps = 0usize;
        for _ in 0..spe {
            let batch = sampler.next_batch(&train_set, &mut batch_rng);
            let target_rows = batch.domains.iter().filter(|d| held_out_domains.contains(d)).count();
            target_rows_seen += target_rows;
            let draw = BatchDraw::sample(&batch.labels, &cfg.selfreg, &mut pair_rng)?;

            let mut g = ModelGraph::new(&model);
            let (total, loss) = objective(&mut g, &batch.x, &batch.labels, &cfg.selfreg, &draw, None)?;
            let grads = if loss.all_finite() {
                Some(g.backward(total)?).filter(ParamGrads::all_finite)
            } else {
                None
            };
            drop(g);
            steps.push(StepRecord {
                epoch,
                step: global,
                loss,
                target_rows,
            });
            match grads {
                Some(grads) => {
                    bad_streak = 0;
                    sgd_step(&mut model, grads, lr)?;
                    accumulate(&mut sum, &loss);
                    good_steps += 1;
                }
                None => {
                    bad_streak += 1;
                    if bad_streak >= 3 {
                        return Err(Error::Divergence {
                            epoch,
                            step: global,
                            last_good_epoch: best.as_ref().map(|b| b.0),
                        });
                    }
                }
            }
            if let Some(s) = swa.as_mut() {
                s.observe(global, model.params())?;
            }
            global += 1;
        }

        let val_acc = evaluate(&model, &val_set)?.accuracy;
        let mut dist_rng = stream(cfg.seeds.train ^ epoch as u64, DISTANCE_STREAM);
        let dist = distance_report(&model, &val_set, cfg.distance_sample_cap, &mut dist_rng)?;
        let n = good_steps.max(1) as f64;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            l_c: sum.l_c / n,
            l_ind_feat: sum.l_ind_feat / n,
            l_hdl_feat: sum.l_hdl_feat / n,
            l_feature: sum.l_feature / n,
            l_logit: sum.l_logit / n,
            l_selfreg: sum.l_selfreg / n,
            l_total: sum.l_total / n,
            val_acc,
            feat_dist: dist.feature,
            logit_dist: dist.logit,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, model.clone()));
        }
    }

    let (best_epoch, best_val_acc, best_model) = best.expect("at least one epoch");
    let (swa_model, swa_snapshots) = match swa {
        Some(s) => {
            let mut m = model.clone();
            m.set_params(s.weights()?)?;
            (Some(m), s.snapshot_count())
        }
        None => (None, 0),
    };
    let targets = held_out_domains
        .iter()
        .map(|&d| {
            let part = held_out.filter_domains(|x| x == d);
            Ok(TargetScore {
                domain: d,
                best: evaluate(&best_model, &part)?.accuracy,
                last: evaluate(&model, &part)?.accuracy,
                swa: swa_model
                    .as_ref()
                    .map(|m| evaluate(m, &part).map(|e| e.accuracy))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrainResult {
        metrics,
        steps,
        steps_per_epoch: spe,
        best_epoch,
        best_val_acc,
        best_model,
        final_model: model,
        swa_model,
        swa_snapshots,
        targets,
        target_rows_seen,
    })
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.l_c += x.l_c;
    sum.l_ind_feat += x.l_ind_feat;
    sum.l_hdl_feat += x.l_hdl_feat;
    sum.l_ind_logit += x.l_ind_logit;
    sum.l_hdl_logit += x.l_hdl_logit;
    sum.l_feature += x.l_feature;
    sum.l_logit += x.l_logit;
    sum.l_selfreg += x.l_selfreg;
    sum.l_total += x.l_total;
}

pub fn write_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let table_err = |e: csv::Error| Error::Table {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(table_err)?;
    for m in metrics {
        w.serialize(m).map_err(table_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let table_err = |e: csv::Error| Error::Table {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(table_err)?;
    r.deserialize().map(|row| row.map_err(table_err)).collect()
}

/// Toggle settings for one ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub selfreg: SelfRegConfig,
    pub swa: bool,
}

/// Rows G to B: baseline, then logit loss, feature loss, mixup, CDPL and SWA
/// added one at a time on top of `base`.
pub fn ablation_ladder(base: &SelfRegConfig) -> Vec<AblationRow> {
    let off = SelfRegConfig {
        lambda_feature: base.lambda_feature,
        lambda_logit: base.lambda_logit,
        alpha: base.alpha,
        beta: base.beta,
        independent_gamma: base.independent_gamma,
        logit_cdpl: base.logit_cdpl,
        ..SelfRegConfig::erm()
    };
    let logit = SelfRegConfig {
        logit_loss: true,
        clipping: base.clipping,
        ..off.clone()
    };
    let feature = SelfRegConfig {
        feature_loss: true,
        ..logit.clone()
    };
    let mixup = SelfRegConfig {
        mixup: true,
        ..feature.clone()
    };
    let cdpl = SelfRegConfig {
        cdpl: true,
        ..mixup.clone()
    };
    let row = |name: &str, selfreg: &SelfRegConfig, swa| AblationRow {
        name: name.into(),
        selfreg: selfreg.clone(),
        swa,
    };
    vec![
        row("G baseline", &off, false),
        row("F +logit", &logit, false),
        row("E +feature", &feature, false),
        row("D +mixup", &mixup, false),
        row("C +cdpl", &cdpl, false),
        row("B +swa", &cdpl, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Per seed: reported accuracy averaged over the target domains.
    pub per_seed: Vec<f64>,
    /// Per target domain: reported accuracy averaged over seeds.
    pub per_target: Vec<(usize, f64)>,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    /// Per seed: final-epoch validation feature and logit distances, averaged over targets.
    pub feat_dist: Vec<f64>,
    pub logit_dist: Vec<f64>,
    pub target_rows_seen: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Config for one run of a protocol cell: seed entry `s` sets every seed to `s`.
pub fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seeds: Seeds::all(seed),
        ..base.clone()
    }
}

/// Trains every `(row, seed, target)` combination in parallel.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    targets: &[usize],
) -> Result<Vec<AblationSummary>> {
    if rows.is_empty() || seeds.is_empty() || targets.is_empty() {
        return Err(Error::config("ablation", "needs at least one row, seed and target"));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..seeds.len()).flat_map(move |s| (0..targets.len()).map(move |t| (r, s, t))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(r, s, t)| {
            let cfg = TrainConfig {
                selfreg: rows[r].selfreg.clone(),
                swa: rows[r].swa,
                protocol: Protocol::LeaveOneOut,
                target_domain: targets[t],
                ..seeded(base, seeds[s])
            };
            train(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let at = |r: usize, s: usize, t: usize| &results[(r * seeds.len() + s) * targets.len() + t];
    let nt = targets.len() as f64;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let over_targets = |s: usize, f: &dyn Fn(&TrainResult) -> f64| {
                (0..targets.len()).map(|t| f(at(r, s, t))).sum::<f64>() / nt
            };
            let per_seed: Vec<f64> = (0..seeds.len()).map(|s| over_targets(s, &|x| x.reported_acc())).collect();
            let (mean, std) = mean_std(&per_seed);
            let last = |x: &TrainResult| *x.metrics.last().expect("epochs >= 1");
            AblationSummary {
                name: row.name.clone(),
                seeds: seeds.to_vec(),
                per_target: targets
                    .iter()
                    .enumerate()
                    .map(|(t, &d)| {
                        let v: Vec<f64> = (0..seeds.len()).map(|s| at(r, s, t).reported_acc()).collect();
                        (d, mean_std(&v).0)
                    })
                    .collect(),
                mean,
                std,
                feat_dist: (0..seeds.len()).map(|s| over_targets(s, &|x| last(x).feat_dist)).collect(),
                logit_dist: (0..seeds.len()).map(|s| over_targets(s, &|x| last(x).logit_dist)).collect(),
                target_rows_seen: (0..seeds.len())
                    .flat_map(|s| (0..targets.len()).map(move |t| (s, t)))
                    .map(|(s, t)| at(r, s, t).target_rows_seen)
                    .sum(),
                per_seed,
            }
        })
        .collect())
}

/// Source-by-target accuracies with the diagonal left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleSourceMatrix {
    pub cells: Vec<Vec<Option<f64>>>,
    /// Mean over targets for each source.
    pub row_avg: Vec<f64>,
    /// Mean over sources for each target.
    pub col_avg: Vec<f64>,
    pub overall: f64,
    pub target_rows_seen: usize,
}

impl SingleSourceMatrix {
    pub fn from_cells(cells: Vec<Vec<Option<f64>>>, target_rows_seen: usize) -> Self {
        let n = cells.len();
        let row_avg = cells
            .iter()
            .map(|row| row.iter().flatten().sum::<f64>() / (n - 1) as f64)
            .collect();
        let col_avg = (0..n)
            .map(|t| cells.iter().filter_map(|row| row[t]).sum::<f64>() / (n - 1) as f64)
            .collect();
        let overall = cells.iter().flatten().flatten().sum::<f64>() / (n * (n - 1)) as f64;
        Self {
            cells,
            row_avg,
            col_avg,
            overall,
            target_rows_seen,
        }
    }
}

/// One run per source domain, scored on every other domain.
pub fn run_single_source(cfg: &TrainConfig) -> Result<SingleSourceMatrix> {
    cfg.validate()?;
    let n = cfg.data.num_domains;
    let ds = generate(&cfg.data, cfg.seeds.data)?;
    let runs = (0..n)
        .into_par_iter()
        .map(|s| {
            let (src, rest) = single_source(&ds, s)?;
            let run_cfg = TrainConfig {
                protocol: Protocol::SingleSource,
                source_domain: s,
                ..cfg.clone()
            };
            train_on(&run_cfg, &src, &rest)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = vec![vec![None; n]; n];
    for (s, run) in runs.iter().enumerate() {
        for t in &run.targets {
            cells[s][t.domain] = Some(t.reported());
        }
    }
    let seen = runs.iter().map(|r| r.target_rows_seen).sum();
    Ok(SingleSourceMatrix::from_cells(cells, seen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 0.01,
            lr_decay_epoch: 2,
            data: DataSpec {
                num_classes: 3,
                num_domains: 3,
                samples_per_cell: 30,
                input_dim: 4,
                ..DataSpec::default()
            },
            model: ArchConfig {
                hidden_dims: vec![8],
                feat_dim: 6,
                cdpl_hidden_dim: 5,
            },
            distance_sample_cap: 200,
            ..TrainConfig::default()
        }
    }

    fn dataset(rows: &[(Vec<f64>, usize)], num_classes: usize) -> DomainDataset {
        DomainDataset {
            input_dim: rows[0].0.len(),
            num_classes,
            num_domains: 1,
            spec_hash: String::new(),
            examples: rows
                .iter()
                .map(|(x, c)| Example {
                    x: x.clone(),
                    class: *c,
                    domain: 0,
                })
                .collect(),
        }
    }

    /// Linear model whose features and logits equal the input.
    fn identity_model(k: usize) -> Model {
        let cfg = ModelConfig {
            input_dim: k,
            hidden_dims: vec![],
            feat_dim: k,
            cdpl_hidden_dim: 2,
            num_classes: k,
            init_seed: 0,
        };
        let mut m = Model::init(cfg).unwrap();
        for name in ["featurizer.0.weight", "classifier.weight"] {
            let w = m.params_mut().get_mut(name).unwrap();
            w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % (k + 1) == 0 { 1.0 } else { 0.0 });
        }
        m
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.004);
        assert_eq!(lr_at(23, &cfg), 0.004);
        assert!((lr_at(24, &cfg) - 0.0004).abs() < 1e-18);
        let swa = TrainConfig { swa: true, ..cfg };
        assert!((0..30).all(|e| lr_at(e, &swa) == 0.004));
    }

    #[test]
    fn sgd_arithmetic() {
        let cfg = ModelConfig {
            input_dim: 1,
            hidden_dims: vec![],
            feat_dim: 1,
            cdpl_hidden_dim: 1,
            num_classes: 2,
            init_seed: 3,
        };
        let mut m = Model::init(cfg).unwrap();
        let before = m.clone();
        let zeros = |m: &Model| ParamGrads {
            entries: m.params().iter().map(|(_, t)| vec![0.5; t.len()]).collect(),
        };
        sgd_step(&mut m, zeros(&before), 0.0).unwrap();
        assert_eq!(m, before);

        m.params_mut().get_mut("featurizer.0.weight").unwrap().data_mut()[0] = 1.0;
        let mut grads = zeros(&m);
        grads.entries[0] = vec![2.0];
        sgd_step(&mut m, grads, 0.1).unwrap();
        assert!((m.params().get("featurizer.0.weight").unwrap().data()[0] - 0.8).abs() < 1e-15);

        let mut short = zeros(&m);
        short.entries.pop();
        assert!(matches!(sgd_step(&mut m, short, 0.1), Err(Error::Contract(_))));
        let mut wrong = zeros(&m);
        wrong.entries[0].push(1.0);
        assert!(matches!(sgd_step(&mut m, wrong, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn one_small_step_decreases_a_quadratic() {
        let mut m = Model::init(tiny().model_config()).unwrap();
        let x = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let loss = |m: &Model| {
            let mut g = ModelGraph::new(m);
            let xv = g.input(x.clone());
            let z = g.featurize(xv).unwrap();
            let zero = g.input(Tensor::zeros(vec![4, 6]));
            let l = g.tape_mut().squared_l2_rowmean(z, zero).unwrap();
            let v = g.value(l).item().unwrap();
            (v, g.backward(l).unwrap())
        };
        let (before, grads) = loss(&m);
        sgd_step(&mut m, grads, 1e-3).unwrap();
        assert!(loss(&m).0 < before);
    }

    #[test]
    fn chance_and_perfect_accuracy() {
        let rows: Vec<(Vec<f64>, usize)> = (0..25)
            .map(|i| {
                let mut x = vec![0.0; 5];
                x[i % 5] = 1.0;
                (x, i % 5)
            })
            .collect();
        let ds = dataset(&rows, 5);
        let mut constant = identity_model(5);
        constant.params_mut().tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let ev = evaluate(&constant, &ds).unwrap();
        assert_eq!(ev.accuracy, 0.2);
        assert_eq!(ev.per_class, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0), Some(0.0)]);
        assert_eq!(evaluate(&identity_model(5), &ds).unwrap().accuracy, 1.0);
        let empty = DomainDataset {
            examples: vec![],
            ..ds
        };
        assert!(matches!(evaluate(&constant, &empty), Err(Error::Config { .. })));
    }

    #[test]
    fn accuracy_matches_recount() {
        let cfg = tiny();
        let ds = generate(&cfg.data, 5).unwrap();
        let model = Model::init(cfg.model_config()).unwrap();
        let ev = evaluate(&model, &ds).unwrap();
        let mut correct = 0;
        for e in &ds.examples {
            let x = Tensor::matrix(1, 4, e.x.clone()).unwrap();
            let (_, logits) = model.predict(&x).unwrap();
            let row = logits.row(0);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best == e.class);
        }
        assert_eq!(ev.correct, correct);
        assert_eq!(ev.accuracy, correct as f64 / ds.len() as f64);
    }

    #[test]
    fn distance_examples() {
        let m = identity_model(2);
        let mut rng = stream(0, DISTANCE_STREAM);
        let ds = dataset(&[(vec![0.0, 0.0], 0), (vec![3.0, 0.0], 0), (vec![5.0, 5.0], 1)], 2);
        let r = distance_report(&m, &ds, 100, &mut rng).unwrap();
        assert_eq!((r.feature, r.logit, r.pairs, r.exhaustive), (3.0, 3.0, 1, true));

        let dup = dataset(&[(vec![1.0, 2.0], 0), (vec![1.0, 2.0], 0), (vec![-1.0, 4.0], 1), (vec![-1.0, 4.0], 1)], 2);
        assert_eq!(distance_report(&m, &dup, 100, &mut rng).unwrap().feature, 0.0);

        let lonely = dataset(&[(vec![0.0, 0.0], 0), (vec![1.0, 0.0], 1)], 2);
        assert!(matches!(distance_report(&m, &lonely, 100, &mut rng), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn sampled_distance_tracks_enumeration() {
        let cfg = TrainConfig {
            data: DataSpec {
                samples_per_cell: 200 / 9 + 1,
                ..tiny().data
            },
            ..tiny()
        };
        let full = generate(&cfg.data, 1).unwrap();
        let ds = DomainDataset {
            examples: full.examples[..200].to_vec(),
            ..full
        };
        let model = Model::init(cfg.model_config()).unwrap();
        let mut rng = stream(1, DISTANCE_STREAM);
        let exact = distance_report(&model, &ds, usize::MAX, &mut rng).unwrap();
        assert!(exact.exhaustive);
        let sampled = distance_report(&model, &ds, 3000, &mut rng).unwrap();
        assert!(!sampled.exhaustive);
        assert!((sampled.feature / exact.feature - 1.0).abs() < 0.05);
        assert!((sampled.logit / exact.logit - 1.0).abs() < 0.05);
    }

    #[test]
    fn training_is_reproducible_and_isolated() {
        let cfg = tiny();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.target_rows_seen, 0);
        assert_eq!(a.targets.len(), 1);
        assert_eq!(a.targets[0].domain, 0);
        assert_eq!(a.metrics.len(), 3);
        let c = train(&TrainConfig {
            seeds: Seeds::all(1),
            ..cfg
        })
        .unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn best_checkpoint_is_earliest_max_validation_epoch() {
        let r = train(&TrainConfig { epochs: 4, ..tiny() }).unwrap();
        let max = r.metrics.iter().map(|m| m.val_acc).fold(f64::MIN, f64::max);
        let first = r.metrics.iter().position(|m| m.val_acc == max).unwrap();
        assert_eq!(r.best_epoch, first);
        assert_eq!(r.best_val_acc, max);
    }

    #[test]
    fn erm_steps_are_pure_cross_entropy() {
        let cfg = TrainConfig {
            selfreg: SelfRegConfig::erm(),
            ..tiny()
        };
        let r = train(&cfg).unwrap();
        for s in &r.steps {
            assert_eq!(s.loss.l_total.to_bits(), s.loss.l_c.to_bits());
            assert_eq!(s.loss.l_selfreg, 0.0);
        }
    }

    #[test]
    fn swa_run_keeps_lr_and_counts_snapshots() {
        let cfg = TrainConfig {
            swa: true,
            ..tiny()
        };
        let r = train(&cfg).unwrap();
        assert!(r.metrics.iter().all(|m| m.lr == cfg.lr));
        assert_eq!(r.swa_snapshots, cfg.epochs);
        assert!(r.swa_model.is_some() && r.targets[0].swa.is_some());
        let plain = train(&tiny()).unwrap();
        assert!(plain.swa_model.is_none());
        assert_eq!(plain.metrics[2].lr, 0.01 * 0.1);
    }

    #[test]
    fn huge_learning_rate_aborts() {
        let cfg = TrainConfig {
            lr: 1e200,
            ..tiny()
        };
        assert!(matches!(train(&cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |cfg: TrainConfig| match cfg.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut c = TrainConfig::default();
        c.selfreg.lambda_feature = -1.0;
        assert_eq!(field(c), "selfreg.lambda_feature");
        let mut c = TrainConfig::default();
        c.model.hidden_dims = vec![4, 0];
        assert_eq!(field(c), "model.hidden_dims[1]");
        let mut c = TrainConfig::default();
        c.data.num_domains = 1;
        assert_eq!(field(c), "data.num_domains");
        assert_eq!(field(TrainConfig { target_domain: 9, ..TrainConfig::default() }), "target_domain");
        assert_eq!(field(TrainConfig { lr_decay_epoch: 31, ..TrainConfig::default() }), "lr_decay_epoch");
    }

    #[test]
    fn ladder_adds_one_component_per_row() {
        let rows = ablation_ladder(&SelfRegConfig::default());
        assert_eq!(rows.len(), 6);
        assert!(!rows[0].selfreg.is_active());
        let flags = |r: &AblationRow| {
            [r.selfreg.logit_loss, r.selfreg.feature_loss, r.selfreg.mixup, r.selfreg.cdpl, r.swa]
                .iter()
                .filter(|&&b| b)
                .count()
        };
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(flags(r), i);
        }
        assert_eq!(rows[5].selfreg, SelfRegConfig::default());
    }

    #[test]
    fn ablation_aggregates_recompute() {
        let base = TrainConfig { epochs: 2, ..tiny() };
        let rows = ablation_ladder(&base.selfreg);
        let table = run_ablation(&base, &rows[..2], &[0, 1, 2], &[0, 2]).unwrap();
        assert_eq!(table.len(), 2);
        // baseline row equals standalone ERM runs
        for (s, seed) in [0u64, 1, 2].iter().enumerate() {
            let acc: f64 = [0, 2]
                .iter()
                .map(|&t| {
                    let cfg = TrainConfig {
                        selfreg: SelfRegConfig::erm(),
                        target_domain: t,
                        ..seeded(&base, *seed)
                    };
                    train(&cfg).unwrap().reported_acc()
                })
                .sum::<f64>()
                / 2.0;
            assert_eq!(table[0].per_seed[s], acc);
        }
        for row in &table {
            let v = &row.per_seed;
            let m = (v[0] + v[1] + v[2]) / 3.0;
            let sd = (((v[0] - m).powi(2) + (v[1] - m).powi(2) + (v[2] - m).powi(2)) / 2.0).sqrt();
            assert!((row.mean - m).abs() < 1e-15);
            assert!((row.std - sd).abs() < 1e-15);
            assert_eq!(row.target_rows_seen, 0);
        }
        assert!(run_ablation(&base, &[], &[0], &[0]).is_err());
    }

    #[test]
    fn single_source_matrix_shape_and_averages() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            data: DataSpec {
                num_domains: 4,
                ..tiny().data
            },
            ..tiny()
        };
        let m = run_single_source(&cfg).unwrap();
        assert_eq!(m.cells.len(), 4);
        assert_eq!(m.cells.iter().flatten().flatten().count(), 12);
        for s in 0..4 {
            assert!(m.cells[s][s].is_none());
            let row: f64 = (0..4).filter(|&t| t != s).map(|t| m.cells[s][t].unwrap()).sum();
            assert_eq!(m.row_avg[s], row / 3.0);
            let col: f64 = (0..4).filter(|&t| t != s).map(|t| m.cells[t][s].unwrap()).sum();
            assert_eq!(m.col_avg[s], col / 3.0);
        }
        assert_eq!(m.target_rows_seen, 0);
    }

    #[test]
    fn metrics_round_trip() {
        let r = train(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&r.metrics, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "epoch,lr,l_c,l_ind_feat,l_hdl_feat,l_feature,l_logit,l_selfreg,l_total,val_acc,feat_dist,logit_dist\n"
        ));
        assert_eq!(read_metrics(&path).unwrap(), r.metrics);
    }
}
