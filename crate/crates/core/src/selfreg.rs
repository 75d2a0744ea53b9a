//! Positive-pair regularization: same-class pairing, the individualized and
//! heterogeneous in-batch dissimilarity losses, mixup and loss clipping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{CdplHead, ModelGraph};

/// For each row `i`, the index of a same-class partner row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairAssignment {
    pair_index: Vec<usize>,
}

impl PairAssignment {
    /// Checks the same-class constraint and the per-class bijection.
    pub fn new(pair_index: Vec<usize>, labels: &[usize]) -> Result<Self> {
        if pair_index.len() != labels.len() {
            return Err(Error::dim(
                "pair_assignment",
                format!("{} pairs for {} labels", pair_index.len(), labels.len()),
            ));
        }
        let mut hit = vec![false; labels.len()];
        for (i, &j) in pair_index.iter().enumerate() {
            if j >= labels.len() || labels[j] != labels[i] {
                return Err(Error::Contract(format!("row {i} paired with row {j} of another class")));
            }
            if std::mem::replace(&mut hit[j], true) {
                return Err(Error::Contract(format!("row {j} is the partner of two rows")));
            }
        }
        Ok(Self { pair_index })
    }

    pub fn pair_index(&self) -> &[usize] {
        &self.pair_index
    }

    pub fn len(&self) -> usize {
        self.pair_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_index.is_empty()
    }
}

/// Shuffles each class group independently; a singleton pairs with itself.
pub fn build_pairs<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> PairAssignment {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut pair_index = vec![0; labels.len()];
    for members in groups.values() {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        for (&i, &j) in members.iter().zip(&shuffled) {
            pair_index[i] = j;
        }
    }
    PairAssignment { pair_index }
}

pub fn sample_gamma<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::config("alpha/beta", format!("invalid Beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng))
}

/// `(1/N) sum_i ||z_i - u_pair(i)||^2` where `u` is the projected batch.
pub fn loss_ind(tape: &mut Tape, z: Var, u: Var, pairs: &PairAssignment) -> Result<Var> {
    let partner = tape.gather_rows(u, pairs.pair_index())?;
    tape.squared_l2_rowmean(z, partner)
}

/// `gamma * u_i + (1 - gamma) * u_pair(i)` for every row.
pub fn mixup_rows(tape: &mut Tape, u: Var, pairs: &PairAssignment, gamma: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("mixup weight {gamma} outside [0, 1]")));
    }
    let partner = tape.gather_rows(u, pairs.pair_index())?;
    tape.lerp(u, partner, gamma)
}

/// `(1/N) sum_i ||z_i - u_bar_i||^2`.
pub fn loss_hdl(tape: &mut Tape, z: Var, u_bar: Var) -> Result<Var> {
    tape.squared_l2_rowmean(z, u_bar)
}

/// `min(1, l_c)`.
pub fn clip_factor(l_c: f64) -> f64 {
    l_c.min(1.0)
}

pub fn combine(lambda_feature: f64, lambda_logit: f64, l_feature: f64, l_logit: f64) -> f64 {
    lambda_feature * l_feature + lambda_logit * l_logit
}

pub fn total_loss(l_c: f64, l_selfreg: f64) -> Result<f64> {
    if !l_c.is_finite() || !l_selfreg.is_finite() {
        return Err(Error::Numeric("total loss received a non-finite component"));
    }
    Ok(l_c + l_selfreg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRegConfig {
    pub lambda_feature: f64,
    pub lambda_logit: f64,
    pub alpha: f64,
    pub beta: f64,
    pub clipping: bool,
    pub mixup: bool,
    pub cdpl: bool,
    pub feature_loss: bool,
    pub logit_loss: bool,
    /// Project logits through their own head before pairing; raw logits otherwise.
    pub logit_cdpl: bool,
    /// Draw a second `gamma` for the mixup weight instead of sharing one.
    pub independent_gamma: bool,
}

impl Default for SelfRegConfig {
    fn default() -> Self {
        Self {
            lambda_feature: 0.3,
            lambda_logit: 1.0,
            alpha: 0.5,
            beta: 0.5,
            clipping: true,
            mixup: true,
            cdpl: true,
            feature_loss: true,
            logit_loss: true,
            logit_cdpl: true,
            independent_gamma: false,
        }
    }
}

impl SelfRegConfig {
    /// Every regularizer component off: plain cross-entropy.
    pub fn erm() -> Self {
        Self {
            clipping: false,
            mixup: false,
            cdpl: false,
            feature_loss: false,
            logit_loss: false,
            logit_cdpl: false,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.feature_loss || self.logit_loss
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_feature", self.lambda_feature),
            ("lambda_logit", self.lambda_logit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Randomness consumed by one batch: the pairing and the mixing coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraw {
    pub pairs: PairAssignment,
    /// Weight of `L_ind` against `L_hdl`.
    pub gamma: f64,
    /// Mixup coefficient; equals `gamma` unless drawn independently.
    pub mix_weight: f64,
}

impl BatchDraw {
    /// Consumes no randomness when the regularizer is inactive.
    pub fn sample<R: Rng + ?Sized>(labels: &[usize], cfg: &SelfRegConfig, rng: &mut R) -> Result<Self> {
        if !cfg.is_active() {
            return Ok(Self {
                pairs: PairAssignment {
                    pair_index: (0..labels.len()).collect(),
                },
                gamma: 1.0,
                mix_weight: 1.0,
            });
        }
        let pairs = build_pairs(labels, rng);
        let gamma = sample_gamma(cfg.alpha, cfg.beta, rng)?;
        let mix_weight = if cfg.independent_gamma {
            sample_gamma(cfg.alpha, cfg.beta, rng)?
        } else {
            gamma
        };
        Ok(Self {
            pairs,
            gamma,
            mix_weight,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_ind_feat: f64,
    pub l_hdl_feat: f64,
    pub l_ind_logit: f64,
    pub l_hdl_logit: f64,
    /// Clipped feature-level loss.
    pub l_feature: f64,
    /// Clipped logit-level loss.
    pub l_logit: f64,
    pub l_selfreg: f64,
    pub l_total: f64,
    pub gamma_used: f64,
    pub clip: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.l_c,
            self.l_ind_feat,
            self.l_hdl_feat,
            self.l_ind_logit,
            self.l_hdl_logit,
            self.l_feature,
            self.l_logit,
            self.l_selfreg,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

struct Level {
    loss: Var,
    ind: f64,
    hdl: f64,
    value: f64,
}

fn level_loss(
    g: &mut ModelGraph<'_>,
    head: Option<CdplHead>,
    x: Var,
    cfg: &SelfRegConfig,
    draw: &BatchDraw,
    clip: f64,
) -> Result<Level> {
    let u = match head {
        Some(h) => g.cdpl(h, x)?,
        None => x,
    };
    let tape = g.tape_mut();
    let ind = loss_ind(tape, x, u, &draw.pairs)?;
    let ind_value = tape.value(ind).item()?;
    let (mixed, hdl_value) = if cfg.mixup {
        let u_bar = mixup_rows(tape, u, &draw.pairs, draw.mix_weight)?;
        let hdl = loss_hdl(tape, x, u_bar)?;
        let hdl_value = tape.value(hdl).item()?;
        (tape.lerp(ind, hdl, draw.gamma)?, hdl_value)
    } else {
        (ind, 0.0)
    };
    let loss = tape.scale(mixed, clip);
    let value = tape.value(loss).item()?;
    Ok(Level {
        loss,
        ind: ind_value,
        hdl: hdl_value,
        value,
    })
}

/// Records `L_c + L_SelfReg` on the graph and returns it with its breakdown.
///
/// The clip factor is a constant on the tape. `clip_override` replaces
/// `min(1, L_c)` so finite-difference probes can hold it fixed.
pub fn selfreg_loss(
    g: &mut ModelGraph<'_>,
    z: Var,
    logits: Var,
    l_c: Var,
    cfg: &SelfRegConfig,
    draw: &BatchDraw,
    clip_override: Option<f64>,
) -> Result<(Var, LossBreakdown)> {
    let l_c_value = g.value(l_c).item()?;
    let clip = match clip_override {
        Some(c) => c,
        None if cfg.clipping => clip_factor(l_c_value),
        None => 1.0,
    };
    let mut out = LossBreakdown {
        l_c: l_c_value,
        gamma_used: draw.gamma,
        clip,
        ..LossBreakdown::default()
    };
    let mut terms = Vec::new();
    if cfg.feature_loss {
        let head = cfg.cdpl.then_some(CdplHead::Feature);
        let lv = level_loss(g, head, z, cfg, draw, clip)?;
        out.l_ind_feat = lv.ind;
        out.l_hdl_feat = lv.hdl;
        out.l_feature = lv.value;
        terms.push(g.tape_mut().scale(lv.loss, cfg.lambda_feature));
    }
    if cfg.logit_loss {
        let head = (cfg.cdpl && cfg.logit_cdpl).then_some(CdplHead::Logit);
        let lv = level_loss(g, head, logits, cfg, draw, clip)?;
        out.l_ind_logit = lv.ind;
        out.l_hdl_logit = lv.hdl;
        out.l_logit = lv.value;
        terms.push(g.tape_mut().scale(lv.loss, cfg.lambda_logit));
    }
    let mut total = l_c;
    if let Some((&first, rest)) = terms.split_first() {
        let tape = g.tape_mut();
        let mut reg = first;
        for &t in rest {
            reg = tape.add(reg, t)?;
        }
        out.l_selfreg = tape.value(reg).item()?;
        total = tape.add(l_c, reg)?;
    }
    out.l_total = g.value(total).item()?;
    Ok((total, out))
}

/// Full per-batch objective: featurize, classify, cross-entropy, regularizer.
pub fn objective(
    g: &mut ModelGraph<'_>,
    x: &Tensor,
    labels: &[usize],
    cfg: &SelfRegConfig,
    draw: &BatchDraw,
    clip_override: Option<f64>,
) -> Result<(Var, LossBreakdown)> {
    let input = g.input(x.clone());
    let z = g.featurize(input)?;
    let logits = g.classify(z)?;
    let l_c = g.cross_entropy(logits, labels)?;
    selfreg_loss(g, z, logits, l_c, cfg, draw, clip_override)
}
