//! Featurizer, classifier and the two class-specific domain perturbation
//! (CDPL) projection heads, all expressed over the autodiff tape.
//!
//! Parameter layout (weights are stored `fan_in x fan_out`, so a layer is `x W + b`):
//!
//! | name                      | shape                    |
//! |---------------------------|--------------------------|
//! | `featurizer.{i}.weight`   | `[in_i, out_i]`          |
//! | `featurizer.{i}.bias`     | `[out_i]`                |
//! | `classifier.weight/bias`  | `[feat, C]`, `[C]`       |
//! | `cdpl_feature.*`          | feat -> hidden -> feat   |
//! | `cdpl_logit.*`            | C -> hidden -> C         |
//!
//! Each CDPL head is `fc1 -> bn -> relu -> fc2`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, BN_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feat_dim: usize,
    pub cdpl_hidden_dim: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("feat_dim", self.feat_dim),
            ("cdpl_hidden_dim", self.cdpl_hidden_dim),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("hidden_dims[{i}]"), "must be >= 1"));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        let widths = self.hidden_dims.iter().chain(std::iter::once(&self.feat_dim));
        for (i, &w) in widths.enumerate() {
            out.push((format!("featurizer.{i}.weight"), vec![fan_in, w]));
            out.push((format!("featurizer.{i}.bias"), vec![w]));
            fan_in = w;
        }
        out.push(("classifier.weight".into(), vec![self.feat_dim, self.num_classes]));
        out.push(("classifier.bias".into(), vec![self.num_classes]));
        for head in [CdplHead::Feature, CdplHead::Logit] {
            let outer = match head {
                CdplHead::Feature => self.feat_dim,
                CdplHead::Logit => self.num_classes,
            };
            let h = self.cdpl_hidden_dim;
            let p = head.prefix();
            out.push((format!("{p}.fc1.weight"), vec![outer, h]));
            out.push((format!("{p}.fc1.bias"), vec![h]));
            out.push((format!("{p}.bn.gamma"), vec![h]));
            out.push((format!("{p}.bn.beta"), vec![h]));
            out.push((format!("{p}.fc2.weight"), vec![h, outer]));
            out.push((format!("{p}.fc2.bias"), vec![outer]));
        }
        out
    }
}

/// Which projection head to run: on features or on logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdplHead {
    Feature,
    Logit,
}

impl CdplHead {
    fn prefix(self) -> &'static str {
        match self {
            CdplHead::Feature => "cdpl_feature",
            CdplHead::Logit => "cdpl_logit",
        }
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Uniform init bound for a weight with the given fan-in.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Model {
    /// Fan-in scaled uniform weights, zero biases, unit BN scale.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let bound = init_bound(shape[0]);
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                } else if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                let t = Tensor::new(shape, data).expect("layout shape");
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config.layout();
        if params.len() != expected.len() {
            return Err(Error::dim(
                "model",
                format!("{} parameters, layout needs {}", params.len(), expected.len()),
            ));
        }
        for ((name, t), (ename, eshape)) in params.iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(Error::dim(
                    "model",
                    format!("parameter `{name}` {:?}, expected `{ename}` {eshape:?}", t.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters with a set of identical layout.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::dim("set_params", "parameter layout differs"));
        }
        self.params = params;
        Ok(())
    }

    /// Featurizer then classifier, without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = ModelGraph::frozen(self);
        let xv = g.input(x.clone());
        let z = g.featurize(xv)?;
        let logits = g.classify(z)?;
        Ok((g.tape.value(z).clone(), g.tape.value(logits).clone()))
    }
}

/// One forward pass of a [`Model`] recorded on a fresh tape.
pub struct ModelGraph<'m> {
    model: &'m Model,
    tape: Tape,
    vars: Vec<Var>,
}

impl<'m> ModelGraph<'m> {
    /// Parameters are registered as trainable leaves.
    pub fn new(model: &'m Model) -> Self {
        Self::bind(model, true)
    }

    /// Parameters are registered as constants.
    pub fn frozen(model: &'m Model) -> Self {
        Self::bind(model, false)
    }

    fn bind(model: &'m Model, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Self { model, tape, vars }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    fn param(&self, name: &str) -> Var {
        let idx = self
            .model
            .params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        self.vars[idx]
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let h = self.tape.matmul(x, w)?;
        self.tape.add_bias(h, b)
    }

    fn check_width(&self, op: &'static str, x: Var, expected: usize) -> Result<()> {
        let (_, w) = self.tape.value(x).dims2(op)?;
        if w != expected {
            return Err(Error::dim(op, format!("input width {w}, expected {expected}")));
        }
        Ok(())
    }

    /// `z = f_theta(x)`: linear layers with ReLU between them.
    pub fn featurize(&mut self, x: Var) -> Result<Var> {
        self.check_width("featurize", x, self.model.config.input_dim)?;
        let depth = self.model.config.hidden_dims.len() + 1;
        let mut h = x;
        for i in 0..depth {
            h = self.linear(h, &format!("featurizer.{i}"))?;
            if i + 1 < depth {
                h = self.tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn classify(&mut self, z: Var) -> Result<Var> {
        self.check_width("classify", z, self.model.config.feat_dim)?;
        self.linear(z, "classifier")
    }

    /// `Linear -> BatchNorm -> ReLU -> Linear`; output width equals input width.
    pub fn cdpl(&mut self, head: CdplHead, z: Var) -> Result<Var> {
        let width = match head {
            CdplHead::Feature => self.model.config.feat_dim,
            CdplHead::Logit => self.model.config.num_classes,
        };
        self.check_width("cdpl_forward", z, width)?;
        let p = head.prefix();
        let h = self.linear(z, &format!("{p}.fc1"))?;
        let gamma = self.param(&format!("{p}.bn.gamma"));
        let beta = self.param(&format!("{p}.bn.beta"));
        let h = self.tape.batch_norm(h, gamma, beta, BN_EPS)?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{p}.fc2"))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.tape.softmax_cross_entropy(logits, labels)
    }

    /// Gradients for every parameter, zero where the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let entries = self
            .vars
            .iter()
            .zip(self.model.params.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok(ParamGrads { entries })
    }
}

/// Flat gradients aligned with a model's [`ParamSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub entries: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn all_finite(&self) -> bool {
        self.entries.iter().flatten().all(|v| v.is_finite())
    }
}

const MAGIC: &[u8; 8] = b"SRGCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
}

/// Writes a self-describing checkpoint: magic, version, JSON header with the
/// model config, then `(name, shape, little-endian f64 data)` records.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
    })
    .expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against an expected config.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load_model(path)?;
    if model.config.layout() != expected.layout() {
        return Err(Error::dim(
            "load_model",
            format!(
                "checkpoint layout {:?} does not match expected config {:?}",
                model.config, expected
            ),
        ));
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                context: context.to_string(),
                reason: format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let fmt = |context: &str, reason: String| Error::Format {
        context: context.to_string(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(fmt("magic", "not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fmt("version", format!("unsupported format version {version}")));
    }
    let header_len = r.u32("header")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| fmt("header", e.to_string()))?;
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let slot = format!("record {i}");
        let name_len = r.u32(&slot)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &slot)?)
            .map_err(|e| fmt(&slot, e.to_string()))?
            .to_string();
        let ndim = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt(&name, "shape overflows".into()))?;
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| fmt(&name, e.to_string()))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(fmt(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }
    Model::from_parts(header.model, ParamSet::new(entries))
}
