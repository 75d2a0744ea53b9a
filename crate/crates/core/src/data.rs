//! Synthetic multi-domain classification data.
//!
//! Each class owns a Gaussian cluster; each domain applies a fixed rigid
//! transform (block rotation plus translation) and an intra-class noise
//! multiplier to freshly drawn cluster points. Labels never change under a
//! domain transform.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Transform applied to every base point of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Angle (radians) applied to every coordinate pair `(0,1), (2,3), ...`.
    pub rotation: f64,
    /// Length of the translation; its direction is drawn per domain from the seed.
    pub translation: f64,
    pub noise_mult: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        rotation: 0.0,
        translation: 0.0,
        noise_mult: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_cell: usize,
    pub input_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub class_separation: f64,
    /// Intra-class standard deviation before the domain noise multiplier.
    pub noise_scale: f64,
    /// Domain `d` is rotated by `d * rotation_step`.
    pub rotation_step: f64,
    /// Every domain is translated by this length along its own direction.
    pub translation_scale: f64,
    /// Domain `d` has noise multiplier `1 + d * noise_step`.
    pub noise_step: f64,
    /// Explicit per-domain transforms; overrides the three step fields.
    pub domains: Option<Vec<DomainShift>>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_domains: 4,
            samples_per_cell: 1000,
            input_dim: 8,
            class_separation: 1.0,
            noise_scale: 0.33,
            rotation_step: 0.6,
            translation_scale: 0.5,
            noise_step: 0.15,
            domains: None,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", "need at least 2 domains"));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::config("samples_per_cell", "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        for (field, v) in [
            ("class_separation", self.class_separation),
            ("noise_scale", self.noise_scale),
            ("translation_scale", self.translation_scale),
            ("noise_step", self.noise_step),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !self.rotation_step.is_finite() {
            return Err(Error::config("rotation_step", "must be finite"));
        }
        if let Some(domains) = &self.domains {
            if domains.len() != self.num_domains {
                return Err(Error::config(
                    "domains",
                    format!("{} entries for {} domains", domains.len(), self.num_domains),
                ));
            }
            for (i, d) in domains.iter().enumerate() {
                if !(d.noise_mult.is_finite() && d.noise_mult >= 0.0)
                    || !d.rotation.is_finite()
                    || !(d.translation.is_finite() && d.translation >= 0.0)
                {
                    return Err(Error::config(format!("domains[{i}]"), "invalid transform"));
                }
            }
        }
        Ok(())
    }

    pub fn domain_shift(&self, domain: usize) -> DomainShift {
        match &self.domains {
            Some(list) => list[domain],
            None => DomainShift {
                rotation: domain as f64 * self.rotation_step,
                translation: self.translation_scale,
                noise_mult: 1.0 + domain as f64 * self.noise_step,
            },
        }
    }

    /// Every domain is an untransformed copy of the base distribution.
    pub fn without_shift(mut self) -> Self {
        self.domains = Some(vec![DomainShift::IDENTITY; self.num_domains]);
        self
    }

    /// Hex SHA-256 of the canonical JSON encoding of `(spec, seed)`.
    pub fn hash(&self, seed: u64) -> String {
        let json = serde_json::to_vec(&serde_json::json!({ "spec": self, "seed": seed }))
            .expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub class: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub examples: Vec<Example>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub spec_hash: String,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn domains_present(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.domain).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for e in &self.examples {
            h[e.class] += 1;
        }
        h
    }

    fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            examples,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            spec_hash: self.spec_hash.clone(),
        }
    }

    /// Examples whose domain satisfies `keep`.
    pub fn filter_domains(&self, keep: impl Fn(usize) -> bool) -> Self {
        self.with_examples(
            self.examples
                .iter()
                .filter(|e| keep(e.domain))
                .cloned()
                .collect(),
        )
    }

    pub fn features(&self) -> Tensor {
        let data = self.examples.iter().flat_map(|e| e.x.iter().copied()).collect();
        Tensor::matrix(self.examples.len(), self.input_dim, data).expect("consistent widths")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.class).collect()
    }
}

fn rotate_pairs(x: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Draws class means, per-domain translation directions, then every
/// `(class, domain)` cell in domain-major order.
pub fn generate(spec: &DataSpec, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..d)
                .map(|_| spec.class_separation * normal(&mut rng))
                .collect()
        })
        .collect();
    let directions: Vec<Vec<f64>> = (0..spec.num_domains).map(|_| unit_vector(d, &mut rng)).collect();

    let mut examples =
        Vec::with_capacity(spec.num_classes * spec.num_domains * spec.samples_per_cell);
    for domain in 0..spec.num_domains {
        let shift = spec.domain_shift(domain);
        let sigma = spec.noise_scale * shift.noise_mult;
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..spec.samples_per_cell {
                let mut x: Vec<f64> = mean
                    .iter()
                    .map(|m| m + sigma * normal(&mut rng))
                    .collect();
                rotate_pairs(&mut x, shift.rotation);
                for (xi, ui) in x.iter_mut().zip(&directions[domain]) {
                    *xi += shift.translation * ui;
                }
                examples.push(Example { x, class, domain });
            }
        }
    }
    Ok(DomainDataset {
        examples,
        input_dim: d,
        num_classes: spec.num_classes,
        num_domains: spec.num_domains,
        spec_hash: spec.hash(seed),
    })
}

/// Stratified split: every `(class, domain)` cell keeps `round(ratio * n)`
/// examples for training and the rest for validation.
pub fn split_train_val(
    ds: &DomainDataset,
    ratio: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("val_ratio", format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, e) in ds.examples.iter().enumerate() {
        cells.entry((e.domain, e.class)).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for ((domain, class), mut idx) in cells {
        let n = idx.len();
        let n_train = (ratio * n as f64).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Split(format!(
                "cell (domain {domain}, class {class}) has {n} examples; ratio {ratio} leaves one side empty"
            )));
        }
        idx.shuffle(&mut rng);
        train_idx.extend_from_slice(&idx[..n_train]);
        val_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.examples[i].clone()).collect();
    Ok((ds.with_examples(pick(&train_idx)), ds.with_examples(pick(&val_idx))))
}

/// `(source, target)` where target is exactly the held-out domain.
pub fn leave_one_domain_out(
    ds: &DomainDataset,
    target_domain: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    if target_domain >= ds.num_domains {
        return Err(Error::config(
            "target_domain",
            format!("domain {target_domain} does not exist ({} domains)", ds.num_domains),
        ));
    }
    Ok((
        ds.filter_domains(|d| d != target_domain),
        ds.filter_domains(|d| d == target_domain),
    ))
}

/// `(source, rest)` where source is exactly one domain.
pub fn single_source(
    ds: &DomainDataset,
    source_domain: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    if source_domain >= ds.num_domains {
        return Err(Error::config(
            "source_domain",
            format!("domain {source_domain} does not exist ({} domains)", ds.num_domains),
        ));
    }
    Ok((
        ds.filter_domains(|d| d == source_domain),
        ds.filter_domains(|d| d != source_domain),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Epoch-wise sampling without replacement over the source-domain examples.
///
/// Each pass is a fresh shuffle; the trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(
        ds: &DomainDataset,
        source_domains: &BTreeSet<usize>,
        batch_size: usize,
    ) -> Result<Self> {
        if source_domains.is_empty() {
            return Err(Error::config("source_domains", "no source domain given"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let order: Vec<usize> = (0..ds.len())
            .filter(|&i| source_domains.contains(&ds.examples[i].domain))
            .collect();
        if order.len() < batch_size {
            return Err(Error::config(
                "batch_size",
                format!("batch of {batch_size} exceeds {} available examples", order.len()),
            ));
        }
        let cursor = order.len();
        Ok(Self {
            order,
            batch_size,
            cursor,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn next_batch(&mut self, ds: &DomainDataset, rng: &mut ChaCha8Rng) -> Batch {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        make_batch(ds, idx)
    }
}

pub fn make_batch(ds: &DomainDataset, idx: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(idx.len() * ds.input_dim);
    let mut labels = Vec::with_capacity(idx.len());
    let mut domains = Vec::with_capacity(idx.len());
    for &i in idx {
        let e = &ds.examples[i];
        data.extend_from_slice(&e.x);
        labels.push(e.class);
        domains.push(e.domain);
    }
    Batch {
        x: Tensor::matrix(idx.len(), ds.input_dim, data).expect("consistent widths"),
        labels,
        domains,
    }
}

/// Writes `x0..x{d-1},class,domain` rows after a `# spec_hash=` line.
pub fn write_table(ds: &DomainDataset, path: &Path) -> Result<()> {
    let table_err = |reason: String| Error::Table {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = Vec::new();
    writeln!(out, "# spec_hash={}", ds.spec_hash).expect("vec write");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header: Vec<String> = (0..ds.input_dim).map(|i| format!("x{i}")).collect();
        header.push("class".into());
        header.push("domain".into());
        w.write_record(&header).map_err(|e| table_err(e.to_string()))?;
        for e in &ds.examples {
            let mut rec: Vec<String> = e.x.iter().map(|v| format!("{v:?}")).collect();
            rec.push(e.class.to_string());
            rec.push(e.domain.to_string());
            w.write_record(&rec).map_err(|e| table_err(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<DomainDataset> {
    let table_err = |reason: String| Error::Table {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let spec_hash = first
        .trim_end()
        .strip_prefix("# spec_hash=")
        .ok_or_else(|| table_err("missing `# spec_hash=` line".into()))?
        .to_string();
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| table_err(e.to_string()))?.clone();
    let width = header.len();
    if width < 3 || &header[width - 2] != "class" || &header[width - 1] != "domain" {
        return Err(table_err("header must end with `class,domain`".into()));
    }
    let input_dim = width - 2;
    let mut examples = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| table_err(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let x = (0..input_dim)
            .map(|i| field(i).parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| table_err(format!("row {row}: {e}")))?;
        let class = field(input_dim)
            .parse()
            .map_err(|e| table_err(format!("row {row} class: {e}")))?;
        let domain = field(input_dim + 1)
            .parse()
            .map_err(|e| table_err(format!("row {row} domain: {e}")))?;
        examples.push(Example { x, class, domain });
    }
    let num_classes = examples.iter().map(|e| e.class + 1).max().unwrap_or(0);
    let num_domains = examples.iter().map(|e| e.domain + 1).max().unwrap_or(0);
    Ok(DomainDataset {
        examples,
        input_dim,
        num_classes,
        num_domains,
        spec_hash,
    })
}
