//! Synthetic multi-domain datasets with controllable shift, splits, and
//! domain-balanced batch construction.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An immutable multi-domain dataset: training domains carry train/val
/// splits, one held-out domain is the test split.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub test_domain: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub domain: Vec<usize>,
    pub split: Vec<Split>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn train_domains(&self) -> Vec<usize> {
        (0..self.num_domains).filter(|&d| d != self.test_domain).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn indices_in_domain(&self, split: Split, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split && self.domain[i] == domain)
            .collect()
    }

    /// Gather rows into a (B x D) matrix plus label/domain vectors.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        let mut rows = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        let mut d = Vec::with_capacity(idx.len());
        for &i in idx {
            rows.push(self.x[i].clone());
            y.push(self.y[i]);
            d.push(self.domain[i]);
        }
        Ok((Tensor::from_rows(&rows)?, y, d))
    }

    /// No test-domain row may appear in a training or validation split;
    /// checked by exact bit-level row hashing.
    pub fn check_no_test_leakage(&self) -> Result<()> {
        let hash = |row: &[f64]| -> Vec<u64> { row.iter().map(|v| v.to_bits()).collect() };
        let test_rows: HashSet<Vec<u64>> = (0..self.len())
            .filter(|&i| self.split[i] == Split::Test)
            .map(|i| hash(&self.x[i]))
            .collect();
        for i in 0..self.len() {
            if self.split[i] != Split::Test && test_rows.contains(&hash(&self.x[i])) {
                return Err(Error::Data(format!("test-domain row leaked into {:?} split", self.split[i])));
            }
        }
        Ok(())
    }

    /// Write the bundle as CSV: x_0..x_{D-1}, y, domain, split.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x_{}", i)).collect();
        header.extend(["y".to_string(), "domain".to_string(), "split".to_string()]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x[i].iter().map(|v| format!("{:?}", v)).collect();
            rec.push(self.y[i].to_string());
            rec.push(self.domain[i].to_string());
            rec.push(
                match self.split[i] {
                    Split::Train => "train",
                    Split::Val => "val",
                    Split::Test => "test",
                }
                .to_string(),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let input_dim = header.iter().filter(|h| h.starts_with("x_")).count();
        if input_dim == 0 || !header.iter().any(|h| h == "y") {
            return Err(Error::Data("csv missing x_*/y columns".to_string()));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut domain = Vec::new();
        let mut split = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| Error::Data(format!("bad value {:?}: {}", s, e)))
            };
            let row: Result<Vec<f64>> = (0..input_dim).map(|i| parse(&rec[i])).collect();
            x.push(row?);
            y.push(rec[input_dim].parse().map_err(|e| Error::Data(format!("bad label: {}", e)))?);
            domain.push(
                rec[input_dim + 1]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad domain: {}", e)))?,
            );
            split.push(match &rec[input_dim + 2] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Data(format!("unknown split {:?}", other))),
            });
        }
        let num_classes = y.iter().max().map_or(0, |m| m + 1);
        let num_domains = domain.iter().max().map_or(0, |m| m + 1);
        let test_domain = split
            .iter()
            .zip(&domain)
            .find(|(s, _)| **s == Split::Test)
            .map(|(_, d)| *d)
            .ok_or_else(|| Error::Data("no test split in csv".to_string()))?;
        Ok(DatasetBundle {
            input_dim,
            num_classes,
            num_domains,
            test_domain,
            x,
            y,
            domain,
            split,
        })
    }
}

/// Binary blobs with domain-invariant signal dims and a spurious nuisance
/// pattern that agrees with the class with per-domain probability p_i.
///
/// Nuisance layout: the class pattern alternates sign across nuisance dims
/// (class 1 -> +,-,+,..., class 0 negated) while the per-domain offset is
/// applied along the all-ones direction, so class and domain information
/// occupy orthogonal directions and each is exactly recoverable when the
/// agreement probability is 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpuriousBlobsSpec {
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    pub num_classes: usize,
    pub signal_noise: f64,
    /// Spurious agreement probability per training domain.
    pub train_agreement: Vec<f64>,
    pub test_agreement: f64,
    /// Per-domain nuisance offset (train domains first, test domain last).
    pub nuisance_offsets: Vec<f64>,
    pub nuisance_scales: Vec<f64>,
    pub samples_per_domain: usize,
}

impl Default for SpuriousBlobsSpec {
    fn default() -> Self {
        SpuriousBlobsSpec {
            signal_dim: 2,
            nuisance_dim: 2,
            num_classes: 2,
            // noisy-enough signal and a reliable nuisance make the
            // shortcut genuinely tempting; the neutral test agreement
            // prices that reliance at test time
            signal_noise: 1.6,
            train_agreement: vec![0.95, 0.95, 0.95],
            test_agreement: 0.5,
            nuisance_offsets: vec![0.0, 2.0, 4.0, 6.0],
            nuisance_scales: vec![1.0, 1.0, 1.0, 1.0],
            samples_per_domain: 2000,
        }
    }
}

impl SpuriousBlobsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::invalid("spurious blobs are defined for exactly 2 classes".to_string()));
        }
        if self.train_agreement.len() < 2 {
            return Err(Error::invalid("need at least 2 training domains".to_string()));
        }
        let n = self.train_agreement.len() + 1;
        if self.nuisance_offsets.len() != n || self.nuisance_scales.len() != n {
            return Err(Error::invalid(format!(
                "nuisance offsets/scales must cover all {} domains",
                n
            )));
        }
        if self
            .train_agreement
            .iter()
            .chain(std::iter::once(&self.test_agreement))
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::invalid("agreement probabilities must lie in [0,1]".to_string()));
        }
        if self.signal_dim == 0 || self.nuisance_dim == 0 || self.samples_per_domain == 0 {
            return Err(Error::invalid("dims and sample counts must be positive".to_string()));
        }
        Ok(())
    }
}

/// Split one domain's samples: everything for the test domain, otherwise
/// 20% validation stratified by class (every 5th occurrence of each class).
fn assign_splits(labels: &[usize], is_test: bool) -> Vec<Split> {
    if is_test {
        return vec![Split::Test; labels.len()];
    }
    let mut per_class_count = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&c| {
            let n = per_class_count.entry(c).or_insert(0usize);
            *n += 1;
            if *n % 5 == 0 {
                Split::Val
            } else {
                Split::Train
            }
        })
        .collect()
}

/// Alternating-sign nuisance pattern for a class.
fn nuisance_pattern(class: usize, dim: usize) -> Vec<f64> {
    let sign = if class == 1 { 1.0 } else { -1.0 };
    (0..dim)
        .map(|k| if k % 2 == 0 { sign } else { -sign })
        .collect()
}

pub fn gen_spurious_blobs(spec: &SpuriousBlobsSpec, rng: &mut ChaCha8Rng) -> Result<DatasetBundle> {
    spec.validate()?;
    let num_train = spec.train_agreement.len();
    let num_domains = num_train + 1;
    let test_domain = num_train;
    let input_dim = spec.signal_dim + spec.nuisance_dim;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut domain = Vec::new();
    let mut split = Vec::new();

    for d in 0..num_domains {
        let p_agree = if d == test_domain {
            spec.test_agreement
        } else {
            spec.train_agreement[d]
        };
        for s in 0..spec.samples_per_domain {
            let class = s % 2;
            let mu = if class == 1 { 1.0 } else { -1.0 };
            let mut row = Vec::with_capacity(input_dim);
            for _ in 0..spec.signal_dim {
                let noise: f64 = StandardNormal.sample(rng);
                row.push(mu + spec.signal_noise * noise);
            }
            let agree = rng.gen_range(0.0..1.0) < p_agree;
            let pattern_class = if agree { class } else { 1 - class };
            let pattern = nuisance_pattern(pattern_class, spec.nuisance_dim);
            for v in pattern {
                row.push(spec.nuisance_offsets[d] + spec.nuisance_scales[d] * v);
            }
            x.push(row);
            y.push(class);
            domain.push(d);
        }
        let start = x.len() - spec.samples_per_domain;
        split.extend(assign_splits(&y[start..], d == test_domain));
    }
    let bundle = DatasetBundle {
        input_dim,
        num_classes: 2,
        num_domains,
        test_domain,
        x,
        y,
        domain,
        split,
    };
    bundle.check_no_test_leakage()?;
    Ok(bundle)
}

/// Two interleaved half-circles per domain, rotated by the domain angle.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotatedMoonsSpec {
    /// Training domain rotation angles in degrees.
    pub train_angles: Vec<f64>,
    pub test_angle: f64,
    pub noise: f64,
    pub samples_per_domain: usize,
}

impl Default for RotatedMoonsSpec {
    fn default() -> Self {
        RotatedMoonsSpec {
            train_angles: vec![0.0, 30.0, 60.0],
            test_angle: 90.0,
            noise: 0.15,
            samples_per_domain: 1000,
        }
    }
}

pub fn gen_rotated_moons(spec: &RotatedMoonsSpec, rng: &mut ChaCha8Rng) -> Result<DatasetBundle> {
    if spec.train_angles.len() < 2 {
        return Err(Error::invalid("need at least 2 training domains".to_string()));
    }
    let mut all_angles = spec.train_angles.clone();
    all_angles.push(spec.test_angle);
    for (i, a) in all_angles.iter().enumerate() {
        for b in &all_angles[i + 1..] {
            if (a - b).abs() < 1e-9 {
                return Err(Error::invalid("domain angles must be distinct".to_string()));
            }
        }
    }
    if spec.samples_per_domain == 0 {
        return Err(Error::invalid("samples_per_domain must be positive".to_string()));
    }
    let num_domains = all_angles.len();
    let test_domain = num_domains - 1;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut domain = Vec::new();
    let mut split = Vec::new();

    for (d, angle_deg) in all_angles.iter().enumerate() {
        let angle = angle_deg.to_radians();
        let (sin, cos) = angle.sin_cos();
        for s in 0..spec.samples_per_domain {
            let class = s % 2;
            let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            // canonical arcs, centered so that rotation acts about the origin
            let (px, py) = if class == 0 {
                (t.cos(), t.sin() - 0.25)
            } else {
                (1.0 - t.cos(), 0.25 - t.sin())
            };
            let rx = cos * px - sin * py;
            let ry = sin * px + cos * py;
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            x.push(vec![rx + spec.noise * nx, ry + spec.noise * ny]);
            y.push(class);
            domain.push(d);
        }
        let start = x.len() - spec.samples_per_domain;
        split.extend(assign_splits(&y[start..], d == test_domain));
    }
    let bundle = DatasetBundle {
        input_dim: 2,
        num_classes: 2,
        num_domains,
        test_domain,
        x,
        y,
        domain,
        split,
    };
    bundle.check_no_test_leakage()?;
    Ok(bundle)
}

/// One training batch: inputs with per-row class and domain labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain: Vec<usize>,
}

/// Domain-balanced batch stream: each batch draws batch_size/N samples
/// from every training domain, reshuffling each domain deterministically
/// when its queue is exhausted.
pub struct BatchStream<'a> {
    bundle: &'a DatasetBundle,
    batch_size: usize,
    queues: Vec<(usize, Vec<usize>)>, // (cursor, shuffled indices) per training domain
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(bundle: &'a DatasetBundle, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        let train_domains = bundle.train_domains();
        if train_domains.is_empty() {
            return Err(Error::Data("bundle has no training domains".to_string()));
        }
        if batch_size == 0 || batch_size % train_domains.len() != 0 {
            return Err(Error::invalid(format!(
                "batch size {} not divisible by {} training domains",
                batch_size,
                train_domains.len()
            )));
        }
        let mut stream = BatchStream {
            bundle,
            batch_size,
            queues: train_domains
                .iter()
                .map(|&d| (0, bundle.indices_in_domain(Split::Train, d)))
                .collect(),
            rng,
        };
        for q in 0..stream.queues.len() {
            if stream.queues[q].1.is_empty() {
                return Err(Error::Data("a training domain has no train samples".to_string()));
            }
            stream.reshuffle(q);
        }
        Ok(stream)
    }

    fn reshuffle(&mut self, q: usize) {
        let indices = &mut self.queues[q].1;
        for i in (1..indices.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        self.queues[q].0 = 0;
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let per_domain = self.batch_size / self.queues.len();
        let mut idx = Vec::with_capacity(self.batch_size);
        for q in 0..self.queues.len() {
            for _ in 0..per_domain {
                if self.queues[q].0 >= self.queues[q].1.len() {
                    self.reshuffle(q);
                }
                let cursor = self.queues[q].0;
                idx.push(self.queues[q].1[cursor]);
                self.queues[q].0 += 1;
            }
        }
        let (x, y, domain) = self.bundle.gather(&idx)?;
        Ok(Batch { x, y, domain })
    }
}
