//! Evaluation metrics: accuracy, representation invariance (covariance
//! distance), prediction invariance (risk variance), MMD divergence,
//! feature-removal studies, and a learned 2-D projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition;
use crate::error::{Error, Result};
use crate::graph::{logit_grads_wrt, Graph};
use crate::model::{BoundModel, Head, Layer, ModelParams};
use crate::tensor::Tensor;

/// One row of experiment output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub method: String,
    pub step: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub cov_distance: f64,
    pub risk_variance: f64,
    pub mmd_aug: f64,
}

/// Fraction of rows whose argmax logit equals the label. Argmax ties break
/// toward the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let b = logits.rows();
    if b == 0 {
        return Err(Error::invalid("accuracy of an empty batch".to_string()));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "accuracy",
            format!("{} rows vs {} labels", b, labels.len()),
        ));
    }
    let mut correct = 0usize;
    for i in 0..b {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / b as f64)
}

/// Mean softmax cross-entropy of a logit batch, numerically stabilized by
/// max subtraction.
pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let b = logits.rows();
    if b == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch".to_string()));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "mean_cross_entropy",
            format!("{} rows vs {} labels", b, labels.len()),
        ));
    }
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        if labels[i] >= row.len() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} logits",
                labels[i],
                row.len()
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[labels[i]];
    }
    Ok(total / b as f64)
}

/// Result of the covariance-distance computation, with the number of
/// (class, domain) cells skipped for having fewer than 2 samples.
#[derive(Clone, Copy, Debug)]
pub struct CovDistance {
    pub value: f64,
    pub skipped_cells: usize,
}

/// Mean over classes and unordered training-domain pairs of the squared
/// Frobenius distance between same-class representation covariances.
/// Cells with fewer than 2 samples are skipped and counted.
pub fn covariance_distance(
    features: &Tensor,
    labels: &[usize],
    domains: &[usize],
    num_classes: usize,
    train_domains: &[usize],
) -> Result<CovDistance> {
    let k = features.cols();
    let mut skipped = 0usize;
    // covariance per (class, domain) cell, None when too small
    let mut cov: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; train_domains.len()]; num_classes];
    for (c, row) in cov.iter_mut().enumerate() {
        for (di, &d) in train_domains.iter().enumerate() {
            let idx: Vec<usize> = (0..features.rows())
                .filter(|&i| labels[i] == c && domains[i] == d)
                .collect();
            if idx.len() < 2 {
                skipped += 1;
                continue;
            }
            row[di] = Some(sample_covariance(features, &idx, k));
        }
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for row in &cov {
        for a in 0..row.len() {
            for b in a + 1..row.len() {
                if let (Some(ca), Some(cb)) = (&row[a], &row[b]) {
                    let dist: f64 = ca
                        .iter()
                        .zip(cb)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    total += dist;
                    terms += 1;
                }
            }
        }
    }
    if terms == 0 {
        return Err(Error::Data("no valid (class, domain-pair) cell for covariance distance".to_string()));
    }
    Ok(CovDistance {
        value: total / terms as f64,
        skipped_cells: skipped,
    })
}

/// Sample covariance (denominator m-1) of the selected rows, flattened K x K.
fn sample_covariance(features: &Tensor, idx: &[usize], k: usize) -> Vec<f64> {
    let m = idx.len();
    let mut mean = vec![0.0; k];
    for &i in idx {
        for (j, v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut cov = vec![0.0; k * k];
    for &i in idx {
        let row = features.row(i);
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in 0..k {
                cov[a * k + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= (m - 1) as f64;
    }
    cov
}

/// Population variance (divide by N) of per-domain risks.
pub fn risk_variance(risks: &[f64]) -> Result<f64> {
    let n = risks.len();
    if n < 2 {
        return Err(Error::invalid("risk variance needs at least 2 domains".to_string()));
    }
    let mean = risks.iter().sum::<f64>() / n as f64;
    Ok(risks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64)
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel
/// k(a,b) = exp(-||a-b||^2 / (2 h^2)). The bandwidth defaults to the
/// median pairwise distance over the pooled samples; all-identical points
/// make that zero and require an explicit bandwidth.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("mmd needs nonempty sample sets".to_string()));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "mmd",
            format!("{} vs {} feature dims", a.cols(), b.cols()),
        ));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth {} must be positive", h))),
        None => {
            let h = median_pairwise_distance(a, b);
            if h == 0.0 {
                return Err(Error::invalid(
                    "median-heuristic bandwidth is 0 (all points identical); pass an explicit bandwidth"
                        .to_string(),
                ));
            }
            h
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let kaa = mean_kernel(a, a, gamma);
    let kbb = mean_kernel(b, b, gamma);
    let kab = mean_kernel(a, b, gamma);
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Median pairwise Euclidean distance over the pooled rows of both sets.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).collect();
    rows.extend((0..b.rows()).map(|i| b.row(i)));
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    dists[dists.len() / 2]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_kernel(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            total += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// How feature dimensions are ranked for removal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalStrategy {
    /// Gradient-times-value importance score.
    Importance,
    Random,
    /// Magnitude of the logit gradient alone.
    GradNorm,
}

/// Zero out the top fraction of feature dims per sample (ranked by the
/// strategy score against the chosen head's ground-truth logit) and report
/// the head's accuracy at each fraction.
pub fn removal_study(
    params: &ModelParams,
    x: &Tensor,
    class_labels: &[usize],
    domain_labels: &[usize],
    strategy: RemovalStrategy,
    fractions: &[f64],
    target: Head,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    let labels = match target {
        Head::Class => class_labels,
        Head::Domain => domain_labels,
    };
    let z = params.extract_plain(x)?;
    let (b, k) = (z.rows(), z.cols());

    // per-sample ranking scores, larger = removed first
    let scores: Tensor = match strategy {
        RemovalStrategy::Random => {
            let mut s = Tensor::zeros(vec![b, k]);
            for v in s.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            s
        }
        RemovalStrategy::Importance | RemovalStrategy::GradNorm => {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, params)?;
            let zn = g.leaf(z.clone())?;
            let logits = bound.head(&mut g, target, zn)?;
            let grads = logit_grads_wrt(&mut g, zn, logits, labels)?;
            match strategy {
                RemovalStrategy::Importance => decomposition::class_importance(&z, &grads)?,
                _ => {
                    let mut s = grads;
                    for v in s.data_mut() {
                        *v = v.abs();
                    }
                    s
                }
            }
        }
    };

    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::invalid(format!("fraction {} outside [0,1]", f)));
        }
        let remove = ((f * k as f64).round() as usize).min(k);
        let mut masked = z.clone();
        for s in 0..b {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&p, &q| {
                scores
                    .at(s, q)
                    .partial_cmp(&scores.at(s, p))
                    .expect("finite scores")
            });
            for &dim in order.iter().take(remove) {
                masked.set(s, dim, 0.0);
            }
        }
        let logits = params.head_plain(target, &masked)?;
        out.push((f, accuracy(&logits, labels)?));
    }
    Ok(out)
}

/// 2-D coordinates with class and domain tags, for external plotting.
#[derive(Clone, Debug)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Train a small projector (feature -> 16 -> 2 with a linear class head on
/// the 2-D output) on frozen features and return the learned coordinates.
pub fn project_2d(
    features: &Tensor,
    labels: &[usize],
    domains: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Projection> {
    if num_classes < 2 {
        return Err(Error::invalid("projection needs at least 2 classes".to_string()));
    }
    let distinct: std::collections::HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("projection input contains a single class".to_string()));
    }
    let k = features.cols();
    let dims = [(k, 16), (16, 2), (2, num_classes)];
    let mut layers: Vec<Layer> = dims
        .iter()
        .map(|&(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Ok(Layer {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(vec![fan_out]),
            })
        })
        .collect::<Result<_>>()?;

    let mut opt = crate::training::OptimizerState::new();
    for _ in 0..300 {
        let mut g = Graph::new();
        let mut nodes = Vec::new();
        for l in &layers {
            nodes.push((g.leaf(l.weight.clone())?, g.leaf(l.bias.clone())?));
        }
        let x = g.leaf(features.clone())?;
        let mut h = x;
        for (i, &(w, b)) in nodes.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i == 0 {
                h = g.relu(h)?;
            }
        }
        let loss = g.softmax_cross_entropy(h, labels)?;
        let grads = g.backward(loss)?;
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        for l in layers.iter_mut() {
            tensors.push(&mut l.weight);
            tensors.push(&mut l.bias);
        }
        let grad_refs: Vec<&Tensor> = nodes
            .iter()
            .flat_map(|&(w, b)| [&grads[w], &grads[b]])
            .collect();
        opt.step(&mut tensors, &grad_refs, 1e-2, 0.0)?;
    }

    // forward through the two projector layers only
    let mut h = features.matmul(&layers[0].weight)?;
    for (j, v) in h.data_mut().iter_mut().enumerate() {
        let col = j % 16;
        *v = (*v + layers[0].bias.data()[col]).max(0.0);
    }
    let mut p = h.matmul(&layers[1].weight)?;
    for (j, v) in p.data_mut().iter_mut().enumerate() {
        *v += layers[1].bias.data()[j % 2];
    }
    let coords = (0..p.rows()).map(|i| [p.at(i, 0), p.at(i, 1)]).collect();
    Ok(Projection {
        coords,
        labels: labels.to_vec(),
        domains: domains.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_perfect_and_complement() {
        let logits = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&Tensor::zeros(vec![0, 2]), &[]).is_err());
    }

    #[test]
    fn risk_variance_values() {
        assert!(risk_variance(&[0.1, 0.1, 0.1]).unwrap() < 1e-30);
        assert!((risk_variance(&[0.0, 0.2]).unwrap() - 0.01).abs() < 1e-15);
        let a = risk_variance(&[0.3, 0.1, 0.5]).unwrap();
        let b = risk_variance(&[0.5, 0.3, 0.1]).unwrap();
        assert_eq!(a, b);
        assert!(risk_variance(&[0.1]).is_err());
    }

    #[test]
    fn mmd_identical_sets_vanish() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        assert!(mmd(&a, &a, None).unwrap() < 1e-12);
    }

    #[test]
    fn mmd_two_point_closed_form() {
        let a = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let v = mmd(&a, &b, Some(1.0)).unwrap();
        let expect = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((v - expect).abs() < 1e-9, "got {}", v);
    }

    #[test]
    fn mmd_symmetric() {
        let a = Tensor::from_rows(&[vec![0.0, 0.1], vec![1.0, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, -0.3], vec![0.7, 0.9], vec![1.1, 1.2]]).unwrap();
        assert_eq!(mmd(&a, &b, Some(0.7)).unwrap(), mmd(&b, &a, Some(0.7)).unwrap());
    }

    #[test]
    fn mmd_identical_points_need_explicit_bandwidth() {
        let a = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(mmd(&a, &a, None).is_err());
        assert!(mmd(&a, &a, Some(1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn covariance_distance_identical_sets_vanish() {
        let rows = vec![
            vec![1.0, 2.0],
            vec![-0.5, 0.3],
            vec![0.7, 1.1],
            vec![1.0, 2.0],
            vec![-0.5, 0.3],
            vec![0.7, 1.1],
        ];
        let features = Tensor::from_rows(&rows).unwrap();
        let labels = vec![0, 0, 0, 0, 0, 0];
        let domains = vec![0, 0, 0, 1, 1, 1];
        let d = covariance_distance(&features, &labels, &domains, 1, &[0, 1]).unwrap();
        assert_eq!(d.value, 0.0);
        assert_eq!(d.skipped_cells, 0);
    }

    #[test]
    fn covariance_distance_translation_invariant() {
        let rows = vec![
            vec![1.0, 2.0],
            vec![-0.5, 0.3],
            vec![0.7, 1.1],
            vec![0.2, -1.0],
            vec![1.5, 0.6],
            vec![-0.8, 0.9],
        ];
        let features = Tensor::from_rows(&rows).unwrap();
        let shifted_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v + 7.5).collect())
            .collect();
        let shifted = Tensor::from_rows(&shifted_rows).unwrap();
        let labels = vec![0; 6];
        let domains = vec![0, 0, 0, 1, 1, 1];
        let a = covariance_distance(&features, &labels, &domains, 1, &[0, 1]).unwrap();
        let b = covariance_distance(&shifted, &labels, &domains, 1, &[0, 1]).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn covariance_distance_no_valid_pair_errors() {
        let features = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        // domain 1 has a single sample: its cell is skipped, no pair remains
        assert!(covariance_distance(&features, &[0, 0], &[0, 1], 1, &[0, 1]).is_err());
    }
}
