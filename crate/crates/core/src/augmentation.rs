//! Cross-domain feature augmentation: per-sample pairing, component
//! mixing, probabilistic discard, soft domain labels, and the MixStyle
//! and DSU baseline augmenters.
//!
//! All randomness comes from one explicit seeded stream per run. Draw
//! order is fixed: pairings (per sample: i then j), then lambda1 in row
//! order, then lambda2, then the discard draws.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the second partner x_j is selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    /// Reuse x_i for both components.
    SameAsI,
    /// Same class, different domain, not x_i.
    SameClassDiffDomain,
    DiffClassSameDomain,
    /// Different class, different domain (default).
    DiffClassDiffDomain,
}

impl Default for PairingStrategy {
    fn default() -> Self {
        PairingStrategy::DiffClassDiffDomain
    }
}

/// Everything that determines one augmentation of a batch.
#[derive(Clone, Debug)]
pub struct AugmentationPlan {
    pub i_index: Vec<Option<usize>>,
    pub j_index: Vec<Option<usize>>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub discard: Vec<bool>,
    pub strategy: PairingStrategy,
}

impl AugmentationPlan {
    /// Number of samples with a present i / j partner.
    pub fn pairing_counts(&self) -> (usize, usize) {
        (
            self.i_index.iter().filter(|i| i.is_some()).count(),
            self.j_index.iter().filter(|j| j.is_some()).count(),
        )
    }
}

/// For each sample pick i (same class, different domain) and j (strategy
/// dependent) uniformly among in-batch candidates, or leave the slot
/// absent when no candidate exists. Lambdas and discard flags are
/// initialized to the identity (1.0 / false).
pub fn pair_samples(
    classes: &[usize],
    domains: &[usize],
    strategy: PairingStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentationPlan> {
    if classes.len() != domains.len() {
        return Err(Error::shape(
            "pair_samples",
            format!("{} classes vs {} domains", classes.len(), domains.len()),
        ));
    }
    let b = classes.len();
    let mut i_index = Vec::with_capacity(b);
    let mut j_index = Vec::with_capacity(b);
    for s in 0..b {
        let i_cands: Vec<usize> = (0..b)
            .filter(|&t| t != s && classes[t] == classes[s] && domains[t] != domains[s])
            .collect();
        let i = pick(&i_cands, rng);
        let j_cands: Vec<usize> = match strategy {
            PairingStrategy::SameAsI => i.into_iter().collect(),
            PairingStrategy::SameClassDiffDomain => (0..b)
                .filter(|&t| {
                    t != s
                        && Some(t) != i
                        && classes[t] == classes[s]
                        && domains[t] != domains[s]
                })
                .collect(),
            PairingStrategy::DiffClassSameDomain => (0..b)
                .filter(|&t| t != s && classes[t] != classes[s] && domains[t] == domains[s])
                .collect(),
            PairingStrategy::DiffClassDiffDomain => (0..b)
                .filter(|&t| classes[t] != classes[s] && domains[t] != domains[s])
                .collect(),
        };
        let j = pick(&j_cands, rng);
        i_index.push(i);
        j_index.push(j);
    }
    Ok(AugmentationPlan {
        i_index,
        j_index,
        lambda1: vec![1.0; b],
        lambda2: vec![1.0; b],
        discard: vec![false; b],
        strategy,
    })
}

fn pick(candidates: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(0..candidates.len())])
    }
}

impl AugmentationPlan {
    /// Draw lambda1 then lambda2 from U(0,1), each in row order. A lambda
    /// is forced back to 1 when its partner is absent so the component
    /// passes through unchanged. Draws happen for every row regardless,
    /// keeping the stream aligned across batches.
    pub fn sample_lambdas(&mut self, rng: &mut ChaCha8Rng) {
        for (l, idx) in self.lambda1.iter_mut().zip(&self.i_index) {
            let draw: f64 = rng.gen_range(0.0..1.0);
            *l = if idx.is_some() { draw } else { 1.0 };
        }
        for (l, idx) in self.lambda2.iter_mut().zip(&self.j_index) {
            let draw: f64 = rng.gen_range(0.0..1.0);
            *l = if idx.is_some() { draw } else { 1.0 };
        }
    }

    /// Per-sample discard draw: p ~ U(0,1), discard iff p <= p_discard.
    pub fn sample_discard(&mut self, p_discard: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        if !(0.0..=1.0).contains(&p_discard) {
            return Err(Error::invalid(format!("p_discard {} outside [0,1]", p_discard)));
        }
        for d in self.discard.iter_mut() {
            let p: f64 = rng.gen_range(0.0..1.0);
            *d = p <= p_discard;
        }
        Ok(())
    }
}

/// Mix the two domain-specific components with their partners' rows:
/// lambda * own + (1 - lambda) * partner. Absent partners were already
/// forced to lambda = 1, so the partner index falls back to the sample
/// itself without changing the result.
pub fn mix_components(
    decomp: &Decomposition,
    plan: &AugmentationPlan,
) -> Result<(Tensor, Tensor)> {
    let b = decomp.z_cd.rows();
    if plan.i_index.len() != b {
        return Err(Error::shape(
            "mix_components",
            format!("plan for {} samples vs {} rows", plan.i_index.len(), b),
        ));
    }
    let mixed_cd = mix_one(&decomp.z_cd, &plan.i_index, &plan.lambda1)?;
    let mixed_ncd = mix_one(&decomp.z_ncd, &plan.j_index, &plan.lambda2)?;
    Ok((mixed_cd, mixed_ncd))
}

fn mix_one(component: &Tensor, partners: &[Option<usize>], lambdas: &[f64]) -> Result<Tensor> {
    let (b, k) = (component.rows(), component.cols());
    let mut out = Tensor::zeros(vec![b, k]);
    for s in 0..b {
        let partner = match partners[s] {
            Some(p) if p < b => p,
            Some(p) => {
                return Err(Error::invalid(format!("partner index {} out of range", p)))
            }
            None => s,
        };
        let lam = lambdas[s];
        for j in 0..k {
            out.set(
                s,
                j,
                lam * component.at(s, j) + (1.0 - lam) * component.at(partner, j),
            );
        }
    }
    Ok(out)
}

/// Reassemble the augmented feature: mixed domain-specific parts plus the
/// untouched domain-generic parts, dropping the mixed class-specific
/// domain-specific part for discarded samples. The augmented feature
/// keeps the original class label.
pub fn recompose(
    mixed_cd: &Tensor,
    mixed_ncd: &Tensor,
    decomp: &Decomposition,
    plan: &AugmentationPlan,
) -> Result<Tensor> {
    let (b, k) = (mixed_cd.rows(), mixed_cd.cols());
    let mut out = Tensor::zeros(vec![b, k]);
    for s in 0..b {
        for j in 0..k {
            let cd = if plan.discard[s] { 0.0 } else { mixed_cd.at(s, j) };
            out.set(
                s,
                j,
                cd + mixed_ncd.at(s, j) + decomp.z_cnd.at(s, j) + decomp.z_ncnd.at(s, j),
            );
        }
    }
    Ok(out)
}

/// Soft domain label for an augmented feature: (lambda1+lambda2)/2 at the
/// sample's own domain, (1-lambda1)/2 at d_i, (1-lambda2)/2 at d_j.
pub fn soft_domain_label(
    lambda1: f64,
    lambda2: f64,
    self_domain: usize,
    domain_i: usize,
    domain_j: usize,
    num_domains: usize,
) -> Result<Vec<f64>> {
    let idx = [self_domain, domain_i, domain_j];
    if idx.iter().any(|&d| d >= num_domains) {
        return Err(Error::invalid("domain index out of range".to_string()));
    }
    if self_domain == domain_i || self_domain == domain_j || domain_i == domain_j {
        return Err(Error::invalid("soft domain label needs three distinct domains".to_string()));
    }
    let mut label = vec![0.0; num_domains];
    label[self_domain] = (lambda1 + lambda2) / 2.0;
    label[domain_i] = (1.0 - lambda1) / 2.0;
    label[domain_j] = (1.0 - lambda2) / 2.0;
    Ok(label)
}

/// Soft domain label that tolerates absent partners: weight for a missing
/// or colliding position accumulates at the position it coincides with.
/// Entries always sum to 1.
pub fn soft_domain_label_lenient(
    lambda1: f64,
    lambda2: f64,
    self_domain: usize,
    domain_i: Option<usize>,
    domain_j: Option<usize>,
    num_domains: usize,
) -> Vec<f64> {
    let mut label = vec![0.0; num_domains];
    label[self_domain] += (lambda1 + lambda2) / 2.0;
    label[domain_i.unwrap_or(self_domain)] += (1.0 - lambda1) / 2.0;
    label[domain_j.unwrap_or(self_domain)] += (1.0 - lambda2) / 2.0;
    label
}

/// Per-row affine transform `scale * z + shift`; how the statistics-based
/// augmenters act on a feature matrix.
#[derive(Clone, Debug)]
pub struct RowAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl RowAffine {
    pub fn apply(&self, z: &Tensor) -> Tensor {
        let (b, k) = (z.rows(), z.cols());
        let mut out = Tensor::zeros(vec![b, k]);
        for s in 0..b {
            for j in 0..k {
                out.set(s, j, self.scale[s] * z.at(s, j) + self.shift[s]);
            }
        }
        out
    }
}

const MIXSTYLE_EPS: f64 = 1e-6;

/// MixStyle as a per-row affine transform, or None when the batch-level
/// probability draw skips augmentation. Statistics are the per-sample mean
/// and standard deviation across feature dimensions (the vector-feature
/// adaptation of the original per-channel spatial statistics).
pub fn mixstyle_affine(
    z: &Tensor,
    prob: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<RowAffine>> {
    if z.cols() < 2 {
        return Err(Error::invalid("mixstyle needs K >= 2".to_string()));
    }
    let apply: f64 = rng.gen_range(0.0..1.0);
    if apply >= prob {
        return Ok(None);
    }
    let b = z.rows();
    let mut perm: Vec<usize> = (0..b).collect();
    // Fisher-Yates with the run's stream
    for i in (1..b).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("invalid Beta({}, {}): {}", alpha, alpha, e)))?;
    let lam: f64 = beta.sample(rng);

    let (mu, sigma) = row_stats(z);
    let mut scale = Vec::with_capacity(b);
    let mut shift = Vec::with_capacity(b);
    for s in 0..b {
        let p = perm[s];
        let mu_mix = lam * mu[s] + (1.0 - lam) * mu[p];
        let sigma_mix = lam * sigma[s] + (1.0 - lam) * sigma[p];
        let a = sigma_mix / (sigma[s] + MIXSTYLE_EPS);
        scale.push(a);
        shift.push(mu_mix - a * mu[s]);
    }
    Ok(Some(RowAffine { scale, shift }))
}

/// MixStyle baseline augmenter; identity (bitwise) when not applied.
pub fn mixstyle(z: &Tensor, prob: f64, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(match mixstyle_affine(z, prob, alpha, rng)? {
        Some(affine) => affine.apply(z),
        None => z.clone(),
    })
}

/// DSU as a per-row affine transform: feature statistics are perturbed by
/// Gaussian noise scaled with the across-batch deviation of the statistics.
pub fn dsu_affine(
    z: &Tensor,
    prob: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<RowAffine>> {
    let b = z.rows();
    if b < 2 {
        return Err(Error::invalid("dsu needs a batch of at least 2 samples".to_string()));
    }
    let apply: f64 = rng.gen_range(0.0..1.0);
    if apply >= prob {
        return Ok(None);
    }
    let (mu, sigma) = row_stats(z);
    let sig_mu = population_std(&mu);
    let sig_sigma = population_std(&sigma);
    let eps_mu: Vec<f64> = (0..b).map(|_| StandardNormal.sample(rng)).collect();
    let eps_sigma: Vec<f64> = (0..b).map(|_| StandardNormal.sample(rng)).collect();

    let mut scale = Vec::with_capacity(b);
    let mut shift = Vec::with_capacity(b);
    for s in 0..b {
        let mu_new = mu[s] + eps_mu[s] * sig_mu;
        let sigma_new = sigma[s] + eps_sigma[s] * sig_sigma;
        let a = sigma_new / (sigma[s] + eps);
        scale.push(a);
        shift.push(mu_new - a * mu[s]);
    }
    Ok(Some(RowAffine { scale, shift }))
}

/// DSU baseline augmenter; identity (bitwise) when not applied.
pub fn dsu(z: &Tensor, prob: f64, eps: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(match dsu_affine(z, prob, eps, rng)? {
        Some(affine) => affine.apply(z),
        None => z.clone(),
    })
}

/// Per-row mean and population standard deviation across feature dims.
fn row_stats(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, k) = (z.rows(), z.cols());
    let mut mu = Vec::with_capacity(b);
    let mut sigma = Vec::with_capacity(b);
    for s in 0..b {
        let row = z.row(s);
        let m = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k as f64;
        mu.push(m);
        sigma.push(var.sqrt());
    }
    (mu, sigma)
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
