//! Gradient-times-value importance scores, quantile masks, and the
//! four-way feature decomposition.
//!
//! Importance gradients are detached constants: masks are selectors, not
//! differentiable quantities. Quantiles are nearest-rank and per sample,
//! and the mask test is a strict inequality, so ties fall into the
//! generic component.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class/domain importance score matrices for one feature batch.
#[derive(Clone, Debug)]
pub struct ImportanceScores {
    pub class_scores: Tensor,
    pub domain_scores: Tensor,
}

/// Binary masks with the per-sample thresholds that produced them.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub m_c: Tensor,
    pub m_d: Tensor,
    pub tau_c: Vec<f64>,
    pub tau_d: Vec<f64>,
    pub q_c: f64,
    pub q_d: f64,
}

/// The four masked components; they sum back to Z exactly.
#[derive(Clone, Debug)]
pub struct Decomposition {
    /// class-specific, domain-specific
    pub z_cd: Tensor,
    /// class-specific, domain-generic
    pub z_cnd: Tensor,
    /// class-generic, domain-specific
    pub z_ncd: Tensor,
    /// class-generic, domain-generic
    pub z_ncnd: Tensor,
}

/// Importance of each feature dimension for the ground-truth class logit:
/// the elementwise product of the logit gradient and the feature value.
pub fn class_importance(z: &Tensor, grads: &Tensor) -> Result<Tensor> {
    grads.mul(z)
}

/// Same contract as [`class_importance`], with domain-logit gradients.
pub fn domain_importance(z: &Tensor, grads: &Tensor) -> Result<Tensor> {
    grads.mul(z)
}

/// Nearest-rank quantile: the value at ascending sorted position ceil(q*K),
/// 1-indexed.
pub fn per_sample_quantile(row: &[f64], q: f64) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::invalid("quantile of an empty row".to_string()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {} outside [0,1]", q)));
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let k = sorted.len();
    let rank = ((q * k as f64).ceil() as usize).clamp(1, k);
    Ok(sorted[rank - 1])
}

/// Per-row mask: 1 where the score strictly exceeds that row's quantile
/// threshold. Returns the mask and the per-row thresholds.
pub fn build_masks(scores: &Tensor, q: f64) -> Result<(Tensor, Vec<f64>)> {
    let (b, k) = (scores.rows(), scores.cols());
    let mut mask = Tensor::zeros(vec![b, k]);
    let mut thresholds = Vec::with_capacity(b);
    for i in 0..b {
        let tau = per_sample_quantile(scores.row(i), q)?;
        thresholds.push(tau);
        for j in 0..k {
            if scores.at(i, j) > tau {
                mask.set(i, j, 1.0);
            }
        }
    }
    Ok((mask, thresholds))
}

/// Split Z into the four components selected by the class and domain masks.
/// Each entry of Z is copied into exactly one component, so the components
/// sum back to Z with zero floating-point error.
pub fn decompose(z: &Tensor, m_c: &Tensor, m_d: &Tensor) -> Result<Decomposition> {
    if z.shape() != m_c.shape() || z.shape() != m_d.shape() {
        return Err(Error::shape(
            "decompose",
            format!(
                "Z {:?}, M_c {:?}, M_d {:?}",
                z.shape(),
                m_c.shape(),
                m_d.shape()
            ),
        ));
    }
    for m in [m_c, m_d] {
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be exactly 0 or 1".to_string()));
        }
    }
    let n = z.len();
    let mut z_cd = Tensor::zeros(z.shape().to_vec());
    let mut z_cnd = Tensor::zeros(z.shape().to_vec());
    let mut z_ncd = Tensor::zeros(z.shape().to_vec());
    let mut z_ncnd = Tensor::zeros(z.shape().to_vec());
    for i in 0..n {
        let v = z.data()[i];
        let c = m_c.data()[i] == 1.0;
        let d = m_d.data()[i] == 1.0;
        let target = match (c, d) {
            (true, true) => &mut z_cd,
            (true, false) => &mut z_cnd,
            (false, true) => &mut z_ncd,
            (false, false) => &mut z_ncnd,
        };
        target.data_mut()[i] = v;
    }
    Ok(Decomposition {
        z_cd,
        z_cnd,
        z_ncd,
        z_ncnd,
    })
}

impl Decomposition {
    pub fn component_sum(&self) -> Result<Tensor> {
        self.z_cd
            .add(&self.z_cnd)?
            .add(&self.z_ncd)?
            .add(&self.z_ncnd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_is_elementwise_product() {
        let z = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let s = class_importance(&z, &g).unwrap();
        assert_eq!(s.data(), &[0.5, -2.0, 6.0]);

        let zeros = Tensor::zeros(vec![1, 3]);
        assert!(class_importance(&z, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(per_sample_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(per_sample_quantile(&[7.0, 7.0, 7.0], 0.3).unwrap(), 7.0);
        let row: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(per_sample_quantile(&row, 0.9).unwrap(), 9.0);
        assert!(per_sample_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn masks_strict_threshold() {
        let scores = Tensor::new(vec![1, 4], vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        let (mask, tau) = build_masks(&scores, 0.5).unwrap();
        assert_eq!(mask.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(tau, vec![2.0]);

        // constant rows never strictly exceed their own quantile
        let constant = Tensor::new(vec![1, 4], vec![7.0; 4]).unwrap();
        let (mask, _) = build_masks(&constant, 0.5).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_cardinality_distinct_scores() {
        // distinct scores, q=0.5, even K: exactly K/2 ones
        let scores =
            Tensor::new(vec![1, 8], vec![0.3, -1.2, 2.0, 0.7, -0.5, 1.1, 0.0, 3.0]).unwrap();
        let (mask, _) = build_masks(&scores, 0.5).unwrap();
        assert_eq!(mask.data().iter().sum::<f64>() as usize, 4);
    }

    #[test]
    fn decompose_definition() {
        let z = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m_c = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let m_d = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let d = decompose(&z, &m_c, &m_d).unwrap();
        assert_eq!(d.z_cd.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.z_ncd.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(d.z_cnd.data(), &[0.0, 0.0, 3.0, 0.0]);
        assert_eq!(d.z_ncnd.data(), &[0.0, 0.0, 0.0, 4.0]);
        assert_eq!(d.component_sum().unwrap(), z);
    }

    #[test]
    fn decompose_all_ones_masks() {
        let z = Tensor::new(vec![1, 3], vec![5.0, -2.0, 0.5]).unwrap();
        let ones = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
        let d = decompose(&z, &ones, &ones).unwrap();
        assert_eq!(d.z_cd, z);
        assert!(d.z_cnd.data().iter().all(|&v| v == 0.0));
        assert!(d.z_ncd.data().iter().all(|&v| v == 0.0));
        assert!(d.z_ncnd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_rejects_non_binary_mask() {
        let z = Tensor::zeros(vec![1, 2]);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        let ok = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(decompose(&z, &bad, &ok).is_err());
    }
}
