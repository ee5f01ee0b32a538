//! Two-phase training: warm-up on original features, then augmentation
//! with the cyclic domain-quantile schedule, plus the optimizer and the
//! ERM / XDomainMix / MixStyle / DSU method dispatch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{
    self, dsu_affine, mixstyle_affine, pair_samples, AugmentationPlan, PairingStrategy,
};
use crate::data::{Batch, BatchStream, DatasetBundle, Split};
use crate::decomposition::{build_masks, class_importance, decompose, domain_importance};
use crate::error::{Error, Result};
use crate::graph::{logit_grads_wrt, Graph, NodeId};
use crate::metrics::{self, MetricsRecord};
use crate::model::{ArchConfig, BoundModel, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Xdomainmix,
    Mixstyle,
    Dsu,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Erm => "erm",
            Method::Xdomainmix => "xdomainmix",
            Method::Mixstyle => "mixstyle",
            Method::Dsu => "dsu",
        };
        f.write_str(s)
    }
}

/// Which augmentation components are active (ablation grid rows).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub mix_cd: bool,
    pub mix_ncd: bool,
    pub discard_cd: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            mix_cd: true,
            mix_ncd: true,
            discard_cd: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Schedule step length for the cyclic domain quantile.
    pub n_tau: usize,
    pub p_discard: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pairing_strategy: PairingStrategy,
    /// Also train the domain head on augmented features with soft labels.
    pub domain_head_on_augmented: bool,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub eval_interval: usize,
    /// Fixed domain quantile level instead of the cyclic schedule.
    pub tau_d_override: Option<f64>,
    pub mixstyle_prob: f64,
    pub mixstyle_alpha: f64,
    pub dsu_prob: f64,
    pub dsu_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Erm,
            warmup_steps: 500,
            total_steps: 3000,
            n_tau: 100,
            p_discard: 0.2,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            // 30, not 32: batches must divide evenly across the (default
            // three) training domains
            batch_size: 30,
            pairing_strategy: PairingStrategy::default(),
            domain_head_on_augmented: false,
            ablation: AblationFlags::default(),
            seed: 0,
            eval_interval: 250,
            tau_d_override: None,
            mixstyle_prob: 0.5,
            mixstyle_alpha: 0.1,
            dsu_prob: 0.5,
            dsu_eps: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps exceeds total_steps".to_string()));
        }
        if self.n_tau == 0 {
            return Err(Error::invalid("n_tau must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.p_discard) {
            return Err(Error::invalid("p_discard must lie in [0,1]".to_string()));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval_interval must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Cyclic domain quantile: starts at the 90%-quantile, drops by 10 points
/// every n steps down to 50%, holds for n steps, then restarts.
pub fn tau_d_level(step_after_warmup: usize, n: usize) -> f64 {
    0.9 - 0.1 * ((step_after_warmup % (5 * n)) / n) as f64
}

/// Class quantile level (fixed).
pub const TAU_C_LEVEL: f64 = 0.5;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::invalid(format!(
                    "non-finite gradient for parameter {} (shape {:?})",
                    i,
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv -= lr * weight_decay * *pv;
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of the batch; domain balance comes from batch
/// construction, so a plain mean weights every domain equally.
pub fn erm_loss(graph: &mut Graph, class_logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    graph.softmax_cross_entropy(class_logits, labels)
}

/// Mean cross-entropy of domain logits against ground-truth domains.
pub fn domain_loss(graph: &mut Graph, domain_logits: NodeId, domains: &[usize]) -> Result<NodeId> {
    graph.softmax_cross_entropy(domain_logits, domains)
}

/// Half the sum of the original-feature and augmented-feature losses.
pub fn aug_loss(
    graph: &mut Graph,
    class_logits_orig: NodeId,
    class_logits_aug: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let orig = graph.softmax_cross_entropy(class_logits_orig, labels)?;
    let aug = graph.softmax_cross_entropy(class_logits_aug, labels)?;
    let sum = graph.add(orig, aug)?;
    graph.scale(sum, 0.5)
}

/// Importance scores of a detached feature batch under the current heads.
/// Built in a scratch graph so nothing flows back into training.
pub fn detached_scores(
    params: &ModelParams,
    z: &Tensor,
    labels: &[usize],
    domains: &[usize],
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params)?;
    let zn = g.leaf(z.clone())?;
    let class_logits = bound.classify(&mut g, zn)?;
    let class_grads = logit_grads_wrt(&mut g, zn, class_logits, labels)?;
    let domain_logits = bound.domain_classify(&mut g, zn)?;
    let domain_grads = logit_grads_wrt(&mut g, zn, domain_logits, domains)?;
    Ok((
        class_importance(z, &class_grads)?,
        domain_importance(z, &domain_grads)?,
    ))
}

/// Plain (graph-free) XDomainMix augmentation of a feature batch, used for
/// evaluation-time feature dumps and the divergence study.
pub fn xdomainmix_augment(
    params: &ModelParams,
    z: &Tensor,
    labels: &[usize],
    domains: &[usize],
    q_d: f64,
    p_discard: f64,
    strategy: PairingStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, AugmentationPlan)> {
    let (class_scores, domain_scores) = detached_scores(params, z, labels, domains)?;
    let (m_c, _) = build_masks(&class_scores, TAU_C_LEVEL)?;
    let (m_d, _) = build_masks(&domain_scores, q_d)?;
    let decomp = decompose(z, &m_c, &m_d)?;
    let mut plan = pair_samples(labels, domains, strategy, rng)?;
    plan.sample_lambdas(rng);
    plan.sample_discard(p_discard, rng)?;
    let (mixed_cd, mixed_ncd) = augmentation::mix_components(&decomp, &plan)?;
    let z_aug = augmentation::recompose(&mixed_cd, &mixed_ncd, &decomp, &plan)?;
    Ok((z_aug, plan))
}

/// One training step's graph with separate class and domain loss roots,
/// so gradient isolation is directly testable.
pub struct StepGraph {
    pub graph: Graph,
    pub bound: BoundModel,
    pub class_root: NodeId,
    pub domain_root: NodeId,
    pub features: NodeId,
    pub plan: Option<AugmentationPlan>,
    /// Rows whose mask cardinality differs from the tie-free count.
    pub mask_tie_rows: usize,
}

/// Build the forward graph and both loss roots for one step.
pub fn build_step(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    phase2: bool,
    step_after_warmup: usize,
    aug_rng: &mut ChaCha8Rng,
) -> Result<StepGraph> {
    let mut graph = Graph::new();
    let bound = BoundModel::bind(&mut graph, params)?;
    let x = graph.leaf(batch.x.clone())?;
    let z = bound.extract(&mut graph, x)?;
    let z_val = graph.value(z).clone();

    let mut plan_out = None;
    let mut tie_rows = 0usize;
    let mut z_aug_detached: Option<Tensor> = None;

    let class_root = if !phase2 || cfg.method == Method::Erm {
        let logits = bound.classify(&mut graph, z)?;
        erm_loss(&mut graph, logits, &batch.y)?
    } else {
        let z_aug = match cfg.method {
            Method::Xdomainmix => {
                let (node, plan, ties) = build_xdomainmix_feature(
                    &mut graph,
                    params,
                    z,
                    &z_val,
                    batch,
                    cfg,
                    step_after_warmup,
                    aug_rng,
                )?;
                if cfg.domain_head_on_augmented {
                    z_aug_detached = Some(graph.value(node).clone());
                }
                plan_out = Some(plan);
                tie_rows = ties;
                node
            }
            Method::Mixstyle => {
                let affine = mixstyle_affine(&z_val, cfg.mixstyle_prob, cfg.mixstyle_alpha, aug_rng)?;
                apply_affine(&mut graph, z, &z_val, affine)?
            }
            Method::Dsu => {
                let affine = dsu_affine(&z_val, cfg.dsu_prob, cfg.dsu_eps, aug_rng)?;
                apply_affine(&mut graph, z, &z_val, affine)?
            }
            Method::Erm => unreachable!(),
        };
        let logits_orig = bound.classify(&mut graph, z)?;
        let logits_aug = bound.classify(&mut graph, z_aug)?;
        aug_loss(&mut graph, logits_orig, logits_aug, &batch.y)?
    };

    // The domain classifier sees extracted features as constants: it must
    // not shape the extractor.
    let z_detached = graph.leaf(z_val)?;
    let domain_logits = bound.domain_classify(&mut graph, z_detached)?;
    let mut domain_root = domain_loss(&mut graph, domain_logits, &batch.domain)?;
    if let (Some(z_aug_val), Some(plan)) = (&z_aug_detached, &plan_out) {
        let targets = soft_label_matrix(plan, &batch.domain, domain_logits_width(params));
        let aug_leaf = graph.leaf(z_aug_val.clone())?;
        let aug_logits = bound.domain_classify(&mut graph, aug_leaf)?;
        let bce = graph.sigmoid_bce(aug_logits, &targets)?;
        domain_root = graph.add(domain_root, bce)?;
    }

    Ok(StepGraph {
        graph,
        bound,
        class_root,
        domain_root,
        features: z,
        plan: plan_out,
        mask_tie_rows: tie_rows,
    })
}

fn domain_logits_width(params: &ModelParams) -> usize {
    params
        .domain_head
        .last()
        .map(|l| l.bias.len())
        .unwrap_or(0)
}

fn soft_label_matrix(plan: &AugmentationPlan, domains: &[usize], num_domains: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..domains.len())
        .map(|s| {
            augmentation::soft_domain_label_lenient(
                plan.lambda1[s],
                plan.lambda2[s],
                domains[s],
                plan.i_index[s].map(|i| domains[i]),
                plan.j_index[s].map(|j| domains[j]),
                num_domains,
            )
        })
        .collect();
    Tensor::from_rows(&rows).expect("soft labels are rectangular")
}

/// In-graph augmented feature for XDomainMix. Masks, mixing ratios, and
/// discard flags enter as constants; gradients flow through Z and the
/// gathered partner rows only.
#[allow(clippy::too_many_arguments)]
fn build_xdomainmix_feature(
    graph: &mut Graph,
    params: &ModelParams,
    z: NodeId,
    z_val: &Tensor,
    batch: &Batch,
    cfg: &TrainConfig,
    step_after_warmup: usize,
    aug_rng: &mut ChaCha8Rng,
) -> Result<(NodeId, AugmentationPlan, usize)> {
    let (class_scores, domain_scores) = detached_scores(params, z_val, &batch.y, &batch.domain)?;
    let q_d = cfg
        .tau_d_override
        .unwrap_or_else(|| tau_d_level(step_after_warmup, cfg.n_tau));
    let (m_c, _) = build_masks(&class_scores, TAU_C_LEVEL)?;
    let (m_d, _) = build_masks(&domain_scores, q_d)?;
    let ties = count_tie_rows(&m_c, TAU_C_LEVEL) + count_tie_rows(&m_d, q_d);

    let mut plan = pair_samples(&batch.y, &batch.domain, cfg.pairing_strategy, aug_rng)?;
    plan.sample_lambdas(aug_rng);
    let p_discard = if cfg.ablation.discard_cd { cfg.p_discard } else { 0.0 };
    plan.sample_discard(p_discard, aug_rng)?;
    if !cfg.ablation.mix_cd {
        plan.lambda1.iter_mut().for_each(|l| *l = 1.0);
    }
    if !cfg.ablation.mix_ncd {
        plan.lambda2.iter_mut().for_each(|l| *l = 1.0);
    }

    let (b, k) = (z_val.rows(), z_val.cols());
    let complement = |m: &Tensor| {
        let data = m.data().iter().map(|v| 1.0 - v).collect();
        Tensor::new(vec![b, k], data)
    };
    let nc = complement(&m_c)?;
    let nd = complement(&m_d)?;
    let sel_cd = graph.leaf(m_c.mul(&m_d)?)?;
    let sel_cnd = graph.leaf(m_c.mul(&nd)?)?;
    let sel_ncd = graph.leaf(nc.mul(&m_d)?)?;
    let sel_ncnd = graph.leaf(nc.mul(&nd)?)?;
    let z_cd = graph.mul(z, sel_cd)?;
    let z_cnd = graph.mul(z, sel_cnd)?;
    let z_ncd = graph.mul(z, sel_ncd)?;
    let z_ncnd = graph.mul(z, sel_ncnd)?;

    let mix = |graph: &mut Graph,
               component: NodeId,
               partners: &[Option<usize>],
               lambdas: &[f64]|
     -> Result<NodeId> {
        let resolved: Vec<usize> = partners
            .iter()
            .enumerate()
            .map(|(s, p)| p.unwrap_or(s))
            .collect();
        let partner_rows = graph.gather_rows(component, &resolved)?;
        let lam = broadcast_rows(lambdas, k);
        let one_minus = broadcast_rows(&lambdas.iter().map(|l| 1.0 - l).collect::<Vec<_>>(), k);
        let lam_node = graph.leaf(lam)?;
        let inv_node = graph.leaf(one_minus)?;
        let own = graph.mul(component, lam_node)?;
        let other = graph.mul(partner_rows, inv_node)?;
        graph.add(own, other)
    };
    let mixed_cd = mix(graph, z_cd, &plan.i_index, &plan.lambda1)?;
    let mixed_ncd = mix(graph, z_ncd, &plan.j_index, &plan.lambda2)?;

    let keep: Vec<f64> = plan.discard.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let keep_node = graph.leaf(broadcast_rows(&keep, k))?;
    let kept_cd = graph.mul(mixed_cd, keep_node)?;

    let left = graph.add(kept_cd, mixed_ncd)?;
    let right = graph.add(z_cnd, z_ncnd)?;
    let z_aug = graph.add(left, right)?;
    Ok((z_aug, plan, ties))
}

fn broadcast_rows(per_row: &[f64], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(per_row.len() * k);
    for &v in per_row {
        data.extend(std::iter::repeat(v).take(k));
    }
    Tensor::new(vec![per_row.len(), k], data).expect("broadcast is rectangular")
}

fn count_tie_rows(mask: &Tensor, q: f64) -> usize {
    let k = mask.cols();
    let expected = k - ((q * k as f64).ceil() as usize).clamp(1, k);
    (0..mask.rows())
        .filter(|&r| mask.row(r).iter().sum::<f64>() as usize != expected)
        .count()
}

fn apply_affine(
    graph: &mut Graph,
    z: NodeId,
    z_val: &Tensor,
    affine: Option<augmentation::RowAffine>,
) -> Result<NodeId> {
    match affine {
        None => Ok(z),
        Some(a) => {
            let k = z_val.cols();
            let scale = graph.leaf(broadcast_rows(&a.scale, k))?;
            let shift = graph.leaf(broadcast_rows(&a.shift, k))?;
            let scaled = graph.mul(z, scale)?;
            graph.add(scaled, shift)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Checkpoint with the best pooled validation accuracy.
    pub best_params: ModelParams,
    pub best_val_acc: f64,
    pub final_params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    /// (present i partners, present j partners) summed over all steps.
    pub pairing_counts: (usize, usize),
    pub mask_tie_rows: usize,
}

/// Run the full two-phase procedure. Strictly sequential and fully
/// deterministic given (config, arch, bundle).
pub fn train(cfg: &TrainConfig, arch: &ArchConfig, bundle: &DatasetBundle) -> Result<TrainResult> {
    cfg.validate()?;
    let train_domains = bundle.train_domains();
    if cfg.method == Method::Xdomainmix && train_domains.len() < 2 {
        return Err(Error::invalid(
            "xdomainmix needs more than one training domain".to_string(),
        ));
    }

    // One base seed, separate streams: 0 init, 1 batches, 2 augmentation,
    // 3 evaluation-time draws.
    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(id);
        r
    };
    let mut params = ModelParams::init(arch, &mut stream(0))?;
    let mut batches = BatchStream::new(bundle, cfg.batch_size, stream(1))?;
    let mut aug_rng = stream(2);

    let mut opt = OptimizerState::new();
    let mut metrics = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut pairing_counts = (0usize, 0usize);
    let mut mask_tie_rows = 0usize;

    for step in 0..cfg.total_steps {
        let phase2 = step >= cfg.warmup_steps;
        let batch = batches.next_batch()?;
        let step_graph = build_step(
            &params,
            &batch,
            cfg,
            phase2,
            step.saturating_sub(cfg.warmup_steps),
            &mut aug_rng,
        )?;
        if let Some(plan) = &step_graph.plan {
            let (i, j) = plan.pairing_counts();
            pairing_counts.0 += i;
            pairing_counts.1 += j;
        }
        mask_tie_rows += step_graph.mask_tie_rows;

        let root = {
            // one backward over the summed objective; the two branches are
            // structurally disjoint so this equals two separate backwards
            let mut g = step_graph.graph;
            let total = g.add(step_graph.class_root, step_graph.domain_root)?;
            let grads = g.backward(total)?;
            (g, grads)
        };
        let (_, grads) = root;
        let grad_refs: Vec<&Tensor> = step_graph
            .bound
            .param_nodes()
            .into_iter()
            .map(|n| &grads[n])
            .collect();
        let mut tensors = params.tensors_mut();
        opt.step(&mut tensors, &grad_refs, cfg.learning_rate, cfg.weight_decay)?;

        let last = step + 1 == cfg.total_steps;
        if (step + 1) % cfg.eval_interval == 0 || last {
            let record = evaluate(cfg, &params, bundle, step + 1, &mut stream(3))?;
            // ties resolve to the latest checkpoint: with a plateaued
            // validation accuracy the most-trained model wins
            if record.val_acc >= best_val_acc {
                best_val_acc = record.val_acc;
                best_params = params.clone();
            }
            metrics.push(record);
        }
    }

    Ok(TrainResult {
        best_params,
        best_val_acc,
        final_params: params,
        metrics,
        pairing_counts,
        mask_tie_rows,
    })
}

/// Cap for the evaluation-time MMD sample (the kernel sum is quadratic).
const MMD_EVAL_CAP: usize = 256;

fn evaluate(
    cfg: &TrainConfig,
    params: &ModelParams,
    bundle: &DatasetBundle,
    step: usize,
    eval_rng: &mut ChaCha8Rng,
) -> Result<MetricsRecord> {
    let acc_on = |idx: &[usize]| -> Result<f64> {
        let (x, y, _) = bundle.gather(idx)?;
        let z = params.extract_plain(&x)?;
        let logits = params.classify_plain(&z)?;
        metrics::accuracy(&logits, &y)
    };
    let train_acc = acc_on(&bundle.indices(Split::Train))?;
    let test_acc = acc_on(&bundle.indices(Split::Test))?;

    let val_idx = bundle.indices(Split::Val);
    let (val_x, val_y, val_d) = bundle.gather(&val_idx)?;
    let val_z = params.extract_plain(&val_x)?;
    let val_logits = params.classify_plain(&val_z)?;
    let val_acc = metrics::accuracy(&val_logits, &val_y)?;

    let train_domains = bundle.train_domains();
    let cov = metrics::covariance_distance(
        &val_z,
        &val_y,
        &val_d,
        bundle.num_classes,
        &train_domains,
    )?;

    let mut risks = Vec::with_capacity(train_domains.len());
    for &d in &train_domains {
        let idx = bundle.indices_in_domain(Split::Val, d);
        let (x, y, _) = bundle.gather(&idx)?;
        let z = params.extract_plain(&x)?;
        let logits = params.classify_plain(&z)?;
        risks.push(metrics::mean_cross_entropy(&logits, &y)?);
    }
    let risk_var = metrics::risk_variance(&risks)?;

    let cap = val_idx.len().min(MMD_EVAL_CAP);
    let sub: Vec<usize> = (0..cap).collect();
    let z_sub = val_z.gather_rows(&sub)?;
    let mmd_aug = match cfg.method {
        Method::Erm => 0.0,
        Method::Xdomainmix => {
            let y_sub: Vec<usize> = sub.iter().map(|&i| val_y[i]).collect();
            let d_sub: Vec<usize> = sub.iter().map(|&i| val_d[i]).collect();
            let q_d = cfg.tau_d_override.unwrap_or(TAU_C_LEVEL);
            let (z_aug, _) = xdomainmix_augment(
                params,
                &z_sub,
                &y_sub,
                &d_sub,
                q_d,
                cfg.p_discard,
                cfg.pairing_strategy,
                eval_rng,
            )?;
            metrics::mmd(&z_sub, &z_aug, None).unwrap_or(0.0)
        }
        Method::Mixstyle => {
            let z_aug = augmentation::mixstyle(&z_sub, 1.0, cfg.mixstyle_alpha, eval_rng)?;
            metrics::mmd(&z_sub, &z_aug, None).unwrap_or(0.0)
        }
        Method::Dsu => {
            let z_aug = augmentation::dsu(&z_sub, 1.0, cfg.dsu_eps, eval_rng)?;
            metrics::mmd(&z_sub, &z_aug, None).unwrap_or(0.0)
        }
    };

    Ok(MetricsRecord {
        seed: cfg.seed,
        method: cfg.method.to_string(),
        step,
        train_acc,
        val_acc,
        test_acc,
        cov_distance: cov.value,
        risk_variance: risk_var,
        mmd_aug,
    })
}
