//! Finite-difference validation of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdomainmix::graph::{logit_grads_wrt, Graph};
use xdomainmix::model::{ArchConfig, BoundModel, ModelParams};
use xdomainmix::tensor::Tensor;

fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    ArchConfig {
        input_dim: rng.gen_range(2..6),
        extractor_hidden: vec![rng.gen_range(3..8)],
        feature_dim: rng.gen_range(3..8),
        head_hidden: if rng.gen_bool(0.5) {
            vec![rng.gen_range(3..6)]
        } else {
            vec![]
        },
        num_classes: rng.gen_range(2..5),
        num_domains: rng.gen_range(2..5),
    }
}

fn random_batch(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>, Vec<usize>) {
    let b = rng.gen_range(2..6);
    let x = Tensor::new(
        vec![b, arch.input_dim],
        (0..b * arch.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let y = (0..b).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    let d = (0..b).map(|_| rng.gen_range(0..arch.num_domains)).collect();
    (x, y, d)
}

/// Full-model loss as a plain function of the parameters: class CE plus
/// domain CE, both flowing through the extractor.
fn eval_loss(params: &ModelParams, x: &Tensor, y: &[usize], d: &[usize]) -> f64 {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params).unwrap();
    let xn = g.leaf(x.clone()).unwrap();
    let z = bound.extract(&mut g, xn).unwrap();
    let cl = bound.classify(&mut g, z).unwrap();
    let dl = bound.domain_classify(&mut g, z).unwrap();
    let ce_c = g.softmax_cross_entropy(cl, y).unwrap();
    let ce_d = g.softmax_cross_entropy(dl, d).unwrap();
    let total = g.add(ce_c, ce_d).unwrap();
    g.value(total).scalar_value()
}

#[test]
fn backward_matches_finite_differences_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let h = 1e-5;
    for trial in 0..100 {
        let arch = random_arch(&mut rng);
        let mut params = ModelParams::init(&arch, &mut rng).unwrap();
        // jitter the zero-initialized biases so no relu pre-activation sits
        // exactly on the kink, where finite differences are invalid
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let (x, y, d) = random_batch(&arch, &mut rng);

        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &params).unwrap();
        let xn = g.leaf(x.clone()).unwrap();
        let z = bound.extract(&mut g, xn).unwrap();
        let cl = bound.classify(&mut g, z).unwrap();
        let dl = bound.domain_classify(&mut g, z).unwrap();
        let ce_c = g.softmax_cross_entropy(cl, &y).unwrap();
        let ce_d = g.softmax_cross_entropy(dl, &d).unwrap();
        let total = g.add(ce_c, ce_d).unwrap();
        let grads = g.backward(total).unwrap();
        let analytic: Vec<Tensor> = bound
            .param_nodes()
            .into_iter()
            .map(|n| grads[n].clone())
            .collect();

        let num_tensors = params.tensors().len();
        for t in 0..num_tensors {
            let len = analytic[t].len();
            // probe a few coordinates per tensor
            for _ in 0..3.min(len) {
                let c = rng.gen_range(0..len);
                let mut fd_at = |h: f64| {
                    let orig = params.tensors_mut()[t].data()[c];
                    params.tensors_mut()[t].data_mut()[c] = orig + h;
                    let up = eval_loss(&params, &x, &y, &d);
                    params.tensors_mut()[t].data_mut()[c] = orig - h;
                    let down = eval_loss(&params, &x, &y, &d);
                    params.tensors_mut()[t].data_mut()[c] = orig;
                    (up - down) / (2.0 * h)
                };
                let a = analytic[t].data()[c];
                let rel_to = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                let rel = rel_to(fd_at(h));
                if rel >= 1e-6 {
                    // the secant may straddle a relu kink; a true gradient
                    // bug does not improve as the step shrinks
                    let rel_small = rel_to(fd_at(1e-8));
                    assert!(
                        rel_small < 1e-4,
                        "trial {trial} tensor {t} coord {c}: analytic {a}, rel {rel} at h={h}, rel {rel_small} at h=1e-8"
                    );
                }
            }
        }
    }
}

#[test]
fn per_sample_logit_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    for _ in 0..20 {
        let arch = random_arch(&mut rng);
        let params = ModelParams::init(&arch, &mut rng).unwrap();
        let b = rng.gen_range(2..5);
        let k = arch.feature_dim;
        let z = Tensor::new(vec![b, k], (0..b * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..arch.num_classes)).collect();

        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &params).unwrap();
        let zn = g.leaf(z.clone()).unwrap();
        let logits = bound.classify(&mut g, zn).unwrap();
        let grads = logit_grads_wrt(&mut g, zn, logits, &labels).unwrap();

        for s in 0..b {
            for c in 0..k {
                let mut zp = z.clone();
                zp.set(s, c, z.at(s, c) + h);
                let up = params.classify_plain(&zp).unwrap().at(s, labels[s]);
                zp.set(s, c, z.at(s, c) - h);
                let down = params.classify_plain(&zp).unwrap().at(s, labels[s]);
                let fd = (up - down) / (2.0 * h);
                let a = grads.at(s, c);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-6, "sample {s} dim {c}: {a} vs {fd}");
            }
        }
    }
}
