//! End-to-end acceptance checks for the toolkit. Each test prints one
//! pass/fail line (visible with `--nocapture` or on failure) and then
//! asserts, so the suite doubles as a checklist.
//!
//! The directional checks (7-10) share one set of trained models built
//! lazily behind a `OnceLock`: a 4-method x 5-seed sweep plus the
//! divergence study, all on the default synthetic spurious-correlation
//! dataset.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xdomainmix::augmentation::{mix_components, recompose, AugmentationPlan, PairingStrategy};
use xdomainmix::data::{BatchStream, SpuriousBlobsSpec, Split};
use xdomainmix::decomposition::{build_masks, decompose};
use xdomainmix::graph::{logit_grads_wrt, Graph};
use xdomainmix::metrics::{self, RemovalStrategy};
use xdomainmix::model::{ArchConfig, BoundModel, Head, ModelParams};
use xdomainmix::tensor::Tensor;
use xdomainmix::training::{self, tau_d_level, Method, TrainConfig};

use xdomainmix_cli::config::ExperimentConfig;
use xdomainmix_cli::runner;

fn report(n: usize, desc: &str, ok: bool) {
    println!("criterion {:>2}: {} - {}", n, if ok { "pass" } else { "FAIL" }, desc);
    assert!(ok, "criterion {} failed: {}", n, desc);
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn default_config() -> ExperimentConfig {
    serde_json::from_str(r#"{"dataset":{"kind":"spurious_blobs","params":{}}}"#).unwrap()
}

// ---------------------------------------------------------------- 1

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

/// Class CE plus domain CE, both flowing through the extractor, as a plain
/// scalar function of the parameters (or of a feature leaf).
fn eval_loss(params: &ModelParams, x: &Tensor, y: &[usize], d: &[usize]) -> f64 {
    let z = params.extract_plain(x).unwrap();
    eval_loss_from_features(params, &z, y, d)
}

fn eval_loss_from_features(params: &ModelParams, z: &Tensor, y: &[usize], d: &[usize]) -> f64 {
    let lc = metrics::mean_cross_entropy(&params.classify_plain(z).unwrap(), y).unwrap();
    let ld = metrics::mean_cross_entropy(&params.domain_classify_plain(z).unwrap(), d).unwrap();
    lc + ld
}

#[test]
fn criterion_01_autodiff_matches_finite_differences() {
    let mut r = rng(42);
    let h = 1e-5;
    let tol = 1e-6;
    let mut max_rel = 0.0f64;
    for _ in 0..100 {
        let arch = random_arch(&mut r);
        let mut params = ModelParams::init(&arch, &mut r).unwrap();
        // jitter the zero-initialized biases so no relu pre-activation
        // sits exactly on the kink, where finite differences are invalid
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.05..0.05);
            }
        }
        let b = r.gen_range(2..6);
        let x = Tensor::new(
            vec![b, arch.input_dim],
            (0..b * arch.input_dim).map(|_| r.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let y: Vec<usize> = (0..b).map(|_| r.gen_range(0..arch.num_classes)).collect();
        let d: Vec<usize> = (0..b).map(|_| r.gen_range(0..arch.num_domains)).collect();

        // analytic parameter gradients
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
            for _ in 0..3.min(len) {
                let c = r.gen_range(0..len);
                let orig = params.tensors_mut()[t].data()[c];
                params.tensors_mut()[t].data_mut()[c] = orig + h;
                let up = eval_loss(&params, &x, &y, &d);
                params.tensors_mut()[t].data_mut()[c] = orig - h;
                let down = eval_loss(&params, &x, &y, &d);
                params.tensors_mut()[t].data_mut()[c] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[t].data()[c];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }

        // analytic intermediate-feature gradients (z as a leaf)
        let z_val = params.extract_plain(&x).unwrap();
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &params).unwrap();
        let zn = g.leaf(z_val.clone()).unwrap();
        let cl = bound.classify(&mut g, zn).unwrap();
        let dl = bound.domain_classify(&mut g, zn).unwrap();
        let ce_c = g.softmax_cross_entropy(cl, &y).unwrap();
        let ce_d = g.softmax_cross_entropy(dl, &d).unwrap();
        let total = g.add(ce_c, ce_d).unwrap();
        let grads = g.backward(total).unwrap();
        let feat_grads = &grads[zn];
        for _ in 0..5 {
            let c = r.gen_range(0..z_val.len());
            let mut zp = z_val.clone();
            zp.data_mut()[c] += h;
            let up = eval_loss_from_features(&params, &zp, &y, &d);
            zp.data_mut()[c] = z_val.data()[c] - h;
            let down = eval_loss_from_features(&params, &zp, &y, &d);
            let fd = (up - down) / (2.0 * h);
            let a = feat_grads.data()[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }

    // per-sample logit gradients against per-sample finite differences
    let mut r = rng(7);
    for _ in 0..20 {
        let arch = random_arch(&mut r);
        let params = ModelParams::init(&arch, &mut r).unwrap();
        let b = r.gen_range(2..5);
        let k = arch.feature_dim;
        let z = Tensor::new(vec![b, k], (0..b * k).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..arch.num_classes)).collect();

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
                max_rel = max_rel.max(rel);
            }
        }
    }

    report(
        1,
        &format!(
            "gradients match central finite differences (h=1e-5), max rel err {:.2e} < 1e-6",
            max_rel
        ),
        max_rel < tol,
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_decomposition_identity_and_disjoint_supports() {
    let mut r = rng(2);
    let mut ok = true;
    for _ in 0..1000 {
        let b = r.gen_range(1..6);
        let k = r.gen_range(2..12);
        let z = Tensor::new(vec![b, k], (0..b * k).map(|_| r.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let mask =
            |r: &mut ChaCha8Rng| {
                Tensor::new(
                    vec![b, k],
                    (0..b * k).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap()
            };
        let (m_c, m_d) = (mask(&mut r), mask(&mut r));
        let d = decompose(&z, &m_c, &m_d).unwrap();
        // components sum back to Z with zero error
        ok &= d.component_sum().unwrap() == z;
        // each entry lives in exactly the component its masks select
        for i in 0..b * k {
            let c = m_c.data()[i] == 1.0;
            let dd = m_d.data()[i] == 1.0;
            let parts = [
                (d.z_cd.data()[i], c && dd),
                (d.z_cnd.data()[i], c && !dd),
                (d.z_ncd.data()[i], !c && dd),
                (d.z_ncnd.data()[i], !c && !dd),
            ];
            for (v, selected) in parts {
                if selected {
                    ok &= v == z.data()[i];
                } else {
                    ok &= v == 0.0;
                }
            }
        }
    }
    report(2, "four components sum to Z exactly with disjoint supports (1000 cases)", ok);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_mask_cardinality() {
    let mut r = rng(3);
    let k = 32;
    let mut ok = true;
    for _ in 0..1000 {
        let row: Vec<f64> = (0..k).map(|_| r.gen_range(-10.0..10.0)).collect();
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        assert_eq!(sorted.len(), k, "degenerate draw: scores not distinct");
        let scores = Tensor::new(vec![1, k], row).unwrap();
        let (m_half, _) = build_masks(&scores, 0.5).unwrap();
        let (m_high, _) = build_masks(&scores, 0.9).unwrap();
        ok &= m_half.data().iter().sum::<f64>() as usize == 16;
        ok &= m_high.data().iter().sum::<f64>() as usize == 3;
    }
    report(3, "distinct scores, K=32: q=0.5 gives 16 ones, q=0.9 gives 3 (1000 rows)", ok);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_augmentation_endpoints_and_discard_rate() {
    let mut r = rng(4);
    let mut ok = true;
    // unit lambdas and no discard reproduce Z bitwise
    for _ in 0..200 {
        let b = r.gen_range(2..6);
        let k = r.gen_range(2..10);
        let z = Tensor::new(vec![b, k], (0..b * k).map(|_| r.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let mask =
            |r: &mut ChaCha8Rng| {
                Tensor::new(
                    vec![b, k],
                    (0..b * k).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap()
            };
        let d = decompose(&z, &mask(&mut r), &mask(&mut r)).unwrap();
        let partner = |r: &mut ChaCha8Rng| -> Vec<Option<usize>> {
            (0..b)
                .map(|_| if r.gen_bool(0.7) { Some(r.gen_range(0..b)) } else { None })
                .collect()
        };
        let plan = AugmentationPlan {
            i_index: partner(&mut r),
            j_index: partner(&mut r),
            lambda1: vec![1.0; b],
            lambda2: vec![1.0; b],
            discard: vec![false; b],
            strategy: PairingStrategy::DiffClassDiffDomain,
        };
        let (cd, ncd) = mix_components(&d, &plan).unwrap();
        ok &= recompose(&cd, &ncd, &d, &plan).unwrap() == z;
    }
    // discard rate over 10k samples
    let n = 10_000;
    let mut plan = AugmentationPlan {
        i_index: vec![None; n],
        j_index: vec![None; n],
        lambda1: vec![1.0; n],
        lambda2: vec![1.0; n],
        discard: vec![false; n],
        strategy: PairingStrategy::DiffClassDiffDomain,
    };
    plan.sample_discard(0.2, &mut r).unwrap();
    let rate = plan.discard.iter().filter(|&&d| d).count() as f64 / n as f64;
    let rate_ok = (0.18..=0.22).contains(&rate);
    report(
        4,
        &format!(
            "unit-lambda/no-discard path is bitwise identity; discard rate {:.4} in [0.18, 0.22]",
            rate
        ),
        ok && rate_ok,
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_cyclic_schedule_closed_form() {
    let n = 100;
    let mut ok = true;
    for t in 0..1000usize {
        let expect = 0.9 - 0.1 * ((t % (5 * n)) / n) as f64;
        ok &= tau_d_level(t, n) == expect;
    }
    report(5, "tau_d level equals 0.9 - 0.1*floor((t mod 500)/100) exactly for t in 0..1000", ok);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_metric_oracles() {
    let mut ok = true;

    // identical sample sets have (numerically) zero divergence
    let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
    ok &= metrics::mmd(&a, &a, None).unwrap() < 1e-12;

    // two 1-D points at distance 1, bandwidth 1: 2 - 2 exp(-1/2)
    let p = Tensor::from_rows(&[vec![0.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let v = metrics::mmd(&p, &q, Some(1.0)).unwrap();
    ok &= (v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-9;

    // identical per-domain sets: covariance distance exactly zero
    let rows = vec![
        vec![1.0, 2.0],
        vec![-0.5, 0.3],
        vec![0.7, 1.1],
        vec![1.0, 2.0],
        vec![-0.5, 0.3],
        vec![0.7, 1.1],
    ];
    let features = Tensor::from_rows(&rows).unwrap();
    let cd = metrics::covariance_distance(&features, &[0; 6], &[0, 0, 0, 1, 1, 1], 1, &[0, 1])
        .unwrap();
    ok &= cd.value == 0.0;

    // N(0, I_K) vs N(0, 2 I_K): squared Frobenius distance of the
    // covariances is K; at 10k points per domain the estimate lands
    // within 5% (relative sampling error shrinks like 1/sqrt(K))
    let k = 16;
    let n = 10_000;
    let mut r = rng(6);
    let mut big = Vec::with_capacity(2 * n);
    let mut domains = Vec::with_capacity(2 * n);
    for d in 0..2usize {
        let scale = if d == 0 { 1.0 } else { 2.0f64.sqrt() };
        for _ in 0..n {
            let row: Vec<f64> = (0..k)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut r);
                    scale * g
                })
                .collect();
            big.push(row);
            domains.push(d);
        }
    }
    let big = Tensor::from_rows(&big).unwrap();
    let cd = metrics::covariance_distance(&big, &vec![0; 2 * n], &domains, 1, &[0, 1]).unwrap();
    let rel = (cd.value - k as f64).abs() / k as f64;
    ok &= rel < 0.05;

    // population variance of [0, 0.2] is 0.01 (up to one rounding)
    let rv = metrics::risk_variance(&[0.0, 0.2]).unwrap();
    ok &= (rv - 0.01).abs() < 1e-16;

    report(
        6,
        &format!(
            "mmd/covariance/risk-variance oracles (I-vs-2I rel err {:.3}, risk var {:.17})",
            rel, rv
        ),
        ok,
    );
}

// ------------------------------------------------- shared trained models

struct Directional {
    _dir: tempfile::TempDir,
    /// per-method (mean test_acc, mean risk_variance) from the sweep
    summary: HashMap<String, (f64, f64)>,
    /// (seed, method) -> divergence from the study
    mmd: HashMap<(u64, String), f64>,
    /// best-validation checkpoints of the trained augmentation models
    checkpoints: Vec<(u64, PathBuf)>,
    seeds: Vec<u64>,
}

static DIRECTIONAL: OnceLock<Directional> = OnceLock::new();

fn directional() -> &'static Directional {
    DIRECTIONAL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = default_config();
        let seeds: Vec<u64> = (0..5).collect();
        let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4);

        let sweep_out = dir.path().join("sweep");
        let (summary_path, all_ok) =
            runner::sweep(&cfg, &seeds, &runner::METHODS, &sweep_out, threads).unwrap();
        assert!(all_ok, "sweep had failing children");
        let mut summary = HashMap::new();
        let mut rdr = csv::Reader::from_path(&summary_path).unwrap();
        let headers = rdr.headers().unwrap().clone();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let get = |col: &str| rec[headers.iter().position(|h| h == col).unwrap()].to_string();
            if get("kind") == "summary" {
                summary.insert(
                    get("method"),
                    (
                        get("test_acc").parse::<f64>().unwrap(),
                        get("risk_variance").parse::<f64>().unwrap(),
                    ),
                );
            }
        }

        let mmd_out = dir.path().join("mmd");
        let mmd_path = runner::mmd_study(&cfg, &seeds, &mmd_out, None, threads).unwrap();
        let mut mmd = HashMap::new();
        let mut rdr = csv::Reader::from_path(&mmd_path).unwrap();
        let headers = rdr.headers().unwrap().clone();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let get = |col: &str| rec[headers.iter().position(|h| h == col).unwrap()].to_string();
            if get("kind") == "run" {
                mmd.insert(
                    (get("seed").parse::<u64>().unwrap(), get("method")),
                    get("mmd").parse::<f64>().unwrap(),
                );
            }
        }

        let checkpoints = seeds
            .iter()
            .map(|&s| {
                (
                    s,
                    mmd_out
                        .join("runs")
                        .join(format!("xdomainmix-s{}", s))
                        .join("checkpoint_best.json"),
                )
            })
            .collect();

        Directional {
            _dir: dir,
            summary,
            mmd,
            checkpoints,
            seeds,
        }
    })
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_directional_test_accuracy() {
    let d = directional();
    let acc = |m: &str| d.summary[m].0;
    let ok = acc("xdomainmix") > acc("erm")
        && acc("xdomainmix") >= acc("mixstyle")
        && acc("xdomainmix") >= acc("dsu");
    report(
        7,
        &format!(
            "mean test acc over 5 seeds: xdomainmix {:.4} > erm {:.4}, >= mixstyle {:.4}, >= dsu {:.4}",
            acc("xdomainmix"),
            acc("erm"),
            acc("mixstyle"),
            acc("dsu")
        ),
        ok,
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_directional_divergence() {
    let d = directional();
    let mut beats_dsu = 0;
    let mut beats_mixstyle = 0;
    for &s in &d.seeds {
        let get = |m: &str| d.mmd[&(s, m.to_string())];
        if get("xdomainmix") > get("dsu") {
            beats_dsu += 1;
        }
        if get("xdomainmix") > get("mixstyle") {
            beats_mixstyle += 1;
        }
    }
    report(
        8,
        &format!(
            "augmentation divergence: xdomainmix > dsu in {}/5 seeds, > mixstyle in {}/5 (need >= 4)",
            beats_dsu, beats_mixstyle
        ),
        beats_dsu >= 4 && beats_mixstyle >= 4,
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_directional_risk_variance() {
    let d = directional();
    let rv = |m: &str| d.summary[m].1;
    report(
        9,
        &format!(
            "mean risk variance over 5 seeds: xdomainmix {:.3e} <= erm {:.3e}",
            rv("xdomainmix"),
            rv("erm")
        ),
        rv("xdomainmix") <= rv("erm"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_importance_removal_beats_random() {
    let d = directional();
    let cfg = default_config();
    let bundle = cfg.build_bundle().unwrap();
    let val_idx = bundle.indices(Split::Val);
    let (x, y, dom) = bundle.gather(&val_idx).unwrap();

    let mut class_wins = 0usize;
    let mut domain_wins = 0usize;
    for (seed, ckpt) in &d.checkpoints {
        let params = ModelParams::load(ckpt).unwrap();
        for target in [Head::Class, Head::Domain] {
            let acc_at_half = |strategy: RemovalStrategy| {
                let mut r = rng(*seed);
                metrics::removal_study(&params, &x, &y, &dom, strategy, &[0.5], target, &mut r)
                    .unwrap()[0]
                    .1
            };
            if acc_at_half(RemovalStrategy::Importance) < acc_at_half(RemovalStrategy::Random) {
                match target {
                    Head::Class => class_wins += 1,
                    Head::Domain => domain_wins += 1,
                }
            }
        }
    }
    report(
        10,
        &format!(
            "removal at 0.5: importance strictly below random for class head in {}/5 seeds, domain head in {}/5 (need >= 4)",
            class_wins, domain_wins
        ),
        class_wins >= 4 && domain_wins >= 4,
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_gradient_isolation() {
    let spec = SpuriousBlobsSpec {
        samples_per_domain: 200,
        ..SpuriousBlobsSpec::default()
    };
    let bundle = xdomainmix::data::gen_spurious_blobs(&spec, &mut rng(0)).unwrap();
    let cfg = TrainConfig {
        method: Method::Xdomainmix,
        ..TrainConfig::default()
    };
    let arch = ArchConfig {
        input_dim: bundle.input_dim,
        extractor_hidden: vec![16],
        feature_dim: 8,
        head_hidden: vec![8],
        num_classes: bundle.num_classes,
        num_domains: bundle.num_domains,
    };
    let params = ModelParams::init(&arch, &mut rng(1)).unwrap();
    let mut batches = BatchStream::new(&bundle, cfg.batch_size, rng(2)).unwrap();
    let batch = batches.next_batch().unwrap();
    let mut aug_rng = rng(3);
    let sg = training::build_step(&params, &batch, &cfg, true, 0, &mut aug_rng).unwrap();

    let all_zero = |grads: &[Tensor], nodes: &[(usize, usize)]| {
        nodes
            .iter()
            .all(|&(w, b)| {
                grads[w].data().iter().all(|&v| v == 0.0)
                    && grads[b].data().iter().all(|&v| v == 0.0)
            })
    };
    let class_grads = sg.graph.backward(sg.class_root).unwrap();
    let domain_grads = sg.graph.backward(sg.domain_root).unwrap();
    let domain_head_zero = all_zero(&class_grads, &sg.bound.domain_head);
    let extractor_zero = all_zero(&domain_grads, &sg.bound.extractor);
    report(
        11,
        "augmented-loss gradients vanish on the domain head; domain-loss gradients vanish on the extractor (exact zeros)",
        domain_head_zero && extractor_zero,
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_run_is_byte_deterministic() {
    let mut cfg = default_config();
    if let xdomainmix_cli::config::DatasetSpec::SpuriousBlobs(s) = &mut cfg.dataset {
        s.samples_per_domain = 500;
    }
    cfg.train.method = Method::Xdomainmix;
    cfg.train.warmup_steps = 150;
    cfg.train.total_steps = 600;
    cfg.train.eval_interval = 100;

    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    runner::run(&cfg, 3, &out_a).unwrap();
    runner::run(&cfg, 3, &out_b).unwrap();
    let bytes_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let bytes_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    report(
        12,
        "two identical run invocations produce byte-identical metrics.csv",
        bytes_a == bytes_b,
    );
}
