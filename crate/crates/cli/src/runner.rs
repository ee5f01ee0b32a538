//! Experiment execution: single runs, seed sweeps, the ablation grid, and
//! the study subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use xdomainmix::augmentation::{self};
use xdomainmix::data::{DatasetBundle, Split};
use xdomainmix::metrics::{self, RemovalStrategy};
use xdomainmix::model::{Head, ModelParams};
use xdomainmix::tensor::Tensor;
use xdomainmix::training::{self, AblationFlags, Method, TrainResult};

use crate::config::{CliError, CliResult, ExperimentConfig};
use crate::output;

pub const METHODS: [Method; 4] = [Method::Erm, Method::Xdomainmix, Method::Mixstyle, Method::Dsu];

pub fn parse_method(s: &str) -> CliResult<Method> {
    match s {
        "erm" => Ok(Method::Erm),
        "xdomainmix" => Ok(Method::Xdomainmix),
        "mixstyle" => Ok(Method::Mixstyle),
        "dsu" => Ok(Method::Dsu),
        other => Err(CliError::Config(format!(
            "unknown method '{}': expected erm, xdomainmix, mixstyle, or dsu",
            other
        ))),
    }
}

pub fn parse_strategy(s: &str) -> CliResult<RemovalStrategy> {
    match s {
        "importance" => Ok(RemovalStrategy::Importance),
        "random" => Ok(RemovalStrategy::Random),
        "grad_norm" => Ok(RemovalStrategy::GradNorm),
        other => Err(CliError::Config(format!(
            "unknown strategy '{}': expected importance, random, grad_norm, or all",
            other
        ))),
    }
}

pub fn parse_target(s: &str) -> CliResult<Head> {
    match s {
        "class" => Ok(Head::Class),
        "domain" => Ok(Head::Domain),
        other => Err(CliError::Config(format!(
            "unknown target '{}': expected class or domain",
            other
        ))),
    }
}

/// Selected-checkpoint metrics of one finished run.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub method: String,
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub risk_variance: f64,
    pub cov_distance: f64,
}

/// Metrics of a parameter set under the best-validation selection protocol.
fn eval_params(params: &ModelParams, bundle: &DatasetBundle) -> CliResult<(f64, f64, f64, f64)> {
    let acc_on = |idx: &[usize]| -> CliResult<f64> {
        let (x, y, _) = bundle.gather(idx)?;
        let z = params.extract_plain(&x)?;
        Ok(metrics::accuracy(&params.classify_plain(&z)?, &y)?)
    };
    let test_acc = acc_on(&bundle.indices(Split::Test))?;
    let val_idx = bundle.indices(Split::Val);
    let (val_x, val_y, val_d) = bundle.gather(&val_idx)?;
    let val_z = params.extract_plain(&val_x)?;
    let val_acc = metrics::accuracy(&params.classify_plain(&val_z)?, &val_y)?;

    let train_domains = bundle.train_domains();
    let mut risks = Vec::with_capacity(train_domains.len());
    for &d in &train_domains {
        let idx = bundle.indices_in_domain(Split::Val, d);
        let (x, y, _) = bundle.gather(&idx)?;
        let z = params.extract_plain(&x)?;
        risks.push(metrics::mean_cross_entropy(&params.classify_plain(&z)?, &y)?);
    }
    let risk_variance = metrics::risk_variance(&risks)?;
    let cov = metrics::covariance_distance(
        &val_z,
        &val_y,
        &val_d,
        bundle.num_classes,
        &train_domains,
    )?;
    Ok((test_acc, val_acc, risk_variance, cov.value))
}

/// Train one model, writing metrics.csv, both checkpoints, and the manifest.
pub fn run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<RunOutcome> {
    let mut resolved = cfg.clone();
    resolved.train.seed = seed;
    let bundle = resolved.build_bundle()?;
    let arch = resolved.resolve_arch(&bundle);
    let result: TrainResult = training::train(&resolved.train, &arch, &bundle)?;

    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    output::write_csv(&metrics_path, &result.metrics)?;
    let ckpt = out.join("checkpoint.json");
    let ckpt_best = out.join("checkpoint_best.json");
    output::write_json(&ckpt, &result.final_params)?;
    output::write_json(&ckpt_best, &result.best_params)?;
    output::write_manifest(
        out,
        &resolved,
        seed,
        &[metrics_path.clone(), ckpt.clone(), ckpt_best.clone()],
    )?;

    let (test_acc, val_acc, risk_variance, cov_distance) =
        eval_params(&result.best_params, &bundle)?;
    let outcome = RunOutcome {
        method: resolved.train.method.to_string(),
        seed,
        test_acc,
        val_acc,
        risk_variance,
        cov_distance,
    };
    output::write_json(&out.join("selected.json"), &outcome)?;
    Ok(outcome)
}

/// One job of a sweep: a (config variant, seed) pair with a directory name.
#[derive(Clone)]
pub struct Job {
    pub name: String,
    pub config: ExperimentConfig,
    pub seed: u64,
}

/// Run jobs concurrently (up to `threads`), isolating failures per child.
pub fn run_jobs(jobs: &[Job], out: &Path, threads: usize) -> Vec<Result<RunOutcome, String>> {
    let threads = threads.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<RunOutcome, String>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let dir = out.join("runs").join(&job.name);
                let res = run(&job.config, job.seed, &dir).map_err(|e| e.to_string());
                *results[i].lock().unwrap() = Some(res);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("job executed"))
        .collect()
}

#[derive(Serialize)]
struct SummaryRow {
    kind: &'static str,
    method: String,
    seed: String,
    status: String,
    test_acc: Option<f64>,
    val_acc: Option<f64>,
    risk_variance: Option<f64>,
    test_acc_std: Option<f64>,
    val_acc_std: Option<f64>,
    risk_variance_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cross product of methods and seeds; per-run rows plus mean ± std
/// summary rows per method. Returns (summary path, all children succeeded).
pub fn sweep(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    methods: &[Method],
    out: &Path,
    threads: usize,
) -> CliResult<(PathBuf, bool)> {
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".to_string()));
    }
    let mut jobs = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let mut config = cfg.clone();
            config.train.method = method;
            jobs.push(Job {
                name: format!("{}-s{}", method, seed),
                config,
                seed,
            });
        }
    }
    let results = run_jobs(&jobs, out, threads);

    let mut rows = Vec::new();
    let mut all_ok = true;
    for (job, res) in jobs.iter().zip(&results) {
        match res {
            Ok(o) => rows.push(SummaryRow {
                kind: "run",
                method: o.method.clone(),
                seed: job.seed.to_string(),
                status: "ok".to_string(),
                test_acc: Some(o.test_acc),
                val_acc: Some(o.val_acc),
                risk_variance: Some(o.risk_variance),
                test_acc_std: None,
                val_acc_std: None,
                risk_variance_std: None,
            }),
            Err(msg) => {
                all_ok = false;
                rows.push(SummaryRow {
                    kind: "run",
                    method: job.config.train.method.to_string(),
                    seed: job.seed.to_string(),
                    status: format!("error: {}", msg),
                    test_acc: None,
                    val_acc: None,
                    risk_variance: None,
                    test_acc_std: None,
                    val_acc_std: None,
                    risk_variance_std: None,
                });
            }
        }
    }
    for &method in methods {
        let ok: Vec<&RunOutcome> = jobs
            .iter()
            .zip(&results)
            .filter(|(j, _)| j.config.train.method == method)
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let (t, ts) = mean_std(&ok.iter().map(|o| o.test_acc).collect::<Vec<_>>());
        let (v, vs) = mean_std(&ok.iter().map(|o| o.val_acc).collect::<Vec<_>>());
        let (r, rs) = mean_std(&ok.iter().map(|o| o.risk_variance).collect::<Vec<_>>());
        rows.push(SummaryRow {
            kind: "summary",
            method: method.to_string(),
            seed: String::new(),
            status: "ok".to_string(),
            test_acc: Some(t),
            val_acc: Some(v),
            risk_variance: Some(r),
            test_acc_std: Some(ts),
            val_acc_std: Some(vs),
            risk_variance_std: Some(rs),
        });
    }
    let path = out.join("summary.csv");
    output::write_csv(&path, &rows)?;
    Ok((path, all_ok))
}

/// The ablation grid: baseline plus the four component-flag variants.
pub fn ablation_variants() -> Vec<(&'static str, Method, AblationFlags)> {
    let flags = |mix_cd, mix_ncd, discard_cd| AblationFlags {
        mix_cd,
        mix_ncd,
        discard_cd,
    };
    vec![
        ("erm", Method::Erm, AblationFlags::default()),
        ("mix_cd", Method::Xdomainmix, flags(true, false, false)),
        ("mix_ncd", Method::Xdomainmix, flags(false, true, false)),
        ("mix_both", Method::Xdomainmix, flags(true, true, false)),
        ("mix_both_discard", Method::Xdomainmix, flags(true, true, true)),
    ]
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    seeds: usize,
    status: String,
    test_acc: Option<f64>,
    test_acc_std: Option<f64>,
    val_acc: Option<f64>,
    risk_variance: Option<f64>,
}

pub fn ablate(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    threads: usize,
) -> CliResult<(PathBuf, bool)> {
    if seeds.is_empty() {
        return Err(CliError::Config("ablate needs at least one seed".to_string()));
    }
    let variants = ablation_variants();
    let mut jobs = Vec::new();
    for (name, method, flags) in &variants {
        for &seed in seeds {
            let mut config = cfg.clone();
            config.train.method = *method;
            config.train.ablation = *flags;
            jobs.push(Job {
                name: format!("{}-s{}", name, seed),
                config,
                seed,
            });
        }
    }
    let results = run_jobs(&jobs, out, threads);

    let mut rows = Vec::new();
    let mut all_ok = true;
    for (v, (name, _, _)) in variants.iter().enumerate() {
        let slice = &results[v * seeds.len()..(v + 1) * seeds.len()];
        let ok: Vec<&RunOutcome> = slice.iter().filter_map(|r| r.as_ref().ok()).collect();
        let failures = slice.len() - ok.len();
        if failures > 0 {
            all_ok = false;
        }
        if ok.is_empty() {
            rows.push(AblationRow {
                variant: name,
                seeds: seeds.len(),
                status: format!("{} failed", failures),
                test_acc: None,
                test_acc_std: None,
                val_acc: None,
                risk_variance: None,
            });
            continue;
        }
        let (t, ts) = mean_std(&ok.iter().map(|o| o.test_acc).collect::<Vec<_>>());
        let (v_acc, _) = mean_std(&ok.iter().map(|o| o.val_acc).collect::<Vec<_>>());
        let (r, _) = mean_std(&ok.iter().map(|o| o.risk_variance).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: name,
            seeds: seeds.len(),
            status: if failures == 0 {
                "ok".to_string()
            } else {
                format!("{} failed", failures)
            },
            test_acc: Some(t),
            test_acc_std: Some(ts),
            val_acc: Some(v_acc),
            risk_variance: Some(r),
        });
    }
    let path = out.join("ablation.csv");
    output::write_csv(&path, &rows)?;
    Ok((path, all_ok))
}

/// Rows cap for the divergence study's kernel sums.
const MMD_STUDY_CAP: usize = 512;

#[derive(Serialize)]
struct MmdRow {
    kind: &'static str,
    seed: String,
    method: &'static str,
    mmd: f64,
    mmd_std: Option<f64>,
    bandwidth: Option<f64>,
    orig_hash: String,
}

/// Per seed: train one model, freeze one shared set of original features,
/// apply each augmenter with its own stream, and compare divergences under
/// one shared bandwidth.
pub fn mmd_study(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    bandwidth_override: Option<f64>,
    threads: usize,
) -> CliResult<PathBuf> {
    if seeds.is_empty() {
        return Err(CliError::Config("mmd-study needs at least one seed".to_string()));
    }
    let mut base = cfg.clone();
    base.train.method = Method::Xdomainmix;
    let jobs: Vec<Job> = seeds
        .iter()
        .map(|&seed| Job {
            name: format!("xdomainmix-s{}", seed),
            config: base.clone(),
            seed,
        })
        .collect();
    let results = run_jobs(&jobs, out, threads);

    let bundle = base.build_bundle()?;
    let val_idx = bundle.indices(Split::Val);
    let cap = val_idx.len().min(MMD_STUDY_CAP);
    let sub = &val_idx[..cap];
    let (x, y, d) = bundle.gather(sub)?;

    let mut rows: Vec<MmdRow> = Vec::new();
    let mut per_method: std::collections::BTreeMap<&'static str, Vec<f64>> = Default::default();
    for (&seed, res) in seeds.iter().zip(&results) {
        if let Err(msg) = res {
            return Err(CliError::Run(anyhow::anyhow!(
                "mmd-study child for seed {} failed: {}",
                seed,
                msg
            )));
        }
        let params = ModelParams::load(
            &out.join("runs")
                .join(format!("xdomainmix-s{}", seed))
                .join("checkpoint_best.json"),
        )?;
        let z = params.extract_plain(&x)?;
        let orig_hash = feature_hash(&z);
        let bandwidth = match bandwidth_override {
            Some(b) => b,
            None => {
                let h = metrics::median_pairwise_distance(&z, &z);
                if h <= 0.0 {
                    return Err(CliError::Run(anyhow::anyhow!(
                        "degenerate features: pass --bandwidth explicitly"
                    )));
                }
                h
            }
        };

        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(100 + id);
            r
        };
        let aug_sets: Vec<(&'static str, Tensor)> = vec![
            ("identity", z.clone()),
            (
                "xdomainmix",
                training::xdomainmix_augment(
                    &params,
                    &z,
                    &y,
                    &d,
                    0.5,
                    base.train.p_discard,
                    base.train.pairing_strategy,
                    &mut stream(0),
                )?
                .0,
            ),
            (
                "mixstyle",
                augmentation::mixstyle(&z, 1.0, base.train.mixstyle_alpha, &mut stream(1))?,
            ),
            ("dsu", augmentation::dsu(&z, 1.0, base.train.dsu_eps, &mut stream(2))?),
        ];
        for (method, aug) in aug_sets {
            let value = metrics::mmd(&z, &aug, Some(bandwidth))?;
            per_method.entry(method).or_default().push(value);
            rows.push(MmdRow {
                kind: "run",
                seed: seed.to_string(),
                method,
                mmd: value,
                mmd_std: None,
                bandwidth: Some(bandwidth),
                orig_hash: orig_hash.clone(),
            });
        }
    }
    for (method, values) in &per_method {
        let (m, s) = mean_std(values);
        rows.push(MmdRow {
            kind: "summary",
            seed: String::new(),
            method,
            mmd: m,
            mmd_std: Some(s),
            bandwidth: bandwidth_override,
            orig_hash: String::new(),
        });
    }
    let path = out.join("mmd.csv");
    output::write_csv(&path, &rows)?;
    Ok(path)
}

pub fn feature_hash(z: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(z.len() * 8);
    for v in z.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    output::bytes_hash(&bytes)
}

#[derive(Serialize)]
struct RemovalRow {
    fraction: f64,
    accuracy: f64,
}

/// Plot-ready removal curves; one CSV per strategy over a shared fraction
/// grid.
pub fn removal_study_cli(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    strategies: &[RemovalStrategy],
    fractions: &[f64],
    target: Head,
    seed: u64,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let params = ModelParams::load(checkpoint)?;
    let bundle = cfg.build_bundle()?;
    let val_idx = bundle.indices(Split::Val);
    let (x, y, d) = bundle.gather(&val_idx)?;
    let target_name = match target {
        Head::Class => "class",
        Head::Domain => "domain",
    };
    let mut paths = Vec::new();
    for &strategy in strategies {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curve = metrics::removal_study(&params, &x, &y, &d, strategy, fractions, target, &mut rng)?;
        let rows: Vec<RemovalRow> = curve
            .into_iter()
            .map(|(fraction, accuracy)| RemovalRow { fraction, accuracy })
            .collect();
        let name = match strategy {
            RemovalStrategy::Importance => "importance",
            RemovalStrategy::Random => "random",
            RemovalStrategy::GradNorm => "grad_norm",
        };
        let path = out.join(format!("removal_{}_{}.csv", name, target_name));
        output::write_csv(&path, &rows)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Original and augmented validation features, tagged per row.
pub fn dump_features(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    out: &Path,
) -> CliResult<PathBuf> {
    let params = ModelParams::load(checkpoint)?;
    let bundle = cfg.build_bundle()?;
    let val_idx = bundle.indices(Split::Val);
    let (x, y, d) = bundle.gather(&val_idx)?;
    let z = params.extract_plain(&x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z_aug, _) = training::xdomainmix_augment(
        &params,
        &z,
        &y,
        &d,
        0.5,
        cfg.train.p_discard,
        cfg.train.pairing_strategy,
        &mut rng,
    )?;

    let k = z.cols();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..k).map(|i| format!("dim_{}", i)).collect();
    header.extend(["y".to_string(), "domain".to_string(), "tag".to_string()]);
    w.write_record(&header)?;
    for (tag, feats) in [("orig", &z), ("aug", &z_aug)] {
        for r in 0..feats.rows() {
            let mut record: Vec<String> = feats.row(r).iter().map(|v| v.to_string()).collect();
            record.extend([y[r].to_string(), d[r].to_string(), tag.to_string()]);
            w.write_record(&record)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Run(anyhow::anyhow!("csv flush: {}", e)))?;
    let path = out.join("features.csv");
    output::atomic_write(&path, &bytes)?;
    Ok(path)
}

#[derive(Serialize)]
struct ProjectionRow {
    px: f64,
    py: f64,
    y: usize,
    domain: usize,
}

pub fn project_2d_cli(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    out: &Path,
) -> CliResult<PathBuf> {
    let params = ModelParams::load(checkpoint)?;
    let bundle = cfg.build_bundle()?;
    let val_idx = bundle.indices(Split::Val);
    let (x, y, d) = bundle.gather(&val_idx)?;
    let z = params.extract_plain(&x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = metrics::project_2d(&z, &y, &d, bundle.num_classes, &mut rng)?;
    let rows: Vec<ProjectionRow> = proj
        .coords
        .iter()
        .zip(&proj.labels)
        .zip(&proj.domains)
        .map(|(([px, py], &y), &domain)| ProjectionRow {
            px: *px,
            py: *py,
            y,
            domain,
        })
        .collect();
    let path = out.join("projection.csv");
    output::write_csv(&path, &rows)?;
    Ok(path)
}
