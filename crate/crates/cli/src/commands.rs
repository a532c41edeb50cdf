use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use openmix::analysis::{delta_stats, delta_trend, record_inversion, verify_inversion_identity, verify_erasure_decomposition};
use openmix::classifier::ClassifierModel;
use openmix::diffusion::{generate_pair_bank, PairBank, Polarity};
use openmix::metrics::evaluate;
use openmix::oracle::NoisePredictorOracle;
use openmix::schedule::{build_linear_schedule, make_path, Direction, NoiseSchedule};
use openmix::trainer::{train, LogRecord};
use openmix::world::{sample_dataset, Dataset, MixtureWorld};

use crate::config::RunConfig;

pub const DATASET: &str = "dataset.csv";
pub const PAIRS: &str = "pairs.csv";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const RUN_LOG: &str = "run_log.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const VERIFY: &str = "verify.json";
pub const MANIFEST: &str = "manifest.json";

fn schedule() -> NoiseSchedule {
    build_linear_schedule(100, 1e-4, 0.02).expect("built-in schedule is valid")
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    /// One entry per command that has run in this directory.
    pub stages: BTreeMap<String, Value>,
    /// SHA-256 of every artifact, keyed by file name.
    pub digests: BTreeMap<String, String>,
}

/// Merges a stage entry and refreshed digests into `out/manifest.json`.
fn record(cfg: &RunConfig, stage: &str, info: Value, files: &[&str]) -> Result<()> {
    let path = cfg.out.join(MANIFEST);
    let mut m: Manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        Err(_) => Manifest::default(),
    };
    m.seed = cfg.seed;
    m.stages.insert(stage.to_string(), info);
    for f in files {
        m.digests.insert(f.to_string(), sha256_file(&cfg.out.join(f))?);
    }
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> openmix::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn prepare(cfg: &RunConfig) -> Result<(MixtureWorld, Dataset)> {
    let world = cfg.load_world()?;
    let dataset = sample_dataset(&world, &cfg.dataset).context("sampling dataset")?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok((world, dataset))
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let (world, dataset) = prepare(cfg)?;
    let s = schedule();
    let oracle = NoisePredictorOracle::new(&world, &s);
    let bank = generate_pair_bank(&oracle, &dataset.train_view(), &cfg.generation)?;
    write_with(&cfg.out.join(DATASET), |b| dataset.write_csv(b))?;
    write_with(&cfg.out.join(PAIRS), |b| bank.write_csv(b))?;
    fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    record(
        cfg,
        "generate",
        json!({
            "train": dataset.train.len(),
            "test": dataset.test.len(),
            "known_classes": world.known_count(),
            "positives": bank.positives().len(),
            "negatives": bank.negatives().len(),
            "generation": cfg.generation,
        }),
        &[DATASET, PAIRS, "config.json"],
    )?;
    Ok(cfg.out.join(PAIRS))
}

fn load_bank(cfg: &RunConfig, dataset: &Dataset, known_classes: &[openmix::ClassId]) -> Result<PairBank> {
    let known = known_classes.len();
    let path = cfg.out.join(PAIRS);
    let file = fs::File::open(&path).with_context(|| {
        format!("missing pair bank {}: run `openmix generate` with the same config first", path.display())
    })?;
    let bank = PairBank::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let want = dataset.train.len() * known;
    if bank.positives().len() != want || bank.negatives().len() != want {
        bail!(
            "{} holds {} positives and {} negatives but the dataset needs {want} of each; \
             regenerate it with this config",
            path.display(),
            bank.positives().len(),
            bank.negatives().len()
        );
    }
    for s in &dataset.train {
        for c in known_classes {
            for pol in [Polarity::Positive, Polarity::Negative] {
                if bank.find(pol, s.id, *c).is_none() {
                    bail!(
                        "{} has no {} instance for sample {} and class {c}; regenerate it with this config",
                        path.display(),
                        pol.as_str(),
                        s.id
                    );
                }
            }
        }
    }
    Ok(bank)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let (world, dataset) = prepare(cfg)?;
    let bank = load_bank(cfg, &dataset, &world.known_classes())?;
    let outcome = train(&world, &dataset, &bank, &cfg.training)?;
    write_with(&cfg.out.join(CHECKPOINT), |b| outcome.model.write_checkpoint(b))?;
    write_with(&cfg.out.join(RUN_LOG), |b| LogRecord::write_jsonl(&outcome.log, b))?;
    let rounds: Vec<Value> = outcome
        .labeling_rounds()
        .map(|r| {
            json!({
                "round": r.round, "epoch": r.epoch, "pool_after": r.pool_after,
                "selected_known": r.selected_known, "selected_other": r.selected_other, "precision": r.precision,
            })
        })
        .collect();
    record(
        cfg,
        "train",
        json!({
            "epochs": cfg.training.epochs,
            "final_pool": outcome.ledger.pool().len(),
            "labeled_known": outcome.ledger.d_known().len(),
            "labeled_other": outcome.ledger.d_unknown().len(),
            "rounds": rounds,
        }),
        &[CHECKPOINT, RUN_LOG],
    )?;
    Ok(cfg.out.join(CHECKPOINT))
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<openmix::metrics::EvalReport> {
    let (world, dataset) = prepare(cfg)?;
    let path = checkpoint.map_or_else(|| cfg.out.join(CHECKPOINT), Path::to_path_buf);
    let file = fs::File::open(&path)
        .with_context(|| format!("missing checkpoint {}: run `openmix train` first", path.display()))?;
    let model = ClassifierModel::read_checkpoint(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    if model.dims() != world.dims() || model.known_count() != world.known_count() {
        bail!(
            "checkpoint {} has dims {} and {} known classes but the world has dims {} and {}",
            path.display(),
            model.dims(),
            model.known_count(),
            world.dims(),
            world.known_count()
        );
    }
    let report = evaluate(&model, &dataset.test)?;
    write_with(&cfg.out.join(METRICS_CSV), |b| report.write_csv(b))?;
    fs::write(cfg.out.join(METRICS_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    record(cfg, "eval", json!({ "checkpoint": path, "report": report }), &[METRICS_CSV, METRICS_JSON])?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct PairCheck {
    x0: Vec<f64>,
    class: u32,
    inversion_residual: f64,
    decomposition_residual: f64,
    double_sum_residual: f64,
    class_gradient_norm: f64,
    first_order_norm: f64,
}

pub fn verify(cfg: &RunConfig) -> Result<Value> {
    let world = cfg.load_world()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let s = schedule();
    let oracle = NoisePredictorOracle::new(&world, &s);
    let v = &cfg.verify;
    let opts = v.options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(cfg.dataset.rng_seed));
    let classes = world.class_ids();
    let known = world.known_classes();
    let mut checks = Vec::with_capacity(v.pairs);
    let mut delta_sum: Vec<f64> = Vec::new();
    let mut decaying = 0usize;
    let anchors = make_path(&s, opts.n_steps, Direction::Forward)?.timesteps()[..=v.depth.min(opts.n_steps)].to_vec();
    for _ in 0..v.pairs {
        let c = *classes.choose(&mut rng).expect("world has classes");
        let x0 = world.sample_class(c, &mut rng)?;
        let y = *known.choose(&mut rng).expect("world has known classes");
        let t1 = verify_inversion_identity(&oracle, &x0, y, v.depth, &opts)?;
        let t2 = verify_erasure_decomposition(&oracle, &x0, y, v.depth, &opts)?;
        if anchors.len() > 1 {
            let d = delta_stats(&record_inversion(&oracle, &x0, &anchors, Some(y), opts.scheme)?)?;
            decaying += usize::from(delta_trend(&d).decays);
            delta_sum.resize(d.len(), 0.0);
            for (acc, x) in delta_sum.iter_mut().zip(&d) {
                *acc += x.unwrap_or(0.0);
            }
        }
        checks.push(PairCheck {
            x0,
            class: y.0,
            inversion_residual: t1.residual,
            decomposition_residual: t2.residual,
            double_sum_residual: t2.double_sum_residual,
            class_gradient_norm: t1.class_gradient_norm,
            first_order_norm: t2.first_order_norm,
        });
    }
    let n = v.pairs.max(1) as f64;
    let mean_delta: Vec<Option<f64>> = delta_sum.iter().map(|d| Some(d / n)).collect();
    let trend = delta_trend(&mean_delta);
    let max = |f: fn(&PairCheck) -> f64| checks.iter().map(f).fold(0.0, f64::max);
    let depth0 = match checks.first() {
        Some(p) => verify_inversion_identity(&oracle, &p.x0, openmix::ClassId(p.class), 0, &opts)?.residual,
        None => 0.0,
    };
    let report = json!({
        "depth": v.depth,
        "n_steps": opts.n_steps,
        "scheme": opts.scheme,
        "max_inversion_residual": max(|p| p.inversion_residual),
        "max_decomposition_residual": max(|p| p.decomposition_residual),
        "max_double_sum_residual": max(|p| p.double_sum_residual),
        "depth0_residual": depth0,
        "delta": {
            "mean_sampler_order": trend.sampler_order,
            "first": trend.first,
            "last": trend.last,
            "decays": trend.decays,
            "decaying_trajectories": decaying,
        },
        "pairs": checks,
    });
    fs::write(cfg.out.join(VERIFY), serde_json::to_string_pretty(&report)? + "\n")?;
    record(
        cfg,
        "verify",
        json!({ "pairs": v.pairs, "depth": v.depth, "decays": trend.decays }),
        &[VERIFY],
    )?;
    Ok(report)
}
