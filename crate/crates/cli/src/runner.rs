//! Grid orchestration: for every (epsilon, seed, arm) cell, produce one loss
//! curve and one CSV. Meta-training results are shared where the protocol
//! allows it: the adversarially trained rule per (epsilon, seed), the
//! clean-trained rule per seed (it never sees the attack, so it cannot
//! depend on epsilon).

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use metaopt_core::data::{load_cifar10, load_mnist, split_twofold, Dataset, FoldPair, Split};
use metaopt_core::lstm::{GroupedMetaOptimizer, LstmPhi};
use metaopt_core::meta::{
    adam_run, meta_train, transfer_run, AlphaPolicy, Curve, MetaTrainConfig, TransferConfig,
};
use metaopt_core::models::{init_params, Arch, ModelSpec, ParamGroup};
use metaopt_core::optim::AdamHyper;

use crate::config::{metadata_text, Arm, DatasetKind, ExperimentConfig};

pub struct CellResult {
    pub arm: Arm,
    pub epsilon: f64,
    pub seed: u64,
    pub curve: Curve,
    pub path: PathBuf,
}

pub struct RunOutput {
    pub cells: Vec<CellResult>,
    pub metadata_path: PathBuf,
}

fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&cfg.data_dir, Split::Train),
        DatasetKind::Cifar10 => load_cifar10(&cfg.data_dir, Split::Train),
    }
    .with_context(|| format!("loading {} from {}", cfg.dataset.name(), cfg.data_dir.display()))?;
    Ok(d)
}

fn model_spec(cfg: &ExperimentConfig, seed: u64) -> ModelSpec {
    let arch = match cfg.dataset {
        DatasetKind::Mnist => Arch::MnistMlp,
        DatasetKind::Cifar10 => Arch::CifarConvnet,
    };
    // One initialization per run seed, shared by every arm and episode.
    ModelSpec::new(arch, mix(seed, 0x1217))
}

/// Trained shared weights plus the recorded in-training trajectory.
struct MetaArtifact {
    phis: Vec<(ParamGroup, LstmPhi)>,
    curve: Curve,
}

fn run_meta(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    folds: &FoldPair,
    policy: AlphaPolicy,
    epsilon: f64,
    seed: u64,
    stream_tag: u64,
) -> Result<MetaArtifact> {
    let mcfg = MetaTrainConfig {
        policy,
        attack: cfg.attack_for(epsilon),
        unroll: cfg.meta_unroll,
        steps_per_episode: cfg.meta_steps_per_episode,
        episodes: cfg.meta_episodes,
        meta_lr: cfg.meta_lr,
        preprocess_p: cfg.preprocess_p,
        batch_size: cfg.batch_size,
        seed: mix(seed, stream_tag),
        vary_episode_init: cfg.vary_episode_init,
    };
    let result = meta_train(&mcfg, spec, &folds.meta_fold)?;
    for d in &result.diverged {
        eprintln!(
            "note: meta-training episode {} aborted at step {} (seed {})",
            d.episode, d.step, d.seed
        );
    }
    let phis = result
        .optimizer
        .groups()
        .map(|g| (g, result.optimizer.phi(g).clone()))
        .collect();
    Ok(MetaArtifact {
        phis,
        curve: result.final_episode_curve,
    })
}

fn rebuild_optimizer(spec: &ModelSpec, phis: &[(ParamGroup, LstmPhi)]) -> GroupedMetaOptimizer {
    let params = init_params(spec);
    GroupedMetaOptimizer::for_params(&params, |g| {
        phis.iter()
            .find(|(pg, _)| *pg == g)
            .map(|(_, phi)| phi.clone())
            .expect("phi for group")
    })
}

fn transfer_config(cfg: &ExperimentConfig, epsilon: f64, seed: u64) -> TransferConfig {
    TransferConfig {
        steps: cfg.optimizee_steps,
        policy: cfg.alpha_transfer,
        attack_train: cfg.attack_for(epsilon),
        attack_eval: cfg.attack_for(epsilon),
        preprocess_p: cfg.preprocess_p,
        batch_size: cfg.batch_size,
        // Identical batch stream for every arm at this seed.
        seed,
    }
}

pub fn curve_csv(curve: &Curve) -> String {
    let mut out = String::from("step,train_loss,adv_eval_loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.train_loss, p.adv_eval_loss));
    }
    out
}

pub fn cell_file_name(arm: Arm, epsilon: f64, seed: u64) -> String {
    format!("{}_eps{}_seed{}.csv", arm.label(), epsilon, seed)
}

/// Execute the full grid and write one CSV per cell plus the run metadata.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output dir {}", cfg.output_dir.display()))?;
    let metadata_path = cfg.output_dir.join("run_metadata.txt");
    fs::write(&metadata_path, metadata_text(cfg))
        .with_context(|| format!("writing {}", metadata_path.display()))?;

    let started = Instant::now();
    let dataset = load_dataset(cfg)?;
    let folds: HashMap<u64, Arc<FoldPair>> = cfg
        .seeds
        .iter()
        .map(|&s| (s, Arc::new(split_twofold(&dataset, s))))
        .collect();
    drop(dataset);

    // Which meta-trainings does the requested grid need?
    let needs_adv = cfg.arms.iter().any(|a| matches!(a, Arm::L2L | Arm::L2LTransfer));
    let needs_clean = cfg.arms.contains(&Arm::TransferNot);
    let mut adv_jobs: Vec<(u64, u64)> = Vec::new(); // (eps bits, seed)
    if needs_adv {
        for &e in &cfg.epsilon_list {
            for &s in &cfg.seeds {
                if !adv_jobs.contains(&(e.to_bits(), s)) {
                    adv_jobs.push((e.to_bits(), s));
                }
            }
        }
    }
    let clean_jobs: Vec<u64> = if needs_clean { cfg.seeds.clone() } else { vec![] };

    let adv_results: HashMap<(u64, u64), Arc<MetaArtifact>> = adv_jobs
        .par_iter()
        .map(|&(eb, seed)| {
            let epsilon = f64::from_bits(eb);
            let spec = model_spec(cfg, seed);
            let art = run_meta(
                cfg,
                &spec,
                &folds[&seed],
                cfg.alpha_meta,
                epsilon,
                seed,
                0xad5,
            )
            .with_context(|| format!("meta-training (adversarial) eps={epsilon} seed={seed}"))?;
            eprintln!(
                "meta-trained adversarial rule eps={epsilon} seed={seed} [{:.0?}]",
                started.elapsed()
            );
            Ok(((eb, seed), Arc::new(art)))
        })
        .collect::<Result<_>>()?;

    let clean_results: HashMap<u64, Arc<MetaArtifact>> = clean_jobs
        .par_iter()
        .map(|&seed| {
            let spec = model_spec(cfg, seed);
            // The clean rule never generates attacks; epsilon is irrelevant.
            let art = run_meta(
                cfg,
                &spec,
                &folds[&seed],
                AlphaPolicy::CleanOnly,
                0.0,
                seed,
                0xc1e,
            )
            .with_context(|| format!("meta-training (clean) seed={seed}"))?;
            eprintln!(
                "meta-trained clean rule seed={seed} [{:.0?}]",
                started.elapsed()
            );
            Ok((seed, Arc::new(art)))
        })
        .collect::<Result<_>>()?;

    // Grid cells.
    let mut grid: Vec<(Arm, f64, u64)> = Vec::new();
    for &e in &cfg.epsilon_list {
        for &s in &cfg.seeds {
            for &a in &cfg.arms {
                grid.push((a, e, s));
            }
        }
    }
    let cells: Vec<CellResult> = grid
        .par_iter()
        .map(|&(arm, epsilon, seed)| {
            let spec = model_spec(cfg, seed);
            let fold = &folds[&seed];
            let tcfg = transfer_config(cfg, epsilon, seed);
            let curve = match arm {
                Arm::L2L => adv_results[&(epsilon.to_bits(), seed)].curve.clone(),
                Arm::L2LTransfer => {
                    let opt =
                        rebuild_optimizer(&spec, &adv_results[&(epsilon.to_bits(), seed)].phis);
                    transfer_run(&opt, &spec, &fold.transfer_fold, &tcfg)?
                }
                Arm::TransferNot => {
                    let opt = rebuild_optimizer(&spec, &clean_results[&seed].phis);
                    transfer_run(&opt, &spec, &fold.transfer_fold, &tcfg)?
                }
                Arm::Adam => adam_run(
                    &spec,
                    &fold.transfer_fold,
                    &tcfg,
                    AdamHyper::with_lr(cfg.adam_lr),
                )?,
            };
            if let Some(bad) = curve
                .iter()
                .find(|p| !p.train_loss.is_finite() || !p.adv_eval_loss.is_finite())
            {
                bail!(
                    "non-finite loss: arm={} epsilon={epsilon} seed={seed} step={}",
                    arm.label(),
                    bad.step
                );
            }
            let path = cfg.output_dir.join(cell_file_name(arm, epsilon, seed));
            fs::write(&path, curve_csv(&curve))
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!(
                "wrote {} [{:.0?}]",
                path.file_name().unwrap().to_string_lossy(),
                started.elapsed()
            );
            Ok(CellResult {
                arm,
                epsilon,
                seed,
                curve,
                path,
            })
        })
        .collect::<Result<_>>()?;

    Ok(RunOutput {
        cells,
        metadata_path,
    })
}

/// Validate that the configured dataset files exist and parse; returns a
/// human-readable description.
pub fn check_data(cfg: &ExperimentConfig) -> Result<String> {
    let train = load_dataset(cfg)?;
    let test = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&cfg.data_dir, Split::Test),
        DatasetKind::Cifar10 => load_cifar10(&cfg.data_dir, Split::Test),
    };
    let mut out = format!(
        "{}: train n={} shape={:?}",
        cfg.dataset.name(),
        train.len(),
        train.image_shape(),
    );
    match test {
        Ok(t) => out.push_str(&format!(", test n={}", t.len())),
        Err(e) => out.push_str(&format!(", test split unavailable ({e})")),
    }
    Ok(out)
}
