//! Experiment configuration: a flat `key = value` file with dotted section
//! prefixes, `#` comments, and strict unknown-key rejection. Every default
//! that fills an unspecified field is recorded so the metadata file makes a
//! run reconstructible from its outputs alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use metaopt_core::attacks::{AttackConfig, AttackKind};
use metaopt_core::meta::AlphaPolicy;

pub const DATA_DIR_ENV: &str = "METAOPT_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Protocol arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// The meta-optimizer's own (adversarial) training trajectory.
    L2L,
    /// Frozen adversarially-trained rule on clean data, evaluated adversarially.
    L2LTransfer,
    /// Frozen clean-trained rule evaluated adversarially.
    TransferNot,
    /// Hand-designed baseline under the identical regime.
    Adam,
}

impl Arm {
    pub fn label(&self) -> &'static str {
        match self {
            Arm::L2L => "L2L",
            Arm::L2LTransfer => "L2L-Transfer",
            Arm::TransferNot => "Transfer-NOT",
            Arm::Adam => "ADAM",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        match s.trim() {
            "L2L" => Ok(Arm::L2L),
            "L2L-Transfer" => Ok(Arm::L2LTransfer),
            "Transfer-NOT" => Ok(Arm::TransferNot),
            "ADAM" => Ok(Arm::Adam),
            other => bail!("unknown arm {other:?} (expected L2L, L2L-Transfer, Transfer-NOT, ADAM)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub arms: Vec<Arm>,
    pub epsilon_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub optimizee_steps: usize,
    pub attack_kind: AttackKind,
    pub attack_steps: usize,
    pub attack_step_size: Option<f64>,
    /// Loss the meta-optimizer trains under (the L2L arm).
    pub alpha_meta: AlphaPolicy,
    /// Loss the optimizee trains under in the transfer phase.
    pub alpha_transfer: AlphaPolicy,
    pub meta_episodes: usize,
    pub meta_unroll: usize,
    pub meta_lr: f64,
    pub preprocess_p: f64,
    pub meta_steps_per_episode: usize,
    pub vary_episode_init: bool,
    pub adam_lr: f64,
    /// Keys that were filled by defaults rather than the file.
    pub defaulted: Vec<(String, String)>,
}

impl ExperimentConfig {
    pub fn attack_for(&self, epsilon: f64) -> AttackConfig {
        let mut cfg = match self.attack_kind {
            AttackKind::Fgsm => AttackConfig::fgsm(epsilon),
            AttackKind::Pgd => AttackConfig::pgd(epsilon, self.attack_steps),
        };
        if let Some(s) = self.attack_step_size {
            cfg = cfg.with_step_size(s);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_list.is_empty() {
            bail!("epsilons must be non-empty");
        }
        if self.arms.is_empty() {
            bail!("arms must be non-empty");
        }
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        for &e in &self.epsilon_list {
            self.attack_for(e)
                .validate()
                .map_err(|err| anyhow!("epsilon {e}: {err}"))?;
        }
        if self.meta_steps_per_episode % self.meta_unroll != 0 {
            bail!(
                "meta.unroll {} must divide meta.steps_per_episode {}",
                self.meta_unroll,
                self.meta_steps_per_episode
            );
        }
        Ok(())
    }
}

fn parse_policy(s: &str) -> Result<AlphaPolicy> {
    let s = s.trim();
    if s == "clean-only" {
        return Ok(AlphaPolicy::CleanOnly);
    }
    if s == "adversarial-only" {
        return Ok(AlphaPolicy::AdversarialOnly);
    }
    if let Some(rest) = s.strip_prefix("mixed:") {
        let a: f64 = rest
            .trim()
            .parse()
            .with_context(|| format!("bad mixed alpha {rest:?}"))?;
        return Ok(AlphaPolicy::Mixed(a));
    }
    bail!("unknown alpha policy {s:?} (expected clean-only, adversarial-only, mixed:<alpha>)")
}

pub fn policy_label(p: AlphaPolicy) -> String {
    match p {
        AlphaPolicy::CleanOnly => "clean-only".into(),
        AlphaPolicy::AdversarialOnly => "adversarial-only".into(),
        AlphaPolicy::Mixed(a) => format!("mixed:{a}"),
    }
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(s: &str, f: F) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(f)
        .collect()
}

/// Parse the flat key-value format. Unknown keys are errors.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), lineno + 1))?;
        let key = k.trim().to_string();
        if kv.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("{}:{}: duplicate key {key}", path.display(), lineno + 1);
        }
    }

    let known = [
        "dataset",
        "data_dir",
        "output_dir",
        "arms",
        "epsilons",
        "seeds",
        "batch_size",
        "optimizee_steps",
        "attack.kind",
        "attack.steps",
        "attack.step_size",
        "alpha.meta",
        "alpha.transfer",
        "meta.episodes",
        "meta.unroll",
        "meta.lr",
        "meta.preprocess_p",
        "meta.steps_per_episode",
        "meta.vary_episode_init",
        "adam.lr",
    ];
    for k in kv.keys() {
        if !known.contains(&k.as_str()) {
            bail!("unknown config key {k:?}");
        }
    }

    let mut defaulted: Vec<(String, String)> = Vec::new();
    let take = |key: &str| kv.get(key).cloned();
    let dataset = match take("dataset").as_deref() {
        Some("mnist") => DatasetKind::Mnist,
        Some("cifar10") => DatasetKind::Cifar10,
        Some(other) => bail!("unknown dataset {other:?}"),
        None => bail!("dataset is required"),
    };
    let is_mnist = dataset == DatasetKind::Mnist;

    let data_dir = match std::env::var(DATA_DIR_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(
            take("data_dir").ok_or_else(|| anyhow!("data_dir is required (or set {DATA_DIR_ENV})"))?,
        ),
    };
    let output_dir = PathBuf::from(take("output_dir").ok_or_else(|| anyhow!("output_dir is required"))?);

    let arms = match take("arms") {
        Some(v) => parse_list(&v, Arm::parse)?,
        None => {
            defaulted.push(("arms".into(), "L2L, L2L-Transfer, Transfer-NOT, ADAM".into()));
            vec![Arm::L2L, Arm::L2LTransfer, Arm::TransferNot, Arm::Adam]
        }
    };
    let epsilon_list = match take("epsilons") {
        Some(v) => parse_list(&v, |p| p.parse::<f64>().context("bad epsilon"))?,
        None => {
            defaulted.push(("epsilons".into(), "0.05, 0.1, 0.2, 0.3".into()));
            vec![0.05, 0.1, 0.2, 0.3]
        }
    };
    let seeds = match take("seeds") {
        Some(v) => parse_list(&v, |p| p.parse::<u64>().context("bad seed"))?,
        None => {
            defaulted.push(("seeds".into(), "1, 2, 3, 4, 5".into()));
            vec![1, 2, 3, 4, 5]
        }
    };

    fn num(
        kv: &BTreeMap<String, String>,
        defaulted: &mut Vec<(String, String)>,
        key: &str,
        default: f64,
    ) -> Result<f64> {
        match kv.get(key) {
            Some(v) => v.parse::<f64>().with_context(|| format!("bad {key}: {v:?}")),
            None => {
                defaulted.push((key.into(), format!("{default}")));
                Ok(default)
            }
        }
    }

    let batch_size = num(&kv, &mut defaulted, "batch_size", 128.0)? as usize;
    let optimizee_steps = num(
        &kv,
        &mut defaulted,
        "optimizee_steps",
        if is_mnist { 100.0 } else { 1000.0 },
    )? as usize;

    let attack_kind = match take("attack.kind").as_deref() {
        Some("fgsm") | None => {
            if take("attack.kind").is_none() {
                defaulted.push(("attack.kind".into(), "fgsm".into()));
            }
            AttackKind::Fgsm
        }
        Some("pgd") => AttackKind::Pgd,
        Some(other) => bail!("unknown attack.kind {other:?}"),
    };
    let attack_steps = num(&kv, &mut defaulted, "attack.steps", 7.0)? as usize;
    let attack_step_size = match kv.get("attack.step_size") {
        Some(v) if !v.is_empty() => Some(v.parse::<f64>().context("bad attack.step_size")?),
        _ => {
            defaulted.push(("attack.step_size".into(), "2.5*epsilon/steps".into()));
            None
        }
    };

    let alpha_meta = match take("alpha.meta") {
        Some(v) => parse_policy(&v)?,
        None => {
            // Mixed loss for the single-step attack; iterated attacks train
            // on perturbed examples alone.
            let d = match attack_kind {
                AttackKind::Fgsm => AlphaPolicy::Mixed(0.5),
                AttackKind::Pgd => AlphaPolicy::AdversarialOnly,
            };
            defaulted.push(("alpha.meta".into(), policy_label(d)));
            d
        }
    };
    let alpha_transfer = match take("alpha.transfer") {
        Some(v) => parse_policy(&v)?,
        None => {
            defaulted.push(("alpha.transfer".into(), "clean-only".into()));
            AlphaPolicy::CleanOnly
        }
    };

    let meta_episodes =
        num(&kv, &mut defaulted, "meta.episodes", if is_mnist { 100.0 } else { 5.0 })? as usize;
    let meta_unroll = num(&kv, &mut defaulted, "meta.unroll", 20.0)? as usize;
    let meta_lr = num(&kv, &mut defaulted, "meta.lr", 0.001)?;
    let preprocess_p = num(&kv, &mut defaulted, "meta.preprocess_p", 10.0)?;
    let meta_steps_per_episode =
        num(&kv, &mut defaulted, "meta.steps_per_episode", optimizee_steps as f64)? as usize;
    let vary_episode_init = match kv.get("meta.vary_episode_init").map(String::as_str) {
        Some("true") => true,
        Some("false") => false,
        Some(other) => bail!("bad meta.vary_episode_init {other:?}"),
        None => {
            defaulted.push(("meta.vary_episode_init".into(), "false".into()));
            false
        }
    };
    let adam_lr = num(&kv, &mut defaulted, "adam.lr", 0.001)?;

    let cfg = ExperimentConfig {
        dataset,
        data_dir,
        output_dir,
        arms,
        epsilon_list,
        seeds,
        batch_size,
        optimizee_steps,
        attack_kind,
        attack_steps,
        attack_step_size,
        alpha_meta,
        alpha_transfer,
        meta_episodes,
        meta_unroll,
        meta_lr,
        preprocess_p,
        meta_steps_per_episode,
        vary_episode_init,
        adam_lr,
        defaulted,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text, path)
}

fn fmt_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// The resolved-run record: every effective setting, which of them were
/// defaults, and the fixed design constants of this implementation.
pub fn metadata_text(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let tag = if cfg.defaulted.iter().any(|(dk, _)| dk == k) {
            "   # default"
        } else {
            ""
        };
        let _ = writeln!(out, "{k} = {v}{tag}");
    };
    line("dataset", cfg.dataset.name().into());
    line("data_dir", cfg.data_dir.display().to_string());
    line("output_dir", cfg.output_dir.display().to_string());
    line(
        "arms",
        cfg.arms.iter().map(|a| a.label()).collect::<Vec<_>>().join(", "),
    );
    line("epsilons", fmt_f64_list(&cfg.epsilon_list));
    line(
        "seeds",
        cfg.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "),
    );
    line("batch_size", cfg.batch_size.to_string());
    line("optimizee_steps", cfg.optimizee_steps.to_string());
    line(
        "attack.kind",
        match cfg.attack_kind {
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::Pgd => "pgd".into(),
        },
    );
    line("attack.steps", cfg.attack_steps.to_string());
    line(
        "attack.step_size",
        cfg.attack_step_size
            .map(|s| s.to_string())
            .unwrap_or_else(|| "2.5*epsilon/steps".into()),
    );
    line("alpha.meta", policy_label(cfg.alpha_meta));
    line("alpha.transfer", policy_label(cfg.alpha_transfer));
    line("meta.episodes", cfg.meta_episodes.to_string());
    line("meta.unroll", cfg.meta_unroll.to_string());
    line("meta.lr", cfg.meta_lr.to_string());
    line("meta.preprocess_p", cfg.preprocess_p.to_string());
    line("meta.steps_per_episode", cfg.meta_steps_per_episode.to_string());
    line("meta.vary_episode_init", cfg.vary_episode_init.to_string());
    line("adam.lr", cfg.adam_lr.to_string());

    out.push_str(concat!(
        "\n# fixed design constants\n",
        "pixel_normalization = divide-by-255, no mean centering\n",
        "fold_split = seeded shuffle, first half (rounded up) to the meta fold\n",
        "batching = epoch shuffle per seed, short final batch dropped, one-hot labels\n",
        "init = normal(0, sqrt(2/fan_in)) truncated at 2 sigma; biases 0; bn scale 1, shift 0\n",
        "optimizee_init = identical values across arms and episodes for a given seed\n",
        "mnist_mlp = flatten -> 784x20 -> relu -> 20x10 -> softmax cross-entropy\n",
        "cifar_convnet = 3x[conv3x3(16ch, no bias) -> batchnorm(eps 1e-5, momentum 0.9) -> relu -> avgpool2x2] -> 256x32 -> relu -> 32x10\n",
        "update_rule = two-layer LSTM, hidden 20, coordinatewise shared weights per group, forget bias 1.0, zero-initialized projection, output scale 0.1\n",
        "gradient_preprocessing = (log|g|/p, sign g) for |g| >= e^-p, else (-1, e^p g)\n",
        "meta_objective = sum of post-update training losses per truncation window\n",
        "meta_updates = ADAM (beta1 0.9, beta2 0.999, eps 1e-8) on the window loss\n",
        "first_order = optimizee gradients stop-gradiented before entering the update rule\n",
        "pgd = no random start; per-step projection onto the epsilon ball, then onto [0,1]\n",
        "adam_baseline = beta1 0.9, beta2 0.999, eps 1e-8\n",
        "bn_statistics = batch statistics everywhere; running buffers updated only by gradient-producing passes\n",
        "transfer_batches = same per-seed batch stream for every arm\n",
        "csv.columns = step,train_loss,adv_eval_loss\n",
    ));
    out
}
