//! Command-line front end: `cv`, `train`, `recommend`, `synth` and
//! `gradcheck`.
//!
//! Run settings come from an optional flat `key = value` file given by
//! `--config`, overridden by flags, and the merged result is written to
//! `config.resolved` in the output directory. Feeding that file back with
//! `--config` reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, write_dataset, SynthConfig};
use crate::eval::{cross_validate, recommend_topk, CvOptions, MetricReport, Variant};
use crate::featurize::{featurize_all_cached, FeatureConfig};
use crate::model::{Checkpoint, Hyper};
use crate::train::{fit, format_log, gradient_check, GradCheckOptions, TrainConfig, GRADCHECK_FLOOR};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const TRAIN_LOG: &str = "train.log";
pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "model.ckpt";
pub const RECOMMENDATIONS: &str = "recommendations.tsv";

/// Gradient check passes below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "ssldr", version, about = "Drug-disease association prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validate one model variant.
    Cv(RunArgs),
    /// Train on every known association and save a checkpoint.
    Train(RunArgs),
    /// Rank unknown diseases for one drug with a saved checkpoint.
    Recommend(RecommendArgs),
    /// Write a clustered synthetic dataset.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key = value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ssldr, ssldr_m or ssldr_a.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Latent factor dimension k.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Worker threads for cross-validation folds.
    #[arg(long)]
    pub parallel_folds: Option<usize>,
    /// Also report F1 at the best threshold.
    #[arg(long)]
    pub f1_sweep: bool,
    /// Contrast unnormalized latent vectors.
    #[arg(long)]
    pub aux_raw: bool,
    /// Directory for cached view vectors.
    #[arg(long)]
    pub feature_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub drug: String,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Also write the ranking to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub drugs: usize,
    #[arg(long, default_value_t = 80)]
    pub diseases: usize,
    #[arg(long, default_value_t = 0.01)]
    pub density: f64,
    /// Dimension of the planted latent factors.
    #[arg(long, default_value_t = 8)]
    pub planted_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub aux_raw: bool,
    /// Drop the auxiliary gradient to show the check catches it.
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

/// Everything a `cv` or `train` run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: Variant,
    pub folds: usize,
    pub parallel_folds: usize,
    pub f1_sweep: bool,
    pub feature_cache: Option<PathBuf>,
    pub seed: u64,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub neg_ratio: f64,
    pub aux_enabled: bool,
    pub encoder_hidden: usize,
    pub aux_raw: bool,
    pub validation_fraction: f64,
    pub validation_neg_ratio: f64,
    pub embedding_dim: usize,
    pub embedding_window: usize,
    pub embedding_negatives: usize,
    pub embedding_epochs: usize,
    pub embedding_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FeatureConfig::default().skipgram;
        Self {
            data: None,
            out: None,
            variant: Variant::Ssldr,
            folds: 10,
            parallel_folds: 1,
            f1_sweep: false,
            feature_cache: None,
            seed: t.seed,
            k: t.k,
            alpha: t.alpha,
            beta: t.beta,
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            neg_ratio: t.neg_ratio,
            aux_enabled: t.aux_enabled,
            encoder_hidden: t.encoder_hidden,
            aux_raw: t.aux_raw,
            validation_fraction: t.validation_fraction,
            validation_neg_ratio: t.validation_neg_ratio,
            embedding_dim: f.dim,
            embedding_window: f.window,
            embedding_negatives: f.negative_samples,
            embedding_epochs: f.epochs,
            embedding_lr: f.learning_rate,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(args: &RunArgs) -> anyhow::Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).with_context(|| format!("failed to read {}", path.display()))?;
                Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => Self::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &args.$flag { cfg.$field = v.clone().into(); })*
            };
        }
        set!(
            data => data,
            out => out,
            feature_cache => feature_cache,
            seed => seed,
            variant => variant,
            alpha => alpha,
            beta => beta,
            lambda => lambda,
            latent_dim => k,
            lr => learning_rate,
            epochs => max_epochs,
            patience => patience,
            batch_size => batch_size,
            folds => folds,
            parallel_folds => parallel_folds,
        );
        cfg.f1_sweep |= args.f1_sweep;
        cfg.aux_raw |= args.aux_raw;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            alpha: self.alpha,
            lambda: self.lambda,
            beta: self.beta,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            neg_ratio: self.neg_ratio,
            seed: self.seed,
            aux_enabled: self.aux_enabled,
            encoder_hidden: self.encoder_hidden,
            aux_raw: self.aux_raw,
            validation_fraction: self.validation_fraction,
            validation_neg_ratio: self.validation_neg_ratio,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        let mut f = FeatureConfig::with_seed(self.seed);
        f.skipgram.dim = self.embedding_dim;
        f.skipgram.window = self.embedding_window;
        f.skipgram.negative_samples = self.embedding_negatives;
        f.skipgram.epochs = self.embedding_epochs;
        f.skipgram.learning_rate = self.embedding_lr;
        f
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            num_folds: self.folds,
            parallel_folds: self.parallel_folds,
            f1_sweep: self.f1_sweep,
            features: self.feature_config(),
            feature_cache: self.feature_cache.clone(),
        }
    }

    fn data_dir(&self) -> anyhow::Result<&Path> {
        self.data.as_deref().context("no dataset given (use --data)")
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        let out = self.out.as_deref().context("no output directory given (use --out)")?;
        fs::create_dir_all(out).with_context(|| format!("failed to create {}", out.display()))?;
        Ok(out)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("failed to write {}", path.display()))
}

pub fn cmd_cv(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let dataset = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    write(out, CONFIG_RESOLVED, &cfg.to_toml())?;

    let outcome = cross_validate(&dataset, &cfg.train_config(), cfg.variant, &cfg.cv_options())?;
    outcome.coverage.check(&dataset.associations)?;

    let mut log = String::new();
    for (fold, f) in outcome.folds.iter().enumerate() {
        let _ = writeln!(log, "# fold {fold}");
        log.push_str(&format_log(&f.history));
    }
    write(out, TRAIN_LOG, &log)?;
    write(out, METRICS_TSV, &outcome.report.to_tsv())?;
    let json = outcome.report.to_json();
    write(out, METRICS_JSON, &json)?;

    let reread: MetricReport = serde_json::from_str(&fs::read_to_string(out.join(METRICS_JSON))?)?;
    if reread.folds.len() != cfg.folds {
        bail!("{METRICS_JSON} has {} folds, expected {}", reread.folds.len(), cfg.folds);
    }
    let m = &outcome.report.mean;
    println!("{}\tauc {:.4}\taupr {:.4}\tf1 {:.4}", cfg.variant, m.auc, m.aupr, m.f1);
    Ok(())
}

pub fn cmd_train(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let dataset = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    write(out, CONFIG_RESOLVED, &cfg.to_toml())?;

    let train = cfg.variant.apply(&cfg.train_config());
    let views = if train.aux_enabled {
        Some(featurize_all_cached(&dataset, &cfg.feature_config(), cfg.feature_cache.as_deref())?)
    } else {
        None
    };
    let state = fit(&dataset.associations, &dataset.drug_sim, views.as_ref(), &train)?;
    write(out, TRAIN_LOG, &format_log(&state.history))?;
    let ckpt = Checkpoint {
        params: state.params,
        seed: cfg.seed,
    };
    ckpt.save(out.join(CHECKPOINT))?;
    Checkpoint::load(out.join(CHECKPOINT))?;
    match state.best_epoch {
        Some(e) => println!("best epoch {e} of {}", state.epoch),
        None => println!("no epochs run; saved initial parameters"),
    }
    Ok(())
}

pub fn cmd_recommend(args: &RecommendArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&args.data)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let rec = recommend_topk(&ckpt.params, &dataset, &args.drug, args.top)?;
    let tsv = rec.to_tsv();
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("failed to create {}", out.display()))?;
        write(out, RECOMMENDATIONS, &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let syn = SynthConfig::new(args.drugs, args.diseases, args.density, args.planted_dim, args.seed).generate()?;
    write_dataset(&syn.dataset, &args.out)?;
    load_dataset(&args.out)?;
    println!(
        "{} drugs, {} diseases, {} associations",
        syn.dataset.num_drugs(),
        syn.dataset.num_diseases(),
        syn.dataset.associations.count_positives()
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<()> {
    let base = GradCheckOptions::default().hyper;
    let opts = GradCheckOptions {
        hyper: Hyper {
            alpha: args.alpha.unwrap_or(base.alpha),
            beta: args.beta.unwrap_or(base.beta),
            lambda: args.lambda.unwrap_or(base.lambda),
            normalize_aux: !args.aux_raw,
            ..base
        },
        seed: args.seed,
        inject_fault: args.inject_bug,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&opts)?;
    println!(
        "max relative error {:.3e} at {} over {} parameters (floor {GRADCHECK_FLOOR:e})",
        report.max_rel_error, report.worst_param, report.num_params
    );
    if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
        bail!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Cv(a) => cmd_cv(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Recommend(a) => cmd_recommend(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_training_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.folds, 10);
        assert_eq!(cfg.cv_options().features, FeatureConfig::with_seed(0));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig {
            data: Some("d".into()),
            alpha: 0.25,
            variant: Variant::SsldrA,
            ..RunConfig::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("variant = \"ssldr_a\""));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "alpha = 0.1\nbeta = 0.2\nseed = 9\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            alpha: Some(0.7),
            latent_dim: Some(16),
            aux_raw: true,
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!((cfg.alpha, cfg.beta, cfg.seed, cfg.k, cfg.aux_raw), (0.7, 0.2, 9, 16, true));
    }

    #[test]
    fn unknown_and_invalid_settings_are_rejected() {
        assert!(RunConfig::from_toml("alhpa = 0.1\n").is_err());
        let args = RunArgs {
            alpha: Some(-1.0),
            ..RunArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }

    #[test]
    fn command_line_parses() {
        let cli = Cli::try_parse_from(["ssldr", "cv", "--data", "x", "--variant", "ssldr_m", "--folds", "3"]).unwrap();
        match cli.command {
            Command::Cv(a) => {
                assert_eq!(a.variant, Some(Variant::SsldrM));
                assert_eq!(a.folds, Some(3));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["ssldr", "cv", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["ssldr", "cv", "--variant", "full"]).is_err());
    }
}
