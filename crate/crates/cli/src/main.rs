use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kde_ood::pipeline::{
    cmd_evaluate, cmd_fit, cmd_score, cmd_select_k, cmd_train_fusion, NamedPath, MODEL_FILE,
};
use kde_ood::synthetic::{SyntheticBenchmark, SyntheticSpec};
use kde_ood::{DistanceMetric, Error, KCandidateSet, NegativeRegime, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "kde-ood", version, about = "Layer-wise KDE out-of-distribution detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick k per layer and fit the density models.
    Fit(Common),
    /// Choose k per layer without writing a model.
    SelectK(Common),
    /// Train fusion weights and store them in the model file.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        /// Model file (default: <out>/model.kdem).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write per-layer scores and fused confidence for a feature file.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compute FPR@95, detection error, AUROC and AUPR against each OOD set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// In-distribution test features (the positive class).
        #[arg(long)]
        in_dist_test: PathBuf,
        #[arg(long, value_name = "NAME=PATH", required = true)]
        ood: Vec<NamedPath>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a small synthetic benchmark (train, test, perturbed, three OOD sets).
    Synth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
    },
}

/// Flags shared by fit, select-k and train-fusion; each overrides the
/// matching field of `--config`.
#[derive(Args)]
struct Common {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    in_dist: Option<PathBuf>,
    #[arg(long)]
    perturbed: Option<PathBuf>,
    #[arg(long, value_name = "NAME=PATH")]
    ood: Vec<NamedPath>,
    /// OOD set held out from fusion training (held-out-ood regime).
    #[arg(long)]
    target: Option<String>,
    /// Reference subset size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metric: Option<DistanceMetric>,
    /// Comma-separated k candidates.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    regime: Option<NegativeRegime>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::read(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.in_dist {
            c.in_dist = Some(v);
        }
        if let Some(v) = self.perturbed {
            c.perturbed = Some(v);
        }
        if !self.ood.is_empty() {
            c.ood = self.ood;
        }
        if let Some(v) = self.target {
            c.target_ood = Some(v);
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.metric {
            c.metric = v;
        }
        if let Some(v) = self.k {
            c.k_candidates = KCandidateSet::new(v)?;
        }
        if let Some(v) = self.regime {
            c.regime = v;
        }
        if let Some(v) = self.out {
            c.out_dir = v;
        }
        Ok(c)
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("KDE_OOD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("KDE_OOD_THREADS must be an integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Fit(common) => {
            let config = common.config()?;
            let model = cmd_fit(&config)?;
            for l in &model.layers {
                println!("{}\tk={}", l.layer_id(), l.k_used());
            }
            println!("wrote {}", config.out_dir.join(MODEL_FILE).display());
        }
        Command::SelectK(common) => {
            let config = common.config()?;
            for r in cmd_select_k(&config)? {
                println!("{}\tk={}", r.layer_id, r.chosen_k);
            }
        }
        Command::TrainFusion { common, model } => {
            let config = common.config()?;
            let path = model.unwrap_or_else(|| config.out_dir.join(MODEL_FILE));
            let updated = cmd_train_fusion(&path, &config)?;
            let f = updated.fusion()?;
            println!(
                "alpha={:?} bias={} epochs={} train_acc={:.4}",
                f.alpha, f.bias, f.epochs, f.training_accuracy
            );
        }
        Command::Score { model, features, out } => {
            let (table, path) = cmd_score(&model, &features, &out)?;
            println!("scored {} rows -> {}", table.len(), path.display());
        }
        Command::Evaluate {
            model,
            in_dist_test,
            ood,
            out,
        } => {
            println!("ood\tFPR@95\tDetErr\tAUROC\tAUPR");
            for o in &ood {
                let r = cmd_evaluate(&model, &in_dist_test, o, &out)?;
                println!(
                    "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                    o.name, r.fpr_at_95_tpr, r.detection_error, r.auroc, r.aupr
                );
            }
        }
        Command::Synth { out, seed, n_train } => {
            let spec = SyntheticSpec {
                seed,
                n_train,
                ..SyntheticSpec::default()
            };
            let files = SyntheticBenchmark::generate(&spec)?.write_to(&out)?;
            println!("train\t{}", files.train.display());
            println!("test\t{}", files.test.display());
            println!("perturbed\t{}", files.perturbed.display());
            for (name, path) in files.oods {
                println!("{name}\t{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
