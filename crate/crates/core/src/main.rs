use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use oldpf::experiment::{
    evaluate, load_pretrained, offline_data, online_data, online_stage, pretrain_stage, reproduce_all,
    summary_text, ExperimentConfig,
};
use oldpf::learn::OnlineMethod;
use oldpf::ssm::{lgssm_params, write_dataset, DatasetMeta, ModelKind, Phase, TrackingParams};

#[derive(Parser)]
#[command(name = "oldpf", version, about = "Online-learning differentiable particle filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use seeds 0..N.
    #[arg(long, global = true)]
    seed_count: Option<u64>,
    /// Online trajectory length.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Comma-separated methods: pretrained-dpf, ol-dpf, oracle-dpf.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Full-scale defaults (50 seeds, 500 offline trajectories, 5000 online steps).
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write offline and online datasets as CSV with metadata sidecars.
    GenerateData(Overrides),
    /// Pretrain on offline data and save the checkpoint.
    Pretrain(Overrides),
    /// Run the online methods from a saved checkpoint.
    RunOnline(Overrides),
    /// Recompute the summary from an output directory's metrics.csv.
    Evaluate(Overrides),
    /// Run every standard experiment and write the summary tables.
    ReproducePaper(Overrides),
    /// Print a config file with the defaults for a model.
    DefaultConfig {
        /// `lgssm` or `tracking`.
        #[arg(long, default_value = "lgssm")]
        model: String,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long)]
        full_scale: bool,
    },
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) -> anyhow::Result<()> {
        if let Some(n) = self.seed_count {
            c.seeds = (0..n).collect();
        }
        if let Some(s) = self.steps {
            c.online.steps = s;
        }
        if let Some(ms) = &self.methods {
            c.methods = ms.iter().map(|m| OnlineMethod::parse(m.trim())).collect::<Result<_, _>>()?;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        Ok(())
    }

    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if self.full_scale => ExperimentConfig::full_scale(ModelKind::Lgssm { dim: 2 }),
            None => ExperimentConfig::desk(ModelKind::Lgssm { dim: 2 }),
        };
        self.apply(&mut c)?;
        c.validate()?;
        Ok(c)
    }
}

fn params_json(model: ModelKind, phase: Phase) -> anyhow::Result<serde_json::Value> {
    Ok(match model {
        ModelKind::Lgssm { dim } => serde_json::to_value(lgssm_params(phase, dim)?)?,
        ModelKind::Tracking => serde_json::to_value(TrackingParams::new(phase))?,
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData(o) => {
            let cfg = o.load()?;
            let dir = cfg.out_dir.join("data");
            std::fs::create_dir_all(&dir)?;
            let offline = offline_data(&cfg)?;
            let meta = DatasetMeta {
                seed: cfg.data_seed,
                phase: Phase::Pretrain,
                model: cfg.model,
                n_traj: offline.len(),
                steps: cfg.pretrain.steps,
                params: params_json(cfg.model, Phase::Pretrain)?,
            };
            write_dataset(&dir.join("pretrain.csv"), &offline, &meta)?;
            for &seed in &cfg.seeds {
                let t = online_data(&cfg, seed)?;
                let meta = DatasetMeta {
                    seed,
                    phase: Phase::Online,
                    model: cfg.model,
                    n_traj: 1,
                    steps: cfg.online.steps,
                    params: params_json(cfg.model, Phase::Online)?,
                };
                write_dataset(&dir.join(format!("online_seed{seed}.csv")), &[t], &meta)?;
            }
            println!("datasets written to {}", dir.display());
        }
        Command::Pretrain(o) => {
            let cfg = o.load()?;
            let pre = pretrain_stage(&cfg)?;
            let path = cfg.checkpoint_path();
            pre.save(&path)?;
            if let Some(r) = &pre.report {
                println!(
                    "validation MSE {:.4} -> {:.4} after {} epochs",
                    r.initial_validation_loss,
                    r.best_validation_loss,
                    r.validation_losses.len()
                );
            }
            println!("checkpoint written to {}", path.display());
        }
        Command::RunOnline(o) => {
            let cfg = o.load()?;
            let pre = load_pretrained(&cfg)?;
            let (_, summary) = online_stage(&cfg, &pre)?;
            print!("{}", summary_text(&summary));
        }
        Command::Evaluate(o) => {
            let dir = match (&o.out, &o.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => o.load()?.out_dir,
                (None, None) => bail!("evaluate needs --out DIR or --config FILE"),
            };
            let summary = evaluate(&dir)?;
            print!("{}", summary_text(&summary));
        }
        Command::ReproducePaper(o) => {
            let root = o.out.clone().unwrap_or_else(|| PathBuf::from("runs/reproduce"));
            let overrides = Overrides { out: None, ..o.clone() };
            // Surface bad overrides before any work starts.
            overrides.apply(&mut ExperimentConfig::desk(ModelKind::Tracking))?;
            let text = reproduce_all(&root, o.full_scale, |c| {
                overrides.apply(c).expect("validated above");
            })?;
            print!("{text}");
        }
        Command::DefaultConfig { model, dim, full_scale } => {
            let kind = match model.as_str() {
                "lgssm" => ModelKind::Lgssm { dim },
                "tracking" => ModelKind::Tracking,
                other => bail!("unknown model `{other}` (lgssm or tracking)"),
            };
            let c = if full_scale {
                ExperimentConfig::full_scale(kind)
            } else {
                ExperimentConfig::desk(kind)
            };
            print!("{}", c.to_toml()?);
        }
    }
    Ok(())
}
