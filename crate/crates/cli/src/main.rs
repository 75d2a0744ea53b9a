use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use selfreg::data::generate;
use selfreg::model::{load_model_expecting, Model};
use selfreg::trainer::{
    ablation_ladder, distance_report, evaluate, run_ablation, run_single_source, stream, train,
    Protocol, Seeds, DISTANCE_STREAM,
};
use selfreg_cli::config::{parse_config, ExperimentConfig};
use selfreg_cli::report::{self, RunSummary, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "selfreg", about = "Self-supervised contrastive regularization for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, summary and checkpoints.
    Train(Common),
    /// Score a checkpoint on one domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-domain-out ablation ladder over the seed list.
    Ablate(Common),
    /// Train on each domain alone and score on the others.
    SingleSource(Common),
    /// Same-class feature and logit distances per domain.
    ReportDistances {
        /// Untrained weights from the init seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `selfreg.lambda_feature=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    target_domain: Option<usize>,
}

impl Common {
    fn load(&self, fallback_config: Option<&Path>) -> Result<ExperimentConfig> {
        let path = self.config.as_deref().or(fallback_config);
        let mut overrides = self.overrides.clone();
        if let Some(k) = self.target_domain {
            overrides.push(format!("target_domain={k}"));
        }
        if let Some(seeds) = &self.seeds {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            overrides.push(format!("run.seed_list=[{}]", list.join(",")));
        }
        Ok(parse_config(path, &overrides)?)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.run.out.clone())
    }

    fn require_out(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = self
            .out_dir(cfg)
            .context("no output directory: pass --out or set run.out")?;
        report::prepare_dir(&dir)?;
        Ok(dir)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { checkpoint, common } => cmd_eval(&checkpoint, &common),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::SingleSource(c) => cmd_single_source(&c),
        Command::ReportDistances { checkpoint, common } => cmd_report_distances(checkpoint.as_deref(), &common),
    }
}

fn cmd_train(c: &Common) -> Result<()> {
    let mut cfg = c.load(None)?;
    if c.seeds.is_some() {
        match cfg.run.seed_list.as_slice() {
            [s] => cfg.train.seeds = Seeds::all(*s),
            _ => bail!("train takes exactly one seed in --seeds"),
        }
    }
    let dir = c.require_out(&cfg)?;
    let result = train(&cfg.train)?;
    report::write_run(&dir, &cfg, &result)?;
    let s = RunSummary::new(&cfg, &result);
    println!(
        "best_epoch={} best_val_acc={:.4} best_acc={:.4} final_acc={:.4}{}",
        s.best_epoch,
        s.best_val_acc,
        s.best_acc,
        s.final_acc,
        s.swa_acc.map(|a| format!(" swa_acc={a:.4}")).unwrap_or_default()
    );
    Ok(())
}

/// Config next to the checkpoint, used when `--config` is absent.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.is_file().then_some(p)
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<Model> {
    let resolved = report::resolve_checkpoint(path)?;
    load_model_expecting(&resolved, &cfg.train.model_config())
        .with_context(|| format!("loading {}", resolved.display()))
}

fn cmd_eval(checkpoint: &Path, c: &Common) -> Result<()> {
    let resolved = report::resolve_checkpoint(checkpoint)?;
    let cfg = c.load(sibling_config(&resolved).as_deref())?;
    let model = load_checkpoint(&resolved, &cfg)?;
    let domain = cfg.train.target_domain;
    let ds = generate(&cfg.train.data, cfg.train.seeds.data)?.filter_domains(|d| d == domain);
    let ev = evaluate(&model, &ds)?;
    let line = format!(
        "domain={domain} accuracy={} correct={} total={}",
        ev.accuracy, ev.correct, ev.total
    );
    println!("{line}");
    if let Some(dir) = c.out_dir(&cfg) {
        report::prepare_dir(&dir)?;
        fs::write(dir.join("eval.txt"), line + "\n")?;
    }
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let cfg = c.load(None)?;
    let dir = c.require_out(&cfg)?;
    let targets: Vec<usize> = match c.target_domain {
        Some(k) => vec![k],
        None => (0..cfg.train.data.num_domains).collect(),
    };
    let rows = ablation_ladder(&cfg.train.selfreg);
    let base = selfreg::trainer::TrainConfig {
        protocol: Protocol::LeaveOneOut,
        ..cfg.train.clone()
    };
    let summaries = run_ablation(&base, &rows, &cfg.run.seed_list, &targets)?;
    let table = report::ablation_table(&summaries);
    fs::write(dir.join("ablation.csv"), &table)?;
    report::write_config(&dir, &cfg)?;
    print!("{table}");
    Ok(())
}

fn cmd_single_source(c: &Common) -> Result<()> {
    let cfg = c.load(None)?;
    let dir = c.require_out(&cfg)?;
    let matrix = run_single_source(&cfg.train)?;
    let table = report::matrix_table(&matrix);
    fs::write(dir.join("single_source.csv"), &table)?;
    report::write_config(&dir, &cfg)?;
    print!("{table}");
    Ok(())
}

fn cmd_report_distances(checkpoint: Option<&Path>, c: &Common) -> Result<()> {
    let resolved = checkpoint.map(report::resolve_checkpoint).transpose()?;
    let cfg = c.load(resolved.as_deref().and_then(sibling_config).as_deref())?;
    let model = match &resolved {
        Some(p) => load_checkpoint(p, &cfg)?,
        None => Model::init(cfg.train.model_config())?,
    };
    let ds = generate(&cfg.train.data, cfg.train.seeds.data)?;
    let domains: Vec<usize> = match c.target_domain {
        Some(k) => vec![k],
        None => (0..cfg.train.data.num_domains).collect(),
    };
    let mut table = String::from("domain,feature,logit,pairs,exhaustive\n");
    for d in domains {
        let mut rng = stream(cfg.train.seeds.train, DISTANCE_STREAM);
        let part = ds.filter_domains(|x| x == d);
        let r = distance_report(&model, &part, cfg.train.distance_sample_cap, &mut rng)?;
        table += &format!("{d},{},{},{},{}\n", r.feature, r.logit, r.pairs, r.exhaustive);
    }
    if let Some(dir) = c.out_dir(&cfg) {
        report::prepare_dir(&dir)?;
        fs::write(dir.join("distances.csv"), &table)?;
        report::write_config(&dir, &cfg)?;
    }
    print!("{table}");
    Ok(())
}
