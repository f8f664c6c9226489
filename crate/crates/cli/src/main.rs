use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use metaselector::config::ExperimentConfig;
use metaselector::eval::check_report;
use metaselector::meta::{MetaMode, Variant};
use metaselector::pipeline::{self, Prepared, StageError, StageExt};
use metaselector::Error;

#[derive(Parser)]
#[command(
    name = "metaselector",
    version,
    about = "Meta-learned per-user model selection for CTR prediction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the dataset; write the canonical dump, exclusions and stats.
    Ingest(Common),
    /// Pretrain the base models and checkpoint them.
    Pretrain(Common),
    /// Meta-train the selector (and bases, for the full variant) from the pretrained checkpoint.
    MetaTrain(Common),
    /// Evaluate every method from saved checkpoints and write the reports.
    Evaluate(Common),
    /// All stages end to end.
    Run(Common),
    /// Print a written report after re-checking its RelaImpr column.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// first-order | exact
    #[arg(long)]
    mode: Option<MetaMode>,
    /// full | simplified (default: both)
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of the run to show; taken from --config when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, StageError> {
        let mut cfg = ExperimentConfig::load(&self.config).stage("config")?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(m) = self.mode {
            cfg.meta.mode = m;
        }
        if self.variant.is_some() {
            cfg.variant = self.variant;
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("--threads must be >= 1".into())).stage("config");
        }
        cfg.validate().stage("config")?;
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Error::Io {
                path: self.out.clone(),
                source: e,
            })
            .stage("setup")?;
        Ok(cfg)
    }

    fn prepare(&self) -> Result<Prepared, StageError> {
        Prepared::new(&self.load()?).stage("ingest")
    }
}

fn cmd_ingest(a: &Common) -> Result<(), StageError> {
    let p = a.prepare()?;
    let out = pipeline::ingest(&p, &a.out).stage("ingest")?;
    print!("{}", out.stats.render());
    println!("admitted_users={}", p.users.len());
    println!("excluded_users={}", p.exclusions.len());
    println!("dump={}", out.dump_path.display());
    println!("dump_sha256={}", out.dump_sha256);
    Ok(())
}

fn cmd_pretrain(a: &Common) -> Result<(), StageError> {
    let p = a.prepare()?;
    pipeline::stage_pretrain(&p, &a.out).stage("pretrain")?;
    info!(
        "wrote {}",
        pipeline::artifact(&a.out, "bases", p.seed(), "ckpt").display()
    );
    Ok(())
}

fn bases(p: &Prepared, out: &Path) -> Result<Vec<metaselector::models::ParamBank>, StageError> {
    pipeline::load_bases(p, &pipeline::artifact(out, "bases", p.seed(), "ckpt")).stage("load bases")
}

fn cmd_meta_train(a: &Common) -> Result<(), StageError> {
    let p = a.prepare()?;
    let bases = bases(&p, &a.out)?;
    pipeline::stage_meta_train(&p, &bases, &a.out, a.threads).stage("meta-train")?;
    Ok(())
}

fn cmd_evaluate(a: &Common) -> Result<(), StageError> {
    let p = a.prepare()?;
    let bases = bases(&p, &a.out)?;
    let variants = p.config.variants();
    let metas = variants
        .iter()
        .map(|&v| pipeline::load_meta(&p, &pipeline::meta_ckpt_path(&a.out, v, p.seed())))
        .collect::<metaselector::Result<Vec<_>>>()
        .stage("load meta")?;
    let ev = pipeline::evaluate(&p, &bases, &metas, a.threads).stage("evaluate")?;
    let report = pipeline::write_evaluation(&p, &ev, &variants, &a.out).stage("report")?;
    print!("{report}");
    Ok(())
}

fn cmd_run(a: &Common) -> Result<(), StageError> {
    let cfg = a.load()?;
    let out = pipeline::run(&cfg, &a.out, a.threads)?;
    print!("{}", out.report);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), StageError> {
    let seed = match (a.seed, &a.config) {
        (Some(s), _) => s,
        (None, Some(c)) => ExperimentConfig::load(c).stage("config")?.seed,
        (None, None) => return Err(Error::InvalidArgument("report needs --seed or --config".into())).stage("config"),
    };
    let path = pipeline::artifact(&a.out, "report", seed, "csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Io { path, source: e })
        .stage("report")?;
    check_report(&text).stage("report")?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::MetaTrain(a) => cmd_meta_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.error.is_input_error() { 2 } else { 1 })
        }
    }
}
