//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eflsim_core::FusionRule;

use crate::config::{DataConfig, ExperimentConfig, Overrides};
use crate::error::{Result, SimError};
use crate::experiment::{self, partition_table, write_node_data};
use crate::network::thread_count;
use crate::report;
use crate::trace::TraceDocument;

#[derive(Debug, Parser)]
#[command(name = "eflsim", version, about = "Ensemble federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federation and write trace, tables, checkpoints and reports.
    Run(RunArgs),
    /// Partition a dataset and write per-node CSV files.
    Partition(PartitionArgs),
    /// Rebuild the report tables from a trace.json.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Max,
    Mean,
}

impl From<FusionArg> for FusionRule {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Max => FusionRule::MaxProb,
            FusionArg::Mean => FusionRule::MeanProb,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub nodes: Option<u32>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub max_rounds: Option<u32>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Worker threads; defaults to EFLSIM_THREADS or the core count.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Train CSV; replaces the config's data source (needs --test).
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    /// The CSV files start with a header row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A trace.json written by `eflsim run`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Defaults to the trace's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: bool,
}

fn load_config(common: &CommonArgs, extra: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply(&Overrides { seed: common.seed, out: common.out.clone(), nodes: common.nodes, ..extra });
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("eflsim-out"))
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_config(
        &args.common,
        Overrides { max_rounds: args.max_rounds, fusion: args.fusion.map(Into::into), ..Default::default() },
    )?;
    let threads = thread_count(args.threads, cfg.nodes as usize);
    let exp = experiment::run(&cfg, threads)?;
    let dir = out_dir(&cfg);
    exp.write(&dir)?;
    let summary = exp.summary()?;
    let doc = exp.trace_document();
    for t in report::tables(&doc) {
        println!("{}", t.to_text());
    }
    println!(
        "{} after {} round(s): {} pooled accuracy {:.4} (best round-one single model {} on node {}: {:.4})",
        match summary.termination {
            eflsim_core::server::TerminationReason::B2MStable => "stopped, best-two sets stable",
            eflsim_core::server::TerminationReason::MaxRoundsReached => "stopped at the round cap",
        },
        summary.rounds,
        summary.final_gel,
        summary.final_gel_pooled.accuracy(),
        summary.best_round1_single.label,
        summary.best_round1_single.node_id,
        summary.best_round1_single.pooled_accuracy,
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn partition(args: PartitionArgs) -> Result<()> {
    let mut cfg = load_config(&args.common, Overrides::default())?;
    if let (Some(train), Some(test)) = (args.train, args.test) {
        cfg.data = DataConfig::Csv { train, test, header: args.header };
    }
    let prepared = experiment::prepare(&cfg)?;
    for w in &prepared.warnings {
        eprintln!("warning: {w}");
    }
    let dir = out_dir(&cfg);
    write_node_data(&dir, &prepared, cfg.seed)?;
    print!("{}", partition_table(&prepared).to_text());
    let (ut, us) = (prepared.partition.unassigned_train.len(), prepared.partition.unassigned_test.len());
    if ut + us > 0 {
        println!("unassigned: {ut} train, {us} test");
    }
    println!("wrote {}", dir.join("data").display());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let doc = TraceDocument::load(&args.trace)?;
    let dir = args.out.unwrap_or_else(|| args.trace.parent().map(PathBuf::from).unwrap_or_default());
    report::write_reports(&doc, &dir, args.svg)?;
    for t in report::tables(&doc) {
        println!("{}", t.to_text());
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Partition(a) => partition(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if let SimError::Core(inner) = &e {
                log::debug!("{inner:?}");
            }
            code
        }
    }
}
