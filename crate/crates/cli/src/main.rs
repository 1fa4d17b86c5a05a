use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use insitu_cli::{run, Command, RunConfig, Target};
use insitu_core::train::StudentInit;

/// In situ weight generation experiments.
///
/// Settings come from a TOML file (`--config`), then from flags; the
/// resolved document is saved as `config.toml` next to the artifacts.
#[derive(Parser)]
#[command(name = "insitu", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the command named in the config file.
    Run(Overrides),
    /// Train a teacher or a distilled student; writes model.ckpt and metrics.csv.
    Train(Overrides),
    /// Fit student factors to a teacher; writes conv*.isgw and an l2 vs SVD report.
    Init(Overrides),
    /// Grid search over (B_i, B_c, bits); writes contour.csv, contour.json, pareto.json.
    Explore(Overrides),
    /// Latency and memory report of the generator; writes cost.json and cost.txt.
    Cost(Overrides),
    /// Per-layer kernel correlation of a checkpoint; writes correlation.json.
    Analyze(Overrides),
    /// Print the resolved config for a command without running it.
    Config {
        #[arg(value_enum)]
        command: Command,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    L2,
    Svd,
    Random,
}

impl From<InitArg> for StudentInit {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::L2 => StudentInit::L2,
            InitArg::Svd => StudentInit::Svd,
            InitArg::Random => StudentInit::Random,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (students, grid points, teachers trained with `train --target teacher`).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    bi: Option<usize>,
    #[arg(long)]
    bc: Option<usize>,
    #[arg(long)]
    qb: Option<u32>,
    #[arg(long)]
    qu: Option<u32>,
    #[arg(long)]
    qv: Option<u32>,
    #[arg(long)]
    qw: Option<u32>,
    /// Orthogonality penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Soft-target share of the distillation loss.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Directory with the IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Teacher checkpoint; a teacher is trained first when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long, value_enum)]
    target: Option<Target>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Train with fake-quantized factors.
    #[arg(long)]
    quantize: bool,
    #[arg(long)]
    act_bits: Option<u32>,
    /// Checkpoint to analyze.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated B_i values of the grid.
    #[arg(long, value_delimiter = ',')]
    grid_bi: Option<Vec<usize>>,
    /// Comma-separated B_c values of the grid.
    #[arg(long, value_delimiter = ',')]
    grid_bc: Option<Vec<usize>>,
}

impl Overrides {
    fn resolve(self, command: Option<Command>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, command) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(c)) => RunConfig::new(c),
            (None, None) => bail!("`run` needs --config"),
        };
        if let Some(c) = command {
            cfg.command = c;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set! {
            seed => seed,
            out => out,
            epochs => optim.epochs,
            bi => student.bi,
            bc => student.bc,
            qb => bits.qb,
            qu => bits.qu,
            qv => bits.qv,
            qw => bits.qw,
            lambda => distill.lambda,
            beta => distill.beta,
            temperature => distill.temperature,
            target => target,
            grid_bi => explore.bi,
            grid_bc => explore.bc,
        }
        if let Some(v) = self.init {
            cfg.student.init = v.into();
        }
        if self.quantize {
            cfg.student.quantize = true;
        }
        opt(self.data_dir, &mut cfg.data.dir);
        opt(self.train_per_class, &mut cfg.data.train_per_class);
        opt(self.test_per_class, &mut cfg.data.test_per_class);
        opt(self.teacher, &mut cfg.teacher.checkpoint);
        opt(self.teacher_epochs, &mut cfg.teacher.epochs);
        opt(self.act_bits, &mut cfg.student.act_bits);
        opt(self.checkpoint, &mut cfg.analyze.checkpoint);
        Ok(cfg)
    }
}

fn opt<T>(v: Option<T>, slot: &mut Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        let (overrides, command) = match cli.command {
            Cmd::Config { command, overrides } => {
                let cfg = overrides.resolve(Some(command))?;
                cfg.validate()?;
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            Cmd::Run(o) => (o, None),
            Cmd::Train(o) => (o, Some(Command::Train)),
            Cmd::Init(o) => (o, Some(Command::Init)),
            Cmd::Explore(o) => (o, Some(Command::Explore)),
            Cmd::Cost(o) => (o, Some(Command::Cost)),
            Cmd::Analyze(o) => (o, Some(Command::Analyze)),
        };
        let cfg = overrides.resolve(command)?;
        for p in run(&cfg)? {
            println!("wrote {}", p.display());
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
