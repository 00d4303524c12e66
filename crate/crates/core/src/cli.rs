//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 runtime fault, 3
//! violation halted under the reset policy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::asm::{self, AsmError};
use crate::harness::{self, HarnessError, InitMode, Raise, RunConfig};
use crate::instrument::{
    instrument_program, ssp_access_block, ConfigError, InstrumentError, SequenceKind, ShadowStackConfig,
    DEFAULT_SS_SIZE_LOG2,
};
use crate::machine::HaltReason;
use crate::protect::ViolationPolicy;
use crate::report::{BenchRow, RunReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAULT: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

const AFTER_HELP: &str = "Exit codes: 0 ok, 1 usage/parse error, 2 runtime fault, 3 violation under --policy reset.\n\
WATCHSTACK_SEED is reserved and currently ignored: every run is deterministic.";

#[derive(Debug, Parser)]
#[command(name = "watchstack", version, about = "Shadow stack protected by DWT watchpoints, on an emulated Cortex-M core", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble and print the resolved listing.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rewrite a program with shadow stack prologues and epilogues.
    Instrument {
        /// Source file; optional with --access-block.
        input: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        shadow: ShadowArgs,
        /// Write the per-function plan as JSON.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Print only the bare ssp read/write block for the chosen variant.
        #[arg(long)]
        access_block: bool,
    },
    /// Execute a program and report the outcome.
    Run {
        input: PathBuf,
        #[arg(long)]
        protected: bool,
        #[command(flatten)]
        shadow: ShadowArgs,
        #[arg(long, default_value = "reset")]
        policy: ViolationPolicy,
        /// Pend an exception, e.g. `SysTick@10`. Repeatable.
        #[arg(long = "raise", value_name = "EXC@STEP")]
        raises: Vec<Raise>,
        #[arg(long, default_value_t = harness::DEFAULT_MAX_STEPS)]
        max_steps: u64,
        /// Arm protection after this many steps instead of at reset.
        #[arg(long)]
        init_at: Option<u64>,
        /// Write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run baseline and protected builds and print one overhead row.
    Bench {
        input: PathBuf,
        #[command(flatten)]
        shadow: ShadowArgs,
        #[arg(long, default_value_t = harness::DEFAULT_MAX_STEPS)]
        max_steps: u64,
    },
}

#[derive(Debug, Args)]
pub struct ShadowArgs {
    #[arg(long, value_parser = parse_u32, default_value = "0x00E00000")]
    pub ss_start: u32,
    #[arg(long, default_value_t = DEFAULT_SS_SIZE_LOG2)]
    pub ss_size_log2: u32,
    #[arg(long, conflicts_with = "optimal")]
    pub naive: bool,
    /// The default.
    #[arg(long)]
    pub optimal: bool,
}

impl ShadowArgs {
    fn config(&self) -> Result<ShadowStackConfig, ConfigError> {
        ShadowStackConfig::new(self.ss_start, self.ss_size_log2)
    }

    fn kind(&self) -> SequenceKind {
        if self.naive {
            SequenceKind::Naive
        } else {
            SequenceKind::Optimal
        }
    }
}

fn parse_u32(s: &str) -> Result<u32, String> {
    asm::parse_number(s).map_err(|e| e.to_string())
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Asm { path: String, source: AsmError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error("missing input file")]
    MissingInput,
}

impl CliError {
    fn from_harness(path: &Path, e: HarnessError) -> Self {
        match e {
            HarnessError::Asm(source) => CliError::Asm { path: path.display().to_string(), source },
            HarnessError::Instrument(e) => CliError::Instrument(e),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn load(path: &Path) -> Result<asm::AsmProgram, CliError> {
    asm::parse(&read(path)?).map_err(|source| CliError::Asm { path: path.display().to_string(), source })
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => write(p, text),
        None => {
            let _ = stdout.write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn program_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Map a finished run to the exit-code contract.
pub fn exit_code(halt: Option<HaltReason>) -> i32 {
    match halt {
        Some(HaltReason::Normal) | Some(HaltReason::Report) => EXIT_OK,
        Some(HaltReason::Reset) => EXIT_VIOLATION,
        Some(HaltReason::Fault) | Some(HaltReason::StackOverflow) | None => EXIT_FAULT,
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Asm { input, out } => {
            let program = load(&input)?;
            let layout = asm::layout(&program).map_err(|source| CliError::Asm { path: input.display().to_string(), source })?;
            emit(out.as_deref(), &asm::listing(&program, &layout), stdout)?;
            Ok(EXIT_OK)
        }
        Command::Instrument { input, out, shadow, plan, access_block } => {
            if access_block {
                let text: String = ssp_access_block(shadow.kind()).iter().map(|i| format!("    {i}\n")).collect();
                emit(out.as_deref(), &text, stdout)?;
                return Ok(EXIT_OK);
            }
            let input = input.ok_or(CliError::MissingInput)?;
            let config = shadow.config()?;
            let program = load(&input)?;
            let done = instrument_program(&program, &config, shadow.kind())?;
            emit(out.as_deref(), &asm::print(&done.program), stdout)?;
            if let Some(p) = plan {
                write(&p, &(serde_json::to_string_pretty(&done).expect("plan serializes") + "\n"))?;
            }
            Ok(EXIT_OK)
        }
        Command::Run { input, protected, shadow, policy, raises, max_steps, init_at, report } => {
            let config = RunConfig {
                protected,
                shadow: shadow.config()?,
                sequence: shadow.kind(),
                policy,
                init: init_at.map_or(InitMode::Immediate, InitMode::AtStep),
                raises,
                max_steps,
                route_debugmon: false,
            };
            let program = load(&input)?;
            let r = harness::run_program(&program, &config).map_err(|e| CliError::from_harness(&input, e))?;
            let rep = RunReport::new(&program_name(&input), &r);
            let _ = stdout.write_all(rep.to_kv().as_bytes());
            if let Some(p) = report {
                write(&p, &rep.to_json())?;
            }
            Ok(exit_code(r.halt_reason))
        }
        Command::Bench { input, shadow, max_steps } => {
            let program = load(&input)?;
            let base = RunConfig { max_steps, ..RunConfig::default() };
            let prot = RunConfig {
                protected: true,
                shadow: shadow.config()?,
                sequence: shadow.kind(),
                max_steps,
                ..RunConfig::default()
            };
            let b = harness::run_program(&program, &base).map_err(|e| CliError::from_harness(&input, e))?;
            let p = harness::run_program(&program, &prot).map_err(|e| CliError::from_harness(&input, e))?;
            let row = BenchRow::new(&program_name(&input), &b, &p);
            let _ = writeln!(stdout, "{}\n{}", BenchRow::HEADER, row.to_tsv());
            Ok(exit_code(b.halt_reason).max(exit_code(p.halt_reason)))
        }
    }
}

/// Parse `args`, run, and return the process exit code. Diagnostics go to
/// stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
