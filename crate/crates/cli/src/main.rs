use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use privinv::asm::{parse, print, Program};
use privinv::decoder::Allowlist;
use privinv::perm_model::audit_isolation;
use privinv::policy::{configure_elevated, configure_legacy, configure_system, IsolationMode, LayoutParams, MemoryLayout, TaskKind};
use privinv::rewriter::{rewrite, RewriteOptions};
use privinv::scanner::{scan_task, split_pages, PAGE_SIZE};
use privinv::sim::{run_attack, AttackResult, AttackScript, Machine, SimConfig, SimError, Status};
use privinv::verifier::{verify_with, VerifyPolicy};

/// Privilege-inversion toolkit for AArch64.
#[derive(Parser)]
#[command(name = "privinv", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scan raw code bytes for forbidden privileged instructions.
    Scan {
        file: PathBuf,
        #[arg(long, default_value_t = PAGE_SIZE)]
        page_size: usize,
        /// Allowlist file; defaults to the EL0-accessible set.
        #[arg(long)]
        allowlist: Option<PathBuf>,
    },
    /// Add shadow-stack, CFI and bit-masking instrumentation.
    Rewrite {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        no_cfi: bool,
        #[arg(long)]
        no_ss: bool,
        #[arg(long)]
        no_mask: bool,
    },
    /// Check an instrumented program against the compliance rules.
    Verify {
        input: PathBuf,
        #[arg(long, default_value = "full")]
        policy: VerifyPolicy,
        #[arg(long)]
        allowlist: Option<PathBuf>,
    },
    /// Run a program on the machine simulator.
    Sim {
        program: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        attack: Option<PathBuf>,
        #[arg(long)]
        fuel: Option<u64>,
        /// Write the event trace here, one event per line.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "elevated")]
        task: TaskKind,
        #[arg(long, default_value = "hpds")]
        mode: IsolationMode,
        /// Run elevated code even if it fails verification.
        #[arg(long)]
        allow_unverified: bool,
    },
    /// Permission layouts.
    Perms {
        #[command(subcommand)]
        cmd: PermsCmd,
    },
}

#[derive(Subcommand)]
enum PermsCmd {
    /// Enumerate every access over a layout and report isolation breaks.
    Audit {
        layout: PathBuf,
        #[arg(long, default_value = "hpds")]
        mode: IsolationMode,
    },
    /// Print a policy-built layout file.
    Layout {
        #[arg(long, default_value = "hpds")]
        mode: IsolationMode,
        #[arg(long, value_enum, default_value_t = Which::System)]
        task: Which,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    System,
    Elevated,
    Legacy,
}

/// A failure that maps to exit code 2.
struct InputError(String);

impl<E: std::fmt::Display> From<E> for InputError {
    fn from(e: E) -> Self {
        InputError(e.to_string())
    }
}

type Outcome = Result<bool, InputError>;

fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn read_program(path: &Path) -> Result<Program, InputError> {
    parse(&read(path)?).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn allowlist(path: Option<&Path>) -> Result<Allowlist, InputError> {
    match path {
        Some(p) => read(p)?.parse().map_err(|e| InputError(format!("{}: {e}", p.display()))),
        None => Ok(Allowlist::el0_default()),
    }
}

fn layout(path: &Path) -> Result<MemoryLayout, InputError> {
    read(path)?.parse().map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn scan(out: &mut impl Write, file: &Path, page_size: usize, allow: Option<&Path>) -> Outcome {
    if page_size == 0 || !page_size.is_multiple_of(4) {
        return Err(InputError(format!("page size {page_size} is not a positive multiple of 4")));
    }
    let bytes = fs::read(file).map_err(|e| InputError(format!("{}: {e}", file.display())))?;
    let allow = allowlist(allow)?;
    let pages = split_pages(&bytes, page_size);
    let verdicts = scan_task(&pages, &allow)?;
    let mut clean = true;
    for (i, v) in verdicts.iter().enumerate() {
        writeln!(out, "page {i}: {}", if v.allowed { "allow" } else { "deny" })?;
        for (off, class) in &v.violations {
            writeln!(out, "page {i} +{off:#x}: {class}")?;
        }
        clean &= v.allowed;
    }
    Ok(clean)
}

fn status_line(s: &Status) -> String {
    match s {
        Status::Running => "running".into(),
        Status::Exited(code) => format!("exited {code}"),
        Status::Faulted(f) => format!("faulted: {f}"),
    }
}

fn report(out: &mut impl Write, m: &Machine) -> io::Result<()> {
    writeln!(out, "status: {}", status_line(&m.status))?;
    writeln!(out, "x0: {:#x}", m.regs[0])?;
    if !m.output.is_empty() {
        let vals: Vec<String> = m.output.iter().map(u64::to_string).collect();
        writeln!(out, "output: {}", vals.join(" "))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sim(
    out: &mut impl Write,
    program: &Path,
    layout_path: &Path,
    attack: Option<&Path>,
    fuel: Option<u64>,
    trace: Option<&Path>,
    task: TaskKind,
    mode: IsolationMode,
    allow_unverified: bool,
) -> Outcome {
    let p = read_program(program)?;
    let layout = layout(layout_path)?;
    let mut cfg = SimConfig::for_layout(&layout, mode, task);
    if let Some(f) = fuel {
        cfg.fuel = f;
    }
    cfg.allow_unverified = allow_unverified;
    let script: AttackScript = match attack {
        Some(a) => read(a)?.parse()?,
        None => AttackScript::default(),
    };
    let outcome = match run_attack(&p, &layout, &cfg, &script) {
        Ok(o) => o,
        Err(SimError::FuelExhausted(n)) => {
            writeln!(out, "status: out of fuel after {n} steps")?;
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(t) = trace {
        let text: String = outcome.trace.iter().map(|e| format!("{e}\n")).collect();
        fs::write(t, text).map_err(|e| InputError(format!("{}: {e}", t.display())))?;
    }
    report(out, &outcome.machine)?;
    if attack.is_some() {
        writeln!(out, "attack: {}", outcome.result)?;
    }
    let hijacked = matches!(outcome.result, AttackResult::Hijacked(_));
    Ok(matches!(outcome.machine.status, Status::Exited(_)) && !hijacked)
}

fn dispatch(cmd: Cmd, out: &mut impl Write) -> Outcome {
    match cmd {
        Cmd::Scan { file, page_size, allowlist } => scan(out, &file, page_size, allowlist.as_deref()),
        Cmd::Rewrite { input, output, no_cfi, no_ss, no_mask } => {
            let p = read_program(&input)?;
            let opts = RewriteOptions { enable_ss: !no_ss, enable_cfi: !no_cfi, enable_mask: !no_mask, ..Default::default() };
            let r = rewrite(&p, &opts).map_err(|e| InputError(format!("{}: {e}", input.display())))?;
            fs::write(&output, print(&r)).map_err(|e| InputError(format!("{}: {e}", output.display())))?;
            Ok(true)
        }
        Cmd::Verify { input, policy, allowlist: allow } => {
            let p = read_program(&input)?;
            let allow = allowlist(allow.as_deref())?;
            let v = verify_with(Default::default(), &p, policy, &allow);
            for x in &v {
                writeln!(out, "{x}")?;
            }
            Ok(v.is_empty())
        }
        Cmd::Sim { program, layout, attack, fuel, trace, task, mode, allow_unverified } => sim(
            out,
            &program,
            &layout,
            attack.as_deref(),
            fuel,
            trace.as_deref(),
            task,
            mode,
            allow_unverified,
        ),
        Cmd::Perms { cmd: PermsCmd::Audit { layout: path, mode } } => {
            let l = layout(&path)?;
            let r = audit_isolation(&l, mode)?;
            write!(out, "{}", r.render())?;
            Ok(r.is_clean())
        }
        Cmd::Perms { cmd: PermsCmd::Layout { mode, task } } => {
            let params = LayoutParams { mode, ..Default::default() };
            let l = match task {
                Which::System => configure_system(&params)?.0,
                Which::Elevated => configure_elevated(&params)?.0,
                Which::Legacy => configure_legacy(&params, mode)?.0,
            };
            write!(out, "{l}")?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.cmd, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(InputError(msg)) => {
            let _ = out.flush();
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
