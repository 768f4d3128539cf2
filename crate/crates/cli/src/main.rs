use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use iccs_core::clock::parse_duration;
use iccs_core::director::plan::parse_plan;
use iccs_core::harness::{
    load_config, load_script, run_script, validate, Facility, FacilityConfig, LaunchOptions, MetricsError,
    MetricsReport, ScriptError,
};

const DEFAULT_METRICS: &str = ".iccs/metrics.txt";

#[derive(Parser)]
#[command(name = "iccs", version, about = "Desk-scale laser facility control system")]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Facility configuration file.
    #[arg(short, long, default_value = "profiles/8beam.cfg")]
    config: PathBuf,
    /// Run against the wall clock instead of a virtual one.
    #[arg(long)]
    wall: bool,
    /// Keep the event log and archive here.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start the facility and keep it running.
    Launch {
        #[command(flatten)]
        common: Common,
        /// Operator gateway address, e.g. 127.0.0.1:8080.
        #[arg(long)]
        gateway: Option<String>,
        /// Expose the bus over TCP at this address.
        #[arg(long)]
        tcp: Option<String>,
        /// Stop after this long; otherwise stop at end of stdin.
        #[arg(long, value_parser = duration)]
        r#for: Option<Duration>,
    },
    /// Run a scenario script and save its metrics.
    Run {
        #[command(flatten)]
        common: Common,
        script: PathBuf,
        /// Where to write the metrics report.
        #[arg(long, default_value = DEFAULT_METRICS)]
        metrics_out: PathBuf,
        /// Also write the scenario report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the latency histograms and budget checks of the last run.
    Metrics {
        #[arg(long, default_value = DEFAULT_METRICS)]
        from: PathBuf,
    },
    /// Check a configuration, and optionally a plan and a script.
    Validate {
        #[arg(short, long, default_value = "profiles/8beam.cfg")]
        config: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        script: Option<PathBuf>,
    },
}

fn duration(s: &str) -> Result<Duration, String> {
    parse_duration(s).ok_or_else(|| format!("bad duration {s:?}"))
}

fn options(c: &Common) -> LaunchOptions {
    let mut o = if c.wall {
        LaunchOptions::wall_clock()
    } else {
        LaunchOptions::virtual_clock()
    };
    o.data_dir = c.data_dir.clone();
    o
}

fn config(path: &Path) -> Result<FacilityConfig> {
    load_config(path).with_context(|| format!("loading {}", path.display()))
}

fn launch(common: Common, gateway: Option<String>, tcp: Option<String>, run_for: Option<Duration>) -> Result<ExitCode> {
    let cfg = config(&common.config)?;
    let mut o = options(&common);
    o.gateway_addr = gateway;
    o.tcp_addr = tcp;
    let mut fac = Facility::launch(cfg, o)?;
    println!("{} ready in {:?}", fac.config().name, fac.ready_elapsed());
    print!("{}", fac.config().scale_note());
    if let Some(a) = fac.gateway_addr() {
        println!("gateway http://{a}");
    }
    if let Some(a) = fac.tcp_addr() {
        println!("bus tcp {a}");
    }
    match run_for {
        Some(d) if fac.bus().clock().is_virtual() => {
            let step = Duration::from_millis(10);
            let mut t = Duration::ZERO;
            while t < d {
                fac.advance(step);
                t += step;
            }
        }
        Some(d) => std::thread::sleep(d),
        None => {
            println!("running; close stdin to stop");
            for _ in std::io::stdin().lock().lines() {}
        }
    }
    fac.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn run(common: Common, script: PathBuf, metrics_out: PathBuf, report_out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = config(&common.config)?;
    let s = load_script(&script).with_context(|| format!("loading {}", script.display()))?;
    let fac = Facility::launch(cfg, options(&common))?;
    let result = run_script(&fac, &s);
    if let Ok(m) = fac.metrics_report() {
        if let Some(dir) = metrics_out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&metrics_out, m.render()).with_context(|| format!("writing {}", metrics_out.display()))?;
    }
    match result {
        Ok(r) => {
            print!("{}", r.render());
            if let Some(p) = report_out {
                std::fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            if r.passed() {
                println!("scenario passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("scenario failed");
                Ok(ExitCode::from(1))
            }
        }
        Err(e @ ScriptError::StepFailed { .. }) => {
            eprintln!("{e}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}

fn metrics(from: PathBuf) -> Result<ExitCode> {
    let text = match std::fs::read_to_string(&from) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(MetricsError::NoData.into()),
        Err(e) => return Err(e).with_context(|| format!("reading {}", from.display())),
    };
    let r = MetricsReport::parse(&text)?;
    print!("{}", r.render());
    Ok(if r.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn validate_cmd(config_path: PathBuf, plan: Option<PathBuf>, script: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = config(&config_path)?;
    validate(&cfg)?;
    println!(
        "{}: {} beams, {} feps, {} points, {} plc points, {} supervisors",
        cfg.name,
        cfg.beams,
        cfg.feps.len(),
        cfg.point_count(),
        cfg.plc.point_count(),
        cfg.supervisors.len()
    );
    print!("{}", cfg.scale_note());
    if let Some(p) = plan {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let plan = parse_plan(&text).with_context(|| p.display().to_string())?;
        println!(
            "plan {}: {} participants, {} marks, {} triggers",
            plan.shot_id,
            plan.participants.len(),
            plan.marks.len(),
            plan.triggers.len()
        );
    }
    if let Some(s) = script {
        let sc = load_script(&s).with_context(|| s.display().to_string())?;
        println!("script {}: {} steps", s.display(), sc.steps.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(if cli.verbose {
            tracing::Level::DEBUG
        } else {
            tracing::Level::WARN
        })
        .with_writer(std::io::stderr)
        .init();
    let r = match cli.cmd {
        Cmd::Launch {
            common,
            gateway,
            tcp,
            r#for,
        } => launch(common, gateway, tcp, r#for),
        Cmd::Run {
            common,
            script,
            metrics_out,
            report,
        } => run(common, script, metrics_out, report),
        Cmd::Metrics { from } => metrics(from),
        Cmd::Validate { config, plan, script } => validate_cmd(config, plan, script),
    };
    r.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
