use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flexicell::scenario::Scenario;
use flexicell::sim;
use flexicell::trace::TraceLog;
use flexicell::verify::{audit_export_check, verify_trace};

#[derive(Parser)]
#[command(name = "flexicell", version, about = "Federated small-cell factory network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a scenario file.
    Validate { file: PathBuf },
    /// Run a scenario and write trace, metrics and audit exports.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, env = "FLEXICELL_OUT", default_value = "flexicell-out")]
        out: PathBuf,
        /// Also run the requirement checks on the fresh trace.
        #[arg(long)]
        verify: bool,
    },
    /// Run the requirement checks on a trace.
    Verify {
        trace: PathBuf,
        /// Exported audit log (text or binary) to check against the trace.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Write the report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run and verify a scenario over a seed range (`a..b` half-open, `a..=b` inclusive).
    Sweep {
        file: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, env = "FLEXICELL_OUT", default_value = "flexicell-out")]
        out: PathBuf,
        /// Skip the requirement checks.
        #[arg(long)]
        no_verify: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(file: &Path, seed: Option<u64>, duration: Option<f64>) -> Result<Scenario> {
    let mut sc = Scenario::load(file)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = duration {
        sc.duration_s = d;
    }
    sc.validate()?;
    Ok(sc)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let (a, b, inclusive) = if let Some((a, b)) = spec.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = spec.split_once("..") {
        (a, b, false)
    } else {
        let s: u64 = spec.parse().with_context(|| format!("bad seed `{spec}`"))?;
        return Ok(vec![s]);
    };
    let a: u64 = a.trim().parse().with_context(|| format!("bad seed range `{spec}`"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("bad seed range `{spec}`"))?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        bail!("seed range `{spec}` is empty");
    }
    Ok(seeds)
}

fn write_run(dir: &Path, out: &sim::RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let w = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    };
    w("trace.ndjson", out.trace.to_ndjson().as_bytes())?;
    w("metrics.ndjson", out.metrics.to_ndjson().as_bytes())?;
    w("summary.txt", out.metrics.summary_table().as_bytes())?;
    w("audit.log", out.audit.export_text().as_bytes())?;
    w("audit.bin", &out.audit.export_binary())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate { file } => {
            let sc = load(&file, None, None)?;
            println!(
                "{}: ok ({} cells, {} devices, {} flows, {} slices, {} events)",
                sc.name,
                sc.cells.len(),
                sc.devices.len(),
                sc.flows.len(),
                sc.slices.len(),
                sc.events.len()
            );
            Ok(true)
        }
        Command::Run { file, seed, duration, out, verify } => {
            let sc = load(&file, seed, duration)?;
            let result = sim::run(&sc)?;
            write_run(&out, &result)?;
            print!("{}", result.metrics.summary_table());
            println!("wrote {}", out.display());
            if !verify {
                return Ok(true);
            }
            let report = verify_trace(&result.trace)?;
            print!("{}", report.to_text());
            Ok(report.passed())
        }
        Command::Verify { trace, audit, report } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let log = TraceLog::parse(&text)?;
            let mut rep = verify_trace(&log)?;
            if let Some(a) = audit {
                let bytes = std::fs::read(&a).with_context(|| format!("reading {}", a.display()))?;
                rep.checks.push(audit_export_check(&log, &bytes));
            }
            print!("{}", rep.to_text());
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string_pretty(&rep)?)?;
            }
            Ok(rep.passed())
        }
        Command::Sweep { file, seeds, duration, out, no_verify } => {
            let seeds = parse_seeds(&seeds)?;
            let base = load(&file, None, duration)?;
            let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
            let chunks: Vec<Vec<u64>> = (0..workers).map(|w| seeds.iter().copied().skip(w).step_by(workers).collect()).collect();
            let mut rows: Vec<(u64, Result<(u64, usize, bool)>)> = std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|chunk| {
                        let base = &base;
                        let out = &out;
                        s.spawn(move || {
                            chunk
                                .iter()
                                .map(|&seed| {
                                    let r = (|| {
                                        let mut sc = base.clone();
                                        sc.seed = seed;
                                        let res = sim::run(&sc)?;
                                        write_run(&out.join(format!("seed-{seed}")), &res)?;
                                        let ok = no_verify || verify_trace(&res.trace)?.passed();
                                        Ok((res.metrics.plant.events_processed, res.trace.records.len(), ok))
                                    })();
                                    (seed, r)
                                })
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("sweep worker")).collect()
            });
            rows.sort_by_key(|r| r.0);
            let mut all = true;
            let mut lines = String::new();
            for (seed, r) in rows {
                let line = match r {
                    Ok((events, records, ok)) => {
                        all &= ok;
                        serde_json::json!({"seed": seed, "events": events, "records": records, "passed": ok})
                    }
                    Err(e) => {
                        all = false;
                        serde_json::json!({"seed": seed, "error": format!("{e:#}"), "passed": false})
                    }
                };
                println!("{line}");
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.ndjson"), lines)?;
            Ok(all)
        }
    }
}
