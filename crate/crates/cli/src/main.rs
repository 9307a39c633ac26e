//! `iout`: deterministic scenario runs, data space queries, token issuing
//! and service mode.

mod pipeline;
mod serve;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use iout_core::dataspace::DataSpace;
use iout_core::identity::{issue_token, PrincipalStore, SigningKey, Token, SECRET_ENV};
use iout_core::scenario::{load_scenario, report, run, run_key, ReportFormat, RunOverrides, ScenarioConfig};
use iout_core::triage::TriagePolicy;
use iout_core::Timestamp;

#[derive(Parser)]
#[command(name = "iout", version, about = "Marine sensor data platform: simulate, ingest, quality-control and serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario on the virtual clock and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Virtual seconds of sampling.
        #[arg(long)]
        duration: Option<f64>,
        /// Virtual seconds per wall second; `inf` runs as fast as possible.
        #[arg(long, value_parser = parse_speedup)]
        speedup: Option<f64>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        report_json: Option<PathBuf>,
        /// JSON-lines event log.
        #[arg(long)]
        event_log: Option<PathBuf>,
        /// Persist the data space to this journal.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Exit with status 2 when an SLO rule is breached.
        #[arg(long)]
        fail_on_slo: bool,
    },
    /// Query a data space journal, printing one observation per line.
    Query {
        #[arg(long)]
        journal: PathBuf,
        /// Bearer token of the querying principal.
        #[arg(long)]
        token: String,
        #[arg(long)]
        secret: Option<String>,
        /// Scenario whose run key signed the token, when no secret is set.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        org: Option<String>,
        #[arg(long)]
        platform: Option<String>,
        #[arg(long)]
        parameter: Option<String>,
        #[arg(long = "category")]
        categories: Vec<String>,
        #[arg(long)]
        include_quarantined: bool,
    },
    /// Issue a bearer token for a principal of a scenario.
    IssueToken {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        principal: String,
        /// Lifetime in seconds.
        #[arg(long, default_value_t = 3600)]
        ttl: i64,
        #[arg(long)]
        secret: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Service mode on the wall clock: HTTP push ingestion, /metrics, /query
    /// and an MQTT listener.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        http: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:1883")]
        mqtt: SocketAddr,
        #[arg(long)]
        secret: Option<String>,
    },
}

fn parse_speedup(s: &str) -> Result<f64, String> {
    if matches!(s, "inf" | "∞") {
        return Ok(f64::INFINITY);
    }
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 => Ok(x),
        _ => Err(format!("expected a positive number or inf, got {s}")),
    }
}

/// Explicit secret, then the environment, then the scenario's run key.
fn resolve_key(secret: Option<String>, scenario: Option<(&ScenarioConfig, Option<u64>)>) -> anyhow::Result<SigningKey> {
    if let Some(s) = secret {
        return Ok(SigningKey::new(s));
    }
    if let Some(k) = SigningKey::from_env() {
        return Ok(k);
    }
    match scenario {
        Some((cfg, seed)) => Ok(run_key(seed.unwrap_or(cfg.seed))),
        None => bail!("no signing key: pass --secret, set {SECRET_ENV} or name the scenario with --config"),
    }
}

fn time_arg(name: &str, v: &Option<String>) -> anyhow::Result<Option<Timestamp>> {
    v.as_deref()
        .map(|s| Timestamp::parse_rfc3339(s).ok_or_else(|| anyhow!("--{name}: not an RFC 3339 time: {s}")))
        .transpose()
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            duration,
            speedup,
            metrics_out,
            report_json,
            event_log,
            journal,
            format,
            fail_on_slo,
        } => {
            let cfg = load_scenario(&config)?;
            let ov = RunOverrides {
                seed,
                duration_s: duration,
                event_log,
                journal,
                speedup,
            };
            let r = run(&cfg, &ov)?.report;
            if let Some(p) = metrics_out {
                write_file(&p, r.metrics.as_bytes())?;
            }
            if let Some(p) = report_json {
                write_file(&p, &report(&r, ReportFormat::Json))?;
            }
            let fmt = match format {
                Format::Text => ReportFormat::Text,
                Format::Json => ReportFormat::Json,
            };
            std::io::stdout().write_all(&report(&r, fmt))?;
            if fail_on_slo && !r.slo_breaches.is_empty() {
                eprintln!("{} SLO rule(s) breached", r.slo_breaches.len());
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Query {
            journal,
            token,
            secret,
            config,
            seed,
            from,
            to,
            org,
            platform,
            parameter,
            categories,
            include_quarantined,
        } => {
            let cfg = config.as_deref().map(load_scenario).transpose()?;
            let key = resolve_key(secret, cfg.as_ref().map(|c| (c, seed)))?;
            let flags = cfg
                .as_ref()
                .map_or_else(|| TriagePolicy::default().quarantine_flags, |c| c.triage.quarantine_flags.clone());
            let store = DataSpace::open(&journal, flags).with_context(|| format!("opening {}", journal.display()))?;
            let access = Token::from_bearer(&token)
                .and_then(|t| t.verify_access(Timestamp::now_wall(), &key, serve::SKEW))
                .map_err(|e| anyhow!("token rejected: {e}"))?;
            let mut params: Vec<(String, String)> = Vec::new();
            let mut add = |k: &str, v: &Option<String>| {
                if let Some(v) = v {
                    params.push((k.to_owned(), v.clone()));
                }
            };
            add("org", &org);
            add("platform", &platform);
            add("parameter", &parameter);
            for c in &categories {
                params.push(("category".into(), c.clone()));
            }
            let mut sel = serve::selector_from_params(&params).map_err(|e| anyhow!(e))?;
            if let Some(t) = time_arg("from", &from)? {
                sel.from = t;
            }
            if let Some(t) = time_arg("to", &to)? {
                sel.to = t;
            }
            sel.include_quarantined = include_quarantined;
            let rows = store.query(&sel, &access)?;
            let mut out = std::io::stdout().lock();
            for o in rows {
                writeln!(out, "{}", serde_json::to_string(&o)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::IssueToken {
            config,
            principal,
            ttl,
            secret,
            seed,
        } => {
            let cfg = load_scenario(&config)?;
            let key = resolve_key(secret, Some((&cfg, seed)))?;
            let dir = cfg.directory();
            let mut store = PrincipalStore::new();
            for (p, _) in &dir {
                store.insert(p.clone());
            }
            let grants = dir
                .into_iter()
                .find(|(p, _)| p.principal_id == principal)
                .map(|(_, g)| g)
                .ok_or_else(|| anyhow!("unknown principal {principal}"))?;
            let token = issue_token(&store, &principal, grants, ttl, Timestamp::now_wall(), &key)?;
            println!("{}", token.to_bearer());
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve {
            config,
            journal,
            http,
            mqtt,
            secret,
        } => {
            let cfg = load_scenario(&config)?;
            let key = resolve_key(secret, None)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve::serve(serve::ServeOptions {
                qc_tick_s: cfg.qc_tick_s,
                config: cfg,
                key,
                journal,
                http,
                mqtt,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // usage errors share status 1 with config errors; 2 is reserved for SLO breaches
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
