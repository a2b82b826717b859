use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sharedspace::colocation::NoiseSpec;
use sharedspace::mllm::{ExternalBackend, MockBackend, MockScript, ModelBackend, RetryPolicy};
use sharedspace::privacy::{Detector, ExternalProcessDetector, MockDetector, PrivacyCorpus, PrivacyLevel, PrivacyPolicy};
use sharedspace::server::{runtime, BackendKind, ServerConfig, Session};
use sharedspace::sim::{self, ModelSource, RunOptions, Scenario, SimServices};
use sharedspace::sync::{run_conformance, GoldenSet};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

#[derive(Parser)]
#[command(name = "sharedspace", version, about = "Shared-space XR edge server and simulation harness")]
struct Cli {
    /// Server config, noise spec or privacy policy, depending on the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run `simulate` on the wall clock over loopback TCP.
    #[arg(long, global = true)]
    realtime: bool,
    /// Directory for reports and logs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["mock", "external"])]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the edge server.
    Serve,
    /// Run a scenario file.
    Simulate { scenario: PathBuf },
    /// Registration accuracy over distance and tag size.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,3,5")]
        distances: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2")]
        tag_sizes: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Sensitivity presence before and after cropping over a capture corpus.
    Audit { corpus: Option<PathBuf> },
    /// Check golden wire fixtures and random round trips.
    Conformance {
        fixtures: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Re-execute a simulation log and compare final state.
    Replay { log: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let backend = cli.backend.as_deref().map(str::parse::<BackendKind>).transpose()?;
    match &cli.command {
        Command::Serve => serve(&cli, backend),
        Command::Simulate { scenario } => simulate(&cli, scenario, backend),
        Command::Sweep {
            distances,
            tag_sizes,
            trials,
        } => sweep(&cli, distances, tag_sizes, *trials),
        Command::Audit { corpus } => audit(&cli, corpus.as_deref()),
        Command::Conformance { fixtures, trials } => conformance(&cli, fixtures.as_deref(), *trials),
        Command::Replay { log } => replay(log),
    }
}

fn write_out(cli: &Cli, name: &str, contents: &str) -> Result<()> {
    if let Some(dir) = &cli.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn external_backend(cfg: Option<&ServerConfig>) -> Result<Arc<dyn ModelBackend>> {
    let ext = cfg.and_then(|c| c.external.clone()).unwrap_or_default();
    Ok(Arc::new(ExternalBackend::new(ext)?))
}

fn serve(cli: &Cli, backend: Option<BackendKind>) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => ServerConfig::load(p)?,
        None => ServerConfig::default(),
    };
    let model: Arc<dyn ModelBackend> = match backend.unwrap_or(cfg.backend) {
        BackendKind::External => external_backend(Some(&cfg))?,
        BackendKind::Mock => match &cfg.mock_script {
            Some(p) => Arc::new(MockBackend::load(p)?),
            None => {
                tracing::warn!("no mockScript configured; every model call will fail");
                Arc::new(MockBackend::from_script(MockScript {
                    version: 1,
                    identity: "empty".into(),
                    accepts_images: false,
                    rules: Vec::new(),
                })?)
            }
        },
    };
    let detector: Arc<dyn Detector> = match (&cfg.detector_command, &cfg.detector_script) {
        (Some(cmd), _) if !cmd.is_empty() => Arc::new(ExternalProcessDetector::spawn(&cmd[0], &cmd[1..])?),
        (_, Some(p)) => Arc::new(MockDetector::load(p)?),
        _ => Arc::new(MockDetector::new()),
    };
    let mut session_cfg = cfg.session_config(model.accepts_images())?;
    session_cfg.measure_compute = true;
    let services = runtime::Services {
        backend: model,
        detector,
        retry: RetryPolicy::default(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = runtime::start(Session::new(session_cfg), services, &cfg.listen, cfg.websocket.as_deref()).await?;
        println!("listening on tcp://{}", handle.tcp_addr);
        if let Some(ws) = handle.ws_addr {
            println!("listening on ws://{ws}");
        }
        tokio::signal::ctrl_c().await?;
        let session = handle.shutdown().await?;
        println!("{}", serde_json::to_string_pretty(session.stats())?);
        Ok(true)
    })
}

fn simulate(cli: &Cli, path: &Path, backend: Option<BackendKind>) -> Result<bool> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
        if let Some(n) = &mut scenario.noise {
            n.seed = seed;
        }
    }
    let mut services = SimServices::from_scenario(&scenario)?;
    if backend == Some(BackendKind::External) {
        let cfg = cli.config.as_ref().map(ServerConfig::load).transpose()?;
        services = services.with_model(ModelSource::Live(external_backend(cfg.as_ref())?));
    }
    if cli.realtime {
        let rt = tokio::runtime::Runtime::new()?;
        let out = rt.block_on(sim::run_realtime(&scenario, &services))?;
        println!("{}", out.report.to_text());
        let mut bytes = String::from("channel,socketBytes,framedBytes\n");
        for (ch, n) in &out.transport {
            println!("{ch:<18} {n:>10} bytes");
            bytes.push_str(&format!("{ch},{n},{}\n", out.framed.get(ch).copied().unwrap_or(0)));
        }
        write_out(cli, "latency.txt", &out.report.to_text())?;
        write_out(cli, "latency.csv", &out.report.to_csv())?;
        write_out(cli, "transport.csv", &bytes)?;
        return Ok(true);
    }
    let out = sim::run_virtual(&scenario, &services, &RunOptions::default())?;
    println!("{}", out.report.to_text());
    println!("{}", out.bandwidth.to_text());
    println!(
        "uploads {} (with image {}), consent approvals {} rejections {} timeouts {}, violations {}",
        out.uploads.uploads,
        out.uploads.with_image,
        out.uploads.approvals,
        out.uploads.rejections,
        out.uploads.timeouts,
        out.uploads.violations.len()
    );
    for c in &out.clients {
        for i in &c.issues {
            println!("{} at {:.3}s: {}", c.user(), i.at, i.message);
        }
    }
    println!("final state {}", out.digest);
    write_out(cli, "events.jsonl", &out.log.to_jsonl())?;
    write_out(cli, "latency.txt", &out.report.to_text())?;
    write_out(cli, "latency.csv", &out.report.to_csv())?;
    write_out(cli, "bandwidth.txt", &out.bandwidth.to_text())?;
    write_out(cli, "uploads.json", &serde_json::to_string_pretty(&out.uploads)?)?;
    Ok(out.uploads.violations.is_empty())
}

fn sweep(cli: &Cli, distances: &[f64], tag_sizes: &[f64], trials: usize) -> Result<bool> {
    let mut noise = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<NoiseSpec>(&text)?
        }
        None => NoiseSpec::default(),
    };
    if let Some(seed) = cli.seed {
        noise.seed = seed;
    }
    let table = sim::registration_sweep(distances, tag_sizes, &noise, trials)?;
    print!("{}", table.to_text());
    if let Some(m) = table.mean_within(3.0) {
        println!("mean within 3 m: {:.3} cm", m * 100.0);
    }
    write_out(cli, "sweep.csv", &table.to_csv())?;
    Ok(true)
}

fn audit(cli: &Cli, corpus: Option<&Path>) -> Result<bool> {
    let default = PathBuf::from(FIXTURES).join("privacy/corpus.txt");
    let corpus = PrivacyCorpus::load(corpus.unwrap_or(&default))?;
    let policy = match &cli.config {
        Some(p) => PrivacyPolicy::load(p)?,
        None => PrivacyPolicy::twelve_category(),
    };
    let s = corpus.audit(&policy);
    let mut csv = String::from("level,original,cropped\n");
    println!("{} frames", s.frames);
    println!("{:<18} {:>9} {:>9}", "level", "original", "cropped");
    for level in PrivacyLevel::ALL {
        let (o, c) = (s.original[&level], s.cropped[&level]);
        println!("{:<18} {:>8.2}% {:>8.2}%", level.label(), o * 100.0, c * 100.0);
        csv.push_str(&format!("{},{o},{c}\n", level.label()));
    }
    write_out(cli, "audit.csv", &csv)?;
    Ok(true)
}

fn conformance(cli: &Cli, fixtures: Option<&Path>, trials: usize) -> Result<bool> {
    let default = PathBuf::from(FIXTURES).join("wire/golden.toml");
    let set = GoldenSet::load(fixtures.unwrap_or(&default)).map_err(anyhow::Error::msg)?;
    let report = run_conformance(&set, trials, cli.seed.unwrap_or(1));
    print!("{}", report.to_text());
    write_out(cli, "conformance.txt", &report.to_text())?;
    Ok(report.passed())
}

fn replay(path: &Path) -> Result<bool> {
    let log = sim::EventLog::load(path)?;
    let (_, outcome) = sim::replay(&log)?;
    println!("replayed {} inputs", outcome.inputs);
    println!("final state {}", outcome.digest);
    match &outcome.expected {
        Some(e) if outcome.matches() => println!("matches the recorded final state"),
        Some(e) => println!("DIFFERS from the recorded final state {e}"),
        None => bail!("log has no final record to compare against"),
    }
    Ok(outcome.matches())
}
