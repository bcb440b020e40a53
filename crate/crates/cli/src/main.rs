use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use aqlog_core::blocks::canonical_decode;
use aqlog_core::crypto::sha3_256;
use aqlog_core::merkle::{node_count, tree_levels, verify_inclusion, MerkleLog};
use aqlog_core::monitor::{Monitor, MonitorSettings, STATS_HEADER};
use aqlog_core::sim::{run, SimConfig};
use aqlog_core::verifier::{audit, decode_stream, parse_records};
use aqlog_core::{PolicySet, SensorTable};

/// Tamper-evident air quality log: simulate, verify, audit and report.
#[derive(Parser)]
#[command(name = "aqlog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sensor network scenario and write its transcript.
    Simulate(SimulateArgs),
    /// Replay recorded ingest messages through a fresh verifier.
    Verify(VerifyArgs),
    /// Rebuild every zone's tree from an audit log and check it.
    Audit {
        #[arg(long)]
        log: PathBuf,
    },
    /// Print and check the inclusion proof of one audit log entry.
    Prove {
        #[arg(long)]
        log: PathBuf,
        /// Leaf index within the zone.
        #[arg(long)]
        index: usize,
        /// Zone to prove in; required when the log holds several.
        #[arg(long)]
        zone: Option<String>,
    },
    /// Write a copy of an audit log with one byte altered.
    Tamper(TamperArgs),
    /// Statistics rows for every accepted block, plus transcript alerts.
    Report {
        #[arg(long)]
        audit_log: PathBuf,
        /// Scenario config supplying sensor ranges, policies and window.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Levels and node counts for 1..=N leaves.
    Growth { n: u64 },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Transcript path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    audit_log: Option<PathBuf>,
    /// Wire-format copy of every message the server received.
    #[arg(long)]
    messages: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    messages: PathBuf,
    /// Audit log produced by the replay.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "target")]
struct TamperTarget {
    /// Absolute byte offset to alter.
    #[arg(long, group = "target")]
    offset: Option<usize>,
    /// Alter the first reading digit of this record.
    #[arg(long, group = "target")]
    record: Option<usize>,
}

#[derive(Args)]
struct TamperArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    target: TamperTarget,
    /// Mask XORed into the byte.
    #[arg(long, default_value_t = 1, value_parser = parse_mask)]
    xor: u8,
}

fn parse_mask(s: &str) -> Result<u8, String> {
    let v = match s.strip_prefix("0x") {
        Some(h) => u8::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| e.to_string())?;
    if v == 0 {
        return Err("mask must be non-zero".into());
    }
    Ok(v)
}

/// Verification or audit found a problem.
#[derive(Debug)]
struct Failed;

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Output piped into something like `head` that closed early.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn dispatch(command: Command) -> Result<bool> {
    let result = match command {
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify(a),
        Command::Audit { log } => audit_cmd(&log),
        Command::Prove { log, index, zone } => prove(&log, index, zone.as_deref()),
        Command::Tamper(a) => tamper(a),
        Command::Report {
            audit_log,
            config,
            transcript,
        } => report(&audit_log, config.as_deref(), transcript.as_deref()),
        Command::Growth { n } => growth(n),
    };
    match result {
        Ok(()) => Ok(true),
        Err(e) if e.is::<Failed>() => Ok(false),
        Err(e) => Err(e),
    }
}

fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SimConfig::from_toml_str(&text).with_context(|| format!("config {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let outcome = run(&config);
    match &a.out {
        Some(p) => write(p, outcome.transcript.as_bytes())?,
        None => io::stdout().write_all(outcome.transcript.as_bytes())?,
    }
    if let Some(p) = &a.audit_log {
        write(p, &outcome.audit_log)?;
    }
    if let Some(p) = &a.messages {
        write(p, &outcome.messages)?;
    }
    if a.out.is_some() {
        println!("{}", outcome.summary.render());
        for (zone, root) in &outcome.roots {
            println!("zone={zone} root={root}");
        }
    }
    if outcome.summary.rejects > 0 {
        return Err(Failed.into());
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let bytes = read(&a.messages)?;
    let mut verifier = config.build_verifier();
    let mut rejected = 0usize;
    let mut accepted = 0usize;
    for (i, item) in decode_stream(&bytes).into_iter().enumerate() {
        match item {
            Ok(msg) => {
                let v = verifier.ingest(&msg);
                println!(
                    "message={i} gateway={} device={} ts={} status={} reason={}",
                    msg.gateway_id, msg.block.device_id, msg.block.timestamp, v.status, v.reason
                );
                if v.accepted() {
                    accepted += 1;
                } else {
                    rejected += 1;
                }
            }
            Err((offset, e)) => {
                println!("message={i} offset={offset} status=REJECT reason=malformed detail=\"{e}\"");
                rejected += 1;
            }
        }
    }
    println!("accepted={accepted} rejected={rejected}");
    for z in &config.zones {
        if let Some(root) = verifier.mirror(&z.zone_id).and_then(MerkleLog::root) {
            println!("zone={} root={root}", z.zone_id);
        }
    }
    if let Some(p) = &a.audit_log {
        write(p, verifier.audit_log().as_bytes())?;
    }
    if rejected > 0 {
        return Err(Failed.into());
    }
    Ok(())
}

fn audit_cmd(log: &Path) -> Result<()> {
    let bytes = read(log)?;
    let report = match audit(&bytes) {
        Ok(r) => r,
        Err(e) => {
            println!("divergence record={} offset={} detail=\"{}\"", e.record, e.offset, e.reason);
            return Err(Failed.into());
        }
    };
    println!("records={}", report.records);
    for (zone, s) in &report.zones {
        println!("zone={zone} leaves={} root={}", s.leaves, s.root);
    }
    match report.divergence {
        None => {
            println!("clean");
            Ok(())
        }
        Some(d) => {
            println!("divergence record={} offset={} detail=\"{}\"", d.record, d.offset, d.detail);
            Err(Failed.into())
        }
    }
}

fn prove(log: &Path, index: usize, zone: Option<&str>) -> Result<()> {
    let bytes = read(log)?;
    let records = parse_records(&bytes).context("parsing audit log")?;
    let mut zones = Vec::new();
    let mut entries = Vec::new();
    for rec in &records {
        let block = canonical_decode(rec.block_bytes).with_context(|| format!("record at byte {}", rec.offset))?;
        if !zones.contains(&block.zone_id) {
            zones.push(block.zone_id.clone());
        }
        entries.push((block.zone_id, sha3_256(rec.block_bytes), rec.root_after));
    }
    let zone = match (zone, zones.as_slice()) {
        (Some(z), _) => z.to_string(),
        (None, [only]) => only.clone(),
        (None, []) => bail!("audit log is empty"),
        (None, _) => bail!("log holds several zones; pass --zone ({})", zones.join(", ")),
    };
    let in_zone: Vec<_> = entries.iter().filter(|e| e.0 == zone).collect();
    if in_zone.is_empty() {
        bail!("zone {zone} not in log");
    }
    let tree = MerkleLog::from_leaves(in_zone.iter().map(|e| e.1));
    let path = tree
        .auth_path(index)
        .with_context(|| format!("index {index} of {} leaves", tree.len()))?;
    let leaf = in_zone[index].1;
    let stored_root = in_zone[in_zone.len() - 1].2;
    println!("zone={zone} leaves={} index={index}", tree.len());
    println!("leaf={leaf}");
    for step in &path.steps {
        println!("path={step}");
    }
    println!("root={stored_root}");
    if verify_inclusion(&leaf, &path, &stored_root) {
        println!("OK");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failed.into())
    }
}

fn tamper(a: TamperArgs) -> Result<()> {
    if a.out == a.log {
        bail!("--out must differ from --log");
    }
    let mut bytes = read(&a.log)?;
    let offset = match (a.target.offset, a.target.record) {
        (Some(o), _) => o,
        (None, Some(r)) => {
            let records = parse_records(&bytes).context("parsing audit log")?;
            let rec = records
                .get(r)
                .with_context(|| format!("record {r} of {}", records.len()))?;
            let text = std::str::from_utf8(rec.block_bytes).context("record not UTF-8")?;
            let at = text.find("\nco2=").context("record has no co2 line")? + "\nco2=".len();
            let payload_start = bytes[rec.offset..]
                .iter()
                .position(|&b| b == b'\n')
                .expect("parsed record has a length line")
                + rec.offset
                + 1;
            payload_start + at
        }
        (None, None) => unreachable!("clap enforces one target"),
    };
    let Some(byte) = bytes.get_mut(offset) else {
        bail!("offset {offset} beyond end of log ({} bytes)", bytes.len());
    };
    let before = *byte;
    *byte ^= a.xor;
    write(&a.out, &bytes)?;
    println!("offset={offset} before={before:#04x} after={:#04x}", before ^ a.xor);
    Ok(())
}

fn report(audit_log: &Path, config: Option<&Path>, transcript: Option<&Path>) -> Result<()> {
    let (sensors, policies, settings) = match config {
        Some(p) => {
            let c = load_config(p)?;
            let settings = c.monitor_settings();
            (c.sensors, c.policies, settings)
        }
        None => (SensorTable::default(), PolicySet::default(), MonitorSettings::default()),
    };
    let bytes = read(audit_log)?;
    let records = parse_records(&bytes).context("parsing audit log")?;
    let mut monitor = Monitor::new(&sensors, policies, settings);
    let mut out = io::stdout().lock();
    writeln!(out, "{STATS_HEADER}")?;
    for rec in &records {
        let block = canonical_decode(rec.block_bytes).with_context(|| format!("record at byte {}", rec.offset))?;
        for row in monitor.observe(&block) {
            writeln!(out, "{}", row.render())?;
        }
    }
    if let Some(p) = transcript {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for line in text.lines() {
            if matches!(line.split(' ').nth(1), Some("NOTIFY" | "SECURITY")) {
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

fn growth(n: u64) -> Result<()> {
    let mut out = io::stdout().lock();
    for l in 1..=n {
        writeln!(out, "{l} {} {}", tree_levels(l)?, node_count(l)?)?;
    }
    Ok(())
}
