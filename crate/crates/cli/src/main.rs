use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tokenike::netsim::{
    self, udp, ConfigError, MatrixReport, RunOptions, ScenarioConfig, ScenarioReport, TableRow, DEFAULT_SEED,
};
use tokenike::protocol::{Counters, GateMode, Variant};

const EXIT_PROTOCOL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "tokenike", version, about = "Aggressive-mode IKE phase 1 with and without a security USB key")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Simulation seed.
    #[arg(long, global = true, env = "TOKENIKE_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Render verdicts as o/x instead of the circle and cross glyphs.
    #[arg(long, global = true)]
    ascii: bool,
    /// Also print the line-delimited transition and failure trace.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Run one handshake and print its message ladder.
    Handshake {
        #[arg(long, value_parser = parse_variant, default_value = "improved")]
        variant: Variant,
        /// Scenario whose first handshake to run instead of the bundled one.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Remove the token from a principal (a name, `initiator` or `responder`).
        #[arg(long, value_name = "PRINCIPAL")]
        no_token: Vec<String>,
        /// Carry the datagrams over loopback UDP.
        #[arg(long)]
        udp: bool,
    },
    /// Run one adversary scenario and print counters and the failure trace.
    Attack {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Run the fixed battery for both variants and render the comparison table.
    Matrix {
        #[arg(long, hide = true)]
        disable_dos_gate: bool,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common;
    match cli.command {
        Command::Handshake { variant, scenario, no_token, udp } => handshake(&common, variant, scenario, &no_token, udp),
        Command::Attack { scenario, variant } => attack(&common, &scenario, variant),
        Command::Matrix { disable_dos_gate } => {
            let gate = if disable_dos_gate { GateMode::Disabled } else { GateMode::Enforced };
            matrix(&common, RunOptions { gate })
        }
    }
}

fn handshake(common: &Common, variant: Variant, scenario: Option<PathBuf>, no_token: &[String], use_udp: bool) -> ExitCode {
    let mut cfg = match &scenario {
        Some(path) => match ScenarioConfig::load(path) {
            Ok(mut cfg) => {
                cfg.variant = variant;
                cfg.seed = common.seed;
                cfg
            }
            Err(e) => return config_error(e),
        },
        None => ScenarioConfig::builtin("honest", variant, common.seed).expect("bundled scenario"),
    };
    let Some(first) = cfg.handshakes.first().cloned() else {
        return config_error("scenario has no handshake");
    };
    cfg.handshakes.truncate(1);
    cfg.adversary.clear();
    for who in no_token {
        let name = match who.as_str() {
            "initiator" => first.initiator.clone(),
            "responder" => first.responder.clone(),
            other => other.to_string(),
        };
        match cfg.principal_mut(&name) {
            Some(p) => p.token = false,
            None => return config_error(ConfigError::UnknownPrincipal(name)),
        }
    }

    if use_udp {
        let out = match udp::run_loopback(&cfg, RunOptions::default()) {
            Ok(out) => out,
            Err(udp::UdpError::Config(e)) => return config_error(e),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_PROTOCOL);
            }
        };
        match common.format {
            Format::Structured => println!("{}", serde_json::to_string_pretty(&out).expect("serializes")),
            Format::Table => {
                println!("variant {}  seed {}  transport udp", cfg.variant, cfg.seed);
                for d in &out.datagrams {
                    println!("  msg{}  {} -> {}  {} bytes", d.message, d.from, d.to, d.bytes);
                }
                println!("{} ({}) / {} ({})", out.initiator, out.initiator_state, out.responder, out.responder_state);
                if let Some(f) = &out.failure {
                    println!("failure: {f}");
                }
            }
        }
        return exit_for(out.established && out.skeyid_match);
    }

    let report = match netsim::run_scenario(&cfg) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    match common.format {
        Format::Structured => println!("{}", report.to_json()),
        Format::Table => print_report(&report, true),
    }
    print_trace(common, &report);
    exit_for(report.all_established())
}

fn attack(common: &Common, path: &std::path::Path, variant: Option<Variant>) -> ExitCode {
    let mut cfg = match ScenarioConfig::load(path) {
        Ok(cfg) => cfg,
        Err(e) => return config_error(e),
    };
    if let Some(v) = variant {
        cfg.variant = v;
    }
    let report = match netsim::run_scenario(&cfg) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    match common.format {
        Format::Structured => println!("{}", report.to_json()),
        Format::Table => print_report(&report, false),
    }
    print_trace(common, &report);
    ExitCode::SUCCESS
}

fn matrix(common: &Common, opts: RunOptions) -> ExitCode {
    let report = match netsim::run_matrix(common.seed, opts) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    match common.format {
        Format::Structured => println!("{}", serde_json::to_string_pretty(&report).expect("serializes")),
        Format::Table => print_matrix(&report, common.ascii),
    }
    exit_for(report.matches_expected)
}

fn exit_for(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PROTOCOL)
    }
}

fn print_trace(common: &Common, report: &ScenarioReport) {
    if common.trace {
        for line in report.trace_lines() {
            println!("{line}");
        }
    }
}

fn print_report(r: &ScenarioReport, ladder_only: bool) {
    println!("scenario {}  variant {}  seed {}  group {}", r.scenario, r.variant, r.seed, r.group);
    println!("suite {}", r.suite);
    for m in &r.ladder {
        let payloads: Vec<String> = m
            .payloads
            .iter()
            .map(|p| format!("{}{}:{}", if p.sealed { "*" } else { "" }, p.payload, p.body_len))
            .collect();
        println!(
            "  msg{} #{:<2} {} -> {}  {:>4} bytes{}{}  {}",
            m.message,
            m.index,
            m.from,
            m.to,
            m.bytes,
            if m.encrypted { "  [encrypted]" } else { "" },
            if m.tampered { "  [tampered]" } else { "" },
            payloads.join(" ")
        );
    }
    for h in &r.handshakes {
        let status = if h.established && h.skeyid_match { "established" } else { "not established" };
        print!("{} -> {}: {status}", h.initiator, h.responder);
        match &h.skeyid_fingerprint {
            Some(fp) => println!(", SKEYID fingerprint {fp}"),
            None => println!(" ({} / {})", h.initiator_state, h.responder_state),
        }
    }
    let honest_failures: Vec<_> = r.failure_trace.iter().filter(|f| !f.injected).collect();
    for f in &honest_failures {
        println!("  failure at {} ({}): {}: {}", f.principal, f.role, f.step, f.detail);
    }
    if ladder_only {
        return;
    }

    println!();
    println!(
        "{:<10} {:>7} {:>7} {:>12} {:>16} {:>15} {:>9} {:>9}",
        "principal", "dh_ops", "modexp", "sig_verifies", "decrypt_failures", "rejected_pre_dh", "dev_sigs", "host_sigs"
    );
    for (name, p) in &r.principals {
        let c: &Counters = &p.counters;
        println!(
            "{:<10} {:>7} {:>7} {:>12} {:>16} {:>15} {:>9} {:>9}",
            name,
            c.dh_ops,
            c.modexps,
            c.sig_verifies,
            c.decrypt_failures,
            c.messages_rejected_pre_dh,
            c.device_signatures,
            c.host_signatures
        );
    }
    for f in &r.floods {
        println!(
            "flood -> {}: {} packets from {} sources; target dh_ops {}, rejected pre-DH {}; {} replies blackholed",
            f.target, f.count, f.distinct_sources, f.target_dh_ops, f.target_rejected_pre_dh, f.replies_blackholed
        );
    }
    for t in &r.tamper_log {
        let at = t.offset.map_or_else(|| "missed".to_string(), |o| format!("offset {o}"));
        let how = if t.via_sender_layout { " via sender layout" } else { "" };
        println!("tamper msg #{} {} xor {:#04x}: {at}{how}", t.message, t.selector, t.xor);
    }
    for rp in &r.replays {
        println!("replay of msg #{} after {} deliveries: {}", rp.message, rp.delay, if rp.delivered { "delivered" } else { "not captured" });
    }
    if !r.observer_findings.is_empty() || r.evidence.observer.is_some() {
        println!("keyless observer recovered {} payload plaintexts", r.observer_findings.len());
        for f in &r.observer_findings {
            println!("  msg #{} {} {} bytes", f.message, f.payload, f.bytes);
        }
    }
    if !r.insider_findings.is_empty() {
        println!("key1 holder recovered {} payload plaintexts", r.insider_findings.len());
        for f in &r.insider_findings {
            println!("  msg #{} {} {} bytes", f.message, f.payload, f.bytes);
        }
    }
    let injected = r.failure_trace.iter().filter(|f| f.injected).count();
    if injected > 0 {
        let mut steps = std::collections::BTreeMap::new();
        for f in r.failure_trace.iter().filter(|f| f.injected) {
            *steps.entry(f.step.label()).or_insert(0usize) += 1;
        }
        let summary: Vec<String> = steps.iter().map(|(s, n)| format!("{s} x{n}")).collect();
        println!("injected traffic rejected: {}", summary.join(", "));
    }
    if !r.verdicts.is_empty() {
        let v: Vec<String> = r.verdicts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("verdicts: {}", v.join(" "));
    }
}

fn print_matrix(report: &MatrixReport, ascii: bool) {
    let headers = ["protocol", "SA,KE protection", "CERT,SIG protection", "DoS prevention", "certificate storage"];
    let widths = [10, 17, 20, 15, 19];
    let line = |cells: [&str; 5]| {
        let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", padded.join(" ").trim_end());
    };
    line(headers);
    let cells = |variant: Variant, row: &TableRow| {
        [
            variant.name().to_string(),
            row.sa_ke_protection.glyph(ascii).to_string(),
            row.cert_sig_protection.glyph(ascii).to_string(),
            row.dos_prevention.glyph(ascii).to_string(),
            row.certificate_storage.name().to_string(),
        ]
    };
    for row in &report.rows {
        let c = cells(row.variant, &row.measured);
        line([&c[0], &c[1], &c[2], &c[3], &c[4]]);
    }
    println!();
    for row in report.rows.iter().filter(|r| !r.matches) {
        let c = cells(row.variant, &row.expected);
        println!("{} expected: {} {} {} {}", c[0], c[1], c[2], c[3], c[4]);
    }
    println!("seed {}  matches expected pattern: {}", report.seed, if report.matches_expected { "yes" } else { "no" });
}
