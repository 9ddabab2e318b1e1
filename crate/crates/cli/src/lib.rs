//! Command implementations behind the `privadmm` binary.

pub mod artifacts;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use privadmm_core::experiment::{run_experiment, verify, ExperimentConfig, ExperimentError, ExperimentResult, Mode, VerifyReport};
use privadmm_core::he::{detect_key_cycles, keygen, HeScheme, KeyRegistry};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "privadmm", version, about = "Distributed ADMM formation experiments, in plaintext and encrypted")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed-loop experiment and write trajectories, plot and reports.
    Run(CommonArgs),
    /// Check layout locality, problem validity, encoding budget and key graph
    /// without running anything.
    Verify(CommonArgs),
    /// Generate two key instances, a switch key between them, and report
    /// sizes and a switched round trip.
    KeygenDemo(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Modes to run, overriding the config. Repeat or separate by commas.
    #[arg(long, value_delimiter = ',')]
    pub mode: Vec<Mode>,
    /// Seed for initial positions and, unless the config sets one, keys.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure categories; each maps to its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("audit: {0}")]
    Audit(String),
    #[error("run: {0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 3,
            Self::Validation(_) => 4,
            Self::Audit(_) => 5,
            Self::Runtime(_) => 6,
            Self::Io(_) => 7,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Codec(_) | ExperimentError::Formation(_) => {
                Self::Config(e.to_string())
            }
            ExperimentError::Budget(_) | ExperimentError::Problem(_) => Self::Validation(e.to_string()),
            ExperimentError::Admm(_) | ExperimentError::Protocol(_) => Self::Runtime(e.to_string()),
        }
    }
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
    };
    if !args.mode.is_empty() {
        cfg.modes = args.mode.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// File names written by `run`, relative to the output directory.
pub fn csv_name(mode: Mode) -> String {
    format!("trajectory_{mode}.csv")
}
pub const SVG_NAME: &str = "trajectories.svg";
pub const DEVIATION_NAME: &str = "deviation.json";
pub const AUDIT_NAME: &str = "audit.json";
pub const MESSAGES_NAME: &str = "messages.jsonl";
pub const SUMMARY_NAME: &str = "summary.json";

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    scenario: &'a str,
    agents: usize,
    steps: usize,
    iterations: usize,
    formation_error: &'a std::collections::BTreeMap<Mode, f64>,
    encrypted: Option<EncryptedBrief>,
    timings: &'a [privadmm_core::experiment::PhaseTiming],
}

#[derive(Serialize)]
struct EncryptedBrief {
    max_scale_exp: u32,
    max_noise_ratio: f64,
    key_switches: usize,
    messages: usize,
    bytes: usize,
    audit_ok: bool,
}

/// Writes every artifact of a finished run into `out`.
pub fn write_artifacts(cfg: &ExperimentConfig, result: &ExperimentResult, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    for (mode, traj) in &result.trajectories {
        let csv = artifacts::trajectory_csv(traj).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(out.join(csv_name(*mode)), csv)?;
    }
    fs::write(out.join(SVG_NAME), artifacts::trajectory_svg(result))?;
    write_json(&out.join(DEVIATION_NAME), &result.deviations)?;
    if let Some(enc) = &result.encrypted {
        write_json(&out.join(AUDIT_NAME), &enc.audit)?;
    }
    if let Some(log) = &result.message_log {
        fs::write(out.join(MESSAGES_NAME), log)?;
    }
    let summary = Summary {
        config: cfg,
        scenario: &result.scenario,
        agents: result.agents,
        steps: result.steps,
        iterations: result.iterations,
        formation_error: &result.formation_error,
        encrypted: result.encrypted.as_ref().map(|e| EncryptedBrief {
            max_scale_exp: e.stats.max_scale_exp,
            max_noise_ratio: e.stats.max_noise_ratio,
            key_switches: e.stats.key_switches,
            messages: e.messages,
            bytes: e.bytes,
            audit_ok: e.audit.is_ok(),
        }),
        timings: &result.timings,
    };
    write_json(&out.join(SUMMARY_NAME), &summary)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.3e}"))
}

/// Runs the experiment, writes artifacts and returns a printable summary.
/// An audit failure is reported after the artifacts are written.
pub fn cmd_run(args: &CommonArgs, err: &mut dyn std::io::Write) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let report = verify(&cfg);
    if !report.is_ok() {
        return Err(CliError::Validation(failed_checks(&report)));
    }
    let steps = cfg.steps;
    let mut progress = |mode: Mode, t: usize| {
        let _ = writeln!(err, "{mode}: step {}/{steps}", t + 1);
    };
    let result = run_experiment(&cfg, Some(&mut progress))?;
    write_artifacts(&cfg, &result, &out)?;

    let mut s = format!("{} agents, {} steps, ell = {}\n", result.agents, result.steps, result.iterations);
    for (mode, e) in &result.formation_error {
        s += &format!("{mode}: final formation error {e:.4}\n");
    }
    let d = &result.deviations;
    s += &format!("max |encrypted - plain| per step: {}\n", fmt_opt(d.max_encrypted_vs_plain));
    s += &format!("max |plain - centralized| per step: {}\n", fmt_opt(d.max_plain_vs_centralized));
    for t in &result.timings {
        s += &format!("{}: {:.2} s\n", t.phase, t.seconds);
    }
    s += &format!("artifacts in {}\n", out.display());
    if let Some(enc) = &result.encrypted {
        s += &format!(
            "encrypted: {} messages, {} bytes, max scale exponent {}, {} key switches\n",
            enc.messages, enc.bytes, enc.stats.max_scale_exp, enc.stats.key_switches
        );
        if !enc.audit.is_ok() {
            let _ = write!(err, "{s}");
            let v: Vec<String> = enc.audit.violations.iter().map(|v| format!("{}: {}", v.goal, v.detail)).collect();
            return Err(CliError::Audit(v.join("; ")));
        }
        s += "audit: pass\n";
    }
    Ok(s)
}

fn failed_checks(report: &VerifyReport) -> String {
    report.failed().map(|c| format!("{} ({})", c.name, c.detail)).collect::<Vec<_>>().join("; ")
}

pub fn cmd_verify(args: &CommonArgs) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let report = verify(&cfg);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("verify.json"), &report)?;
    }
    let mut s = String::new();
    for c in &report.checks {
        s += &format!("{} {}: {}\n", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    if report.is_ok() {
        Ok(s)
    } else if report.checks.iter().any(|c| c.name == "config" && !c.ok) {
        Err(CliError::Config(failed_checks(&report)))
    } else {
        Err(CliError::Validation(format!("{s}{}", failed_checks(&report))))
    }
}

#[derive(Debug, Serialize)]
pub struct KeygenReport {
    pub preset: String,
    pub n: usize,
    pub ciphertext_modulus_bits: u32,
    pub public_key_entries: usize,
    pub ciphertext_bytes: usize,
    pub switch_key_bytes: usize,
    pub keygen_seconds: f64,
    pub switch_key_seconds: f64,
    pub input: f64,
    pub switched_output: f64,
    pub registry_cycles: usize,
}

pub fn cmd_keygen_demo(args: &CommonArgs) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let seed = cfg.protocol_seed.unwrap_or(cfg.seed);
    let codec = cfg.codec.codec()?;
    let scheme = HeScheme::from_preset(codec, cfg.scheme).map_err(|e| CliError::Config(e.to_string()))?;
    let start = Instant::now();
    let k0 = keygen(&scheme, 0, seed);
    let k1 = keygen(&scheme, 1, seed);
    let keygen_seconds = start.elapsed().as_secs_f64();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut registry = KeyRegistry::new();
    let start = Instant::now();
    let key = scheme
        .gen_switch_key(&k0.sk, &k1.pk, &mut registry, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let switch_key_seconds = start.elapsed().as_secs_f64();
    let input = 3.25;
    let run = || -> Result<(Vec<u8>, f64), privadmm_core::he::HeError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
        let ct = scheme.encrypt_real(&k0.pk, input, &mut rng)?;
        let switched = scheme.key_switch(&ct, &key)?;
        Ok((scheme.to_bytes(&ct), scheme.decrypt_real(&k1.sk, &switched)?))
    };
    let (ct_bytes, output) = run().map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = KeygenReport {
        preset: cfg.scheme.name().into(),
        n: scheme.n(),
        ciphertext_modulus_bits: scheme.q_bits(),
        public_key_entries: k0.pk.len(),
        ciphertext_bytes: ct_bytes.len(),
        switch_key_bytes: key.size_bytes(),
        keygen_seconds,
        switch_key_seconds,
        input,
        switched_output: output,
        registry_cycles: detect_key_cycles(&registry).len(),
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("keygen.json"), &report)?;
        fs::write(out.join("ciphertext_0.bin"), &ct_bytes)?;
        fs::write(out.join("switch_key_0_1.bin"), scheme.switch_key_to_bytes(&key))?;
    }
    let mut s = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    if output != input {
        return Err(CliError::Runtime(format!("switched round trip gave {output}, expected {input}")));
    }
    Ok(s)
}

/// Dispatches a parsed command; `err` receives progress lines.
pub fn execute(cli: &Cli, err: &mut dyn std::io::Write) -> Result<String, CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, err),
        Command::Verify(a) => cmd_verify(a),
        Command::KeygenDemo(a) => cmd_keygen_demo(a),
    }
}
