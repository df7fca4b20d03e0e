//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! numerical error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{crlb_freq, run_grid, GridConfig};
use crate::em::{fit_em, EmConfig};
use crate::error::Error;
use crate::io::{
    format_f64, meta_get, read_timeseries, to_precise_json, write_bench, write_scf,
    write_timeseries, write_track, write_truth, Metadata,
};
use crate::scf::{fit_blocks, LmConfig};
use crate::signal::{simulate_fpd, SimParams, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Eks,
    Scf,
    Bench,
    Crlb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbRequest {
    pub amplitude: f64,
    pub sigma_eta: f64,
    pub n: usize,
    pub fs: f64,
}

/// Contents of the JSON configuration file. Relative paths are resolved
/// against the directory of the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Per-sample true frequency written by `simulate`.
    pub truth_output: Option<PathBuf>,
    /// Sampling rate for inputs without a time column.
    pub fs: Option<f64>,
    /// Smoother block length in seconds.
    pub t_bl: Option<f64>,
    /// SCF block lengths in seconds.
    pub block_lengths: Vec<f64>,
    pub l_half: Option<usize>,
    /// Carrier search range in Hz.
    pub search: Option<[f64; 2]>,
    pub gamma_over_2pi: Option<f64>,
    pub em: EmConfig,
    pub lm: LmConfig,
    pub sim: Option<SimParams>,
    pub grid: Option<GridConfig>,
    pub crlb: Option<CrlbRequest>,
}

pub const DEFAULT_T_BL: f64 = 4.5;

#[derive(Debug, Parser)]
#[command(
    name = "fpdtrack",
    version,
    about = "Frequency tracking of free precession decay signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a decaying precession record.
    Simulate(Flags),
    /// EM-tuned extended Kalman smoother.
    Eks(Flags),
    /// Block-wise sine-cosine fits.
    Scf(Flags),
    /// Monte-Carlo comparison grid.
    Bench(Flags),
    /// Single-tone frequency variance bound.
    Crlb(Flags),
    /// Run the mode named in the configuration file.
    Run(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "t-bl")]
    t_bl: Option<f64>,
    /// Spectral half-width L.
    #[arg(long = "l")]
    l_half: Option<usize>,
    /// SCF block length in seconds; repeat for several.
    #[arg(long = "block-length")]
    block_length: Vec<f64>,
    /// Sampling rate for inputs without a time column.
    #[arg(long)]
    fs: Option<f64>,
    /// γ/2π in Hz/T; adds field columns.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `fpdtrack --help` for usage");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.input, &mut cfg.output, &mut cfg.truth_output] {
        if let Some(v) = p.as_mut() {
            if v.is_relative() {
                *v = base.join(&*v);
            }
        }
    }
    Ok(cfg)
}

/// Folds the flags into the file configuration.
fn effective_config(flags: Flags) -> CliResult<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if flags.input.is_some() {
        cfg.input = flags.input;
    }
    if flags.out.is_some() {
        cfg.output = flags.out;
    }
    if let Some(s) = flags.seed {
        if let Some(sim) = cfg.sim.as_mut() {
            sim.seed = s;
        }
        if let Some(g) = cfg.grid.as_mut() {
            g.seed_base = s;
        }
    }
    if flags.t_bl.is_some() {
        cfg.t_bl = flags.t_bl;
    }
    if flags.l_half.is_some() {
        cfg.l_half = flags.l_half;
    }
    if !flags.block_length.is_empty() {
        cfg.block_lengths = flags.block_length;
    }
    if flags.fs.is_some() {
        cfg.fs = flags.fs;
    }
    if flags.gamma.is_some() {
        cfg.gamma_over_2pi = flags.gamma;
    }
    Ok(cfg)
}

fn run(command: Command) -> CliResult<()> {
    let (mode, flags) = match command {
        Command::Simulate(f) => (Some(Mode::Simulate), f),
        Command::Eks(f) => (Some(Mode::Eks), f),
        Command::Scf(f) => (Some(Mode::Scf), f),
        Command::Bench(f) => (Some(Mode::Bench), f),
        Command::Crlb(f) => (Some(Mode::Crlb), f),
        Command::Run(f) => (None, f),
    };
    let config_path = flags.config.clone();
    let mut cfg = effective_config(flags)?;
    if let Some(cp) = &config_path {
        for out in [&cfg.output, &cfg.truth_output].into_iter().flatten() {
            check_distinct(&[cp, out])?;
        }
    }
    let mode = match (mode, cfg.mode) {
        (Some(m), _) => m,
        (None, Some(m)) => m,
        (None, None) => return Err(usage("`run` needs a `mode` in the configuration")),
    };
    cfg.mode = Some(mode);
    match mode {
        Mode::Simulate => simulate(&cfg),
        Mode::Eks => eks(&cfg),
        Mode::Scf => scf(&cfg),
        Mode::Bench => bench(&cfg),
        Mode::Crlb => crlb(&cfg),
    }
}

fn config_hash(cfg: &RunConfig) -> CliResult<String> {
    let json = to_precise_json(cfg)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

fn metadata(cfg: &RunConfig, seed: Option<String>) -> CliResult<Metadata> {
    Ok(vec![
        (
            "version".into(),
            format!("fpdtrack {}", env!("CARGO_PKG_VERSION")),
        ),
        ("config_sha256".into(), config_hash(cfg)?),
        ("seed".into(), seed.unwrap_or_else(|| "none".into())),
    ])
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing {what}")))
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    })
}

fn check_distinct(paths: &[&Path]) -> CliResult<()> {
    for (i, a) in paths.iter().enumerate() {
        for b in &paths[i + 1..] {
            if absolute(a) == absolute(b) {
                return Err(usage(format!("paths must be distinct: {}", a.display())));
            }
        }
    }
    Ok(())
}

fn load_input(cfg: &RunConfig) -> CliResult<(TimeSeries<f64>, Metadata)> {
    let input = require(&cfg.input, "input path (--in)")?;
    Ok(read_timeseries(input, cfg.fs)?)
}

fn input_seed(meta: &Metadata) -> Option<String> {
    meta_get(meta, "seed").map(str::to_string)
}

fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let sim = require(&cfg.sim, "`sim` parameters")?;
    let out = require(&cfg.output, "output path (--out)")?;
    let mut paths = vec![out.as_path()];
    if let Some(t) = &cfg.truth_output {
        paths.push(t);
    }
    check_distinct(&paths)?;
    let (ts, truth) = simulate_fpd::<f64>(sim)?;
    let meta = metadata(cfg, Some(sim.seed.to_string()))?;
    write_timeseries(out, &ts, &meta)?;
    if let Some(t) = &cfg.truth_output {
        write_truth(t, &truth, ts.t0(), &meta)?;
    }
    Ok(())
}

fn eks(cfg: &RunConfig) -> CliResult<()> {
    let out = require(&cfg.output, "output path (--out)")?;
    check_distinct(&[require(&cfg.input, "input path (--in)")?, out])?;
    let (ts, in_meta) = load_input(cfg)?;
    let t_bl = cfg.t_bl.unwrap_or(DEFAULT_T_BL);
    let l_half = cfg.l_half.unwrap_or(1);
    let search = cfg.search.map(|[a, b]| (a, b));
    let (report, track) = fit_em(&ts, t_bl, l_half, &cfg.em, search)?;
    let mut meta = metadata(cfg, input_seed(&in_meta))?;
    let th = &report.theta_final;
    meta.extend([
        ("em_iterations".into(), report.iterations_used.to_string()),
        ("em_converged".into(), report.converged.to_string()),
        ("q_da".into(), format_f64(th.q_da)),
        ("q_ddf".into(), format_f64(th.q_ddf)),
        ("r".into(), format_f64(th.r)),
        ("f0".into(), format_f64(track.f0)),
        ("loglik".into(), format_f64(track.loglik)),
    ]);
    write_track(out, &track, ts.t0(), cfg.gamma_over_2pi, &meta)?;
    Ok(())
}

/// `out` for a single length, otherwise `out` with `_bl{len}` before the
/// extension.
fn scf_output(out: &Path, bl: f64, many: bool) -> PathBuf {
    if !many {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_bl{bl}.{}", ext.to_string_lossy()),
        None => format!("{stem}_bl{bl}"),
    };
    out.with_file_name(name)
}

fn scf(cfg: &RunConfig) -> CliResult<()> {
    let out = require(&cfg.output, "output path (--out)")?;
    if cfg.block_lengths.is_empty() {
        return Err(usage("missing SCF block length (--block-length)"));
    }
    let many = cfg.block_lengths.len() > 1;
    let outs: Vec<PathBuf> = cfg
        .block_lengths
        .iter()
        .map(|&b| scf_output(out, b, many))
        .collect();
    let input = require(&cfg.input, "input path (--in)")?;
    let mut all: Vec<&Path> = vec![input];
    all.extend(outs.iter().map(PathBuf::as_path));
    check_distinct(&all)?;
    let (ts, in_meta) = load_input(cfg)?;
    let search = match cfg.search {
        Some([a, b]) => (a, b),
        None => (2.0 / ts.duration(), 0.49 * ts.fs()),
    };
    let mut meta = metadata(cfg, input_seed(&in_meta))?;
    meta.push(("block_length".into(), String::new()));
    for (&bl, path) in cfg.block_lengths.iter().zip(&outs) {
        let fits = fit_blocks(&ts, bl, search, &cfg.lm)?;
        if let Some(last) = meta.last_mut() {
            last.1 = format_f64(bl);
        }
        write_scf(path, &fits, ts.t0(), cfg.gamma_over_2pi, &meta)?;
    }
    Ok(())
}

fn bench(cfg: &RunConfig) -> CliResult<()> {
    let grid = require(&cfg.grid, "`grid` configuration")?;
    let out = require(&cfg.output, "output path (--out)")?;
    grid.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_grid(grid)?;
    let meta = metadata(cfg, Some(grid.seed_base.to_string()))?;
    write_bench(out, &report, &meta)?;
    Ok(())
}

#[derive(Serialize)]
struct CrlbOutput {
    variance: f64,
    std: f64,
}

fn crlb(cfg: &RunConfig) -> CliResult<()> {
    let req = require(&cfg.crlb, "`crlb` parameters")?;
    let variance = crlb_freq(req.amplitude, req.sigma_eta, req.n, req.fs)?;
    let json = to_precise_json(&CrlbOutput {
        variance,
        std: variance.sqrt(),
    })?;
    match &cfg.output {
        Some(p) => std::fs::write(p, json).map_err(|e| Error::io(p, e))?,
        None => print!("{json}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scf_output_names() {
        let p = Path::new("/tmp/x/scf.csv");
        assert_eq!(scf_output(p, 60.0, false), PathBuf::from("/tmp/x/scf.csv"));
        assert_eq!(
            scf_output(p, 60.0, true),
            PathBuf::from("/tmp/x/scf_bl60.csv")
        );
        assert_eq!(
            scf_output(Path::new("out"), 2.5, true),
            PathBuf::from("out_bl2.5")
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cli_main(["fpdtrack", "eks", "--bogus"]), 1);
        assert_eq!(cli_main(["fpdtrack"]), 1);
        assert_eq!(cli_main(["fpdtrack", "eks"]), 1);
        assert_eq!(cli_main(["fpdtrack", "--help"]), 0);
    }

    #[test]
    fn same_input_and_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "y\n1\n").unwrap();
        let s = p.to_str().unwrap();
        assert_eq!(cli_main(["fpdtrack", "eks", "--in", s, "--out", s]), 1);
    }

    #[test]
    fn output_may_not_replace_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let text = r#"{"mode": "crlb", "output": "c.json",
            "crlb": {"amplitude": 1.0, "sigma_eta": 0.1, "n": 10, "fs": 1.0}}"#;
        std::fs::write(&p, text).unwrap();
        assert_eq!(
            cli_main(["fpdtrack", "run", "--config", p.to_str().unwrap()]),
            1
        );
        assert_eq!(std::fs::read_to_string(&p).unwrap(), text);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"mode": "crlb", "tbl": 3}"#).unwrap();
        assert_eq!(
            cli_main(["fpdtrack", "run", "--config", p.to_str().unwrap()]),
            1
        );
    }
}
