use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use gcloam_core::config::RunConfig;
use gcloam_core::eval::{ate_rmse, Alignment, Association};
use gcloam_core::features::{select_features, FeatureKind, FeatureSet};
use gcloam_core::geometry::PoseSE3;
use gcloam_core::ingest::{read_kitti_scan, read_trajectory, TrajectoryFormat};
use gcloam_core::matching::{filter_by_subgraphs, initial_correspondences, FeatureIndex, FilteredMatches};
use gcloam_core::odometry::register_pair;
use gcloam_core::pipeline::{run, Dataset};
use gcloam_core::synthetic::{simulate_loop, LoopParams};
use gcloam_core::Error;

/// Timestamp tolerance when pairing TUM trajectories, seconds.
const TUM_TOLERANCE: f64 = 0.02;

/// LiDAR odometry and mapping with geometric-consistency correspondence voting.
///
/// Every configuration key can also be set on the command line as
/// `--<key> <value>` (for example `--sigma 0.3` or `--max_frames 100`);
/// `gcloam config` prints all keys with their effective values.
#[derive(Debug, Parser)]
#[command(name = "gcloam", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, id = "cli_config", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for run artifacts (overrides `output_dir`).
    #[arg(long = "output-dir", global = true, id = "cli_output_dir", value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Worker threads inside each stage (default: all cores).
    #[arg(long, global = true, id = "cli_threads", value_name = "N")]
    threads: Option<usize>,

    /// Skip compatibility-graph filtering of correspondences.
    #[arg(long = "no-graph-filter", global = true, id = "cli_no_graph_filter")]
    no_graph_filter: bool,

    /// Select the most extreme smoothness points as features.
    #[arg(long = "conspicuous-features", global = true, id = "cli_conspicuous")]
    conspicuous_features: bool,

    /// Give every odometry residual unit weight.
    #[arg(long = "no-weighting", global = true, id = "cli_no_weighting")]
    no_weighting: bool,

    /// More log output (repeat for more).
    #[arg(short, long, action = ArgAction::Count, global = true, id = "cli_verbose")]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline on the configured dataset.
    Run,
    /// Absolute trajectory error of an estimate against ground truth.
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Kitti)]
        format: FormatArg,
        #[arg(long, value_enum, default_value_t = AlignArg::Both)]
        align: AlignArg,
    },
    /// Print the features selected from one scan.
    Features { scan: PathBuf },
    /// Print correspondences and votes between two scans, and their relative pose.
    Match { current: PathBuf, previous: PathBuf },
    /// Write a synthetic loop sequence with a matching configuration file.
    Simulate {
        dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long = "range-noise", default_value_t = 0.01)]
        range_noise: f64,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Kitti,
    Tum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    Rigid,
    Both,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::MalformedFile { .. }
            | Error::Parse { .. }
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::NoOverlap
            | Error::InsufficientFeatures(_) => Failure::Data(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

fn key_id(key: &str) -> String {
    format!("key_{key}")
}

fn command_with_overrides() -> clap::Command {
    let mut cmd = Cli::command();
    for (section, key) in RunConfig::keys() {
        cmd = cmd.arg(
            Arg::new(key_id(&key))
                .long(key.clone())
                .value_name("VALUE")
                .help(format!("Override `{key}` in [{section}]"))
                .global(true)
                .hide(true)
                .action(ArgAction::Set),
        );
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command_with_overrides().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match execute(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Config file, then `--<key>` overrides, then the dedicated flags.
fn effective_config(cli: &Cli, matches: &ArgMatches) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    let sub = matches.subcommand().map(|(_, m)| m);
    for (_, key) in RunConfig::keys() {
        let id = key_id(&key);
        let value = sub
            .and_then(|m| m.get_one::<String>(&id))
            .or_else(|| matches.get_one::<String>(&id));
        if let Some(v) = value {
            cfg.set(&key, v).map_err(|e| Failure::Config(e.to_string()))?;
        }
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output.output_dir = dir.clone();
    }
    if cli.no_graph_filter {
        cfg.ablation.graph_filter = false;
    }
    if cli.conspicuous_features {
        cfg.ablation.conspicuous_features = true;
    }
    if cli.no_weighting {
        cfg.ablation.weighting = false;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn execute(cli: &Cli, matches: &ArgMatches) -> Result<(), Failure> {
    let cfg = effective_config(cli, matches)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        // Only the scan-level commands use the global pool; `run` builds its own.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Run => cmd_run(&cfg, cli.threads),
        Command::Eval {
            estimate,
            truth,
            format,
            align,
        } => cmd_eval(estimate, truth, *format, *align),
        Command::Features { scan } => cmd_features(&cfg, scan),
        Command::Match { current, previous } => cmd_match(&cfg, current, previous),
        Command::Simulate {
            dir,
            frames,
            seed,
            range_noise,
        } => cmd_simulate(&cfg, dir, *frames, *seed, *range_noise),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn cmd_run(cfg: &RunConfig, threads: Option<usize>) -> Result<(), Failure> {
    let dataset = Dataset::open(cfg)?;
    log::info!("{} frames from {}", dataset.len(), cfg.dataset.path.display());
    let out = run(cfg, &dataset, threads)?;
    let dir = &cfg.output.output_dir;
    out.write(dir, cfg.output.write_map)?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Failure::Data(format!("{}: {e}", cfg_path.display())))?;
    print!("{}", out.timing.to_text());
    if !out.ate.is_empty() {
        print!("{}", out.ate_text());
    }
    let degraded = out
        .frames
        .iter()
        .filter(|f| f.odometry.degraded.is_some() || f.mapping.as_ref().is_some_and(|m| m.degraded.is_some()))
        .count();
    if degraded > 0 {
        log::warn!("{degraded} frames fell back to a predicted pose; see diagnostics.txt");
    }
    println!("wrote {} poses to {}", out.mapped.len(), dir.display());
    Ok(())
}

fn cmd_eval(estimate: &Path, truth: &Path, format: FormatArg, align: AlignArg) -> Result<(), Failure> {
    let (fmt, association) = match format {
        FormatArg::Kitti => (TrajectoryFormat::Kitti, Association::ByIndex),
        FormatArg::Tum => (TrajectoryFormat::Tum, Association::ByTimestamp(TUM_TOLERANCE)),
    };
    let est = read_trajectory(estimate, fmt)?;
    let gt = read_trajectory(truth, fmt)?;
    let modes: &[(Alignment, &str)] = match align {
        AlignArg::None => &[(Alignment::None, "none")],
        AlignArg::Rigid => &[(Alignment::Rigid, "rigid")],
        AlignArg::Both => &[(Alignment::None, "none"), (Alignment::Rigid, "rigid")],
    };
    for (mode, name) in modes {
        let r = ate_rmse(&est, &gt, *mode, association)?;
        println!("align={name:<5} rmse_m={:.6} matched={}", r.rmse, r.matched);
    }
    Ok(())
}

fn scan_features(cfg: &RunConfig, path: &Path) -> Result<FeatureSet, Failure> {
    let (scan, stats) = read_kitti_scan(path, &cfg.sensor, 0, 0.0)?;
    log::info!("{}: {} of {} returns kept", path.display(), stats.retained, stats.records);
    Ok(select_features(&scan, &cfg.selection()))
}

fn cmd_features(cfg: &RunConfig, scan: &Path) -> Result<(), Failure> {
    let fs = scan_features(cfg, scan)?;
    let mut out = String::from("# kind channel subregion x y z smoothness\n");
    for kind in [FeatureKind::Edge, FeatureKind::Planar] {
        for f in fs.of_kind(kind) {
            let p = f.point.position;
            let _ = writeln!(
                out,
                "{} {} {} {:.6} {:.6} {:.6} {:.6}",
                kind.as_str(),
                f.channel(),
                f.subregion,
                p.x,
                p.y,
                p.z,
                f.smoothness
            );
        }
    }
    print!("{out}");
    eprintln!("{} edge, {} planar features", fs.edges.len(), fs.planars.len());
    Ok(())
}

fn cmd_match(cfg: &RunConfig, current: &Path, previous: &Path) -> Result<(), Failure> {
    let curr = scan_features(cfg, current)?;
    let prev = scan_features(cfg, previous)?;
    let params = cfg.odometry_params();
    let index = FeatureIndex::build(prev.clone());
    let initial = initial_correspondences(&curr, &index, &PoseSE3::identity(), params.max_match_dist);
    let dropped = initial.dropped;
    let filtered = if params.graph_filter {
        filter_by_subgraphs(initial.correspondences, &params.graph)
    } else {
        FilteredMatches::unfiltered(initial.correspondences)
    };
    let mut out = String::from("# kind votes sector source_x source_y source_z target_x target_y target_z\n");
    for (c, v) in filtered.kept.iter().zip(&filtered.votes) {
        let (s, t) = (c.source.position, c.target);
        let _ = writeln!(
            out,
            "{} {v} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            c.kind.as_str(),
            c.subregion_id,
            s.x,
            s.y,
            s.z,
            t.x,
            t.y,
            t.z
        );
    }
    print!("{out}");
    println!("# unmatched {dropped} {}", filtered.diagnostics_line());
    let est = register_pair(&curr, &prev, PoseSE3::identity(), &params)?;
    let m = est.relative.to_matrix();
    let mut row = String::from("# relative");
    for r in 0..3 {
        for c in 0..4 {
            let _ = write!(row, " {}", m[(r, c)]);
        }
    }
    println!("{row}");
    if let Some(reason) = est.degraded {
        log::warn!("registration degraded: {reason}");
    }
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, dir: &Path, frames: usize, seed: u64, range_noise: f64) -> Result<(), Failure> {
    if frames == 0 {
        return Err(Failure::Config("--frames must be at least 1".into()));
    }
    let params = LoopParams {
        frames,
        seed,
        range_noise,
        ..LoopParams::default()
    };
    let seq = simulate_loop(&params);
    seq.write_dataset(dir)?;
    let mut sim_cfg = cfg.clone();
    sim_cfg.sensor = seq.sensor.clone();
    sim_cfg.dataset.path = fs::canonicalize(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    sim_cfg.dataset.poses = None;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, sim_cfg.to_toml()).map_err(|e| Failure::Data(format!("{}: {e}", cfg_path.display())))?;
    println!("wrote {frames} scans and {} to {}", cfg_path.display(), dir.display());
    Ok(())
}
