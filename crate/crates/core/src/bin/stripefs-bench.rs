use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stripefs::bench::eigen::{run_eigenmode, EigenIo, EigenWorkload};
use stripefs::bench::stage::stage_copy;
use stripefs::bench::{large_stripe_plan, real, sim, write_csv, BenchError, BenchResult, ReadMode, RwConfig};
use stripefs::client::{Align, CollectiveMode};
use stripefs::cluster::{make_transport, remote_client, Cluster};
use stripefs::config::{Backend, ClusterConfig, CONFIG_ENV};
use stripefs::layout::Distribution;

/// Benchmarks and tools for a striped parallel file system.
#[derive(Parser, Debug)]
#[command(name = "stripefs-bench", version)]
struct Cli {
    /// Cluster configuration (JSON); defaults to $STRIPEFS_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where two-phase collective I/O puts its file-domain boundaries.
    #[arg(long, global = true, value_enum, default_value = "stripe")]
    twophase_align: AlignArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    Stripe,
    Naive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Warm,
    Cold,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    /// modelled hardware on a virtual clock
    Sim,
    /// real bytes through an in-process cluster, wall-clock timed
    Real,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IoArg {
    Independent,
    Twophase,
    Diskdirected,
}

fn size(s: &str) -> Result<u64, String> {
    parse_size::parse_size(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Concurrent write then read: every process owns one contiguous block.
    Rw {
        #[arg(long)]
        procs: usize,
        #[arg(long)]
        iods: u32,
        #[arg(long, value_parser = size)]
        per_proc_bytes: u64,
        #[arg(long, value_parser = size, default_value = "65536")]
        stripe: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "warm")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "sim")]
        profile: Profile,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write and reassemble eigenmode vectors of a 4-d lattice.
    Eigen {
        #[arg(long, value_delimiter = ',', default_value = "16,16,16,32")]
        dims: Vec<u64>,
        #[arg(long, default_value_t = 300)]
        modes: u64,
        #[arg(long, default_value_t = 32)]
        procs: usize,
        #[arg(long, default_value_t = 8)]
        iods: u32,
        #[arg(long, value_enum, default_value = "independent")]
        io: IoArg,
        /// Print the geometry only when the file would be larger than this.
        #[arg(long, value_parser = size, default_value = "1GiB")]
        max_bytes: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Copy a local file into the file system and verify it.
    Stage {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: String,
        #[arg(long, value_parser = size, default_value = "65536")]
        stripe: u64,
        /// Pace reads of the source to this many bytes per second.
        #[arg(long)]
        source_bps: Option<f64>,
    },
    /// One stripe per process on as many daemons as processes.
    Largestripe {
        #[arg(long)]
        procs: u32,
        #[arg(long, value_parser = size, default_value = "1MiB")]
        per_proc_bytes: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "sim")]
        profile: Profile,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ClusterConfig, BenchError> {
    Ok(match path {
        Some(p) => ClusterConfig::load(p)?,
        None if std::env::var_os(CONFIG_ENV).is_some() => ClusterConfig::from_env()?,
        None => ClusterConfig::default(),
    })
}

fn print_result(r: &BenchResult, csv: Option<&PathBuf>) -> Result<(), BenchError> {
    for s in &r.runs {
        println!(
            "run {}: write {:.2} MB/s, read {:.2} MB/s, {:.1}% from cache",
            s.run,
            s.write_bps / 1e6,
            s.read_bps / 1e6,
            s.served_from_cache_pct
        );
    }
    println!(
        "{} P={} N={} S={} stripe={}: write {:.2} MB/s, read {:.2} MB/s (trimmed mean of {})",
        r.cfg.mode.name(),
        r.cfg.procs,
        r.cfg.iods,
        r.cfg.per_proc_bytes,
        r.cfg.stripe,
        r.write_bps / 1e6,
        r.read_bps / 1e6,
        r.runs.len()
    );
    if let Some(path) = csv {
        write_csv(File::create(path)?, &r.csv_rows())?;
    }
    Ok(())
}

fn run_rw(cfg: &RwConfig, profile: Profile, base: &ClusterConfig) -> Result<BenchResult, BenchError> {
    match profile {
        Profile::Sim => sim::run_rw(cfg, &sim::SimProfile::testbed()),
        Profile::Real => real::run_rw(cfg, base),
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let base = load_config(cli.config.as_ref())?;
    let align = match cli.twophase_align {
        AlignArg::Stripe => Align::Stripe,
        AlignArg::Naive => Align::Naive,
    };
    match cli.cmd {
        Cmd::Rw { procs, iods, per_proc_bytes, stripe, repeats, mode, profile, seed, csv } => {
            let mode = match mode {
                ModeArg::Warm => ReadMode::Warm,
                ModeArg::Cold => ReadMode::Cold,
            };
            let cfg = RwConfig { procs, iods, per_proc_bytes, stripe, repeats, mode, seed };
            print_result(&run_rw(&cfg, profile, &base)?, csv.as_ref())
        }
        Cmd::Eigen { dims, modes, procs, iods, io, max_bytes, seed } => {
            let dims: [u64; 4] =
                dims.try_into().map_err(|d| BenchError::Config(format!("--dims needs 4 values, got {d:?}")))?;
            let w = EigenWorkload::new(dims, modes, procs)?;
            let size = w.file_size().expect("validated");
            println!(
                "lattice {dims:?}: {} elements per vector, {} bytes per mode, {} modes, file {size} bytes",
                w.vector_len(),
                w.vector_bytes(),
                modes
            );
            println!("{procs} processes as {} along z by {} along t", w.z_split, w.t_split);
            if size > max_bytes {
                println!("skipping the run: file exceeds --max-bytes {max_bytes}");
                return Ok(());
            }
            let io = match io {
                IoArg::Independent => EigenIo::Independent,
                IoArg::Twophase => EigenIo::Collective(CollectiveMode::TwoPhase(align)),
                IoArg::Diskdirected => EigenIo::Collective(CollectiveMode::DiskDirected),
            };
            let cluster = Cluster::launch(real::cluster_for(&base, iods))?;
            let r = run_eigenmode(&cluster, &w, "/pvfs1/eigenmodes", seed, io)?;
            println!(
                "write {:.2} MB/s, read {:.2} MB/s, reassembled sha256 {}",
                r.write_bps / 1e6,
                r.read_bps / 1e6,
                r.digest
            );
            Ok(())
        }
        Cmd::Stage { src, dst, stripe, source_bps } => {
            let part = dst.trim_start_matches('/').split('/').next().unwrap_or_default().to_string();
            let width = base
                .partitions
                .iter()
                .find(|p| p.name == part)
                .map(|p| p.nodes.len() as u32)
                .ok_or_else(|| BenchError::Config(format!("no partition {part:?} for {dst}")))?;
            let dist = Distribution::round_robin(stripe, width)?;
            // a socket configuration with addresses names a running cluster
            let (_cluster, client) = if base.transport.backend == Backend::Socket && !base.nodes.is_empty() {
                (None, remote_client(&base, make_transport(&base)?)?)
            } else {
                let c = Cluster::launch(base.clone())?;
                let client = c.client()?;
                (Some(c), client)
            };
            let r = stage_copy(&client, &src, &dst, dist, source_bps)?;
            println!(
                "staged {} bytes to {dst} in {:.3} s ({:.2} MB/s), sha256 {}",
                r.bytes,
                r.elapsed.as_secs_f64(),
                r.bytes as f64 / r.elapsed.as_secs_f64().max(1e-9) / 1e6,
                r.digest
            );
            Ok(())
        }
        Cmd::Largestripe { procs, per_proc_bytes, repeats, profile } => {
            let plan = large_stripe_plan(procs, per_proc_bytes)?;
            println!("rank -> daemon: {plan:?}");
            let mut cfg = RwConfig::new(procs as usize, procs, per_proc_bytes, per_proc_bytes);
            cfg.repeats = repeats;
            print_result(&run_rw(&cfg, profile, &base)?, None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stripefs-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
