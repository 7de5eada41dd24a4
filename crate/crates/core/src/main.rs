use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use urbanscout::citymap::{builtin, load_map, CityMap};
use urbanscout::harness::{
    convert_geojson, emit_report, render_map_png, run_episode_in, summary_markdown, EpisodeConfig, HarnessError,
    MetricsLog, OsmOptions,
};
use urbanscout::policies::{ScoutPolicy, TargetPolicy};

#[derive(Parser)]
#[command(name = "urbanscout", version, about = "Aerial scout simulation for tracking ground targets in cities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode.
    Run {
        #[command(flatten)]
        common: EpisodeArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<ScoutPolicy>,
    },
    /// Run every policy for every seed, then write the report.
    Sweep {
        #[command(flatten)]
        common: EpisodeArgs,
        #[arg(long, value_delimiter = ',', default_value = "gtmap-map,gtmap-mi,nerf-mi")]
        policies: Vec<ScoutPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "72,80,88")]
        seeds: Vec<u64>,
        /// Also run field policies with these training budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
    },
    /// Aggregate episode logs (metrics.json files or directories holding them).
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Write a top-down PNG of a map.
    RenderMap {
        /// Bundled map name or map file.
        #[arg(long, default_value = "mini-philly")]
        map: String,
        #[arg(long, default_value = "map.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        size: u32,
    },
    /// Convert GeoJSON building footprints into a map file.
    ConvertOsm {
        input: PathBuf,
        #[arg(long, default_value = "map.json")]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 15.0)]
        default_height: f64,
        #[arg(long, default_value_t = 3.0)]
        level_height: f64,
        #[arg(long, default_value_t = 150.0)]
        altitude_cap: f64,
        #[arg(long, default_value_t = 30.0)]
        margin: f64,
    },
}

#[derive(Args)]
struct EpisodeArgs {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    targets: Option<TargetPolicy>,
    #[arg(long)]
    target_count: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    planning_steps: Option<usize>,
    /// Parent directory for the timestamped run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl EpisodeArgs {
    fn config(&self) -> Result<EpisodeConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => EpisodeConfig::from_file(p)?,
            None => EpisodeConfig::default(),
        };
        if let Some(m) = &self.map {
            cfg.map = m.clone();
        }
        if let Some(t) = self.targets {
            cfg.target_policy = t;
        }
        if self.target_count.is_some() {
            cfg.target_count = self.target_count;
        }
        if let Some(b) = self.budget {
            cfg.train_budget = b;
        }
        if let Some(n) = self.planning_steps {
            cfg.planning_steps = n;
        }
        cfg.validate()?;
        cfg.load_map()?;
        Ok(cfg)
    }

    fn run_dir(&self, kind: &str) -> PathBuf {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        self.out.join(format!("{kind}-{stamp}"))
    }
}

fn episode_dir(cfg: &EpisodeConfig) -> String {
    let budget = if cfg.scout_policy.uses_field() { format!("-{}", cfg.train_budget) } else { String::new() };
    format!("{}{budget}_{}_s{}", cfg.scout_policy.slug(), cfg.target_policy, cfg.seed)
}

fn copy_config(src: Option<&Path>, dir: &Path, cfg: &EpisodeConfig) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let dst = dir.join("sweep_config.toml");
    let text = match src {
        Some(p) => std::fs::read_to_string(p).map_err(|source| HarnessError::Io { path: p.to_path_buf(), source })?,
        None => cfg.to_toml(),
    };
    std::fs::write(&dst, text).map_err(|source| HarnessError::Io { path: dst, source })
}

fn collect_logs(paths: &[PathBuf]) -> Result<Vec<MetricsLog>, HarnessError> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if p.is_file() {
            out.push(p.to_path_buf());
        } else if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    walk(&e, out)?;
                } else if e.file_name().is_some_and(|n| n == "metrics.json") {
                    out.push(e);
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(HarnessError::Config(format!("{} does not exist", p.display())));
        }
        walk(p, &mut files).map_err(|source| HarnessError::Io { path: p.clone(), source })?;
    }
    files.iter().map(|f| MetricsLog::read_json(f)).collect()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { common, seed, policy } => {
            let mut cfg = common.config()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = policy {
                cfg.scout_policy = p;
            }
            let dir = common.run_dir("run").join(episode_dir(&cfg));
            log::info!("writing to {}", dir.display());
            let log = run_episode_in(&cfg, &dir)?;
            let s = log.summary();
            println!("{}", dir.display());
            println!(
                "{} seed {}: te_mean {:?} te_min {:?} te_max {:?} psnr {:?}",
                s.label, s.seed, s.te_mean, s.te_min, s.te_max, s.psnr_final
            );
        }
        Command::Sweep { common, policies, seeds, budgets } => {
            let base = common.config()?;
            let root = common.run_dir("sweep");
            copy_config(common.config.as_deref(), &root, &base)?;
            let mut jobs = Vec::new();
            for &p in &policies {
                let budgets_for: Vec<usize> =
                    if p.uses_field() && !budgets.is_empty() { budgets.clone() } else { vec![base.train_budget] };
                for &b in &budgets_for {
                    for &s in &seeds {
                        jobs.push(EpisodeConfig { scout_policy: p, seed: s, train_budget: b, ..base.clone() });
                    }
                }
            }
            log::info!("{} episodes into {}", jobs.len(), root.display());
            let results: Vec<Result<MetricsLog, HarnessError>> =
                jobs.par_iter().map(|cfg| run_episode_in(cfg, &root.join(episode_dir(cfg)))).collect();
            let logs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let rows = emit_report(&logs, &root.join("report"))?;
            println!("{}", root.display());
            print!("{}", summary_markdown(&rows));
        }
        Command::Report { logs, out } => {
            let logs = collect_logs(&logs)?;
            let rows = emit_report(&logs, &out)?;
            print!("{}", summary_markdown(&rows));
        }
        Command::RenderMap { map, out, size } => {
            let m: CityMap = match builtin::get(&map) {
                Some(r) => r.map_err(|e| HarnessError::Config(e.to_string()))?,
                None => load_map(&map).map_err(|e| HarnessError::Config(e.to_string()))?,
            };
            render_map_png(&m, &out, size)?;
            println!("{}", out.display());
        }
        Command::ConvertOsm { input, out, name, default_height, level_height, altitude_cap, margin } => {
            let text = std::fs::read_to_string(&input).map_err(|source| HarnessError::Io { path: input.clone(), source })?;
            let opts = OsmOptions { name, default_height, level_height, altitude_cap, margin };
            let file = convert_geojson(&text, &opts)?;
            let json = serde_json::to_string_pretty(&file).map_err(|e| HarnessError::Format(e.to_string()))?;
            std::fs::write(&out, json).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            println!("{}: {} buildings", out.display(), file.buildings.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
