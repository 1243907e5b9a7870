use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use bubbleview_cli::analyze::{self, AnalyzeSummary};
use bubbleview_cli::serve::{self, ServeOptions};
use bubbleview_cli::{cost, exit, preprocess, CliError, RunManifest};
use bubbleview_core::analysis::CostModel;
use bubbleview_service::ServiceConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bubbleview", version, about = "Run and analyze BubbleView attention experiments")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (analysis outputs, or the blur cache for preprocess).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Experiment config (TOML). `serve` accepts it more than once.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blur every stimulus into the cache.
    Preprocess {
        #[arg(long)]
        stimuli: PathBuf,
        /// Blur sigma in pixels; taken from --config when absent.
        #[arg(long)]
        blur_sigma_px: Option<f64>,
    },
    /// Serve experiments over HTTP until interrupted.
    Serve {
        #[arg(long)]
        stimuli: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Blur cache directory; defaults to `<stimuli>/.blur_cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, env = "BUBBLEVIEW_EXPERIMENTER_KEY", hide_env_values = true)]
        experimenter_key: String,
        /// HTML file served at /consent.
        #[arg(long)]
        consent: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        skew_allowance_s: f64,
    },
    /// Run the analysis pipeline.
    Analyze(RunArgs),
    /// Write click and fixation heatmaps only.
    ExportHeatmaps(RunArgs),
    /// Estimate crowdsourcing cost per image.
    Cost {
        #[arg(long)]
        time_per_image_s: f64,
        #[arg(long)]
        images_per_task: u32,
        /// Participants per image as `LO-HI` or a single number.
        #[arg(long, value_parser = parse_range)]
        participants: (u32, u32),
        #[arg(long, default_value_t = CostModel::DEFAULT_RATE_PER_MIN)]
        rate_per_min: f64,
        /// Pay per task, replacing rate times time.
        #[arg(long)]
        task_price: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML); flags below override its fields.
    manifest: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    stimuli: Option<PathBuf>,
    #[arg(long)]
    fixations: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    min_clicks_per_image: Option<u32>,
    /// A number of standard deviations, or `none`.
    #[arg(long, value_parser = parse_sd)]
    participant_outlier_sd: Option<OutlierSd>,
    #[arg(long)]
    map_sigma_px: Option<f64>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long)]
    n_splits: Option<usize>,
    #[arg(long)]
    curve_max_n: Option<usize>,
    #[arg(long)]
    heatmap_alpha: Option<f64>,
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(['-', '–']) {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

/// Outlier cutoff in standard deviations; `None` disables the rule.
#[derive(Debug, Clone, Copy)]
struct OutlierSd(Option<f64>);

fn parse_sd(s: &str) -> Result<OutlierSd, String> {
    if s.eq_ignore_ascii_case("none") {
        Ok(OutlierSd(None))
    } else {
        s.parse::<f64>().map(|v| OutlierSd(Some(v))).map_err(|e| e.to_string())
    }
}

fn manifest_from(cli: &Cli, a: &RunArgs) -> Result<RunManifest, CliError> {
    let mut m = match &a.manifest {
        Some(path) => RunManifest::load(path)?,
        None => {
            let missing = |f: &str| CliError::Validation(format!("--{f} is required without a manifest"));
            RunManifest::new(
                cli.config.first().cloned().ok_or_else(|| missing("config"))?,
                a.log.clone().ok_or_else(|| missing("log"))?,
                a.stimuli.clone().ok_or_else(|| missing("stimuli"))?,
            )
        }
    };
    if cli.config.len() > 1 {
        return Err(CliError::Validation("analysis takes a single --config".into()));
    }
    if let Some(c) = cli.config.first() {
        m.config = c.clone();
    }
    if let Some(s) = cli.seed {
        m.seed = s;
    }
    if let Some(o) = &cli.out {
        m.out = o.clone();
    }
    if let Some(v) = &a.log {
        m.log = v.clone();
    }
    if let Some(v) = &a.stimuli {
        m.stimuli = v.clone();
    }
    if let Some(v) = &a.fixations {
        m.fixations = Some(v.clone());
    }
    if let Some(v) = &a.annotations {
        m.annotations = Some(v.clone());
    }
    if let Some(v) = a.min_clicks_per_image {
        m.policy.min_clicks_per_image = v;
    }
    if let Some(OutlierSd(v)) = a.participant_outlier_sd {
        m.policy.participant_outlier_sd = v;
    }
    if let Some(v) = a.map_sigma_px {
        m.map_sigma_px = v;
    }
    if let Some(v) = a.n_pred {
        m.n_pred = Some(v);
    }
    if let Some(v) = a.n_splits {
        m.n_splits = v;
    }
    if let Some(v) = a.curve_max_n {
        m.curve_max_n = Some(v);
    }
    if let Some(v) = a.heatmap_alpha {
        m.heatmap_alpha = v;
    }
    Ok(m)
}

fn report(summary: &AnalyzeSummary) {
    if let Some(r) = &summary.metrics {
        let a = &r.aggregate;
        println!(
            "images={} cc={:.4} nss={:.4} ioc={:.4} normalized_nss={}",
            r.images.len(),
            a.cc,
            a.nss,
            a.ioc_nss,
            bubbleview_core::metrics::format_percent(a.normalized_nss)
        );
    }
    if let Some(f) = &summary.power_fit {
        println!("nss: {f}");
    }
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Preprocess { stimuli, blur_sigma_px } => {
            let sigma = match (blur_sigma_px, cli.config.first()) {
                (Some(s), _) => *s,
                (None, Some(path)) => serve::load_config(path)?.blur_sigma_px,
                (None, None) => return Err(CliError::Validation("give --blur-sigma-px or --config".into())),
            };
            let cache = cli.out.clone().unwrap_or_else(|| stimuli.join(".blur_cache"));
            let rep = preprocess::run(stimuli, &cache, sigma)?;
            println!(
                "{} images, {} blurred, {} cached, {} failed",
                rep.entries.len() + rep.failures.len(),
                rep.computed(),
                rep.entries.len() - rep.computed(),
                rep.failures.len()
            );
            if rep.failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Partial(rep.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect()))
            }
        }
        Command::Serve {
            stimuli,
            log,
            addr,
            cache,
            experimenter_key,
            consent,
            skew_allowance_s,
        } => {
            let consent_html = match consent {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
                None => None,
            };
            serve::run(&ServeOptions {
                configs: cli.config.clone(),
                stimuli: stimuli.clone(),
                cache: cache.clone().unwrap_or_else(|| stimuli.join(".blur_cache")),
                log: log.clone(),
                addr: *addr,
                service: ServiceConfig {
                    experimenter_key: experimenter_key.clone(),
                    seed: cli.seed,
                    skew_allowance_s: *skew_allowance_s,
                    consent_html,
                },
            })
        }
        Command::Analyze(a) => {
            let m = manifest_from(cli, a)?;
            let result = analyze::run(&m);
            if let Ok(s) = &result {
                report(s);
            }
            result.map(|_| ())
        }
        Command::ExportHeatmaps(a) => {
            let m = manifest_from(cli, a)?;
            let result = analyze::export_heatmaps(&m);
            if let Ok(s) = &result {
                report(s);
            }
            result.map(|_| ())
        }
        Command::Cost {
            time_per_image_s,
            images_per_task,
            participants,
            rate_per_min,
            task_price,
        } => {
            let model = CostModel {
                rate_per_min: *rate_per_min,
                time_per_image_s: *time_per_image_s,
                images_per_task: *images_per_task,
                participants: *participants,
                task_price: *task_price,
            };
            let est = cost::estimate(&model)?;
            print!("{}", cost::render_table(&[(model, est)]));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(exit::VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::IO);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
