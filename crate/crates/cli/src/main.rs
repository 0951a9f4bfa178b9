use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use grpose_core::data::{generate_range, save_corpus, save_png};
use grpose_core::graph::build_graph;
use grpose_core::numcore::gradcheck::GradcheckConfig;
use grpose_core::numcore::layers::uniform;
use grpose_core::numcore::Tensor;
use grpose_core::pipeline::{self, run_dir, suite, Lab, Phase, Preset, RunConfig};
use grpose_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "grpose",
    version,
    about = "Graph-conditioned pose-to-image diffusion at desk scale",
    after_help = "Any config key can be overridden with --KEY VALUE, e.g. --alpha 0.05 or --adapter.lr 1e-3."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train one phase: base, posenet or adapter.
    Train {
        #[arg(long)]
        phase: String,
        #[arg(long)]
        run: PathBuf,
        /// Directory holding prerequisite checkpoints (defaults to --run).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample test poses into PNGs with sidecar metadata.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sample the base model without the adapter.
        #[arg(long)]
        no_adapter: bool,
        /// Test-split indices, comma separated.
        #[arg(long, default_value = "0,1,2,3,4,5,6,7", value_delimiter = ',')]
        indices: Vec<usize>,
        /// Output directory (defaults to RUN/samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate from every test pose and score keypoint alignment.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_adapter: bool,
        #[arg(long)]
        save_images: bool,
    },
    /// Run an ablation preset: no_pgi, no_lp, components, graph_stages[(n,..)], alpha_sweep[(a,..)].
    Ablate {
        preset: String,
        /// Cache directory for shared phases and variant runs.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the registered fragments.
    Gradcheck {
        /// Fragments to check (default: all).
        fragments: Vec<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Dump the KNN graph of a random feature grid as an edge list and heatmap.
    InspectGraph {
        #[arg(long)]
        out: PathBuf,
        /// Grid side length.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Feature channels.
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a slice of the synthetic corpus with its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (defaults to data.train_samples).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Contract(_) | Error::CorruptCheckpoint { .. }) => 3,
            CliError::Core(Error::MissingArtifact(_)) => 4,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn usage(e: Error) -> CliError {
    match e {
        Error::Contract(m) => CliError::Usage(m),
        other => CliError::Usage(other.to_string()),
    }
}

type Overrides = Vec<(String, String)>;

/// Splits `--key value` config overrides from the arguments clap handles.
fn split_overrides(args: &[String]) -> Result<(Vec<String>, Overrides), CliError> {
    let cmd = Cli::command();
    let Some(sub) = args.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return Ok((args.to_vec(), Vec::new()));
    };
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut kept = args[..2].to_vec();
    let mut overrides = Vec::new();
    let mut rest = args[2..].iter();
    while let Some(a) = rest.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| !f.is_empty()) else {
            kept.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if known.iter().any(|k| k == name) {
            kept.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => rest
                .next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((kept, overrides))
}

/// Config from `--config`, else the run directory's recorded config, else
/// defaults; then the command-line overrides.
fn resolve_config(file: Option<&Path>, run: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match (file, run) {
        (Some(f), _) => {
            let text = std::fs::read_to_string(f).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?
        }
        (None, Some(r)) if r.join(run_dir::CONFIG_FILE).exists() => run_dir::load_config(r)?,
        _ => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| match usage(e) {
            CliError::Usage(m) => CliError::Usage(format!("--{k}: {m}")),
            other => other,
        })?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Tiles equally sized images into one row.
fn tile_row(images: &[Tensor]) -> Result<Tensor, Error> {
    let (h, w, c) = images[0].grid_dims()?;
    let n = images.len();
    Ok(Tensor::from_fn(&[h, w * n, c], |i| {
        let (y, rest) = (i / (w * n * c), i % (w * n * c));
        let (x, ch) = (rest / c, rest % c);
        images[x / w].data()[(y * w + x % w) * c + ch]
    }))
}

fn run(cli: Cli, overrides: Overrides) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train {
            phase,
            run,
            from,
            config,
        } => {
            let phase: Phase = phase.parse().map_err(usage)?;
            let cfg = resolve_config(config.as_deref(), None, &overrides)?;
            let from = from.unwrap_or_else(|| run.clone());
            let hash = pipeline::run_phase(phase, &cfg, &run, &from)?;
            println!("{}", hash.trim());
        }
        Cmd::Sample {
            run,
            from,
            config,
            no_adapter,
            indices,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), Some(&run), &overrides)?;
            let from = from.unwrap_or_else(|| run.clone());
            let out = out.unwrap_or_else(|| run.join("samples"));
            pipeline::run_sample(&cfg, &run, &from, !no_adapter, &indices, &out)?;
            let images = indices
                .iter()
                .map(|i| grpose_core::data::load_png(&out.join(format!("{i:04}.png"))))
                .collect::<Result<Vec<_>, _>>()?;
            if !images.is_empty() {
                save_png(&tile_row(&images)?, &out.join("grid.png"))?;
            }
            println!("wrote {} samples to {}", indices.len(), out.display());
        }
        Cmd::Eval {
            run,
            from,
            config,
            no_adapter,
            save_images,
        } => {
            let cfg = resolve_config(config.as_deref(), Some(&run), &overrides)?;
            let from = from.unwrap_or_else(|| run.clone());
            let report = pipeline::run_eval(&cfg, &run, &from, !no_adapter, save_images)?;
            print!("{}", report.render_summary());
        }
        Cmd::Ablate {
            preset,
            root,
            seeds,
            config,
        } => {
            let preset = Preset::parse(&preset).map_err(usage)?;
            let cfg = resolve_config(config.as_deref(), None, &overrides)?;
            let mut lab = Lab::new(&root, cfg)?;
            lab.verbose = true;
            let report = lab.ablate(&preset, &seeds)?;
            let text = report.render();
            let name = format!("ablation_{}.md", report.preset.to_lowercase().replace(|c: char| !c.is_alphanumeric(), "_"));
            grpose_core::numcore::checkpoint::write_atomic(&root.join(name), text.as_bytes())?;
            print!("{text}");
        }
        Cmd::Gradcheck { fragments, tolerance } => {
            let names: Vec<String> = if fragments.is_empty() {
                suite::FRAGMENTS.iter().map(|s| s.to_string()).collect()
            } else {
                fragments
            };
            let cfg = GradcheckConfig {
                tolerance,
                ..GradcheckConfig::default()
            };
            let mut failed = Vec::new();
            for name in &names {
                let report = suite::check_fragment(name, &cfg).map_err(usage)?;
                let verdict = if report.passed() { "pass" } else { "FAIL" };
                println!(
                    "{name}: {verdict} (max rel err {:.3e}, {} coordinates)",
                    report.max_rel_err(),
                    report.checked()
                );
                if !report.passed() {
                    print!("{}", report.render());
                    failed.push(name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("gradcheck failed: {}", failed.join(", "))));
            }
        }
        Cmd::InspectGraph {
            out,
            grid,
            width,
            config,
        } => {
            let cfg = resolve_config(config.as_deref(), None, &overrides)?;
            if grid == 0 || width == 0 {
                return Err(CliError::Usage("--grid and --width must be positive".into()));
            }
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.run.seed);
            let features: Tensor = uniform(&[grid, grid, width], 1.0, &mut rng);
            let graph = build_graph(&features, cfg.model.k)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let mut text = String::new();
            for (s, d, w) in graph.edges() {
                text.push_str(&format!("{s} {d} {w:.6}\n"));
            }
            grpose_core::numcore::checkpoint::write_atomic(&out.join("edges.txt"), text.as_bytes())?;
            let n = graph.num_nodes();
            let dense = graph.adjacency().to_dense();
            let max = dense.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
            let heat = Tensor::from_fn(&[n, n, 3], |i| 2.0 * dense[i / 3] / max - 1.0);
            save_png(&heat, &out.join("adjacency.png"))?;
            let undirected: usize = graph.adjacency().nnz() - n;
            println!(
                "{n} nodes, k = {}, {} directed edges, {} nonzero off-diagonal entries after symmetrization",
                graph.k(),
                graph.edges().len(),
                undirected
            );
        }
        Cmd::GenData {
            out,
            count,
            offset,
            config,
        } => {
            let cfg = resolve_config(config.as_deref(), None, &overrides)?;
            let count = count.unwrap_or(cfg.data.train_samples);
            let samples = generate_range(cfg.data.seed, offset, count, &cfg.corpus()?)?;
            save_corpus(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let parsed = split_overrides(&args).and_then(|(kept, overrides)| {
        Cli::try_parse_from(kept)
            .map(|cli| (cli, overrides))
            .map_err(|e| {
                let _ = e.print();
                let code = if e.use_stderr() { 2 } else { 0 };
                std::process::exit(code)
            })
    });
    let result = parsed.and_then(|(cli, overrides)| run(cli, overrides));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
