//! Command-line front end for the multi-view clustering engine.
//!
//! Subcommands: `synth` writes a synthetic dataset (manifest, view CSVs,
//! labels, structure JSON), `train` runs the optimization and writes run
//! artifacts, `eval` scores predicted labels against ground truth, and
//! `inspect` summarizes a finished run directory.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 training hit the
//! iteration limit without reaching k components (artifacts are still
//! written), 3 file I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use agglo_mvc::{
    evaluate, load_dataset, load_labels, load_structure, save_dataset, save_results,
    synth_blobs, synth_layered, train, Dataset, Error, Mode, Result, StructureSpec,
    TrainerConfig, ViewStructure,
};

#[derive(Parser)]
#[command(
    name = "agglo-mvc",
    version,
    about = "Multi-view clustering via hierarchical graph agglomeration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with known labels.
    Synth {
        #[command(subcommand)]
        kind: SynthCmd,
    },
    /// Cluster a dataset and write run artifacts.
    Train(TrainArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
    /// Summarize a finished run directory.
    Inspect(InspectArgs),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Gaussian clusters shared across independent views (flat structure).
    Blobs {
        #[arg(long, default_value_t = 50)]
        n_per_cluster: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for manifest, CSVs, and structure JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grouped views with a shared confounder (two-layer structure).
    Layered {
        #[arg(long, default_value_t = 210)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Leaves per group, comma-separated (e.g. `5,6`).
        #[arg(long, default_value = "5,6")]
        groups: String,
        #[arg(long, default_value_t = 0.6)]
        overlap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for manifest, CSVs, and structure JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    data: PathBuf,
    /// View-structure JSON; defaults to all views under a single root.
    #[arg(long)]
    structure: Option<PathBuf>,
    /// `ann` (fixed distances) or `annld` (learnable data space).
    #[arg(long)]
    mode: String,
    /// Number of clusters.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    lambda_init: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Activation sharpening factor.
    #[arg(long)]
    p: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Neighbors retained per row.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels, one integer per line.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth labels, one integer per line.
    #[arg(long)]
    truth: PathBuf,
    /// Also write the report to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// A run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (`agglo-mvc eval | head`),
    // like other line-oriented tools, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };

    if let Err(e) = setup_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }

    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 1 })
        }
    }
}

/// Honors AGGLO_MVC_THREADS as a cap on internal row-parallelism.
fn setup_threads() -> Result<()> {
    match std::env::var("AGGLO_MVC_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| Error::InvalidArgument {
                name: "AGGLO_MVC_THREADS",
                reason: format!("`{v}` is not a positive integer"),
            })?;
            if n == 0 {
                return Err(Error::InvalidArgument {
                    name: "AGGLO_MVC_THREADS",
                    reason: "thread count must be at least 1".into(),
                });
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidArgument {
                    name: "AGGLO_MVC_THREADS",
                    reason: e.to_string(),
                })
        }
        Err(_) => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Synth { kind } => cmd_synth(kind),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_synth(kind: SynthCmd) -> Result<u8> {
    let (dataset, structure, out) = match kind {
        SynthCmd::Blobs {
            n_per_cluster,
            k,
            views,
            dims,
            separation,
            noise,
            seed,
            out,
        } => {
            let (d, s) = synth_blobs(n_per_cluster, k, views, dims, separation, noise, seed)?;
            (d, s, out)
        }
        SynthCmd::Layered {
            n,
            k,
            groups,
            overlap,
            seed,
            out,
        } => {
            let groups = parse_groups(&groups)?;
            let (d, s) = synth_layered(n, k, &groups, overlap, seed)?;
            (d, s, out)
        }
    };
    save_dataset(&dataset, structure.spec(), &out)?;
    println!(
        "wrote dataset: n={}, views={}, out={}",
        dataset.n(),
        dataset.view_count(),
        out.display()
    );
    Ok(0)
}

fn parse_groups(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|tok| {
            tok.trim().parse::<usize>().map_err(|_| Error::InvalidArgument {
                name: "groups",
                reason: format!("`{}` is not a positive integer", tok.trim()),
            })
        })
        .collect()
}

fn resolve_structure(args: &TrainArgs, dataset: &Dataset) -> Result<ViewStructure> {
    let spec = match &args.structure {
        Some(path) => load_structure(path)?,
        None => StructureSpec::flat(&dataset.view_names()),
    };
    spec.validate(dataset)
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let mode = Mode::from_str(&args.mode)?;
    let dataset = load_dataset(&args.data)?;
    let structure = resolve_structure(&args, &dataset)?;

    let mut config = TrainerConfig::for_mode(mode, args.k);
    if let Some(v) = args.lambda_init {
        config.lambda_init = v;
    }
    if let Some(v) = args.lambda_max {
        config.lambda_max = v;
    }
    if let Some(v) = args.p {
        config.p = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.r {
        config.r = v;
    }
    if let Some(v) = args.max_iters {
        config.max_iters = v;
    }
    config.seed = args.seed;
    config.validate()?;

    let result = train(&config, &dataset, &structure)?;
    let report = match dataset.labels() {
        Some(truth) => Some(evaluate(&result.labels, truth)?),
        None => None,
    };
    save_results(&result, report.as_ref(), &args.out)?;

    let last = result.trace.last().expect("trace has at least the initial row");
    println!("converged: {}", result.converged);
    println!("iterations: {}", result.iterations);
    println!("components: {}", last.components);
    println!("eigenvalue sum: {:e}", last.eigval_sum);
    if let Some(m) = &report {
        println!(
            "nmi: {:.4}  ri: {:.4}  purity: {:.4}  f: {:.4}",
            m.nmi, m.rand_index, m.purity, m.f_score
        );
    }
    println!("wrote {}", args.out.display());

    if result.converged {
        Ok(0)
    } else {
        eprintln!(
            "training stopped at the iteration limit with {} components (target {})",
            last.components, config.k
        );
        Ok(2)
    }
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let pred = load_labels(&args.pred)?;
    let truth = load_labels(&args.truth)?;
    let report = evaluate(&pred, &truth)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::write(out, json + "\n").map_err(|e| Error::Io {
            path: out.display().to_string(),
            source: e,
        })?;
    }
    Ok(0)
}

struct TraceSummary {
    rows: usize,
    last_iteration: usize,
    last_components: usize,
    last_eigval_sum: f64,
    lambda_first: f64,
    lambda_last: f64,
    lambda_peak: f64,
}

fn read_trace(path: &Path) -> Result<TraceSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut summary: Option<TraceSummary> = None;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            continue; // header
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(parse_err(idx + 1, format!("{} columns, expected 8", cols.len())));
        }
        let iteration: usize = cols[0]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad iteration `{}`", cols[0])))?;
        let lambda: f64 = cols[1]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad lambda `{}`", cols[1])))?;
        let components: usize = cols[2]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad components `{}`", cols[2])))?;
        let eigval_sum: f64 = cols[3]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad eigval_sum `{}`", cols[3])))?;
        summary = Some(match summary {
            None => TraceSummary {
                rows: 1,
                last_iteration: iteration,
                last_components: components,
                last_eigval_sum: eigval_sum,
                lambda_first: lambda,
                lambda_last: lambda,
                lambda_peak: lambda,
            },
            Some(s) => TraceSummary {
                rows: s.rows + 1,
                last_iteration: iteration,
                last_components: components,
                last_eigval_sum: eigval_sum,
                lambda_first: s.lambda_first,
                lambda_last: lambda,
                lambda_peak: s.lambda_peak.max(lambda),
            },
        });
    }
    summary.ok_or_else(|| parse_err(1, "trace has no data rows".into()))
}

fn cmd_inspect(args: InspectArgs) -> Result<u8> {
    let config_path = args.run.join("run_config.json");
    let config_text = std::fs::read_to_string(&config_path).map_err(|e| Error::Io {
        path: config_path.display().to_string(),
        source: e,
    })?;
    let config: TrainerConfig =
        serde_json::from_str(&config_text).map_err(|e| Error::Json {
            path: config_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let trace = read_trace(&args.run.join("trace.csv"))?;

    println!("mode: {}", config.mode);
    println!("k: {}", config.k);
    println!("iterations: {}", trace.last_iteration);
    println!("components: {}", trace.last_components);
    println!("eigenvalue sum: {:e}", trace.last_eigval_sum);
    println!("converged: {}", trace.last_components == config.k);
    println!(
        "lambda: first {}, last {}, peak {} over {} rows",
        trace.lambda_first, trace.lambda_last, trace.lambda_peak, trace.rows
    );
    Ok(0)
}
