use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use phmat::artifact::{self, Artifact};
use phmat::config::{ExperimentConfig, Method};
use phmat::harness::{generate_points, relative_error, run_experiment, ErrorProtocol};
use phmat::output::{append_csv, summary, write_json};
use phmat_core::kernels::StageCounters;
use phmat_core::phmatrix::{ParametricH2Matrix, ParametricHMatrix};

#[derive(Parser)]
#[command(name = "phmat", version, about = "Parametric hierarchical kernel matrices")]
struct Cli {
    /// Use one worker thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Offline build, sampled online loop, error estimate and metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Offline stage only; writes a binary artifact.
    Build {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Online stage from an artifact at one parameter value.
    Instantiate {
        #[arg(long)]
        artifact: PathBuf,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        /// Input vector, one value per line. Defaults to the error probe.
        #[arg(long)]
        x: Option<PathBuf>,
        /// Where to write the product, one value per line.
        #[arg(long)]
        y: Option<PathBuf>,
        /// Compare against exact kernel rows on a sampled subset.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// e, tps, se, mc or mn.
    #[arg(long)]
    kernel: Option<String>,
    /// Number of points, uniform in [0,1]^d.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    d: Option<String>,
    /// Tree depth.
    #[arg(long)]
    lmax: Option<String>,
    /// Chebyshev nodes per spatial dimension.
    #[arg(long)]
    ps: Option<String>,
    /// Chebyshev nodes per parameter.
    #[arg(long)]
    ptheta: Option<String>,
    /// Compression tolerance.
    #[arg(long)]
    eps: Option<String>,
    /// Admissibility constant, or `auto` for sqrt(d).
    #[arg(long)]
    eta: Option<String>,
    /// `lo:hi` per parameter, comma-separated.
    #[arg(long)]
    theta_box: Option<String>,
    /// param-h, param-h2, h-aca or h2-hca.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `tt` or `direct`.
    #[arg(long)]
    near_mode: Option<String>,
    /// Compress every far block separately.
    #[arg(long)]
    no_cache: bool,
    /// Parameter samples for error and timing.
    #[arg(long)]
    n_theta: Option<String>,
    /// Rows in the sampled error estimate.
    #[arg(long)]
    n_rows: Option<String>,
    /// Timing repetitions per sample; the median is kept.
    #[arg(long)]
    repeats: Option<String>,
    /// CSV file; rows are appended.
    #[arg(long)]
    out: Option<String>,
    /// JSON report with per-sample detail.
    #[arg(long)]
    json: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let overrides = [
            ("kernel", &self.kernel),
            ("n", &self.n),
            ("d", &self.d),
            ("l_max", &self.lmax),
            ("p_s", &self.ps),
            ("p_theta", &self.ptheta),
            ("eps", &self.eps),
            ("eta", &self.eta),
            ("theta_box", &self.theta_box),
            ("method", &self.method),
            ("seed", &self.seed),
            ("near_mode", &self.near_mode),
            ("n_theta", &self.n_theta),
            ("n_rows", &self.n_rows),
            ("repeats", &self.repeats),
            ("out", &self.out),
            ("json", &self.json),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if self.no_cache {
            cfg.use_cache = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads(serial: bool) -> anyhow::Result<()> {
    let n = if serial {
        Some(1)
    } else {
        match std::env::var("PHMAT_THREADS") {
            Ok(v) => Some(v.parse::<usize>().context("PHMAT_THREADS must be a positive integer")?),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("PHMAT_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn read_vector(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("bad number '{t}'")))
        .collect()
}

fn write_vector(path: &Path, y: &[f64]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in y {
        writeln!(f, "{v:e}")?;
    }
    Ok(())
}

fn run(cfg: ExperimentConfig) -> anyhow::Result<()> {
    let report = run_experiment(&cfg)?;
    print!("{}", summary(&report.record));
    if let Some(p) = &cfg.out {
        append_csv(p, std::slice::from_ref(&report.record))?;
    }
    if let Some(p) = &cfg.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn build(cfg: ExperimentConfig, path: &Path) -> anyhow::Result<()> {
    let counters = StageCounters::default();
    let points = generate_points(cfg.n, cfg.d, cfg.seed)?;
    let spec = cfg.kernel_spec()?;
    let t = Instant::now();
    let a = match cfg.method {
        Method::ParamH => Artifact::H(ParametricHMatrix::build(points, spec, cfg.build_config(), &counters.offline)?),
        Method::ParamH2 => Artifact::H2(ParametricH2Matrix::build(points, spec, cfg.build_config(), &counters.offline)?),
        m => bail!("method '{}' has no offline stage; use param-h or param-h2", m.id()),
    };
    let secs = t.elapsed().as_secs_f64();
    artifact::save(path, &a)?;
    let s = a.stats();
    println!("offline time      {secs:.3} s");
    println!("kernel evals      {} (far {}, near {})", counters.offline.get(), s.far_evals, s.near_evals);
    println!("couplings         {} ({} translation keys)", s.couplings, s.unique_keys);
    println!("rank caps hit     far {}, near {}", s.far_rank_capped, s.near_rank_capped);
    println!("sampled TT error  far {:.2e}, near {:.2e}", s.max_far_error, s.max_near_error);
    println!("wrote {}", path.display());
    Ok(())
}

fn instantiate(path: &Path, theta: &[f64], x: Option<&Path>, y_out: Option<&Path>, check: bool) -> anyhow::Result<()> {
    let a = artifact::load(path)?;
    let st = a.structure();
    let counters = StageCounters::default();
    let protocol = ErrorProtocol::new(&st.spec, st.n(), 200, 1, st.config.seed);
    let x = match x {
        Some(p) => read_vector(p)?,
        None => protocol.x.clone(),
    };
    let t = Instant::now();
    let y = match &a {
        Artifact::H(p) => p.instantiate(theta, &counters.online)?.mvm(&x)?,
        Artifact::H2(p) => p.instantiate(theta, &counters.online)?.mvm(&x)?,
    };
    println!("instantiate + mvm {:.4} s", t.elapsed().as_secs_f64());
    println!("online evals      {}", counters.online.get());
    if check {
        let probe = ErrorProtocol { x: x.clone(), ..protocol };
        let exact = probe.exact(&st.spec, &st.points, theta, &counters.audit)?;
        println!("sampled error     {:.3e}", relative_error(&exact, &probe.restrict(&y)));
    }
    if let Some(p) = y_out {
        write_vector(p, &y)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = threads(cli.serial).and_then(|_| match cli.cmd {
        Cmd::Run { cfg, dry_run } => {
            let cfg = cfg.resolve()?;
            if dry_run {
                print!("{}", cfg.to_kv());
                return Ok(());
            }
            run(cfg)
        }
        Cmd::Build { cfg, artifact } => build(cfg.resolve()?, &artifact),
        Cmd::Instantiate { artifact, theta, x, y, check } => {
            instantiate(&artifact, &theta, x.as_deref(), y.as_deref(), check)
        }
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
