use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use repgan::data::fetch::{fetch_dataset, load_split, HttpTransport};
use repgan::data::{Dataset, DatasetName, Split};
use repgan::entropy::{verify_bounds, MAX_ALPHABET};
use repgan::evaluation::{
    assign_cluster_labels, cluster_heads, hungarian_accuracy, latent_reconstruction_mse, predict_clusters,
    reconstruction_mse, traversal_grid, ImageGrid, Vary,
};
use repgan::latent::{sample_prior, LatentBatch};
use repgan::tensor::Tensor;
use repgan::training::{run, Observer, TrainState};
use repgan::{LatentConfig, LossReport, ModelKind, ModelParams32, Stream, TrainState32};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Kind};

pub const SOURCE_REVISION: &str = env!("REPGAN_SOURCE_REV");

#[derive(Debug, Parser)]
#[command(name = "repgan", version, about = "Train and evaluate disentangled adversarial autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download and verify a dataset into the cache.
    DownloadData {
        #[arg(long, default_value = "mnist", value_parser = parse_dataset)]
        dataset: DatasetName,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        url: Option<String>,
    },
    /// Train a model, writing checkpoints and metrics to a run directory.
    Train(TrainArgs),
    /// Clustering accuracy and reconstruction errors of a checkpoint.
    Eval(EvalArgs),
    /// Decode prior samples into an image grid.
    Generate {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test images next to their reconstructions.
    Reconstruct {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent traversal grid.
    Traverse {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, value_parser = parse_vary)]
        vary: Option<Vary>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long)]
        category: Option<usize>,
        /// Two comma-separated slot dimensions.
        #[arg(long, value_parser = parse_pair)]
        dims: Option<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train entangled models over latent widths and tabulate their errors.
    SweepLatent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8, 16, 32, 64])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_model, default_values = ["x-rep-x", "rep-x-rep", "repgan"])]
        models: Vec<ModelKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the entropy bounds on random discrete systems.
    VerifyBounds {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_alphabet: usize,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr_dz=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Option<DatasetName>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Defaults to `runs/<model>-<dataset>-seed<seed>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint written under a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Directory for `eval.csv` and `eval.json`; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dataset(s: &str) -> Result<DatasetName, String> {
    DatasetName::parse(s).ok_or_else(|| format!("unknown dataset {s:?} (mnist, fashion-mnist)"))
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?} (repgan, x-rep-x, rep-x-rep)"))
}

fn parse_vary(s: &str) -> Result<Vary, String> {
    match s {
        "c" => Ok(Vary::C),
        "s" => Ok(Vary::S),
        "n" => Ok(Vary::N),
        "z" => Ok(Vary::Z),
        _ => Err(format!("unknown slot {s:?} (c, s, n, z)")),
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated integers")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::DownloadData { dataset, cache_dir, url } => {
            let cache = cache_dir.unwrap_or_else(|| crate::config::DataConfig::default().cache_dir());
            let files = fetch_dataset(dataset, &cache, url.as_deref(), &HttpTransport::default())?;
            for f in files {
                println!("{}  {}", f.md5, f.path.display());
            }
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Generate {
            ck,
            count,
            cols,
            seed,
            out,
        } => {
            let (_, state) = open(&ck)?;
            if count == 0 || cols == 0 {
                return Err(CliError::config("count and cols must be positive"));
            }
            let latent = state.params.latent.clone();
            let prior: LatentBatch<f32> = sample_prior(&latent, count, &mut Stream::from_seed(seed));
            let images = state.params.decode(&prior.concat())?;
            let rows = count.div_ceil(cols);
            let mut tiles = images.into_vec();
            let per = state.params.arch.channels * state.params.arch.image_side.pow(2);
            tiles.resize(rows * cols * per, 1.0);
            write_grid(&grid(rows, cols, &state.params, tiles), &out)
        }
        Command::Reconstruct { ck, count, out } => {
            let (cfg, state) = open(&ck)?;
            let test = test_set(&cfg)?;
            let n = count.min(test.len());
            if n == 0 {
                return Err(CliError::config("nothing to reconstruct"));
            }
            let idx: Vec<usize> = (0..n).collect();
            let x: Tensor<f32> = test.images(&idx);
            let y = state.params.decode(&state.params.encode(&x)?.mean_code())?;
            let per = x.row_len();
            let mut tiles = Vec::with_capacity(2 * n * per);
            for i in 0..n {
                tiles.extend_from_slice(x.row(i));
                tiles.extend_from_slice(y.row(i));
            }
            write_grid(&grid(n, 2, &state.params, tiles), &out)
        }
        Command::Traverse {
            ck,
            vary,
            steps,
            extent,
            category,
            dims,
            out,
        } => {
            let (cfg, state) = open(&ck)?;
            let mut spec = cfg.eval.traversal.clone();
            if let Some(v) = vary {
                spec.vary = v;
            } else if state.params.latent.is_entangled() {
                spec.vary = Vary::Z;
            }
            spec.steps = steps.unwrap_or(spec.steps);
            spec.extent = extent.unwrap_or(spec.extent);
            spec.category = category.unwrap_or(spec.category);
            spec.dims = dims.unwrap_or(spec.dims);
            write_grid(&traversal_grid(&state.params, &spec)?, &out)
        }
        Command::SweepLatent { cfg, dims, models, out } => sweep_latent(cfg, dims, models, &out),
        Command::VerifyBounds {
            trials,
            seed,
            max_alphabet,
            tol,
        } => {
            if max_alphabet == 0 || max_alphabet > MAX_ALPHABET {
                return Err(CliError::config(format!("max-alphabet must be in 1..={MAX_ALPHABET}")));
            }
            let results = verify_bounds(trials, max_alphabet, seed, tol)?;
            println!("{:>5}  {:>7}  {:>9}  {:>14}  {:>14}  {:>10}  result", "trial", "|X|x|Z|", "given", "H", "bound", "kl gap");
            for t in &results {
                println!(
                    "{:>5}  {:>7}  {:>9}  {:>14.10}  {:>14.10}  {:>10.3e}  {}",
                    t.trial,
                    format!("{}x{}", t.nx, t.nz),
                    format!("{:?}", t.direction),
                    t.entropy,
                    t.bound,
                    t.kl_gap,
                    if t.pass { "pass" } else { "FAIL" }
                );
            }
            let failed = results.iter().filter(|t| !t.pass).count();
            println!("{} of {} trials passed (tol {tol:e})", results.len() - failed, results.len());
            if failed > 0 {
                return Err(CliError::new(Kind::Verification, format!("{failed} bound checks failed")));
            }
            Ok(())
        }
    }
}

fn grid(rows: usize, cols: usize, params: &ModelParams32, tiles: Vec<f32>) -> ImageGrid {
    let (channels, side) = (params.arch.channels, params.arch.image_side);
    ImageGrid {
        rows,
        cols,
        channels,
        side,
        tiles: Tensor::from_vec(vec![rows * cols, channels, side, side], tiles).cast(),
    }
}

fn write_grid(grid: &ImageGrid, out: &Path) -> Result<(), CliError> {
    let bytes = match out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => grid.to_pgm(),
        _ => grid.to_png()?,
    };
    write_file(out, &bytes)?;
    println!("wrote {} ({}x{} tiles)", out.display(), grid.rows, grid.cols);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint and the config to use with it.
fn open(args: &CheckpointArgs) -> Result<(RunConfig, TrainState32), CliError> {
    let ck: Checkpoint<f32> = checkpoint::load(&args.checkpoint)?;
    let cfg = match &args.cfg.config {
        Some(path) => RunConfig::load(Some(path), &args.cfg.sets)?,
        None => RunConfig::parse(&ck.config.to_toml(), &args.cfg.sets)?,
    };
    if cfg.fingerprint() != ck.config_hash && !args.force {
        return Err(CliError::config(format!(
            "config does not match checkpoint {}; pass --force to use it anyway",
            args.checkpoint.display()
        )));
    }
    Ok((cfg, ck.state))
}

fn load_local(name: &str, split: Split, images: &Path, labels: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::from_idx_files(name, split, images, labels)?)
}

fn ensure_cached(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let cache = cfg.data.cache_dir();
    fetch_dataset(cfg.train.dataset, &cache, cfg.data.url.as_deref(), &HttpTransport::default())?;
    Ok(cache)
}

pub fn train_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let ds = match (&d.train_images, &d.train_labels) {
        (Some(i), Some(l)) => load_local(cfg.train.dataset.tag(), Split::Train, i, l)?,
        _ => load_split(cfg.train.dataset, Split::Train, &ensure_cached(cfg)?)?,
    };
    Ok(match d.train_limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

pub fn test_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    match (&d.test_images, &d.test_labels) {
        (Some(i), Some(l)) => load_local(cfg.train.dataset.tag(), Split::Test, i, l),
        _ => Ok(load_split(cfg.train.dataset, Split::Test, &ensure_cached(cfg)?)?),
    }
}

/// Appends loss rows to `metrics.csv` and saves checkpoints on cadence.
struct RunObserver {
    dir: PathBuf,
    config: RunConfig,
    metrics: csv::Writer<fs::File>,
    started: Instant,
    last_checkpoint: Option<PathBuf>,
    log_every: u64,
}

impl RunObserver {
    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step-{step:08}.ckpt"))
    }
}

fn to_core(e: CliError) -> repgan::Error {
    repgan::Error::Io(std::io::Error::other(e.message))
}

impl Observer<f32> for RunObserver {
    fn on_step(&mut self, r: &LossReport, _state: &TrainState32) -> repgan::Result<()> {
        let mut row = vec![r.step.to_string(), r.phase.tag().to_string()];
        row.extend(r.values().iter().map(|v| format!("{v:.6e}")));
        row.push(format!("{:.3}", self.started.elapsed().as_secs_f64()));
        self.metrics
            .write_record(&row)
            .map_err(|e| repgan::Error::Io(std::io::Error::other(e)))?;
        if self.log_every > 0 && (r.step + 1) % self.log_every == 0 {
            self.metrics.flush()?;
            eprintln!(
                "step {:>7} {:<9} rec_x {:.4} rec_c {:.4} adv_x {:.4}",
                r.step + 1,
                r.phase,
                r.rec_x,
                r.rec_c,
                r.adv_x
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState32) -> repgan::Result<()> {
        self.metrics.flush()?;
        let path = self.checkpoint_path(state.step);
        checkpoint::save(&path, &self.config, state).map_err(to_core)?;
        checkpoint::save(&self.dir.join("latest.ckpt"), &self.config, state).map_err(to_core)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "step", "phase", "adv_c", "adv_s", "adv_n", "adv_x", "rec_x", "rec_c", "rec_s", "wall_clock_s",
];

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut sets = args.cfg.sets.clone();
    if let Some(m) = args.model {
        sets.push(format!("train.model=\"{}\"", m.tag()));
    }
    if let Some(d) = args.dataset {
        sets.push(format!("train.dataset=\"{}\"", d.tag()));
    }
    if let Some(s) = args.seed {
        sets.push(format!("train.seed={s}"));
    }
    if let Some(e) = args.epochs {
        sets.push(format!("train.epochs={e}"));
    }
    if let Some(m) = args.max_steps {
        sets.push(format!("train.max_steps={m}"));
    }
    let cfg = RunConfig::load(args.cfg.config.as_deref(), &sets)?;
    let dir = args.run_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.train.model, cfg.train.dataset, cfg.train.seed))
    });
    let mut state: TrainState32 = match &args.resume {
        Some(path) => checkpoint::load_matching(path, &cfg, args.force)?.state,
        None => TrainState::new(&cfg.train, &cfg.arch, &cfg.latent)?,
    };
    let data = train_set(&cfg)?;

    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let info = serde_json::json!({
        "seed": cfg.train.seed,
        "source_revision": SOURCE_REVISION,
        "config_hash": cfg.fingerprint(),
        "resumed_from": args.resume.as_ref().map(|p| p.display().to_string()),
        "resumed_at_step": state.step,
        "train_images": data.len(),
        "data_provenance": data.provenance.iter().map(|p| serde_json::json!({"path": p.path, "md5": p.md5})).collect::<Vec<_>>(),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&info).unwrap())?;

    let metrics_path = dir.join("metrics.csv");
    let fresh = !metrics_path.exists() || args.resume.is_none();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)?;
    let mut metrics = csv::Writer::from_writer(file);
    if fresh {
        metrics.write_record(METRICS_HEADER)?;
    }
    let mut obs = RunObserver {
        dir: dir.clone(),
        config: cfg.clone(),
        metrics,
        started: Instant::now(),
        last_checkpoint: None,
        log_every: 100,
    };
    let result = run(&mut state, &cfg.train, &data, &mut obs);
    obs.metrics.flush()?;
    match result {
        Ok(()) => {
            println!(
                "trained {} steps; checkpoint {}",
                state.step,
                dir.join("latest.ckpt").display()
            );
            Ok(())
        }
        Err(e @ repgan::Error::Divergence { .. }) => {
            let kept = obs.last_checkpoint.as_ref().map(|p| p.display().to_string());
            let note = serde_json::json!({"error": e.to_string(), "last_good_checkpoint": kept});
            fs::write(dir.join("divergence.json"), note.to_string())?;
            Err(CliError::new(
                Kind::Divergence,
                format!("{e}; last good checkpoint: {}", kept.as_deref().unwrap_or("none")),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (cfg, state) = open(&args.ck)?;
    let params = &state.params;
    let test = test_set(&cfg)?;
    let b = cfg.eval.batch_size;
    let mut rows: Vec<(&str, String)> = Vec::new();
    if !params.latent.is_entangled() {
        let train = train_set(&cfg)?;
        let heads = cluster_heads(params)?;
        let map = assign_cluster_labels(&heads, &train)?;
        let clusters = predict_clusters(params, &test, b)?;
        let acc = repgan::evaluation::accuracy_from_clusters(&clusters, test.labels(), &map);
        rows.push(("accuracy", format!("{acc:.6}")));
        rows.push((
            "hungarian_accuracy",
            format!("{:.6}", hungarian_accuracy(&clusters, test.labels(), params.latent.kc)),
        ));
        rows.push(("distinct_cluster_labels", map.distinct_labels().to_string()));
        rows.push((
            "cluster_labels",
            map.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
        ));
    }
    let mse = reconstruction_mse(params, &test, b)?;
    rows.push(("recon_mse", format!("{mse:.6}")));
    let lat = latent_reconstruction_mse(params, cfg.eval.latent_samples, &mut Stream::from_seed(cfg.eval.seed), b)?;
    rows.push(("latent_mse", format!("{:.6}", lat.value)));
    rows.push(("latent_mse_columns", lat.compared.clone()));
    rows.push(("step", state.step.to_string()));
    rows.push(("split", "test".into()));
    rows.push(("s_head", "mean".into()));

    for (k, v) in &rows {
        println!("{k:<24} {v}");
    }
    let dir = args
        .out
        .clone()
        .or_else(|| args.ck.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["metric", "value"])?;
    for (k, v) in &rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    let json: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone()))).collect();
    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&json).unwrap())?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 6] = ["model", "dim", "latent_mse", "recon_mse", "steps", "seed"];

fn sweep_latent(args: ConfigArgs, dims: Vec<usize>, models: Vec<ModelKind>, out: &Path) -> Result<(), CliError> {
    let base = RunConfig::load(args.config.as_deref(), &args.sets)?;
    if dims.is_empty() || models.is_empty() {
        return Err(CliError::config("sweep needs at least one dim and one model"));
    }
    let train = train_set(&base)?;
    let test = test_set(&base)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(SWEEP_HEADER)?;
    for &model in &models {
        for &dim in &dims {
            let mut cfg = base.clone();
            cfg.train.model = model;
            cfg.latent = LatentConfig {
                slot_variance: base.latent.slot_variance,
                ..LatentConfig::entangled(dim)
            };
            cfg.validate()?;
            let mut state: TrainState32 = TrainState::new(&cfg.train, &cfg.arch, &cfg.latent)?;
            struct Quiet;
            impl Observer<f32> for Quiet {}
            run(&mut state, &cfg.train, &train, &mut Quiet)?;
            let b = cfg.eval.batch_size;
            let lat = latent_reconstruction_mse(&state.params, cfg.eval.latent_samples, &mut Stream::from_seed(cfg.eval.seed), b)?;
            let mse = reconstruction_mse(&state.params, &test, b)?;
            w.write_record([
                model.tag().to_string(),
                dim.to_string(),
                format!("{:.6e}", lat.value),
                format!("{mse:.6e}"),
                state.step.to_string(),
                cfg.train.seed.to_string(),
            ])?;
            w.flush()?;
            eprintln!("{model} dim {dim}: latent mse {:.4e}, recon mse {mse:.4e}", lat.value);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::config(e.kind().to_string()).json_line());
            }
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("{}", e.json_line());
            e.exit_code()
        }
    }
}
