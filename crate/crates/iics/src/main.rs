use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iics::config::RunConfig;
use iics::core::{CameraId, Dataset, DatasetMeta, Rng, Sample};
use iics::eval::{similarity_histogram, write_histogram_csv, POPULATION_NAMES};
use iics::nn::{
    grad_check, load_checkpoint, softmax_ce, AlphaSharing, ClassifierHead, EncoderModel, Tensor3,
};
use iics::pipeline::{self, Ablation};
use iics::synthgen::{generate, load_dataset, save_dataset};
use iics::{Error, Result};

#[derive(Parser)]
#[command(
    name = "iics",
    version,
    about = "Unsupervised re-identification with alternating intra/inter-camera pseudo-label training"
)]
struct Cli {
    /// JSON config file with sections {gen, pipeline, similarity, eval}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set pipeline.rounds=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Cap the number of worker threads for all parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    Full,
    Stage1Only,
    InterOnly,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::Stage1Only => Ablation::Stage1Only,
            AblationArg::InterOnly => Ablation::InterOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write per-round reports, checkpoints, and
    /// final metrics into a run directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
    },
    /// Evaluate a checkpoint on a dataset: metrics.json plus a similarity
    /// histogram CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a CSV of precomputed embeddings into an embedding-mode
    /// dataset (one row per sample: camera, [identity,] values...).
    ImportEmbeddings {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the second CSV column as a ground-truth identity.
        #[arg(long)]
        has_identity: bool,
    },
    /// Finite-difference check of the encoder/loss gradients.
    GradCheck {
        #[arg(long, default_value_t = 30)]
        probes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Similarity histogram of a checkpoint's embeddings over the four
    /// identity/camera pair populations.
    SimHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for entry in &cli.overrides {
        cfg.apply_override(entry)?;
    }
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate(&cfg.gen)?;
    save_dataset(&ds, out)?;
    let identities = ds
        .identities()
        .map(|ids| ids.iter().collect::<std::collections::BTreeSet<_>>().len())
        .unwrap_or(0);
    println!(
        "wrote {}: n={} cameras={} identities={}",
        out.display(),
        ds.len(),
        ds.num_cameras,
        identities
    );
    Ok(())
}

fn cmd_run(cfg: &RunConfig, dataset: &Path, out: &Path, ablation: Ablation) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let (_, report) =
        pipeline::run(&cfg.pipeline, &cfg.similarity, &cfg.eval, &ds, ablation, Some(out))?;
    println!(
        "run complete: rounds={} rank1={:.4} mAP={:.4} ({:.1}s)",
        report.rounds.len(),
        report.final_metrics.rank1,
        report.final_metrics.map,
        report.wall_seconds
    );
    Ok(())
}

fn check_dims(model: &EncoderModel, ds: &Dataset) -> Result<()> {
    if model.c_in != ds.channels || model.length != ds.length {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint expects [{}, {}] signals, dataset has [{}, {}]",
            model.c_in, model.length, ds.channels, ds.length
        )));
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_dims(&model, &ds)?;
    let metrics = pipeline::evaluate_model(&model, &ds, &cfg.eval)?;
    std::fs::create_dir_all(out)?;
    let json =
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("metrics.json"), json)?;

    let ids: Vec<usize> = (0..ds.len()).collect();
    let embeddings = pipeline::extract_embeddings(&model, &ds, &ids)?;
    let sim = iics::core::cosine_matrix(&embeddings)?;
    let identities = ds
        .identities()
        .ok_or_else(|| Error::InvalidDataset("evaluation needs identities".into()))?;
    let hist = similarity_histogram(&sim, &identities, &ds.cameras(), cfg.eval.bins)?;
    write_histogram_csv(&hist, &out.join("histogram.csv"))?;
    println!(
        "rank1={:.4} rank5={:.4} mAP={:.4} queries={}",
        metrics.rank1, metrics.rank5, metrics.map, metrics.num_queries
    );
    Ok(())
}

fn cmd_import_embeddings(input: &Path, out: &Path, has_identity: bool) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    let mut max_camera = 0usize;
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("row {}: {what}", row + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let header = 1 + has_identity as usize;
        if fields.len() <= header {
            return Err(bad("too few columns"));
        }
        let camera: usize =
            fields[0].parse().map_err(|_| bad("camera id is not an integer"))?;
        let identity = if has_identity {
            Some(fields[1].parse().map_err(|_| bad("identity is not an integer"))?)
        } else {
            None
        };
        let values: Vec<f64> = fields[header..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad float value")))
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(bad(&format!("{} values, expected {d}", values.len())))
            }
            _ => {}
        }
        max_camera = max_camera.max(camera);
        samples.push(Sample {
            id: samples.len(),
            camera: CameraId(camera),
            signal: values,
            true_identity: identity,
        });
    }
    let dim = dim.ok_or_else(|| Error::Format("no rows in input".into()))?;
    let ds = Dataset::new(
        samples,
        max_camera + 1,
        dim,
        1,
        DatasetMeta::Imported { source: input.display().to_string() },
    )?;
    save_dataset(&ds, out)?;
    println!("wrote {}: n={} dim={} cameras={}", out.display(), ds.len(), dim, ds.num_cameras);
    Ok(())
}

/// Check the full encoder + classifier gradient against central differences
/// on a random batch.
fn cmd_grad_check(probes: usize, seed: u64, tol: f64) -> Result<()> {
    let (n, c_in, c_mid, length, d, classes) = (4, 3, 5, 6, 7, 3);
    let mut rng = Rng::new(seed);
    let mut model =
        EncoderModel::new(c_in, c_mid, length, d, AlphaSharing::PerChannel, 0.5, &mut rng);
    let head = ClassifierHead::new(classes, d, None, &mut rng);
    let mut x = Tensor3::zeros(n, c_in, length);
    for v in x.data.iter_mut() {
        *v = rng.normal();
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();

    let loss_of = |model: &mut EncoderModel| -> Result<(f64, Vec<f64>)> {
        let frozen = model.clone();
        let (f, cache) = iics::nn::encode_train(model, &x)?;
        let mut loss = 0.0;
        let mut grad_f = vec![0.0; n * d];
        for (i, &label) in labels.iter().enumerate() {
            let (l, grads) = softmax_ce(&head, &f[i * d..(i + 1) * d], label)?;
            loss += l / n as f64;
            for (g, v) in grad_f[i * d..(i + 1) * d].iter_mut().zip(&grads.embedding) {
                *g = v / n as f64;
            }
        }
        let enc = iics::nn::encode_backward(model, &cache, &grad_f)?;
        *model = frozen; // training forward mutates running stats
        Ok((loss, enc.flatten()))
    };

    let params = model.flatten_params();
    let (_, analytic) = loss_of(&mut model)?;
    let mut check_rng = Rng::new(seed ^ 0x5eed);
    let mut eval_model = model.clone();
    let report = grad_check(
        &params,
        &analytic,
        |p: &[f64]| {
            eval_model.set_params(p);
            loss_of(&mut eval_model).map(|(l, _)| l).unwrap()
        },
        probes,
        1e-5,
        tol,
        &mut check_rng,
    );
    println!("encoder gradient check: {report}");
    if report.pass {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "gradient check failed: max relative error {:.3e} > {tol:.1e}",
            report.max_rel_err
        )))
    }
}

fn cmd_sim_hist(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_dims(&model, &ds)?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    let embeddings = pipeline::extract_embeddings(&model, &ds, &ids)?;
    let sim = iics::core::cosine_matrix(&embeddings)?;
    let identities = ds
        .identities()
        .ok_or_else(|| Error::InvalidDataset("histogram needs identities".into()))?;
    let hist = similarity_histogram(&sim, &identities, &ds.cameras(), cfg.eval.bins)?;
    write_histogram_csv(&hist, out)?;
    for (name, mean) in POPULATION_NAMES.iter().zip(&hist.means) {
        match mean {
            Some(m) => println!("{name}: mean={m:.4}"),
            None => println!("{name}: empty"),
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out),
        Command::Run { dataset, out, ablation } => {
            cmd_run(&cfg, dataset, out, (*ablation).into())
        }
        Command::Eval { checkpoint, dataset, out } => cmd_eval(&cfg, checkpoint, dataset, out),
        Command::ImportEmbeddings { input, out, has_identity } => {
            cmd_import_embeddings(input, out, *has_identity)
        }
        Command::GradCheck { probes, seed, tol } => cmd_grad_check(*probes, *seed, *tol),
        Command::SimHist { checkpoint, dataset, out } => {
            cmd_sim_hist(&cfg, checkpoint, dataset, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
