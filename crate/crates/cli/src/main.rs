use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gndv_core::data::{load_csv, load_idx, minmax_scale, split_indices, subsample};
use gndv_core::eval::{
    classification_report, knn_predict, metrics_csv, trustworthiness, write_text, MetricRow,
};
use gndv_core::generate::{generate, grid_map, sample_image, write_pgm, GenStrategy};
use gndv_core::gradcheck::{gradient_check, TOLERANCE};
use gndv_core::model::{embedding, embedding_table, Patience};
use gndv_core::train::{train, Gradients};
use gndv_core::{checkpoint, Dataset, DenseMatrix, Mode, ModelConfig, RandomSource};

/// Stream ids under `--seed` for data handling.
const SUBSAMPLE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const GENERATE_STREAM: u64 = 4;

#[derive(Parser)]
#[command(
    name = "gndv",
    version,
    about = "Generative embedding: train, embed, sample, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write checkpoint, loss history and manifest.
    Train(TrainArgs),
    /// Export the per-sample latent means of an unsupervised model.
    Embed(EmbedArgs),
    /// Draw samples from a checkpoint.
    Generate(GenerateArgs),
    /// Decode a lattice over the 2-D embedding into a tiled image.
    GridMap(GridMapArgs),
    /// kNN classification and trustworthiness of an embedding.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random tiny models.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Idx,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unsup,
    Sup,
}

#[derive(Args)]
struct DataArgs {
    /// Data file: IDX images or numeric CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    data_format: DataFormat,
    /// IDX: path of the label file. CSV: flag only; the last column holds labels.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    labels: Option<String>,
    /// Train on a random subset of this size fraction (drawn from --seed).
    #[arg(long, default_value_t = 1.0)]
    subsample_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "unsup")]
    mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    gamma1: f64,
    #[arg(long, default_value_t = 1e-5)]
    gamma2: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma3: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma4: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Epoch cap.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Stop once the epoch loss changed by less than 1e-4 (relative) over
    /// this many epochs; 0 disables.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Seed used at training time; reproduces the subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// prior, posterior, or class:<id>
    #[arg(long, default_value = "posterior", value_parser = parse_strategy)]
    strategy: GenStrategy,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// With --image-w, also write one PGM per sample.
    #[arg(long, requires = "image_w")]
    image_h: Option<usize>,
    #[arg(long, requires = "image_h")]
    image_w: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GridMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedding CSV whose bounding box is gridded; defaults to the
    /// checkpoint's own latent means.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(2..))]
    grid_res: u64,
    #[arg(long, default_value_t = 28)]
    image_h: usize,
    #[arg(long, default_value_t = 28)]
    image_w: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model whose latent means are evaluated.
    #[arg(
        long,
        required_unless_present = "embedding",
        conflicts_with = "embedding"
    )]
    checkpoint: Option<PathBuf>,
    /// Embedding CSV to evaluate instead of a checkpoint.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// kNN neighbour counts; pass the flag without values to skip kNN.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "5")]
    knn_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    trust_k: Vec<usize>,
    /// Training fraction of the kNN split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb the analytic gradient before comparing.
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn parse_strategy(s: &str) -> std::result::Result<GenStrategy, String> {
    match s {
        "prior" => Ok(GenStrategy::Prior),
        "posterior" => Ok(GenStrategy::AggregatePosterior),
        _ => s
            .strip_prefix("class:")
            .and_then(|c| c.parse().ok())
            .map(GenStrategy::Conditional)
            .ok_or_else(|| format!("expected prior, posterior or class:<id>, got {s:?}")),
    }
}

/// Resolved settings and artifacts of one run, written as `manifest.txt`.
struct Manifest {
    command: &'static str,
    entries: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            entries: Vec::new(),
            started: Instant::now(),
        }
    }

    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn write(mut self, out_dir: &Path) -> Result<()> {
        let elapsed = self.started.elapsed().as_secs_f64();
        self.put("elapsed_seconds", format!("{elapsed:.3}"));
        let mut text = format!("command = {}\n", self.command);
        for (k, v) in &self.entries {
            writeln!(text, "{k} = {v}")?;
        }
        write_text(&out_dir.join("manifest.txt"), &text)?;
        Ok(())
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Loads, optionally subsamples, then MinMax-scales, exactly as `train` does.
fn load_data(args: &DataArgs, seed: u64, manifest: &mut Manifest) -> Result<Dataset> {
    let raw = match args.data_format {
        DataFormat::Idx => {
            let labels = match args.labels.as_deref() {
                Some("") => bail!("--labels needs a label file path for IDX data"),
                other => other.map(Path::new),
            };
            load_idx(&args.data, labels)?
        }
        DataFormat::Csv => match args.labels.as_deref() {
            None => load_csv(&args.data, false)?,
            Some("") => load_csv(&args.data, true)?,
            Some(_) => bail!("for CSV data --labels is a flag; labels are the last column"),
        },
    };
    let sampled = if args.subsample_fraction == 1.0 {
        raw
    } else {
        subsample(
            &raw,
            args.subsample_fraction,
            &mut RandomSource::derive(seed, SUBSAMPLE_STREAM),
        )?
    };
    manifest.put("data", args.data.display());
    manifest.put(
        "data_format",
        match args.data_format {
            DataFormat::Idx => "idx",
            DataFormat::Csv => "csv",
        },
    );
    if let Some(l) = &args.labels {
        manifest.put("labels", if l.is_empty() { "last-column" } else { l });
    }
    manifest.put("subsample_fraction", args.subsample_fraction);
    manifest.put("samples", sampled.n());
    manifest.put("features", sampled.d());
    Ok(minmax_scale(&sampled))
}

fn csv_row(values: &[f64], label: Option<usize>) -> String {
    let mut line = values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    if let Some(l) = label {
        write!(line, ",{l}").expect("writing to a String");
    }
    line.push('\n');
    line
}

fn matrix_csv(header_prefix: &str, m: &DenseMatrix, labels: Option<&[usize]>) -> String {
    let mut header: Vec<String> = (0..m.cols())
        .map(|j| format!("{header_prefix}{j}"))
        .collect();
    if labels.is_some() {
        header.push("label".into());
    }
    let mut s = header.join(",") + "\n";
    for i in 0..m.rows() {
        s.push_str(&csv_row(m.row(i), labels.map(|l| l[i])));
    }
    s
}

/// Reads an embedding CSV; a trailing `label` header column is dropped.
fn read_embedding(path: &Path) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or_default();
    let labelled = first.split(',').next_back().map(str::trim) == Some("label");
    Ok(load_csv(path, labelled)?.x)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut manifest = Manifest::new("train");
    let ds = load_data(&a.data, a.seed, &mut manifest)?;
    let config = ModelConfig {
        latent_dim: a.latent_dim,
        hidden_widths: a.hidden.clone(),
        beta: a.beta,
        gamma1: a.gamma1,
        gamma2: a.gamma2,
        gamma3: a.gamma3,
        gamma4: a.gamma4,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        mode: match a.mode {
            ModeArg::Unsup => Mode::Unsupervised,
            ModeArg::Sup => Mode::Supervised,
        },
        seed: a.seed,
        patience: (a.patience > 0).then_some(Patience {
            window: a.patience,
            rel_tol: 1e-4,
        }),
    };
    prepare_out_dir(&a.out_dir)?;
    let t = Instant::now();
    let (params, history) = train(&ds, &config)?;
    let train_seconds = t.elapsed().as_secs_f64();

    let ckpt = a.out_dir.join("model.gndv");
    let hist = a.out_dir.join("history.csv");
    checkpoint::save(&params, &ckpt)?;
    history.write_csv(&hist)?;

    manifest.put("mode", format!("{:?}", config.mode));
    manifest.put("latent_dim", config.latent_dim);
    manifest.put("hidden", format!("{:?}", config.hidden_widths));
    manifest.put("beta", config.beta);
    for (i, g) in [config.gamma1, config.gamma2, config.gamma3, config.gamma4]
        .iter()
        .enumerate()
    {
        manifest.put(&format!("gamma{}", i + 1), g);
    }
    manifest.put("lr", config.learning_rate);
    manifest.put("batch_size", config.batch_size);
    manifest.put("epochs_cap", config.epochs);
    manifest.put("patience", a.patience);
    manifest.put("seed", config.seed);
    manifest.put("epochs_run", history.len());
    if let Some(last) = history.epochs.last() {
        manifest.put("final_loss", last.total);
    }
    manifest.put("parallel", gndv_core::par::is_parallel());
    manifest.put("checkpoint", ckpt.display());
    manifest.put("history", hist.display());
    manifest.put("train_seconds", format!("{train_seconds:.3}"));
    manifest.write(&a.out_dir)?;
    println!(
        "trained {} epochs, final loss {:.6}; wrote {}",
        history.len(),
        history.epochs.last().map_or(f64::NAN, |e| e.total),
        ckpt.display()
    );
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let mut manifest = Manifest::new("embed");
    let ds = load_data(&a.data, a.seed, &mut manifest)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let emb = embedding(&params, ds.n())?;
    prepare_out_dir(&a.out_dir)?;
    let out = a.out_dir.join("embedding.csv");
    write_text(&out, &matrix_csv("dim", &emb, ds.labels.as_deref()))?;
    manifest.put("checkpoint", a.checkpoint.display());
    manifest.put("seed", a.seed);
    manifest.put("embedding", out.display());
    manifest.write(&a.out_dir)?;
    println!("wrote {} ({} x {})", out.display(), emb.rows(), emb.cols());
    Ok(())
}

fn strategy_name(s: GenStrategy) -> String {
    match s {
        GenStrategy::Prior => "prior".into(),
        GenStrategy::AggregatePosterior => "posterior".into(),
        GenStrategy::Conditional(c) => format!("class:{c}"),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut manifest = Manifest::new("generate");
    let params = checkpoint::load(&a.checkpoint)?;
    let mut rng = RandomSource::derive(a.seed, GENERATE_STREAM);
    let samples = generate(&params, a.strategy, a.count as usize, &mut rng)?;
    prepare_out_dir(&a.out_dir)?;
    let out = a.out_dir.join("samples.csv");
    write_text(&out, &matrix_csv("x", &samples, None))?;
    manifest.put("checkpoint", a.checkpoint.display());
    manifest.put("strategy", strategy_name(a.strategy));
    manifest.put("count", a.count);
    manifest.put("seed", a.seed);
    manifest.put("samples", out.display());
    if let (Some(h), Some(w)) = (a.image_h, a.image_w) {
        for i in 0..samples.rows() {
            let path = a.out_dir.join(format!("sample_{i:03}.pgm"));
            write_pgm(&sample_image(samples.row(i), h, w)?, &path)?;
        }
        manifest.put(
            "images",
            format!("sample_000.pgm .. sample_{:03}.pgm", samples.rows() - 1),
        );
    }
    manifest.write(&a.out_dir)?;
    println!("wrote {} samples to {}", samples.rows(), out.display());
    Ok(())
}

fn cmd_gridmap(a: GridMapArgs) -> Result<()> {
    let mut manifest = Manifest::new("grid-map");
    let params = checkpoint::load(&a.checkpoint)?;
    let emb = match &a.embedding {
        Some(p) => read_embedding(p)?,
        None => embedding_table(&params),
    };
    let img = grid_map(&params, &emb, a.grid_res as usize, a.image_h, a.image_w)?;
    prepare_out_dir(&a.out_dir)?;
    let out = a.out_dir.join("grid.pgm");
    write_pgm(&img, &out)?;
    manifest.put("checkpoint", a.checkpoint.display());
    if let Some(p) = &a.embedding {
        manifest.put("embedding", p.display());
    }
    manifest.put("grid_res", a.grid_res);
    manifest.put("tile", format!("{}x{}", a.image_h, a.image_w));
    manifest.put("image", out.display());
    manifest.write(&a.out_dir)?;
    println!("wrote {} ({}x{})", out.display(), img.width(), img.height());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut manifest = Manifest::new("eval");
    let ds = load_data(&a.data, a.seed, &mut manifest)?;
    let emb = match (&a.checkpoint, &a.embedding) {
        (Some(c), _) => {
            manifest.put("checkpoint", c.display());
            embedding(&checkpoint::load(c)?, ds.n())?
        }
        (None, Some(p)) => {
            manifest.put("embedding", p.display());
            read_embedding(p)?
        }
        (None, None) => unreachable!("clap requires one of --checkpoint/--embedding"),
    };
    if emb.rows() != ds.n() {
        bail!(
            "embedding has {} rows but the dataset has {} samples",
            emb.rows(),
            ds.n()
        );
    }
    prepare_out_dir(&a.out_dir)?;
    let mut rows = Vec::new();
    if !a.knn_k.is_empty() {
        let Some(labels) = ds.labels.as_deref() else {
            bail!("kNN evaluation needs labelled data (pass --labels)");
        };
        let (tr, te) = split_indices(
            ds.n(),
            a.split,
            &mut RandomSource::derive(a.seed, SPLIT_STREAM),
        )?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let (train_emb, test_emb) = (emb.select_rows(&tr), emb.select_rows(&te));
        for &k in &a.knn_k {
            let pred = knn_predict(&train_emb, &pick(&tr), &test_emb, k)?;
            let report = classification_report(&pred, &pick(&te), ds.c())?;
            for (name, v) in [
                ("accuracy", report.accuracy),
                ("macro_precision", report.macro_precision),
                ("macro_recall", report.macro_recall),
                ("macro_f1", report.macro_f1),
            ] {
                rows.push(MetricRow {
                    metric: name.into(),
                    parameter: k,
                    value: v,
                });
            }
            let path = a.out_dir.join(format!("confusion_k{k}.csv"));
            write_text(&path, &report.confusion_csv())?;
            println!(
                "knn k={k}: accuracy {:.4}, macro F1 {:.4}",
                report.accuracy, report.macro_f1
            );
        }
    }
    for &k in &a.trust_k {
        let t = trustworthiness(&ds.x, &emb, k)?;
        rows.push(MetricRow {
            metric: "trustworthiness".into(),
            parameter: k,
            value: t.value,
        });
        println!("trustworthiness k={k}: {:.4}", t.value);
    }
    let out = a.out_dir.join("metrics.csv");
    write_text(&out, &metrics_csv(&rows))?;
    manifest.put("knn_k", format!("{:?}", a.knn_k));
    manifest.put("trust_k", format!("{:?}", a.trust_k));
    manifest.put("split", a.split);
    manifest.put("seed", a.seed);
    manifest.put("metrics", out.display());
    manifest.write(&a.out_dir)?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let corrupt = |g: &mut Gradients| g.values.rec_bias[0] += 0.5;
    let tamper: Option<&dyn Fn(&mut Gradients)> = if a.corrupt { Some(&corrupt) } else { None };
    let report = gradient_check(a.trials as usize, a.seed, tamper)?;
    for (i, t) in report.trials.iter().enumerate() {
        println!(
            "trial {i}: n={} d={} k={} widths={:?} max relative error {:.3e}",
            t.n, t.d, t.k, t.widths, t.max_rel_error
        );
    }
    let verdict = if report.passed() { "ok" } else { "FAILED" };
    println!(
        "max relative error {:.3e} (tolerance {TOLERANCE:e}): {verdict}",
        report.max_rel_error()
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Embed(a) => cmd_embed(a).map(|_| true),
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::GridMap(a) => cmd_gridmap(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
