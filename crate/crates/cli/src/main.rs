//! `sparse-ct`: phantom generation, dataset ingestion, method comparison
//! runs and image metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_ct::experiment::{ingest_dataset, run_experiment, ExperimentConfig};
use sparse_ct::io::{load_image, montage, save_image, write_png, Dtype};
use sparse_ct::metrics::{psnr, ssim};
use sparse_ct::phantom::{generate_phantoms, PhantomSpec};
use sparse_ct::{Image, Result};

#[derive(Parser)]
#[command(name = "sparse-ct", version, about = "Self-supervised sparse-view CT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms as TOM1 grids plus a PNG montage.
    Gen(GenArgs),
    /// Run the FBP / TV / Noise2Inverse / Sparse2Inverse comparison.
    Run(Box<RunArgs>),
    /// Load and normalise a directory of TOM1 images.
    Ingest(IngestArgs),
    /// SSIM and PSNR of a reconstruction against a reference.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// shepp-logan or random-ellipses
    #[arg(long, default_value = "random-ellipses")]
    kind: String,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "phantoms")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma separated angle counts
    #[arg(long)]
    angles: Option<String>,
    #[arg(long)]
    photons: Option<String>,
    /// Comma separated subset of fbp,tv,n2i,s2i
    #[arg(long)]
    methods: Option<String>,
    /// Number of angle folds k
    #[arg(long)]
    splits: Option<String>,
    /// Folds per network input p
    #[arg(long)]
    subset_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Learning rate for both learned methods
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Directory of TOM1 images to use instead of generated phantoms
    #[arg(long)]
    dataset: Option<String>,
    /// Number of generated phantoms
    #[arg(long)]
    images: Option<String>,
    /// Image side length
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    /// Comma separated absolute TV weights
    #[arg(long)]
    tv_lambdas: Option<String>,
    #[arg(long)]
    tv_iters: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("dataset", &self.dataset),
            ("images", &self.images),
            ("size", &self.size),
            ("angles", &self.angles),
            ("photons", &self.photons),
            ("methods", &self.methods),
            ("splits", &self.splits),
            ("subset_size", &self.subset_size),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("out", &self.out),
            ("eval_every", &self.eval_every),
            ("tv_lambdas", &self.tv_lambdas),
            ("tv_iters", &self.tv_iters),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    dir: PathBuf,
    /// Required side length; defaults to the first file's size
    #[arg(long)]
    size: Option<usize>,
    /// Where to write the normalised grids and a montage
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    recon: PathBuf,
    reference: PathBuf,
    /// Defaults to max - min of the reference
    #[arg(long)]
    data_range: Option<f64>,
}

fn write_set(out: &Path, stem: &str, images: &[Image]) -> Result<()> {
    fs::create_dir_all(out)?;
    for (i, img) in images.iter().enumerate() {
        save_image(&out.join(format!("{stem}_{i:03}.tom")), img, Dtype::F64)?;
    }
    write_png(&out.join(format!("{stem}s.png")), &montage(images)?)
}

fn gen(args: &GenArgs) -> Result<()> {
    let spec = PhantomSpec { kind: args.kind.parse()?, size: args.size, seed: args.seed, ..PhantomSpec::default() };
    let images = generate_phantoms(&spec, args.count)?;
    write_set(&args.out, "phantom", &images)?;
    println!("wrote {} {} phantoms of {}x{} to {}", images.len(), spec.kind, spec.size, spec.size, args.out.display());
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let report = run_experiment(&cfg)?;
    print!("{}", report.results_csv);
    eprintln!("results written to {}", cfg.out.join("results.csv").display());
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let images = ingest_dataset(&args.dir, args.size)?;
    let (h, w) = images[0].shape();
    println!("{} images of {h}x{w} from {}", images.len(), args.dir.display());
    if let Some(out) = &args.out {
        write_set(out, "image", &images)?;
    }
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let recon = load_image(&args.recon)?;
    let reference = load_image(&args.reference)?;
    let s = ssim(&recon, &reference, args.data_range)?;
    let p = psnr(&recon, &reference, args.data_range)?;
    println!("ssim {s:.6}\npsnr {p:.4}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Ingest(a) => ingest(a),
        Command::Metrics(a) => metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
