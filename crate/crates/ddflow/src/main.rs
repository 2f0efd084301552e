//! `ddf` — command-line front end for the categorical flow models in this
//! crate: training, evaluation, sampling, lossless compression, self-checks.
//!
//! Subcommands cover the full workflow: generate toy data, train a model
//! from a JSON spec, evaluate bits per dimension, draw samples, compress and
//! decompress datasets losslessly, run the self-verification suites, and
//! plot a 2D model density. Every subcommand is deterministic given its
//! flags; all randomness flows from explicit `--seed` values.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ddflow::check;
use ddflow::codec::{stream_compress, stream_decompress, stream_item_count};
use ddflow::flow::FlowModel;
use ddflow::grid::{
    load_grids, load_idx, sample_eight_gaussians, save_grids, CategoricalGrid, Dataset, Split,
};
use ddflow::likelihood::evaluate_bpd;
use ddflow::ppm::{render_grid_gray, write_ppm_gray};
use ddflow::train::{train_model, FlowSpec};
use ddflow::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ddf",
    about = "Invertible categorical flows: train, evaluate, sample, compress.",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a quantized 8-Gaussians dataset (2 dims, 91 classes).
    GenToy {
        /// Number of samples to draw.
        #[arg(short = 'n', default_value_t = 50_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; the file is named toy-n{n}-seed{seed}.ddfg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON spec on a dataset.
    Train {
        /// JSON training spec.
        #[arg(long)]
        spec: PathBuf,
        /// Training data: a .ddfg grids file or an IDX image file.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.ddfm and report.csv.
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold for IDX image data.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Report bits per dimension of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional directory for a per-sample BPD CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Draw samples from a model (grids file plus PPM renders).
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'n', default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Losslessly compress a dataset with a model.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for compressed.ddfs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Decompress a .ddfs stream back into a grids file.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        /// The compressed .ddfs stream.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for decompressed.ddfg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-verification suites; exit 0 iff all pass.
    Verify {
        /// Scale for the randomized suites (model round trips; other suites
        /// scale proportionally).
        #[arg(short = 'n', default_value_t = 1000)]
        n: usize,
    },
    /// Render a 2D model's full density as a PPM image.
    PlotDensity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("DDF_THREADS") {
        match threads.parse::<usize>() {
            Ok(t) if t > 0 => {
                // A failure here means a pool already exists; that is fine.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            }
            _ => {
                eprintln!("error: DDF_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    let cli = Cli::parse();
    println!("config: {:?}", cli.cmd);
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Loads a dataset, sniffing the format from the leading magic bytes:
/// `DDFG` grids files load directly, IDX image files (magic 0x00000803) are
/// binarized at the threshold.
fn load_data(path: &Path, threshold: f64, split: Split) -> Result<Dataset> {
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        f.read_exact(&mut head)?;
    }
    match head {
        m if m == *b"DDFG" => load_grids(path, split),
        [0, 0, 8, 3] => load_idx(path, threshold, split),
        other => Err(Error::Format(format!(
            "{} starts with {other:?}; expected a DDFG grids file or an IDX image file",
            path.display()
        ))),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenToy { n, seed, out } => gen_toy(n, seed, &out),
        Cmd::Train { spec, data, out, threshold } => train(&spec, &data, &out, threshold),
        Cmd::Eval { model, data, out, threshold } => eval(&model, &data, out.as_deref(), threshold),
        Cmd::Sample { model, n, seed, out } => sample(&model, n, seed, &out),
        Cmd::Compress { model, data, out, threshold } => compress(&model, &data, &out, threshold),
        Cmd::Decompress { model, data, out } => decompress(&model, &data, &out),
        Cmd::Verify { n } => verify(n),
        Cmd::PlotDensity { model, out } => plot_density(&model, &out),
    }
}

fn gen_toy(n: usize, seed: u64, out: &Path) -> Result<()> {
    let data = sample_eight_gaussians(n, seed, Split::Train)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("toy-n{n}-seed{seed}.ddfg"));
    save_grids(&data, &path)?;
    println!("wrote {} ({} samples, shape {:?}, K={})", path.display(), n, data.shape(), data.num_classes());
    Ok(())
}

fn train(spec_path: &Path, data_path: &Path, out: &Path, threshold: f64) -> Result<()> {
    let spec = FlowSpec::from_json(&std::fs::read_to_string(spec_path)?)?;
    let data = load_data(data_path, threshold, Split::Train)?;
    println!(
        "data: {} samples, shape {:?}, K={}",
        data.len(),
        data.shape(),
        data.num_classes()
    );
    let (model, report) = train_model(&spec, &data)?;
    println!("initial train BPD {:.9}", report.initial_train_bpd);
    for layer in &report.layers {
        let valid = layer
            .valid_bpd_after
            .map(|v| format!(", valid BPD {v:.6}"))
            .unwrap_or_default();
        println!(
            "layer {} ({}): {} epochs, best valid {:.6} nats, train BPD {:.6} -> {:.6}{}",
            layer.layer,
            layer.kind,
            layer.epochs_run,
            layer.best_valid_nats,
            layer.train_bpd_before,
            layer.train_bpd_after,
            valid
        );
    }
    println!("final BPD {:.9} (wall {:.1} s)", report.final_bpd, report.wall_seconds);
    std::fs::create_dir_all(out)?;
    let model_path = out.join("model.ddfm");
    model.save(&model_path)?;
    println!("wrote {} (hash {:08X})", model_path.display(), model.hash());
    let report_path = out.join("report.csv");
    std::fs::write(&report_path, report.csv())?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn eval(model_path: &Path, data_path: &Path, out: Option<&Path>, threshold: f64) -> Result<()> {
    let model = FlowModel::load(model_path)?;
    let data = load_data(data_path, threshold, Split::Test)?;
    let report = evaluate_bpd(&model, data.items())?;
    println!(
        "mean BPD {:.9} over {} samples (base {:.9} + splitprior {:.9})",
        report.mean_bpd,
        data.len(),
        report.base_bpd,
        report.splitprior_bpd
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("eval.csv");
        let mut csv = String::from("index,bpd\n");
        for (i, bpd) in report.per_sample.iter().enumerate() {
            csv.push_str(&format!("{i},{bpd:.9}\n"));
        }
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sample(model_path: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    const MAX_RENDERS: usize = 64;
    if n == 0 {
        return Err(Error::Invalid("-n must be at least 1".into()));
    }
    let model = FlowModel::load(model_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<CategoricalGrid> =
        (0..n).map(|_| model.sample(&mut rng)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    let grids_path = out.join("samples.ddfg");
    save_grids(&Dataset::new(samples.clone(), Split::Train)?, &grids_path)?;
    println!("wrote {} ({n} samples)", grids_path.display());
    for (i, s) in samples.iter().take(MAX_RENDERS).enumerate() {
        let (w, h, pixels) = render_grid_gray(s);
        write_ppm_gray(&out.join(format!("sample-{i:03}.ppm")), w, h, &pixels)?;
    }
    let rendered = n.min(MAX_RENDERS);
    println!("wrote {rendered} PPM renders to {}", out.display());
    Ok(())
}

fn compress(model_path: &Path, data_path: &Path, out: &Path, threshold: f64) -> Result<()> {
    let model = FlowModel::load(model_path)?;
    let data = load_data(data_path, threshold, Split::Test)?;
    let bytes = stream_compress(&model, data.items())?;
    std::fs::create_dir_all(out)?;
    let path = out.join("compressed.ddfs");
    std::fs::write(&path, &bytes)?;
    let dims = (data.len() * model.input_dims()) as f64;
    let rate = bytes.len() as f64 * 8.0 / dims;
    let bpd = evaluate_bpd(&model, data.items())?.mean_bpd;
    println!(
        "wrote {} ({} bytes, {:.6} bits/dim incl. container vs model BPD {:.6})",
        path.display(),
        bytes.len(),
        rate,
        bpd
    );
    Ok(())
}

fn decompress(model_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let model = FlowModel::load(model_path)?;
    let bytes = std::fs::read(data_path)?;
    let count = stream_item_count(&model, &bytes)?;
    let items = stream_decompress(&model, &bytes)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("decompressed.ddfg");
    save_grids(&Dataset::new(items, Split::Train)?, &path)?;
    println!("wrote {} ({count} samples)", path.display());
    Ok(())
}

fn verify(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid("-n must be at least 1".into()));
    }
    let suites: Vec<Box<dyn FnOnce() -> Result<check::CheckOutcome> + Send>> = vec![
        Box::new(check::worked_joint_example),
        Box::new(move || check::row_sorting_sweep(10 * n, 51)),
        Box::new(move || check::argsort_matches_oracle(100 * n)),
        Box::new(check::gradients_match_finite_differences),
        Box::new(check::exhaustive_coupling_round_trips),
        Box::new(move || check::randomized_model_round_trips(n)),
        Box::new(move || check::greedy_binary_coupling_never_hurts((n / 5).max(20))),
        Box::new(move || {
            let data = check::synthetic_segmentation(24, 11)?;
            let model = check::segmentation_model(&data, 12)?;
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let samples: Vec<CategoricalGrid> = (0..(n / 4).max(8))
                .map(|_| model.sample(&mut rng))
                .collect::<Result<_>>()?;
            check::codec_suite(&model, &samples)
        }),
    ];
    for suite in suites {
        let outcome = suite()?;
        println!("ok {outcome}");
    }
    println!("all suites passed");
    Ok(())
}

fn plot_density(model_path: &Path, out: &Path) -> Result<()> {
    let model = FlowModel::load(model_path)?;
    let k = model.num_classes() as usize;
    if model.input_shape() != [2] {
        return Err(Error::Shape(format!(
            "density plots need a 2-dimensional flat model, got shape {:?}",
            model.input_shape()
        )));
    }
    // Exhaustive enumeration of all K² inputs through the standard evaluator.
    let grids: Vec<CategoricalGrid> = (0..k * k)
        .map(|i| {
            CategoricalGrid::new(vec![2], k as u32, vec![(i / k) as u16, (i % k) as u16])
        })
        .collect::<Result<_>>()?;
    let report = evaluate_bpd(&model, &grids)?;
    let densities: Vec<f64> =
        report.per_sample.iter().map(|bpd| (-bpd * 2.0).exp2()).collect();
    let total: f64 = densities.iter().sum();
    println!("total probability {total:.9} over {k}x{k} cells");
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "density sums to {total}, expected 1 within 1e-6"
        )));
    }
    let peak = densities.iter().cloned().fold(0.0f64, f64::max);
    let pixels: Vec<u8> = (0..k * k)
        .map(|i| {
            // Row y is the second coordinate, column x the first.
            let (x, y) = (i % k, i / k);
            let p = densities[x * k + y];
            ((p / peak).sqrt() * 255.0).round() as u8
        })
        .collect();
    std::fs::create_dir_all(out)?;
    let path = out.join("density.ppm");
    write_ppm_gray(&path, k, k, &pixels)?;
    println!("wrote {}", path.display());
    Ok(())
}
