use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use image::{GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gfcn::augment::{
    homography_from_corners, image_corners, sample_displacement_grid, sample_projective_corners, sign_flip,
    warp_elastic, warp_projective, AugmentConfig,
};
use gfcn::checkpoint::{load_checkpoint, save_checkpoint};
use gfcn::config::{parse_synthetic_config, RunConfig};
use gfcn::ctc::beam_search;
use gfcn::data::{load_and_preprocess, load_image, AlphabetCodec, DatasetManifest, Sample};
use gfcn::model::Model;
use gfcn::synth::synth_generate;
use gfcn::train::{evaluate, fit, frame_log_probs, TrainState};
use gfcn::{Error, Result, Tensor};

const CHECKPOINT_FILE: &str = "checkpoint.gfcn";
const METRICS_FILE: &str = "metrics.log";

#[derive(Parser)]
#[command(name = "gfcn", version, about = "Gated fully-convolutional text-line recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and a metrics log to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the averaged model of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam_width: usize,
        #[arg(long, default_value_t = 6)]
        top_n: usize,
    },
    /// Transcribe one line image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam_width: usize,
        #[arg(long, default_value_t = 1)]
        top_n: usize,
    },
    /// Render a synthetic corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an image next to each augmentation applied to it.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            val,
            out,
            resume,
        } => train(&config, &data, &val, &out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            beam_width,
            top_n,
        } => eval(&ckpt, &data, beam_width, top_n),
        Command::Decode {
            ckpt,
            image,
            beam_width,
            top_n,
        } => decode(&ckpt, &image, beam_width, top_n),
        Command::Synth { config, out } => synth(&config, &out),
        Command::AugmentPreview { image, out, seed } => augment_preview(&image, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_split(dir: &Path, codec: &AlphabetCodec, height: usize) -> Result<Vec<Sample<f32>>> {
    let manifest = DatasetManifest::read(dir)?;
    let report = load_and_preprocess(&manifest, codec, height);
    for (id, err) in &report.failures {
        log::warn!("{}: skipping {id}: {err}", dir.display());
    }
    if report.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(report.samples)
}

fn train(config: &Path, data: &Path, val: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let rc = RunConfig::parse(&read_text(config)?)?;
    fs::create_dir_all(out)?;
    let (mut state, codec) = match resume {
        Some(ck) => {
            let snap = load_checkpoint::<f32>(ck)?;
            log::info!("resuming from epoch {} step {}", snap.state.epoch, snap.state.step);
            (snap.state, snap.codec)
        }
        None => {
            let codec = match &rc.alphabet {
                Some(a) => AlphabetCodec::new(a)?,
                None => {
                    let m = DatasetManifest::read(data)?;
                    AlphabetCodec::from_transcripts(m.entries.iter().map(|e| e.transcript.as_str()))?
                }
            };
            let mut mc = rc.model.clone();
            mc.alphabet_size = codec.len();
            let model = Model::<f32>::build(mc, rc.train.seed)?;
            log::info!(
                "model {} with {} parameters, alphabet {:?}",
                model.config.notation(),
                model.parameter_count(),
                codec.symbols()
            );
            (TrainState::new(model, &rc.train), codec)
        }
    };
    let height = state.model.config.input_height;
    let train_set = load_split(data, &codec, height)?;
    let val_set = load_split(val, &codec, height)?;
    let mut log_file = OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let records = fit(&mut state, &train_set, &val_set, &codec, &rc.train, |rec, st| {
        writeln!(log_file, "{}", rec.log_line())?;
        save_checkpoint(&ckpt_path, st, &codec, &rc.train)
    })?;
    if let Some(last) = records.last() {
        println!("{}", last.log_line());
    }
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, beam_width: usize, top_n: usize) -> Result<()> {
    let snap = load_checkpoint::<f32>(ckpt)?;
    let model = snap.state.averaged_model();
    let samples = load_split(data, &snap.codec, model.config.input_height)?;
    let report = evaluate(&model, &samples, &snap.codec, beam_width.max(1), top_n.max(1))?;
    println!("{report}");
    for kv in report.key_values() {
        println!("{kv}");
    }
    Ok(())
}

fn decode(ckpt: &Path, image: &Path, beam_width: usize, top_n: usize) -> Result<()> {
    let snap = load_checkpoint::<f32>(ckpt)?;
    let model = snap.state.averaged_model();
    let img: Tensor<f32> = load_image(image, model.config.input_height)?;
    let lp = frame_log_probs(&model, &img)?;
    for h in beam_search(&lp, beam_width.max(1), top_n.max(1)) {
        println!("{}\t{:.6}", snap.codec.decode(&h.labels), h.score);
    }
    Ok(())
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = parse_synthetic_config(&read_text(config)?)?;
    let manifest = synth_generate(&cfg, out)?;
    println!("wrote {} lines to {}", manifest.entries.len(), out.display());
    Ok(())
}

/// Maps `[lo, hi]` onto 8-bit gray.
fn to_gray(t: &Tensor<f32>, lo: f32, hi: f32) -> GrayImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for (p, &v) in img.pixels_mut().zip(t.data()) {
        *p = Luma([(((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    img
}

fn augment_preview(image: &Path, out: &Path, seed: u64) -> Result<()> {
    let raw = image::open(image).map_err(|e| Error::Image {
        path: image.to_path_buf(),
        detail: e.to_string(),
    })?;
    let height = raw.height() as usize;
    let t: Tensor<f32> = gfcn::data::preprocess(&raw, height)?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = t.reshape(&[h, w, 1])?;
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = sample_projective_corners(w, h, cfg.projective_max_shift, &mut rng);
    let hm = homography_from_corners(&image_corners(w, h), &corners)?;
    let grid = sample_displacement_grid(w, h, cfg.grid_spacing, cfg.elastic_max_disp, &mut rng);
    fs::create_dir_all(out)?;
    let outputs = [
        ("original.png", plane.clone(), 0.0),
        ("projective.png", warp_projective(&plane, &hm)?, 0.0),
        ("elastic.png", warp_elastic(&plane, &grid)?, 0.0),
        ("signflip.png", sign_flip(&plane), -1.0),
    ];
    for (name, img, lo) in outputs {
        let path = out.join(name);
        to_gray(&img, lo, lo + 1.0).save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        println!("{}", path.display());
    }
    Ok(())
}
