//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a hard criterion fails. Soft criteria are reported only.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{layers, rng};
use gfcn::augment::{
    draw_augmentation, image_corners, sample_displacement_grid, sign_flip, warp_elastic, AugmentConfig, Axis,
    corners_valid,
};
use gfcn::checkpoint::{load_checkpoint, save_checkpoint};
use gfcn::ctc::{beam_search, brute_force_ctc, ctc_loss, greedy_decode, FrameLogProbs, LabelSeq};
use gfcn::data::{AlphabetCodec, Sample};
use gfcn::model::{GateVariant, Model, ModelConfig};
use gfcn::optim::LrSchedule;
use gfcn::synth::{render_line, synth_samples, SyntheticConfig};
use gfcn::train::{evaluate, fit, train_epoch, train_step, TrainConfig, TrainState};
use gfcn::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CTC_TOL: f64 = 1e-9;
const DISTRIBUTION_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-12;
const SCHEDULE_TOL: f64 = 1e-12;
const RESUME_TOL: f64 = 1e-6;
const DESK_TARGET_CER: f64 = 0.05;
const DESK_MAX_EPOCHS: usize = 30;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const PARAM_RANGE: (usize, usize) = (600_000, 1_200_000);

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, soft: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let kind = if soft { " (soft)" } else { "" };
        println!("{verdict} {name}{kind}: {detail}");
        if !pass && !soft {
            self.hard_failures += 1;
        }
    }
}

fn log_softmax(frames: usize, classes: usize, logits: &[f64]) -> FrameLogProbs {
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    FrameLogProbs::new(frames, classes, data).unwrap()
}

fn random_frames(r: &mut ChaCha8Rng, frames: usize, classes: usize, peak: f64) -> FrameLogProbs {
    let mut logits: Vec<f64> = (0..frames * classes).map(|_| r.random_range(-2.0..2.0)).collect();
    if peak > 0.0 {
        for row in logits.chunks_mut(classes) {
            row[r.random_range(0..classes)] += peak;
        }
    }
    log_softmax(frames, classes, &logits)
}

fn ctc_vs_enumeration(rep: &mut Report) {
    let start = Instant::now();
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let frames = r.random_range(1..=6);
        let alphabet = r.random_range(1..=3);
        let lp = random_frames(&mut r, frames, alphabet + 1, 0.0);
        let len = r.random_range(0..=frames);
        let target = LabelSeq::new((0..len).map(|_| r.random_range(0..alphabet)).collect());
        if target.min_frames() > frames {
            continue;
        }
        let (loss, _) = ctc_loss(&lp, &target).unwrap();
        let oracle = brute_force_ctc(&lp, &target).unwrap();
        worst = worst.max((loss - oracle).abs());
        cases += 1;
    }
    let t = start.elapsed();
    rep.line(
        "ctc loss matches path enumeration",
        worst <= CTC_TOL && t < Duration::from_secs(60),
        false,
        format!("100 cases, max |diff| {worst:.2e} (tol {CTC_TOL:e}), {t:.2?}"),
    );
}

fn all_sequences(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<usize>> = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| {
                (0..symbols).map(move |k| {
                    let mut v = s.clone();
                    v.push(k);
                    v
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ctc_distribution(rep: &mut Report) {
    let mut r = rng(101);
    let lp = random_frames(&mut r, 4, 3, 0.0);
    let total: f64 = all_sequences(2, 4)
        .into_iter()
        .map(LabelSeq::new)
        .filter(|s| s.min_frames() <= 4)
        .map(|s| (-ctc_loss(&lp, &s).unwrap().0).exp())
        .sum();
    rep.line(
        "ctc probabilities sum to one",
        (total - 1.0).abs() <= DISTRIBUTION_TOL,
        false,
        format!("T=4, A=2: sum {total:.12}"),
    );
}

fn gradient_suite(rep: &mut Report) {
    let start = Instant::now();
    let mut errors = layers::full_model_errors();
    errors.extend(layers::gate_block_errors());
    errors.extend(layers::stem_and_head_errors());
    let (worst_name, worst) = errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let t = start.elapsed();
    rep.line(
        "finite-difference gradients",
        worst <= GRADIENT_TOL && t < Duration::from_secs(300),
        false,
        format!("{} tensors, worst {worst:.2e} at {worst_name} (tol {GRADIENT_TOL:e}), {t:.2?}", errors.len()),
    );
}

fn gate_identity(rep: &mut Report) {
    let mut model = Model::<f64>::build(ModelConfig::from_notation("2(8)", 3).unwrap(), 1).unwrap();
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.starts_with("block0/")) {
        if name.ends_with("/bias") || name.ends_with("/beta") {
            let id = model.store.find(name).unwrap();
            model.store.get_mut(id).data_mut().fill(0.0);
        }
        if let Some(rest) = name.strip_prefix("block0/h2/") {
            let value = model.store.get(model.store.find(&format!("block0/h1/{rest}")).unwrap()).clone();
            let dst = model.store.find(name).unwrap();
            *model.store.get_mut(dst) = value;
        }
    }
    let mut r = rng(102);
    let y = common::random_tensor(&mut r, &[2, 4, 9, 8], -2.0, 2.0);
    let mut dev: f64 = 0.0;
    for training in [false, true] {
        let mut f = model.begin(training, false, 0);
        let x = f.graph.input(y.clone());
        let out = model.gate_block_forward(&mut f, 0, x).unwrap();
        dev = dev.max(f.graph.value(out).max_abs_diff(&y));
    }
    rep.line(
        "tied gate block is the identity",
        dev <= IDENTITY_TOL,
        false,
        format!("max deviation {dev:.2e} (tol {IDENTITY_TOL:e})"),
    );
}

struct DeskRun {
    seed: u64,
    epochs: usize,
    cer: f64,
    seconds: f64,
    state: TrainState<f32>,
}

struct Desk {
    codec: AlphabetCodec,
    val: Vec<Sample<f32>>,
}

fn desk_corpus(seed: u64, count: usize, offset: u64, codec: &AlphabetCodec) -> Vec<Sample<f32>> {
    let config = SyntheticConfig {
        count,
        seed: offset + seed,
        ..Default::default()
    };
    synth_samples(&config, codec, 32).unwrap()
}

fn desk_config(seed: u64, epochs: usize, target: Option<f64>) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 16,
        epochs,
        augment: AugmentConfig::disabled(),
        seed,
        target_cer: target,
        polyak_decay: 0.99,
        ..Default::default()
    };
    cfg.schedule.decay_horizon = 3750.0;
    cfg
}

fn desk_train(desk: &Desk, seed: u64, variant: GateVariant, cfg: &TrainConfig) -> DeskRun {
    let train = desk_corpus(seed, 2000, 1000, &desk.codec);
    let mut mc = ModelConfig::from_notation("2(16)", desk.codec.len()).unwrap();
    mc.gate_variant = variant;
    let mut state = TrainState::new(Model::build(mc, seed).unwrap(), cfg);
    let start = Instant::now();
    let val = desk_corpus(seed, 200, 5000, &desk.codec);
    let records = fit(&mut state, &train, &val, &desk.codec, cfg, |_, _| Ok(())).unwrap();
    let last = records.last().unwrap();
    DeskRun {
        seed,
        epochs: records.len(),
        cer: last.val_cer.unwrap(),
        seconds: start.elapsed().as_secs_f64(),
        state,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn desk_scale(rep: &mut Report, desk: &Desk) -> Vec<DeskRun> {
    let runs: Vec<DeskRun> = DESK_SEEDS
        .iter()
        .map(|&seed| {
            let run = desk_train(desk, seed, GateVariant::Baseline, &desk_config(seed, DESK_MAX_EPOCHS, Some(DESK_TARGET_CER)));
            println!(
                "  baseline seed {}: val cer {:.4} after {} epochs, {:.0} s",
                run.seed, run.cer, run.epochs, run.seconds
            );
            run
        })
        .collect();
    let med = median(runs.iter().map(|r| r.cer).collect());
    let total: f64 = runs.iter().map(|r| r.seconds).sum();
    let threads = rayon::current_num_threads();
    rep.line(
        "desk-scale recognition",
        med <= DESK_TARGET_CER && total < 1800.0,
        false,
        format!(
            "median val cer {med:.4} (target {DESK_TARGET_CER}) within {DESK_MAX_EPOCHS} epochs, {total:.0} s on {threads} thread(s)"
        ),
    );
    runs
}

fn ablation(rep: &mut Report, desk: &Desk, baseline: &[DeskRun]) {
    let plain: Vec<f64> = baseline
        .iter()
        .map(|b| {
            let run = desk_train(desk, b.seed, GateVariant::Plain, &desk_config(b.seed, b.epochs, None));
            println!("  plain seed {}: val cer {:.4} after {} epochs", run.seed, run.cer, run.epochs);
            run.cer
        })
        .collect();
    let base = median(baseline.iter().map(|r| r.cer).collect());
    let plain = median(plain);
    rep.line(
        "gating beats the plain stack",
        base <= plain,
        true,
        format!("median val cer baseline {base:.4} vs plain {plain:.4} at equal epochs"),
    );
}

fn schedule_endpoints(rep: &mut Report) {
    let s = LrSchedule::default();
    let (a, b) = (s.lr_at(0), s.lr_at(90_000));
    rep.line(
        "learning-rate schedule endpoints",
        (a - 5e-3).abs() <= SCHEDULE_TOL && (b - 5e-4).abs() <= SCHEDULE_TOL,
        false,
        format!("lr(0) = {a:e}, lr(90000) = {b:e}"),
    );
}

fn decoding(rep: &mut Report, desk: &Desk, runs: &[DeskRun]) {
    let mut r = rng(103);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let frames = r.random_range(1..=30);
        let classes = r.random_range(2..=6);
        let lp = random_frames(&mut r, frames, classes, 8.0);
        if beam_search(&lp, 1, 1)[0].labels != greedy_decode(&lp) {
            mismatches += 1;
        }
    }
    rep.line(
        "beam width 1 equals greedy",
        mismatches == 0,
        false,
        format!("{mismatches} mismatches over 1000 peaked inputs"),
    );

    let mut monotone = true;
    let mut curves = Vec::new();
    for run in runs {
        let report = evaluate(&run.state.averaged_model(), &desk.val, &desk.codec, 10, 10).unwrap();
        monotone &= report.cer_at_top_n.windows(2).all(|w| w[1] <= w[0]);
        curves.push(format!("{:.4}..{:.4}", report.cer_at_top_n[0], report.cer_at_top_n[9]));
    }
    rep.line(
        "cer@topN non-increasing",
        monotone,
        false,
        format!("beam 10, N = 1..10 on {} trained models: {}", runs.len(), curves.join(", ")),
    );
}

fn augmentation(rep: &mut Report) {
    let config = AugmentConfig {
        p_projective: 1.0,
        p_elastic: 1.0,
        p_signflip: 0.5,
        ..Default::default()
    };
    let (w, h) = (160, 32);
    let src = image_corners(w, h);
    let mut r = rng(104);
    let mut violations = 0;
    for _ in 0..10_000 {
        let d = draw_augmentation(w, h, &config, &mut r).unwrap();
        let hm = d.homography.unwrap();
        let dst = src.map(|p| hm.apply(p));
        let moved_x = src.iter().zip(&dst).any(|(s, d)| (s.0 - d.0).abs() > 1e-6);
        let moved_y = src.iter().zip(&dst).any(|(s, d)| (s.1 - d.1).abs() > 1e-6);
        let g = d.grid.unwrap();
        if !corners_valid(&src, &dst) || (moved_x && moved_y) || g.min_cell_extent() < 1.0 {
            violations += 1;
        }
    }

    let img = common::random_tensor(&mut r, &[h, w, 1], -1.0, 1.0);
    let involution = sign_flip(&sign_flip(&img)) == img;

    // A warp along one axis leaves images that vary only along the other unchanged.
    let rows: Tensor<f64> = Tensor::from_vec(&[h, w, 1], (0..h * w).map(|i| (i / w) as f64).collect()).unwrap();
    let cols: Tensor<f64> = Tensor::from_vec(&[h, w, 1], (0..h * w).map(|i| (i % w) as f64).collect()).unwrap();
    let mut single_axis = true;
    for _ in 0..200 {
        let g = sample_displacement_grid(w, h, config.grid_spacing, config.elastic_max_disp, &mut r);
        let fixed = if g.axis == Axis::X { &rows } else { &cols };
        single_axis &= warp_elastic(fixed, &g).unwrap().max_abs_diff(fixed) < 1e-12;
    }
    rep.line(
        "augmentation constraints",
        violations == 0 && involution && single_axis,
        false,
        format!("{violations} violating draws of 10000, sign flip involution {involution}, single-axis {single_axis}"),
    );
}

fn serialization(rep: &mut Report) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (exact, diff) = pool.install(|| {
        let codec = AlphabetCodec::new("0123").unwrap();
        let synth = SyntheticConfig {
            alphabet: "0123".into(),
            glyph_scale: 1,
            height: 16,
            count: 12,
            seed: 7,
            ..Default::default()
        };
        let samples = synth_samples::<f32>(&synth, &codec, 16).unwrap();
        let mut mc = ModelConfig::from_notation("2(8)", 4).unwrap();
        mc.input_height = 16;
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 7,
            ..Default::default()
        };
        let mut st = TrainState::new(Model::build(mc, 7).unwrap(), &cfg);
        train_epoch(&mut st, &samples, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gfcn");
        save_checkpoint(&path, &st, &codec, &cfg).unwrap();
        let mut resumed = load_checkpoint::<f32>(&path).unwrap().state;
        let exact = st
            .model
            .store
            .iter()
            .zip(resumed.model.store.iter())
            .all(|((_, a), (_, b))| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
            && st.polyak.shadow == resumed.polyak.shadow
            && st.adam.state.m == resumed.adam.state.m
            && st.adam.state.v == resumed.adam.state.v;
        let batch: Vec<&Sample<f32>> = samples.iter().take(4).collect();
        let a = train_step(&mut st, &batch, &cfg).unwrap().loss;
        let b = train_step(&mut resumed, &batch, &cfg).unwrap().loss;
        (exact, (a - b).abs())
    });
    rep.line(
        "checkpoint round trip and resume",
        exact && diff <= RESUME_TOL,
        false,
        format!("bit-exact {exact}, next-step loss diff {diff:.2e} (tol {RESUME_TOL:e}) on 1 thread"),
    );
}

fn parameter_count(rep: &mut Report) {
    let m = Model::<f32>::build(ModelConfig::from_notation("4(128,512)", 10).unwrap(), 0).unwrap();
    let n = m.parameter_count();
    rep.line(
        "parameter count of 4(128,512)",
        (PARAM_RANGE.0..=PARAM_RANGE.1).contains(&n),
        true,
        format!("{n} parameters with an 11-class head, expected within [{}, {}]", PARAM_RANGE.0, PARAM_RANGE.1),
    );
}

fn cli_decode(rep: &mut Report, desk: &Desk, run: &DeskRun, cfg: &TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("desk.gfcn");
    save_checkpoint(&ckpt, &run.state, &desk.codec, cfg).unwrap();
    let image = dir.path().join("3157.png");
    render_line("3157", &SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(3157))
        .unwrap()
        .save(&image)
        .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gfcn"))
        .args(["decode", "--ckpt", arg(&ckpt), "--image", arg(&image)])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let best = text.lines().next().and_then(|l| l.split('\t').next()).unwrap_or("").to_string();
    rep.line(
        "cli decodes a rendered 3157",
        out.status.success() && best == "3157",
        false,
        format!("decoded {best:?} with the seed-{} desk checkpoint", run.seed),
    );
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn main() {
    let start = Instant::now();
    let mut rep = Report { hard_failures: 0 };
    ctc_vs_enumeration(&mut rep);
    ctc_distribution(&mut rep);
    gradient_suite(&mut rep);
    gate_identity(&mut rep);
    schedule_endpoints(&mut rep);
    augmentation(&mut rep);
    serialization(&mut rep);
    parameter_count(&mut rep);

    let codec = AlphabetCodec::new("0123456789").unwrap();
    let desk = Desk {
        val: desk_corpus(0, 200, 5000, &codec),
        codec,
    };
    let runs = desk_scale(&mut rep, &desk);
    decoding(&mut rep, &desk, &runs);
    cli_decode(&mut rep, &desk, &runs[0], &desk_config(0, DESK_MAX_EPOCHS, Some(DESK_TARGET_CER)));
    ablation(&mut rep, &desk, &runs);

    println!("acceptance finished in {:.0?}, {} hard failure(s)", start.elapsed(), rep.hard_failures);
    if rep.hard_failures > 0 {
        std::process::exit(1);
    }
}
