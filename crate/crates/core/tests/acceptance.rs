//! Acceptance run. Prints one PASS/FAIL line per criterion on stdout and
//! exits non-zero if any criterion fails. Progress goes to stderr.
//!
//! Criteria 5 to 7 share the reference models: three baseline, three
//! Frame-Zero and three Clip-Zero trainings on the reference synthetic data.

use std::collections::HashSet;
use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use modaldrop_core::augment::{apply_one, AblationSpec, Modality, Strategy};
use modaldrop_core::data::{
    eval_windows, generate_synthetic, read_dataset, resample_audio, stack_context, window_plan, write_dataset,
    ClipRecord, DataError, Dataset, Sample, SyntheticConfig, WindowMode, CONTEXT_FRAMES,
};
use modaldrop_core::harness::{gradcheck, prepare, sweep, sweep_csv, train, PreparedData, RunConfig, TrainOutcome};
use modaldrop_core::metrics::ccc;
use modaldrop_core::model::{predict, read_checkpoint, write_checkpoint, CheckpointError};
use modaldrop_core::rng::stream;
use modaldrop_core::Tensor;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Evaluation corruption seed, shared by every model so comparisons see the
/// same corrupted inputs.
const SWEEP_SEED: u64 = 0;

/// Outcome of one criterion: whether it holds and a one-line account.
type Verdict = Result<(bool, String), String>;

fn reference_config() -> RunConfig {
    let mut c = RunConfig {
        data: SyntheticConfig {
            n_clips: 200,
            clip_seconds: 30,
            d_audio_lld: 16,
            d_video: 32,
            ..SyntheticConfig::default()
        },
        ..RunConfig::default()
    };
    c.model.num_layers = 2;
    c.model.d_model = 32;
    c.model.num_heads = 4;
    c.train.epochs = 10;
    c.splits.train = 0.6;
    c.splits.val = 0.2;
    c
}

fn with_ablation(base: &RunConfig, strategy: Strategy, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.train.seed = seed;
    if strategy != Strategy::None {
        c.ablation = AblationSpec {
            strategy,
            modality: Modality::Video,
            probability: 0.5,
            seed: 0,
        };
    }
    c
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

/// Reference data and models, built as the criteria need them.
struct Reference {
    config: RunConfig,
    dataset: Dataset,
    data: PreparedData,
    baseline: Vec<TrainOutcome>,
}

fn train_models(reference: &Reference, strategy: Strategy) -> Result<Vec<TrainOutcome>, String> {
    SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let out =
                train(&with_ablation(&reference.config, strategy, seed), &reference.data).map_err(|e| e.to_string())?;
            progress(&format!(
                "trained {strategy} seed {seed} in {:.0} s (best epoch {})",
                start.elapsed().as_secs_f64(),
                out.best_epoch
            ));
            Ok(out)
        })
        .collect()
}

/// Mean over models of the mean CCC at each probability of `probs`.
fn mean_sweep(models: &[TrainOutcome], val: &[Sample], strategy: Strategy, probs: &[f64]) -> Result<Vec<f64>, String> {
    let mut totals = vec![0.0; probs.len()];
    for m in models {
        let rows =
            sweep(&m.params, &m.model, val, strategy, Modality::Video, probs, SWEEP_SEED).map_err(|e| e.to_string())?;
        for (t, r) in totals.iter_mut().zip(&rows) {
            *t += r.mean_ccc() / models.len() as f64;
        }
    }
    Ok(totals)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let report = gradcheck(0, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    Ok((
        report.passed() && took < Duration::from_secs(30),
        format!(
            "gradient check: worst relative error {:.2e} at {} (< 1e-4), {:.1} s (< 30 s)",
            report.worst_error,
            report.worst_param,
            took.as_secs_f64()
        ),
    ))
}

/// Population moments written out directly, independent of the crate.
fn brute_force(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (vx, vy, cov) = (sxx / n, syy / n, sxy / n);
    let pearson = cov / (vx * vy).sqrt();
    let concordance = 2.0 * cov / (vx + vy + (mx - my) * (mx - my));
    (concordance, pearson)
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let c = |x: &[f64], y: &[f64]| ccc(x, y).map_err(|e| e.to_string());
    let x = [0.3, -1.2, 2.5, 0.0, 0.7];
    let identity = c(&x, &x)?;
    let zero_cov = c(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, -1.0, 1.0])?;
    let shifted = c(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0])?;
    let mut ok = (identity - 1.0).abs() < 1e-12 && zero_cov.abs() < 1e-12 && (shifted - 4.0 / 7.0).abs() < 1e-12;

    let mut rng = stream(42, 0);
    let mut worst_oracle: f64 = 0.0;
    let mut bound_held = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shift = rng.random_range(-1.0..1.0);
        let scale = rng.random_range(0.2..2.0);
        let y: Vec<f64> = x
            .iter()
            .map(|v| scale * v + shift + rng.random_range(-2.0..2.0))
            .collect();
        let got = c(&x, &y)?;
        let (want, pearson) = brute_force(&x, &y);
        worst_oracle = worst_oracle.max((got - want).abs());
        bound_held &= got.abs() <= pearson.abs() + 1e-12;
    }
    ok &= worst_oracle < 1e-12 && bound_held;
    let took = start.elapsed();
    Ok((
        ok && took < Duration::from_secs(5),
        format!(
            "CCC oracles: ccc(x,x)={identity}, zero covariance {zero_cov:.1e}, [1,2,3] vs [2,3,4] = {shifted:.15} (4/7), \
             1000 random pairs within {worst_oracle:.1e} of brute force, |ccc| <= |pearson| {}, {:.2} s (< 5 s)",
            if bound_held { "held" } else { "violated" },
            took.as_secs_f64()
        ),
    ))
}

/// Sample whose video frames are all distinct and non-zero, so every
/// corrupted frame shows up as a changed row.
fn marker_sample(frames: usize) -> Sample {
    let video = Tensor::matrix(frames, 1, (1..=frames).map(|v| v as f64).collect()).unwrap();
    Sample {
        audio: video.clone(),
        video,
        labels: Tensor::zeros(&[frames, 2]),
    }
}

fn changed_rows(before: &Tensor, after: &Tensor) -> usize {
    (0..before.rows()).filter(|&i| before.row(i) != after.row(i)).count()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let single = marker_sample(1);
    let clip = marker_sample(100);
    let draws = 100_000;
    for strategy in [Strategy::ClipZero, Strategy::FrameZero, Strategy::FrameRepeat] {
        for p in [0.3, 0.5, 0.9] {
            let spec = AblationSpec {
                strategy,
                modality: Modality::Video,
                probability: p,
                seed: 17,
            };
            let selected = if strategy == Strategy::ClipZero {
                (0..draws)
                    .filter(|&i| apply_one(&spec, i, &single).video != single.video)
                    .count()
            } else {
                (0..draws / 100)
                    .map(|i| changed_rows(&clip.video, &apply_one(&spec, i, &clip).video))
                    .sum()
            };
            let rate = selected as f64 / draws as f64;
            worst = worst.max((rate - p).abs());
        }
        let at = |p: f64| AblationSpec {
            strategy,
            modality: Modality::Video,
            probability: p,
            seed: 5,
        };
        for i in 0..100 {
            let kept = apply_one(&at(0.0), i, &clip);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ok &= bits(&kept.video) == bits(&clip.video) && bits(&kept.audio) == bits(&clip.audio);
            ok &= apply_one(&at(1.0), i, &clip).video.data().iter().all(|&v| v == 0.0);
        }
    }
    ok &= worst <= 0.01;
    let took = start.elapsed();
    Ok((
        ok && took < Duration::from_secs(10),
        format!(
            "augmenter: selection rates within {worst:.4} of p over 1e5 draws (<= 0.01), p=0 bit-identical, \
             p=1 all zero, {:.2} s (< 10 s)",
            took.as_secs_f64()
        ),
    ))
}

fn criterion_4() -> Verdict {
    let audio = Tensor::matrix(330, 1, (0..330).map(|v| v as f64).collect()).unwrap();
    let resampled = resample_audio(&audio).map_err(|e| e.to_string())?;
    let indices_ok =
        resampled.rows() == 99 && (0..99).all(|i| resampled.row(i)[0] == ((i as f64) * 10.0 / 3.0).round());
    let stacked = stack_context(&Tensor::zeros(&[5, 65]), CONTEXT_FRAMES);
    let width_ok = stacked.cols() == 3900;

    let mut coverage_ok = true;
    let mut notes = Vec::new();
    for len in [99, 100, 250, 300] {
        let spans = window_plan(len, 100, WindowMode::Eval);
        let mut scored = Vec::new();
        for s in &spans {
            scored.extend(s.start + s.score_from..s.start + 100);
        }
        let unique: HashSet<usize> = scored.iter().copied().collect();
        let once = unique.len() == scored.len();
        let complete = if len < 100 {
            spans.is_empty()
        } else {
            unique == (0..len).collect()
        };
        coverage_ok &= once && complete;
        notes.push(format!("{len}:{}w", spans.len()));
    }
    Ok((
        indices_ok && width_ok && coverage_ok,
        format!(
            "sync: 330 -> {} frames at round(i*10/3), D=65 stacks to {} dims, eval windows {} score every frame once \
             (the 99-frame clip is shorter than a window and is skipped)",
            resampled.rows(),
            stacked.cols(),
            notes.join(" ")
        ),
    ))
}

fn criterion_5(reference: &mut Option<Reference>, started: Instant) -> Verdict {
    let r = reference.as_ref().expect("reference built");
    let frame_zero = train_models(r, Strategy::FrameZero)?;
    let probs = [0.95, 0.0];
    let base = mean_sweep(&r.baseline, &r.data.val, Strategy::FrameZero, &probs)?;
    let fz = mean_sweep(&frame_zero, &r.data.val, Strategy::FrameZero, &probs)?;
    let took = started.elapsed();
    let gain = fz[0] - base[0];
    let gap = (fz[1] - base[1]).abs();
    Ok((
        gain >= 0.05 && gap <= 0.10 && took < Duration::from_secs(15 * 60),
        format!(
            "Frame-Zero trend: at p=0.95 frame_zero {:.4} vs baseline {:.4} (gain {gain:.4} >= 0.05), \
             at p=0 {:.4} vs {:.4} (gap {gap:.4} <= 0.10), mean over 3 seeds, {:.0} s (< 900 s)",
            fz[0],
            base[0],
            fz[1],
            base[1],
            took.as_secs_f64()
        ),
    ))
}

fn criterion_6(reference: &Reference) -> Verdict {
    let clip_zero = train_models(reference, Strategy::ClipZero)?;
    let probs = [0.0, 1.0];
    let base = mean_sweep(&reference.baseline, &reference.data.val, Strategy::ClipZero, &probs)?;
    let cz = mean_sweep(&clip_zero, &reference.data.val, Strategy::ClipZero, &probs)?;
    let drop = 1.0 - base[1] / base[0];
    let retained = cz[1] / cz[0];
    Ok((
        drop >= 0.5 && retained >= 0.5,
        format!(
            "Clip-Zero collapse: baseline {:.4} -> {:.4} at p=1 (drop {:.0}% >= 50%), clip_zero model {:.4} -> {:.4} \
             (retains {:.0}% >= 50%), mean over 3 seeds",
            base[0],
            base[1],
            drop * 100.0,
            cz[0],
            cz[1],
            retained * 100.0
        ),
    ))
}

/// Per-window predictions under `spec`, as raw bit patterns.
fn prediction_bits(model: &TrainOutcome, val: &[Sample], spec: &AblationSpec) -> Result<Vec<u64>, String> {
    let mut bits = Vec::new();
    for (i, w) in eval_windows(val, model.model.seq_len).iter().enumerate() {
        let s = apply_one(spec, i, &w.sample);
        let out = predict(&model.params, &model.model, &s.audio, &s.video).map_err(|e| e.to_string())?;
        bits.extend(out.data().iter().map(|v| v.to_bits()));
    }
    Ok(bits)
}

fn criterion_7(reference: &Reference) -> Verdict {
    let donor = generate_synthetic(&SyntheticConfig {
        seed: reference.config.data.seed + 1000,
        ..reference.config.data.clone()
    })
    .map_err(|e| e.to_string())?;
    let mut other = reference.dataset.clone();
    for (clip, d) in other.clips.iter_mut().zip(&donor.clips) {
        clip.video = d.video.clone();
    }
    let differs = other
        .clips
        .iter()
        .zip(&reference.dataset.clips)
        .all(|(a, b)| a.video != b.video && a.audio == b.audio);
    let other_val = prepare(&other, &reference.config).map_err(|e| e.to_string())?.val;

    let spec = AblationSpec {
        strategy: Strategy::ClipZero,
        modality: Modality::Video,
        probability: 1.0,
        seed: SWEEP_SEED,
    };
    let model = &reference.baseline[0];
    let a = prediction_bits(model, &reference.data.val, &spec)?;
    let b = prediction_bits(model, &other_val, &spec)?;
    let plain_differs = prediction_bits(model, &reference.data.val, &AblationSpec::none())?
        != prediction_bits(model, &other_val, &AblationSpec::none())?;
    Ok((
        differs && a == b && plain_differs,
        format!(
            "zero-modality invariance: {} predictions bit-identical across datasets differing only in video under \
             video Clip-Zero p=1 (and different without it: {plain_differs})",
            a.len()
        ),
    ))
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.num_layers = 1;
    c.model.d_model = 8;
    c.model.num_heads = 2;
    c.model.ffn_mult = 2;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.train.seq_len = 30;
    c.data = SyntheticConfig {
        n_clips: 8,
        clip_seconds: 4,
        d_audio_lld: 3,
        d_video: 4,
        seed: 9,
        ..SyntheticConfig::default()
    };
    c.splits.train = 0.5;
    c.splits.val = 0.5;
    c
}

fn round_clip(c: &ClipRecord) -> ClipRecord {
    let r = |t: &Tensor| t.map(|v| v as f32 as f64);
    ClipRecord {
        audio: r(&c.audio),
        video: r(&c.video),
        labels: r(&c.labels),
        ..c.clone()
    }
}

fn criterion_8(reference: &Reference) -> Verdict {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    // Datasets.
    let bytes = write_dataset(&reference.dataset).map_err(|e| err(&e))?;
    let again =
        write_dataset(&generate_synthetic(&reference.config.data).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    checks.push(("dataset bytes reproducible", bytes == again));
    let loaded = read_dataset(&bytes).map_err(|e| err(&e))?;
    let rounded: Vec<ClipRecord> = reference.dataset.clips.iter().map(round_clip).collect();
    checks.push((
        "dataset round trip exact",
        loaded.clips == rounded && write_dataset(&loaded).ok() == Some(bytes.clone()),
    ));
    let empty = write_dataset(&Dataset { clips: Vec::new() }).map_err(|e| err(&e))?;
    checks.push((
        "empty dataset loads",
        read_dataset(&empty).map(|d| d.is_empty()).unwrap_or(false),
    ));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    checks.push((
        "dataset bad magic",
        matches!(read_dataset(&bad), Err(DataError::BadMagic)),
    ));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    checks.push((
        "dataset version",
        matches!(read_dataset(&bad), Err(DataError::VersionMismatch(2))),
    ));
    checks.push((
        "dataset truncated",
        matches!(read_dataset(&bytes[..bytes.len() - 3]), Err(DataError::Truncated)),
    ));
    let small = generate_synthetic(&small_config().data).map_err(|e| err(&e))?;
    let mut bad = write_dataset(&small).map_err(|e| err(&e))?;
    let n = bad.len();
    bad[n - 4..].copy_from_slice(&1.5f32.to_le_bytes());
    let last_id = small.clips.last().map(|c| c.id).unwrap_or(0);
    checks.push((
        "dataset label 1.5 names clip",
        matches!(read_dataset(&bad), Err(DataError::LabelOutOfRange { clip_id, .. }) if clip_id == last_id),
    ));

    // Checkpoints and sweep CSVs from a small model.
    let config = small_config();
    let data = prepare(&small, &config).map_err(|e| err(&e))?;
    let first = train(&config, &data).map_err(|e| err(&e))?;
    let second = train(&config, &data).map_err(|e| err(&e))?;
    let ck = write_checkpoint(&first.params, &first.model).map_err(|e| err(&e))?;
    checks.push((
        "checkpoint bytes reproducible",
        write_checkpoint(&second.params, &second.model).ok() == Some(ck.clone()),
    ));
    let (params, model) = read_checkpoint(&ck).map_err(|e| err(&e))?;
    checks.push((
        "checkpoint round trip exact",
        params == first.params.round_to_f32() && model == first.model,
    ));
    let grid = Strategy::FrameRepeat.default_grid();
    let csv = |m: &TrainOutcome| {
        sweep(
            &m.params,
            &m.model,
            &data.val,
            Strategy::FrameRepeat,
            Modality::Video,
            &grid,
            3,
        )
        .map(|r| sweep_csv(&r))
    };
    checks.push((
        "sweep CSV reproducible",
        csv(&first).map_err(|e| err(&e))? == csv(&second).map_err(|e| err(&e))?,
    ));

    let mut bad = ck.clone();
    bad[1] = b'Z';
    checks.push((
        "checkpoint bad magic",
        matches!(read_checkpoint(&bad), Err(CheckpointError::BadMagic)),
    ));
    let mut bad = ck.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    checks.push((
        "checkpoint version",
        matches!(read_checkpoint(&bad), Err(CheckpointError::VersionMismatch(7))),
    ));
    checks.push((
        "checkpoint truncated",
        matches!(read_checkpoint(&ck[..ck.len() - 5]), Err(CheckpointError::Truncated)),
    ));
    let needle = format!("\"d_video\":{}", first.model.d_video).into_bytes();
    let patched = format!("\"d_video\":{}", first.model.d_video + 1).into_bytes();
    let mut bad = ck.clone();
    let checked = match bad.windows(needle.len()).position(|w| w == needle.as_slice()) {
        Some(at) if needle.len() == patched.len() => {
            bad[at..at + patched.len()].copy_from_slice(&patched);
            matches!(read_checkpoint(&bad), Err(CheckpointError::ShapeInconsistency(_)))
        }
        _ => false,
    };
    checks.push(("checkpoint shape inconsistency", checked));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect();
    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            format!("determinism and formats: all {} checks hold", checks.len())
        } else {
            format!("determinism and formats: failed {}", failed.join(", "))
        },
    ))
}

fn report(id: u8, verdict: Verdict, all_passed: &mut bool) {
    let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    *all_passed &= pass;
    println!("criterion {id} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().flush().ok();
}

fn build_reference() -> Result<Reference, String> {
    let config = reference_config();
    let dataset = generate_synthetic(&config.data).map_err(|e| e.to_string())?;
    let data = prepare(&dataset, &config).map_err(|e| e.to_string())?;
    progress(&format!(
        "reference data: {} training sequences, {} validation clips",
        data.train.len(),
        data.val.len()
    ));
    let mut reference = Reference {
        config,
        dataset,
        data,
        baseline: Vec::new(),
    };
    reference.baseline = train_models(&reference, Strategy::None)?;
    Ok(reference)
}

fn main() -> ExitCode {
    let mut all_passed = true;
    report(1, criterion_1(), &mut all_passed);
    report(2, criterion_2(), &mut all_passed);
    report(3, criterion_3(), &mut all_passed);
    report(4, criterion_4(), &mut all_passed);

    // Criterion 5's budget covers data synthesis and every training and
    // sweep it needs, baseline included.
    let started = Instant::now();
    let mut reference = None;
    let built = build_reference().map(|r| reference = Some(r));
    match built {
        Ok(()) => {
            report(5, criterion_5(&mut reference, started), &mut all_passed);
            let r = reference.as_ref().expect("reference built");
            report(6, criterion_6(r), &mut all_passed);
            report(7, criterion_7(r), &mut all_passed);
            report(8, criterion_8(r), &mut all_passed);
        }
        Err(e) => {
            for id in 5..=8 {
                report(id, Err(format!("reference training failed: {e}")), &mut all_passed);
            }
        }
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
