//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::HashMap;
use std::time::Instant;

use machan_core::autodiff::{grad_check, ParamTensors};
use machan_core::data::{
    pool_volumes, pot_features, split_indices, volume_count, ChannelFrames, Dataset, GradPooling, Normalizer,
    RawVideoRecord, SplitSpec, VolumeSequence,
};
use machan_core::evaluation::{evaluate, pearson, LstmModel};
use machan_core::model::{
    forward, forward_on_tape, init_params, FusionMode, HardSelection, ModelConfig, ModelParams,
};
use machan_core::synth::{generate, score_attention, to_dataset, SynthConfig};
use machan_core::training::{train, TrainConfig};
use machan_core::{Channel, PerChannel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_seq(rng: &mut ChaCha8Rng, dims: [usize; 3], t: usize, p_absent: f64) -> VolumeSequence<f64> {
    let steps = (0..t)
        .map(|_| {
            [0, 1, 2].map(|c| {
                (!rng.random_bool(p_absent)).then(|| (0..dims[c]).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
        })
        .collect();
    VolumeSequence::from_steps("s", dims, steps, rng.random_range(-1.0..1.0)).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let dims = [8, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_seq(&mut rng, dims, 5, 0.0);
    let mut worst: f64 = 0.0;
    for fusion in [FusionMode::Soft, FusionMode::Hard] {
        let mut config = ModelConfig::small(dims, 4, 4, 4).with_fusion(fusion);
        config.hard_selection = HardSelection::Surrogate;
        let mut params: ModelParams<f64> = init_params(&config, 3).map_err(|e| e.to_string())?;
        let report = grad_check(
            &mut params,
            |tape, p| {
                let vars = p.register(tape);
                let out = forward_on_tape(tape, &vars, &seq, &config)?;
                let target = tape.input(Tensor::vector(vec![seq.label])?);
                tape.mse(out.y_hat, target)
            },
            1e-5,
            1e-4,
        )
        .map_err(|e| e.to_string())?;
        check(report.params.len() == params.named().len(), "not every parameter was checked")?;
        check(report.passed(), format!("{fusion:?}: max relative error {:.3e}", report.max_rel_err))?;
        worst = worst.max(report.max_rel_err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("max relative error {worst:.2e} (soft, hard surrogate) in {secs:.1}s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = [5, 3, 4];
    let mut max_dev: f64 = 0.0;
    let mut max_masked: f64 = 0.0;
    for seed in 0..40 {
        let fusion = if seed % 2 == 0 { FusionMode::Hard } else { FusionMode::Soft };
        let config = ModelConfig::small(dims, 6, 4, 5).with_fusion(fusion);
        let mut params: ModelParams<f64> = init_params(&config, seed).unwrap();
        // sharpen logits so masking is tested against large values too
        let att = params.attention.as_mut().unwrap();
        att.w_sm = att.w_sm.map(|v| v * 20.0);
        let seq = random_seq(&mut rng, dims, 12, 0.4);
        let pred = forward(&seq, &params, &config).map_err(|e| e.to_string())?;
        for step in pred.trace.steps.iter().filter(|s| !s.is_dropped()) {
            let a = step.attention.ok_or("missing attention")?;
            max_dev = max_dev.max((a.iter().sum::<f64>() - 1.0).abs());
            for (&w, &p) in a.iter().zip(&step.presence) {
                if !p {
                    max_masked = max_masked.max(w);
                }
            }
        }
    }
    check(max_dev <= 1e-12, format!("attention sum off by {max_dev:e}"))?;
    check(max_masked < 1e-30, format!("masked probability {max_masked:e}"))?;

    let labels: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..0.05)).collect();
    let norm = Normalizer::fit(&labels).map_err(|e| e.to_string())?;
    let z: Vec<f64> = labels.iter().map(|&y| norm.apply(y)).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64).sqrt();
    check(mean.abs() <= 1e-9 && (std - 1.0).abs() <= 1e-9, format!("normalized mean {mean:e}, std {std}"))?;
    Ok(format!(
        "sum deviation {max_dev:.1e}, max masked weight {max_masked:.1e}, normalized mean {mean:.1e} std-1 {:.1e}",
        std - 1.0
    ))
}

fn random_record(rng: &mut ChaCha8Rng, frames: usize, dims: [usize; 3]) -> RawVideoRecord {
    let channels = PerChannel::from_fn(|c| ChannelFrames {
        dim: dims[c.index()],
        frames: (0..frames)
            .map(|_| {
                (!rng.random_bool(0.2)).then(|| (0..dims[c.index()]).map(|_| rng.random_range(-3.0..3.0)).collect())
            })
            .collect(),
    });
    RawVideoRecord {
        id: "r".into(),
        likes: 3,
        views: 10,
        fps: 25.0,
        channels,
    }
}

/// Max-pooled volumes recomputed frame by frame.
fn brute_volumes(r: &RawVideoRecord) -> Vec<[Option<Vec<f64>>; 3]> {
    let n = r.frame_count();
    let mut out = Vec::new();
    let mut start = 0;
    while start + 11 <= n {
        let vol = Channel::ALL.map(|c| {
            let ch = &r.channels[c];
            let mut best: Option<Vec<f64>> = None;
            for t in start..start + 11 {
                if let Some(f) = &ch.frames[t] {
                    let b = best.get_or_insert_with(|| vec![f64::NEG_INFINITY; ch.dim]);
                    for k in 0..ch.dim {
                        if f[k] > b[k] {
                            b[k] = f[k];
                        }
                    }
                }
            }
            best
        });
        if vol.iter().any(Option::is_some) {
            out.push(vol);
        }
        start += 4;
    }
    out
}

/// PoT descriptor recomputed window by window from the definition.
fn brute_pot(r: &RawVideoRecord, levels: u32) -> Vec<f64> {
    let n = r.frame_count();
    let mut out = Vec::new();
    for c in Channel::ALL {
        let ch = &r.channels[c];
        for k in 0..ch.dim {
            for level in 0..levels {
                let parts = 2usize.pow(level);
                for w in 0..parts {
                    let lo = w * (n / parts);
                    let hi = if w == parts - 1 { n } else { lo + n / parts };
                    let xs: Vec<f64> = (lo..hi).filter_map(|t| ch.frames[t].as_ref().map(|f| f[k])).collect();
                    if xs.is_empty() {
                        out.extend([0.0; 5]);
                        continue;
                    }
                    let cnt = xs.len() as f64;
                    let mut sum = 0.0;
                    for &x in &xs {
                        sum += x;
                    }
                    let mean = sum / cnt;
                    let mut ss = 0.0;
                    for &x in &xs {
                        ss += (x - mean) * (x - mean);
                    }
                    let mut max = f64::NEG_INFINITY;
                    let (mut up, mut down) = (0.0, 0.0);
                    for i in 0..xs.len() {
                        max = max.max(xs[i]);
                        if i > 0 {
                            let d = xs[i] - xs[i - 1];
                            if d > 0.0 {
                                up += d;
                            } else if d < 0.0 {
                                down += -d;
                            }
                        }
                    }
                    out.extend([mean, (ss / cnt).sqrt(), max, up, down]);
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let frames = rng.random_range(16..90);
        let dims = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let rec = random_record(&mut rng, frames, dims);
        let seq = pool_volumes(&rec, 11, 4).map_err(|e| e.to_string())?;
        let expected = brute_volumes(&rec);
        check(seq.len() == expected.len(), format!("case {case}: volume count"))?;
        for (t, vol) in expected.iter().enumerate() {
            for c in Channel::ALL {
                let got = seq.volume(c, t).map(|v| v.as_slice().to_vec());
                check(got == vol[c.index()], format!("case {case}: volume {t} {c} differs"))?;
            }
        }
        let pot = pot_features(&rec, 5, GradPooling::Sums).map_err(|e| e.to_string())?;
        check(pot.values == brute_pot(&rec, 5), format!("case {case}: PoT differs"))?;
        check(pot.values.len() == dims.iter().sum::<usize>() * 31 * 5, format!("case {case}: PoT length"))?;
    }
    for n in [11usize, 14, 15, 100, 4300] {
        check(volume_count(n, 11, 4) == (n - 11) / 4 + 1, format!("volume count for N = {n}"))?;
    }
    check(volume_count(4300, 11, 4) == 1073, "N = 4300 should give 1073 volumes")?;
    Ok("200 random series match brute force exactly; N = 4300 gives 1073 volumes".into())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        n_videos: 20,
        t_range: (10, 30),
        dims: [8, 4, 4],
        seed: 1,
        ..SynthConfig::default()
    };
    let raw = to_dataset(&generate(&synth).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let norm = Normalizer::fit(&raw.labels()).map_err(|e| e.to_string())?;
    let data = raw.normalized(norm).map_err(|e| e.to_string())?;
    let config = ModelConfig::small([8, 4, 4], 16, 8, 16);
    let tc = TrainConfig {
        epochs: usize::MAX,
        max_updates: Some(2000),
        patience: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let (params, report) = train(&data, &data, &config, &tc).map_err(|e| e.to_string())?;
    let mse = evaluate(&LstmModel { config, params }, &data, "train", "overfit", 4)
        .map_err(|e| e.to_string())?
        .mse;
    let secs = start.elapsed().as_secs_f64();
    check(report.updates <= 2000, "update budget exceeded")?;
    check(mse < 1e-3, format!("train MSE {mse:.3e} after {} updates", report.updates))?;
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("train MSE {mse:.2e} after {} updates in {secs:.1}s", report.updates))
}

/// Channel-switching task: 200 train, 50 val and 50 held-out test videos.
struct Task {
    train: Dataset<f64>,
    val: Dataset<f64>,
    test: Dataset<f64>,
    modes: HashMap<String, Vec<usize>>,
}

fn channel_task(sigma: f64, seed: u64) -> Result<Task, String> {
    let synth = SynthConfig {
        n_videos: 300,
        sigma,
        seed,
        ..SynthConfig::default()
    };
    let videos = generate(&synth).map_err(|e| e.to_string())?;
    let modes = videos.iter().map(|v| (v.record.id.clone(), v.modes.clone())).collect();
    let all = to_dataset(&videos).map_err(|e| e.to_string())?;
    let part = |r: std::ops::Range<usize>| all.select(&r.collect::<Vec<_>>());
    let (train, val, test) = (part(0..200), part(200..250), part(250..300));
    let norm = Normalizer::fit(&train.labels()).map_err(|e| e.to_string())?;
    let n = |d: Dataset<f64>| d.normalized(norm).map_err(|e| e.to_string());
    Ok(Task {
        train: n(train)?,
        val: n(val)?,
        test: n(test)?,
        modes,
    })
}

fn task_config(fusion: FusionMode) -> ModelConfig {
    let mut config = ModelConfig::small([8, 4, 4], 16, 8, 16).with_fusion(fusion);
    config.hard_selection = HardSelection::SoftStraightThrough;
    config
}

fn task_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        patience: 30,
        seed,
        ..TrainConfig::default()
    }
}

fn fit(task: &Task, fusion: FusionMode, seed: u64) -> Result<LstmModel<f64>, String> {
    let config = task_config(fusion);
    let (params, _) = train(&task.train, &task.val, &config, &task_train_config(seed)).map_err(|e| e.to_string())?;
    Ok(LstmModel { config, params })
}

fn recovery(task: &Task, model: &LstmModel<f64>) -> Result<f64, String> {
    let mut total = 0.0;
    for seq in &task.test.sequences {
        let pred = forward(seq, &model.params, &model.config).map_err(|e| e.to_string())?;
        total += score_attention(&pred.trace, &task.modes[&seq.id]).map_err(|e| e.to_string())?;
    }
    Ok(total / task.test.len() as f64)
}

fn criterion_5(noisy_model: &LstmModel<f64>, noisy_task: &Task) -> Outcome {
    let noisy = recovery(noisy_task, noisy_model)?;
    let clean_task = channel_task(0.0, 100)?;
    let clean_model = fit(&clean_task, FusionMode::Hard, 0)?;
    let clean = recovery(&clean_task, &clean_model)?;
    check(noisy >= 0.80, format!("sigma 0.1 recovery {noisy:.3} < 0.80"))?;
    check(clean >= 0.95, format!("sigma 0 recovery {clean:.3} < 0.95"))?;
    Ok(format!("held-out recovery {noisy:.3} (sigma 0.1), {clean:.3} (sigma 0)"))
}

fn criterion_6(first_model: &LstmModel<f64>, first_task: &Task) -> Outcome {
    let rho = |m: &LstmModel<f64>, t: &Task| -> Result<f64, String> {
        evaluate(m, &t.test, "test", "acceptance", 0)
            .map_err(|e| e.to_string())?
            .rho
            .ok_or_else(|| "undefined correlation".to_string())
    };
    let extra = (1..3u64).map(|s| channel_task(0.1, 100 + s)).collect::<Result<Vec<_>, _>>()?;
    let tasks: Vec<&Task> = std::iter::once(first_task).chain(&extra).collect();
    let (mut att, mut cat) = (Vec::new(), Vec::new());
    for (seed, task) in tasks.into_iter().enumerate() {
        let seed = seed as u64;
        let attention = if seed == 0 { first_model.clone() } else { fit(task, FusionMode::Hard, seed)? };
        att.push(rho(&attention, task)?);
        cat.push(rho(&fit(task, FusionMode::Concat, seed)?, task)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, c) = (mean(&att), mean(&cat));
    let detail = format!("mean held-out rho: attention {a:.4} {att:.4?}, concat {c:.4} {cat:.4?}");
    check(a >= c, detail.clone())?;
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.5]).map_err(|e| e.to_string())?;
    let expected = 2.5 / (19.0f64 / 3.0).sqrt();
    check((r - expected).abs() <= 1e-9, format!("pearson {r} vs {expected}"))?;
    check((r - 0.993399).abs() <= 1e-6, format!("pearson {r}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(3..50);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v * 0.3 + rng.random_range(-2.0..2.0)).collect();
        let base = pearson(&y, &p).map_err(|e| e.to_string())?;
        let a = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let b = rng.random_range(-10.0..10.0);
        let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let ps: Vec<f64> = p.iter().map(|v| a.abs() * v - b).collect();
        worst = worst.max((pearson(&ys, &p).unwrap() - a.signum() * base).abs());
        worst = worst.max((pearson(&y, &ps).unwrap() - base).abs());
    }
    check(worst <= 1e-12, format!("invariance violated by {worst:e}"))?;
    Ok(format!("pearson = {r:.9}; scale/sign invariance within {worst:.1e}"))
}

fn criterion_8() -> Outcome {
    let spec = SplitSpec::with_seed(8);
    check(split_indices(97, &spec).unwrap() == split_indices(97, &spec).unwrap(), "splits differ")?;
    let synth = SynthConfig {
        n_videos: 30,
        t_range: (8, 16),
        seed: 8,
        ..SynthConfig::default()
    };
    let run = || -> Result<_, String> {
        let raw = to_dataset(&generate(&synth).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let idx = split_indices(raw.len(), &spec).map_err(|e| e.to_string())?;
        let tr = raw.select(&idx.train);
        let norm = Normalizer::fit(&tr.labels()).map_err(|e| e.to_string())?;
        let tr = tr.normalized(norm).map_err(|e| e.to_string())?;
        let va = raw.select(&idx.val).normalized(norm).map_err(|e| e.to_string())?;
        let te = raw.select(&idx.test).normalized(norm).map_err(|e| e.to_string())?;
        let config = ModelConfig::small([8, 4, 4], 6, 4, 6);
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let (params, report) = train(&tr, &va, &config, &tc).map_err(|e| e.to_string())?;
        let eval = evaluate(&LstmModel { config, params: params.clone() }, &te, "test", "det", 8)
            .map_err(|e| e.to_string())?;
        Ok((idx, params, report.without_timing(), eval))
    };
    let (a, b) = (run()?, run()?);
    check(a.0 == b.0, "splits differ between runs")?;
    check(a.1 == b.1, "parameters differ between runs")?;
    check(a.2 == b.2, "training reports differ between runs")?;
    check(a.3 == b.3, "evaluation reports differ between runs")?;
    Ok("splits, parameters, training and evaluation reports bit-identical across runs".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, outcome: Outcome| match outcome {
        Ok(msg) => println!("PASS criterion {n}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL criterion {n}: {msg}");
        }
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    match channel_task(0.1, 100).and_then(|t| fit(&t, FusionMode::Hard, 0).map(|m| (m, t))) {
        Ok((model, task)) => {
            report(5, criterion_5(&model, &task));
            report(6, criterion_6(&model, &task));
        }
        Err(e) => {
            report(5, Err(e.clone()));
            report(6, Err(e));
        }
    }
    report(7, criterion_7());
    report(8, criterion_8());
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
