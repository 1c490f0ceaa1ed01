//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::time::{Duration, Instant};

use rand::Rng;

use mantis_core::attention::AttentionMode;
use mantis_core::blocks::UnitVariant;
use mantis_core::ftnmt::{tanimoto_recursive_oracle, values, FtConfig};
use mantis_core::gradsuite::{run_gradient_suite, SuiteOptions};
use mantis_core::inference::{
    landscape_emit, padding_for, sliding_inference, window_count, ChangeModel, InferenceConfig,
};
use mantis_core::mantis::{Mantis, MantisConfig};
use mantis_core::pipeline::{synth_dataset, AugmentConfig};
use mantis_core::substrate::param::init_rng;
use mantis_core::substrate::{no_grad, trace_shapes, Tensor, Var};
use mantis_core::trainer::{metrics, pareto_indices, train, Stage, TrainConfig, TrainReport};
use mantis_core::Result;

type Outcome = std::result::Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn ok_or_fail<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn closed_form_matches_recursion() -> Outcome {
    let start = Instant::now();
    let mut rng = init_rng(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let (pt, lt) = (
            ok_or_fail(Tensor::new(vec![n], p.clone()))?,
            ok_or_fail(Tensor::new(vec![n], l.clone()))?,
        );
        for d in 0..=8u32 {
            let closed = ok_or_fail(values::tanimoto_d(&pt, &lt, &FtConfig::new(d, &[0]).with_smooth(0.0)))?.item();
            let rec = ok_or_fail(tanimoto_recursive_oracle(&p, &l, d))?;
            worst = worst.max((closed - rec).abs());
        }
    }
    let elapsed = start.elapsed();
    if worst > 1e-10 {
        return fail(format!("max |closed - recursive| = {worst:e}"));
    }
    if elapsed > Duration::from_secs(10) {
        return fail(format!("took {elapsed:?}"));
    }
    Ok(format!("9000 evaluations, max diff {worst:.2e}, {elapsed:.2?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = ok_or_fail(run_gradient_suite(&SuiteOptions::default()))?;
    let elapsed = start.elapsed();
    for r in &results {
        eprintln!("    {:<22} {}", r.name, r.report);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return fail(format!("failing checks: {failed:?}"));
    }
    if elapsed > Duration::from_secs(300) {
        return fail(format!("took {elapsed:?}"));
    }
    Ok(format!("{} checks passed in {elapsed:.1?}", results.len()))
}

fn depth_monotonicity_and_range() -> Outcome {
    let mut rng = init_rng(103);
    let depths = [0u32, 1, 2, 3, 5, 8];
    for i in 0..10_000 {
        let n = rng.gen_range(1..=16);
        let p = Tensor::from_fn(&[n], |_| rng.gen_range(0.0..=1.0));
        let l = Tensor::from_fn(&[n], |_| rng.gen_range(0.0..=1.0));
        let mut prev = f64::INFINITY;
        for &d in &depths {
            let cfg = FtConfig::new(d, &[0]);
            let t = ok_or_fail(values::tanimoto_d(&p, &l, &cfg))?.item();
            let ft = ok_or_fail(values::ftnmt_complement(&p, &l, &cfg))?.item();
            let avg = ok_or_fail(values::ftnmt_avg(&p, &l, &cfg))?.item();
            if [t, ft, avg].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return fail(format!("pair {i}, d={d}: value outside [0,1]"));
            }
            if t > prev {
                return fail(format!("pair {i}: T^{d} = {t} exceeds previous depth value {prev}"));
            }
            if (1.0 - t).abs() <= 1e-12 {
                return fail(format!("pair {i}: distinct vectors reached 1 at d={d}"));
            }
            prev = t;
        }
        for &d in &depths {
            let same = ok_or_fail(values::tanimoto_d(&p, &p, &FtConfig::new(d, &[0])))?.item();
            if (1.0 - same).abs() > 1e-12 {
                return fail(format!("pair {i}: T^{d}(p,p) = {same}"));
            }
        }
    }
    Ok("10^4 pairs over depths {0,1,2,3,5,8}".into())
}

fn gamma_init_identity() -> Outcome {
    let _g = no_grad();
    let mut rng = init_rng(104);
    for variant in [UnitVariant::FractalResnet, UnitVariant::CeecnetV1, UnitVariant::CeecnetV2] {
        let model = ok_or_fail(Mantis::new(MantisConfig::new(4, 8, variant)))?;
        for k in 0..10 {
            let a = Var::constant(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng));
            let b = Var::constant(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng));
            let on = ok_or_fail(model.forward_with(&model.params, &a, &b, AttentionMode::Enabled))?;
            let off = ok_or_fail(model.forward_with(&model.params, &a, &b, AttentionMode::Ablated))?;
            for (x, y) in [
                (&on.segmentation, &off.segmentation),
                (&on.boundary, &off.boundary),
                (&on.distance, &off.distance),
            ] {
                let same = x.value().data().iter().zip(y.value().data()).all(|(u, v)| u.to_bits() == v.to_bits());
                if !same {
                    return fail(format!("{variant:?} pair {k}: outputs differ"));
                }
            }
        }
    }
    Ok("3 variants x 10 pairs bit-identical".into())
}

fn shape_ledger() -> Outcome {
    let _t = trace_shapes();
    let (b, h, w) = (2usize, 256usize, 512usize);
    let mut checked = 0;
    for depth in [4usize, 5, 6] {
        for nf in [8usize, 16, 32] {
            let model = ok_or_fail(Mantis::new(MantisConfig::new(depth, nf, UnitVariant::CeecnetV1)))?;
            let x = Var::input(Tensor::phantom(vec![b, 3, h, w]));
            let out = ok_or_fail(model.forward(&x, &x))?;
            let level = |i: usize| vec![b, nf << i, h >> i, w >> i];
            let mut expected = Vec::new();
            for i in 0..depth {
                expected.push((format!("encoder{i}"), level(i)));
                if i + 1 < depth {
                    expected.push((format!("fusion{i}"), level(i)));
                }
            }
            expected.push(("middle".to_string(), level(depth - 1)));
            for i in (0..depth - 1).rev() {
                expected.push((format!("decoder{i}.up"), level(i)));
                expected.push((format!("decoder{i}"), level(i)));
            }
            if out.features.ledger != expected {
                return fail(format!("D{depth}nf{nf}: ledger {:?}", out.features.ledger));
            }
            for (name, v, c) in [
                ("segmentation", &out.segmentation, 2),
                ("boundary", &out.boundary, 1),
                ("distance", &out.distance, 1),
            ] {
                if v.shape() != [b, c, h, w] {
                    return fail(format!("D{depth}nf{nf}: {name} has shape {:?}", v.shape()));
                }
            }
            checked += expected.len();
        }
    }
    Ok(format!("9 configurations, {checked} intermediate shapes"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = init_rng(106);
    for k in 0..100 {
        let density = rng.gen_range(0.0..1.0);
        let pred = Tensor::from_fn(&[32, 32], |_| (rng.gen::<f64>() < density) as u8 as f64);
        let gt = Tensor::from_fn(&[32, 32], |_| (rng.gen::<f64>() < 0.3) as u8 as f64);
        let (mut tp, mut tn, mut fp, mut fn_) = (0u32, 0u32, 0u32, 0u32);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p > 0.5, g > 0.5) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let oracle = [
            div(tp, tp + fp),
            div(tp, tp + fn_),
            div(2.0 * tp, 2.0 * tp + fp + fn_),
            div(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()),
            div(tp, tp + fp + fn_),
        ];
        let m = ok_or_fail(metrics(&pred, &gt))?;
        let got = [m.precision, m.recall, m.f1, m.mcc, m.iou];
        if got != oracle {
            return fail(format!("pair {k}: {got:?} vs oracle {oracle:?}"));
        }
        if (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() > 1e-12 {
            return fail(format!("pair {k}: F1 {} vs 2IoU/(1+IoU)", m.f1));
        }
    }
    Ok("100 random 32x32 mask pairs exact".into())
}

fn overfit_run() -> std::result::Result<(TrainReport, Duration), String> {
    let mut model = ok_or_fail(Mantis::new(MantisConfig {
        ft_depth: 5,
        ..MantisConfig::new(4, 8, UnitVariant::FractalResnet)
    }))?;
    let train_set = ok_or_fail(synth_dataset(32, 64, 0))?;
    let val_set = ok_or_fail(synth_dataset(8, 64, 1))?;
    let cfg = TrainConfig {
        stages: vec![Stage::new(1e-3, 0), Stage::new(1e-4, 5), Stage::new(1e-5, 10)],
        patience: 2,
        min_delta: 0.05,
        epochs: 200,
        batch_size: 4,
        target_train_f1: Some(0.95),
        stop_in_final_stage: true,
        ..Default::default()
    };
    let start = Instant::now();
    let report = ok_or_fail(train(&mut model, &train_set, &val_set, &cfg, &AugmentConfig::disabled(), |l| {
        eprintln!("    {}", l.csv_row())
    }))?;
    Ok((report, start.elapsed()))
}

fn overfit(run: &std::result::Result<(TrainReport, Duration), String>) -> Outcome {
    let (report, elapsed) = run.as_ref().map_err(|e| format!("training aborted: {e}"))?;
    let epochs = report.history.len();
    match report.stopped_at_f1 {
        Some(f1) if *elapsed <= Duration::from_secs(1800) => Ok(format!(
            "train F1 {f1:.4} after {epochs} epochs in {elapsed:.0?}, {} stage switches",
            report.switches.len()
        )),
        Some(f1) => fail(format!("F1 {f1:.4} reached but took {elapsed:?}")),
        None => fail(format!("F1 target not reached in {epochs} epochs")),
    }
}

fn stage_switch_improvement(run: &std::result::Result<(TrainReport, Duration), String>) -> Outcome {
    let (report, _) = run.as_ref().map_err(|e| format!("training aborted: {e}"))?;
    if report.switches.is_empty() {
        return fail("no stage switch happened");
    }
    let mut notes = Vec::new();
    for s in &report.switches {
        let after = report
            .history
            .iter()
            .filter(|l| l.epoch > s.epoch && l.epoch <= s.epoch + 20)
            .find(|l| l.val_loss < s.baseline_val_loss);
        match after {
            Some(l) => notes.push(format!(
                "stage {} (d={}) at epoch {}: {:.4} -> {:.4} at epoch {}",
                s.stage, s.depth, s.epoch, s.baseline_val_loss, l.val_loss, l.epoch
            )),
            None => {
                return fail(format!(
                    "no improvement on baseline {:.4} within 20 epochs of the switch at epoch {}",
                    s.baseline_val_loss, s.epoch
                ))
            }
        }
    }
    Ok(notes.join("; "))
}

/// Output at each pixel is the first channel of `img1` plus a ramp across the
/// window, so overlapping windows disagree.
struct RampStub;

impl ChangeModel for RampStub {
    fn in_channels(&self) -> Option<usize> {
        None
    }

    fn predict(&self, img1: &Tensor, _img2: &Tensor) -> Result<Tensor> {
        let s = img1.shape();
        let (n, c, f) = (s[0], s[1], s[2]);
        Tensor::new(
            vec![n, 1, f, f],
            (0..n * f * f)
                .map(|i| {
                    let (k, y, x) = (i / (f * f), (i / f) % f, i % f);
                    0.5 * img1.data()[k * c * f * f + y * f + x] + 0.5 * x as f64 / f as f64
                })
                .collect(),
        )
    }
}

fn sliding_equivalence() -> Outcome {
    let mut rng = init_rng(109);
    let model = ok_or_fail(Mantis::new(MantisConfig::new(2, 4, UnitVariant::CeecnetV2)))?;
    let r1 = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let r2 = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let tiled = ok_or_fail(sliding_inference(&model, &r1, &r2, &InferenceConfig::new(32, 16)))?;
    let direct = ok_or_fail(model.predict(
        &ok_or_fail(r1.clone().reshape(&[1, 3, 32, 32]))?,
        &ok_or_fail(r2.clone().reshape(&[1, 3, 32, 32]))?,
    ))?;
    let diff = tiled.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff > 1e-12 {
        return fail(format!("single window differs from direct forward by {diff:e}"));
    }

    let (h, w, f, stride) = (37usize, 50usize, 16usize, 6usize);
    let a = Tensor::rand_uniform(&[2, h, w], 0.0, 1.0, &mut rng);
    let got = ok_or_fail(sliding_inference(&RampStub, &a, &a, &InferenceConfig::new(f, stride)))?;
    let (py, px) = (padding_for(h, f, stride), padding_for(w, f, stride));
    let (ph, pw) = (h + py.0 + py.1, w + px.0 + px.1);
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = (y + py.0, x + px.0);
            let mut vals = Vec::new();
            let mut oy = 0;
            while oy + f <= ph {
                let mut ox = 0;
                while ox + f <= pw {
                    if (oy..oy + f).contains(&gy) && (ox..ox + f).contains(&gx) {
                        let src = a.data()[y * w + x];
                        vals.push(0.5 * src + 0.5 * (gx - ox) as f64 / f as f64);
                    }
                    ox += stride;
                }
                oy += stride;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            worst = worst.max((mean - got.data()[y * w + x]).abs());
        }
    }
    if worst > 1e-12 {
        return fail(format!("overlap average differs from per-pixel oracle by {worst:e}"));
    }
    let count = ok_or_fail(window_count(512, 512, &InferenceConfig::new(256, 64)))?;
    if count != 25 {
        return fail(format!("512x512 stride 64 gives {count} windows"));
    }
    Ok(format!("single window diff {diff:.1e}, stub overlap diff {worst:.1e}, 25 windows"))
}

fn landscape_steepness() -> Outcome {
    let l = [0.4, 0.6];
    let depths = [0u32, 3, 5];
    let n = 201;
    let step = 1.0 / (n - 1) as f64;
    let rows = ok_or_fail(landscape_emit(l, &depths, n))?;
    let mut means = Vec::new();
    for (k, &d) in depths.iter().enumerate() {
        let grid = &rows[k * n * n..(k + 1) * n * n];
        let at = |i: usize, j: usize| grid[j * n + i].value;
        let peak = grid
            .iter()
            .find(|r| (r.px - l[0]).abs() < 1e-12 && (r.py - l[1]).abs() < 1e-12)
            .ok_or("grid misses the ground truth point")?;
        if (peak.value - 1.0).abs() > 1e-12 {
            return fail(format!("d={d}: value {} at l", peak.value));
        }
        let (mut sum, mut count) = (0.0, 0);
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let (x, y) = (i as f64 * step, j as f64 * step);
                if (x - l[0]).hypot(y - l[1]) > 0.05 {
                    continue;
                }
                let gx = (at(i + 1, j) - at(i - 1, j)) / (2.0 * step);
                let gy = (at(i, j + 1) - at(i, j - 1)) / (2.0 * step);
                sum += gx.hypot(gy);
                count += 1;
            }
        }
        means.push(sum / count as f64);
    }
    if !means.windows(2).all(|m| m[1] > m[0]) {
        return fail(format!("mean |grad| near l not increasing: {means:?}"));
    }
    Ok(format!("mean |grad| near l for d=0,3,5: {:.4} < {:.4} < {:.4}", means[0], means[1], means[2]))
}

fn pareto_selection() -> Outcome {
    let dominated = |a: (f64, f64), b: (f64, f64)| b.0 >= a.0 && b.1 >= a.1 && (b.0 > a.0 || b.1 > a.1);
    let mut rng = init_rng(111);
    for trial in 0..20 {
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let oracle: Vec<usize> = (0..pts.len())
            .filter(|&i| !pts.iter().any(|&q| dominated(pts[i], q)))
            .collect();
        let mut got = ok_or_fail(pareto_indices(&pts))?;
        got.sort();
        if got != oracle {
            return fail(format!("trial {trial}: {got:?} vs oracle {oracle:?}"));
        }
    }

    // Late-training trajectory: the similarity peaks near epoch 250 where MCC
    // is still below its own best, reached later. Only those two epochs
    // survive.
    let trajectory: [(u32, f64, f64); 10] = [
        (230, 0.902, 0.9712),
        (235, 0.905, 0.9718),
        (240, 0.899, 0.9721),
        (245, 0.907, 0.9725),
        (250, 0.904, 0.9741),
        (255, 0.909, 0.9729),
        (260, 0.906, 0.9733),
        (265, 0.913, 0.9736),
        (270, 0.910, 0.9730),
        (275, 0.908, 0.9727),
    ];
    let pts: Vec<(f64, f64)> = trajectory.iter().map(|&(_, m, f)| (m, f)).collect();
    let mut front: Vec<u32> = ok_or_fail(pareto_indices(&pts))?.into_iter().map(|i| trajectory[i].0).collect();
    front.sort();
    if front != [250, 265] {
        return fail(format!("trajectory front {front:?}"));
    }
    Ok("20 x 100 random points match the O(n^2) oracle; trajectory front = epochs 250, 265".into())
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut record = |id: usize, name: &str, outcome: Outcome| {
        let line = match &outcome {
            Ok(detail) => format!("criterion {id:>2} PASS {name}: {detail}"),
            Err(detail) => format!("criterion {id:>2} FAIL {name}: {detail}"),
        };
        println!("{line}");
        lines.push((outcome.is_ok(), line));
    };
    record(1, "closed form vs recursion", closed_form_matches_recursion());
    record(2, "gradient suite", gradient_suite());
    record(3, "depth monotonicity and range", depth_monotonicity_and_range());
    record(4, "zero-gamma identity", gamma_init_identity());
    record(5, "shape ledger", shape_ledger());
    record(6, "metrics oracle", metrics_oracle());
    let run = overfit_run();
    record(7, "desk-scale overfit", overfit(&run));
    record(8, "evolving-loss improvement", stage_switch_improvement(&run));
    record(9, "sliding inference", sliding_equivalence());
    record(10, "loss landscape", landscape_steepness());
    record(11, "pareto selection", pareto_selection());

    println!("\nacceptance summary");
    for (_, line) in &lines {
        println!("{line}");
    }
    let failed = lines.iter().filter(|(ok, _)| !ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
