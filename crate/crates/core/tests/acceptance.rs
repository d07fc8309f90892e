//! One pass/fail line per acceptance criterion. Tolerances and runtime
//! limits are pinned below. Runs without the libtest harness so the lines
//! are printed on success too.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use interformer::config::Config;
use interformer::data::{synth_samples, SynthSpec};
use interformer::decoder::{DecoderConfig, DecoderLayer, DualContextSelector};
use interformer::domain::{Class, FeatureMap, MaskSet};
use interformer::dqg::{select_queries, similarity_map, SimilarityMap};
use interformer::encoder::{Encoder, EncoderConfig};
use interformer::harness::{run_study, StudySpec, Trainer};
use interformer::ipp::{boundary_gt, boundary_loss};
use interformer::losses::{coco_loss, dice_loss, total_loss, LossComponents, LossWeights, PixelCounts};
use interformer::metrics::{accuracy, illusion_rate, iou};
use interformer::model::{InterFormer, ModelConfig};
use interformer::nn::{to_vec_f64, ForwardCtx};
use rand::Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const SIMILARITY_TOL: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-6;
const MIOU_TARGET: f64 = 0.50;
const ILLUSION_SEEDS_REQUIRED: usize = 3;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_coco_closed_form() -> Outcome {
    let mut r = rng(1);
    for i in 0..10_000 {
        let hard = [0; 5].map(|_| r.random_range(0..=5000usize));
        let soft = [0; 5].map(|_| r.random_range(0.0..=5000.0));
        let tau = 50 * r.random_range(1..=6usize);
        let got = coco_loss(&PixelCounts { hard, soft }, tau);
        let want = coco_oracle(hard, soft, tau);
        check(got == want, format!("tuple {i}: {got} != {want}"))?;
    }
    Ok("10000 tuples exact".into())
}

fn c2_coco_gates() -> Outcome {
    let tau = 100;
    let hands = [0usize, 50, 100, 101, 150, 5000];
    let objects = [0.0, 1.0, 10.0, 100.0, 321.0, 5000.0];
    let mut n = 0;
    for &lh in &hands {
        for &rh in &hands {
            for &lo in &objects {
                for &ro in &objects {
                    for &to in &objects {
                        let hard = [lh, rh, lo as usize, ro as usize, to as usize];
                        let soft = [lh as f64, rh as f64, lo, ro, to];
                        let loss = coco_loss(&PixelCounts { hard, soft }, tau);
                        let (l, rgt) = (lh > tau, rh > tau);
                        if l && rgt {
                            check(loss == 0.0, format!("both hands present, loss {loss}"))?;
                        }
                        // each term on its own
                        for (k, open) in [(2, !l), (3, !rgt), (4, !(l && rgt))] {
                            let mut s = [lh as f64, rh as f64, 0.0, 0.0, 0.0];
                            s[k] = soft[k];
                            let single = coco_loss(&PixelCounts { hard, soft: s }, tau);
                            let want = if open { soft[k] } else { 0.0 };
                            check(single == want, format!("{hard:?} term {k}: {single} != {want}"))?;
                        }
                        n += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{n} grid tuples"))
}

fn c3_metric_oracles() -> Outcome {
    let mut r = rng(3);
    for i in 0..100 {
        let p = random_masks(&mut r, 16, 16);
        let g = random_masks(&mut r, 16, 16);
        for c in Class::ALL {
            let (pp, gp) = (p.plane(c), g.plane(c));
            let (mut inter, mut uni, mut gt) = (0usize, 0usize, 0usize);
            for y in 0..16 {
                for x in 0..16 {
                    let (a, b) = (pp[[y, x]] == 1, gp[[y, x]] == 1);
                    inter += (a && b) as usize;
                    uni += (a || b) as usize;
                    gt += b as usize;
                }
            }
            let want_iou = (uni > 0).then(|| inter as f64 / uni as f64);
            let want_acc = (gt > 0).then(|| inter as f64 / gt as f64);
            let got_iou = iou(&p, &g, c).map_err(|e| e.to_string())?;
            let got_acc = accuracy(&p, &g, c).map_err(|e| e.to_string())?;
            check(got_iou == want_iou, format!("pair {i} {c:?} iou {got_iou:?} != {want_iou:?}"))?;
            check(got_acc == want_acc, format!("pair {i} {c:?} acc {got_acc:?} != {want_acc:?}"))?;
        }
    }
    let mut sets = Vec::new();
    let mut taus = Vec::new();
    for _ in 0..1000 {
        sets.push(random_masks(&mut r, 8, 8));
        taus.push(r.random_range(0..12usize));
    }
    for tau in 0..12 {
        let want = sets.iter().filter(|m| illusion_oracle(m, tau)).count() as f64 / sets.len() as f64;
        let got = illusion_rate(&sets, tau).map_err(|e| e.to_string())?;
        check(got == want, format!("tau {tau}: rate {got} != {want}"))?;
    }
    for (m, &tau) in sets.iter().zip(&taus) {
        let got = illusion_rate(std::slice::from_ref(m), tau).map_err(|e| e.to_string())?;
        let want = if illusion_oracle(m, tau) { 1.0 } else { 0.0 };
        check(got == want, format!("single set tau {tau}: {got} != {want}"))?;
    }
    let positives = sets.iter().zip(&taus).filter(|(m, &t)| illusion_oracle(m, t)).count();
    Ok(format!("100 IoU/Acc pairs, 1000 illusion sets ({positives} illusions)"))
}

fn grad_line(name: &str, rep: &GradReport) -> Result<String, String> {
    check(
        rep.max_rel <= GRAD_REL_TOL,
        format!("{name}: max rel {:.2e} at {}", rep.max_rel, rep.worst),
    )?;
    Ok(format!("{name} {:.1e} ({} coords)", rep.max_rel, rep.checked))
}

fn c4_gradients() -> Outcome {
    let mut r = rng(4);
    let mut lines = Vec::new();

    // DFS
    let cfg = DecoderConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        dfs_grid: 4,
    };
    let store = f64_store(40);
    let dfs = DualContextSelector::new(store.root(), &cfg, (4, 4), 6, 5).map_err(|e| e.to_string())?;
    let pix = Var::from_tensor(&randn(&mut r, &[2, 4, 4, 6])).unwrap();
    let int = Var::from_tensor(&randn(&mut r, &[2, 4, 4, 5])).unwrap();
    let proj = randn(&mut r, &[2, 16, 8]);
    let mut vars = store.vars();
    vars.push(("f_pix".into(), pix.clone()));
    vars.push(("f_int".into(), int.clone()));
    let rep = grad_check(&vars, 12, &|| {
        let fp = FeatureMap::new(pix.as_tensor().clone(), 0).unwrap();
        let fi = FeatureMap::new(int.as_tensor().clone(), 0).unwrap();
        project(&dfs.forward(&fp, &fi, &ForwardCtx::train(7)).unwrap(), &proj)
    });
    lines.push(grad_line("dfs", &rep)?);

    // decoder layer
    let store = f64_store(41);
    let layer = DecoderLayer::new(store.root(), &cfg).map_err(|e| e.to_string())?;
    let q = Var::from_tensor(&randn(&mut r, &[2, 5, 8])).unwrap();
    let mem = Var::from_tensor(&randn(&mut r, &[2, 7, 8])).unwrap();
    let proj = randn(&mut r, &[2, 5, 8]);
    let mut vars = store.vars();
    vars.push(("queries".into(), q.clone()));
    vars.push(("memory".into(), mem.clone()));
    let rep = grad_check(&vars, 12, &|| {
        project(&layer.forward(q.as_tensor(), mem.as_tensor(), &ForwardCtx::train(7)).unwrap(), &proj)
    });
    lines.push(grad_line("decoder_layer", &rep)?);

    // dice
    let pred = Var::from_tensor(&uniform(&mut r, &[8, 8], 0.05, 0.95)).unwrap();
    let gt = binary(&mut r, &[8, 8], 0.4);
    let rep = grad_check(&[("pred".into(), pred.clone())], 64, &|| dice_loss(pred.as_tensor(), &gt).unwrap());
    lines.push(grad_line("dice", &rep)?);

    // boundary BCE
    let pred = Var::from_tensor(&uniform(&mut r, &[2, 8, 8], 0.05, 0.95)).unwrap();
    let gt = binary(&mut r, &[2, 8, 8], 0.3);
    let rep = grad_check(&[("pred".into(), pred.clone())], 128, &|| boundary_loss(pred.as_tensor(), &gt).unwrap());
    lines.push(grad_line("boundary", &rep)?);

    // encoder on an 8×8 input
    let enc_cfg = EncoderConfig {
        strides: vec![2, 4],
        channels: vec![4, 6],
        global_channels: 4,
        depths: vec![1, 1],
        heads: 2,
    };
    let store = f64_store(42);
    let enc = Encoder::new(store.root(), &enc_cfg).map_err(|e| e.to_string())?;
    let img = Var::from_tensor(&randn(&mut r, &[1, 8, 8, 3])).unwrap();
    let p0 = randn(&mut r, &[1, 4, 4, 4]);
    let p1 = randn(&mut r, &[1, 2, 2, 6]);
    let pg = randn(&mut r, &[1, 2, 2, 4]);
    let mut vars = store.vars();
    vars.push(("image".into(), img.clone()));
    let rep = grad_check(&vars, 12, &|| {
        let b = enc.forward(img.as_tensor(), &ForwardCtx::eval()).unwrap();
        let s = (project(&b.stages[0].data, &p0) + project(&b.stages[1].data, &p1)).unwrap();
        (s + project(&b.global.data, &pg)).unwrap()
    });
    lines.push(grad_line("encoder", &rep)?);
    Ok(lines.join(", "))
}

fn feature(t: Tensor) -> FeatureMap {
    FeatureMap::new(t, 0).unwrap()
}

fn c5_dqg() -> Outcome {
    let mut r = rng(5);
    for trial in 0..200 {
        let pix = randn(&mut r, &[1, 4, 4, 3]);
        let int = randn(&mut r, &[1, 2, 2, 3]);
        let s = similarity_map(&feature(pix.clone()), &feature(int.clone()), 2).map_err(|e| e.to_string())?;
        let got = to_vec_f64(&s.values).unwrap();
        let p = to_vec_f64(&pix).unwrap();
        let t = to_vec_f64(&int).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let a = &p[(y * 4 + x) * 3..(y * 4 + x) * 3 + 3];
                let b = &t[((y % 2) * 2 + x % 2) * 3..((y % 2) * 2 + x % 2) * 3 + 3];
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                let na = a.iter().map(|u| u * u).sum::<f64>().sqrt();
                let nb = b.iter().map(|u| u * u).sum::<f64>().sqrt();
                let want = dot / (na * nb);
                let g = got[y * 4 + x];
                check((g - want).abs() <= SIMILARITY_TOL, format!("trial {trial} ({y},{x}): {g} vs {want}"))?;
                check((-1.0..=1.0).contains(&g), format!("similarity {g} outside [-1, 1]"))?;
            }
        }
        let scale = r.random_range(0.01..100.0);
        let scaled = similarity_map(&feature(pix.clone()), &feature((&int * scale).unwrap()), 2).map_err(|e| e.to_string())?;
        let fp = feature(pix.clone());
        let a = select_queries(&s, &fp, 5).map_err(|e| e.to_string())?.1;
        let b = select_queries(&scaled, &fp, 5).map_err(|e| e.to_string())?.1;
        check(a == b, format!("trial {trial}: selection changed under rescaling by {scale}"))?;
    }
    // selection vs a full sort, with ties
    for trial in 0..1000 {
        let (h, w) = (r.random_range(1..6usize), r.random_range(1..6usize));
        let values: Vec<f64> = (0..h * w).map(|_| r.random_range(-4..=4) as f64 / 4.0).collect();
        let n = r.random_range(1..=h * w);
        let map = SimilarityMap {
            values: Tensor::from_vec(values.clone(), (1, h, w), &Device::Cpu).unwrap(),
            partition: 1,
        };
        let fp = feature(Tensor::arange(0f64, (h * w) as f64, &Device::Cpu).unwrap().reshape((1, h, w, 1)).unwrap());
        let (gathered, pos) = select_queries(&map, &fp, n).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        let want: Vec<(usize, usize)> = order[..n].iter().map(|&i| (i / w, i % w)).collect();
        check(pos[0] == want, format!("trial {trial}: {:?} vs {want:?}", pos[0]))?;
        let g = to_vec_f64(&gathered).unwrap();
        let want_idx: Vec<f64> = order[..n].iter().map(|&i| i as f64).collect();
        check(g == want_idx, format!("trial {trial}: gathered features out of order"))?;
    }
    Ok("cosine oracle 200×16 px, 1000 selections, rescaling invariant".into())
}

fn c6_attention_rows() -> Outcome {
    let store = interformer::nn::ParamStore::new(6, DType::F32, Device::Cpu);
    let cfg = ModelConfig::default();
    let model = InterFormer::new(store.root(), &cfg).map_err(|e| e.to_string())?;
    let mut r = rng(6);
    let mut maps = 0;
    let mut worst: f64 = 0.0;
    for pass in 0..100 {
        let x = randn(&mut r, &[1, 64, 64, 3]).to_dtype(DType::F32).unwrap();
        let ctx = if pass % 2 == 0 { ForwardCtx::eval() } else { ForwardCtx::train(pass as u64) }.with_trace();
        model.forward(&x, &ctx).map_err(|e| e.to_string())?;
        let recorded = ctx.attention_maps();
        check(!recorded.is_empty(), "no attention maps recorded")?;
        for a in recorded {
            let n = *a.dims().last().unwrap();
            let v = to_vec_f64(&a).unwrap();
            for row in v.chunks(n) {
                check(row.iter().all(|&p| p >= 0.0), "negative attention weight")?;
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            maps += 1;
        }
    }
    check(worst <= ROW_SUM_TOL, format!("row sum deviates by {worst:.2e}"))?;
    Ok(format!("{maps} maps, max |row sum − 1| = {worst:.1e}"))
}

fn c7_boundary_gt() -> Outcome {
    let mut r = rng(7);
    for i in 0..500 {
        let m: MaskSet = random_masks(&mut r, 8, 8);
        let mut prev: Option<ndarray::Array2<u8>> = None;
        for radius in 0..4 {
            let got = boundary_gt(&m, radius).map.mapv(|v| v as u8);
            let want = boundary_oracle(&m, radius);
            check(got == want, format!("set {i} radius {radius}: differs from oracle"))?;
            if let Some(p) = &prev {
                let mono = p.iter().zip(got.iter()).all(|(&a, &b)| a <= b);
                check(mono, format!("set {i}: radius {radius} drops boundary pixels"))?;
            }
            prev = Some(got);
        }
    }
    Ok("500 sets × radii 0..=3".into())
}

fn c8_synthetic_study() -> Outcome {
    let spec = StudySpec::desk();
    let result = run_study(&spec).map_err(|e| e.to_string())?;
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let _ = std::fs::write(dir.join("study.json"), serde_json::to_string_pretty(&result).unwrap());
    let mean = |coco: bool| {
        let v: Vec<f64> = result
            .runs
            .iter()
            .filter(|r| r.coco == coco)
            .map(|r| r.report.miou.unwrap_or(0.0))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ill = |coco: bool| {
        result
            .runs
            .iter()
            .filter(|r| r.coco == coco)
            .map(|r| format!("{:.4}", r.report.illusion_rate))
            .collect::<Vec<_>>()
            .join("/")
    };
    let (with, without) = (mean(true), mean(false));
    let seeds = result.seeds_not_worse();
    let summary = format!(
        "mIoU with {with:.4} without {without:.4}; illusion with {} without {}; {seeds}/{} seeds; {:.0}s",
        ill(true),
        ill(false),
        spec.seeds.len(),
        result.seconds
    );
    check(with >= MIOU_TARGET && without >= MIOU_TARGET, format!("mIoU below {MIOU_TARGET}: {summary}"))?;
    check(seeds >= ILLUSION_SEEDS_REQUIRED, format!("illusion not reduced: {summary}"))?;
    check(result.seconds <= 1800.0, format!("over 30 min: {summary}"))?;
    Ok(summary)
}

fn c9_loss_defaults() -> Outcome {
    let w = LossWeights::default();
    let unit = LossComponents {
        boundary: 1.0,
        coco: 1.0,
        cls: 1.0,
        dice: 1.0,
        ce: 1.0,
    };
    let total = total_loss(&unit, &w).map_err(|e| e.to_string())?;
    check(total == 13.0, format!("total {total}"))?;
    check(w.tau == 100, format!("tau {}", w.tau))?;
    let weights = (w.lambda_b, w.lambda_co, w.lambda_cls, w.lambda_dic, w.lambda_ce);
    check(weights == (1.0, 1.0, 1.0, 5.0, 5.0), format!("weights {weights:?}"))?;
    Ok("total 13, tau 100".into())
}

fn c10_determinism_resume() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = Config::desk();
    cfg.train.max_iterations = 24;
    cfg.train.warmup_iterations = 4;
    cfg.train.checkpoint_dir = tmp.path().to_path_buf();
    let (data, _) = synth_samples(&SynthSpec {
        count: 24,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let e = |e: interformer::Error| e.to_string();
    let mut a = Trainer::new(&cfg).map_err(e)?;
    let mut b = Trainer::new(&cfg).map_err(e)?;
    for _ in 0..24 {
        a.step(&data).map_err(e)?;
        b.step(&data).map_err(e)?;
    }
    check(a.history() == b.history(), "same-seed loss curves differ")?;
    let mut c = Trainer::new(&cfg).map_err(e)?;
    let ck = c.run(&data, 12).map_err(e)?;
    drop(c);
    let mut d = Trainer::resume(&cfg, &ck).map_err(e)?;
    d.run(&data, 24).map_err(e)?;
    check(d.history() == a.history(), "resumed loss curve differs")?;
    let pa = a.store().snapshot();
    let pd = d.store().snapshot();
    for (name, t) in &pa {
        let u = &pd[name];
        let same = to_vec_f64(t).unwrap() == to_vec_f64(u).unwrap();
        check(same, format!("parameter {name} differs after resume"))?;
    }
    Ok(format!("24 iterations, resume at 12, {} tensors bitwise equal", pa.len()))
}

fn main() {
    type Criterion = (usize, &'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        (1, "coco closed form", c1_coco_closed_form, Duration::from_secs(5)),
        (2, "coco gate semantics", c2_coco_gates, Duration::from_secs(5)),
        (3, "metric oracles", c3_metric_oracles, Duration::from_secs(10)),
        (4, "gradient checks", c4_gradients, Duration::from_secs(120)),
        (5, "dqg correctness", c5_dqg, Duration::from_secs(30)),
        (6, "attention rows", c6_attention_rows, Duration::from_secs(30)),
        (7, "boundary ground truth", c7_boundary_gt, Duration::from_secs(30)),
        (8, "synthetic study", c8_synthetic_study, Duration::from_secs(1800)),
        (9, "loss weight defaults", c9_loss_defaults, Duration::from_secs(5)),
        (10, "determinism and resume", c10_determinism_resume, Duration::from_secs(300)),
    ];
    // ACCEPTANCE_CRITERIA=1,4,7 runs a subset; unset runs everything
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, f, limit) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("criterion {id:>2} SKIP  {name}");
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {:.1}s > {}s", elapsed.as_secs_f64(), limit.as_secs())),
            o => o,
        };
        match &outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{:.2}s]", elapsed.as_secs_f64()),
            Err(why) => {
                println!("criterion {id:>2} FAIL  {name}: {why} [{:.2}s]", elapsed.as_secs_f64());
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
