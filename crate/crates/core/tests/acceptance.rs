//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use loffta::augment::{add_noise, apply_policy, flip, resize, rotate, shear, translate, FlipAxis};
use loffta::bench::bench_train;
use loffta::model::{forward_record, ModelConfig, ModelDims};
use loffta::provider::{write_cache, CountingProvider, SyntheticProvider, SyntheticSpec};
use loffta::reduce::{pool, pool_cache, PoolMode};
use loffta::store::{validate_cache, write_shard, Cache, Shard};
use loffta::trainer::{train, train_with, Session, TrainOptions};
use loffta::{AugmentationPolicy, CacheManifest, Dtype, FeatureGrid, FeatureRecord, RngStream, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(101);
    let policy = AugmentationPolicy::default();
    for i in 0..1000 {
        let (h, w, d) = random_shape(&mut rng, 9, 8);
        let rec = random_record(&mut rng, h, w, d, 10);
        let g = &rec.grid;
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            check(flip(&flip(g, axis), axis).bits_eq(g), || format!("grid {i}: flip {axis:?} twice"))?;
        }
        check(rotate(g, 0.0).unwrap().bits_eq(g), || format!("grid {i}: rotate 0"))?;
        check(shear(g, 0.0, 0.0).unwrap().bits_eq(g), || format!("grid {i}: shear 0"))?;
        check(translate(g, 0, 0).bits_eq(g), || format!("grid {i}: translate 0"))?;
        check(resize(g, 1.0).unwrap().bits_eq(g), || format!("grid {i}: resize 1"))?;
        let (ng, nc) = add_noise(g, &rec.cls, 0.0, &mut rng).unwrap();
        check(ng.bits_eq(g) && nc.bits_eq(&rec.cls), || format!("grid {i}: noise 0"))?;
        let both = flip(&flip(g, FlipAxis::Vertical), FlipAxis::Horizontal);
        check(rotate(g, 180.0).unwrap().bits_eq(&both), || format!("grid {i}: rotate 180"))?;
        let out = apply_policy(&rec, &policy, &mut RngStream::derive(7, &[i])).unwrap();
        check(out.shape() == rec.shape() && out.label == rec.label, || {
            format!("grid {i}: policy changed shape or label")
        })?;
    }
    within(start.elapsed(), 30.0, "suite")?;
    Ok(format!("1000 grids, {:.2} s", start.elapsed().as_secs_f64()))
}

fn same_bits(got: &FeatureGrid, want: &Cells) -> bool {
    got.values().iter().zip(from_cells(want)).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn max_diff(got: &FeatureGrid, want: &Cells) -> f64 {
    got.values().iter().zip(from_cells(want)).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(202);
    let mut worst_resize: f64 = 0.0;
    let mut worst_avg: f64 = 0.0;
    let mut grids = 0;
    while grids < 200 {
        let (h, w, d) = random_shape(&mut rng, 9, 8);
        let g = random_grid(&mut rng, h, w, d);
        let cells = to_cells(&g);
        check(same_bits(&flip(&g, FlipAxis::Horizontal), &flip_oracle(&cells, true)), || "flip_h".into())?;
        check(same_bits(&flip(&g, FlipAxis::Vertical), &flip_oracle(&cells, false)), || "flip_v".into())?;
        let angle = rng.uniform_range(-180.0, 180.0);
        check(same_bits(&rotate(&g, angle).unwrap(), &rotate_oracle(&cells, angle)), || {
            format!("rotate {angle} on {h}x{w}")
        })?;
        let (ax, ay) = (rng.uniform_range(-60.0, 60.0), rng.uniform_range(-60.0, 60.0));
        check(same_bits(&shear(&g, ax, ay).unwrap(), &shear_oracle(&cells, ax, ay)), || {
            format!("shear ({ax}, {ay}) on {h}x{w}")
        })?;
        let dr = rng.below(2 * h as u64 + 1) as i64 - h as i64;
        let dc = rng.below(2 * w as u64 + 1) as i64 - w as i64;
        check(same_bits(&translate(&g, dr, dc), &translate_oracle(&cells, dr, dc)), || "translate".into())?;
        let scale = rng.uniform_range(0.5, 2.0);
        if (h as f64 * scale).round() >= 1.0 && (w as f64 * scale).round() >= 1.0 {
            worst_resize = worst_resize.max(max_diff(&resize(&g, scale).unwrap(), &resize_oracle(&cells, scale)));
        }
        let k = 1 + rng.below(h.min(w) as u64) as usize;
        let s = 1 + rng.below(3) as usize;
        check(same_bits(&pool(&g, PoolMode::Max, k, s).unwrap(), &pool_oracle(&cells, true, k, s)), || {
            "max pool".into()
        })?;
        worst_avg = worst_avg.max(max_diff(&pool(&g, PoolMode::Average, k, s).unwrap(), &pool_oracle(&cells, false, k, s)));
        grids += 1;
    }
    check(worst_resize <= 1e-6, || format!("resize deviates by {worst_resize:e}"))?;
    check(worst_avg <= 1e-6, || format!("average pool deviates by {worst_avg:e}"))?;
    within(start.elapsed(), 60.0, "suite")?;
    Ok(format!(
        "200 grids; resize max |err| {worst_resize:.1e}, average pool max |err| {worst_avg:.1e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for draw in 0..5u64 {
        let mut p = loffta::Params::zeros(tiny_config(), tiny_dims()).unwrap();
        scramble(&mut p, &mut RngStream::derive(303, &[draw]), 0.5);
        let mut rng = RngStream::derive(304, &[draw]);
        let batch: Vec<FeatureRecord> = (0..3).map(|_| random_record(&mut rng, 2, 2, 3, 2)).collect();
        let (rel, name, idx) = gradient_check(&p, &batch, 1e-4);
        check(rel < 1e-4, || format!("draw {draw}: {name}[{idx}] relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    within(start.elapsed(), 120.0, "gradient check")?;
    Ok(format!("5 draws, worst relative error {worst:.2e}, {:.2} s", start.elapsed().as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let mut sites = 0;
    for (cfg, dims) in [
        (ModelConfig::default(), ModelDims { d: 32, h: 6, w: 6, classes: 10 }),
        (ModelConfig::deit_small(), ModelDims { d: 64, h: 4, w: 4, classes: 10 }),
    ] {
        let p = variance_preserving(cfg, dims, 404);
        let mut rng = RngStream::new(405);
        for _ in 0..10 {
            let rec = random_record(&mut rng, dims.h, dims.w, dims.d, dims.classes as u32);
            let trace = forward_record(&p, &rec).unwrap();
            for (site, out) in trace.layer_norm_outputs() {
                if let Some(v) = ln_violation(out) {
                    return Err(format!("{site}: {v}"));
                }
                sites += out.rows();
            }
        }
    }
    Ok(format!("{sites} normalized tokens checked"))
}

fn criterion_5() -> Outcome {
    let dir = synthetic_cache(&SyntheticSpec::default());
    let base = TrainConfig {
        max_steps: Some(2000),
        ..Default::default()
    };
    let start = Instant::now();
    let ta = train(dir.path(), &base).map_err(|e| e.to_string())?;
    let ta_time = start.elapsed();
    let plain = train(
        dir.path(),
        &TrainConfig {
            policy: AugmentationPolicy::none(),
            ..base.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    let acc_ta = ta.best_metric.unwrap_or(0.0);
    let acc_plain = plain.best_metric.unwrap_or(0.0);
    check(ta.steps <= 2000, || format!("{} steps", ta.steps))?;
    check(acc_ta >= 0.95, || format!("augmented run reached val accuracy {acc_ta}"))?;
    within(ta_time, 300.0, "augmented run")?;
    check(acc_ta >= acc_plain - 0.01, || {
        format!("augmented {acc_ta} vs unaugmented {acc_plain}")
    })?;
    Ok(format!(
        "val accuracy {acc_ta:.3} with augmentation ({} steps, {:.1} s), {acc_plain:.3} without",
        ta.steps,
        ta_time.as_secs_f64()
    ))
}

fn decoupling_spec(d: usize) -> SyntheticSpec {
    SyntheticSpec {
        d,
        h: 2,
        w: 2,
        train_per_class: 4,
        val_per_class: 1,
        test_per_class: 1,
        ..Default::default()
    }
}

fn set_descriptor(root: &std::path::Path, name: &str, params: u64) {
    let mut m = CacheManifest::read(root).unwrap();
    m.provider.name = name.into();
    m.provider.param_count = params;
    m.write(root).unwrap();
}

fn criterion_6() -> Outcome {
    let counted = CountingProvider::new(SyntheticProvider::new(decoupling_spec(768)).unwrap());
    let vit_b = tempfile::tempdir().unwrap();
    write_cache(&counted, vit_b.path(), Dtype::F32, "synthetic").map_err(|e| e.to_string())?;
    set_descriptor(vit_b.path(), "ViT-B/14", 86_000_000);
    let vit_g = synthetic_cache(&decoupling_spec(768));
    set_descriptor(vit_g.path(), "ViT-G/14", 1_100_000_000);
    let wide = synthetic_cache(&decoupling_spec(1536));

    let cfg = TrainConfig {
        batch_size: 8,
        model: ModelConfig {
            embed_dim: 384,
            depth: 4,
            heads: 6,
            mlp_ratio: 4,
        },
        ..Default::default()
    };
    let caches: Vec<Cache> = [&vit_b, &vit_g, &wide]
        .iter()
        .map(|d| Cache::open(d.path()).unwrap())
        .collect();
    let calls_before = counted.invocations();
    let mut best_ms = [f64::INFINITY; 3];
    let mut peaks = [0u64; 3];
    // identical work per step, so the fastest step over interleaved rounds is
    // the least disturbed estimate on a shared CPU
    for _round in 0..8 {
        for (i, cache) in caches.iter().enumerate() {
            let r = bench_train(cache, &cfg, 10, 1).map_err(|e| e.to_string())?;
            best_ms[i] = best_ms[i].min(r.step_ms.min_ms);
            peaks[i] = r.peak_tensor_bytes;
        }
    }
    // a real training run on the counted cache
    let short = TrainConfig {
        max_epochs: 1,
        ..cfg.clone()
    };
    train_with(vit_b.path(), &short, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let calls = counted.invocations() - calls_before;

    let swap = (best_ms[0] - best_ms[1]).abs() / best_ms[0].min(best_ms[1]);
    let ratio = best_ms[0] / best_ms[2];
    check(swap < 0.05, || {
        format!("descriptor swap changes step time by {:.1}%", 100.0 * swap)
    })?;
    check(ratio >= 0.85, || format!("d=1536 runs at {ratio:.3} of d=768 throughput"))?;
    check(calls == 0, || format!("{calls} provider calls during training"))?;
    check(peaks[0] == peaks[1], || format!("peak bytes {} vs {}", peaks[0], peaks[1]))?;
    Ok(format!(
        "fastest step {:.1} / {:.1} ms (ViT-B / ViT-G descriptors, {:.1}% apart), d=1536 throughput ratio {ratio:.3}, provider calls {calls}",
        best_ms[0],
        best_ms[1],
        100.0 * swap
    ))
}

fn criterion_7() -> Outcome {
    let base_spec = SyntheticSpec {
        d: 48,
        h: 8,
        w: 8,
        train_per_class: 6,
        val_per_class: 1,
        test_per_class: 1,
        ..Default::default()
    };
    let base = synthetic_cache(&base_spec);
    let high = synthetic_cache(&SyntheticSpec {
        h: 16,
        w: 16,
        ..base_spec.clone()
    });
    let pooled = tempfile::tempdir().unwrap();
    let m = pool_cache(high.path(), pooled.path(), PoolMode::Max, 2, 2).map_err(|e| e.to_string())?;
    check((m.h, m.w) == (base_spec.h, base_spec.w), || format!("pooled grid is {}x{}", m.h, m.w))?;
    let cfg = TrainConfig {
        batch_size: 16,
        ..Default::default()
    };
    let run = |root: &std::path::Path| {
        bench_train(&Cache::open(root).unwrap(), &cfg, 10, 1).map(|r| r.peak_tensor_bytes)
    };
    let a = run(base.path()).map_err(|e| e.to_string())?;
    let b = run(pooled.path()).map_err(|e| e.to_string())?;
    let unpooled = run(high.path()).map_err(|e| e.to_string())?;
    let rel = (a as f64 - b as f64).abs() / a as f64;
    check(rel <= 0.01, || format!("peak bytes {a} vs {b}"))?;
    Ok(format!(
        "pooled 16x16 -> {}x{}; peak tensor bytes {a} (base) vs {b} (pooled), {unpooled} unpooled",
        m.h, m.w
    ))
}

fn criterion_8() -> Outcome {
    let dir = synthetic_cache(&SyntheticSpec::default());
    let cfg = TrainConfig {
        max_steps: Some(100),
        ..Default::default()
    };
    let cache = Cache::open(dir.path()).unwrap();
    let first_batch = || {
        let s = Session::new(&cache, &cfg, 1).unwrap();
        let order = s.epoch_order(0);
        s.prepare_batch(0, &order[..cfg.batch_size]).unwrap()
    };
    let (x, y) = (first_batch(), first_batch());
    check(x.iter().zip(&y).all(|(a, b)| a.bits_eq(b)), || "first batches differ".into())?;
    let a = train(dir.path(), &cfg).map_err(|e| e.to_string())?;
    let b = train(dir.path(), &cfg).map_err(|e| e.to_string())?;
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let (la, lb) = (bits(a.log.train_losses()), bits(b.log.train_losses()));
    check(la.len() == 100, || format!("{} steps logged", la.len()))?;
    check(la == lb, || "loss sequences differ".into())?;
    Ok("first batch and 100-step loss sequence bit-identical".into())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(909);
    let recs: Vec<FeatureRecord> = (0..8)
        .map(|_| {
            let r = random_record(&mut rng, 3, 5, 6, 4);
            let narrow = |v: &f64| *v as f32 as f64;
            FeatureRecord::new(
                r.cls.iter().map(narrow).collect(),
                FeatureGrid::new(3, 5, 6, r.grid.values().iter().map(narrow).collect()).unwrap(),
                r.label,
            )
            .unwrap()
        })
        .collect();
    let f32_path = dir.path().join("a-0000.lfta");
    write_shard(&recs, Dtype::F32, &f32_path).map_err(|e| e.to_string())?;
    let shard = Shard::open(&f32_path).map_err(|e| e.to_string())?;
    for (i, r) in recs.iter().enumerate() {
        check(shard.read_record(i as u64).unwrap().bits_eq(r), || format!("f32 record {i}"))?;
    }
    let f16_path = dir.path().join("b-0000.lfta");
    write_shard(&recs, Dtype::F16, &f16_path).map_err(|e| e.to_string())?;
    let shard = Shard::open(&f16_path).map_err(|e| e.to_string())?;
    for (i, r) in recs.iter().enumerate() {
        let back = shard.read_record(i as u64).unwrap();
        let pairs = back.cls.iter().zip(r.cls.iter()).chain(back.grid.values().iter().zip(r.grid.values()));
        for (b, o) in pairs {
            let e = o.abs().log2().floor().max(-14.0);
            let half_step = 2f64.powf(e - 10.0);
            check((b - o).abs() <= 0.5 * half_step * (1.0 + 1e-12), || format!("f16 {o} read as {b}"))?;
        }
    }
    let spec = small_spec();
    let clean = synthetic_cache(&spec);
    check(validate_cache(clean.path()).is_ok(), || "fresh cache has errors".into())?;
    for kind in Corruption::ALL {
        let dir = synthetic_cache(&spec);
        inject(dir.path(), kind);
        let report = validate_cache(dir.path());
        check(report.errors.iter().any(|e| e.contains(kind.expected())), || {
            format!("{kind:?} not detected: {:?}", report.errors)
        })?;
    }
    Ok("f32 bit-exact, f16 within half a step, 5/5 corruptions detected".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("augmentation algebra", criterion_1),
        ("oracle equivalence", criterion_2),
        ("gradient check", criterion_3),
        ("layer norm contract", criterion_4),
        ("end-to-end learning", criterion_5),
        ("decoupling", criterion_6),
        ("constant-memory pooling", criterion_7),
        ("determinism", criterion_8),
        ("format", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
