//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fractal_ir::analysis::{
    analytic_complexity, fifm_att_flops, probe_stack, window_attention_ratio, ComplexityDims, Method,
    ProbeDepth,
};
use fractal_ir::attention::{grad_cos_closed_form, grad_dot_closed_form};
use fractal_ir::fifm::{AttnMode, ConvKind, FifmConfig};
use fractal_ir::gradcheck;
use fractal_ir::init::{init_stats, kaiming_std};
use fractal_ir::models::{build, ModelConfig};
use fractal_ir::partition::{
    fractal_regroup, fractal_regroup_reverse, index_map_oracle, window_partition, window_reverse,
    FractalGeometry, Stage, WindowSpec,
};
use fractal_ir::{Graph, ParamStore, Tensor};
use fractal_ir_harness::config::{Decay, ScheduleConfig};
use fractal_ir_harness::schedule::warmup_lr;
use fractal_ir_harness::{checkpoint, train, HarnessError, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;
/// Name, time budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn geometry_oracle() -> Check {
    let mut n = 0;
    for h in 1..=16 {
        for w in 1..=16 {
            for p in 1..=16 {
                for s in 1..=16 {
                    let Ok(geo) = FractalGeometry::new(h, w, p, s) else { continue };
                    let c = 2;
                    let x = Tensor::<f64>::arange(&[1, h, w, c]);
                    let w1 = window_partition(&x, p).map_err(err)?;
                    let l1 = index_map_oracle(&geo, Stage::L1);
                    ensure(w1.data() == &l1.apply_pixels(x.data(), c)[..], format!("L1 {geo:?}"))?;
                    let w2 = fractal_regroup(&w1, &geo).map_err(err)?;
                    let l2 = index_map_oracle(&geo, Stage::L2);
                    ensure(w2.data() == &l2.apply_pixels(x.data(), c)[..], format!("L2 {geo:?}"))?;
                    let back1 = fractal_regroup_reverse(&w2, &geo).map_err(err)?;
                    ensure(back1 == w1, format!("regroup round trip {geo:?}"))?;
                    let back = window_reverse(&back1, p, h, w).map_err(err)?;
                    ensure(back == x, format!("partition round trip {geo:?}"))?;
                    n += 1;
                }
            }
        }
    }
    Ok(format!("{n} geometries exact"))
}

fn gradient_suite() -> Check {
    let checks = gradcheck::suite().map_err(err)?;
    let worst = checks
        .iter()
        .map(|c| c.max_rel_error / c.tolerance)
        .fold(0.0, f64::max);
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(format!("{} rel {:.3e} > {:.0e}", bad.name, bad.max_rel_error, bad.tolerance));
    }
    Ok(format!("{} checks, worst at {:.1e} of tolerance", checks.len(), worst))
}

fn closed_form_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let vq = g.param(Tensor::new(&[1, 16], q.clone()).map_err(err)?);
        let vk = g.param(Tensor::new(&[1, 16], k.clone()).map_err(err)?);
        let qn = g.normalize_last(vq, 1e-300);
        let kn = g.normalize_last(vk, 1e-300);
        let cos = g.mul(qn, kn).map_err(err)?;
        let cos = g.sum(cos);
        let gc = g.backward(cos).map_err(err)?;
        let (cq, ck) = grad_cos_closed_form(&q, &k).map_err(err)?;
        let mut g2 = Graph::new();
        let wq = g2.param(Tensor::new(&[1, 16], q.clone()).map_err(err)?);
        let wk = g2.param(Tensor::new(&[1, 16], k.clone()).map_err(err)?);
        let d = g2.mul(wq, wk).map_err(err)?;
        let d = g2.sum(d);
        let gd = g2.backward(d).map_err(err)?;
        let (dq, dk) = grad_dot_closed_form(&q, &k);
        let pairs = [
            (gc.get(vq).ok_or("missing gradient")?.data().to_vec(), cq),
            (gc.get(vk).ok_or("missing gradient")?.data().to_vec(), ck),
            (gd.get(wq).ok_or("missing gradient")?.data().to_vec(), dq),
            (gd.get(wk).ok_or("missing gradient")?.data().to_vec(), dk),
        ];
        for (auto, closed) in pairs {
            for (a, b) in auto.iter().zip(&closed) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:.3e}"))?;
    let q = [1e-3, 0.0, 0.0];
    let k = [0.0, 1.0, 0.0];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = norm(&grad_cos_closed_form(&q, &k).map_err(err)?.0);
    let dot = norm(&grad_dot_closed_form(&q, &k).0);
    ensure((cos - 1000.0).abs() <= 1e-6, format!("cosine grad norm {cos}"))?;
    ensure(dot == 1.0, format!("dot grad norm {dot}"))?;
    Ok(format!("max deviation {worst:.1e}; perpendicular cos {cos} vs dot {dot}"))
}

fn complexity() -> Check {
    let configs = [
        (FifmConfig::new(8, 2, WindowSpec { p: 2, s: 2 }), 1, 8, 8),
        (FifmConfig::new(16, 4, WindowSpec { p: 4, s: 2 }), 2, 16, 16),
        (FifmConfig::new(12, 3, WindowSpec { p: 2, s: 3 }), 1, 12, 6),
    ];
    for (cfg, b, h, w) in configs {
        let dims = ComplexityDims {
            b: b as u64,
            h: h as u64,
            w: w as u64,
            c: cfg.channels as u64,
            heads: cfg.heads as u64,
            p: cfg.window.p as u64,
            s: cfg.window.s as u64,
            gamma: cfg.ffn_ratio as u64,
        };
        let measured = fifm_att_flops(&cfg, b, h, w).map_err(err)?.mac;
        let analytic = analytic_complexity(Method::Fractal, dims).map_err(err)?.attention_flops;
        ensure(measured == analytic, format!("{cfg:?}: measured {measured} vs {analytic}"))?;
    }
    let dims = ComplexityDims {
        b: 1,
        h: 64,
        w: 64,
        c: 32,
        heads: 4,
        p: 8,
        s: 2,
        gamma: 2,
    };
    let ratio = window_attention_ratio(dims, 8, 32);
    ensure(ratio == 16.0, format!("8->32 ratio {ratio}"))?;
    Ok(format!("3 configs exact; window 8->32 ratio {ratio}"))
}

fn receptive_field() -> Check {
    let (p, s) = (2, 2);
    let big = p * s;
    let base = FifmConfig::new(4, 2, WindowSpec { p, s });
    let l1 = FifmConfig {
        mode: AttnMode::L1Only,
        conv_kind: ConvKind::Linear,
        ..base
    };
    let (n, y, x) = (32, 13, 18);
    for depth in 1..=4 {
        let r = probe_stack(&vec![l1; depth], ProbeDepth::Layer, n, n, y, x, depth as u64).map_err(err)?;
        ensure(r.is_square(y / p * p, x / p * p, p), format!("L1-only depth {depth}: {:?}", r.bbox))?;
    }
    let att = probe_stack(&[base], ProbeDepth::Attention, n, n, y, x, 0).map_err(err)?;
    ensure(att.is_square(y / big * big, x / big * big, big), format!("fifm_att {:?}", att.bbox))?;
    let two = probe_stack(&[base, base], ProbeDepth::Layer, 64, 64, 32, 32, 0).map_err(err)?;
    let bound = 16 * big;
    let side = two.bbox_side();
    ensure(side <= bound, format!("two layers bbox {side} > {bound}"))?;
    ensure(side > 2 * p, format!("two layers bbox {side} <= {}", 2 * p))?;
    Ok(format!("L1-only {p}x{p} at depths 1-4; fifm_att {big}x{big}; two layers {side} <= {bound}"))
}

fn pooled_std(stores: &[ParamStore<f64>], name: &str) -> Result<f64, String> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for s in stores {
        for v in s.get(name).map_err(err)?.data() {
            sq += v * v;
            n += 1;
        }
    }
    Ok((sq / n as f64).sqrt())
}

fn init_scaling() -> Check {
    let cfg = ModelConfig {
        channels: 64,
        ffn_ratio: 1,
        conv_kind: ConvKind::Conv1,
        ..ModelConfig::columnar()
    };
    let stores: Vec<ParamStore<f64>> = (0..10).map(|s| build(&cfg, s)).collect::<Result<_, _>>().map_err(err)?;
    let mut worst: f64 = 0.0;
    for st in init_stats(&cfg.param_specs(), &stores) {
        let rel = (st.std - st.kaiming_std).abs() / st.kaiming_std;
        ensure(rel < 0.05, format!("{} std {} vs {}", st.name, st.std, st.kaiming_std))?;
        worst = worst.max(rel);
    }
    let bottleneck = ModelConfig {
        conv_kind: ConvKind::Conv3,
        ..cfg.clone()
    };
    let b_stores: Vec<ParamStore<f64>> =
        (0..10).map(|s| build(&bottleneck, s)).collect::<Result<_, _>>().map_err(err)?;
    let layer = "stages.0.layers.0.ffn.spatial";
    let dense = pooled_std(&stores, &format!("{layer}.conv.weight"))?;
    let reduce = pooled_std(&b_stores, &format!("{layer}.reduce.weight"))?;
    let ratio = reduce / dense;
    let analytic = kaiming_std(64) / kaiming_std(64 * 9);
    ensure((ratio / 3.0 - 1.0).abs() <= 0.05, format!("std ratio {ratio:.4}"))?;
    Ok(format!("worst rel {:.2}%; bottleneck/dense std ratio {ratio:.4} (analytic {analytic})", worst * 100.0))
}

fn warmup_and_determinism() -> Check {
    let s = ScheduleConfig {
        warmup_iters: 100,
        total_iters: 1000,
        decay: Decay::Constant,
    };
    ensure(warmup_lr(0, 1e-3, &s) == 1e-3 / 100.0, "iter 0")?;
    ensure(warmup_lr(99, 1e-3, &s) == 1e-3, "iter warmup-1")?;
    ensure((1..100).all(|i| warmup_lr(i, 1e-3, &s) > warmup_lr(i - 1, 1e-3, &s)), "ramp not increasing")?;
    let halving = ScheduleConfig {
        decay: Decay::HalfAt(vec![500]),
        ..s
    };
    ensure(warmup_lr(500, 1e-3, &halving) == 5e-4, "halving")?;

    let dir = tempfile::tempdir().map_err(err)?;
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut cfg = RunConfig::denoise_default();
        cfg.schedule.warmup_iters = 5;
        cfg.schedule.total_iters = 20;
        cfg.eval_interval = 10;
        cfg.metrics_path = Some(dir.path().join(format!("{tag}.csv")));
        cfg.checkpoint_path = Some(dir.path().join(format!("{tag}.fir")));
        train::train(&cfg).map_err(err)?;
        let csv = std::fs::read(cfg.metrics_path.unwrap()).map_err(err)?;
        let ckpt = std::fs::read(cfg.checkpoint_path.unwrap()).map_err(err)?;
        Ok((csv, ckpt))
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a.0 == b.0, "metrics CSV differs")?;
    ensure(a.1 == b.1, "checkpoint differs")?;
    Ok(format!("schedule exact; CSV {} B and checkpoint {} B identical", a.0.len(), a.1.len()))
}

fn train_against_baseline(cfg: &RunConfig, margin: f64) -> Check {
    let out = match train::train(cfg) {
        Ok(o) => o,
        Err(HarnessError::Diverged { iter, loss }) => return Err(format!("diverged at {iter} (loss {loss})")),
        Err(e) => return Err(e.to_string()),
    };
    let report = train::evaluate(cfg, &out.params).map_err(err)?;
    let gain = report.psnr - report.baseline_psnr;
    let msg = format!(
        "val PSNR {:.2} dB vs baseline {:.2} dB (gain {gain:+.2}, need {margin:+.1}); SSIM {:.3}",
        report.psnr, report.baseline_psnr, report.ssim
    );
    ensure(gain >= margin, msg.clone())?;
    Ok(msg)
}

fn toy_denoise() -> Check {
    train_against_baseline(&RunConfig::denoise_default(), 2.0)
}

fn toy_sr() -> Check {
    let cfg = RunConfig::sr_default();
    let params = build::<f32>(&cfg.model, 0).map_err(err)?;
    let x = Tensor::<f32>::zeros(&[1, 8, 8, 1]);
    let y = fractal_ir::models::predict(&cfg.model, &params, &x).map_err(err)?;
    ensure(y.shape() == [1, 16, 16, 1], format!("output shape {:?}", y.shape()))?;
    train_against_baseline(&cfg, 0.5)
}

fn checkpoint_format() -> Check {
    let cfg = ModelConfig::ushape();
    let params = build::<f32>(&cfg, 3).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let first = dir.path().join("a.fir");
    let second = dir.path().join("b.fir");
    checkpoint::save(&params, &first).map_err(err)?;
    let loaded = checkpoint::load::<f32>(&first).map_err(err)?;
    ensure(loaded == params, "loaded params differ")?;
    checkpoint::save(&loaded, &second).map_err(err)?;
    let a = std::fs::read(&first).map_err(err)?;
    let b = std::fs::read(&second).map_err(err)?;
    ensure(a == b, "re-saved bytes differ")?;
    let mut bad = a.clone();
    bad[0] ^= 0xff;
    std::fs::write(&first, &bad).map_err(err)?;
    match checkpoint::load::<f32>(&first) {
        Err(HarnessError::Format { offset: 0, .. }) => {}
        Err(e) => return Err(format!("unexpected error {e}")),
        Ok(_) => return Err("corrupted magic accepted".into()),
    }
    Ok(format!("{} bytes round trip; bad magic rejected at offset 0", a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("index geometry oracle", 10, geometry_oracle),
        ("gradient suite", 60, gradient_suite),
        ("closed-form gradients", 5, closed_form_gradients),
        ("complexity", 10, complexity),
        ("receptive field", 60, receptive_field),
        ("init scaling", 10, init_scaling),
        ("warmup and determinism", 120, warmup_and_determinism),
        ("toy denoise", 600, toy_denoise),
        ("toy sr2x", 600, toy_sr),
        ("checkpoint format", 1, checkpoint_format),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(m) if took > Duration::from_secs(*budget) => Err(format!("{m}; over {budget} s budget")),
            r => r,
        };
        let (status, msg) = match result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{status} {:>2} {name} [{:.2} s] {msg}", i + 1, took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
