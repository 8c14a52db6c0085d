//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srseg::arch::{ArchKind, ExitBundle, Model, ModelConfig};
use srseg::autodiff::BnMode;
use srseg::config::parse_config;
use srseg::losses::{feature_distill_ce, logit_distill_ce, overall_sr_loss, renormalized_power, sr_f_loss};
use srseg::param::ParamGroup;
use srseg::train::{poly_lr, AblationTable, ConfusionMatrix, Toggles};
use srseg::{LossWeights, Tape, Tensor, Var};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    workspace().join("configs").join(name)
}

fn srseg(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_srseg"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn srseg: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "srseg {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let out = srseg(&["gradcheck", "--precision", "64"])?;
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    ensure(rows.iter().all(|r| r.ends_with(" ok")), || {
        format!("failing rows:\n{text}")
    })?;
    ensure(rows.iter().any(|r| r.starts_with("training_objective")), || {
        "objective graph not checked".into()
    })?;
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} ops within 1e-4 in {secs:.1}s", rows.len()))
}

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random(&mut rng, &[2, 4, 3, 3], 3.0);
    let s = random(&mut rng, &[2, 4, 3, 3], 3.0);
    let mut tape = Tape::new();
    let (tv, sv) = (tape.leaf(t.clone()), tape.leaf(s.clone()));
    let scaled = feature_distill_ce(&mut tape, tv, sv, 1.0).map_err(|e| e.to_string())?;
    let mut plain = 0.0;
    for b in 0..2 {
        for j in 0..9 {
            let col = |x: &Tensor<f64>, c: usize| x.data()[(b * 4 + c) * 9 + j];
            let lse = |x: &Tensor<f64>| (0..4).map(|c| col(x, c).exp()).sum::<f64>().ln();
            let (lt, ls) = (lse(&t), lse(&s));
            plain -= (0..4).map(|c| (col(&t, c) - lt).exp() * (col(&s, c) - ls)).sum::<f64>();
        }
    }
    let d1 = (tape.value(scaled).item() - plain / 18.0).abs();
    ensure(d1 < 1e-12, || format!("tau=1 gap {d1:e}"))?;

    let mut d2: f64 = 0.0;
    for tau in [1.0, 1.5, 3.0, 7.0] {
        let x = random(&mut rng, &[2, 5, 3, 3], 4.0);
        let lhs = renormalized_power(&x, tau).map_err(|e| e.to_string())?;
        let xv = tape.leaf(x);
        let xs = tape.scale(xv, 1.0 / tau);
        let rhs = tape.channel_softmax(xs).map_err(|e| e.to_string())?;
        d2 = d2.max(lhs.max_abs_diff(tape.value(rhs)));
    }
    ensure(d2 < 1e-9, || format!("softmax-power gap {d2:e}"))?;

    for k in 0..100 {
        let c = rng.random_range(2..7);
        let tau = rng.random_range(1.0..4.0);
        let p = tape.leaf(random(&mut rng, &[1, c], 3.0));
        let q = tape.leaf(random(&mut rng, &[1, c], 3.0));
        let cross = logit_distill_ce(&mut tape, p, q, tau).map_err(|e| e.to_string())?;
        let own = logit_distill_ce(&mut tape, p, p, tau).map_err(|e| e.to_string())?;
        let (cross, own) = (tape.value(cross).item(), tape.value(own).item());
        ensure(cross >= own - 1e-12, || format!("pair {k}: {cross} < {own}"))?;
    }

    let cfg = ModelConfig {
        input_size: [16, 16],
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(&cfg, 2).map_err(|e| e.to_string())?;
    let x = random(&mut rng, &[2, 3, 16, 16], 1.0);
    let pass = model.forward(&mut tape, &x, BnMode::Train).map_err(|e| e.to_string())?;
    let mask: Vec<usize> = (0..2 * 256).map(|_| rng.random_range(0..4)).collect();
    let labels: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
    let w = LossWeights::default();
    let g = overall_sr_loss(&mut tape, &pass.bundles, &mask, &labels, &w, 2.0).map_err(|e| e.to_string())?;
    let rel = (g.breakdown.recombine(&w) - g.breakdown.total).abs() / g.breakdown.total.abs();
    ensure(rel < 1e-6, || format!("recombination off by {rel:e}"))?;
    Ok(format!(
        "tau=1 gap {d1:.1e}, power gap {d2:.1e}, 100 CE pairs, recombination {rel:.1e}"
    ))
}

fn small(arch: ArchKind) -> ModelConfig {
    ModelConfig {
        arch,
        num_blocks: 3,
        block_channels: vec![4, 8, 16],
        adapter_dim: 4,
        seg_classes: 4,
        cls_classes: 3,
        input_size: [16, 16],
    }
}

fn grads(
    model: &Model<f64>,
    x: &Tensor<f64>,
    loss: impl Fn(&mut Tape<f64>, &[ExitBundle]) -> Var,
) -> Result<Vec<Option<Vec<f64>>>, String> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (pass, _) = model
        .forward_with(&mut tape, &params, xv, BnMode::Train)
        .map_err(|e| e.to_string())?;
    let l = loss(&mut tape, &pass.bundles);
    tape.backward(l).map_err(|e| e.to_string())?;
    Ok(params.iter().map(|&p| tape.grad(p).map(|g| g.to_f64_vec())).collect())
}

fn stop_gradient_and_side_branches() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in [ArchKind::Conv, ArchKind::Ushape] {
        let cfg = small(arch);
        let model = Model::<f64>::build(&cfg, 1).map_err(|e| e.to_string())?;
        let x = random(&mut rng, &[2, 3, 16, 16], 1.0);
        let detached = grads(&model, &x, |t, b| sr_f_loss(t, b, 2.0).unwrap())?;
        let constant = grads(&model, &x, |t, b| {
            let mut b = b.to_vec();
            let v = t.value(b[0].adapted_features).clone();
            b[0].adapted_features = t.constant(v);
            sr_f_loss(t, &b, 2.0).unwrap()
        })?;
        for (i, (_, p)) in model.params().iter().enumerate() {
            if p.name.starts_with("exit1.adapter") {
                let zero = detached[i].as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0));
                ensure(zero, || format!("{arch:?}: teacher branch {} has gradient", p.name))?;
            }
            ensure(detached[i] == constant[i], || {
                format!("{arch:?}: {} differs from constant-teacher gradient", p.name)
            })?;
        }

        let fm = Model::<f32>::build(&cfg, 5).map_err(|e| e.to_string())?;
        let mut zeroed = fm.clone();
        for p in zeroed.params_mut().iter_mut() {
            if matches!(p.group, ParamGroup::Adapter | ParamGroup::ExitHead) {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let xf = x.cast::<f32>();
        let final_of = |m: &Model<f32>| {
            let mut tape = Tape::new();
            let pass = m.clone().forward(&mut tape, &xf, BnMode::Eval).unwrap();
            tape.value(pass.final_logits).clone()
        };
        ensure(final_of(&fm) == final_of(&zeroed), || {
            format!("{arch:?}: zeroing exits changed final logits")
        })?;
        let stripped = fm.strip_exits();
        let got = stripped.predict(&xf).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&got) == bits(&final_of(&fm)), || {
            format!("{arch:?}: stripped output differs")
        })?;
    }
    Ok("teacher branch gradient-free, exits inert on final logits, stripped model bit-identical".into())
}

fn closed_form_params(cfg: &ModelConfig) -> [u64; 4] {
    let conv = |i: usize, o: usize, k: usize, bias: bool| (i * o * k * k + if bias { o } else { 0 }) as u64;
    let block = |i: usize, o: usize| conv(i, o, 3, false) + conv(o, o, 3, false) + 4 * o as u64;
    let c = &cfg.block_channels;
    let n = c.len();
    let (s, k, a) = (cfg.seg_classes, cfg.cls_classes, cfg.adapter_dim);
    let mut backbone = 0;
    let mut prev = 3;
    for &ch in c {
        backbone += block(prev, ch);
        prev = ch;
    }
    let heads: Vec<usize> = match cfg.arch {
        ArchKind::Conv => c.clone(),
        ArchKind::Ushape => {
            let dec: Vec<usize> = c.iter().rev().copied().collect();
            backbone += block(c[n - 1], dec[0]);
            for j in 1..n {
                backbone += block(dec[j - 1] + c[n - 1 - j], dec[j]);
            }
            dec
        }
    };
    let final_head = conv(heads[n - 1], s, 1, true);
    let exit_heads = heads[..n - 1].iter().map(|&h| conv(h, s, 1, true)).sum::<u64>()
        + heads.iter().map(|&h| (h * k + k) as u64).sum::<u64>();
    let adapters = c
        .iter()
        .map(|&ch| conv(ch, a, 3, true) + conv(a, a, 3, false) + 2 * a as u64)
        .sum();
    [backbone, final_head, exit_heads, adapters]
}

fn overhead_accounting() -> Check {
    let mea = Toggles {
        mea: true,
        sr_f: false,
        sr_l: false,
    };
    let mut lines = Vec::new();
    for name in ["toy_ushape.json", "toy_conv.json"] {
        let cfg = parse_config(&config(name)).map_err(|e| e.to_string())?.model;
        let m = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
        let (p, f, convs) = (m.param_components(), m.flop_components(), m.conv_counts());
        let want = closed_form_params(&cfg);
        ensure([p.backbone, p.final_head, p.exit_heads, p.adapters] == want, || {
            format!("{name}: counts {p:?} vs closed form {want:?}")
        })?;
        ensure(
            (m.count_params(true) - m.count_params(false)) as u64 == want[2] + want[3],
            || format!("{name}: count_params exit delta"),
        )?;
        let with_l = Toggles { sr_l: true, ..mea };
        ensure(p.for_toggles(with_l) == p.for_toggles(mea), || {
            format!("{name}: SR-L adds params")
        })?;
        ensure(convs.for_toggles(with_l) == convs.for_toggles(mea), || {
            format!("{name}: SR-L adds convs")
        })?;
        ensure(f.for_toggles(with_l) == f.for_toggles(mea), || {
            format!("{name}: SR-L adds FLOPs")
        })?;
        ensure(m.estimate_flops(true) >= m.estimate_flops(false), || {
            format!("{name}: FLOPs")
        })?;
        let share = (p.exit_heads + p.adapters) as f64 / p.backbone as f64;
        ensure(share < 0.10, || {
            format!("{name}: exits+adapters {:.1}% of backbone", 100.0 * share)
        })?;
        lines.push(format!("{name} exits+adapters {:.1}%", 100.0 * share));
    }
    Ok(format!("SR-L adds 0 params/0 convs; {}", lines.join(", ")))
}

fn ablation_ordering() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let out = dir.path().to_str().unwrap();
    let cfg = config("toy_ushape.json");
    let run = srseg(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "5",
        "--out",
        out,
        "--jobs",
        &jobs.to_string(),
        "--no-timestamp",
    ])?;
    println!("{}", String::from_utf8_lossy(&run.stdout));
    let json = std::fs::read_to_string(dir.path().join("ablation.json")).map_err(|e| e.to_string())?;
    let table: AblationTable = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    let rows = &table.rows;
    ensure(rows.len() == 5, || format!("{} rows", rows.len()))?;
    let base = &rows[0];
    let full = &rows[4];
    let mut failures = Vec::new();
    if full.mean < base.mean + 0.5 {
        failures.push(format!("full {:.2} < baseline {:.2} + 0.5", full.mean, base.mean));
    }
    for r in &rows[1..4] {
        let pooled = ((base.std.powi(2) + r.std.powi(2)) / 2.0).sqrt();
        if r.mean < base.mean - pooled {
            failures.push(format!(
                "{} {:.2} < baseline - pooled std {:.2}",
                r.label,
                r.mean,
                base.mean - pooled
            ));
        }
    }
    if rows.iter().any(|r| r.mean > full.mean) {
        failures.push("full is not the best row".into());
    }
    // runs are independent, so the 4-worker time is the single-worker time over 4
    let four_core = table.wall_clock_secs * table.workers as f64 / 4.0;
    if four_core >= 45.0 * 60.0 {
        failures.push(format!("estimated 4-core wall clock {:.1} min", four_core / 60.0));
    }
    let summary = format!(
        "baseline {:.2}, full {:.2}, measured {:.1} min on {} worker(s), about {:.1} min on 4 cores",
        base.mean,
        full.mean,
        table.wall_clock_secs / 60.0,
        table.workers,
        four_core / 60.0
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| e.to_string()))
                .collect()
        })
        .collect()
}

fn schedules() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = config("smoke.json");
    srseg(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ])?;
    let cfg = parse_config(&cfg_path).map_err(|e| e.to_string())?;
    let rows = read_lines(&dir.path().join("log.csv"))?;
    let n = rows.len();
    let t = &cfg.train;
    ensure(n == t.epochs * t.steps_per_epoch(cfg.dataset.count), || {
        format!("{n} logged steps")
    })?;
    for (k, r) in rows.iter().enumerate() {
        let want = poly_lr(k, n - 1, t.lr0, t.poly_power).map_err(|e| e.to_string())?;
        ensure(r[1] == want, || format!("step {k}: lr {} vs {want}", r[1]))?;
    }
    ensure(rows[0][1] == t.lr0 && rows[n - 1][1] == 0.0, || "lr endpoints".into())?;
    ensure(rows[0][2] == t.temperature.tau, || "initial tau".into())?;
    let mut grew = 0;
    for w in rows.windows(2) {
        let ratio = w[1][2] / w[0][2];
        let unit = ratio == 1.0;
        ensure(unit || (ratio - t.temperature.growth_factor).abs() < 1e-12, || {
            format!("tau ratio {ratio}")
        })?;
        grew += usize::from(!unit);
    }
    Ok(format!(
        "{n} steps; lr exact to poly schedule; tau grew {grew} times by 1.05"
    ))
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..50 {
        let truth: Vec<usize> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| {
                if rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..4)
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&truth, &pred).map_err(|e| e.to_string())?;
        let mut ious = Vec::new();
        for c in 0..4 {
            let inter = (0..64).filter(|&i| truth[i] == c && pred[i] == c).count();
            let union = (0..64).filter(|&i| truth[i] == c || pred[i] == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        ensure(cm.miou() == want, || format!("pair {k}: {} vs {want}", cm.miou()))?;
    }
    let truth: Vec<usize> = (0..64).map(|_| rng.random_range(0..4)).collect();
    let mut cm = ConfusionMatrix::new(4);
    cm.add(&truth, &truth).map_err(|e| e.to_string())?;
    ensure(cm.miou() == 1.0, || "perfect prediction".into())?;
    Ok("50 random 8x8 pairs exact; perfect prediction 1.0".into())
}

fn determinism() -> Check {
    let cfg = config("smoke.json");
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        srseg(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.path().to_str().unwrap(),
        ])?;
    }
    for file in ["log.csv", "model.srtn"] {
        let a = std::fs::read(dirs[0].path().join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(file)).map_err(|e| e.to_string())?;
        ensure(!a.is_empty() && a == b, || format!("{file} differs"))?;
    }
    Ok("log.csv and model.srtn byte-identical".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("stop-gradient and side branches", stop_gradient_and_side_branches),
        ("overhead accounting", overhead_accounting),
        ("ablation ordering", ablation_ordering),
        ("schedules", schedules),
        ("metric oracle", metric_oracle),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
