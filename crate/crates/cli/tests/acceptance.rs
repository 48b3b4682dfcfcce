//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Runs the `eitl` binary wherever a criterion is about
//! the command-line workflow.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use eitl_core::caf::Caf;
use eitl_core::encoder::FeatureEnhance;
use eitl_core::gradcheck::{run_scope, Scope};
use eitl_core::graph::with_corrupted_conv_backward;
use eitl_core::infer::predict_image;
use eitl_core::loss::{dice_loss, focal_loss};
use eitl_core::metrics::f1_iou;
use eitl_core::noise::HpfBank;
use eitl_core::train::{load_model, Checkpoint};
use eitl_core::{Ctx, Graph, LossConfig, Model, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type LossFn = fn(&Graph, eitl_core::Var, &Tensor, &LossConfig) -> eitl_core::Result<eitl_core::Var>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn eitl(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_eitl"))
        .args(args)
        .env_remove("EITL_PRECISION")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn eitl");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn eitl_ok(args: &[&str]) -> Result<Run, String> {
    let r = eitl(args);
    if r.code == 0 {
        Ok(r)
    } else {
        Err(format!(
            "`eitl {}` exited {}: {}",
            args.join(" "),
            r.code,
            r.stderr.trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

fn gradcheck() -> Outcome {
    let t = Instant::now();
    let r = eitl(&["gradcheck", "--seed", "1"]);
    let elapsed = t.elapsed();
    let failed: Vec<&str> = r.stdout.lines().filter(|l| l.starts_with("[FAIL]")).collect();
    let cases = r
        .stdout
        .lines()
        .filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]"))
        .count();
    ensure(
        r.code == 0 && failed.is_empty(),
        format!("exit {}, failing: {failed:?}", r.code),
    )?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    let worst = r
        .stdout
        .lines()
        .filter_map(|l| l.split("max_rel_err=").nth(1))
        .filter_map(|v| v.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    ensure(worst < 1e-4, format!("worst relative error {worst:e}"))?;
    // Negative control: a broken conv backward must be caught and named.
    let control = with_corrupted_conv_backward(|| run_scope(Scope::Ops, 1)).map_err(|e| e.to_string())?;
    let caught: Vec<&str> = control.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(
        !caught.is_empty() && caught.iter().all(|n| n.contains("conv2d")),
        format!("control flagged {caught:?}"),
    )?;
    Ok(format!(
        "{cases} cases, worst rel err {worst:.2e}, {:.1}s; corrupted conv caught in {caught:?}",
        elapsed.as_secs_f64()
    ))
}

fn shape_pyramid() -> Outcome {
    for (name, cfg) in [("tiny", ModelConfig::tiny()), ("desk", ModelConfig::desk())] {
        let mut model = Model::new(&cfg, 0).map_err(|e| e.to_string())?;
        for size in [64usize, 128] {
            let x = Tensor::uniform(
                &[1, 3, size, size],
                0.0,
                1.0,
                &mut ChaCha8Rng::seed_from_u64(size as u64),
            );
            let g = Graph::new();
            let mut ctx = Ctx::new(&g, &mut model.store, false);
            let xv = g.constant(x);
            let t = model.network.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
            for s in 0..4 {
                let side = size / (4 << s);
                let c = cfg.embed_dims[s];
                for (branch, v) in [("rgb", t.rgb[s]), ("noise", t.noise[s])] {
                    ensure(
                        g.shape(v) == [1, c, side, side],
                        format!("{name} {size}px {branch} stage {}: {:?}", s + 1, g.shape(v)),
                    )?;
                }
                ensure(
                    g.shape(t.fused[s]) == [1, 2 * c, side, side],
                    format!("{name} {size}px fused {}: {:?}", s + 1, g.shape(t.fused[s])),
                )?;
            }
            ensure(
                g.shape(t.mask) == [1, 1, size, size],
                format!("{name} {size}px mask {:?}", g.shape(t.mask)),
            )?;
        }
    }
    Ok("tiny and desk at 64 and 128: strides 4/8/16/32, fused 2C, mask at input size".into())
}

fn spot_values() -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let fe = FeatureEnhance::new(&mut store, "fe", &cfg, &mut rng);
    fe.zero_output_layers(&mut store);
    let caf = Caf::new(
        &mut store,
        "caf",
        2 * cfg.embed_dims[2],
        cfg.caf_mid_channels(2),
        &mut rng,
    );
    caf.zero_decoders(&mut store);
    let g3 = Tensor::randn(&[2, cfg.embed_dims[2], 4, 4], 1.0, &mut rng);
    let zn = Tensor::randn(&[2, cfg.embed_dims[2], 4, 4], 1.0, &mut rng);
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &mut store, true);
    let (gv, nv) = (g.constant(g3.clone()), g.constant(zn));
    let enhanced = fe.forward(&mut ctx, gv).map_err(|e| e.to_string())?;
    ensure(
        g.value(enhanced).bit_eq(&g3.map(|v| 1.5 * v)),
        "zero-initialized FE is not exactly 1.5 * G3",
    )?;
    let tr = caf.trace(&mut ctx, gv, nv).map_err(|e| e.to_string())?;
    let quarter = g.value(tr.zcat).map(|v| 0.25 * v);
    ensure(
        g.value(tr.out).bit_eq(&quarter),
        "zero-initialized CAF is not exactly 0.25 * Z'",
    )?;

    let scalar = |pred: &[f64], gt: &[f64], lc: &LossConfig, f: LossFn| {
        let shape = [1, 1, 1, pred.len()];
        let g = Graph::new();
        let pv = g.constant(Tensor::new(&shape, pred.to_vec()).unwrap());
        let id = f(&g, pv, &Tensor::new(&shape, gt.to_vec()).unwrap(), lc).unwrap();
        let v = g.value(id).item();
        v
    };
    let lc = LossConfig::default();
    let eps = lc.dice_epsilon;
    // Unsmoothed, disjoint masks give exactly 1; the smoothing term moves it
    // to 1 - eps / (2 + eps).
    let exact = scalar(
        &[1.0, 0.0],
        &[0.0, 1.0],
        &LossConfig {
            dice_epsilon: 0.0,
            ..lc
        },
        dice_loss,
    );
    let disjoint = scalar(&[1.0, 0.0], &[0.0, 1.0], &lc, dice_loss);
    let same = scalar(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &lc, dice_loss);
    let focal = scalar(&[0.9], &[1.0], &lc, focal_loss);
    ensure(exact == 1.0, format!("unsmoothed dice(disjoint) = {exact}"))?;
    ensure(
        (disjoint - (1.0 - eps / (2.0 + eps))).abs() < 1e-15 && (1.0 - disjoint) < 1e-5,
        format!("dice(disjoint) = {disjoint}"),
    )?;
    ensure(same < 1e-5, format!("dice(identical) = {same:e}"))?;
    ensure((focal - 5.268e-4).abs() <= 1e-7, format!("focal = {focal:e}"))?;
    Ok(format!("FE 1.5x and CAF 0.25x bit-exact; dice(disjoint) {exact} unsmoothed, {disjoint} with eps; dice(identical) {same:.1e}; focal {focal:.7e}"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let density = rng.random_range(0.0..1.0);
        let pred: Vec<f64> = (0..1024).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<f64> = (0..1024)
            .map(|_| (rng.random_range(0.0..1.0) < density) as u8 as f64)
            .collect();
        let s = f1_iou("x", &pred, &gt, 0.5).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for k in 0..1024 {
            let (a, b) = (pred[k] >= 0.5, gt[k] == 1.0);
            tp += (a && b) as u64;
            fp += (a && !b) as u64;
            fn_ += (!a && b) as u64;
        }
        let (f1, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            (
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                tp as f64 / (tp + fp + fn_) as f64,
            )
        };
        ensure(
            (s.counts.tp, s.counts.fp, s.counts.fn_) == (tp, fp, fn_) && s.f1 == f1 && s.iou == iou,
            format!("pair {i}: got {:?}, oracle tp {tp} fp {fp} fn {fn_}", s.counts),
        )?;
        worst = worst.max((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs());
    }
    ensure(worst <= 1e-12, format!("identity residual {worst:e}"))?;
    Ok(format!("100 pairs exact; max |F1 - 2IoU/(1+IoU)| = {worst:.1e}"))
}

fn cw_hpf() -> Outcome {
    let bank = HpfBank::default();
    for v in [0.0, 0.37, 1.0] {
        let r = bank
            .apply(&Tensor::full(&[2, 3, 16, 16], v))
            .map_err(|e| e.to_string())?;
        ensure(r.shape() == [2, 9, 16, 16], format!("shape {:?}", r.shape()))?;
        ensure(
            r.data().iter().all(|&x| x == 0.0),
            format!("nonzero response on constant {v}"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let base = bank.apply(&x).map_err(|e| e.to_string())?;
    for c in 0..3 {
        let mut y = x.clone();
        for v in &mut y.data_mut()[c * 256..(c + 1) * 256] {
            *v = rng.random_range(0.0..1.0);
        }
        let out = bank.apply(&y).map_err(|e| e.to_string())?;
        for oc in 0..9 {
            let same = base.narrow(1, oc, 1).unwrap().bit_eq(&out.narrow(1, oc, 1).unwrap());
            ensure(
                same == (oc % 3 != c),
                format!("input channel {c} leaks into output {oc}"),
            )?;
        }
    }
    Ok("9 channels, exact zeros on constants, channels independent".into())
}

struct Overfit {
    data: PathBuf,
    ckpt: PathBuf,
}

fn overfit(root: &Path) -> Result<(String, Overfit), String> {
    let data = root.join("overfit_data");
    write(
        &root.join("synth.json"),
        r#"{"image_size": 64, "n_images": 4, "seed": 7}"#,
    )?;
    eitl_ok(&["synth", "--spec", p(&root.join("synth.json")), "--out", p(&data)])?;
    let pairs = fs::read_to_string(data.join("manifest.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    ensure(pairs == 4, format!("synthesized {pairs} pairs"))?;
    let cfg = r#"{
        "model": "tiny", "epochs": 300, "batch_size": 4, "image_size": 64, "seed": 3,
        "lr_max": 5e-3, "lr_min": 5e-4, "checkpoint_interval": 0, "holdout_fraction": 0.0,
        "augment": {"flip_prob": 0, "scale_prob": 0, "blur_prob": 0, "jpeg_prob": 0}
    }"#;
    write(&root.join("overfit.json"), cfg)?;
    let t = Instant::now();
    let mut logs = Vec::new();
    for run in ["overfit_a", "overfit_b"] {
        let out = root.join(run);
        eitl_ok(&[
            "train",
            "--config",
            p(&root.join("overfit.json")),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ])?;
        logs.push(fs::read(out.join("step_log.jsonl")).map_err(|e| e.to_string())?);
    }
    let per_run = t.elapsed() / 2;
    let steps: Vec<serde_json::Value> = String::from_utf8_lossy(&logs[0])
        .lines()
        .map(|l| serde_json::from_str(l).expect("step log line"))
        .collect();
    let last = steps.last().and_then(|s| s["loss"].as_f64()).ok_or("empty step log")?;
    let ckpt = root.join("overfit_a/final.ckpt");
    let eval_dir = root.join("overfit_eval");
    let r = eitl_ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&data.join("manifest.jsonl")),
        "--out",
        p(&eval_dir),
    ])?;
    let rows = csv_rows(&r.stdout);
    let f1: f64 = rows
        .get(1)
        .and_then(|r| r.get(3))
        .and_then(|v| v.parse().ok())
        .ok_or("no F1 in eval output")?;
    ensure(steps.len() >= 300, format!("{} steps", steps.len()))?;
    ensure(last < 0.05, format!("final loss {last}"))?;
    ensure(f1 > 0.95, format!("F1 {f1}"))?;
    ensure(logs[0] == logs[1], "repeat run diverged from the first loss curve")?;
    ensure(per_run < Duration::from_secs(900), format!("{per_run:?} per run"))?;
    Ok((
        format!(
            "{} steps, final loss {last:.4}, F1 {f1:.4}, repeat bit-identical, {:.1}s per run",
            steps.len(),
            per_run.as_secs_f64()
        ),
        Overfit { data, ckpt },
    ))
}

fn inventory(path: &Path) -> Result<BTreeSet<String>, String> {
    let ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
    Ok(ck.store.names().map(String::from).collect())
}

fn ablation(root: &Path, data: &Path) -> Outcome {
    let cfg = root.join("ablation.json");
    write(
        &cfg,
        r#"{"model": "tiny", "epochs": 1, "max_steps": 1, "batch_size": 2, "image_size": 64, "holdout_fraction": 0.0, "checkpoint_interval": 0}"#,
    )?;
    let mut sets = Vec::new();
    for (name, flags) in [
        ("full", vec![]),
        ("no_fe", vec!["--no-fe"]),
        ("baseline", vec!["--no-fe", "--no-caf"]),
    ] {
        let out = root.join(format!("ablation_{name}"));
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(data), "--out", p(&out)];
        args.extend(flags);
        eitl_ok(&args)?;
        sets.push(inventory(&out.join("final.ckpt"))?);
    }
    let (full, caf, base) = (&sets[0], &sets[1], &sets[2]);
    let fe_names: BTreeSet<_> = full.difference(caf).cloned().collect();
    let caf_names: BTreeSet<_> = caf.difference(base).cloned().collect();
    ensure(
        caf.is_subset(full) && base.is_subset(caf),
        "ablations add names instead of removing them",
    )?;
    ensure(
        !fe_names.is_empty()
            && fe_names
                .iter()
                .all(|n| n.starts_with("rgb.fe.") || n.starts_with("noise.fe.")),
        format!("full minus --no-fe: {fe_names:?}"),
    )?;
    ensure(
        !caf_names.is_empty() && caf_names.iter().all(|n| n.starts_with("caf")),
        format!("--no-fe minus --no-caf: {caf_names:?}"),
    )?;
    let fe_modules: BTreeSet<_> = fe_names
        .iter()
        .map(|n| n.split('.').take(2).collect::<Vec<_>>().join("."))
        .collect();
    let caf_modules: BTreeSet<_> = caf_names
        .iter()
        .map(|n| n.split('.').next().unwrap_or("").to_string())
        .collect();
    ensure(
        fe_modules.len() == 2 && caf_modules.len() == 4,
        format!("FE modules {fe_modules:?}, CAF modules {caf_modules:?}"),
    )?;
    Ok(format!(
        "Baseline+CAF+FE {} names; --no-fe drops {} FE names in {fe_modules:?}; --no-caf drops {} names in {caf_modules:?}",
        full.len(),
        fe_names.len(),
        caf_names.len()
    ))
}

fn degradation(root: &Path, of: &Overfit) -> Outcome {
    let out = root.join("degrade_eval");
    let r = eitl_ok(&[
        "eval",
        "--ckpt",
        p(&of.ckpt),
        "--manifest",
        p(&of.data.join("manifest.jsonl")),
        "--degrade",
        "jpeg:75",
        "--out",
        p(&out),
    ])?;
    let rows = csv_rows(&r.stdout);
    let header = rows.first().ok_or("empty CSV")?;
    ensure(
        header == &["dataset", "n", "threshold", "F1", "IoU", "F1_delta"],
        format!("header {header:?}"),
    )?;
    let degraded = rows.get(2).ok_or("no degraded row")?;
    let delta: f64 = degraded[5]
        .parse()
        .map_err(|_| format!("bad delta {:?}", degraded[5]))?;
    ensure(delta >= 0.0, format!("F1 delta {delta}"))?;
    ensure(out.join("eval.jsonl").exists(), "per-image JSON lines missing")?;
    Ok(format!(
        "{} F1 {} vs clean {}; F1_delta {delta}",
        degraded[0], degraded[3], rows[1][3]
    ))
}

fn checkpoint_round_trip(root: &Path, of: &Overfit) -> Outcome {
    let ck = Checkpoint::load(&of.ckpt).map_err(|e| e.to_string())?;
    let mut model = Model::from_store(&ck.model, ck.store.clone()).map_err(|e| e.to_string())?;
    let img = Tensor::uniform(&[3, 70, 45], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let before = predict_image(&mut model, &img).map_err(|e| e.to_string())?;
    let saved = root.join("roundtrip.ckpt");
    let resaved = root.join("roundtrip2.ckpt");
    Checkpoint {
        store: model.store.clone(),
        ..ck.clone()
    }
    .save(&saved)
    .map_err(|e| e.to_string())?;
    Checkpoint::load(&saved)
        .map_err(|e| e.to_string())?
        .save(&resaved)
        .map_err(|e| e.to_string())?;
    let (a, b) = (
        fs::read(&saved).map_err(|e| e.to_string())?,
        fs::read(&resaved).map_err(|e| e.to_string())?,
    );
    ensure(a == b, "save -> load -> save changed the bytes")?;
    let mut loaded = load_model(&saved).map_err(|e| e.to_string())?;
    let after = predict_image(&mut loaded, &img).map_err(|e| e.to_string())?;
    ensure(before.bit_eq(&after), "prediction after reload differs")?;
    ensure(
        after.shape() == [1, 70, 45],
        format!("output shape {:?}", after.shape()),
    )?;
    Ok(format!(
        "{} bytes round-trip identically; reloaded prediction bit-identical",
        a.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradcheck suite", gradcheck()),
        ("shape pyramid", shape_pyramid()),
        ("equation spot values", spot_values()),
        ("metric oracle", metric_oracle()),
        ("CW-HPF", cw_hpf()),
    ];
    match overfit(root) {
        Ok((msg, of)) => {
            results.push(("tiny-set overfit", Ok(msg)));
            results.push(("ablation topology", ablation(root, &of.data)));
            results.push(("degradation harness", degradation(root, &of)));
            results.push(("checkpoint round trip", checkpoint_round_trip(root, &of)));
        }
        Err(e) => {
            results.push(("tiny-set overfit", Err(e)));
            for name in ["ablation topology", "degradation harness", "checkpoint round trip"] {
                results.push((name, Err("needs the overfit run".into())));
            }
        }
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("[PASS] {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {name}: {msg}");
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
