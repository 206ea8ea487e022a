//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cimt_core::config::EvalConfig;
use cimt_core::maskformer::permute_clusters;
use cimt_core::metrics::{
    auc, bootstrap_ci, delong_test, is_localized, localization_hit, normal_two_sided, permutation_test, BootstrapConfig,
    RateMetric,
};
use cimt_core::model::forward;
use cimt_core::phantom::{make_splits, Dataset, DatasetConfig, DifficultyConfig, Split};
use cimt_core::report::{build_report, EvalOptions, EvalReport};
use cimt_core::rng::SplitMix64;
use cimt_core::tensor::opcheck::check_ops;
use cimt_core::train::{prepare_oracle, s4c_select_threshold, TrainConfig, TrainOutcome, TrainState, Trainer};
use cimt_core::{modelcheck, ModelConfig, ModelParams, Preset, Session, VolumeSample};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const LR: f64 = 5e-3;
/// Stage B past the frozen-backbone epochs oscillates at `LR`.
const STAGE_B_LR: f64 = 2e-3;
const EASY_EPOCHS: (usize, usize) = (30, 40);
const HARD_EPOCHS: (usize, usize) = (20, 20);
const CPU_BUDGET: Duration = Duration::from_secs(15 * 60);

/// User plus system CPU time of this process.
fn cpu_time() -> Duration {
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: `ru` is a valid, writable rusage struct.
    unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut ru) };
    let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, t.tv_usec as u32 * 1000);
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(n: usize, soft: bool, o: &Outcome, took: Duration) {
    let tag = match (o.pass, soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft, reported only)",
    };
    println!("criterion {n}: {tag}  {}  [{:.1}s]", o.detail, took.as_secs_f64());
}

fn dataset(delta: f64, seed: u64) -> Dataset {
    let cfg = DatasetConfig {
        n_train: 200,
        n_val: 50,
        n_test: 100,
        extents: [16; 3],
        base_seed: seed,
        difficulty: DifficultyConfig::with_contrast(delta),
        ..DatasetConfig::default()
    };
    Dataset::generate(make_splits(&cfg).expect("valid splits")).expect("generation")
}

fn train_cfg(seed: u64, (pretrain, epochs): (usize, usize)) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: pretrain,
        epochs,
        freeze_epochs: 5.min(epochs),
        lr: LR,
        seed,
        ..TrainConfig::default()
    }
}

fn samples(ds: &Dataset, split: Split) -> Vec<&VolumeSample> {
    ds.split(split).into_iter().map(|(_, s)| s).collect()
}

fn evaluate(ds: &Dataset, preset: Preset, model: &ModelConfig, out: &TrainOutcome) -> EvalReport {
    let cases = ds.split(Split::Test);
    let cfg = EvalConfig::default();
    build_report(
        &out.params,
        preset,
        model,
        "acceptance",
        "test",
        &cases,
        out.threshold.threshold,
        &EvalOptions { jobs: 1, ..EvalOptions::default() },
        &cfg,
    )
    .expect("evaluation")
}

/// Stage A once, then stage B for each preset from the shared state.
fn train_presets(
    ds: &Dataset,
    model: &ModelConfig,
    tc: &TrainConfig,
    presets: &[Preset],
) -> Vec<(Preset, TrainOutcome)> {
    let train = samples(ds, Split::Train);
    let val = samples(ds, Split::Val);
    let base = Trainer::new(Preset::UnetS4c, model, tc, &train, &val).expect("trainer");
    let mut stage_a: TrainState = base.init_state().expect("init");
    base.run(&mut stage_a, Some(tc.pretrain_epochs)).expect("pretraining");
    presets
        .iter()
        .map(|&p| {
            let tc = TrainConfig { lr: STAGE_B_LR, ..tc.clone() };
            let t = Trainer::new(p, model, &tc, &train, &val).expect("trainer");
            let mut s = t.fork(&stage_a).expect("fork");
            t.run(&mut s, None).expect("training");
            (p, t.finish(s).expect("finish"))
        })
        .collect()
}

fn criterion_1(model: &ModelConfig) -> (Outcome, Option<(ModelParams, Dataset)>) {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut keep = None;
    for seed in 0..3 {
        let start = cpu_time();
        let ds = dataset(3.0, seed);
        let tc = train_cfg(seed, EASY_EPOCHS);
        let (_, out) = train_presets(&ds, model, &tc, &[Preset::Cimt]).pop().expect("one preset");
        let report = evaluate(&ds, Preset::Cimt, model, &out);
        let cpu = cpu_time() - start;
        let auc = report.auc.expect("both classes").point;
        let ok = auc >= 0.95 && cpu <= CPU_BUDGET;
        pass &= ok;
        lines.push(format!("seed {seed}: auc {auc:.4} in {:.1} cpu-min", cpu.as_secs_f64() / 60.0));
        if keep.is_none() {
            keep = Some((out.params, ds));
        }
    }
    (Outcome { pass, detail: lines.join("; ") }, keep)
}

fn criterion_2(model: &ModelConfig) -> Outcome {
    let presets = [Preset::Cimt, Preset::UnetJoint, Preset::UnetS4c];
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let ds = dataset(0.75, 100 + seed);
        let tc = train_cfg(seed, HARD_EPOCHS);
        let outs = train_presets(&ds, model, &tc, &presets);
        let aucs: Vec<f64> = outs
            .iter()
            .map(|(p, o)| evaluate(&ds, *p, model, o).auc.expect("both classes").point)
            .collect();
        for (s, a) in sums.iter_mut().zip(&aucs) {
            *s += a;
        }
        per_seed.push(format!("[{:.3} {:.3} {:.3}]", aucs[0], aucs[1], aucs[2]));
    }
    let [cimt, joint, s4c] = sums.map(|s| s / 5.0);
    Outcome {
        pass: cimt >= joint && joint >= s4c && cimt - s4c >= 0.02,
        detail: format!(
            "mean auc cimt {cimt:.4}, unet-joint {joint:.4}, unet-s4c {s4c:.4}; gap {:.4}; per seed (cimt joint s4c) {}",
            cimt - s4c,
            per_seed.join(" ")
        ),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst_op: (f64, &str, u64) = (0.0, "", 0);
    for seed in 0..100 {
        for (name, err) in check_ops(seed).expect("op check") {
            if err > worst_op.0 {
                worst_op = (err, name, seed);
            }
        }
    }
    let mut worst_model = 0.0f64;
    let mut qk_ok = true;
    for p in Preset::ALL {
        for seed in 0..4 {
            let s = modelcheck::check_preset(p, seed, 4).expect("model check");
            worst_model = worst_model.max(s.max_rel_err);
            qk_ok &= s.qk_zero.unwrap_or(true);
        }
    }
    let took = start.elapsed();
    Outcome {
        pass: worst_op.0 < 1e-4 && worst_model < 1e-3 && qk_ok && took < Duration::from_secs(120),
        detail: format!(
            "100 seeds x ops: worst rel err {:.2e} ({} seed {}); presets: worst {:.2e}; Q/K through argmax zero: {qk_ok}",
            worst_op.0, worst_op.1, worst_op.2, worst_model
        ),
    }
}

fn criterion_4(params: &ModelParams, model: &ModelConfig, ds: &Dataset) -> Outcome {
    let p64 = params.cast::<f64>();
    let n = model.decoder.num_clusters;
    let perms: Vec<Vec<usize>> = vec![(0..n).rev().collect(), (0..n).map(|i| (i + 3) % n).collect()];
    let (mut col_err, mut perm_err) = (0.0f64, 0.0f64);
    let run = |p: &cimt_core::ParamStore<f64>, x: &cimt_core::Tensor<f32>| {
        let mut s = Session::inference(p);
        let xv = s.tape.constant(x.cast::<f64>());
        let out = forward(&mut s, xv, Preset::Cimt, model).expect("forward");
        let (_, pred, a) = out.cluster.expect("cimt has clusters");
        (
            s.tape.value(pred.seg_logits).clone(),
            s.tape.value(pred.cls_logits).clone(),
            s.tape.value(a.probs).clone(),
        )
    };
    for sample in samples(ds, Split::Test).into_iter().take(10) {
        let x = prepare_oracle(sample, model.roi_margin).expect("roi").image;
        let (z, cls, m) = run(&p64, &x);
        let v = m.shape()[1];
        for col in 0..v {
            let s: f64 = (0..n).map(|k| m.data()[k * v + col]).sum();
            col_err = col_err.max((s - 1.0).abs());
        }
        for perm in &perms {
            let q = permute_clusters(&p64, perm).expect("permutation");
            let (z2, cls2, _) = run(&q, &x);
            perm_err = perm_err.max(z.max_abs_diff(&z2)).max(cls.max_abs_diff(&cls2));
        }
    }
    Outcome {
        pass: col_err <= 1e-6 && perm_err <= 1e-5,
        detail: format!("trained cimt, 10 test cases: max |colsum-1| {col_err:.1e}; max permutation diff {perm_err:.1e}"),
    }
}

fn pair_auc(s: &[f64], l: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn exhaustive_p(a: &[bool], b: &[bool], l: &[u8], m: RateMetric) -> f64 {
    let class = u8::from(m == RateMetric::Sensitivity);
    let rate = |p: &[bool]| {
        let idx: Vec<usize> = (0..l.len()).filter(|&i| l[i] == class).collect();
        idx.iter().filter(|&&i| p[i] == (class == 1)).count() as f64 / idx.len() as f64
    };
    let obs = (rate(a) - rate(b)).abs();
    let n = a.len();
    let hits = (0..1u32 << n)
        .filter(|mask| {
            let (mut x, mut y) = (a.to_vec(), b.to_vec());
            for i in (0..n).filter(|i| mask >> i & 1 == 1) {
                std::mem::swap(&mut x[i], &mut y[i]);
            }
            (rate(&x) - rate(&y)).abs() >= obs - 1e-12
        })
        .count();
    hits as f64 / f64::from(1u32 << n)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::named(5, "acceptance");
    let mut auc_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(4..60);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12u8)) / 4.0).collect();
        let mut l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        (l[0], l[1]) = (0, 1);
        auc_ok += usize::from(auc(&s, &l).expect("both classes") == pair_auc(&s, &l));
    }

    let s: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
    let l: Vec<u8> = (0..80).map(|i| u8::from(i % 2 == 0)).collect();
    let self_p = delong_test(&s, &s, &l).expect("delong").p;

    let mut perm_err = 0.0f64;
    for _ in 0..10 {
        let l: Vec<u8> = (0..10).map(|i| u8::from(i < 5)).collect();
        let a: Vec<bool> = (0..10).map(|_| rng.random_bool(0.6)).collect();
        let b: Vec<bool> = (0..10).map(|_| rng.random_bool(0.4)).collect();
        for m in [RateMetric::Sensitivity, RateMetric::Specificity] {
            let mc = permutation_test(&a, &b, &l, m, 100_000, rng.random()).expect("permutation").p;
            perm_err = perm_err.max((mc - exhaustive_p(&a, &b, &l, m)).abs());
        }
    }

    // Positives N(1, 1), negatives N(0, 1): true AUC = Phi(1 / sqrt 2).
    let truth = 1.0 - normal_two_sided(std::f64::consts::FRAC_1_SQRT_2) / 2.0;
    let mut covered = 0;
    let worlds = 500;
    for w in 0..worlds {
        let mut draw = |shift: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + shift
        };
        let l: Vec<u8> = (0..200).map(|i| u8::from(i < 100)).collect();
        let s: Vec<f64> = l.iter().map(|&y| draw(f64::from(y))).collect();
        let cfg = BootstrapConfig { replicas: 1000, seed: w, ..BootstrapConfig::default() };
        let (ci, _) = bootstrap_ci(
            200,
            |idx| {
                let bs: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
                let bl: Vec<u8> = idx.iter().map(|&i| l[i]).collect();
                auc(&bs, &bl).ok()
            },
            &cfg,
        )
        .expect("bootstrap");
        covered += usize::from(ci.low <= truth && truth <= ci.high);
    }
    let coverage = covered as f64 / f64::from(worlds as u32);
    let took = start.elapsed();
    Outcome {
        pass: auc_ok == 1000
            && self_p == 1.0
            && perm_err <= 0.01
            && (0.93..=0.97).contains(&coverage)
            && took < Duration::from_secs(300),
        detail: format!(
            "auc oracle {auc_ok}/1000; delong(A,A) p={self_p}; permutation vs exhaustive max diff {perm_err:.4}; bootstrap coverage {coverage:.3}"
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = SplitMix64::named(6, "acceptance");
    let mut exact = 0;
    for _ in 0..50 {
        let n = rng.random_range(10..80);
        let l: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        let v: Vec<f64> = l
            .iter()
            .map(|&y| f64::from(rng.random_range(0..40u32) + 15 * u32::from(y)))
            .collect();
        let mut distinct = v.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        // Every cut between consecutive volumes, plus "nothing positive".
        let mut cands: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        cands.push(distinct[distinct.len() - 1] + 1.0);
        let j = |t: f64| {
            let tp = v.iter().zip(&l).filter(|(x, y)| **y == 1 && **x > t).count() as f64;
            let tn = v.iter().zip(&l).filter(|(x, y)| **y == 0 && **x <= t).count() as f64;
            let p = l.iter().filter(|y| **y == 1).count() as f64;
            tp / p + tn / (n as f64 - p)
        };
        let best = cands.iter().map(|&t| j(t)).fold(f64::NEG_INFINITY, f64::max);
        let oracle = cands.iter().copied().find(|&t| j(t) == best).expect("a candidate");
        exact += usize::from(s4c_select_threshold(&v, &l).expect("threshold") == oracle);
    }
    Outcome { pass: exact == 50, detail: format!("{exact}/50 thresholds equal the exhaustive scan") }
}

fn criterion_7() -> Outcome {
    let a: Vec<bool> = (0..199).map(|i| i < 100).collect();
    let b: Vec<bool> = (0..199).map(|i| i >= 99).collect();
    let r = localization_hit(&a, &b, 1).expect("same extents");
    let pass = r.dice == 0.01 && !r.hit && !is_localized(0.01) && is_localized(0.0100001);
    Outcome {
        pass,
        detail: format!(
            "dice {} -> hit {}; is_localized(0.01) = {}; is_localized(0.0100001) = {}",
            r.dice,
            r.hit,
            is_localized(0.01),
            is_localized(0.0100001)
        ),
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).expect("prefix").to_path_buf(), fs::read(&p).expect("readable")));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let d = tmp.path();
    let cfg = r#"{
      "data": { "n_train": 12, "n_val": 6, "n_test": 8, "extents": [16, 16, 16] },
      "train": { "epochs": 3, "pretrain_epochs": 3, "freeze_epochs": 1, "lr": 0.005 },
      "eval": { "bootstrap_replicas": 200 }
    }"#;
    fs::write(d.join("run.json"), cfg).expect("config written");
    let cimt = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_cimt"))
            .arg("--workdir")
            .arg(d)
            .args(["--seed", "11"])
            .args(args)
            .output()
            .expect("cimt runs");
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let mut same = Vec::new();
    for run in ["1", "2"] {
        let data = format!("data{run}");
        cimt(&["gen", "--config", "run.json", "--out", &data]);
        for preset in Preset::ALL.map(|p| p.name()) {
            let ck = format!("{preset}{run}");
            cimt(&["train", "--config", "run.json", "--data", &data, "--out", &ck, "--preset", preset]);
            cimt(&["eval", "--config", "run.json", "--checkpoint", &ck, "--data", &data, "--out", &format!("{ck}.json")]);
        }
    }
    same.push(("gen", tree(&d.join("data1")) == tree(&d.join("data2"))));
    for preset in Preset::ALL.map(|p| p.name()) {
        same.push((preset, tree(&d.join(format!("{preset}1"))) == tree(&d.join(format!("{preset}2")))));
        let report = |r: &str| fs::read(d.join(format!("{preset}{r}.json"))).expect("report");
        let roc = |r: &str| fs::read(d.join(format!("{preset}{r}.roc.csv"))).expect("roc");
        same.push(("report", report("1") == report("2") && roc("1") == roc("2")));
    }
    Outcome {
        pass: same.iter().all(|s| s.1),
        detail: format!(
            "byte-identical: {}",
            same.iter().map(|(n, ok)| format!("{n}={ok}")).collect::<Vec<_>>().join(" ")
        ),
    }
}

fn main() {
    // libtest-style flags from `cargo test` are ignored; a filter argument
    // other than "acceptance" skips the run.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    // CIMT_ACCEPTANCE_ONLY=3,5 runs a subset; criterion 4 needs criterion 1.
    let only: Option<Vec<usize>> = std::env::var("CIMT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let model = ModelConfig::default();
    let mut hard_failures = 0;
    let mut record = |n: usize, soft: bool, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n}: SKIPPED");
            return;
        }
        let t = Instant::now();
        let o = f();
        verdict(n, soft, &o, t.elapsed());
        if !o.pass && !soft {
            hard_failures += 1;
        }
    };
    let mut trained = None;
    record(1, false, &mut || {
        let (o, keep) = criterion_1(&model);
        trained = keep;
        o
    });
    record(2, true, &mut || criterion_2(&model));
    record(3, false, &mut criterion_3);
    record(4, false, &mut || match &trained {
        Some((params, ds)) => criterion_4(params, &model, ds),
        None => Outcome { pass: false, detail: "no trained checkpoint".into() },
    });
    record(5, false, &mut criterion_5);
    record(6, false, &mut criterion_6);
    record(7, false, &mut criterion_7);
    record(8, false, &mut criterion_8);
    if hard_failures > 0 {
        println!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
