use cimt_core::maskformer::LossWeights;
use cimt_core::model::{forward, init_params, loss, Preset};
use cimt_core::optim::{Radam, RadamConfig};
use cimt_core::phantom::{make_splits, Dataset, DatasetConfig, DifficultyConfig, Split};
use cimt_core::rng::SplitMix64;
use cimt_core::train::*;
use cimt_core::volume::{LabelMap, TUMOR};
use cimt_core::{ModelConfig, ParamStore, Session, Tensor, VolumeSample};
use proptest::prelude::*;

mod common;
use common::{noise, uniform};

fn one_param(values: &[f64]) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::from_f64(vec![values.len()], values).unwrap());
    p
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let mut p = one_param(&[0.5, -1.5, 2.0]);
    let before = p.clone();
    let g = one_param(&[0.0; 3]);
    let mut opt = Radam::new(RadamConfig::default());
    for _ in 0..20 {
        opt.step(&mut p, &g, |_| 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn first_step_is_plain_momentum() {
    let c = RadamConfig::default();
    let rho_inf = 2.0 / (1.0 - 0.999) - 1.0;
    let rho1 = rho_inf - 2.0 * 0.999 / (1.0 - 0.999);
    assert!((c.rho(1) - rho1).abs() < 1e-9);
    assert!(rho1 <= 4.0);
    assert!(c.rectifier(1).is_none());

    let mut p = one_param(&[1.0, 2.0]);
    let g = one_param(&[0.25, -3.0]);
    Radam::new(c).step(&mut p, &g, |_| 0.01).unwrap();
    // m̂ equals the gradient after one bias-corrected step.
    assert!((f64::from(p.get("w").unwrap().data()[0]) - (1.0 - 0.01 * 0.25)).abs() < 1e-6);
    assert!((f64::from(p.get("w").unwrap().data()[1]) - (2.0 + 0.01 * 3.0)).abs() < 1e-6);
}

/// Independent f64 transcription of the published recurrences.
fn radam_reference(grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut m, mut v, mut theta) = (0.0, 0.0, 0.0);
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let rho = rho_inf - 2.0 * f64::from(t) * b2.powi(t) / (1.0 - b2.powi(t));
        if rho > 4.0 {
            let v_hat = (v / (1.0 - b2.powi(t))).sqrt();
            let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
            theta -= lr * r * m_hat / (v_hat + eps);
        } else {
            theta -= lr * m_hat;
        }
    }
    theta
}

#[test]
fn many_steps_match_reference_recurrence() {
    let gs: Vec<f64> = uniform(40, 3).iter().map(|u| u * 4.0).collect();
    let mut p = one_param(&[0.0]);
    let mut opt = Radam::new(RadamConfig::default());
    for &g in &gs {
        opt.step(&mut p, &one_param(&[g]), |_| 1e-3).unwrap();
    }
    let want = radam_reference(&gs, 1e-3);
    let got = f64::from(p.get("w").unwrap().item());
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    assert_eq!(opt.slots["w"].t, 40);
}

#[test]
fn group_multiplier_scales_updates_tenfold() {
    let gs = uniform(12, 8);
    let mut p = ParamStore::new();
    p.insert("backbone.w", Tensor::<f32>::zeros(vec![1]));
    p.insert("head.w", Tensor::<f32>::zeros(vec![1]));
    let mut opt = Radam::new(RadamConfig::default());
    for &g in &gs {
        let mut grads = ParamStore::new();
        grads.insert("backbone.w", Tensor::from_f64(vec![1], &[g]).unwrap());
        grads.insert("head.w", Tensor::from_f64(vec![1], &[g]).unwrap());
        let before = (f64::from(p.get("backbone.w").unwrap().item()), f64::from(p.get("head.w").unwrap().item()));
        opt.step(&mut p, &grads, |n| if n.starts_with("backbone") { 0.1 } else { 1.0 }).unwrap();
        let db = f64::from(p.get("backbone.w").unwrap().item()) - before.0;
        let dh = f64::from(p.get("head.w").unwrap().item()) - before.1;
        if dh.abs() > 1e-3 {
            assert!((dh / db - 10.0).abs() < 1e-3, "{dh} / {db}");
        }
    }
}

#[test]
fn non_finite_gradient_is_refused_without_side_effects() {
    let mut p = one_param(&[1.0, 2.0]);
    let before = p.clone();
    let mut opt = Radam::new(RadamConfig::default());
    assert!(opt.step(&mut p, &one_param(&[f64::NAN, 1.0]), |_| 0.1).is_err());
    assert_eq!(p, before);
    assert!(opt.slots.is_empty());
}

#[test]
fn train_config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    assert_eq!(ok.lr, 1e-4);
    assert_eq!(ok.backbone_lr_multiplier, 0.1);
    let paper = TrainConfig::paper_schedule();
    assert_eq!((paper.epochs, paper.freeze_epochs), (1000, 50));
    for bad in [
        TrainConfig { lr: 0.0, ..ok.clone() },
        TrainConfig { freeze_epochs: 41, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { augment: AugmentConfig { flips: true, intensity_scale: 1.0 }, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn sample_volume(seed: u64) -> (Tensor<f32>, LabelMap) {
    let img = noise(vec![1, 3, 4, 5], seed);
    let lab = LabelMap::new([3, 4, 5], uniform(60, seed ^ 9).iter().map(|u| ((u + 0.5) * 3.0) as u8).collect()).unwrap();
    (img, lab)
}

proptest! {
    #[test]
    fn flips_are_involutions(seed in any::<u64>(), axis in 0usize..3) {
        let (img, lab) = sample_volume(seed);
        let (i1, l1) = flip_axis(&img, &lab, axis);
        for k in 0..3u8 {
            prop_assert_eq!(l1.count(k), lab.count(k));
        }
        let (i2, l2) = flip_axis(&i1, &l1, axis);
        prop_assert_eq!(i2, img);
        prop_assert_eq!(l2, lab);
    }

    #[test]
    fn augmentation_keeps_labels_aligned(seed in any::<u64>()) {
        let (_, lab) = sample_volume(seed);
        // Encode each voxel's label in its intensity so misalignment shows.
        let img = Tensor::new(vec![1, 3, 4, 5], lab.data().iter().map(|&l| f32::from(l) + 1.0).collect()).unwrap();
        let mut rng = SplitMix64::new(seed);
        let (ai, al) = augment(&img, &lab, &mut rng, &AugmentConfig::default());
        for k in 0..3u8 {
            prop_assert_eq!(al.count(k), lab.count(k));
        }
        let s = ai.data()[0] / (f32::from(al.data()[0]) + 1.0);
        prop_assert!((0.9..=1.1).contains(&s));
        for (v, &l) in ai.data().iter().zip(al.data()) {
            prop_assert!((v / (f32::from(l) + 1.0) - s).abs() < 1e-6);
        }
    }

    #[test]
    fn s4c_positive_calls_are_monotone_in_volume(threshold in 0.0f64..40.0, a in 0usize..60, b in 0usize..60) {
        let (lo, hi) = (a.min(b), a.max(b));
        let make = |k: usize| {
            let mut m = LabelMap::filled([4, 4, 4], 1);
            m.data_mut()[..k].fill(TUMOR);
            m
        };
        let (p_lo, v_lo) = s4c_classify(&make(lo), threshold);
        let (p_hi, v_hi) = s4c_classify(&make(hi), threshold);
        prop_assert_eq!((v_lo, v_hi), (lo, hi));
        prop_assert!(!p_lo || p_hi);
    }
}

#[test]
fn disabled_augmentation_passes_through() {
    let (img, lab) = sample_volume(4);
    let mut rng = SplitMix64::new(0);
    let (ai, al) = augment(&img, &lab, &mut rng, &AugmentConfig::disabled());
    assert_eq!(ai, img);
    assert_eq!(al, lab);
}

#[test]
fn s4c_threshold_examples() {
    let t = s4c_select_threshold(&[120.0, 300.0, 0.0, 4.0], &[1, 1, 0, 0]).unwrap();
    assert_eq!(t, 62.0);
    let t = s4c_select_threshold(&[7.0; 4], &[1, 0, 1, 0]).unwrap();
    assert!(t > 7.0);
    assert!(s4c_select_threshold(&[1.0, 2.0], &[1, 1]).is_err());
}

#[test]
fn s4c_threshold_beats_exhaustive_scan() {
    for inst in 0..50u64 {
        let n = 6 + (inst as usize % 15);
        let u = uniform(2 * n, inst);
        let volumes: Vec<f64> = u[..n].iter().map(|x| ((x + 0.5) * 30.0).floor()).collect();
        let mut labels: Vec<u8> = u[n..].iter().map(|x| u8::from(*x > 0.0)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let j = |t: f64| {
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
            let neg = labels.len() as f64 - pos;
            let tp = volumes.iter().zip(&labels).filter(|(v, l)| **l == 1 && **v > t).count() as f64;
            let tn = volumes.iter().zip(&labels).filter(|(v, l)| **l == 0 && **v <= t).count() as f64;
            tp / pos + tn / neg
        };
        // Every integer and half-integer threshold in range.
        let best = (-2..=64).map(|k| j(f64::from(k) / 2.0)).fold(f64::NEG_INFINITY, f64::max);
        let t = s4c_select_threshold(&volumes, &labels).unwrap();
        assert!((j(t) - best).abs() < 1e-12, "instance {inst}");
        let mut uniq = volumes.clone();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let lowest = uniq
            .windows(2)
            .map(|w| (w[0] + w[1]) / 2.0)
            .chain([uniq[uniq.len() - 1] + 1.0])
            .find(|&x| (j(x) - best).abs() < 1e-12)
            .unwrap();
        assert_eq!(t, lowest, "instance {inst}");
    }
}

#[test]
fn s4c_classify_boundary() {
    let mut m = LabelMap::filled([2, 2, 2], 0);
    assert_eq!(s4c_classify(&m, 0.5), (false, 0));
    m.data_mut()[..3].fill(TUMOR);
    assert_eq!(s4c_classify(&m, 3.0), (false, 3));
    assert_eq!(s4c_classify(&m, 2.5), (true, 3));
}

fn tiny_data(seed: u64, delta: f64) -> Dataset {
    let cfg = DatasetConfig {
        n_train: 6,
        n_val: 4,
        n_test: 2,
        prevalence: 0.5,
        base_seed: seed,
        extents: [16; 3],
        difficulty: DifficultyConfig::with_contrast(delta),
    };
    Dataset::generate(make_splits(&cfg).unwrap()).unwrap()
}

fn refs(ds: &Dataset, split: Split) -> Vec<&VolumeSample> {
    ds.split(split).into_iter().map(|(_, s)| s).collect()
}

fn small_train(pretrain: usize, epochs: usize, freeze: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        pretrain_epochs: pretrain,
        freeze_epochs: freeze,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_epochs_leave_backbone_untouched() {
    let ds = tiny_data(1, 3.0);
    let model = ModelConfig::default();
    let cfg = small_train(1, 3, 2);
    let t = Trainer::new(Preset::Cimt, &model, &cfg, &refs(&ds, Split::Train), &refs(&ds, Split::Val)).unwrap();
    let mut st = t.init_state().unwrap();
    let backbone = |p: &ParamStore<f32>| p.with_prefix("backbone");
    let head = |p: &ParamStore<f32>| p.with_prefix("decoder");
    let init_head = head(&st.params);
    t.run(&mut st, Some(1)).unwrap();
    let after_pretrain = backbone(&st.params);
    assert_eq!(head(&st.params), init_head, "pretraining touched the decoder");
    t.run(&mut st, Some(3)).unwrap();
    assert_eq!(backbone(&st.params), after_pretrain, "frozen epochs moved the backbone");
    assert_ne!(head(&st.params), init_head);
    assert!(st.log.iter().all(|l| l.frozen && l.backbone_lr == 0.0));
    t.run(&mut st, None).unwrap();
    assert_ne!(backbone(&st.params), after_pretrain);
    let last = st.log.last().unwrap();
    assert!(!last.frozen);
    assert!((last.backbone_lr - cfg.lr * 0.1).abs() < 1e-15);
    // The localizer copy is taken once, at the start of stage B.
    let loc: ParamStore<f32> = st.params.with_prefix("localizer");
    assert_eq!(loc.len(), after_pretrain.len());
    for (n, v) in loc.iter() {
        assert_eq!(Some(v), after_pretrain.get(&n.replacen("localizer", "backbone", 1)));
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let ds = tiny_data(2, 3.0);
    let model = ModelConfig::default();
    let cfg = small_train(1, 2, 1);
    let (tr, va) = (refs(&ds, Split::Train), refs(&ds, Split::Val));
    let t = Trainer::new(Preset::Cimt, &model, &cfg, &tr, &va).unwrap();

    let mut straight = t.init_state().unwrap();
    t.run(&mut straight, None).unwrap();

    let mut first = t.init_state().unwrap();
    t.run(&mut first, Some(2)).unwrap();
    let (tensors, meta) = first.to_parts();
    let json = serde_json::to_string(&meta).unwrap();
    let mut resumed = TrainState::from_parts(&tensors, serde_json::from_str(&json).unwrap(), cfg.optimizer.clone()).unwrap();
    t.run(&mut resumed, None).unwrap();

    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.pretrain_log, straight.pretrain_log);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.best.as_ref().map(|b| b.epoch), straight.best.as_ref().map(|b| b.epoch));
}

#[test]
fn forked_stage_b_equals_training_from_scratch() {
    let ds = tiny_data(3, 3.0);
    let model = ModelConfig::default();
    let cfg = small_train(1, 1, 0);
    let (tr, va) = (refs(&ds, Split::Train), refs(&ds, Split::Val));
    let s4c = Trainer::new(Preset::UnetS4c, &model, &cfg, &tr, &va).unwrap();
    let mut pre = s4c.init_state().unwrap();
    s4c.run(&mut pre, Some(1)).unwrap();
    for preset in [Preset::Cimt, Preset::UnetJoint] {
        let t = Trainer::new(preset, &model, &cfg, &tr, &va).unwrap();
        let mut forked = t.fork(&pre).unwrap();
        t.run(&mut forked, None).unwrap();
        let mut scratch = t.init_state().unwrap();
        t.run(&mut scratch, None).unwrap();
        assert_eq!(forked.params, scratch.params, "{preset}");
        assert_eq!(forked.log, scratch.log);
    }
    let t = Trainer::new(Preset::Cimt, &model, &cfg, &tr, &va).unwrap();
    assert!(t.fork(&s4c.init_state().unwrap()).is_err());
}

#[test]
fn training_is_deterministic_and_reports_completion() {
    let ds = tiny_data(4, 3.0);
    let model = ModelConfig::default();
    let cfg = small_train(1, 1, 0);
    let (tr, va) = (refs(&ds, Split::Train), refs(&ds, Split::Val));
    let a = train(Preset::UnetS4c, &model, &cfg, &tr, &va).unwrap();
    let b = train(Preset::UnetS4c, &model, &cfg, &tr, &va).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    let vt = a.volume_threshold.unwrap();
    assert_eq!(a.threshold.threshold, volume_score_threshold(vt));
    assert!(!a.params.contains("decoder.queries"));
    let j = joint_baseline(&model, &cfg, &tr, &va).unwrap();
    assert!(j.volume_threshold.is_none());
    assert!(j.params.contains("head.joint.l2.w"));
}

#[test]
fn empty_or_single_class_validation_is_rejected() {
    let ds = tiny_data(5, 3.0);
    let model = ModelConfig::default();
    let cfg = small_train(1, 1, 0);
    let tr = refs(&ds, Split::Train);
    assert!(Trainer::new(Preset::Cimt, &model, &cfg, &tr, &[]).is_err());
    let negs: Vec<&VolumeSample> = tr.iter().copied().filter(|s| s.patient_label == 0).collect();
    assert!(Trainer::new(Preset::Cimt, &model, &cfg, &tr, &negs).is_err());
    assert!(Trainer::new(Preset::Cimt, &model, &cfg, &[], &tr).is_err());
}

#[test]
fn training_loss_falls_on_easy_phantoms() {
    let model = ModelConfig::default();
    let cfg = TrainConfig { augment: AugmentConfig::disabled(), ..small_train(4, 1, 0) };
    for seed in 0..5 {
        let ds = tiny_data(10 + seed, 3.0);
        let t = Trainer::new(Preset::UnetS4c, &model, &cfg, &refs(&ds, Split::Train), &refs(&ds, Split::Val)).unwrap();
        let mut st = t.init_state().unwrap();
        t.run(&mut st, None).unwrap();
        let first = st.pretrain_log.first().unwrap().loss.total;
        let last = st.pretrain_log.last().unwrap().loss.total;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn zero_classification_weight_starves_the_joint_head() {
    let model = ModelConfig::default();
    let p = init_params(Preset::UnetJoint, &model, 0).unwrap();
    let x = noise::<f32>(vec![1, 8, 8, 8], 1);
    let labels = LabelMap::filled([8; 3], 1);
    let grads = |cls: f64| {
        let mut s = Session::training(&p);
        let xv = s.tape.constant(x.clone());
        let out = forward(&mut s, xv, Preset::UnetJoint, &model).unwrap();
        assert_eq!(s.tape.shape(out.cls_logits.unwrap()), &[1, 2]);
        let w = LossWeights { cls, ..LossWeights::default() };
        let (l, _) = loss(&mut s, &out, &labels, 1, &w).unwrap();
        s.gradients(l).unwrap()
    };
    let head_mass = |g: &ParamStore<f32>| -> f32 {
        g.iter().filter(|(n, _)| n.starts_with("head.joint")).map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f32>()).sum()
    };
    assert_eq!(head_mass(&grads(0.0)), 0.0);
    assert!(head_mass(&grads(1.0)) > 0.0);
}
