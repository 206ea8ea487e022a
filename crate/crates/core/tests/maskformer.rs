use cimt_core::maskformer::*;
use cimt_core::model::{forward, init_params, loss, Preset};
use cimt_core::params::AssignmentMode;
use cimt_core::volume::{LabelMap, NUM_CLASSES};
use cimt_core::{ModelConfig, ParamStore, Session, Tensor};
use proptest::prelude::*;

mod common;
use common::{noise, random_store, uniform};

fn cfg(n: usize, c: usize, stages: usize) -> DecoderConfig {
    DecoderConfig {
        num_clusters: n,
        channels: c,
        heads: 2,
        ffn_hidden: 6,
        cls_hidden: 5,
        stages,
        query_init_std: 0.02,
    }
}

fn decoder_params(d: &DecoderConfig, level_width: usize, seed: u64) -> ParamStore<f64> {
    let widths = vec![level_width; d.stages];
    let shapes = decoder_param_shapes(d, &widths, level_width);
    random_store(&shapes, seed, 2.0)
}

fn value(s: &Session<'_, f64>, v: cimt_core::Var) -> Tensor<f64> {
    s.tape.value(v).clone()
}

#[test]
fn hard_assignment_matches_brute_force_argmax() {
    let d = cfg(4, 4, 1);
    let p = decoder_params(&d, 3, 11);
    let feat = noise::<f64>(vec![3, 1, 4, 5], 12);
    let mut s = Session::inference(&p);
    s.assignments = AssignmentMode::Record(Vec::new());
    let centers = s.param("decoder.queries").unwrap();
    let f = s.tape.constant(feat.clone());
    let (_, logits) = decoder_stage(&mut s, centers, f, 0, &d).unwrap();
    let recorded = match &s.assignments {
        AssignmentMode::Record(v) => v[0].clone(),
        _ => unreachable!(),
    };

    let get = |n: &str| p.get(n).unwrap().data().to_vec();
    let (q0, wq, wk) = (get("decoder.queries"), get("decoder.s0.cross.q.w"), get("decoder.s0.cross.k.w"));
    let x = feat.data();
    let (n, c, cl, v) = (4, 4, 3, 20);
    let mut expected = vec![0.0; n * v];
    let mut want_logits = vec![0.0; n * v];
    for vox in 0..v {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..n {
            let mut r = 0.0;
            for ch in 0..c {
                let q: f64 = (0..c).map(|j| q0[i * c + j] * wq[j * c + ch]).sum();
                let k: f64 = (0..cl).map(|j| wk[ch * cl + j] * x[j * v + vox]).sum();
                r += q * k;
            }
            r /= (c as f64).sqrt();
            want_logits[i * v + vox] = r;
            if r > best.1 {
                best = (i, r);
            }
        }
        expected[best.0 * v + vox] = 1.0;
    }
    assert_eq!(recorded.data(), &expected[..]);
    for (a, b) in value(&s, logits).data().iter().zip(&want_logits) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_winner_collects_every_voxel_value() {
    let mut tape = cimt_core::Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(vec![3, 5], &[1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap());
    let vp = noise::<f64>(vec![2, 5], 3);
    let vt = tape.constant(vp.clone());
    let vt = tape.transpose(vt).unwrap();
    let upd = tape.matmul(a, vt).unwrap();
    let u = tape.value(upd).data().to_vec();
    for ch in 0..2 {
        let total: f64 = vp.data()[ch * 5..(ch + 1) * 5].iter().sum();
        assert!((u[ch] - total).abs() < 1e-12);
    }
    assert!(u[2..].iter().all(|&x| x == 0.0));
}

#[test]
fn zero_value_projection_makes_features_irrelevant() {
    let d = cfg(3, 4, 1);
    let mut p = decoder_params(&d, 3, 4);
    p.get_mut("decoder.s0.cross.v.w").unwrap().data_mut().fill(0.0);
    let out = |seed| {
        let mut s = Session::inference(&p);
        let c = s.param("decoder.queries").unwrap();
        let f = s.tape.constant(noise::<f64>(vec![3, 2, 2, 2], seed));
        let (o, _) = decoder_stage(&mut s, c, f, 0, &d).unwrap();
        value(&s, o)
    };
    assert_eq!(out(1), out(2));
}

#[test]
fn fewer_than_two_clusters_is_a_config_error() {
    assert!(cfg(1, 4, 1).validate().is_err());
    assert!(cfg(2, 4, 1).validate().is_ok());
    assert!(DecoderConfig { heads: 3, ..cfg(2, 4, 1) }.validate().is_err());
}

#[test]
fn four_stages_record_per_stage_logits() {
    let d = cfg(3, 4, 4);
    let p = decoder_params(&d, 2, 5);
    let extents = [[1, 1, 1], [2, 2, 2], [4, 2, 2], [8, 4, 4]];
    let run = || {
        let mut s = Session::inference(&p);
        let levels: Vec<_> = extents
            .iter()
            .enumerate()
            .map(|(i, e)| s.tape.constant(noise::<f64>(vec![2, e[0], e[1], e[2]], i as u64)))
            .collect();
        let st = run_decoder(&mut s, &levels, &d).unwrap();
        let shapes: Vec<Vec<usize>> = st.per_stage_logits.iter().map(|&v| s.tape.shape(v).to_vec()).collect();
        (value(&s, st.centers), shapes, st.stage_extents.clone())
    };
    let (c1, shapes, ext) = run();
    let (c2, _, _) = run();
    assert_eq!(c1, c2);
    assert_eq!(shapes.len(), 4);
    for (sh, e) in shapes.iter().zip(&extents) {
        assert_eq!(sh, &vec![3, e[0] * e[1] * e[2]]);
    }
    assert_eq!(ext, extents.to_vec());
    assert_eq!(c1.shape(), &[3, 4]);
}

#[test]
fn level_count_mismatch_is_rejected() {
    let d = cfg(3, 4, 2);
    let p = decoder_params(&d, 2, 5);
    let mut s = Session::inference(&p);
    let l = s.tape.constant(noise::<f64>(vec![2, 1, 1, 1], 0));
    assert!(run_decoder(&mut s, &[l], &d).is_err());
}

#[test]
fn one_stage_decoder_is_one_decoder_stage() {
    let d = cfg(3, 4, 1);
    let p = decoder_params(&d, 2, 6);
    let feat = noise::<f64>(vec![2, 2, 2, 2], 7);
    let mut s = Session::inference(&p);
    let f = s.tape.constant(feat.clone());
    let st = run_decoder(&mut s, &[f], &d).unwrap();
    let mut s2 = Session::inference(&p);
    let c = s2.param("decoder.queries").unwrap();
    let f2 = s2.tape.constant(feat);
    let (o, _) = decoder_stage(&mut s2, c, f2, 0, &d).unwrap();
    assert_eq!(value(&s, st.centers), value(&s2, o));
}

#[test]
fn identical_centers_give_uniform_assignment() {
    let mut tape = cimt_core::Tape::<f64>::new();
    let row = uniform(4, 1);
    let c = tape.constant(Tensor::from_f64(vec![5, 4], &row.repeat(5)).unwrap());
    let f = tape.constant(noise::<f64>(vec![4, 9], 2));
    let a = assign(&mut tape, c, f).unwrap();
    assert!(tape.value(a.probs).data().iter().all(|&m| (m - 0.2).abs() < 1e-12));
}

#[test]
fn aligned_center_wins_assignment() {
    let mut tape = cimt_core::Tape::<f64>::new();
    let c = tape.constant(Tensor::from_f64(vec![3, 3], &[0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap());
    let f = tape.constant(Tensor::from_f64(vec![3, 2], &[0., 0., 2., 5., 0., 0.]).unwrap());
    let a = assign(&mut tape, c, f).unwrap();
    let m = tape.value(a.probs).data().to_vec();
    for vox in 0..2 {
        assert!(m[vox] > m[2 + vox] && m[vox] > m[4 + vox]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn assignment_columns_sum_to_one(seed in any::<u64>(), n in 2usize..9, c in 1usize..6, v in 1usize..30) {
        let mut tape = cimt_core::Tape::<f64>::new();
        let mut ct = noise::<f64>(vec![n, c], seed);
        ct.data_mut().iter_mut().for_each(|x| *x *= 20.0);
        let cv = tape.constant(ct);
        let f = tape.constant(noise::<f64>(vec![c, v], seed.wrapping_add(1)));
        let a = assign(&mut tape, cv, f).unwrap();
        let m = tape.value(a.probs).data();
        for vox in 0..v {
            let s: f64 = (0..n).map(|i| m[i * v + vox]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shifting_logits_along_clusters_changes_nothing(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let (n, v) = (4, 7);
        let r = noise::<f64>(vec![n, v], seed);
        let per_voxel = uniform(v, seed ^ 1);
        let mut shifted = r.clone();
        for i in 0..n {
            for vox in 0..v {
                shifted.data_mut()[i * v + vox] += shift * per_voxel[vox];
            }
        }
        let mut tape = cimt_core::Tape::<f64>::new();
        let (a, b) = (tape.constant(r), tape.constant(shifted));
        let (ma, mb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
        prop_assert!(tape.value(ma).max_abs_diff(tape.value(mb)) < 1e-12);
        let ck = tape.constant(noise::<f64>(vec![NUM_CLASSES, n], seed ^ 2));
        let (za, zb) = (tape.matmul(ck, ma).unwrap(), tape.matmul(ck, mb).unwrap());
        prop_assert!(tape.value(za).max_abs_diff(tape.value(zb)) < 1e-12);
        let (ha, hb) = (tape.argmax_onehot(a, 0).unwrap(), tape.argmax_onehot(b, 0).unwrap());
        prop_assert_eq!(tape.value(ha), tape.value(hb));
    }
}

fn head_params(n: usize, c: usize, seed: u64) -> ParamStore<f64> {
    decoder_params(&cfg(n, c, 1), 2, seed)
}

#[test]
fn segment_one_hot_selects_cluster_column() {
    let (n, c, v) = (3, 4, 6);
    let p = head_params(n, c, 8);
    let mut s = Session::inference(&p);
    let centers = s.tape.constant(noise::<f64>(vec![n, c], 9));
    let ck = cluster_classes(&mut s, centers).unwrap();
    let ck = value(&s, ck);
    for j in 0..n {
        let mut onehot = vec![0.0; n * v];
        onehot[j * v..(j + 1) * v].fill(1.0);
        let probs = s.tape.constant(Tensor::from_f64(vec![n, v], &onehot).unwrap());
        let a = ClusterAssignment { logits: probs, probs };
        let z = segment(&mut s, &a, centers).unwrap();
        let z = value(&s, z);
        for k in 0..NUM_CLASSES {
            for vox in 0..v {
                assert!((z.data()[k * v + vox] - ck.data()[j * NUM_CLASSES + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_cluster_classes_give_uniform_class_probabilities() {
    let (n, c) = (3, 4);
    let mut p = head_params(n, c, 8);
    for name in ["head.ck.l2.w", "head.ck.l2.b"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut s = Session::inference(&p);
    let centers = s.tape.constant(noise::<f64>(vec![n, c], 9));
    let f = s.tape.constant(noise::<f64>(vec![c, 5], 10));
    let a = assign(&mut s.tape, centers, f).unwrap();
    let z = segment(&mut s, &a, centers).unwrap();
    assert!(s.tape.value(z).data().iter().all(|&x| x == 0.0));
    let pr = s.tape.softmax(z, 0).unwrap();
    assert!(s.tape.value(pr).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn segment_matches_matmul_oracle() {
    let (n, c, v) = (5, 4, 11);
    let p = head_params(n, c, 13);
    let mut s = Session::inference(&p);
    let centers = s.tape.constant(noise::<f64>(vec![n, c], 14));
    let f = s.tape.constant(noise::<f64>(vec![c, v], 15));
    let a = assign(&mut s.tape, centers, f).unwrap();
    let z = segment(&mut s, &a, centers).unwrap();
    let ck = cluster_classes(&mut s, centers).unwrap();
    let (ck, m, z) = (value(&s, ck), value(&s, a.probs), value(&s, z));
    for k in 0..NUM_CLASSES {
        for vox in 0..v {
            let want: f64 = (0..n).map(|i| ck.data()[i * NUM_CLASSES + k] * m.data()[i * v + vox]).sum();
            assert!((z.data()[k * v + vox] - want).abs() < 1e-5);
        }
    }
}

fn classify_paths(p: &ParamStore<f64>, centers: Tensor<f64>, r: Tensor<f64>) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut s = Session::inference(p);
    let c = s.tape.constant(centers);
    let logits = s.tape.constant(r);
    let probs = s.tape.softmax(logits, 0).unwrap();
    let (cls, cbar, rbar) = classify(&mut s, c, &ClusterAssignment { logits, probs }).unwrap();
    (value(&s, cbar).into_data(), value(&s, rbar).into_data(), s.tape.shape(cls).to_vec())
}

#[test]
fn classify_paths_examples() {
    let (n, c, v) = (3, 4, 6);
    let p = head_params(n, c, 20);
    let row = uniform(c, 21);
    let mut r = noise::<f64>(vec![n, v], 22);
    r.data_mut()[v..2 * v].fill(0.7);
    let (cbar, rbar, cls_shape) = classify_paths(&p, Tensor::from_f64(vec![n, c], &row.repeat(n)).unwrap(), r.clone());
    assert_eq!(cls_shape, vec![1, 2]);
    for (a, b) in cbar.iter().zip(&row) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(rbar[1], 0.7);
    for i in 0..n {
        let m = r.data()[i * v..(i + 1) * v].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rbar[i], m);
    }
}

#[test]
fn raising_one_voxel_moves_only_its_cluster_coordinate() {
    let (n, c, v) = (4, 4, 9);
    let p = head_params(n, c, 30);
    let centers = noise::<f64>(vec![n, c], 31);
    let r = noise::<f64>(vec![n, v], 32);
    let (_, before, _) = classify_paths(&p, centers.clone(), r.clone());
    let mut r2 = r.clone();
    let (i, vox) = (2, 5);
    r2.data_mut()[i * v + vox] = 2.0 * before[i].abs() + 1.0;
    let (_, after, _) = classify_paths(&p, centers, r2.clone());
    for j in 0..n {
        if j == i {
            assert_eq!(after[j], r2.data()[i * v + vox]);
        } else {
            assert_eq!(after[j], before[j]);
        }
    }
}

#[test]
fn perfect_prediction_has_near_zero_segmentation_loss() {
    let labels = LabelMap::new([1, 2, 3], vec![0, 1, 2, 2, 1, 0]).unwrap();
    let mut tape = cimt_core::Tape::<f64>::new();
    let oh = labels.one_hot::<f64>().reshape(vec![NUM_CLASSES, 6]).unwrap();
    let mut z = oh.clone();
    z.data_mut().iter_mut().for_each(|x| *x = if *x > 0.0 { 1e3 } else { -1e3 });
    let target = target_onehot(&mut tape, &labels).unwrap();
    let zv = tape.constant(z);
    let (dice, ce) = seg_loss(&mut tape, zv, target).unwrap();
    assert!(tape.value(dice).item() < 1e-6);
    let ce = tape.value(ce).item();
    assert!(ce > 0.0 && ce < 1e-7, "{ce}");
}

#[test]
fn uniform_classification_logits_cost_ln2() {
    for label in [0, 1] {
        let mut tape = cimt_core::Tape::<f64>::new();
        let z = tape.constant(Tensor::full(vec![1, 2], 0.3));
        let l = cls_loss(&mut tape, z, label).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
    let mut tape = cimt_core::Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(vec![1, 2]));
    assert!(cls_loss(&mut tape, z, 2).is_err());
}

#[test]
fn half_overlapping_masks_have_dice_loss_one_half() {
    // Class 1 predicted on voxels 0..4, true on 2..6; class 2 likewise shifted.
    let v = 16;
    let mut pred = vec![0u8; v];
    let mut truth = vec![0u8; v];
    pred[0..4].fill(1);
    truth[2..6].fill(1);
    pred[8..12].fill(2);
    truth[10..14].fill(2);
    let p = LabelMap::new([1, 1, v], pred).unwrap();
    let t = LabelMap::new([1, 1, v], truth).unwrap();
    let mut expected = 0.0;
    for k in 1..NUM_CLASSES as u8 {
        let (a, b) = (p.mask(k), t.mask(k));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let size = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
        expected += 1.0 - 2.0 * inter / size;
    }
    expected /= 2.0;
    assert_eq!(expected, 0.5);
    let mut tape = cimt_core::Tape::<f64>::new();
    let probs = tape.constant(p.one_hot::<f64>().reshape(vec![NUM_CLASSES, v]).unwrap());
    let target = target_onehot(&mut tape, &t).unwrap();
    let d = soft_dice(&mut tape, probs, target).unwrap();
    assert!((tape.value(d).item() - expected).abs() < 1e-5);
}

fn cimt_params(seed: u64) -> (ParamStore<f32>, ModelConfig) {
    let cfg = ModelConfig::default();
    let mut p = init_params(Preset::Cimt, &cfg, seed).unwrap();
    // Spread the queries so clusters are distinguishable.
    let q = p.get_mut("decoder.queries").unwrap();
    let jitter = uniform(q.numel(), seed);
    q.data_mut().iter_mut().zip(jitter).for_each(|(x, j)| *x += j as f32);
    (p, cfg)
}

fn cimt_outputs(p: &ParamStore<f32>, cfg: &ModelConfig, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>, Vec<f32>, Vec<f32>) {
    let mut s = Session::inference(p);
    let xv = s.tape.constant(x.clone());
    let out = forward(&mut s, xv, Preset::Cimt, cfg).unwrap();
    let (_, pred, a) = out.cluster.as_ref().unwrap();
    let r = s.tape.value(a.logits).clone();
    let v = r.shape()[1];
    let row_max = (0..r.shape()[0])
        .map(|i| r.data()[i * v..(i + 1) * v].iter().cloned().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    (
        s.tape.value(pred.seg_logits).clone(),
        s.tape.value(pred.cls_logits).clone(),
        s.tape.value(pred.pixel_path).data().to_vec(),
        row_max,
    )
}

#[test]
fn pixel_path_is_the_max_of_the_final_assignment_logits() {
    let (p, cfg) = cimt_params(1);
    let (_, _, rbar, row_max) = cimt_outputs(&p, &cfg, &noise(vec![1, 8, 8, 8], 2));
    assert_eq!(rbar, row_max);
}

#[test]
fn relabeling_clusters_leaves_outputs_unchanged() {
    let (p, cfg) = cimt_params(3);
    let x = noise(vec![1, 8, 8, 16], 4);
    let (z, cls, _, _) = cimt_outputs(&p, &cfg, &x);
    for perm in [[1, 0, 2, 3, 4, 5, 6, 7], [7, 6, 5, 4, 3, 2, 1, 0], [3, 5, 0, 7, 1, 2, 6, 4]] {
        let q = permute_clusters(&p, &perm).unwrap();
        let (z2, cls2, _, _) = cimt_outputs(&q, &cfg, &x);
        assert!(z.max_abs_diff(&z2) < 1e-4, "{}", z.max_abs_diff(&z2));
        assert!(cls.max_abs_diff(&cls2) < 1e-4);
    }
    assert!(permute_clusters(&p, &[0, 0, 1, 2, 3, 4, 5, 6]).is_err());
}

#[test]
fn query_and_key_projections_learn_only_from_deep_supervision() {
    let (p, cfg) = cimt_params(5);
    let p = p.cast::<f64>();
    let x = noise::<f64>(vec![1, 8, 8, 8], 6);
    let labels = LabelMap::new([8; 3], uniform(512, 7).iter().map(|u| ((u + 0.5) * 3.0) as u8).collect()).unwrap();
    let grads = |deep: f64| {
        let mut s = Session::training(&p);
        let xv = s.tape.constant(x.clone());
        let out = forward(&mut s, xv, Preset::Cimt, &cfg).unwrap();
        let w = LossWeights { deep, ..LossWeights::default() };
        let (l, parts) = loss(&mut s, &out, &labels, 1, &w).unwrap();
        assert_eq!(parts.deep.len(), if deep == 0.0 { 0 } else { 4 });
        s.gradients(l).unwrap()
    };
    let qk = |g: &ParamStore<f64>| -> Vec<f64> {
        g.iter()
            .filter(|(n, _)| n.contains(".cross.q.") || n.contains(".cross.k."))
            .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum())
            .collect()
    };
    let off = grads(0.0);
    assert_eq!(qk(&off).len(), 8);
    assert!(qk(&off).iter().all(|&s| s == 0.0));
    let vpath: f64 = off.get("decoder.s3.cross.v.w").unwrap().data().iter().map(|v| v.abs()).sum();
    assert!(vpath > 0.0);
    assert!(qk(&grads(0.25)).iter().all(|&s| s > 0.0));
}
