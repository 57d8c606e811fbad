mod common;

use std::collections::BTreeMap;

use common::*;
use rand::seq::index::sample;
use rand::Rng;
use xfi_core::encoding::{assemble_multimodal_embedding, CombineMode};
use xfi_core::harness::enumerate_subsets;
use xfi_core::tensor::{ParameterStore, Tape, Tensor, Var};
use xfi_core::xfusion::*;

fn fidelity_config(rng: &mut rand_chacha::ChaCha8Rng) -> FusionConfig {
    let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
    FusionConfig {
        n_f: 2,
        d_f: 4,
        heads,
        scale: rng.gen_range(0.2..1.5),
        ffn_hidden: 6,
        post_norm: false,
        dropout_rate: 0.0,
        identity_attn_out: true,
        ..FusionConfig::desk()
    }
}

fn store_for(cfg: &FusionConfig, rng: &mut rand_chacha::ChaCha8Rng) -> ParameterStore {
    let mut store = ParameterStore::new();
    init_self_attention(&mut store, "cm", cfg, rng).unwrap();
    init_cross_attention(&mut store, "ca", cfg, rng).unwrap();
    // random biases and weights everywhere except the identity output projection
    let names: Vec<String> = store.names().filter(|n| !n.contains("attn_out")).map(str::to_string).collect();
    for n in names {
        let vals: Vec<f64> = (0..store.get(&n).unwrap().numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.set_values(&n, &vals).unwrap();
    }
    store
}

fn group(m: &Tensor, groups: usize, g: usize) -> Mat {
    let all = to_mat(m);
    let per = all.len() / groups;
    all[g * per..(g + 1) * per].to_vec()
}

#[test]
fn cross_modal_matches_reference() {
    let mut rng = rng(11);
    for _ in 0..30 {
        let cfg = fidelity_config(&mut rng);
        let store = store_for(&cfg, &mut rng);
        let groups = rng.gen_range(1..=2);
        let blocks = rng.gen_range(1..=3);
        let x = rand_tensor(&mut rng, groups * blocks * cfg.n_f, cfg.d_f, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = cross_modal_forward(&mut tape, &store, "cm", xv, groups, &cfg, &mut ForwardCtx::eval()).unwrap();
        let got = tape.value(out).clone();
        assert_eq!(got.shape(), &[groups * cfg.n_f, cfg.d_f]);
        for g in 0..groups {
            let want = cross_modal_reference(&store, "cm", &group(&x, groups, g), &cfg);
            assert!(max_abs_diff(&group(&got, groups, g), &want) < 1e-10);
        }
    }
}

#[test]
fn inject_matches_reference() {
    let mut rng = rng(12);
    for _ in 0..30 {
        let cfg = fidelity_config(&mut rng);
        let store = store_for(&cfg, &mut rng);
        let groups = rng.gen_range(1..=2);
        let rows = groups * cfg.n_f;
        let (e, k, v) = (
            rand_tensor(&mut rng, rows, cfg.d_f, 1.0),
            rand_tensor(&mut rng, rows, cfg.d_f, 1.0),
            rand_tensor(&mut rng, rows, cfg.d_f, 1.0),
        );
        let mut tape = Tape::new();
        let (ev, kv, vv) = (tape.constant(e.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = cross_attention_inject(&mut tape, &store, "ca", ev, kv, vv, groups, &cfg, &mut ForwardCtx::eval()).unwrap();
        let got = tape.value(out).clone();
        for g in 0..groups {
            let want = inject_reference(
                &store,
                "ca",
                &group(&e, groups, g),
                &group(&k, groups, g),
                &group(&v, groups, g),
                &cfg,
            );
            assert!(max_abs_diff(&group(&got, groups, g), &want) < 1e-10);
        }
    }
}

#[test]
fn hand_set_two_by_two() {
    // one head, scale 1; every projection the identity with zero bias and a zero FFN
    let cfg = FusionConfig {
        n_f: 2,
        d_f: 2,
        heads: 1,
        scale: 1.0,
        ffn_hidden: 2,
        post_norm: false,
        identity_attn_out: true,
        ..FusionConfig::desk()
    };
    let mut store = ParameterStore::new();
    init_self_attention(&mut store, "cm", &cfg, &mut rng(0)).unwrap();
    for n in ["cm.q.w", "cm.k.w", "cm.v.w"] {
        store.set_values(n, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    for n in ["cm.ffn1.w", "cm.ffn2.w"] {
        store.set_values(n, &[0.0; 4]).unwrap();
    }
    // two modality blocks of two tokens; pooling averages tokens {0,1} and {2,3}
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = cross_modal_forward(&mut tape, &store, "cm", xv, 1, &cfg, &mut ForwardCtx::eval()).unwrap();
    // token [1,0] attends to logits (1,0,1,0): weights e/(2e+2) and 1/(2e+2)
    let e = std::f64::consts::E;
    let hi = e / (e + 1.0);
    let lo = 1.0 / (e + 1.0);
    let attn_pooled = [(hi + lo) / 2.0, (hi + lo) / 2.0];
    let want = [0.5 + attn_pooled[0], 0.5 + attn_pooled[1]];
    for row in to_mat(tape.value(out)) {
        assert!((row[0] - want[0]).abs() < 1e-12 && (row[1] - want[1]).abs() < 1e-12, "{row:?}");
    }
}

fn desk_spec(task: TaskSpec) -> ModelSpec {
    let modalities = ["I", "D", "L", "R"]
        .iter()
        .enumerate()
        .map(|(i, id)| modality(id, 24, 12, i == 2))
        .collect();
    ModelSpec {
        fusion: FusionConfig::desk(),
        d_hid: 16,
        task,
        modalities,
    }
}

#[test]
fn key_values_are_frozen_across_iterations() {
    let spec = desk_spec(TaskSpec::hpe(17));
    let model = XFiModel::new(spec.clone(), 3).unwrap();
    let raws = raws(&mut rng(4), 2, &spec);
    for present in [vec![true; 4], vec![false, true, false, true]] {
        let mut trace = FusionTrace::default();
        let mut tape = Tape::new();
        model
            .forward_traced(&mut tape, &raws, &present, &mut ForwardCtx::eval(), Some(&mut trace))
            .unwrap();
        assert_eq!(trace.kv_by_iteration.len(), 4);
        let first = &trace.kv_by_iteration[0];
        assert_eq!(first.len(), present.iter().filter(|&&p| p).count());
        for (k, v) in first.values() {
            assert_eq!(k.shape(), &[2 * 8, 64]);
            assert_eq!(v.shape(), &[2 * 8, 64]);
        }
        for later in &trace.kv_by_iteration[1..] {
            for (i, (k, v)) in later {
                assert!(k.bit_eq(&first[i].0) && v.bit_eq(&first[i].1));
            }
        }
    }
}

#[test]
fn every_variant_serves_every_subset() {
    for task in [TaskSpec::hpe(17), TaskSpec::har(8)] {
        for variant in Variant::ALL {
            let mut spec = desk_spec(task);
            spec.fusion.variant = variant;
            let model = XFiModel::new(spec.clone(), 5).unwrap();
            let raws = raws(&mut rng(6), 2, &spec);
            let before = model.params().clone();
            for present in enumerate_subsets(4) {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &raws, &present, &mut ForwardCtx::eval()).unwrap();
                assert_eq!(tape.shape(out.emb_cm), &[2 * 8, 64]);
                assert_eq!(tape.shape(out.output), &[2, task.output_dim()]);
            }
            assert!(model.params().iter().all(|(n, t)| t.bit_eq(before.get(n).unwrap())));
        }
    }
}

#[test]
fn empty_subset_is_rejected() {
    let spec = desk_spec(TaskSpec::hpe(17));
    let model = XFiModel::new(spec.clone(), 0).unwrap();
    let raws = raws(&mut rng(0), 1, &spec);
    let err = model.forward(&mut Tape::new(), &raws, &[false; 4], &mut ForwardCtx::eval());
    assert!(matches!(err, Err(xfi_core::XfiError::EmptyModalitySet)));
}

#[test]
fn absent_modalities_receive_no_gradient() {
    let spec = spec(small_fusion(Variant::IterativeSharedBlock), 3, TaskSpec::hpe(3));
    let mut model = XFiModel::new(spec.clone(), 1).unwrap();
    let raws = raws(&mut rng(2), 2, &spec);
    let present = [true, false, false, true];
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &raws, &present, &mut ForwardCtx::eval()).unwrap();
    let loss = tape.squared_error(out.output, &Tensor::zeros(&[2, 9]), 6.0).unwrap();
    let used: Vec<String> = tape.used_params().map(str::to_string).collect();
    let params = model.params_mut();
    params.zero_grad();
    tape.backward(loss, params).unwrap();
    for (name, t) in params.iter() {
        let absent = [".D.", ".L."].iter().any(|s| name.contains(s)) || name.starts_with("pe.");
        if absent {
            assert!(!used.contains(&name.to_string()), "{name} was read");
            assert!(t.grad().unwrap().iter().all(|&g| g == 0.0), "{name}");
        }
    }
    assert!(used.iter().any(|n| n.contains(".I.")) && used.iter().any(|n| n.contains(".R.")));
}

/// Renames modality ids `a ↔ b` in a parameter name.
fn swap_ids(name: &str, a: &str, b: &str) -> String {
    let (ta, tb) = (format!(".{a}."), format!(".{b}."));
    if name.contains(&ta) {
        name.replace(&ta, &tb)
    } else {
        name.replace(&tb, &ta)
    }
}

#[test]
fn relabeling_is_a_symmetry() {
    for variant in Variant::ALL {
        let spec = spec(small_fusion(variant), 3, TaskSpec::hpe(3));
        let model = XFiModel::new(spec.clone(), 9).unwrap();
        // slots keep their position, data and weights; only the names I and R trade places
        let mut relabeled = spec.clone();
        relabeled.modalities[0].id = "R".into();
        relabeled.modalities[3].id = "I".into();
        let mut params = ParameterStore::new();
        for (n, t) in model.params().iter() {
            params.insert(swap_ids(n, "I", "R"), t.clone()).unwrap();
        }
        let other = XFiModel::from_parts(relabeled, params, model.stubs().to_vec()).unwrap();
        let raws = raws(&mut rng(10), 3, &spec);
        for present in enumerate_subsets(4) {
            let run = |m: &XFiModel| {
                let mut tape = Tape::new();
                let out = m.forward(&mut tape, &raws, &present, &mut ForwardCtx::eval()).unwrap();
                tape.value(out.output).clone()
            };
            assert!(run(&model).bit_eq(&run(&other)), "{variant} {present:?}");
        }
    }
}

#[test]
fn absent_spatial_modality_has_no_influence() {
    let spec = spec(small_fusion(Variant::IterativeSharedBlock), 3, TaskSpec::hpe(3));
    let model = XFiModel::new(spec.clone(), 2).unwrap();
    let mut raws = raws(&mut rng(3), 2, &spec);
    let present = [true, true, false, true];
    let run = |raws: &[Tensor]| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, raws, &present, &mut ForwardCtx::eval()).unwrap();
        tape.value(out.output).clone()
    };
    let before = run(&raws);
    raws[2] = rand_tensor(&mut rng(99), 2, 6, 5.0);
    assert!(before.bit_eq(&run(&raws)));
}

#[test]
fn assembly_ignores_insertion_order() {
    let mut rng = rng(8);
    let blocks: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 4, 3, 1.0)).collect();
    let assemble = |order: &[usize]| {
        let mut tape = Tape::new();
        let mut features: BTreeMap<usize, Var> = BTreeMap::new();
        for &i in order {
            let v = tape.constant(blocks[i].clone());
            features.insert(i, v);
        }
        let out = assemble_multimodal_embedding(&mut tape, &features, None, CombineMode::Concat, 2).unwrap();
        tape.value(out).clone()
    };
    assert!(assemble(&[0, 1, 2]).bit_eq(&assemble(&[2, 0, 1])));
}

#[test]
fn desk_shapes() {
    let spec = desk_spec(TaskSpec::hpe(17));
    let model = XFiModel::new(spec.clone(), 0).unwrap();
    let raws = raws(&mut rng(1), 1, &spec);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &raws, &[true; 4], &mut ForwardCtx::eval()).unwrap();
    assert_eq!(tape.shape(out.emb_cm), &[8, 64]);
    let kp = keypoints_from_row(tape.value(out.output).row(0)).unwrap();
    assert_eq!(kp.shape(), &[17, 3]);
    let har = XFiModel::new(desk_spec(TaskSpec::har(8)), 0).unwrap();
    let mut tape = Tape::new();
    let out = har.forward(&mut tape, &raws, &[true; 4], &mut ForwardCtx::eval()).unwrap();
    assert_eq!(tape.shape(out.output), &[1, 8]);
}

/// Central differences against the tape, with the comparison widened by the roundoff that
/// `f` itself carries: `|a − n| ≤ 1e-5·(|a| + |n|) + 16·ulp(f)/(2·eps)`.
fn noise_aware_check(model: &XFiModel, raws: &[Tensor], present: &[bool], per_param: usize) {
    let task = model.spec().task;
    let targets = {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, raws, present, &mut ForwardCtx::eval()).unwrap();
        let base = tape.value(out.output).clone();
        let mut r = rng(21);
        let data = base.data().iter().map(|v| v + r.gen_range(-1.0..1.0)).collect();
        Tensor::new(base.shape().to_vec(), data).unwrap()
    };
    let labels: Vec<usize> = (0..raws[0].shape()[0]).map(|i| i % task.classes.max(1)).collect();
    let objective = |p: &ParameterStore| -> (Tape, Var) {
        let mut m = model.clone();
        *m.params_mut() = p.clone();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, raws, present, &mut ForwardCtx::eval()).unwrap();
        let loss = match task.kind {
            TaskKind::Hpe => tape.squared_error(out.output, &targets, targets.numel() as f64).unwrap(),
            TaskKind::Har => tape.cross_entropy(out.output, &labels).unwrap(),
        };
        (tape, loss)
    };
    let mut store = model.params().clone();
    store.zero_grad();
    let (tape, loss) = objective(&store);
    tape.backward(loss, &mut store).unwrap();
    let used: Vec<String> = tape.used_params().map(str::to_string).collect();
    let eps = 1e-6;
    let mut r = rng(5);
    let mut checked = 0;
    for name in used {
        let numel = store.get(&name).unwrap().numel();
        for i in sample(&mut r, numel, per_param.min(numel)) {
            let analytic = store.get(&name).unwrap().grad().unwrap()[i];
            let mut p = model.params().clone();
            let orig = p.get(&name).unwrap().data()[i];
            let (up, down) = (orig + eps, orig - eps);
            let eval = |p: &ParameterStore| {
                let (t, l) = objective(p);
                t.value(l).item().unwrap()
            };
            p.get_mut(&name).unwrap().data_mut()[i] = up;
            let fp = eval(&p);
            p.get_mut(&name).unwrap().data_mut()[i] = down;
            let fm = eval(&p);
            let numeric = (fp - fm) / (up - down);
            let noise = 16.0 * f64::EPSILON * fp.abs().max(fm.abs()) / (up - down);
            let err = (analytic - numeric).abs();
            assert!(
                err <= 1e-5 * (analytic.abs() + numeric.abs()) + noise,
                "{name}[{i}]: analytic {analytic:e} numeric {numeric:e}"
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn gradients_agree_with_central_differences() {
    for task in [TaskSpec::hpe(3), TaskSpec::har(4)] {
        for variant in Variant::ALL {
            let spec = spec(small_fusion(variant), 3, task);
            let model = XFiModel::new(spec.clone(), 7).unwrap();
            let raws = raws(&mut rng(1), 2, &spec);
            noise_aware_check(&model, &raws, &[true, false, true, true], 6);
        }
    }
}
