use bevtraj_core::model::{Batch, Model, ModelConfig, Variant, SCALE_EPSILON};
use bevtraj_core::nn::ParamStore;
use bevtraj_core::objective::{total_loss, LossConfig};
use bevtraj_core::scene::{generate_scene, rasterize, RasterSample, SceneConfig, SceneKind};
use bevtraj_core::tensor::{Tape, Tensor};
use bevtraj_core::Error;

fn samples(n: u64, kind: SceneKind) -> Vec<RasterSample> {
    let cfg = SceneConfig::desk();
    (0..n).map(|s| rasterize(&generate_scene(s, kind, &cfg), &cfg)).collect()
}

fn batch(samples: &[RasterSample]) -> Batch<f64> {
    let refs: Vec<&RasterSample> = samples.iter().collect();
    Batch::from_samples(&refs).unwrap()
}

fn model(variant: Variant) -> (Model, ParamStore<f64>) {
    Model::new(&ModelConfig::desk().with_variant(variant), 17).unwrap()
}

#[test]
fn initial_reference_is_the_normalized_ego_anchor() {
    let cfg = ModelConfig::paper();
    let (m, store) = Model::new::<f64>(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let state = m.init_state(&mut tape, &p, &[(122, 48), (122, 48)]).unwrap();
    let refs = tape.value(state.refs);
    assert_eq!(refs.shape(), &[2, 5, 2]);
    for pair in refs.data().chunks(2) {
        assert_eq!(pair, &[48.0 / 96.0, 122.0 / 152.0]);
    }
    let q = tape.value(state.temporal_q);
    let (first, second) = q.data().split_at(q.numel() / 2);
    assert_eq!(first, second);
    assert!(matches!(m.init_state(&mut tape, &p, &[(152, 10)]), Err(Error::Input(_))));
}

#[test]
fn decode_step_closes_both_feedback_loops_exactly() {
    let (m, store) = model(Variant::BASELINE);
    let b = batch(&samples(2, SceneKind::Fork));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let scene = m.encode(&mut tape, &p, &b).unwrap();
    let mut state = m.init_state(&mut tape, &p, &b.ego).unwrap();
    for _ in 0..3 {
        let (chunk, next) = m.decode_step(&mut tape, &p, state, &scene).unwrap();
        assert_eq!(tape.value(next.temporal_q), tape.value(chunk.queries));
        let mu = tape.value(chunk.mu);
        let refs = tape.value(next.refs);
        let tc = mu.shape()[2];
        for i in 0..2 {
            for k in 0..5 {
                let x = (mu.at(&[i, k, tc - 1, 0]) / 48.0).clamp(0.0, 1.0);
                let y = (mu.at(&[i, k, tc - 1, 1]) / 76.0).clamp(0.0, 1.0);
                assert_eq!(refs.at(&[i, k, 0]).to_bits(), x.to_bits());
                assert_eq!(refs.at(&[i, k, 1]).to_bits(), y.to_bits());
            }
        }
        state = next;
    }
}

#[test]
fn zeroed_head_repeats_the_reference_point() {
    let (m, mut store) = model(Variant::BASELINE);
    for id in [m.head.fc1.w, m.head.fc1.b, m.head.fc2.w, m.head.fc2.b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = batch(&samples(1, SceneKind::Straight));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let scene = m.encode(&mut tape, &p, &b).unwrap();
    let state = m.init_state(&mut tape, &p, &b.ego).unwrap();
    let (chunk, _) = m.decode_step(&mut tape, &p, state, &scene).unwrap();
    let (row, col) = b.ego[0];
    let softplus0 = 2f64.ln() + SCALE_EPSILON;
    for pt in tape.value(chunk.mu).data().chunks(2) {
        assert!((pt[0] - col as f64).abs() < 1e-12 && (pt[1] - row as f64).abs() < 1e-12, "{pt:?}");
    }
    assert!(tape.value(chunk.b).data().iter().all(|&v| (v - softplus0).abs() < 1e-15));
}

#[test]
fn recurrent_and_single_pass_decoding_cover_the_horizon() {
    let b = batch(&samples(2, SceneKind::Curve));
    for variant in [Variant::BASELINE, Variant::from_name("no-recurrence").unwrap()] {
        let (m, store) = model(variant);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let scene = m.encode(&mut tape, &p, &b).unwrap();
        let state = m.init_state(&mut tape, &p, &b.ego).unwrap();
        let (chunk, _) = m.decode_step(&mut tape, &p, state, &scene).unwrap();
        let expected_chunk = if variant.recurrence { 4 } else { 12 };
        assert_eq!(tape.shape(chunk.mu)[2], expected_chunk);
        let pred = m.forward(&mut tape, &p, &b).unwrap();
        assert_eq!(tape.shape(pred.mu), &[2, 5, 12, 2]);
        assert!(tape.value(pred.b).data().iter().all(|&v| v > 0.0));
        for row in tape.value(pred.pi).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn mode_query_ablation_removes_exactly_m_times_d_parameters() {
    let (_, base) = model(Variant::BASELINE);
    let (_, ablated) = model(Variant::from_name("no-mode-queries").unwrap());
    let cfg = ModelConfig::desk();
    assert_eq!(base.num_scalars() - ablated.num_scalars(), cfg.modes * cfg.d);
}

#[test]
fn without_mode_queries_all_modes_coincide() {
    let (m, store) = model(Variant::from_name("no-mode-queries").unwrap());
    let b = batch(&samples(1, SceneKind::Fork));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let pred = m.forward(&mut tape, &p, &b).unwrap();
    let mu = tape.value(pred.mu).data().to_vec();
    let per_mode = mu.len() / 5;
    assert!(mu.chunks(per_mode).all(|c| c == &mu[..per_mode]));
}

#[test]
fn learned_reference_variant_starts_from_mode_embeddings() {
    let (m, store) = model(Variant::from_name("no-ego-reference").unwrap());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let state = m.init_state(&mut tape, &p, &[(61, 24)]).unwrap();
    let refs = tape.value(state.refs).data().to_vec();
    assert!(refs.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(refs.chunks(2).any(|c| c != &refs[..2]));
}

#[test]
fn decoder_is_mode_permutation_equivariant() {
    let (m, store) = model(Variant::BASELINE);
    let b = batch(&samples(1, SceneKind::TJunction));
    let run = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pred = m.forward(&mut tape, &p, &b).unwrap();
        (tape.value(pred.mu).clone(), tape.value(pred.b).clone(), tape.value(pred.pi).clone())
    };
    let (mu, sc, pi) = run(&store);
    let perm = [2usize, 4, 0, 1, 3];
    let mut permuted = store.clone();
    let id = m.mode_q.unwrap();
    let d = store.get(id).shape()[1];
    for (new, &old) in perm.iter().enumerate() {
        let row = store.get(id).data()[old * d..(old + 1) * d].to_vec();
        permuted.get_mut(id).data_mut()[new * d..(new + 1) * d].copy_from_slice(&row);
    }
    let (mu2, sc2, pi2) = run(&permuted);
    let per_mode = mu.numel() / 5;
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(&mu2.data()[new * per_mode..(new + 1) * per_mode], &mu.data()[old * per_mode..(old + 1) * per_mode]);
        assert_eq!(&sc2.data()[new * per_mode..(new + 1) * per_mode], &sc.data()[old * per_mode..(old + 1) * per_mode]);
        assert_eq!(pi2.data()[new], pi.data()[old]);
    }
}

#[test]
fn gradients_reach_mode_and_temporal_embeddings() {
    let (m, store) = model(Variant::BASELINE);
    let b = batch(&samples(2, SceneKind::Fork));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let pred = m.forward(&mut tape, &p, &b).unwrap();
    let gt = tape.constant(b.gt.clone());
    let loss = total_loss(&mut tape, pred.mu, pred.b, pred.pi, gt, &LossConfig::default()).unwrap();
    let mut grads = tape.backward(loss.total).unwrap();
    let g = store.collect_grads(&p, &mut grads);
    for id in [m.mode_q.unwrap(), m.temporal_init] {
        assert!(g[id.index()].data().iter().any(|&v| v != 0.0), "{} has no gradient", store.name(id));
    }
}

#[test]
fn reference_point_feedback_carries_gradient_to_earlier_chunks() {
    let (m, store) = model(Variant::BASELINE);
    let b = batch(&samples(1, SceneKind::Curve));
    let head_grad = |cut_refs: bool| -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let scene = m.encode(&mut tape, &p, &b).unwrap();
        let state = m.init_state(&mut tape, &p, &b.ego).unwrap();
        let (_, mut next) = m.decode_step(&mut tape, &p, state, &scene).unwrap();
        next.temporal_q = tape.detach(next.temporal_q);
        if cut_refs {
            next.refs = tape.detach(next.refs);
        }
        let (chunk, _) = m.decode_step(&mut tape, &p, next, &scene).unwrap();
        let loss = tape.sum(chunk.mu).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        store.collect_grads(&p, &mut grads).swap_remove(m.head.fc2.w.index())
    };
    let through_refs = head_grad(false);
    let cut = head_grad(true);
    assert!(through_refs.max_abs_diff(&cut).unwrap() > 1e-9);
}

#[test]
fn batches_must_match_the_model_grid() {
    let (m, store) = Model::new::<f64>(&ModelConfig::paper(), 0).unwrap();
    let b = batch(&samples(1, SceneKind::Straight));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    assert!(matches!(m.forward(&mut tape, &p, &b), Err(Error::Input(_))));
}

#[test]
fn f32_and_f64_models_agree() {
    let cfg = ModelConfig::desk();
    let (m, s64) = Model::new::<f64>(&cfg, 3).unwrap();
    let (_, s32) = Model::new::<f32>(&cfg, 3).unwrap();
    assert_eq!(s64.cast::<f32>().tensors(), s32.tensors());
    let smp = samples(1, SceneKind::Fork);
    let refs: Vec<&RasterSample> = smp.iter().collect();
    let b32 = Batch::<f32>::from_samples(&refs).unwrap();
    let b64 = Batch::<f64>::from_samples(&refs).unwrap();
    let mut t32 = Tape::new();
    let p32 = s32.bind(&mut t32);
    let y32 = m.forward(&mut t32, &p32, &b32).unwrap();
    let mut t64 = Tape::new();
    let p64 = s64.bind(&mut t64);
    let y64 = m.forward(&mut t64, &p64, &b64).unwrap();
    let diff = t32.value(y32.mu).cast::<f64>().max_abs_diff(t64.value(y64.mu)).unwrap();
    assert!(diff < 1e-3, "{diff}");
}

#[test]
fn unknown_variant_is_a_config_error() {
    assert!(matches!(Variant::from_name("no-decoder"), Err(Error::Config(_))));
}
