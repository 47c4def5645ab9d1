use bevtraj_core::backbone::{Backbone, BackboneConfig};
use bevtraj_core::nn::{Bound, Init, ParamStore};
use bevtraj_core::tensor::{grad_check, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d: usize) -> BackboneConfig {
    BackboneConfig { static_channels: 5, dynamic_channels: 9, d, strides: vec![4, 8, 16, 32], gru_hidden: 8 }
}

fn build(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
    let bb = Backbone::new(cfg, &mut store, &mut init).unwrap();
    (bb, store)
}

fn inputs(rng: &mut ChaCha8Rng, b: usize, t: usize, h: usize, w: usize) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let stat = Tensor::from_fn(&[b, 5, h, w], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let dynamic = (0..t).map(|_| Tensor::from_fn(&[b, 9, h, w], |_| if rng.random_bool(0.1) { rng.random_range(-1.0..1.0) } else { 0.0 })).collect();
    (stat, dynamic)
}

fn run(bb: &Backbone, store: &ParamStore<f64>, stat: &Tensor<f64>, dynamic: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let s = tape.constant(stat.clone());
    let d: Vec<Var> = dynamic.iter().map(|t| tape.constant(t.clone())).collect();
    let out = bb.forward(&mut tape, &p, s, &d).unwrap();
    out.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn paper_grid_pyramid_shapes_and_width() {
    let cfg = config(64);
    let (bb, store) = build(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (stat, dynamic) = inputs(&mut rng, 1, 3, 152, 96);
    let out = run(&bb, &store, &stat, &dynamic);
    let shapes: Vec<&[usize]> = out.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[1, 64, 5, 3][..], &[1, 64, 10, 6], &[1, 64, 19, 12], &[1, 64, 38, 24]]);
    assert_eq!(cfg.level_shapes(152, 96).unwrap(), vec![(5, 3), (10, 6), (19, 12), (38, 24)]);
}

#[test]
fn zero_input_response_is_deterministic() {
    let cfg = config(16);
    let (a, sa) = build(&cfg, 3);
    let (b, sb) = build(&cfg, 3);
    let stat = Tensor::zeros(&[1, 5, 76, 48]);
    let dynamic = vec![Tensor::zeros(&[1, 9, 76, 48]); 3];
    let x = run(&a, &sa, &stat, &dynamic);
    let y = run(&b, &sb, &stat, &dynamic);
    assert_eq!(x, y);
    assert!(x.iter().all(|t| t.is_finite()));
}

#[test]
fn single_step_is_one_gru_update_from_zero_state() {
    let cfg = config(16);
    let (bb, store) = build(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, dynamic) = inputs(&mut rng, 1, 1, 76, 48);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let d = tape.constant(dynamic[0].clone());
    let once = bb.encode_dynamic(&mut tape, &p, &[d]).unwrap();
    assert_eq!(once.len(), 4);
    assert!(bb.encode_dynamic(&mut tape, &p, &[]).is_err());
}

#[test]
fn time_order_matters() {
    let cfg = config(16);
    let (bb, store) = build(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (stat, dynamic) = inputs(&mut rng, 1, 3, 76, 48);
    let forward = run(&bb, &store, &stat, &dynamic);
    let reversed: Vec<Tensor<f64>> = dynamic.iter().rev().cloned().collect();
    let backward = run(&bb, &store, &stat, &reversed);
    assert!(forward.iter().zip(&backward).any(|(a, b)| a.max_abs_diff(b).unwrap() > 1e-6));
}

#[test]
fn both_branches_contribute() {
    let cfg = config(16);
    let (bb, store) = build(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (stat, dynamic) = inputs(&mut rng, 1, 3, 76, 48);
    let zero_dyn = run(&bb, &store, &stat, &vec![Tensor::zeros(&[1, 9, 76, 48]); 3]);
    let zero_stat = run(&bb, &store, &Tensor::zeros(&[1, 5, 76, 48]), &dynamic);
    assert!(zero_dyn.iter().zip(&zero_stat).any(|(a, b)| a.max_abs_diff(b).unwrap() > 1e-6));
}

#[test]
fn fuse_rejects_level_mismatch() {
    let cfg = config(8);
    let (bb, store) = build(&cfg, 1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let v = tape.constant(Tensor::<f64>::zeros(&[1, 8, 2, 2]));
    assert!(bb.fuse(&mut tape, &p, &[v], &[v]).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = config(16);
    let (bb, store) = build(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (stat, dynamic) = inputs(&mut rng, 2, 3, 76, 48);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let s = tape.constant(stat);
    let d: Vec<Var> = dynamic.into_iter().map(|t| tape.constant(t)).collect();
    let out = bb.forward(&mut tape, &p, s, &d).unwrap();
    let mut total = None;
    for (i, v) in out.into_iter().enumerate() {
        let w = tape.constant(Tensor::from_fn(tape.shape(v), |j| (((j + i) * 2654435761) % 17) as f64 / 17.0 - 0.5));
        let m = tape.mul(v, w).unwrap();
        let s = tape.sum(m).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s).unwrap(),
        });
    }
    let mut grads = tape.backward(total.unwrap()).unwrap();
    let g = store.collect_grads(&p, &mut grads);
    for (id, grad) in store.ids().zip(&g) {
        assert!(grad.data().iter().any(|&v| v != 0.0), "{} has no gradient", store.name(id));
    }
}

#[test]
fn full_pipeline_gradient_check_at_desk_scale() {
    let cfg = BackboneConfig { static_channels: 5, dynamic_channels: 9, d: 8, strides: vec![4, 8, 16, 32], gru_hidden: 4 };
    let (bb, store) = build(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (stat, dynamic) = inputs(&mut rng, 1, 2, 76, 48);
    let n = store.len();
    let mut xs = vec![stat];
    xs.extend(dynamic);
    xs.extend(store.tensors().iter().cloned());
    let report = grad_check(
        |tape, v| {
            let p = Bound::from_vars(v[3..3 + n].to_vec());
            let out = bb.forward(tape, &p, v[0], &v[1..3]).map_err(|e| match e {
                bevtraj_core::Error::Tensor(t) => t,
                other => TensorError::Usage(other.to_string()),
            })?;
            let mut acc = None;
            for (i, o) in out.into_iter().enumerate() {
                let w = tape.constant(Tensor::from_fn(tape.shape(o), |j| (((j + 3 * i) * 40503) % 11) as f64 / 11.0 - 0.5));
                let m = tape.mul(o, w)?;
                let s = tape.sum(m)?;
                acc = Some(match acc {
                    None => s,
                    Some(a) => tape.add(a, s)?,
                });
            }
            Ok(acc.unwrap())
        },
        &xs,
        1e-6,
        12,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
