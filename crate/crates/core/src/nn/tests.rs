use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Scalar, Tensor};
use crate::error::Error;

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    let mut spec = ModelSpec::new(
        kind,
        vec![
            CategoricalSpec::with_default_dim("symbol", 5).unwrap(),
            CategoricalSpec::with_default_dim("dow", 5).unwrap(),
        ],
        vec!["a".into(), "b".into()],
        2,
        8,
    );
    spec.dense = vec![
        DenseLayerSpec { units: 12, dropout: 0.0 },
        DenseLayerSpec { units: 6, dropout: 0.0 },
    ];
    spec.tcn = TcnSpec { blocks: 2, channels: 4, kernel: 2, dropout: 0.0 };
    spec.lstm = LstmSpec { layers: 2, hidden: 5 };
    spec.feature_map = 3;
    spec.head = vec![4];
    spec
}

fn tiny_batch<T: Scalar>(spec: &ModelSpec, b: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect() };
    let conts = Tensor::new(vec![b, spec.continuous.len()], normal(b * spec.continuous.len())).unwrap();
    let history = Tensor::new(
        vec![spec.history_channels, b, spec.window],
        normal(spec.history_channels * b * spec.window),
    )
    .unwrap();
    let targets = normal(b);
    let cats = spec
        .categorical
        .iter()
        .enumerate()
        .map(|(j, c)| (0..b).map(|i| (i * (j + 2) + 1) % c.vocab_size).collect())
        .collect();
    Batch { cats, conts, history, targets }
}

fn loss_and_grads(model: &Model<f64>, batch: &Batch<f64>) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut s = Session::train(&model.params, 3);
    let y = model.forward(&mut s, batch).unwrap();
    let t = s.tape.constant(Tensor::new(vec![batch.len(), 1], batch.targets.clone()).unwrap());
    let loss = s.tape.mse_loss(y, t).unwrap();
    let value = s.tape.value(loss).item().unwrap();
    (value, s.gradients(loss).unwrap())
}

fn loss_only(model: &Model<f64>, batch: &Batch<f64>) -> f64 {
    let mut s = Session::train(&model.params, 3);
    let y = model.forward(&mut s, batch).unwrap();
    let t = s.tape.constant(Tensor::new(vec![batch.len(), 1], batch.targets.clone()).unwrap());
    let loss = s.tape.mse_loss(y, t).unwrap();
    s.tape.value(loss).item().unwrap()
}

/// Moves every batch-norm scale away from its initial value. Residual
/// branches start with a zero scale, which makes each block an exact identity
/// and parks activations on the kink of the ReLU, where central differences
/// are meaningless.
fn jitter_batch_norm(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, e)| e.name.ends_with(".gamma"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in model.params.tensor_mut(id).data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
}

/// Compares analytic gradients with central differences on a sample of
/// coordinates from every weight array.
fn check_model_gradients(kind: ModelKind) {
    let spec = tiny_spec(kind);
    let mut model = Model::<f64>::new(spec.clone(), 11).unwrap();
    jitter_batch_norm(&mut model, 17);
    let batch = tiny_batch::<f64>(&spec, 6, 5);
    let (_, grads) = loss_and_grads(&model, &batch);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Weight)
        .map(|(id, e)| (id, e.tensor.numel()))
        .collect();
    for (id, n) in ids {
        let g = grads[id.index()].as_ref().expect("every weight receives a gradient");
        for k in [0, n / 2, n - 1] {
            let orig = model.params.tensor(id).data()[k];
            model.params.tensor_mut(id).data_mut()[k] = orig + eps;
            let up = loss_only(&model, &batch);
            model.params.tensor_mut(id).data_mut()[k] = orig - eps;
            let down = loss_only(&model, &batch);
            model.params.tensor_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (g[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "{kind}: worst relative gradient error {worst:e}");
}

#[test]
fn gradients_match_finite_differences_for_every_architecture() {
    for kind in ModelKind::ALL {
        check_model_gradients(kind);
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    for kind in ModelKind::ALL {
        let spec = tiny_spec(kind);
        let model = Model::<f32>::new(spec.clone(), 0).unwrap();
        assert_eq!(model.num_parameters(), Model::<f32>::expected_parameters(&spec), "{kind}");
    }
    // Hand-computed values for the tiny configuration.
    let n = |k| Model::<f32>::new(tiny_spec(k), 0).unwrap().num_parameters();
    // block0: 2·4·2+4 + 4·4·2+4 + 16 + skip 2·4+4 = 80; block1: 12+... = 68; head 5.
    assert_eq!(n(ModelKind::TsTcn), 20 + 36 + 16 + 12 + 36 + 36 + 16 + 5);
    // layer0: 20·(2+5)+20 = 160; layer1: 20·10+20 = 220; head 6.
    assert_eq!(n(ModelKind::TsLstm), 160 + 220 + 6);
    // tables 2·6·3 = 36; fc0 (8→12) 108; fc1 (12→6) 78; out 7.
    assert_eq!(n(ModelKind::Stock2Vec), 36 + 108 + 78 + 7);
}

#[test]
fn reference_configuration_counts() {
    let spec = ModelSpec::new(
        ModelKind::TsTcn,
        vec![CategoricalSpec::with_default_dim("symbol", 503).unwrap()],
        vec![],
        1,
        260,
    );
    assert_eq!(spec.categorical[0].dim, 50);
    let tcn = Model::<f32>::new(spec.clone(), 0).unwrap();
    assert_eq!(tcn.num_parameters(), TcnStack::parameter_count(1, &spec.tcn, 1));
    match &tcn.net {
        Network::Tcn(t) => {
            assert_eq!(t.receptive_field(), 511);
            assert_eq!(t.blocks.len(), 8);
        }
        _ => unreachable!(),
    }
    let s2v = Model::<f32>::new(spec.with_kind(ModelKind::Stock2Vec), 0).unwrap();
    // 504·50 table, 50→1024, 1024→512, 512→1.
    assert_eq!(s2v.num_parameters(), 504 * 50 + 50 * 1024 + 1024 + 1024 * 512 + 512 + 513);
}

fn tcn_sequence(model: &Model<f64>, x: Tensor<f64>) -> Vec<f64> {
    let Network::Tcn(tcn) = &model.net else { unreachable!() };
    let mut s = Session::eval(&model.params);
    let v = s.tape.constant(x);
    let y = tcn.forward_sequence(&mut s, v).unwrap();
    s.tape.value(y).data().to_vec()
}

#[test]
fn tcn_outputs_are_causal_and_bounded_by_receptive_field() {
    let mut spec = tiny_spec(ModelKind::TsTcn);
    spec.history_channels = 1;
    spec.tcn.blocks = 3; // receptive field 1 + 2·(1+2+4) = 15
    let t_len = 40;
    let model = Model::<f64>::new(spec.clone(), 2).unwrap();
    let Network::Tcn(tcn) = &model.net else { unreachable!() };
    let rf = tcn.receptive_field();
    assert_eq!(rf, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.5..1.5)).collect();
    let y0 = tcn_sequence(&model, Tensor::new(vec![1, 1, t_len], base.clone()).unwrap());
    for t0 in [5usize, 12, 20] {
        let mut x = base.clone();
        x[t0] += 3.0;
        let y1 = tcn_sequence(&model, Tensor::new(vec![1, 1, t_len], x).unwrap());
        for t in 0..t_len {
            let changed = (y0[t] - y1[t]).abs() > 1e-12;
            if t < t0 || t >= t0 + rf {
                assert!(!changed, "output {t} depends on input {t0}");
            }
        }
        assert!((t0..t0 + rf).any(|t| t < t_len && (y0[t] - y1[t]).abs() > 1e-12));
    }
}

#[test]
fn out_of_range_category_names_the_feature() {
    let spec = tiny_spec(ModelKind::Stock2Vec);
    let model = Model::<f32>::new(spec.clone(), 0).unwrap();
    let mut batch = tiny_batch::<f32>(&spec, 3, 1);
    batch.cats[1][2] = 6; // rows are 0..=5 (5 = unknown)
    match model.predict(&batch) {
        Err(Error::Index { feature, value, cardinality }) => {
            assert_eq!((feature.as_str(), value, cardinality), ("dow", 6, 6));
        }
        other => panic!("expected index error, got {other:?}"),
    }
    batch.cats[1][2] = 5;
    assert!(model.predict(&batch).is_ok());
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let spec = tiny_spec(ModelKind::TcnStock2Vec);
    let model = Model::<f32>::new(spec.clone(), 0).unwrap();
    let mut batch = tiny_batch::<f32>(&spec, 3, 1);
    batch.history = Tensor::zeros(vec![2, 3, 7]);
    assert!(matches!(model.predict(&batch), Err(Error::Dimension { .. })));
    let mut batch = tiny_batch::<f32>(&spec, 3, 1);
    batch.cats.pop();
    assert!(matches!(model.predict(&batch), Err(Error::Schema(_))));
}

#[test]
fn initialization_is_seeded() {
    let spec = tiny_spec(ModelKind::TcnStock2Vec);
    let a = Model::<f32>::new(spec.clone(), 4).unwrap();
    let b = Model::<f32>::new(spec.clone(), 4).unwrap();
    let c = Model::<f32>::new(spec, 5).unwrap();
    assert_eq!(a.params.snapshot(), b.params.snapshot());
    assert_ne!(a.params.snapshot(), c.params.snapshot());
}

#[test]
fn transfer_copies_named_modules_only() {
    let spec = tiny_spec(ModelKind::TcnStock2Vec);
    let s2v = Model::<f32>::new(spec.with_kind(ModelKind::Stock2Vec), 1).unwrap();
    let ts = Model::<f32>::new(spec.with_kind(ModelKind::TsTcn), 2).unwrap();
    let mut hybrid = Model::<f32>::new(spec, 3).unwrap();
    let before = hybrid.params.clone();
    let plan = transfer_plan(ModelKind::TcnStock2Vec);
    hybrid.transfer_from(&s2v, &plan[0].1).unwrap();
    hybrid.transfer_from(&ts, &plan[1].1).unwrap();
    for (id, e) in hybrid.params.iter() {
        let transferred = ["s2v.emb", "s2v.fc", "tcn.blocks"].iter().any(|p| under_prefix(&e.name, p));
        if transferred {
            let src = if e.name.starts_with("s2v") { &s2v } else { &ts };
            assert_eq!(e.tensor.data(), src.params.by_name(&e.name).unwrap().tensor.data(), "{}", e.name);
        } else {
            assert_eq!(e.tensor.data(), before.tensor(id).data(), "{}", e.name);
        }
    }
    // A mismatched source is refused.
    let mut wrong = tiny_spec(ModelKind::TsTcn);
    wrong.tcn.channels = 5;
    let wrong = Model::<f32>::new(wrong, 0).unwrap();
    assert!(matches!(hybrid.transfer_from(&wrong, &plan[1].1), Err(Error::Protocol(_))));
}

#[test]
fn frozen_modules_receive_no_gradient_and_run_in_eval_mode() {
    let spec = tiny_spec(ModelKind::TcnStock2Vec);
    let model = Model::<f64>::new(spec.clone(), 3).unwrap();
    let batch = tiny_batch::<f64>(&spec, 4, 2);
    let frozen = vec!["s2v".to_string(), "tcn.blocks".to_string()];
    let mut s = Session::train(&model.params, 0).with_frozen(&frozen);
    let y = model.forward(&mut s, &batch).unwrap();
    let t = s.tape.constant(Tensor::new(vec![4, 1], batch.targets.clone()).unwrap());
    let loss = s.tape.mse_loss(y, t).unwrap();
    let updates = s.take_buffer_updates();
    assert!(updates.is_empty(), "frozen batch norm must not update running statistics");
    let grads = s.gradients(loss).unwrap();
    for (id, e) in model.params.iter() {
        let is_frozen = frozen.iter().any(|p| under_prefix(&e.name, p));
        let has = grads[id.index()].is_some();
        if e.kind == ParamKind::Weight {
            assert_eq!(has, !is_frozen, "{}", e.name);
        }
    }
}

#[test]
fn training_batch_norm_queues_running_statistics() {
    let spec = tiny_spec(ModelKind::TsTcn);
    let model = Model::<f32>::new(spec.clone(), 3).unwrap();
    let batch = tiny_batch::<f32>(&spec, 4, 2);
    let mut s = Session::train(&model.params, 0);
    model.forward(&mut s, &batch).unwrap();
    // Two batch norms per block, mean and variance each.
    assert_eq!(s.take_buffer_updates().len(), 2 * 2 * 2);
}

#[test]
fn single_and_double_precision_agree() {
    let spec = tiny_spec(ModelKind::LstmStock2Vec);
    let m64 = Model::<f64>::new(spec.clone(), 8).unwrap();
    let m32: Model<f32> = m64.cast();
    let b64 = tiny_batch::<f64>(&spec, 5, 3);
    let b32 = tiny_batch::<f32>(&spec, 5, 3);
    let p64 = m64.predict(&b64).unwrap();
    let p32 = m32.predict(&b32).unwrap();
    for (a, b) in p64.iter().zip(&p32) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn fresh_residual_block_is_relu_of_its_input() {
    let mut params = ParamSet::<f64>::new();
    let bn = BatchNormSpec::default();
    let block = {
        let mut b = layers_builder(&mut params, 3);
        ResidualBlock::new(&mut b, "blk", 3, 3, 2, 4, 0.2, bn)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..3 * 2 * 10).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for training in [false, true] {
        let mut s = if training { Session::train(&params, 5) } else { Session::eval(&params) };
        let x = s.tape.constant(Tensor::new(vec![3, 2, 10], data.clone()).unwrap());
        let y = block.forward(&mut s, x).unwrap();
        let want: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(s.tape.value(y).data(), &want[..], "training = {training}");
    }
}

#[test]
fn single_lstm_step_matches_hand_computation() {
    let mut params = ParamSet::<f64>::new();
    let layer = {
        let mut b = layers_builder(&mut params, 0);
        LstmLayer::new(&mut b, "l", 1, 1)
    };
    // Gate order input, forget, cell, output.
    params.tensor_mut(layer.w_ih).data_mut().copy_from_slice(&[0.5, -0.3, 0.8, 0.1]);
    params.tensor_mut(layer.w_hh).data_mut().copy_from_slice(&[0.2, 0.4, -0.6, 0.7]);
    params.tensor_mut(layer.bias).data_mut().copy_from_slice(&[0.0, 1.0, 0.1, -0.2]);
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (mut h, mut c) = (0.0f64, 0.0f64);
    let xs = [1.5, -0.5];
    let mut want = Vec::new();
    for x in xs {
        let i = sig(0.5 * x + 0.2 * h);
        let f = sig(-0.3 * x + 0.4 * h + 1.0);
        let g = (0.8 * x - 0.6 * h + 0.1).tanh();
        let o = sig(0.1 * x + 0.7 * h - 0.2);
        c = f * c + i * g;
        h = o * c.tanh();
        want.push(h);
    }
    let mut s = Session::eval(&params);
    let steps: Vec<_> = xs.iter().map(|&x| s.tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap())).collect();
    let out = layer.forward(&mut s, &steps).unwrap();
    for (v, w) in out.iter().zip(&want) {
        assert!((s.tape.value(*v).data()[0] - w).abs() < 1e-14);
    }
}

#[test]
fn hybrid_without_temporal_signal_reduces_to_trunk_and_head() {
    for kind in [ModelKind::TcnStock2Vec, ModelKind::LstmStock2Vec] {
        let spec = tiny_spec(kind);
        let mut model = Model::<f64>::new(spec.clone(), 6).unwrap();
        let proj = if kind == ModelKind::TcnStock2Vec { "tcn.proj" } else { "lstm.proj" };
        for id in model.params.ids_under(&[proj.to_string()]) {
            model.params.tensor_mut(id).data_mut().fill(0.0);
        }
        let batch = tiny_batch::<f64>(&spec, 4, 8);
        let y = model.predict(&batch).unwrap();
        let Network::Hybrid(net) = &model.net else { unreachable!() };
        // Same computation by hand: trunk output next to a zero feature map.
        let mut s = Session::eval(&model.params);
        let conts = s.tape.constant(batch.conts.clone());
        let a = net.trunk.forward(&mut s, &batch.cats, conts).unwrap();
        let z = s.tape.constant(Tensor::zeros(vec![4, spec.feature_map]));
        let mut h = s.tape.concat(&[a, z], 1).unwrap();
        for d in &net.head {
            h = d.forward(&mut s, h).unwrap();
            h = s.tape.relu(h).unwrap();
        }
        let h = net.out.forward(&mut s, h).unwrap();
        assert_eq!(s.tape.value(h).data(), &y[..], "{kind}");
        let mut other = batch.clone();
        other.history.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 - 1.0);
        assert_eq!(model.predict(&other).unwrap(), y, "{kind}: history must not matter");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn embedding_lookup_equals_one_hot_product(
            vocab in 1usize..40,
            dim in 1usize..12,
            picks in prop::collection::vec(any::<prop::sample::Index>(), 1..10),
            seed in any::<u64>(),
        ) {
            let mut params = ParamSet::<f64>::new();
            let emb = {
                let mut b = layers_builder(&mut params, seed);
                Embedding::new(&mut b, "symbol", vocab, dim)
            };
            let rows = emb.rows();
            let idx: Vec<usize> = picks.iter().map(|p| p.index(rows)).collect();
            let mut s = Session::eval(&params);
            let looked = emb.forward(&mut s, &idx).unwrap();
            let mut one_hot = vec![0.0; idx.len() * rows];
            for (r, &i) in idx.iter().enumerate() {
                one_hot[r * rows + i] = 1.0;
            }
            let oh = s.tape.constant(Tensor::new(vec![idx.len(), rows], one_hot).unwrap());
            let w = s.param(emb.table);
            let product = s.tape.matmul(oh, w).unwrap();
            let a: Vec<u64> = s.tape.value(looked).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s.tape.value(product).data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn embedding_dim_rule(c in 1usize..10_000) {
            let d = embedding_dim(c).unwrap();
            prop_assert!((1..=50).contains(&d));
            prop_assert_eq!(d, c.div_ceil(2).min(50));
        }

        #[test]
        fn tcn_receptive_field_formula(blocks in 1usize..8, kernel in 2usize..4) {
            let mut spec = tiny_spec(ModelKind::TsTcn);
            spec.tcn.blocks = blocks;
            spec.tcn.kernel = kernel;
            let model = Model::<f32>::new(spec, 0).unwrap();
            let Network::Tcn(tcn) = &model.net else { unreachable!() };
            let dilations: usize = (0..blocks).map(|i| 1usize << i).sum();
            prop_assert_eq!(tcn.receptive_field(), 1 + 2 * (kernel - 1) * dilations);
        }
    }
}

#[test]
fn eval_with_gradients_keeps_eval_outputs() {
    let mut spec = tiny_spec(ModelKind::TcnStock2Vec);
    spec.dense[0].dropout = 0.5;
    spec.tcn.dropout = 0.5;
    let model = Model::<f64>::new(spec.clone(), 4).unwrap();
    let batch = tiny_batch::<f64>(&spec, 5, 1);
    let mut s = Session::eval_with_gradients(&model.params);
    let y = model.forward(&mut s, &batch).unwrap();
    assert_eq!(s.tape.value(y).data(), model.predict(&batch).unwrap().as_slice());
    let loss = s.tape.sum(y).unwrap();
    let grads = s.gradients(loss).unwrap();
    for (id, e) in model.params.iter() {
        assert_eq!(grads[id.index()].is_some(), e.kind == ParamKind::Weight, "{}", e.name);
    }
}
