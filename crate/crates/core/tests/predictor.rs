use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timealign::bev_encoder::PillarGrid;
use timealign::predictor::{
    prediction_loss, HistoryFeed, PatchEmbed, PatchInflate, PredictionBundle, Predictor, PredictorConfig,
    SwinLstmCell, SwinLstmState,
};
use timealign::scene_sim::{CameraModel, LidarSensorModel, SceneConfig, SpeedRanges};
use timealign::train_eval::train::Adam;
use timealign::train_eval::{DataConfig, Dataset, Model, ModelConfig, Variant};
use timealign_nn::{ParamStore, Params, Tensor, Var};

fn small_cfg() -> PredictorConfig {
    PredictorConfig {
        channels: 3,
        patch_size: 2,
        embed_dim: 8,
        depths: 2,
        num_heads: 2,
        num_cells: 2,
        window_size: 2,
        feed: HistoryFeed::TeacherForced,
        residual: true,
    }
}

fn predictor(cfg: PredictorConfig, seed: u64) -> (Predictor, ParamStore) {
    let pred = Predictor::new("predictor", cfg).unwrap();
    let mut store = ParamStore::new();
    pred.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (pred, store)
}

fn zero_all(store: &mut ParamStore) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(shape)).unwrap();
    }
}

fn history(seed: u64, shape: [usize; 4]) -> Vec<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3).map(|_| Var::constant(Tensor::randn(shape.to_vec(), 1.0, &mut rng))).collect()
}

#[test]
fn zero_everything_stays_at_the_origin() {
    let cfg = small_cfg();
    let cell = SwinLstmCell::new("cell", &cfg).unwrap();
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    zero_all(&mut store);
    let p = Params::new(&store, false);
    let state = SwinLstmState::zeros(2, 16, 8);
    let x = Var::constant(Tensor::zeros(vec![2, 16, 8]));
    let (h, next) = cell.step(&p, &x, &state, (4, 4)).unwrap();
    assert!(h.value().data().iter().all(|&v| v == 0.0));
    assert!(next.memory.value().data().iter().all(|&v| v == 0.0));

    let (pred, mut store) = predictor(PredictorConfig { residual: false, ..cfg }, 1);
    zero_all(&mut store);
    let p = Params::new(&store, false);
    let zeros: Vec<Var> = (0..3).map(|_| Var::constant(Tensor::zeros(vec![1, 3, 8, 8]))).collect();
    for y in pred.rollout(&p, &zeros).unwrap().predictions {
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn saturated_forget_gate_preserves_memory() {
    let cfg = small_cfg();
    let cell = SwinLstmCell::new("cell", &cfg).unwrap();
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // gates driven by their biases alone
    for name in cell.gate_names().iter().filter(|n| n.ends_with("weight")) {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, Tensor::zeros(shape)).unwrap();
    }
    store.set(&cell.forget_bias_name(), Tensor::full(vec![8], 20.0)).unwrap();
    store.set(&cell.input_bias_name(), Tensor::full(vec![8], -60.0)).unwrap();
    let p = Params::new(&store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = SwinLstmState {
        hidden: Var::constant(Tensor::randn(vec![1, 16, 8], 1.0, &mut rng)),
        memory: Var::constant(Tensor::randn(vec![1, 16, 8], 1.0, &mut rng)),
    };
    let x = Var::constant(Tensor::randn(vec![1, 16, 8], 1.0, &mut rng));
    let (_, next) = cell.step(&p, &x, &state, (4, 4)).unwrap();
    let diff = next.memory.value().max_abs_diff(state.memory.value());
    assert!(diff < 1e-6, "{}", diff);
}

#[test]
fn unit_patch_embed_and_inflate_invert_each_other() {
    let (c, d) = (3, 3);
    let embed = PatchEmbed::new("e", c, 1, d);
    let inflate = PatchInflate::new("e", c, 1, d);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // a well-conditioned matrix and its inverse, with opposite biases
    let a = Tensor::new(vec![3, 3], vec![2.0, 1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0, 1.0]).unwrap();
    let inv = Tensor::new(vec![3, 3], vec![1.0, -1.0, -1.0, -1.0, 2.0, 2.0, -1.0, 1.0, 2.0]).unwrap();
    let bias = Tensor::randn(vec![3], 1.0, &mut rng);
    let mut store = ParamStore::new();
    // weights are out x in: y = A x + b, then A^-1 (y - b)
    store.insert(embed.proj.weight_name(), a.clone()).unwrap();
    store.insert(embed.proj.bias_name(), bias.clone()).unwrap();
    let neg_b_inv = {
        let v: Vec<f64> = (0..3).map(|j| -(0..3).map(|k| inv.at(&[j, k]) * bias.data()[k]).sum::<f64>()).collect();
        Tensor::new(vec![3], v).unwrap()
    };
    store.insert(inflate.proj.weight_name(), inv).unwrap();
    store.insert(inflate.proj.bias_name(), neg_b_inv).unwrap();
    let p = Params::new(&store, false);
    let x = Tensor::randn(vec![2, 3, 5, 4], 1.0, &mut rng);
    let (tokens, grid) = embed.forward(&p, &Var::constant(x.clone())).unwrap();
    assert_eq!(tokens.shape(), &[2, 20, 3]);
    // p = 1 tokens are the raw channel vectors pushed through the matrix
    let raw = (0..3).map(|k| a.at(&[1, k]) * x.at(&[1, k, 2, 3])).sum::<f64>();
    assert!((tokens.value().at(&[1, 11, 1]) - raw - bias.data()[1]).abs() < 1e-12);
    let back = inflate.forward(&p, &tokens, grid).unwrap();
    assert!(back.value().max_abs_diff(&x) < 1e-9);
}

#[test]
fn constant_offset_of_two_costs_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng)).collect();
    let bundle = PredictionBundle {
        predictions: labels.iter().map(|l| Var::constant(l.map(|v| v + 2.0))).collect(),
    };
    let loss = prediction_loss(&bundle, &labels).unwrap().value().item();
    assert!((loss - 4.0).abs() < 1e-12);
    assert!(prediction_loss(&bundle, &labels[..2]).is_err());
}

#[test]
fn rollouts_are_bit_identical() {
    for feed in [HistoryFeed::TeacherForced, HistoryFeed::Autoregressive] {
        let (pred, store) = predictor(PredictorConfig { feed, residual: false, ..small_cfg() }, 6);
        let p = Params::new(&store, false);
        let h = history(7, [2, 3, 8, 8]);
        let a = pred.rollout(&p, &h).unwrap();
        let b = pred.rollout(&p, &h).unwrap();
        assert_eq!(a.predictions.len(), 3);
        for (x, y) in a.predictions.iter().zip(&b.predictions) {
            assert_eq!(x.shape(), &[2, 3, 8, 8]);
            assert_eq!(x.value().data(), y.value().data());
        }
    }
}

#[test]
fn feeds_differ_only_after_the_first_step() {
    let (tf, store) = predictor(PredictorConfig { residual: false, ..small_cfg() }, 8);
    let ar = Predictor::new("predictor", PredictorConfig { feed: HistoryFeed::Autoregressive, ..tf.cfg }).unwrap();
    let p = Params::new(&store, false);
    let h = history(9, [1, 3, 8, 8]);
    let a = tf.rollout(&p, &h).unwrap();
    let b = ar.rollout(&p, &h).unwrap();
    assert_eq!(a.predictions[0].value(), b.predictions[0].value());
    assert_ne!(a.predictions[1].value(), b.predictions[1].value());
}

#[test]
fn residual_predictor_starts_as_copy_last() {
    let (pred, store) = predictor(small_cfg(), 10);
    let p = Params::new(&store, false);
    let h = history(11, [1, 3, 8, 8]);
    let out = pred.rollout(&p, &h).unwrap();
    for (y, x) in out.predictions.iter().zip(&h) {
        assert_eq!(y.value(), x.value());
    }
}

#[test]
fn rollout_rejects_bad_histories() {
    let (pred, store) = predictor(small_cfg(), 12);
    let p = Params::new(&store, false);
    assert!(pred.rollout(&p, &history(0, [1, 3, 8, 8])[..2]).is_err());
    assert!(pred.rollout(&p, &history(0, [1, 4, 8, 8])).is_err());
    assert!(pred.rollout(&p, &history(0, [1, 3, 7, 8])).is_err());
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| (x - y).powi(2)).mean()
}

#[test]
fn trained_predictor_matches_copy_last_on_a_static_scene() {
    let data = DataConfig {
        num_scenes: 2,
        scene: SceneConfig {
            speed_range: SpeedRanges::all_static(),
            ..Default::default()
        },
        sensor: LidarSensorModel {
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            ..Default::default()
        },
        camera: CameraModel {
            noise_sigma: 0.0,
            ..Default::default()
        },
        seed: 21,
        ..Default::default()
    };
    let samples = Dataset::simulate(&data).unwrap().prepare_all(3).unwrap();
    let model = Model::new(ModelConfig::desk(Variant::TimeAlign)).unwrap();
    let full = model.init(0).unwrap();
    let p = Params::new(&full, false);
    let encode = |grids: Vec<&PillarGrid>| -> Tensor { model.encoder.encode(&p, &grids).unwrap().value().clone() };
    let hist: Vec<Tensor> = (0..3).map(|k| encode(samples.iter().map(|s| &s.history[k]).collect())).collect();
    let current = encode(samples.iter().map(|s| &s.observed[0]).collect());
    let labels = vec![hist[1].clone(), hist[2].clone(), current.clone()];
    let inputs: Vec<Var> = hist.iter().cloned().map(Var::constant).collect();

    let mut store = ParamStore::new();
    for (n, t) in full.iter().filter(|(n, _)| n.starts_with("predictor.")) {
        store.insert(n, t.clone()).unwrap();
    }
    let mut adam = Adam::new(1e-3);
    for _ in 0..30 {
        let grads = {
            let p = Params::new(&store, true);
            let loss = prediction_loss(&model.predictor.rollout(&p, &inputs).unwrap(), &labels).unwrap();
            p.collect_grads(&loss.backward())
        };
        store.zero_grads();
        store.accumulate_grads(&grads).unwrap();
        adam.step(&mut store, 1.0);
    }
    let p = Params::new(&store, false);
    let f_p = model.predictor.rollout(&p, &inputs).unwrap().final_prediction().value().clone();
    let (pred, copy) = (mse(&f_p, &current), mse(&hist[2], &current));
    assert!(pred <= copy + 1e-9, "predictor {} vs copy-last {}", pred, copy);
}
