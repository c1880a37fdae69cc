use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timealign::fusion::{count_params, AlignBranch, BranchOutput, Combine, FusionConfig, GlobalFuse};
use timealign::train_eval::model::PASS_SHIFT;
use timealign_nn::layers::Conv2d;
use timealign_nn::{ParamStore, Params, Tensor, Var};

fn cfg() -> FusionConfig {
    FusionConfig {
        lidar_channels: 4,
        camera_channels: 3,
        deform_kernel: 3,
        offset_hidden: 5,
        combine_hidden: 6,
        fuse_hidden: 5,
        fuse_out: 4,
    }
}

fn inputs(seed: u64, b: usize, h: usize, w: usize) -> (Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg();
    (
        Var::constant(Tensor::randn(vec![b, c.lidar_channels, h, w], 1.0, &mut rng)),
        Var::constant(Tensor::randn(vec![b, c.camera_channels, h, w], 1.0, &mut rng)),
    )
}

fn init_store(f: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    f(&mut store, &mut rng);
    store
}

#[test]
fn zero_initialized_offsets_give_a_half_modulated_plain_conv() {
    let branch = AlignBranch::new("align.obs", cfg());
    let mut store = init_store(|s, r| branch.init(s, r).unwrap());
    let [dw, db] = branch.deform_names();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    store.set(&db, Tensor::randn(vec![4], 0.5, &mut rng)).unwrap();
    let p = Params::new(&store, false);
    let (lidar, cam) = inputs(2, 2, 6, 5);
    let out = branch.forward(&p, &lidar, &cam).unwrap();
    assert!(out.offsets.value().data().iter().all(|&v| v == 0.0));
    assert!(out.modulation.value().data().iter().all(|&v| v == 0.5));
    assert_eq!(out.offsets.shape(), &[2, 18, 6, 5]);
    assert_eq!(out.modulation.shape(), &[2, 9, 6, 5]);
    assert_eq!(out.concat_shape, vec![2, 7, 6, 5]);

    // same weights as an ordinary conv with no bias
    let plain = Conv2d::same("plain", 4, 4, 3);
    let mut ps = ParamStore::new();
    ps.insert(plain.weight_name(), store.get(&dw).unwrap().clone()).unwrap();
    ps.insert(plain.bias_name(), Tensor::zeros(vec![4])).unwrap();
    let conv = plain.forward(&Params::new(&ps, false), &lidar).unwrap();
    let bias = store.get(&db).unwrap();
    let s = lidar.shape().to_vec();
    let mut worst = 0.0f64;
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let idx = [b, c, i, j];
                    let want = 0.5 * conv.value().at(&idx) + bias.data()[c] + lidar.value().at(&idx);
                    worst = worst.max((out.realigned.value().at(&idx) - want).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "{}", worst);
}

#[test]
fn both_branches_have_equal_parameter_counts() {
    let c = cfg();
    let pred = AlignBranch::new("align.pred", c);
    let obs = AlignBranch::new("align.obs", c);
    let store = init_store(|s, r| {
        pred.init(s, r).unwrap();
        obs.init(s, r).unwrap();
    });
    let n = count_params(&store, "align.pred");
    assert_eq!(n, count_params(&store, "align.obs"));
    let kk = 9;
    let want = (7 * 9 * 5 + 5) + (5 * 9 * 3 * kk + 3 * kk) + (4 * 4 * kk + 4);
    assert_eq!(n, want);
}

fn zero_branch(shape: &[usize]) -> BranchOutput {
    BranchOutput {
        realigned: Var::constant(Tensor::zeros(shape.to_vec())),
        offsets: Var::constant(Tensor::zeros(vec![1])),
        modulation: Var::constant(Tensor::zeros(vec![1])),
        concat_shape: vec![],
    }
}

#[test]
fn zero_branches_with_zero_biases_combine_to_zero() {
    let comb = Combine::new("fuse.combine", cfg());
    let store = init_store(|s, r| comb.init(s, r).unwrap());
    let p = Params::new(&store, false);
    let z = zero_branch(&[1, 4, 5, 5]);
    let f = comb.forward(&p, &z, &z).unwrap();
    assert!(f.value().data().iter().all(|&v| v == 0.0));
    assert!(comb.forward(&p, &z, &zero_branch(&[1, 4, 5, 6])).is_err());
}

#[test]
fn pass_observed_combine_returns_the_observed_branch() {
    let comb = Combine::new("fuse.combine", cfg());
    let mut store = init_store(|s, r| comb.init(s, r).unwrap());
    comb.set_pass_observed(&mut store, PASS_SHIFT).unwrap();
    let p = Params::new(&store, false);
    let (a, _) = inputs(3, 2, 5, 5);
    let (b, _) = inputs(4, 2, 5, 5);
    let branch = |v: Var| BranchOutput {
        realigned: v,
        ..zero_branch(&[1])
    };
    let f = comb.forward(&p, &branch(a), &branch(b.clone())).unwrap();
    assert!(f.value().max_abs_diff(b.value()) < 1e-9);

    let narrow = Combine::new("c", FusionConfig { combine_hidden: 3, ..cfg() });
    let mut s = init_store(|s, r| narrow.init(s, r).unwrap());
    assert!(narrow.set_pass_observed(&mut s, PASS_SHIFT).is_err());
}

#[test]
fn global_fuse_ignores_camera_when_its_weights_are_zero() {
    let fuse = GlobalFuse::new("fuse.global", cfg());
    let mut store = init_store(|s, r| fuse.init(s, r).unwrap());
    let name = fuse.conv1.weight_name();
    let mut w = store.get(&name).unwrap().clone();
    let s = w.shape().to_vec();
    for o in 0..s[0] {
        for c in cfg().lidar_channels..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    w.set(&[o, c, i, j], 0.0);
                }
            }
        }
    }
    store.set(&name, w).unwrap();
    let p = Params::new(&store, false);
    let (f_f, cam_a) = inputs(5, 1, 6, 6);
    let (_, cam_b) = inputs(6, 1, 6, 6);
    let a = fuse.forward(&p, &f_f, &cam_a).unwrap();
    let b = fuse.forward(&p, &f_f, &cam_b).unwrap();
    let zero = fuse.forward(&p, &f_f, &Var::constant(Tensor::zeros(vec![1, 3, 6, 6]))).unwrap();
    assert_eq!(a.shape(), &[1, 4, 6, 6]);
    assert_eq!(a.value(), b.value());
    assert_eq!(a.value(), zero.value());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let branch = AlignBranch::new("align.pred", cfg());
    let fuse = GlobalFuse::new("fuse.global", cfg());
    let store = init_store(|s, r| {
        branch.init(s, r).unwrap();
        fuse.init(s, r).unwrap();
    });
    let p = Params::new(&store, false);
    let (lidar, _) = inputs(7, 1, 4, 4);
    let (_, cam) = inputs(7, 1, 4, 5);
    assert!(branch.forward(&p, &lidar, &cam).is_err());
    assert!(fuse.forward(&p, &lidar, &cam).is_err());
    let bad = FusionConfig { deform_kernel: 2, ..cfg() };
    assert!(bad.validate().is_err());
}
