//! Analytic gradients against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timealign_nn::conv::conv2d;
use timealign_nn::layers::{Conv2d, LayerNorm, Linear};
use timealign_nn::sample::{deformable_conv, grid_sample_bilinear};
use timealign_nn::{gradcheck, ops, GradcheckOptions, ParamStore, SwinBlock, Tensor, Var, WindowAttentionConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalarize an output with fixed random weights.
fn project(out: &Var, seed: u64) -> timealign_nn::Result<Var> {
    let w = Tensor::randn(out.shape().to_vec(), 1.0, &mut rng(seed ^ 0xabcdef));
    ops::weighted_sum(out, &w)
}

#[test]
fn linear_layer_passes_tightly() {
    for seed in SEEDS {
        let layer = Linear::new("fc", 5, 3);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng(seed)).unwrap();
        let x = Tensor::randn(vec![4, 5], 1.0, &mut rng(seed + 50));
        let opts = GradcheckOptions::default().with_tolerance(1e-6);
        let rep = gradcheck(&store, &[x], &opts, |p, inp| project(&layer.forward(p, &inp[0])?, seed)).unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let x = Tensor::randn(vec![6], 1.0, &mut rng(1));
    let opts = GradcheckOptions::default();
    let rep = gradcheck(&ParamStore::new(), &[x], &opts, |_, inp| {
        let v = inp[0].value().map(|a| a * a);
        let bad = Var::from_op(v, vec![inp[0].clone()], |ctx| {
            // true derivative is 2x; report twice that
            vec![Some(ctx.inputs[0].value().zip_map(ctx.grad, |x, g| 4.0 * x * g))]
        });
        project(&bad, 3)
    })
    .unwrap();
    assert!(!rep.passed);
    assert!(rep.max_rel_error > 0.4);
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let x = Tensor::randn(vec![2, 3, 5, 5], 1.0, &mut rng(seed));
        let w = Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng(seed + 10));
        let b = Tensor::randn(vec![4], 1.0, &mut rng(seed + 20));
        for (stride, pad) in [(1, 1), (2, 0)] {
            let rep = gradcheck(&ParamStore::new(), &[x.clone(), w.clone(), b.clone()], &GradcheckOptions::default(), |_, i| {
                project(&conv2d(&i[0], &i[1], Some(&i[2]), stride, pad)?, seed)
            })
            .unwrap();
            assert!(rep.passed, "stride {} pad {}: {}", stride, pad, rep);
        }
    }
}

#[test]
fn conv_layer_gradients() {
    for seed in SEEDS {
        let layer = Conv2d::same("c", 2, 3, 3);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng(seed)).unwrap();
        let x = Tensor::randn(vec![1, 2, 4, 4], 1.0, &mut rng(seed + 1));
        let rep = gradcheck(&store, &[x], &GradcheckOptions::default(), |p, i| {
            project(&ops::gelu(&layer.forward(p, &i[0])?), seed)
        })
        .unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn elementwise_and_norm_gradients() {
    for seed in SEEDS {
        let ln = LayerNorm::new("ln", 6);
        let mut store = ParamStore::new();
        ln.init(&mut store).unwrap();
        store.set("ln.gamma", Tensor::randn(vec![6], 1.0, &mut rng(seed + 7))).unwrap();
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng(seed));
        let y = Tensor::randn(vec![3, 6], 1.0, &mut rng(seed + 1));
        let rep = gradcheck(&store, &[x, y], &GradcheckOptions::default(), |p, i| {
            let a = ln.forward(p, &i[0])?;
            let b = ops::mul(&ops::sigmoid(&a), &ops::tanh(&i[1]))?;
            let c = ops::sub(&ops::gelu(&b), &ops::square(&i[1]))?;
            let d = ops::softmax(&c)?;
            let e = ops::add(&d, &ops::scale(&a, 0.3))?;
            let f = ops::mse(&e, &Tensor::full(vec![3, 6], 0.2))?;
            ops::add(&f, &project(&e, seed)?)
        })
        .unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn shape_op_gradients() {
    for seed in SEEDS {
        let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng(seed));
        let b = Tensor::randn(vec![2, 2, 4], 1.0, &mut rng(seed + 1));
        let rep = gradcheck(&ParamStore::new(), &[a, b], &GradcheckOptions::default(), |_, i| {
            let c = ops::concat(&[i[0].clone(), i[1].clone()], 1)?;
            let p = ops::permute(&c, &[2, 0, 1])?;
            let s = ops::slice(&p, 2, 1, 4)?;
            let r = ops::reshape(&s, &[12, 2])?;
            let idx = std::rc::Rc::new(vec![Some(3), None, Some(3), Some(0), Some(11)]);
            let g = ops::gather_rows(&r, idx)?;
            let m = ops::bmm(&ops::reshape(&g, &[1, 5, 2])?, &ops::reshape(&r, &[1, 12, 2])?, true)?;
            project(&m, seed)
        })
        .unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn kink_inside_the_stencil_is_settled_one_sided() {
    // |x| with x a third of a step from its kink: the central estimate is
    // wrong, the backward one-sided estimate is exact
    let x = Tensor::new(vec![1], vec![3e-6]).unwrap();
    let opts = GradcheckOptions::default();
    let abs = |i: &[Var]| -> timealign_nn::Result<Var> {
        let v = i[0].value().map(f64::abs);
        Ok(Var::from_op(v, vec![i[0].clone()], |ctx| {
            vec![Some(ctx.inputs[0].value().zip_map(ctx.grad, |x, g| x.signum() * g))]
        }))
    };
    let rep = gradcheck(&ParamStore::new(), &[x.clone()], &opts, |_, i| Ok(ops::sum(&abs(i)?))).unwrap();
    assert!(rep.passed, "{}", rep);
    assert_eq!(rep.kinks, 1);

    // a wrong slope is still caught from every side
    let bad = gradcheck(&ParamStore::new(), &[x], &opts, |_, i| {
        let v = i[0].value().map(f64::abs);
        Ok(Var::from_op(v, vec![i[0].clone()], |ctx| vec![Some(ctx.grad.map(|g| -0.5 * g))]))
    })
    .unwrap();
    assert!(!bad.passed);
    assert_eq!(bad.kinks, 0);
}

#[test]
fn grid_sample_gradients() {
    for seed in SEEDS {
        let f = Tensor::randn(vec![2, 2, 4, 5], 1.0, &mut rng(seed));
        // keep away from integer coordinates where bilinear weights kink
        let loc = Tensor::randn(vec![2, 3, 3, 2], 1.5, &mut rng(seed + 1)).map(|v| v + 1.8);
        let rep = gradcheck(&ParamStore::new(), &[f, loc], &GradcheckOptions::default(), |_, i| {
            project(&grid_sample_bilinear(&i[0], &i[1])?, seed)
        })
        .unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn deformable_conv_gradients() {
    for seed in SEEDS {
        let x = Tensor::randn(vec![2, 2, 4, 5], 1.0, &mut rng(seed));
        let w = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng(seed + 1));
        let b = Tensor::randn(vec![3], 1.0, &mut rng(seed + 2));
        let off = Tensor::randn(vec![2, 18, 4, 5], 0.8, &mut rng(seed + 3));
        let m = Tensor::uniform(vec![2, 9, 4, 5], 0.1, 0.9, &mut rng(seed + 4));
        let rep = gradcheck(&ParamStore::new(), &[x, w, b, off, m], &GradcheckOptions::default(), |_, i| {
            project(&deformable_conv(&i[0], &i[1], Some(&i[2]), &i[3], &i[4])?, seed)
        })
        .unwrap();
        assert!(rep.passed, "{}", rep);
    }
}

#[test]
fn swin_block_gradients() {
    for seed in SEEDS {
        for shifted in [false, true] {
            let block = SwinBlock::new("blk", WindowAttentionConfig::new(2, 2, 4, shifted)).unwrap();
            let mut store = ParamStore::new();
            block.init(&mut store, &mut rng(seed)).unwrap();
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for (k, n) in names.iter().enumerate() {
                let t = store.get(n).unwrap();
                let noisy = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng(seed * 100 + k as u64)).zip_map(t, |a, b| a + b);
                store.set(n, noisy).unwrap();
            }
            let x = Tensor::randn(vec![1, 16, 4], 1.0, &mut rng(seed + 9));
            let rep = gradcheck(&store, &[x], &GradcheckOptions::default(), |p, i| {
                project(&block.forward(p, &i[0], (4, 4))?, seed)
            })
            .unwrap();
            assert!(rep.passed, "shifted={}: {}", shifted, rep);
        }
    }
}

#[test]
fn swin_block_padded_grid_gradients() {
    let block = SwinBlock::new("blk", WindowAttentionConfig::new(2, 1, 4, true)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(5)).unwrap();
    let x = Tensor::randn(vec![2, 15, 4], 1.0, &mut rng(6));
    let rep = gradcheck(&store, &[x], &GradcheckOptions::default(), |p, i| {
        project(&block.forward(p, &i[0], (3, 5))?, 5)
    })
    .unwrap();
    assert!(rep.passed, "{}", rep);
}

#[test]
fn non_finite_gradients_fail() {
    let x = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
    let rep = gradcheck(&ParamStore::new(), &[x], &GradcheckOptions::default(), |_, i| {
        Ok(ops::sum(&ops::square(&i[0])))
    })
    .unwrap();
    assert!(!rep.passed && rep.non_finite);
}
