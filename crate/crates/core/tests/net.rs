use mvreid::net::{
    branch_forward, conv_block_forward, res_block_forward, Arch, BranchConfig, ConvBlockParams, EmbeddingNet,
    ParamTree, ResBlockParams, StageConfig, LRELU_SLOPE, NORM_EPS,
};
use mvreid::seed;
use mvreid::tensor::gradcheck::check;
use mvreid::tensor::{ops, Adam, AdamConfig, Tape, Tensor, Var};
use mvreid::View;
use rand::Rng;

fn images<T: mvreid::tensor::Real>(n: usize, size: usize, s: u64) -> Tensor<T> {
    Tensor::randn(&[n, 3, size, size], &mut seed::rng(s, &[]))
}

/// Spatial size after each conv block, from the convolution size formula.
fn shape_oracle(cfg: &BranchConfig) -> usize {
    cfg.stages
        .iter()
        .fold(cfg.input_size, |s, _| (s + 2 - 3) / 2 + 1)
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 1).unwrap();
    let b = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 1).unwrap();
    let c = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 2).unwrap();
    assert_eq!(a, b);
    assert!(a
        .named_params()
        .iter()
        .zip(c.named_params())
        .any(|((_, x), (_, y))| *x != y));
}

#[test]
fn paper_preset_ends_on_14x14_map() {
    let cfg = BranchConfig::paper();
    assert_eq!(cfg.stages.len(), 4);
    assert_eq!(shape_oracle(&cfg), 14);
    assert_eq!(cfg.final_map_size(), 14);
    let net = EmbeddingNet::<f32>::multi_view(cfg, 0).unwrap();
    assert_eq!(net.head().weight.shape(), &[128, 512, 14, 14]);
}

#[test]
fn branches_share_no_storage() {
    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 5).unwrap();
    let f: Vec<*const f32> = {
        let mut v = Vec::new();
        net.branch(View::Frontal).unwrap().visit("", &mut |_, t| v.push(t.data().as_ptr()));
        v
    };
    let mut overlap = false;
    net.branch(View::Profile)
        .unwrap()
        .visit("", &mut |_, t| overlap |= f.contains(&t.data().as_ptr()));
    assert!(!overlap);
    // Independent streams: the two branches are initialized differently.
    assert_ne!(net.branch(View::Frontal), net.branch(View::Profile));
}

fn block_params(tape: &mut Tape<f64>, cin: usize, cout: usize, s: u64) -> ConvBlockParams<Var> {
    let mut rng = seed::rng(s, &[]);
    ConvBlockParams {
        conv: mvreid::net::Conv {
            weight: tape.param(Tensor::uniform(&[cout, cin, 3, 3], 0.5, &mut rng)),
            bias: tape.param(Tensor::uniform(&[cout], 0.5, &mut rng)),
        },
        norm: mvreid::net::Norm {
            gamma: tape.param(Tensor::uniform(&[cout], 1.0, &mut rng)),
            beta: tape.param(Tensor::uniform(&[cout], 1.0, &mut rng)),
        },
    }
}

#[test]
fn conv_block_shape_and_composition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(images(1, 32, 1));
    let p = block_params(&mut tape, 3, 16, 2);
    let y = conv_block_forward(&mut tape, x, &p).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 16, 16]);

    let c = ops::conv2d(&mut tape, x, p.conv.weight, p.conv.bias, 2, 1).unwrap();
    let n = ops::instance_norm2d(&mut tape, c, p.norm.gamma, p.norm.beta, NORM_EPS).unwrap();
    let manual = ops::leaky_relu(&mut tape, n, LRELU_SLOPE).unwrap();
    assert_eq!(tape.value(y), tape.value(manual));

    let odd = tape.constant(images(1, 9, 3));
    assert!(conv_block_forward(&mut tape, odd, &p).is_err());
}

#[test]
fn conv_block_zero_weights_give_zeros() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(images(2, 8, 4));
    let z = |t: &mut Tape<f32>, s: &[usize]| t.constant(Tensor::zeros(s));
    let p = ConvBlockParams {
        conv: mvreid::net::Conv { weight: z(&mut tape, &[4, 3, 3, 3]), bias: z(&mut tape, &[4]) },
        norm: mvreid::net::Norm {
            gamma: tape.constant(Tensor::full(&[4], 1.0)),
            beta: z(&mut tape, &[4]),
        },
    };
    let y = conv_block_forward(&mut tape, x, &p).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn res_params(tape: &mut Tape<f64>, c: usize, s: u64, zero_convs: bool) -> ResBlockParams<Var> {
    let a = block_params(tape, c, c, s);
    let b = block_params(tape, c, c, s + 1);
    let mut p = ResBlockParams { conv1: a.conv, norm1: a.norm, conv2: b.conv, norm2: b.norm };
    if zero_convs {
        p.conv1.weight = tape.constant(Tensor::zeros(&[c, c, 3, 3]));
        p.conv1.bias = tape.constant(Tensor::zeros(&[c]));
        p.conv2.weight = tape.constant(Tensor::zeros(&[c, c, 3, 3]));
        p.conv2.bias = tape.constant(Tensor::zeros(&[c]));
        p.norm1.beta = tape.constant(Tensor::zeros(&[c]));
        p.norm2.beta = tape.constant(Tensor::zeros(&[c]));
    }
    p
}

#[test]
fn res_block_zero_convs_is_pure_skip() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::randn(&[2, 4, 6, 6], &mut seed::rng(6, &[])));
    let p = res_params(&mut tape, 4, 7, true);
    let y = res_block_forward(&mut tape, x, &p).unwrap();
    let want = ops::leaky_relu(&mut tape, x, LRELU_SLOPE).unwrap();
    assert_eq!(tape.value(y), tape.value(want));
}

#[test]
fn res_block_preserves_shape_and_matches_composition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::randn(&[2, 5, 6, 6], &mut seed::rng(8, &[])));
    let p = res_params(&mut tape, 5, 9, false);
    let y = res_block_forward(&mut tape, x, &p).unwrap();
    assert_eq!(tape.shape(y), tape.shape(x));

    let t = &mut tape;
    let h = ops::conv2d(t, x, p.conv1.weight, p.conv1.bias, 1, 1).unwrap();
    let h = ops::instance_norm2d(t, h, p.norm1.gamma, p.norm1.beta, NORM_EPS).unwrap();
    let h = ops::leaky_relu(t, h, LRELU_SLOPE).unwrap();
    let h = ops::conv2d(t, h, p.conv2.weight, p.conv2.bias, 1, 1).unwrap();
    let h = ops::instance_norm2d(t, h, p.norm2.gamma, p.norm2.beta, NORM_EPS).unwrap();
    let h = ops::add(t, h, x).unwrap();
    let manual = ops::leaky_relu(t, h, LRELU_SLOPE).unwrap();
    assert_eq!(tape.value(y), tape.value(manual));

    let wrong = tape.constant(Tensor::randn(&[1, 3, 6, 6], &mut seed::rng(10, &[])));
    assert!(res_block_forward(&mut tape, wrong, &p).is_err());
}

fn branch_map_shape(net: &EmbeddingNet<f32>, view: View) -> Vec<usize> {
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.constant(images(1, net.config().input_size, 11));
    let y = branch_forward(&mut tape, x, bound.branch(view).unwrap(), net.config()).unwrap();
    tape.shape(y).to_vec()
}

#[test]
fn branch_shapes_follow_config() {
    let mut rng = seed::rng(12, &[]);
    for _ in 0..5 {
        let n = rng.gen_range(1..=3);
        let cfg = BranchConfig {
            input_size: (1 << n) * rng.gen_range(1..=4),
            stages: (0..n)
                .map(|_| StageConfig { width: rng.gen_range(1..=6), res_blocks: rng.gen_range(0..=2) })
                .collect(),
            embedding_dim: 16,
        };
        let net = EmbeddingNet::<f32>::multi_view(cfg.clone(), 1).unwrap();
        let s = shape_oracle(&cfg);
        assert_eq!(branch_map_shape(&net, View::Profile), vec![1, cfg.final_width(), s, s]);
    }
    let cfg = BranchConfig::tiny();
    let mut doubled = cfg.clone();
    doubled.stages.iter_mut().for_each(|s| s.width *= 2);
    let a = branch_map_shape(&EmbeddingNet::multi_view(cfg, 1).unwrap(), View::Frontal);
    let b = branch_map_shape(&EmbeddingNet::multi_view(doubled, 1).unwrap(), View::Frontal);
    assert_eq!(b[1], 2 * a[1]);

    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 1).unwrap();
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.constant(images(1, 16, 11));
    assert!(branch_forward(&mut tape, x, bound.branch(View::Frontal).unwrap(), net.config()).is_err());
}

#[test]
fn frontal_branch_ignores_profile_weights() {
    let mut net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 13).unwrap();
    let run = |net: &EmbeddingNet<f32>| {
        let mut tape = Tape::new();
        let bound = net.bind_frozen(&mut tape);
        let x = tape.constant(images(2, 8, 14));
        let y = branch_forward(&mut tape, x, bound.branch(View::Frontal).unwrap(), net.config()).unwrap();
        tape.value(y).clone()
    };
    let before = run(&net);
    net.branch_mut(View::Profile)
        .unwrap()
        .visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 0.37));
    assert_eq!(run(&net), before);
}

#[test]
fn pair_embedding_contract() {
    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::compact(), 15).unwrap();
    let f = images::<f32>(3, 32, 16);
    let p = images::<f32>(3, 32, 17);
    let e = net.infer(&[&f, &p]).unwrap();
    assert_eq!(e.shape(), &[3, 128]);
    for r in 0..3 {
        let n: f64 = e.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5, "norm {n}");
    }
    assert_eq!(net.infer(&[&f, &p]).unwrap(), e);
    let swapped = net.infer(&[&p, &f]).unwrap();
    assert_ne!(swapped, e);
    assert!(net.infer(&[&f, &images(3, 16, 1)]).is_err());
}

#[test]
fn single_view_embedding_contract() {
    let cfg = BranchConfig::compact();
    let single = EmbeddingNet::<f32>::single_view(cfg.clone(), View::Frontal, 18).unwrap();
    let multi = EmbeddingNet::<f32>::multi_view(cfg.clone(), 18).unwrap();
    assert_eq!(single.arch(), Arch::SingleView(View::Frontal));
    let x = images::<f32>(2, 32, 19);
    let e = single.infer(&[&x]).unwrap();
    for r in 0..2 {
        let n: f64 = e.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(EmbeddingNet::<f32>::single_view(cfg, View::Frontal, 18).unwrap().infer(&[&x]).unwrap(), e);
    // One branch plus a head over half as many channels.
    let branch: usize = {
        let mut n = 0;
        single.branch(View::Frontal).unwrap().visit("", &mut |_, t| n += t.numel());
        n
    };
    let head_single = single.head().weight.numel() + single.head().bias.numel();
    let head_multi = multi.head().weight.numel() + multi.head().bias.numel();
    assert_eq!(single.num_params(), branch + head_single);
    assert_eq!(multi.num_params(), 2 * branch + head_multi);
    assert!(single.num_params() < multi.num_params());
}

fn net_gradcheck(net: &EmbeddingNet<f64>) -> f64 {
    let mut inputs: Vec<Tensor<f64>> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(images(2, 8, 20));
    inputs.push(images(2, 8, 21));
    let probe: Tensor<f64> = Tensor::randn(&[2, 128], &mut seed::rng(22, &[]));
    // 1e-3 steps straddle LeakyReLU kinks in the deeper layers of this net
    let step = 1e-4;
    let r = check(&inputs, step, |tape, vars| {
        let bound = net.bind_existing(&vars[..n_params])?;
        let e = net.embed(tape, &bound, vars[n_params], Some(vars[n_params + 1]))?;
        let pr = tape.constant(probe.clone());
        let y = ops::mul(tape, e, pr)?;
        Ok(ops::sum(tape, y))
    })
    .unwrap();
    r.max_rel_error
}

#[test]
fn end_to_end_gradcheck_tiny_net() {
    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 23).unwrap().cast::<f64>();
    let err = net_gradcheck(&net);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn zeroed_frontal_grads_leave_profile_update_unchanged() {
    let net = EmbeddingNet::<f32>::multi_view(BranchConfig::tiny(), 24).unwrap();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let f = tape.constant(images(3, 8, 25));
    let p = tape.constant(images(3, 8, 26));
    let e = net.embed_pair(&mut tape, &bound, f, p).unwrap();
    let l = ops::sum(&mut tape, e);
    tape.backward(l).unwrap();
    let grads = net.gradients(&tape, &bound);
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let masked: Vec<Tensor<f32>> = grads
        .iter()
        .zip(&names)
        .map(|(g, n)| if n.starts_with("frontal.") { Tensor::zeros(g.shape()) } else { g.clone() })
        .collect();
    let step = |grads: &[Tensor<f32>]| {
        let mut n = net.clone();
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }).unwrap();
        let refs: Vec<&Tensor<f32>> = grads.iter().collect();
        opt.step(&mut n.params_mut(), &refs).unwrap();
        n
    };
    let (full, part) = (step(&grads), step(&masked));
    assert_eq!(full.branch(View::Profile), part.branch(View::Profile));
    assert_eq!(part.branch(View::Frontal), net.branch(View::Frontal));
    assert_ne!(full.branch(View::Frontal), net.branch(View::Frontal));
}

#[test]
fn checkpoint_round_trip_restores_architecture() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Arch::MultiView, Arch::SingleView(View::Profile)] {
        let cfg = BranchConfig {
            stages: vec![
                StageConfig { width: 3, res_blocks: 2 },
                StageConfig { width: 5, res_blocks: 0 },
            ],
            ..BranchConfig::tiny()
        };
        let net = EmbeddingNet::<f32>::new(cfg, arch, 27).unwrap();
        let path = dir.path().join("net.ckpt");
        net.to_checkpoint(&path).unwrap();
        let back = EmbeddingNet::from_checkpoint(&path).unwrap();
        assert_eq!(back, net);
    }
}
