use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::reference;
use crate::routing::RouteOptions;
use crate::shape;
use crate::tensor::grad_check;
use rand::rngs::StdRng;
use rand::Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(1234)
}

fn layer_cfg(kernel: usize, stride: usize, types: usize, dim: usize, batch_norm: bool) -> CapsLayerConfig {
    CapsLayerConfig { kernel, stride, types, dim, batch_norm }
}

#[test]
fn conv_caps2d_identity_kernel_squashes_input() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let layer = ConvCaps2d::new(&mut params, &mut r, "l", 1, 1, &layer_cfg(1, 1, 1, 1, false)).unwrap();
    // overwrite the kernel with the identity
    params.data_mut(0)[0] = 1.0; // kernel [1,1,1,1]
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(vec![0.5, -2.0, 1.0, 3.0], shape![1, 2, 2, 1, 1]).unwrap()).unwrap();
    let y = layer.forward(&mut cx, &x).unwrap();
    let want = x.grid.squash().unwrap().to_vec();
    assert_eq!(y.grid.to_vec(), want);
}

#[test]
fn conv_caps2d_output_shape() {
    let mut params = Params::<f32>::new();
    let mut r = rng();
    let layer = ConvCaps2d::new(&mut params, &mut r, "l", 4, 8, &layer_cfg(3, 2, 4, 8, true)).unwrap();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Train).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(vec![0.1f32; 8 * 8 * 4 * 8], shape![1, 8, 8, 4, 8]).unwrap()).unwrap();
    let y = layer.forward(&mut cx, &x).unwrap();
    assert_eq!(y.grid.shape().dims(), &[1, 4, 4, 4, 8]);
}

#[test]
fn conv_caps2d_equals_manual_composition_bitwise() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let layer = ConvCaps2d::new(&mut params, &mut r, "l", 2, 3, &layer_cfg(3, 1, 2, 2, false)).unwrap();
    // nonzero bias so the composition includes it
    for (i, b) in params.data_mut(1).iter_mut().enumerate() {
        *b = 0.01 * (i as f64 + 1.0);
    }
    let mut srng = StdRng::seed_from_u64(3);
    let x_data: Vec<f64> = (0..5 * 5 * 6).map(|_| srng.random_range(-1.0..1.0)).collect();

    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(x_data.clone(), shape![1, 5, 5, 2, 3]).unwrap()).unwrap();
    let got = layer.forward(&mut cx, &x).unwrap().grid.to_vec();

    // manual: reshape -> conv2d -> bias -> reshape -> squash
    let kernel = cx.bound.get(0).clone();
    let bias = cx.bound.get(1).clone();
    let manual = x
        .grid
        .reshape(shape![1, 5, 5, 6])
        .unwrap()
        .conv2d(&kernel, 1, Padding::Same)
        .unwrap()
        .add_bias(&bias)
        .unwrap()
        .reshape(shape![1, 5, 5, 2, 2])
        .unwrap()
        .squash()
        .unwrap()
        .to_vec();
    assert_eq!(got, manual);
}

#[test]
fn conv_caps2d_channel_mismatch_error() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let layer = ConvCaps2d::new(&mut params, &mut r, "l", 2, 3, &layer_cfg(3, 1, 2, 2, false)).unwrap();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(vec![0.0; 25 * 4], shape![1, 5, 5, 2, 2]).unwrap()).unwrap();
    let err = layer.forward(&mut cx, &x).unwrap_err().to_string();
    assert!(err.contains("n*d channel mismatch"), "{err}");
}

fn cell_cfg(layers: Vec<CapsLayerConfig>, skip_from: usize, routed: bool) -> CellConfig {
    CellConfig { layers, skip_from, routed, routing_iterations: 3 }
}

#[test]
fn cell_matches_hand_composed_layers_bitwise() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(
        vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 1, 2, 2, false)],
        0,
        false,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default()).unwrap();
    let mut srng = StdRng::seed_from_u64(6);
    let x_data: Vec<f64> = (0..4 * 4 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();

    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(x_data.clone(), shape![1, 4, 4, 2, 2]).unwrap()).unwrap();
    let got = cell.forward(&mut cx, &x).unwrap().grid.to_vec();

    // hand-compose on the same tape: l0 (conv+bias+squash), l1 pre-squash,
    // add skip (= l0 out), squash
    let k0 = cx.bound.get(0).clone();
    let b0 = cx.bound.get(1).clone();
    let k1 = cx.bound.get(2).clone();
    let b1 = cx.bound.get(3).clone();
    let l0_out = x
        .grid
        .reshape(shape![1, 4, 4, 4])
        .unwrap()
        .conv2d(&k0, 1, Padding::Same)
        .unwrap()
        .add_bias(&b0)
        .unwrap()
        .reshape(shape![1, 4, 4, 2, 2])
        .unwrap()
        .squash()
        .unwrap();
    let l1_pre = l0_out
        .reshape(shape![1, 4, 4, 4])
        .unwrap()
        .conv2d(&k1, 1, Padding::Same)
        .unwrap()
        .add_bias(&b1)
        .unwrap()
        .reshape(shape![1, 4, 4, 2, 2])
        .unwrap();
    let want = l1_pre.add(&l0_out).unwrap().squash().unwrap().to_vec();
    assert_eq!(got, want);
}

#[test]
fn cell_zeroed_final_layer_is_squash_of_skip() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(
        vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 1, 2, 2, false)],
        0,
        false,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default()).unwrap();
    for v in params.data_mut(2).iter_mut() {
        *v = 0.0; // final kernel
    }
    let mut srng = StdRng::seed_from_u64(7);
    let x_data: Vec<f64> = (0..4 * 4 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(x_data, shape![1, 4, 4, 2, 2]).unwrap()).unwrap();
    let got = cell.forward(&mut cx, &x).unwrap().grid.to_vec();

    // layer 0 output squashed again
    let k0 = cx.bound.get(0).clone();
    let b0 = cx.bound.get(1).clone();
    let l0_out = x
        .grid
        .reshape(shape![1, 4, 4, 4])
        .unwrap()
        .conv2d(&k0, 1, Padding::Same)
        .unwrap()
        .add_bias(&b0)
        .unwrap()
        .reshape(shape![1, 4, 4, 2, 2])
        .unwrap()
        .squash()
        .unwrap();
    let want = l0_out.squash().unwrap().to_vec();
    assert_eq!(got, want);
}

#[test]
fn cell_gradient_reaches_first_layer_through_skip() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(
        vec![
            layer_cfg(3, 1, 2, 2, false),
            layer_cfg(3, 1, 2, 2, false),
            layer_cfg(3, 1, 2, 2, false),
        ],
        0,
        false,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default()).unwrap();
    // zero the middle layer (params 2=kernel,3=bias) and final layer (4,5)
    for id in [2usize, 4] {
        for v in params.data_mut(id).iter_mut() {
            *v = 0.0;
        }
    }
    let mut srng = StdRng::seed_from_u64(8);
    let x_data: Vec<f64> = (0..4 * 4 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Train).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(x_data, shape![1, 4, 4, 2, 2]).unwrap()).unwrap();
    let y = cell.forward(&mut cx, &x).unwrap();
    let loss = y.grid.mul(&y.grid).unwrap().sum_all().unwrap();
    cx.tape.backward(&loss).unwrap();
    let g0 = cx.bound.get(0).grad().expect("first-layer kernel gradient");
    assert!(g0.iter().any(|v| v.abs() > 0.0), "gradient blocked from first layer");
}

#[test]
fn cell_skip_shape_mismatch_error() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    // final layer strides down, so skip source (layer 0) no longer matches
    let cfg = cell_cfg(
        vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 2, 2, 2, false)],
        0,
        false,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default()).unwrap();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = CapsuleTensor::new(cx.tape.var(vec![0.1; 4 * 4 * 4], shape![1, 4, 4, 2, 2]).unwrap()).unwrap();
    let err = cell.forward(&mut cx, &x).unwrap_err().to_string();
    assert!(err.contains("skip source"), "{err}");
}

#[test]
fn cell_invalid_skip_index_rejected() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 1, 2, 2, false)], 1, false);
    let err = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default());
    assert!(err.is_err());
}

#[test]
fn vote_conv3d_identity_block_maps_child_linearly() {
    // 1x1 spatial kernel, single child type, identity d x d' block
    let (d, m, dp) = (3usize, 1usize, 3usize);
    let tape = Tape::<f64>::new();
    let mut kern = vec![0.0; d * 1 * 1 * 1 * (m * dp)];
    for j in 0..d {
        kern[j * m * dp + j] = 1.0; // kernel[j,0,0,0,j] = 1
    }
    let kernel = tape.var(kern, shape![d, 1, 1, 1, m * dp]).unwrap();
    let caps_data = vec![0.4, -0.9, 1.7, 0.2, 0.0, -0.5];
    let x = CapsuleTensor::new(tape.var(caps_data.clone(), shape![1, 2, 1, 1, 3]).unwrap()).unwrap();
    let votes = vote_conv3d(&x, &kernel, 1, Padding::Same, m, dp).unwrap();
    assert_eq!(votes.votes.shape().dims(), &[2, 1, 1, 3]);
    assert_eq!(votes.votes.to_vec(), caps_data);
}

#[test]
fn vote_conv3d_shape_and_grouping() {
    let tape = Tape::<f32>::new();
    let (n, h, w, types, d) = (1, 8, 8, 8, 16);
    let (m, dp) = (8, 16);
    let x = CapsuleTensor::new(tape.var(vec![0.01f32; n * h * w * types * d], shape![n, h, w, types, d]).unwrap()).unwrap();
    let kernel = tape.var(vec![0.0f32; d * 3 * 3 * m * dp], shape![d, 3, 3, 1, m * dp]).unwrap();
    let votes = vote_conv3d(&x, &kernel, 2, Padding::Same, m, dp).unwrap();
    // one vote group per child type at each output location
    assert_eq!(votes.votes.shape().dims(), &[n * 4 * 4, types, m, dp]);
    let g = votes.grouping.unwrap();
    assert_eq!((g.batch, g.height, g.width, g.child_types), (n, 4, 4, types));
}

#[test]
fn vote_conv3d_matches_explicit_weighted_sum() {
    let mut srng = StdRng::seed_from_u64(17);
    let (n, h, w, types, d) = (2, 5, 4, 3, 4);
    let (kh, kw, m, dp) = (3, 3, 2, 3);
    let caps: Vec<f64> = (0..n * h * w * types * d).map(|_| srng.random_range(-1.0..1.0)).collect();
    let kern: Vec<f64> = (0..d * kh * kw * m * dp).map(|_| srng.random_range(-1.0..1.0)).collect();
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        let tape = Tape::<f64>::new();
        let x = CapsuleTensor::new(tape.var(caps.clone(), shape![n, h, w, types, d]).unwrap()).unwrap();
        let kernel = tape.var(kern.clone(), shape![d, kh, kw, 1, m * dp]).unwrap();
        let votes = vote_conv3d(&x, &kernel, stride, padding, m, dp).unwrap();
        let (want, oh, ow) =
            reference::vote_weighted_sum_naive(&caps, n, h, w, types, d, &kern, kh, kw, m, dp, stride, padding);
        assert_eq!(votes.votes.shape().dims(), &[n * oh * ow, types, m, dp]);
        // reference layout [N,H',W',n,m,d'] equals votes [N*H'*W', n, m, d']
        let got = votes.votes.to_vec();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn flatten_caps_preserves_contents_and_round_trips() {
    let tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let x = CapsuleTensor::new(tape.var(data.clone(), shape![1, 2, 2, 1, 4]).unwrap()).unwrap();
    let flat = flatten_caps(&x).unwrap();
    assert_eq!(flat.shape().dims(), &[1, 4, 4]);
    assert_eq!(flat.to_vec(), data);
    let back = unflatten_caps(&flat, 2, 2, 1).unwrap();
    assert_eq!(back.grid.to_vec(), data);
}

#[test]
fn flatten_caps_index_law() {
    // element (h=1, w=0, type=0) lands at flat index 1*W*n
    let (h, w, types, d) = (3usize, 2usize, 2usize, 1usize);
    let tape = Tape::<f64>::new();
    let mut data = vec![0.0; h * w * types * d];
    let marker = 42.0;
    data[(w * types) * d] = 0.0; // placeholder, overwritten below
    let idx = ((1 * w + 0) * types + 0) * d;
    data[idx] = marker;
    let x = CapsuleTensor::new(tape.var(data, shape![1, h, w, types, d]).unwrap()).unwrap();
    let flat = flatten_caps(&x).unwrap().to_vec();
    assert_eq!(flat[1 * w * types * d], marker);
}

#[test]
fn class_caps_single_child_is_squash_of_vote() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cc = ClassCaps::new(&mut params, &mut r, "cc", 1, 3, 4, 2, 3, None).unwrap();
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = cx.tape.var(vec![0.7, -0.1, 0.4], shape![1, 1, 3]).unwrap();
    let out = cc.forward(&mut cx, &x).unwrap();
    // with one child the couplings are forced to 1 per class, so each class
    // capsule is the squash of its single vote
    let w = cx.bound.get(0).clone();
    let votes = x.caps_transform(&w, &[0]).unwrap();
    let want = votes.squash().unwrap().to_vec();
    for (a, b) in out.to_vec().iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn class_caps_zero_transforms_zero_norms() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cc = ClassCaps::new(&mut params, &mut r, "cc", 5, 3, 4, 2, 3, None).unwrap();
    for v in params.data_mut(0).iter_mut() {
        *v = 0.0;
    }
    let tape = Tape::new();
    let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
    let x = cx.tape.var(vec![0.3; 15], shape![1, 5, 3]).unwrap();
    let out = cc.forward(&mut cx, &x).unwrap();
    let norms = out.caps_norm().unwrap().to_vec();
    assert!(norms.iter().all(|&n| n == 0.0), "{norms:?}");
}

#[test]
fn class_caps_matches_routing_oracle() {
    let mut srng = StdRng::seed_from_u64(23);
    let (k, c, d, dp) = (3usize, 2usize, 2usize, 2usize);
    for softmax_over_children in [true, false] {
        let mut params = Params::<f64>::new();
        let mut r = rng();
        let opts = RouteOptions { iterations: 3, full_grad: false, softmax_over_children };
        let cc = ClassCaps::with_options(&mut params, &mut r, "cc", k, d, c, dp, opts, None).unwrap();
        let w_data: Vec<f64> = (0..k * c * d * dp).map(|_| srng.random_range(-1.0..1.0)).collect();
        params.data_mut(0).copy_from_slice(&w_data);
        let x_data: Vec<f64> = (0..k * d).map(|_| srng.random_range(-1.0..1.0)).collect();

        let tape = Tape::new();
        let mut cx = Forward::new(tape.clone(), &mut params, Mode::Infer).unwrap();
        let x = cx.tape.var(x_data.clone(), shape![1, k, d]).unwrap();
        let got = cc.forward(&mut cx, &x).unwrap().to_vec();

        // hand-set votes, then the independent straight-line recurrence
        let mut votes = vec![0.0; k * c * dp];
        for ki in 0..k {
            for ci in 0..c {
                for p in 0..dp {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += x_data[ki * d + j] * w_data[((ki * c + ci) * d + j) * dp + p];
                    }
                    votes[(ki * c + ci) * dp + p] = acc;
                }
            }
        }
        let want = reference::route_straightline(&votes, k, c, dp, 3, softmax_over_children);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn grad_check_conv_caps_layer() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let layer = ConvCaps2d::new(&mut params, &mut r, "l", 2, 2, &layer_cfg(3, 1, 2, 2, true)).unwrap();
    let params = std::cell::RefCell::new(params);
    let mut srng = StdRng::seed_from_u64(31);
    let x: Vec<f64> = (0..2 * 3 * 3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..2 * 3 * 3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let err = grad_check(
        |tape, t| {
            let mut p = params.borrow_mut();
            let mut cx = Forward::new(tape.clone(), &mut p, Mode::Train)?;
            let caps = CapsuleTensor::new(t.clone())?;
            let y = layer.forward(&mut cx, &caps)?;
            let pr = tape.constant(probe.clone(), y.grid.shape().clone())?;
            y.grid.mul(&pr)?.sum_all()
        },
        &x,
        &shape![2, 3, 3, 2, 2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_capsule_cell_with_skip() {
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(
        vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 1, 2, 2, false)],
        0,
        false,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, RouteOptions::default()).unwrap();
    let params = std::cell::RefCell::new(params);
    let mut srng = StdRng::seed_from_u64(33);
    let x: Vec<f64> = (0..3 * 3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..3 * 3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let err = grad_check(
        |tape, t| {
            let mut p = params.borrow_mut();
            let mut cx = Forward::new(tape.clone(), &mut p, Mode::Train)?;
            let caps = CapsuleTensor::new(t.clone())?;
            let y = cell.forward(&mut cx, &caps)?;
            let pr = tape.constant(probe.clone(), y.grid.shape().clone())?;
            y.grid.mul(&pr)?.sum_all()
        },
        &x,
        &shape![1, 3, 3, 2, 2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_routed_cell_and_class_caps() {
    // gradients of non-final routing iterations are stopped by design, which
    // finite differences cannot see; check the fully-differentiated variant
    let full = RouteOptions { full_grad: true, ..RouteOptions::default() };
    let mut params = Params::<f64>::new();
    let mut r = rng();
    let cfg = cell_cfg(
        vec![layer_cfg(3, 1, 2, 2, false), layer_cfg(3, 1, 2, 2, false)],
        0,
        true,
    );
    let cell = CapsuleCell::new(&mut params, &mut r, "cell", 2, 2, &cfg, full).unwrap();
    let cc = ClassCaps::with_options(
        &mut params,
        &mut r,
        "cc",
        3 * 3 * 2,
        2,
        3,
        4,
        RouteOptions { full_grad: true, softmax_over_children: true, iterations: 3 },
        None,
    )
    .unwrap();
    let params = std::cell::RefCell::new(params);
    let mut srng = StdRng::seed_from_u64(35);
    let x: Vec<f64> = (0..3 * 3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..3 * 4).map(|_| srng.random_range(-1.0..1.0)).collect();
    let err = grad_check(
        |tape, t| {
            let mut p = params.borrow_mut();
            let mut cx = Forward::new(tape.clone(), &mut p, Mode::Train)?;
            let caps = CapsuleTensor::new(t.clone())?;
            let y = cell.forward(&mut cx, &caps)?;
            let flat = flatten_caps(&y)?;
            let out = cc.forward(&mut cx, &flat)?;
            let pr = tape.constant(probe.clone(), out.shape().clone())?;
            out.mul(&pr)?.sum_all()
        },
        &x,
        &shape![1, 3, 3, 2, 2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn squash_direction_preserved() {
    let mut srng = StdRng::seed_from_u64(37);
    let tape = Tape::<f64>::new();
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| srng.random_range(-3.0..3.0)).collect();
        let x = tape.var(v.clone(), shape![1, 4]).unwrap();
        let y = x.squash().unwrap().to_vec();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv > 1e-6 {
            let cos: f64 = v.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / (nv * ny);
            assert!((cos - 1.0).abs() < 1e-6, "direction not preserved: cos={cos}");
            assert!(ny < 1.0, "norm must stay below 1");
        }
    }
}
