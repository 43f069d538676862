mod common;

use common::*;
use cresnet::blocks::wbr_forward;
use cresnet::tensor::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_block_matches_hand_wired_chain() {
    let mut checked = 0;
    for (si, shape) in toy_shapes().iter().enumerate() {
        for mask in masks(&forced_positions(shape)) {
            for projection_bn in [true, false] {
                let mut toy = toy_block(shape, &mask, projection_bn, si as u64);
                let x = Nd::random([3, shape.in_ch, shape.hw, shape.hw], &mut ChaCha8Rng::seed_from_u64(99));
                let mut tape = Tape::new();
                let xv = tape.input(x.to_tensor());
                let y = toy.block.forward(&mut tape, &toy.store, xv).unwrap();
                let got = Nd::from_tensor(tape.value(y));
                let want = block_oracle(&toy.block, &toy.store, &x);
                let err = got.max_abs_diff(&want);
                assert!(err < 1e-6, "{:?} in_ch {} stride {} mask {mask:?}: {err}", shape.kind, shape.in_ch, shape.stride);
                checked += 1;
            }
        }
    }
    assert!(checked >= 40, "only {checked} configurations");
}

#[test]
fn wbr_matches_relu_bn_conv() {
    let shape = ToyShape { kind: cresnet::BlockKind::BasicBlock, in_ch: 3, width: 5, stride: 2, hw: 7 };
    let mask = vec![cresnet::JumperKind::Dashed];
    let mut toy = toy_block(&shape, &mask, true, 4);
    let x = Nd::random([2, 3, 7, 7], &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let xv = tape.input(x.to_tensor());
    let unit = &mut toy.block.layers[0];
    let y = wbr_forward(unit, &mut tape, &toy.store, xv).unwrap();
    let want = relu(&unit_oracle(unit, &toy.store, &x));
    assert!(Nd::from_tensor(tape.value(y)).max_abs_diff(&want) < 1e-9);
}

fn unit_oracle(u: &cresnet::blocks::ConvBn<f64>, store: &cresnet::tensor::ParamStore<f64>, x: &Nd) -> Nd {
    common::unit(u, store, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn production_conv_matches_direct_loops(
        n in 1usize..4, cin in 1usize..6, cout in 1usize..6, hw in 3usize..10,
        k in prop::sample::select(vec![1usize, 3, 7]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        prop_assume!(hw + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Nd::random([n, cin, hw, hw], &mut rng);
        let w = Nd::random([cout, cin, k, k], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(x.to_tensor());
        let wv = tape.input(w.to_tensor());
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let want = direct_conv(&x, &w.data, cout, k, stride, pad);
        prop_assert!(Nd::from_tensor(tape.value(y)).max_abs_diff(&want) < 1e-5);

        // the f32 path agrees too
        let mut t32 = Tape::<f32>::new();
        let xv = t32.input(x.to_tensor().cast());
        let wv = t32.input(w.to_tensor().cast());
        let y = t32.conv2d(xv, wv, stride, pad).unwrap();
        let got: Vec<f64> = t32.value(y).data().iter().map(|&v| v as f64).collect();
        let err = got.iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-4, "f32 err {}", err);
    }
}
