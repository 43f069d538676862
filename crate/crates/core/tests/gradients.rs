mod common;

use common::*;
use cresnet::blocks::wbr_forward;
use cresnet::tensor::{grad_check, BnMode, ParamRole, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;

fn weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error over all kinds, masks and toy geometries. In
/// train mode a parameter whose analytic and numeric gradients are both
/// at noise level is reported separately: a per-channel shift feeding a
/// 1x1 conv and then batch statistics has an exactly zero gradient.
fn sweep(mode: BnMode) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut structural_zeros = 0;
    for (si, shape) in toy_shapes().iter().enumerate() {
        for mask in masks(&forced_positions(shape)) {
            let toy = toy_block(shape, &mask, si % 2 == 0, si as u64 + 10);
            let mut block = toy.block;
            let mut store = toy.store;
            block.set_mode(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(si as u64 + 100);
            for l in block.layers.iter_mut().chain(block.jumpers.iter_mut().filter_map(|j| j.projection.as_mut())) {
                if let Some(n) = &mut l.norm {
                    n.state.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                    n.state.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
                }
            }
            let x = Nd::random([2, shape.in_ch, shape.hw, shape.hw], &mut ChaCha8Rng::seed_from_u64(si as u64)).to_tensor();
            let mut probe = Tape::new();
            let xv = probe.input(x.clone());
            let yv = block.forward(&mut probe, &store, xv).unwrap();
            let r = weights(probe.shape(yv), 7);
            let report = grad_check(&mut store, STEP, |ps, tape| {
                let xv = tape.input(x.clone());
                let y = block.forward(tape, ps, xv).map_err(|e| match e {
                    cresnet::Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let y = tape.mul_const(y, &r)?;
                Ok(tape.sum(y))
            })
            .unwrap();
            for p in &report.params {
                if mode == BnMode::Train && p.max_abs_error < 1e-7 && p.rel_error >= TOL {
                    structural_zeros += 1;
                    continue;
                }
                assert!(
                    p.rel_error < TOL,
                    "{mode:?} {:?} in_ch {} stride {} {mask:?}: {} at {}",
                    shape.kind,
                    shape.in_ch,
                    shape.stride,
                    p.rel_error,
                    p.name
                );
                worst = worst.max(p.rel_error);
            }
        }
    }
    (worst, structural_zeros)
}

#[test]
fn every_block_kind_and_mask_eval_statistics() {
    let (worst, zeros) = sweep(BnMode::Eval);
    assert_eq!(zeros, 0);
    println!("worst relative error (eval BN): {worst:.2e}");
}

#[test]
fn every_block_kind_and_mask_batch_statistics() {
    let (worst, zeros) = sweep(BnMode::Train);
    println!("worst relative error (batch BN): {worst:.2e}, {zeros} structurally zero gradients");
}

#[test]
fn single_conv() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamRole::ConvWeight, weights(&[4, 3, 3, 3], 1)).unwrap();
    let x = weights(&[2, 3, 6, 6], 2);
    let r = weights(&[2, 4, 3, 3], 3);
    let report = grad_check(&mut store, STEP, |ps, tape| {
        let xv = tape.input(x.clone());
        let wv = tape.param(ps, w);
        let y = tape.conv2d(xv, wv, 2, 1)?;
        let y = tape.mul_const(y, &r)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn single_linear_layer() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamRole::FcWeight, weights(&[5, 8], 4)).unwrap();
    let b = store.add("b", ParamRole::FcBias, weights(&[5], 5)).unwrap();
    let x = weights(&[3, 8], 6);
    let r = weights(&[3, 5], 7);
    let report = grad_check(&mut store, STEP, |ps, tape| {
        let xv = tape.input(x.clone());
        let (wv, bv) = (tape.param(ps, w), tape.param(ps, b));
        let y = tape.linear(xv, wv, bv)?;
        let y = tape.mul_const(y, &r)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn wbr_layer_with_cross_entropy_head() {
    let shape = ToyShape { kind: cresnet::BlockKind::BasicBlock, in_ch: 3, width: 4, stride: 1, hw: 5 };
    let toy = toy_block(&shape, &[cresnet::JumperKind::Dashed], true, 8);
    let mut store = toy.store;
    let mut unit = toy.block.layers[0].clone();
    let fc = store.add("fc.w", ParamRole::FcWeight, weights(&[3, 4], 9)).unwrap();
    let fb = store.add("fc.b", ParamRole::FcBias, weights(&[3], 10)).unwrap();
    let x = weights(&[4, 3, 5, 5], 11);
    let report = grad_check(&mut store, STEP, |ps, tape| {
        let xv = tape.input(x.clone());
        let h = wbr_forward(&mut unit, tape, ps, xv).map_err(|e| match e {
            cresnet::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let pooled = tape.global_avg_pool(h)?;
        let (wv, bv) = (tape.param(ps, fc), tape.param(ps, fb));
        let logits = tape.linear(pooled, wv, bv)?;
        tape.softmax_cross_entropy(logits, &[0, 2, 1, 2])
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{:?}", report.worst());
}
