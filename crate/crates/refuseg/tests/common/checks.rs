//! Formula- and metric-fidelity routines shared by the oracle and
//! acceptance test targets.

#![allow(dead_code)]

use super::*;
use rand::Rng;
use refuseg::gradcore::{Tape, Tensor};
use refuseg::losses::{
    batch_contrastive, dice_loss, focal_loss, one_hot, pair_contrastive_term, FocalParams,
};
use refuseg::metrics::{dice_score, hausdorff95, Hd95Config, Mask};

pub fn random_probmap(rng: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize, s: usize) -> Vec<f32> {
    let logits = uniform(rng, n * c * s, -2.0, 2.0);
    let soft = softmax_channels_ref(&to_f64(&logits), n, c, s);
    soft.iter().map(|&v| v as f32).collect()
}

pub fn check_dice_fidelity(instances: u64) {
    for seed in 0..instances {
        let mut rng = rng_for(seed + 1_000);
        let (n, c, h, w) = (1usize, 4usize, 4usize, 4usize);
        let s = h * w;
        let pred = random_probmap(&mut rng, n, c, s);
        let labels: Vec<u8> = (0..n * s).map(|_| rng.gen_range(0..c as u8)).collect();
        let target = one_hot(&labels, n, c, h, w).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant_from(vec![n, c, h, w], pred.clone()).unwrap();
        let loss = dice_loss(&mut tape, p, &target).unwrap();
        let expect = dice_oracle(&to_f64(&pred), &to_f64(target.data()), n, c, s);
        let got = tape.scalar_value(loss) as f64;
        assert!((got - expect).abs() < 1e-6, "dice seed {seed}: {got} vs {expect}");
        assert!((0.0..=1.0 + 1e-5).contains(&got));
    }
}

pub fn check_focal_fidelity(instances: u64) {
    for seed in 0..instances {
        let mut rng = rng_for(seed + 2_000);
        let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
        let s = h * w;
        let pred = random_probmap(&mut rng, n, c, s);
        let labels: Vec<u8> = (0..n * s).map(|_| rng.gen_range(0..c as u8)).collect();
        let target = one_hot(&labels, n, c, h, w).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant_from(vec![n, c, h, w], pred.clone()).unwrap();
        let loss = focal_loss(&mut tape, p, &target, &FocalParams::default()).unwrap();
        let expect = focal_oracle(&to_f64(&pred), &to_f64(target.data()), 0.25, 2.0, 1e-7);
        let got = tape.scalar_value(loss) as f64;
        assert!((got - expect).abs() < 1e-6, "focal seed {seed}: {got} vs {expect}");
        assert!(got >= 0.0);
    }
}

pub fn check_pair_term_fidelity(instances: u64) {
    for seed in 0..instances {
        let mut rng = rng_for(seed + 3_000);
        let (rows, d) = (6usize, 5usize);
        let data = uniform(&mut rng, rows * d, -1.0, 1.0);
        let views = Tensor::new(vec![rows, d], data.clone()).unwrap();
        let rows_f64: Vec<Vec<f64>> = data.chunks(d).map(to_f64).collect();
        let i = rng.gen_range(0..rows);
        let mut j = rng.gen_range(0..rows);
        if j == i {
            j = (j + 1) % rows;
        }
        let got = pair_contrastive_term(&views, i, j, 1.0).unwrap();
        let expect = pair_term_oracle(&rows_f64, i, j, 1.0);
        assert!((got - expect).abs() < 1e-6, "pair seed {seed}: {got} vs {expect}");
        assert!(got >= -1e-12);
    }
}

pub fn check_batch_contrastive_fidelity(instances: u64) {
    for seed in 0..instances {
        let mut rng = rng_for(seed + 4_000);
        let (n, d) = (3usize, 4usize);
        let px = uniform(&mut rng, n * d, -1.0, 1.0);
        let py = uniform(&mut rng, n * d, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![n, d], px.clone()).unwrap();
        let y = tape.constant_from(vec![n, d], py.clone()).unwrap();
        let loss = batch_contrastive(&mut tape, x, y, 1.0).unwrap();
        let rows = |v: &[f32]| -> Vec<Vec<f64>> { v.chunks(d).map(to_f64).collect() };
        let expect = batch_contrastive_oracle(&rows(&px), &rows(&py), 1.0);
        let got = tape.scalar_value(loss) as f64;
        assert!((got - expect).abs() < 1e-6, "batch seed {seed}: {got} vs {expect}");
        assert!(got >= 0.0);
    }
}

pub fn check_identical_views_ln3() {
    let row = [0.4f32, -0.2, 0.9];
    let mut data = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(&row);
    }
    let views = Tensor::new(vec![4, 3], data).unwrap();
    let got = pair_contrastive_term(&views, 0, 2, 1.0).unwrap();
    assert!((got - 3.0f64.ln()).abs() < 1e-9, "{got}");
}

pub fn check_hd95_fidelity(instances: u64) {
    let cfg = Hd95Config::default();
    for seed in 0..instances {
        let mut rng = rng_for(seed + 7_000);
        let ex = [rng.gen_range(4..=32usize), rng.gen_range(4..=32usize), 1];
        let density = rng.gen_range(0.02..0.5);
        let total = ex[0] * ex[1];
        let pred_bits: Vec<bool> = (0..total).map(|_| rng.gen_bool(density)).collect();
        let gt_bits: Vec<bool> = (0..total).map(|_| rng.gen_bool(density)).collect();
        let pred = Mask::new(ex, pred_bits.clone()).unwrap();
        let gt = Mask::new(ex, gt_bits.clone()).unwrap();
        let got = hausdorff95(&pred, &gt, &cfg).unwrap();
        let penalty = (((ex[0] - 1) * (ex[0] - 1) + (ex[1] - 1) * (ex[1] - 1)) as f64).sqrt();
        let expect = hd95_brute(&pred_bits, &gt_bits, ex, 95.0, 0.0, penalty);
        assert!((got - expect).abs() < 1e-9, "hd95 seed {seed}: {got} vs {expect}");
    }
}

pub fn check_dice_hand_cases() {
    let block = |points: &[(usize, usize)]| -> Mask {
        let mut bits = vec![false; 16];
        for &(x, y) in points {
            bits[x + 4 * y] = true;
        }
        Mask::new([4, 4, 1], bits).unwrap()
    };
    let p = block(&[(0, 0), (1, 0), (0, 1), (1, 1)]);
    assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
    let q = block(&[(2, 2), (3, 2), (2, 3), (3, 3)]);
    assert_eq!(dice_score(&p, &q).unwrap(), 0.0);
    let shifted = block(&[(1, 0), (2, 0), (1, 1), (2, 1)]);
    assert_eq!(dice_score(&p, &shifted).unwrap(), 0.5);
}
