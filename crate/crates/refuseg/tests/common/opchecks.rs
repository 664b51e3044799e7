//! Finite-difference gradient-check routines shared by the gradcheck and
//! acceptance test targets.

#![allow(dead_code)]

use super::*;
use rand::Rng;
use refuseg::gradcore::{NodeId, Tape, Tensor};
use refuseg::losses::{batch_contrastive, dice_loss, focal_loss, one_hot, FocalParams};


pub const SEEDS: u64 = 20;

/// Harness: loss = sum(op(leaves) * c) with a fixed random weighting `c`;
/// analytic gradients come from the float32 tape, numeric ones from a
/// float64 reference composed the same way.
pub fn check_op(
    what: &str,
    seed: u64,
    leaves: &[(Vec<usize>, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) {
    check_op_with(what, seed, leaves, build, reference, false)
}

pub fn check_op_with(
    what: &str,
    seed: u64,
    leaves: &[(Vec<usize>, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    piecewise: bool,
) {
    let mut tape = Tape::new();
    let mut ids = Vec::new();
    let mut tensors = Vec::new();
    for (shape, data) in leaves {
        let mut t = Tensor::new(shape.clone(), data.clone()).unwrap().with_grad();
        ids.push(tape.leaf(&mut t));
        tensors.push(t);
    }
    let out = build(&mut tape, &ids);

    let inputs_f64: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| to_f64(d)).collect();
    let ref_out = reference(&inputs_f64);
    let got_out = tape.value(out);
    assert_eq!(got_out.len(), ref_out.len(), "{what}: output size");
    for (i, (&g, &r)) in got_out.iter().zip(&ref_out).enumerate() {
        assert!(
            (g as f64 - r).abs() <= 1e-4 + 1e-5 * r.abs(),
            "{what} seed {seed}: forward mismatch at {i}: {g} vs {r}"
        );
    }

    let mut crng = rng_for(seed ^ 0xC0FFEE);
    let cvals = uniform(&mut crng, got_out.len(), -1.0, 1.0);
    let c = tape.constant_from(tape.shape(out).to_vec(), cvals.clone()).unwrap();
    let prod = tape.mul(out, c).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();

    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, (_, d))| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let cvals_f64 = to_f64(&cvals);
    let f = move |xs: &[Vec<f64>]| -> f64 {
        reference(xs).iter().zip(&cvals_f64).map(|(a, b)| a * b).sum()
    };
    if piecewise {
        fd_check_piecewise(&f, &inputs_f64, &analytic, what);
    } else {
        fd_check(&f, &inputs_f64, &analytic, what);
    }
}

pub fn elementwise_binary_ops() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed);
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 12, -1.0, 1.0);
        let shape = vec![3, 4];
        check_op(
            "add",
            seed,
            &[(shape.clone(), a.clone()), (shape.clone(), b.clone())],
            &|t, ids| t.add(ids[0], ids[1]).unwrap(),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x + y).collect(),
        );
        check_op(
            "sub",
            seed,
            &[(shape.clone(), a.clone()), (shape.clone(), b.clone())],
            &|t, ids| t.sub(ids[0], ids[1]).unwrap(),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x - y).collect(),
        );
        check_op(
            "mul",
            seed,
            &[(shape.clone(), a.clone()), (shape.clone(), b.clone())],
            &|t, ids| t.mul(ids[0], ids[1]).unwrap(),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x * y).collect(),
        );
        // denominator away from zero
        let denom: Vec<f32> = b.iter().map(|&v| if v >= 0.0 { v + 0.25 } else { v - 0.25 }).collect();
        check_op(
            "div",
            seed,
            &[(shape.clone(), a), (shape, denom)],
            &|t, ids| t.div(ids[0], ids[1]).unwrap(),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x / y).collect(),
        );
    }
}

pub fn elementwise_unary_ops() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 100);
        let shape = vec![2, 5];
        let x = uniform(&mut rng, 10, -1.0, 1.0);
        check_op(
            "add_scalar",
            seed,
            &[(shape.clone(), x.clone())],
            &|t, ids| t.add_scalar(ids[0], 0.7),
            &|xs| xs[0].iter().map(|v| v + 0.7).collect(),
        );
        check_op(
            "mul_scalar",
            seed,
            &[(shape.clone(), x.clone())],
            &|t, ids| t.mul_scalar(ids[0], -1.3),
            &|xs| xs[0].iter().map(|v| v * -1.3).collect(),
        );
        check_op(
            "exp",
            seed,
            &[(shape.clone(), x.clone())],
            &|t, ids| t.exp(ids[0]),
            &|xs| xs[0].iter().map(|v| v.exp()).collect(),
        );
        let pos = uniform(&mut rng, 10, 0.1, 2.0);
        check_op(
            "ln",
            seed,
            &[(shape.clone(), pos.clone())],
            &|t, ids| t.ln(ids[0]),
            &|xs| xs[0].iter().map(|v| v.ln()).collect(),
        );
        check_op(
            "pow_scalar",
            seed,
            &[(shape.clone(), pos)],
            &|t, ids| t.pow_scalar(ids[0], 2.5),
            &|xs| xs[0].iter().map(|v| v.powf(2.5)).collect(),
        );
        let off = uniform_off_zero(&mut rng, 10);
        check_op(
            "relu",
            seed,
            &[(shape.clone(), off.clone())],
            &|t, ids| t.relu(ids[0]),
            &|xs| xs[0].iter().map(|v| v.max(0.0)).collect(),
        );
        // keep every value > 3h away from the clamp boundaries
        let clamped: Vec<f32> = off
            .iter()
            .map(|&v| {
                let v = v * 0.8;
                if (v - 0.5).abs() < 0.02 || (v + 0.5).abs() < 0.02 {
                    v + 0.05
                } else {
                    v
                }
            })
            .collect();
        check_op(
            "clamp",
            seed,
            &[(shape.clone(), clamped)],
            &|t, ids| t.clamp(ids[0], -0.5, 0.5),
            &|xs| xs[0].iter().map(|v| v.clamp(-0.5, 0.5)).collect(),
        );
    }
}

pub fn conv2d_strides_and_bias() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 200);
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let d = ConvRefDims { n: 1, cin: 2, h: 6, w: 6, cout: 3, kh: 3, kw: 3, stride, pad };
            let x = uniform(&mut rng, d.n * d.cin * d.h * d.w, -1.0, 1.0);
            let w = uniform(&mut rng, d.cout * d.cin * d.kh * d.kw, -1.0, 1.0);
            let b = uniform(&mut rng, d.cout, -0.5, 0.5);
            check_op(
                &format!("conv2d s{stride} p{pad}"),
                seed,
                &[
                    (vec![d.n, d.cin, d.h, d.w], x),
                    (vec![d.cout, d.cin, d.kh, d.kw], w),
                    (vec![d.cout], b),
                ],
                &move |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap(),
                &move |xs| conv2d_ref(&xs[0], &xs[1], Some(&xs[2]), &d),
            );
        }
    }
}

pub fn linear_with_bias() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 300);
        let (b, din, dout) = (3usize, 5usize, 4usize);
        let x = uniform(&mut rng, b * din, -1.0, 1.0);
        let w = uniform(&mut rng, dout * din, -1.0, 1.0);
        let bias = uniform(&mut rng, dout, -0.5, 0.5);
        check_op(
            "linear",
            seed,
            &[(vec![b, din], x), (vec![dout, din], w), (vec![dout], bias)],
            &move |t, ids| t.linear(ids[0], ids[1], Some(ids[2])).unwrap(),
            &move |xs| linear_ref(&xs[0], &xs[1], Some(&xs[2]), b, din, dout),
        );
    }
}

pub fn batchnorm_training_mode() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 400);
        let (n, c, h, w) = (3usize, 2usize, 3usize, 3usize);
        let s = h * w;
        let x = uniform(&mut rng, n * c * s, -1.0, 1.0);
        let gamma = uniform(&mut rng, c, 0.5, 1.5);
        let beta = uniform(&mut rng, c, -0.5, 0.5);
        check_op(
            "batchnorm train",
            seed,
            &[(vec![n, c, h, w], x), (vec![c], gamma), (vec![c], beta)],
            &move |t, ids| {
                let mut running = Tensor::new(vec![2, c], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
                t.batchnorm(ids[0], ids[1], ids[2], &mut running, true, 0.1, 1e-5).unwrap()
            },
            &move |xs| bn_train_ref(&xs[0], &xs[1], &xs[2], n, c, s, 1e-5),
        );
    }
}

pub fn batchnorm_eval_mode() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 500);
        let (n, c) = (4usize, 3usize);
        let x = uniform(&mut rng, n * c, -1.0, 1.0);
        let gamma = uniform(&mut rng, c, 0.5, 1.5);
        let beta = uniform(&mut rng, c, -0.5, 0.5);
        let rmean = uniform(&mut rng, c, -0.3, 0.3);
        let rvar = uniform(&mut rng, c, 0.5, 1.5);
        let (rm, rv) = (rmean.clone(), rvar.clone());
        check_op(
            "batchnorm eval",
            seed,
            &[(vec![n, c], x), (vec![c], gamma), (vec![c], beta)],
            &move |t, ids| {
                let mut running =
                    Tensor::new(vec![2, c], rmean.iter().chain(rvar.iter()).copied().collect()).unwrap();
                t.batchnorm(ids[0], ids[1], ids[2], &mut running, false, 0.1, 1e-5).unwrap()
            },
            &move |xs| bn_eval_ref(&xs[0], &xs[1], &xs[2], &to_f64(&rm), &to_f64(&rv), n, c, 1, 1e-5),
        );
    }
}

pub fn pooling_and_upsampling() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 600);
        let (n, c, h, w) = (2usize, 2usize, 4usize, 4usize);
        // separate each pooling window's max from its runner-up so the
        // argmax stays put under the FD perturbation
        let mut x = uniform(&mut rng, n * c * h * w, -1.0, 1.0);
        for bc in 0..n * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let idxs: Vec<usize> = (0..4)
                        .map(|k| bc * h * w + (oy * 2 + k / 2) * w + ox * 2 + k % 2)
                        .collect();
                    let max_i = *idxs
                        .iter()
                        .max_by(|&&a, &&b| x[a].partial_cmp(&x[b]).unwrap())
                        .unwrap();
                    let second = idxs
                        .iter()
                        .filter(|&&i| i != max_i)
                        .map(|&i| x[i])
                        .fold(f32::NEG_INFINITY, f32::max);
                    if x[max_i] - second < 0.02 {
                        x[max_i] = second + 0.05;
                    }
                }
            }
        }
        check_op(
            "maxpool2x2",
            seed,
            &[(vec![n, c, h, w], x)],
            &|t, ids| t.maxpool2x2(ids[0]).unwrap(),
            &move |xs| maxpool2x2_ref(&xs[0], n, c, h, w),
        );
        let u = uniform(&mut rng, n * c * h * w, -1.0, 1.0);
        check_op(
            "upsample_nearest2x",
            seed,
            &[(vec![n, c, h, w], u)],
            &|t, ids| t.upsample_nearest2x(ids[0]).unwrap(),
            &move |xs| upsample2x_ref(&xs[0], n, c, h, w),
        );
    }
}

pub fn concat_both_axes() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 700);
        let a = uniform(&mut rng, 2 * 2 * 3 * 3, -1.0, 1.0);
        let b = uniform(&mut rng, 2 * 1 * 3 * 3, -1.0, 1.0);
        check_op(
            "concat channels",
            seed,
            &[(vec![2, 2, 3, 3], a), (vec![2, 1, 3, 3], b)],
            &|t, ids| t.concat(ids, 1).unwrap(),
            &|xs| {
                // interleave per batch item: 2 channels of a then 1 of b
                let mut out = Vec::new();
                for bi in 0..2 {
                    out.extend_from_slice(&xs[0][bi * 18..(bi + 1) * 18]);
                    out.extend_from_slice(&xs[1][bi * 9..(bi + 1) * 9]);
                }
                out
            },
        );
        let r0 = uniform(&mut rng, 2 * 4, -1.0, 1.0);
        let r1 = uniform(&mut rng, 3 * 4, -1.0, 1.0);
        check_op(
            "concat rows",
            seed,
            &[(vec![2, 4], r0), (vec![3, 4], r1)],
            &|t, ids| t.concat(ids, 0).unwrap(),
            &|xs| xs[0].iter().chain(xs[1].iter()).copied().collect(),
        );
    }
}

pub fn elemwise_max_n_gradient_routing() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 800);
        let n = 24;
        let mut tensors = vec![
            uniform(&mut rng, n, -1.0, 1.0),
            uniform(&mut rng, n, -1.0, 1.0),
            uniform(&mut rng, n, -1.0, 1.0),
        ];
        separate_maxima(&mut tensors, 0.01);
        let leaves: Vec<(Vec<usize>, Vec<f32>)> =
            tensors.iter().map(|t| (vec![2, 3, 2, 2], t.clone())).collect();
        check_op(
            "elemwise_max_n",
            seed,
            &leaves,
            &|t, ids| t.elemwise_max_n(ids).unwrap(),
            &|xs| {
                let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
                elemwise_max_ref(&refs)
            },
        );
    }
}

pub fn pooling_reductions_and_softmax() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 900);
        let (n, c, h, w) = (2usize, 3usize, 2usize, 2usize);
        let s = h * w;
        let x = uniform(&mut rng, n * c * s, -1.0, 1.0);
        check_op(
            "global_avgpool",
            seed,
            &[(vec![n, c, h, w], x.clone())],
            &|t, ids| t.global_avgpool(ids[0]).unwrap(),
            &move |xs| global_avgpool_ref(&xs[0], n, c, s),
        );
        check_op(
            "softmax_channels",
            seed,
            &[(vec![n, c, h, w], x.clone())],
            &|t, ids| t.softmax_channels(ids[0]).unwrap(),
            &move |xs| softmax_channels_ref(&xs[0], n, c, s),
        );
        check_op(
            "sum_all",
            seed,
            &[(vec![n, c, h, w], x.clone())],
            &|t, ids| t.sum_all(ids[0]),
            &|xs| vec![xs[0].iter().sum()],
        );
        check_op(
            "mean_all",
            seed,
            &[(vec![n, c, h, w], x.clone())],
            &|t, ids| t.mean_all(ids[0]),
            &|xs| vec![xs[0].iter().sum::<f64>() / xs[0].len() as f64],
        );
        check_op(
            "sum_per_channel",
            seed,
            &[(vec![n, c, h, w], x.clone())],
            &|t, ids| t.sum_per_channel(ids[0]).unwrap(),
            &move |xs| {
                (0..c)
                    .map(|ch| {
                        (0..n).map(|b| xs[0][(b * c + ch) * s..(b * c + ch) * s + s].iter().sum::<f64>()).sum()
                    })
                    .collect()
            },
        );
        let m = uniform(&mut rng, 12, -1.0, 1.0);
        check_op(
            "sum_rows",
            seed,
            &[(vec![3, 4], m)],
            &|t, ids| t.sum_rows(ids[0]).unwrap(),
            &|xs| xs[0].chunks(4).map(|r| r.iter().sum()).collect(),
        );
        // rows away from zero norm
        let mut rows = uniform(&mut rng, 12, -1.0, 1.0);
        for r in 0..3 {
            rows[r * 4] += 1.0f32.copysign(rows[r * 4]);
        }
        check_op(
            "l2_normalize_rows",
            seed,
            &[(vec![3, 4], rows)],
            &|t, ids| t.l2_normalize_rows(ids[0]).unwrap(),
            &|xs| l2_normalize_rows_ref(&xs[0], 3, 4),
        );
    }
}

/// The composite check freezes every selection (relu activity, pooling
/// winners, fusion picks) from a float64 baseline forward. The frozen
/// composition is smooth, so central differences are exactly valid, and
/// the float32 tape provably makes the same selections whenever every
/// decision margin exceeds float32 ambiguity.
pub struct FrozenSelections {
    pub relu_active: Vec<bool>,
    pub pool_pick: Vec<usize>,
    pub fuse_first: Vec<bool>,
    pub margin: f64,
}

pub fn composite_stages(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d1 = ConvRefDims { n: 1, cin: 2, h: 8, w: 8, cout: 4, kh: 3, kw: 3, stride: 1, pad: 1 };
    let c1 = conv2d_ref(&xs[0], &xs[1], None, &d1);
    let b1 = bn_train_ref(&c1, &xs[2], &xs[3], 1, 4, 64, 1e-5);
    let c2 = conv2d_ref(&xs[0], &xs[4], None, &d1);
    (b1, c2)
}

pub fn freeze_selections(xs: &[Vec<f64>]) -> FrozenSelections {
    let (b1, c2) = composite_stages(xs);
    let mut margin = f64::INFINITY;
    let relu_active: Vec<bool> = b1
        .iter()
        .map(|&v| {
            margin = margin.min(v.abs());
            v > 0.0
        })
        .collect();
    let r1: Vec<f64> = b1.iter().map(|v| v.max(0.0)).collect();
    let mut pool_pick = Vec::with_capacity(4 * 16);
    for bc in 0..4 {
        for oy in 0..4 {
            for ox in 0..4 {
                let idxs: Vec<usize> = (0..4).map(|k| bc * 64 + (oy * 2 + k / 2) * 8 + ox * 2 + k % 2).collect();
                let best = *idxs
                    .iter()
                    .max_by(|&&a, &&b| r1[a].partial_cmp(&r1[b]).unwrap())
                    .unwrap();
                // an all-clipped window is locally constant zero: any pick
                // routes zero gradient, so ties there are FD-safe
                if r1[best] > 0.0 {
                    let second = idxs
                        .iter()
                        .filter(|&&i| i != best)
                        .map(|&i| r1[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    margin = margin.min(r1[best] - second);
                }
                pool_pick.push(best);
            }
        }
    }
    let mut pooled = vec![0.0; 4 * 16];
    for (i, &src) in pool_pick.iter().enumerate() {
        pooled[i] = r1[src];
    }
    let u1 = upsample2x_ref(&pooled, 1, 4, 4, 4);
    let fuse_first: Vec<bool> = u1
        .iter()
        .zip(&c2)
        .map(|(&a, &b)| {
            margin = margin.min((a - b).abs());
            a >= b
        })
        .collect();
    FrozenSelections { relu_active, pool_pick, fuse_first, margin }
}

pub fn composite_frozen_ref(xs: &[Vec<f64>], sel: &FrozenSelections) -> Vec<f64> {
    let (b1, c2) = composite_stages(xs);
    let r1: Vec<f64> = b1
        .iter()
        .zip(&sel.relu_active)
        .map(|(&v, &on)| if on { v } else { 0.0 })
        .collect();
    let mut pooled = vec![0.0; 4 * 16];
    for (i, &src) in sel.pool_pick.iter().enumerate() {
        pooled[i] = r1[src];
    }
    let u1 = upsample2x_ref(&pooled, 1, 4, 4, 4);
    let mx: Vec<f64> = u1
        .iter()
        .zip(&c2)
        .zip(&sel.fuse_first)
        .map(|((&a, &b), &first)| if first { a } else { b })
        .collect();
    let g = global_avgpool_ref(&mx, 1, 4, 64);
    linear_ref(&g, &xs[5], None, 1, 4, 3)
}

pub fn composite_graph_through_many_ops() {
    let mut effective = 0u64;
    let mut seed = 0u64;
    while effective < SEEDS {
        assert!(seed < 100, "could not find {SEEDS} margin-safe seeds");
        let mut rng = rng_for(seed + 1000);
        let x = uniform(&mut rng, 2 * 64, -1.0, 1.0);
        let w1 = uniform(&mut rng, 4 * 2 * 9, -0.5, 0.5);
        let gamma = uniform(&mut rng, 4, 0.5, 1.5);
        let beta = uniform(&mut rng, 4, -0.3, 0.3);
        let w2 = uniform(&mut rng, 4 * 2 * 9, -0.5, 0.5);
        let wl = uniform(&mut rng, 3 * 4, -0.5, 0.5);

        let leaves = vec![
            (vec![1, 2, 8, 8], x),
            (vec![4, 2, 3, 3], w1),
            (vec![4], gamma),
            (vec![4], beta),
            (vec![4, 2, 3, 3], w2),
            (vec![3, 4], wl),
        ];
        let base: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| to_f64(d)).collect();
        let sel = freeze_selections(&base);
        if sel.margin < 1e-4 {
            seed += 1;
            continue;
        }
        check_op(
            "composite conv-bn-relu-pool-up-max-gap-linear",
            seed,
            &leaves,
            &|t, ids| {
                let c1 = t.conv2d(ids[0], ids[1], None, 1, 1).unwrap();
                let mut running = Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
                let b1 = t.batchnorm(c1, ids[2], ids[3], &mut running, true, 0.1, 1e-5).unwrap();
                let r1 = t.relu(b1);
                let p1 = t.maxpool2x2(r1).unwrap();
                let u1 = t.upsample_nearest2x(p1).unwrap();
                let c2 = t.conv2d(ids[0], ids[4], None, 1, 1).unwrap();
                let mx = t.elemwise_max_n(&[u1, c2]).unwrap();
                let g = t.global_avgpool(mx).unwrap();
                t.linear(g, ids[5], None).unwrap()
            },
            &|xs| composite_frozen_ref(xs, &sel),
        );
        effective += 1;
        seed += 1;
    }
}

// ── the three losses ─────────────────────────────────────────────────

pub fn loss_fd(
    what: &str,
    seed: u64,
    leaves: &[(Vec<usize>, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    reference: &dyn Fn(&[Vec<f64>]) -> f64,
) {
    let mut tape = Tape::new();
    let mut ids = Vec::new();
    for (shape, data) in leaves {
        let mut t = Tensor::new(shape.clone(), data.clone()).unwrap().with_grad();
        ids.push(tape.leaf(&mut t));
    }
    let loss = build(&mut tape, &ids);
    let inputs_f64: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| to_f64(d)).collect();
    let expect = reference(&inputs_f64);
    let got = tape.scalar_value(loss) as f64;
    assert!(
        (got - expect).abs() <= 1e-5 + 1e-5 * expect.abs(),
        "{what} seed {seed}: forward {got} vs {expect}"
    );
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, (_, d))| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();
    fd_check(reference, &inputs_f64, &analytic, what);
}

pub fn dice_loss_gradients_through_softmax() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 2000);
        let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
        let s = h * w;
        let logits = uniform(&mut rng, n * c * s, -1.5, 1.5);
        let labels: Vec<u8> = (0..n * s).map(|_| rng.gen_range(0..4)).collect();
        let target = one_hot(&labels, n, c, h, w).unwrap();
        let tgt = to_f64(target.data());
        loss_fd(
            "dice_loss",
            seed,
            &[(vec![n, c, h, w], logits)],
            &|t, ids| {
                let p = t.softmax_channels(ids[0]).unwrap();
                dice_loss(t, p, &target).unwrap()
            },
            &move |xs| {
                let p = softmax_channels_ref(&xs[0], n, c, s);
                dice_oracle(&p, &tgt, n, c, s)
            },
        );
    }
}

pub fn focal_loss_gradients_through_softmax() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 3000);
        let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
        let s = h * w;
        let logits = uniform(&mut rng, n * c * s, -1.5, 1.5);
        let labels: Vec<u8> = (0..n * s).map(|_| rng.gen_range(0..4)).collect();
        let target = one_hot(&labels, n, c, h, w).unwrap();
        let tgt = to_f64(target.data());
        let fp = FocalParams::default();
        loss_fd(
            "focal_loss",
            seed,
            &[(vec![n, c, h, w], logits)],
            &|t, ids| {
                let p = t.softmax_channels(ids[0]).unwrap();
                focal_loss(t, p, &target, &fp).unwrap()
            },
            &move |xs| {
                let p = softmax_channels_ref(&xs[0], n, c, s);
                focal_oracle(&p, &tgt, 0.25, 2.0, 1e-7)
            },
        );
    }
}

pub fn contrastive_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed + 4000);
        let (n, d) = (3usize, 5usize);
        let px = uniform(&mut rng, n * d, -1.0, 1.0);
        let py = uniform(&mut rng, n * d, -1.0, 1.0);
        loss_fd(
            "batch_contrastive",
            seed,
            &[(vec![n, d], px), (vec![n, d], py)],
            &|t, ids| batch_contrastive(t, ids[0], ids[1], 1.0).unwrap(),
            &move |xs| {
                let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(d).map(|c| c.to_vec()).collect() };
                batch_contrastive_oracle(&rows(&xs[0]), &rows(&xs[1]), 1.0)
            },
        );
    }
}
