//! Test-side oracles: float64 reference implementations of every
//! operation, scalar-loop loss formulas, a brute-force Hausdorff
//! implementation, and a central finite-difference gradient checker. None
//! of this code calls into the library's numeric paths.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── float64 reference kernels ──────────────────────────────────────

pub struct ConvRefDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvRefDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

/// Direct six-nested-loop cross-correlation.
pub fn conv2d_ref(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvRefDims) -> Vec<f64> {
    let (oh, ow) = d.out_hw();
    let mut out = vec![0.0; d.n * d.cout * oh * ow];
    for b in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0);
                    for ci in 0..d.cin {
                        for ky in 0..d.kh {
                            for kx in 0..d.kw {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[((b * d.cin + ci) * d.h + iy as usize) * d.w + ix as usize];
                                let wv = w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * d.cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn linear_ref(x: &[f64], w: &[f64], bias: Option<&[f64]>, b: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * dout];
    for r in 0..b {
        for o in 0..dout {
            let mut acc = bias.map(|bv| bv[o]).unwrap_or(0.0);
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Training-mode batch normalization: statistics over (N, S) per channel.
pub fn bn_train_ref(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, s: usize, eps: f64) -> Vec<f64> {
    let m = (n * s) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            for i in 0..s {
                mean += x[(b * c + ch) * s + i];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            for i in 0..s {
                var += (x[(b * c + ch) * s + i] - mean).powi(2);
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                out[idx] = gamma[ch] * (x[idx] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn bn_eval_ref(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rmean: &[f64],
    rvar: &[f64],
    n: usize,
    c: usize,
    s: usize,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let inv = 1.0 / (rvar[ch] + eps).sqrt();
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                out[idx] = gamma[ch] * (x[idx] - rmean[ch]) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn softmax_channels_ref(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..s {
            let mx = (0..c).map(|ch| x[(b * c + ch) * s + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (x[(b * c + ch) * s + i] - mx).exp();
                out[(b * c + ch) * s + i] = e;
                denom += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * s + i] /= denom;
            }
        }
    }
    out
}

pub fn maxpool2x2_ref(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for bc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(x[bc * h * w + (oy * 2 + dy) * w + ox * 2 + dx]);
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    out
}

pub fn upsample2x_ref(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for bc in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[bc * oh * ow + y * ow + xx] = x[bc * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn global_avgpool_ref(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    (0..n * c)
        .map(|bc| x[bc * s..(bc + 1) * s].iter().sum::<f64>() / s as f64)
        .collect()
}

pub fn l2_normalize_rows_ref(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let norm = x[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..d {
            out[r * d + i] = x[r * d + i] / norm;
        }
    }
    out
}

pub fn elemwise_max_ref(inputs: &[&[f64]]) -> Vec<f64> {
    let mut out = inputs[0].to_vec();
    for inp in &inputs[1..] {
        for (o, &v) in out.iter_mut().zip(*inp) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

// ── scalar-loop loss oracles ─────────────────────────────────────────

/// Squared-denominator dice loss: per foreground channel c >= 1,
/// 1 - (2 Σ y ŷ + s) / (Σ y² + Σ ŷ² + s), averaged over those channels.
pub fn dice_oracle(pred: &[f64], target: &[f64], n: usize, c: usize, s: usize) -> f64 {
    let smooth = 1e-6;
    let mut acc = 0.0;
    for ch in 1..c {
        let mut inter = 0.0;
        let mut p2 = 0.0;
        let mut t2 = 0.0;
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                inter += pred[idx] * target[idx];
                p2 += pred[idx] * pred[idx];
                t2 += target[idx] * target[idx];
            }
        }
        acc += 1.0 - (2.0 * inter + smooth) / (p2 + t2 + smooth);
    }
    acc / (c - 1) as f64
}

/// Focal loss over all channel-pixel pairs as independent binary problems.
pub fn focal_oracle(pred: &[f64], target: &[f64], alpha: f64, gamma: f64, eps: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        let p = pred[i].clamp(eps, 1.0 - eps);
        let y = target[i];
        acc += alpha * (1.0 - p).powf(gamma) * y * p.ln()
            + (1.0 - alpha) * p.powf(gamma) * (1.0 - y) * (1.0 - p).ln();
    }
    -acc / pred.len() as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// l(v_i, v_j) by brute-force summation over the denominator views.
pub fn pair_term_oracle(views: &[Vec<f64>], i: usize, j: usize, temperature: f64) -> f64 {
    let mut denom = 0.0;
    for (k, v) in views.iter().enumerate() {
        if k != i {
            denom += (cosine(&views[i], v) / temperature).exp();
        }
    }
    -((cosine(&views[i], &views[j]) / temperature).exp() / denom).ln()
}

/// L_C of one pair: views = rows of x then rows of y; positives are the
/// same-instance cross-modality rows; average of the 2N ordered terms.
pub fn batch_contrastive_oracle(x: &[Vec<f64>], y: &[Vec<f64>], temperature: f64) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let views: Vec<Vec<f64>> = x.iter().chain(y.iter()).cloned().collect();
    let mut acc = 0.0;
    for i in 0..n {
        acc += pair_term_oracle(&views, i, i + n, temperature);
        acc += pair_term_oracle(&views, i + n, i, temperature);
    }
    acc / (2 * n) as f64
}

// ── brute-force Hausdorff-95 ─────────────────────────────────────────

pub fn percentile_ref(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.len() == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= values.len() {
        values[values.len() - 1]
    } else {
        values[lo] + (values[lo + 1] - values[lo]) * frac
    }
}

/// All-pairs directed surface-to-mask distances, then the percentile of
/// each direction, then the max. Mirrors the declared conventions for
/// empty masks.
pub fn hd95_brute(
    pred_bits: &[bool],
    gt_bits: &[bool],
    ex: [usize; 3],
    percentile: f64,
    empty_both: f64,
    one_empty: f64,
) -> f64 {
    let count = |bits: &[bool]| bits.iter().filter(|&&b| b).count();
    if count(pred_bits) == 0 && count(gt_bits) == 0 {
        return empty_both;
    }
    if count(pred_bits) == 0 || count(gt_bits) == 0 {
        return one_empty;
    }
    let points = |bits: &[bool]| -> Vec<[f64; 3]> {
        (0..bits.len())
            .filter(|&i| bits[i])
            .map(|i| {
                [
                    (i % ex[0]) as f64,
                    ((i / ex[0]) % ex[1]) as f64,
                    (i / (ex[0] * ex[1])) as f64,
                ]
            })
            .collect()
    };
    let surface = |bits: &[bool]| -> Vec<[f64; 3]> {
        let idx = |x: usize, y: usize, z: usize| x + ex[0] * (y + ex[1] * z);
        let mut out = Vec::new();
        for z in 0..ex[2] {
            for y in 0..ex[1] {
                for x in 0..ex[0] {
                    if !bits[idx(x, y, z)] {
                        continue;
                    }
                    let pos = [x, y, z];
                    let mut exposed = false;
                    for a in 0..3 {
                        if ex[a] == 1 {
                            continue;
                        }
                        if pos[a] == 0 || pos[a] == ex[a] - 1 {
                            exposed = true;
                            break;
                        }
                        let mut lo = pos;
                        lo[a] -= 1;
                        let mut hi = pos;
                        hi[a] += 1;
                        if !bits[idx(lo[0], lo[1], lo[2])] || !bits[idx(hi[0], hi[1], hi[2])] {
                            exposed = true;
                            break;
                        }
                    }
                    if exposed {
                        out.push([x as f64, y as f64, z as f64]);
                    }
                }
            }
        }
        out
    };
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let fwd = directed(&surface(pred_bits), &points(gt_bits));
    let back = directed(&surface(gt_bits), &points(pred_bits));
    percentile_ref(fwd, percentile).max(percentile_ref(back, percentile))
}

// ── finite-difference gradient checker ───────────────────────────────

pub const FD_H: f64 = 1e-3;
pub const FD_RTOL: f64 = 1e-2;
pub const FD_ATOL: f64 = 1e-4;

/// Compare analytic gradients (from the float32 tape) against central
/// finite differences of a float64 reference function.
pub fn fd_check(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    analytic: &[Vec<f32>],
    what: &str,
) {
    assert_eq!(inputs.len(), analytic.len(), "{what}: input arity");
    for (t, input) in inputs.iter().enumerate() {
        assert_eq!(input.len(), analytic[t].len(), "{what}: tensor {t} size");
        let mut work: Vec<Vec<f64>> = inputs.to_vec();
        for e in 0..input.len() {
            work[t][e] = input[e] + FD_H;
            let fp = f(&work);
            work[t][e] = input[e] - FD_H;
            let fm = f(&work);
            work[t][e] = input[e];
            let numeric = (fp - fm) / (2.0 * FD_H);
            let got = analytic[t][e] as f64;
            let tol = FD_ATOL + FD_RTOL * numeric.abs();
            assert!(
                (got - numeric).abs() <= tol,
                "{what}: tensor {t} element {e}: analytic {got} vs numeric {numeric} (tol {tol})"
            );
        }
    }
}

/// FD check for composite graphs containing kinked ops (relu, max). An
/// element whose ±h interval straddles a kink makes the central-difference
/// oracle itself invalid there; such elements are detected by step-halving
/// disagreement of the NUMERIC estimate alone and skipped. The skipped
/// fraction must stay small.
pub fn fd_check_piecewise(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    analytic: &[Vec<f32>],
    what: &str,
) {
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (t, input) in inputs.iter().enumerate() {
        let mut work: Vec<Vec<f64>> = inputs.to_vec();
        for e in 0..input.len() {
            let numeric_at = |work: &mut Vec<Vec<f64>>, h: f64| -> f64 {
                work[t][e] = input[e] + h;
                let fp = f(work);
                work[t][e] = input[e] - h;
                let fm = f(work);
                work[t][e] = input[e];
                (fp - fm) / (2.0 * h)
            };
            let n1 = numeric_at(&mut work, FD_H);
            let n2 = numeric_at(&mut work, FD_H / 2.0);
            if (n1 - n2).abs() > 1e-5 + 2e-3 * n1.abs().max(n2.abs()) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let got = analytic[t][e] as f64;
            let tol = FD_ATOL + FD_RTOL * n1.abs();
            assert!(
                (got - n1).abs() <= tol,
                "{what}: tensor {t} element {e}: analytic {got} vs numeric {n1} (tol {tol})"
            );
        }
    }
    assert!(checked > 0, "{what}: everything was skipped");
    assert!(
        (skipped as f64) < 0.1 * (checked + skipped) as f64,
        "{what}: {skipped} of {} elements straddle kinks",
        checked + skipped
    );
}

// ── input generators ─────────────────────────────────────────────────

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in [-1,-0.05] ∪ [0.05,1]: safe for relu kinks under FD_H.
pub fn uniform_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Ensure every position's top-two values across the tensors differ by
/// more than `gap` (keeps max selections stable under FD perturbation).
pub fn separate_maxima(tensors: &mut [Vec<f32>], gap: f32) {
    let n = tensors[0].len();
    for i in 0..n {
        loop {
            let mut vals: Vec<(usize, f32)> = tensors.iter().map(|t| t[i]).enumerate().collect();
            vals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            if vals.len() < 2 || vals[0].1 - vals[1].1 > gap {
                break;
            }
            tensors[vals[0].0][i] += 2.0 * gap;
        }
    }
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub mod opchecks;
pub mod checks;
