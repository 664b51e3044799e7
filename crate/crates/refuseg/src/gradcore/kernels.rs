//! Forward and backward array kernels.
//!
//! Storage is float32; reductions (dot products, pooling, statistics)
//! accumulate in float64. All layouts are row-major; images are NCHW.

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += aip * bv as f64;
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for (o, &v) in orow.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
}

/// C[m,n] = A[m,k] @ B[n,k]^T (row dots)
pub fn matmul_nt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
}

/// C[m,n] = A[p,m]^T @ B[p,n]
pub fn matmul_tn(a: &[f32], p: usize, m: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..p {
            let aqi = a[q * m + i] as f64;
            if aqi == 0.0 {
                continue;
            }
            let brow = &b[q * n..(q + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += aqi * bv as f64;
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for (o, &v) in orow.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfold one image [Cin,H,W] into columns [Cin*kh*kw, oh*ow]. Out-of-bounds
/// positions read as zero.
pub fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    debug_assert_eq!(col.len(), ckk * ohw);
    for c in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst[oy * d.ow..(oy + 1) * d.ow].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        dst[oy * d.ow + ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image gradient (transpose of im2col).
pub fn col2im(col: &[f32], d: &ConvDims, gx: &mut [f32]) {
    let ohw = d.oh * d.ow;
    for c in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        gx[dst_row + ix as usize] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of NCHW input with OIHW weights.
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims, out: &mut [f32]) {
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut col = vec![0.0f32; ckk * ohw];
    for b in 0..d.n {
        let xi = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xi, d, &mut col);
        let oi = &mut out[b * d.cout * ohw..(b + 1) * d.cout * ohw];
        matmul(w, d.cout, ckk, &col, ohw, oi);
        if let Some(bias) = bias {
            for co in 0..d.cout {
                let bv = bias[co];
                oi[co * ohw..(co + 1) * ohw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Gradients for conv2d. Any of the output slots may be absent.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    d: &ConvDims,
    mut gx: Option<&mut [f32]>,
    mut gw: Option<&mut [f32]>,
    mut gb: Option<&mut [f32]>,
) {
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut col = vec![0.0f32; ckk * ohw];
    let mut col_grad = vec![0.0f32; ckk * ohw];
    let mut gw_item = vec![0.0f32; d.cout * ckk];
    for b in 0..d.n {
        let gi = &g[b * d.cout * ohw..(b + 1) * d.cout * ohw];
        if gw.is_some() || gx.is_some() {
            let xi = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
            im2col(xi, d, &mut col);
        }
        if let Some(gw) = gw.as_deref_mut() {
            matmul_nt(gi, d.cout, ohw, &col, ckk, &mut gw_item);
            for (dst, &s) in gw.iter_mut().zip(gw_item.iter()) {
                *dst += s;
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            matmul_tn(w, d.cout, ckk, gi, ohw, &mut col_grad);
            col2im(&col_grad, d, &mut gx[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w]);
        }
        if let Some(gb) = gb.as_deref_mut() {
            for co in 0..d.cout {
                let mut acc = 0.0f64;
                for &v in &gi[co * ohw..(co + 1) * ohw] {
                    acc += v as f64;
                }
                gb[co] += acc as f32;
            }
        }
    }
}

/// Batch statistics over [N,C,S] treating (N,S) as the reduction set.
/// Returns per-channel (mean, biased variance).
pub fn channel_stats(x: &[f32], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let mut acc = 0.0f64;
            for &v in &x[base..base + s] {
                acc += v as f64;
            }
            mean[ch] += acc;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let mu = mean[ch];
            let mut acc = 0.0f64;
            for &v in &x[base..base + s] {
                let dv = v as f64 - mu;
                acc += dv * dv;
            }
            var[ch] += acc;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Normalize [N,C,S] with per-channel mean/var, then scale and shift.
/// Writes the normalized values to `xhat` and 1/sqrt(var+eps) to `inv_std`.
pub fn bn_apply(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f64],
    var: &[f64],
    n: usize,
    c: usize,
    s: usize,
    eps: f32,
    out: &mut [f32],
    xhat: &mut [f32],
    inv_std: &mut [f32],
) {
    for ch in 0..c {
        inv_std[ch] = (1.0 / (var[ch] + eps as f64).sqrt()) as f32;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let mu = mean[ch] as f32;
            let is = inv_std[ch];
            let (ga, be) = (gamma[ch], beta[ch]);
            for i in base..base + s {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
}

/// Gradients through batch normalization.
///
/// In training mode the batch statistics are functions of the input; in eval
/// mode the running statistics are constants and only the affine part flows.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    g: &[f32],
    gamma: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    n: usize,
    c: usize,
    s: usize,
    training: bool,
    mut gx: Option<&mut [f32]>,
    mut ggamma: Option<&mut [f32]>,
    mut gbeta: Option<&mut [f32]>,
) {
    let m = (n * s) as f64;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let mut a0 = 0.0f64;
            let mut a1 = 0.0f64;
            for i in base..base + s {
                a0 += g[i] as f64;
                a1 += g[i] as f64 * xhat[i] as f64;
            }
            sum_g[ch] += a0;
            sum_gx[ch] += a1;
        }
    }
    if let Some(ggamma) = ggamma.as_deref_mut() {
        for ch in 0..c {
            ggamma[ch] += sum_gx[ch] as f32;
        }
    }
    if let Some(gbeta) = gbeta.as_deref_mut() {
        for ch in 0..c {
            gbeta[ch] += sum_g[ch] as f32;
        }
    }
    if let Some(gx) = gx.as_deref_mut() {
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                let k = gamma[ch] as f64 * inv_std[ch] as f64;
                if training {
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for i in base..base + s {
                        gx[i] += (k * (g[i] as f64 - mg - xhat[i] as f64 * mgx)) as f32;
                    }
                } else {
                    for i in base..base + s {
                        gx[i] += (k * g[i] as f64) as f32;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over NCHW; records the flat input index of each
/// selected element (ties to the earliest scan position).
pub fn maxpool2x2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for b in 0..n {
        for ch in 0..c {
            let ibase = (b * c + ch) * h * w;
            let obase = (b * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ibase + (oy * 2 + dy) * w + ox * 2 + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
}

/// Per-pixel softmax across the channel axis of NCHW, max-subtracted.
pub fn softmax_channels_forward(x: &[f32], n: usize, c: usize, s: usize, out: &mut [f32]) {
    for b in 0..n {
        for i in 0..s {
            let mut mx = f32::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(x[(b * c + ch) * s + i]);
            }
            let mut denom = 0.0f64;
            for ch in 0..c {
                let e = ((x[(b * c + ch) * s + i] - mx) as f64).exp();
                out[(b * c + ch) * s + i] = e as f32;
                denom += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * s + i] = (out[(b * c + ch) * s + i] as f64 / denom) as f32;
            }
        }
    }
}

pub fn softmax_channels_backward(y: &[f32], g: &[f32], n: usize, c: usize, s: usize, gx: &mut [f32]) {
    for b in 0..n {
        for i in 0..s {
            let mut dot = 0.0f64;
            for ch in 0..c {
                let idx = (b * c + ch) * s + i;
                dot += g[idx] as f64 * y[idx] as f64;
            }
            for ch in 0..c {
                let idx = (b * c + ch) * s + i;
                gx[idx] += (y[idx] as f64 * (g[idx] as f64 - dot)) as f32;
            }
        }
    }
}

/// Row-wise L2 normalization of [rows, d]; returns the norms.
pub fn l2_normalize_rows_forward(x: &[f32], rows: usize, d: usize, out: &mut [f32]) -> Vec<f32> {
    let mut norms = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut acc = 0.0f64;
        for &v in row {
            acc += v as f64 * v as f64;
        }
        let norm = acc.sqrt();
        norms[r] = norm as f32;
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v as f64 * inv) as f32;
        }
    }
    norms
}

pub fn l2_normalize_rows_backward(y: &[f32], norms: &[f32], g: &[f32], rows: usize, d: usize, gx: &mut [f32]) {
    for r in 0..rows {
        let yr = &y[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let mut dot = 0.0f64;
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot += yv as f64 * gv as f64;
        }
        let inv = 1.0 / norms[r] as f64;
        for i in 0..d {
            gx[r * d + i] += ((gr[i] as f64 - yr[i] as f64 * dot) * inv) as f32;
        }
    }
}

pub fn sum_all_f64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}
