//! Training losses: squared-denominator Dice over foreground channels,
//! alpha/gamma focal loss over channel-pixel pairs, the pairwise
//! contrastive loss over fixed modality pairs, and their weighted
//! combination. All losses are built from taped primitives, so gradients
//! flow through the same engine as the network.

use std::collections::BTreeMap;

use crate::data::ModalityId;
use crate::error::{Error, Result};
use crate::gradcore::{NodeId, Tape, Tensor};

pub const DICE_SMOOTH: f32 = 1e-6;

/// The two modality pairs whose projections are pulled together.
pub const CONTRASTIVE_PAIRS: [(ModalityId, ModalityId); 2] =
    [(ModalityId::T1, ModalityId::T1c), (ModalityId::T2, ModalityId::Flair)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_dice: f32,
    pub w_focal: f32,
    /// Switch/scale for the contrastive term: 0 disables it.
    pub beta: f32,
    /// Optional similarity temperature; 1.0 leaves cosine values untouched.
    pub temperature: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_dice: 0.5, w_focal: 0.5, beta: 1.0, temperature: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_dice < 0.0 || self.w_focal < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f32,
    pub gamma: f32,
    pub clamp_eps: f32,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0, clamp_eps: 1e-7 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) || self.alpha == 0.0 {
            return Err(Error::Config(format!("focal alpha {} outside (0,1)", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma {} negative", self.gamma)));
        }
        Ok(())
    }
}

/// One-hot encode flat labels into [N,C,H,W].
pub fn one_hot(labels: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != n * h * w {
        return Err(Error::Dim(format!("{} labels vs {n}x{h}x{w}", labels.len())));
    }
    let s = h * w;
    let mut data = vec![0.0f32; n * c * s];
    for b in 0..n {
        for i in 0..s {
            let cls = labels[b * s + i] as usize;
            if cls >= c {
                return Err(Error::Data(format!("label {cls} outside {c} classes")));
            }
            data[(b * c + cls) * s + i] = 1.0;
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

fn check_probmap(tape: &Tape, pred: NodeId, target: &Tensor) -> Result<(usize, usize)> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("prediction must be [N,C,H,W], got {shape:?}")));
    }
    if target.shape() != shape {
        return Err(Error::Dim(format!(
            "prediction shape {shape:?} vs target {:?}",
            target.shape()
        )));
    }
    let (n, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
    if c < 2 {
        return Err(Error::Dim(format!("need at least 2 channels, got {c}")));
    }
    let v = tape.value(pred);
    for b in 0..n {
        for i in 0..s {
            let sum: f32 = (0..c).map(|ch| v[(b * c + ch) * s + i]).sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "prediction is not softmax-normalized: channel sum {sum} at batch {b}, pixel {i}"
                )));
            }
        }
    }
    Ok((n, c))
}

/// Dice loss with squared sums in the denominator, computed per foreground
/// channel over all pixels and batch entries, then averaged over the
/// foreground channels. Smoothing 1e-6 on numerator and denominator.
pub fn dice_loss(tape: &mut Tape, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let (_, c) = check_probmap(tape, pred, target)?;
    let t = tape.constant(target);
    let pt = tape.mul(pred, t)?;
    let inter = tape.sum_per_channel(pt)?;
    let pp = tape.mul(pred, pred)?;
    let p2 = tape.sum_per_channel(pp)?;
    let tt = tape.mul(t, t)?;
    let t2 = tape.sum_per_channel(tt)?;
    let num_raw = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num_raw, DICE_SMOOTH);
    let den_raw = tape.add(p2, t2)?;
    let den = tape.add_scalar(den_raw, DICE_SMOOTH);
    let coeff = tape.div(num, den)?;
    // average the dice coefficient over foreground channels only
    let mut fg = vec![1.0f32 / (c as f32 - 1.0); c];
    fg[0] = 0.0;
    let fg_const = tape.constant_from(vec![c], fg)?;
    let weighted = tape.mul(coeff, fg_const)?;
    let mean_coeff = tape.sum_all(weighted);
    let neg = tape.mul_scalar(mean_coeff, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Focal loss treating every channel-pixel pair as a binary problem,
/// averaged over all of them. Predictions are clamped away from {0,1}
/// before the logarithms.
pub fn focal_loss(tape: &mut Tape, pred: NodeId, target: &Tensor, fp: &FocalParams) -> Result<NodeId> {
    fp.validate()?;
    check_probmap(tape, pred, target)?;
    let y = tape.constant(target);
    let p = tape.clamp(pred, fp.clamp_eps, 1.0 - fp.clamp_eps);
    let neg_p = tape.mul_scalar(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let neg_y = tape.mul_scalar(y, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);

    // alpha * (1-p)^gamma * y * ln(p)
    let w_pos = tape.pow_scalar(one_minus_p, fp.gamma);
    let ln_p = tape.ln(p);
    let pos_a = tape.mul(w_pos, y)?;
    let pos_b = tape.mul(pos_a, ln_p)?;
    let pos = tape.mul_scalar(pos_b, fp.alpha);

    // (1-alpha) * p^gamma * (1-y) * ln(1-p)
    let w_neg = tape.pow_scalar(p, fp.gamma);
    let ln_q = tape.ln(one_minus_p);
    let neg_a = tape.mul(w_neg, one_minus_y)?;
    let neg_b = tape.mul(neg_a, ln_q)?;
    let neg = tape.mul_scalar(neg_b, 1.0 - fp.alpha);

    let terms = tape.add(pos, neg)?;
    let mean = tape.mean_all(terms);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// Value of one contrastive term l(v_i, v_j) over a [2N, d] view matrix:
/// -ln( exp(sim(v_i,v_j)) / sum_{k != i} exp(sim(v_i,v_k)) ) with cosine
/// similarity, computed in f64. The differentiable path is
/// [`batch_contrastive`]; this is the scalar definition used for checking.
pub fn pair_contrastive_term(views: &Tensor, i: usize, j: usize, temperature: f32) -> Result<f64> {
    let shape = views.shape();
    if shape.len() != 2 {
        return Err(Error::Dim(format!("views must be [2N, d], got {shape:?}")));
    }
    let (rows, d) = (shape[0], shape[1]);
    if rows < 2 {
        return Err(Error::Contract(format!("need at least 2 views, got {rows}")));
    }
    if i == j || i >= rows || j >= rows {
        return Err(Error::Contract(format!("invalid anchor/positive pair ({i}, {j}) for {rows} views")));
    }
    let data = views.data();
    let norm = |r: usize| -> Result<f64> {
        let n = data[r * d..(r + 1) * d]
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if n < 1e-12 {
            return Err(Error::DegenerateProjection(format!("row {r} has zero norm")));
        }
        Ok(n)
    };
    let sim = |a: usize, b: usize| -> Result<f64> {
        let dot: f64 = data[a * d..(a + 1) * d]
            .iter()
            .zip(&data[b * d..(b + 1) * d])
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        Ok(dot / (norm(a)? * norm(b)?) / temperature as f64)
    };
    let mut denom = 0.0f64;
    for k in 0..rows {
        if k != i {
            denom += sim(i, k)?.exp();
        }
    }
    Ok(denom.ln() - sim(i, j)?)
}

/// Contrastive loss of one modality pair: stack the two [N, d] projections
/// into 2N views, compute l(v_ix, v_iy) + l(v_iy, v_ix) per instance, and
/// average by 1/(2N). Negatives are drawn from this pair's views only.
/// N = 1 has no negatives and yields exactly zero.
pub fn batch_contrastive(tape: &mut Tape, proj_x: NodeId, proj_y: NodeId, temperature: f32) -> Result<NodeId> {
    let sx = tape.shape(proj_x).to_vec();
    let sy = tape.shape(proj_y).to_vec();
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::Dim(format!("projections must be [N,d] with equal d: {sx:?} vs {sy:?}")));
    }
    if sx[0] != sy[0] {
        return Err(Error::Alignment(format!(
            "projection row counts differ: {} vs {}",
            sx[0], sy[0]
        )));
    }
    let n = sx[0];
    let rows = 2 * n;
    let views = tape.concat(&[proj_x, proj_y], 0)?;
    // Degenerate case: a zero-norm view has no direction, so the batch
    // carries no contrastive signal. Like the N = 1 case this yields zero
    // rather than aborting the step; it occurs when a batch of identical
    // inputs meets a zero-initialized normalization shift.
    let d = sx[1];
    let degenerate = tape
        .value(views)
        .chunks(d)
        .any(|row| row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() < 1e-12);
    if degenerate {
        eprintln!("batch_contrastive: zero-norm projection row, contributing 0");
        return tape.constant_from(vec![1], vec![0.0]);
    }
    let unit = tape.l2_normalize_rows(views)?;
    let sims = tape.linear(unit, unit, None)?; // [2N, 2N] cosine matrix
    let sims = if temperature != 1.0 {
        tape.mul_scalar(sims, 1.0 / temperature)
    } else {
        sims
    };
    let exp = tape.exp(sims);

    let mut off_diag = vec![1.0f32; rows * rows];
    let mut positives = vec![0.0f32; rows * rows];
    for i in 0..rows {
        off_diag[i * rows + i] = 0.0;
        let j = (i + n) % rows;
        positives[i * rows + j] = 1.0;
    }
    let off_diag = tape.constant_from(vec![rows, rows], off_diag)?;
    let positives = tape.constant_from(vec![rows, rows], positives)?;

    let denom_terms = tape.mul(exp, off_diag)?;
    let denom = tape.sum_rows(denom_terms)?;
    let numer_terms = tape.mul(exp, positives)?;
    let numer = tape.sum_rows(numer_terms)?;
    let ln_denom = tape.ln(denom);
    let ln_numer = tape.ln(numer);
    let per_view = tape.sub(ln_denom, ln_numer)?;
    let total = tape.sum_all(per_view);
    Ok(tape.mul_scalar(total, 1.0 / rows as f32))
}

/// Sum of the pair losses over the fixed pairs (T1, T1c) and (T2, FLAIR).
/// A pair with an absent member contributes zero.
pub fn total_contrastive(
    tape: &mut Tape,
    projections: &BTreeMap<ModalityId, NodeId>,
    presence: [bool; 4],
    temperature: f32,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (a, b) in CONTRASTIVE_PAIRS {
        if presence[a.index()] && presence[b.index()] {
            let pa = *projections
                .get(&a)
                .ok_or_else(|| Error::Contract(format!("projection for present modality {a} missing")))?;
            let pb = *projections
                .get(&b)
                .ok_or_else(|| Error::Contract(format!("projection for present modality {b} missing")))?;
            let pair = batch_contrastive(tape, pa, pb, temperature)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, pair)?,
                None => pair,
            });
        }
    }
    Ok(match acc {
        Some(id) => id,
        None => tape.constant_from(vec![1], vec![0.0])?,
    })
}

/// Node ids (and current values) of the combined loss and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: NodeId,
    pub dice: NodeId,
    pub focal: NodeId,
    pub contrastive: NodeId,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> (f32, f32, f32, f32) {
        (
            tape.scalar_value(self.total),
            tape.scalar_value(self.dice),
            tape.scalar_value(self.focal),
            tape.scalar_value(self.contrastive),
        )
    }
}

/// Weighted combination: w_dice * dice + w_focal * focal + beta * contrastive.
pub fn final_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    projections: &BTreeMap<ModalityId, NodeId>,
    presence: [bool; 4],
    lw: &LossWeights,
    fp: &FocalParams,
) -> Result<LossBreakdown> {
    lw.validate()?;
    let dice = dice_loss(tape, pred, target)?;
    let focal = focal_loss(tape, pred, target, fp)?;
    let contrastive = if lw.beta > 0.0 {
        total_contrastive(tape, projections, presence, lw.temperature)?
    } else {
        tape.constant_from(vec![1], vec![0.0])?
    };
    let wd = tape.mul_scalar(dice, lw.w_dice);
    let wf = tape.mul_scalar(focal, lw.w_focal);
    let seg = tape.add(wd, wf)?;
    let wc = tape.mul_scalar(contrastive, lw.beta);
    let total = tape.add(seg, wc)?;
    Ok(LossBreakdown { total, dice, focal, contrastive })
}
