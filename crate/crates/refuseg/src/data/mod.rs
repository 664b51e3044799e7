//! Synthetic phantoms, slice extraction, normalization, augmentation, and
//! batch assembly.

mod augment;
mod phantom;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use phantom::{generate_phantom, load_case, write_case, PhantomCase, CASE_FILES};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::niftilite::Volume;

/// The four MRI acquisition types, in fixed index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalityId {
    T1,
    T1c,
    T2,
    Flair,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [ModalityId::T1, ModalityId::T1c, ModalityId::T2, ModalityId::Flair];

    pub fn index(self) -> usize {
        match self {
            ModalityId::T1 => 0,
            ModalityId::T1c => 1,
            ModalityId::T2 => 2,
            ModalityId::Flair => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::T1 => "t1",
            ModalityId::T1c => "t1c",
            ModalityId::T2 => "t2",
            ModalityId::Flair => "flair",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(ModalityId::T1),
            "t1c" => Ok(ModalityId::T1c),
            "t2" => Ok(ModalityId::T2),
            "flair" => Ok(ModalityId::Flair),
            other => Err(Error::Usage(format!("unknown modality '{other}' (expected t1, t1c, t2, flair)"))),
        }
    }
}

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Integer class map: 0 background, 1 NCR, 2 ED, 3 ET.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != h * w {
            return Err(Error::Dim(format!("label map {h}x{w} vs {} values", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c > 3) {
            return Err(Error::Data(format!("label value {bad} outside 0..=3")));
        }
        Ok(LabelMap { h, w, classes })
    }
}

/// One training case slice: four single-channel planes plus a presence mask
/// and the label plane.
#[derive(Debug, Clone)]
pub struct ModalityStack {
    pub slices: [Tensor; 4],
    pub presence: [bool; 4],
    pub label: LabelMap,
}

impl ModalityStack {
    pub fn extent(&self) -> (usize, usize) {
        (self.label.h, self.label.w)
    }
}

/// Split aligned volumes into per-z stacks, ordered by z.
pub fn extract_slices(volumes: &[Volume; 4], labels: &Volume) -> Result<Vec<ModalityStack>> {
    let ex = labels.extents;
    for (m, v) in ModalityId::ALL.iter().zip(volumes) {
        if v.extents != ex {
            return Err(Error::Alignment(format!(
                "{m} volume extents {:?} do not match label extents {ex:?}",
                v.extents
            )));
        }
    }
    let [x, y, z] = ex;
    let mut stacks = Vec::with_capacity(z);
    for k in 0..z {
        let plane = |vol: &Volume| -> Vec<f32> { vol.voxels[k * x * y..(k + 1) * x * y].to_vec() };
        let slices: [Tensor; 4] = [
            Tensor::new(vec![1, y, x], plane(&volumes[0]))?,
            Tensor::new(vec![1, y, x], plane(&volumes[1]))?,
            Tensor::new(vec![1, y, x], plane(&volumes[2]))?,
            Tensor::new(vec![1, y, x], plane(&volumes[3]))?,
        ];
        let classes: Vec<u8> = labels.voxels[k * x * y..(k + 1) * x * y]
            .iter()
            .map(|&v| {
                let c = v.round();
                if !(0.0..=3.0).contains(&c) {
                    Err(Error::Data(format!("label voxel {v} outside class range")))
                } else {
                    Ok(c as u8)
                }
            })
            .collect::<Result<_>>()?;
        stacks.push(ModalityStack {
            slices,
            presence: [true; 4],
            label: LabelMap::new(y, x, classes)?,
        });
    }
    Ok(stacks)
}

/// Per-slice z-score over nonzero pixels. Exact zeros stay zero; a constant
/// nonzero slice maps to zeros (zero variance divides by one).
pub fn normalize(slice: &Tensor) -> Tensor {
    let data = slice.data();
    let nonzero: Vec<f64> = data.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if nonzero.is_empty() {
        return Tensor::zeros(slice.shape().to_vec());
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
    let out: Vec<f32> = data
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / std) as f32 })
        .collect();
    Tensor::new(slice.shape().to_vec(), out).expect("shape preserved")
}

/// A collated batch: one [N,1,H,W] tensor per modality plus flat labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: [Tensor; 4],
    pub labels: Vec<u8>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub presence: [bool; 4],
}

/// Deterministic epoch shuffle.
pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Stack slices into batch tensors. All stacks must share extents.
pub fn collate(stacks: &[&ModalityStack]) -> Result<Batch> {
    let n = stacks.len();
    if n == 0 {
        return Err(Error::Dim("collate of zero stacks".into()));
    }
    let (h, w) = stacks[0].extent();
    let mut presence = [true; 4];
    for s in stacks {
        if s.extent() != (h, w) {
            return Err(Error::Alignment(format!("stack extents {:?} vs {:?}", s.extent(), (h, w))));
        }
        for (p, &sp) in presence.iter_mut().zip(&s.presence) {
            *p &= sp;
        }
    }
    let mut inputs: Vec<Tensor> = Vec::with_capacity(4);
    for m in 0..4 {
        let mut data = Vec::with_capacity(n * h * w);
        for s in stacks {
            data.extend_from_slice(s.slices[m].data());
        }
        inputs.push(Tensor::new(vec![n, 1, h, w], data)?);
    }
    let mut labels = Vec::with_capacity(n * h * w);
    for s in stacks {
        labels.extend_from_slice(&s.label.classes);
    }
    Ok(Batch {
        inputs: inputs.try_into().expect("four modalities"),
        labels,
        n,
        h,
        w,
        presence,
    })
}

/// Shuffle and chunk stacks into batches. The final partial batch is
/// dropped when the contrastive loss is enabled (it needs at least two
/// instances for batch statistics and negatives) and kept otherwise.
pub fn make_batches(
    stacks: &[ModalityStack],
    batch_size: usize,
    shuffle_seed: u64,
    contrastive: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if contrastive && batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} too small for contrastive loss (needs >= 2)"
        )));
    }
    let order = shuffled_indices(stacks.len(), shuffle_seed);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size && contrastive {
            break;
        }
        let refs: Vec<&ModalityStack> = chunk.iter().map(|&i| &stacks[i]).collect();
        batches.push(collate(&refs)?);
    }
    Ok(batches)
}
