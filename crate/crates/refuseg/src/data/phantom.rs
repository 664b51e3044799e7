//! Synthetic multi-modal phantom volumes with nested lesion regions.
//!
//! Each case carries a brain ellipsoid containing three nested lesion
//! regions: a necrotic core (class 1) wrapped by an enhancing rim (class 3)
//! wrapped by edema (class 2). Modality intensity profiles are chosen so
//! that no single modality separates all regions: the rim is only brighter
//! than the core in T1c, and edema stands out mostly in FLAIR.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModalityId;
use crate::error::{Error, Result};
use crate::niftilite::{read_volume, write_volume, Volume};

pub const CASE_FILES: [&str; 5] = ["t1.nii", "t1c.nii", "t2.nii", "flair.nii", "seg.nii"];

const NOISE_SIGMA: f64 = 0.05;

/// Mean intensity per (class, modality); class order 0..=3, modality order
/// T1, T1c, T2, FLAIR. Classes 1 and 3 coincide everywhere except T1c.
const INTENSITY: [[f64; 4]; 4] = [
    [0.50, 0.50, 0.45, 0.40], // healthy tissue
    [0.28, 0.30, 0.62, 0.55], // NCR
    [0.38, 0.40, 0.72, 0.85], // ED (FLAIR-bright)
    [0.28, 0.85, 0.62, 0.55], // ET (T1c-bright)
];

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub volumes: [Volume; 4],
    pub labels: Volume,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// Deterministic per-seed phantom: four modality volumes plus a label
/// volume, all with the given extents.
pub fn generate_phantom(case_seed: u64, extents: [usize; 3]) -> Result<PhantomCase> {
    if extents.iter().any(|&e| e < 16) {
        return Err(Error::Config(format!("phantom extents must be >= 16 each, got {extents:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let ex = [extents[0] as f64, extents[1] as f64, extents[2] as f64];

    let center: [f64; 3] = std::array::from_fn(|a| ex[a] * (0.5 + rng.gen_range(-0.04..0.04)));
    let brain = Ellipsoid {
        center,
        semi: std::array::from_fn(|a| ex[a] * (0.42 + rng.gen_range(0.0..0.03))),
    };
    let wt = Ellipsoid {
        center: std::array::from_fn(|a| center[a] + ex[a] * rng.gen_range(-0.03..0.03)),
        semi: std::array::from_fn(|a| ex[a] * (0.24 + rng.gen_range(0.0..0.05))),
    };
    let tc_frac = rng.gen_range(0.60..0.70);
    let tc = Ellipsoid {
        center: wt.center,
        semi: std::array::from_fn(|a| wt.semi[a] * tc_frac),
    };
    let ncr_frac = rng.gen_range(0.50..0.62);
    let ncr = Ellipsoid {
        center: wt.center,
        semi: std::array::from_fn(|a| tc.semi[a] * ncr_frac),
    };

    // smooth multiplicative bias field
    let freq: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.5..1.5) * std::f64::consts::TAU / ex[a]);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let bias = |p: [f64; 3]| 1.0 + 0.06 * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();

    let [nx, ny, nz] = extents;
    let count = nx * ny * nz;
    let mut classes = vec![0u8; count];
    let mut in_brain = vec![false; count];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                if brain.contains(p) {
                    in_brain[i] = true;
                    classes[i] = if ncr.contains(p) {
                        1
                    } else if tc.contains(p) {
                        3
                    } else if wt.contains(p) {
                        2
                    } else {
                        0
                    };
                }
                i += 1;
            }
        }
    }

    let noise = Normal::new(0.0f64, NOISE_SIGMA).expect("valid sigma");
    let mut volumes = Vec::with_capacity(4);
    for m in 0..4 {
        let mut voxels = vec![0.0f32; count];
        let mut i = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if in_brain[i] {
                        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                        let base = INTENSITY[classes[i] as usize][m];
                        voxels[i] = (base * bias(p) + noise.sample(&mut rng)) as f32;
                    }
                    i += 1;
                }
            }
        }
        volumes.push(Volume::new(extents, voxels)?);
    }

    let labels = Volume::new(extents, classes.iter().map(|&c| c as f32).collect())?;
    Ok(PhantomCase {
        volumes: volumes.try_into().expect("four modalities"),
        labels,
    })
}

/// Write a case directory: `<dir>/{t1,t1c,t2,flair,seg}.nii`.
pub fn write_case(case: &PhantomCase, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (m, vol) in ModalityId::ALL.iter().zip(&case.volumes) {
        write_volume(vol, dir.join(format!("{}.nii", m.name())))?;
    }
    write_volume(&case.labels, dir.join("seg.nii"))
}

/// Read a case directory back. `needed` restricts which modality files are
/// touched; absent entries stay as zero volumes and must not be used.
pub fn load_case(dir: impl AsRef<Path>, needed: [bool; 4]) -> Result<PhantomCase> {
    let dir = dir.as_ref();
    let labels = read_volume(dir.join("seg.nii"))?;
    let mut volumes: Vec<Volume> = Vec::with_capacity(4);
    for (i, m) in ModalityId::ALL.iter().enumerate() {
        if needed[i] {
            volumes.push(read_volume(dir.join(format!("{}.nii", m.name())))?);
        } else {
            volumes.push(Volume::new(labels.extents, vec![0.0; labels.voxels.len()])?);
        }
    }
    Ok(PhantomCase {
        volumes: volumes.try_into().expect("four modalities"),
        labels,
    })
}
