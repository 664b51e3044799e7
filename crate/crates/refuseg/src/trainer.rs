//! Training loop, checkpointing, inference, and the drop-one-modality
//! evaluation matrix. Every logged number is a pure function of (seed,
//! configuration, dataset): shuffles, augmentation draws, and dropout
//! draws come from per-epoch streams derived from the run seed, so a run
//! resumed from an epoch-boundary checkpoint continues step-for-step.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{
    augment, collate, extract_slices, load_case, normalize, shuffled_indices, AugmentDraw,
    Batch, ModalityId, ModalityStack,
};
use crate::error::{Error, Result};
use crate::gradcore::{adam_step_subset, AdamState, ModelParams, Tape};
use crate::losses::{final_loss, one_hot, FocalParams, LossWeights};
use crate::metrics::{evaluate_case, Hd95Config, MetricsReport, RegionValues};
use crate::model::{build_model, forward, Forward, ModelConfig};
use crate::util::mix_seed;

const STREAM_INIT: u64 = 0x01;
const STREAM_SHUFFLE: u64 = 0x1000;
const STREAM_AUGMENT: u64 = 0x2000;
const STREAM_DROPOUT: u64 = 0x3000;

/// One dataset case: normalized per-z stacks plus the stacked ground truth.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub id: String,
    pub extents: [usize; 3],
    pub stacks: Vec<ModalityStack>,
    pub gt: Vec<u8>,
}

/// Load every case directory under `dir` (sorted by name). `needed` limits
/// which modality files are read; unneeded slots hold zero slices.
pub fn load_dataset(dir: impl AsRef<Path>, needed: [bool; 4]) -> Result<Vec<CaseData>> {
    let dir = dir.as_ref();
    let mut case_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    case_dirs.sort();
    if case_dirs.is_empty() {
        return Err(Error::Data(format!("no case directories under {}", dir.display())));
    }
    case_dirs.iter().map(|p| load_case_data(p, needed)).collect()
}

pub fn load_case_data(case_dir: &Path, needed: [bool; 4]) -> Result<CaseData> {
    let case = load_case(case_dir, needed)?;
    let id = case_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| case_dir.display().to_string());
    let mut stacks = extract_slices(&case.volumes, &case.labels)?;
    for stack in &mut stacks {
        for m in 0..4 {
            stack.slices[m] = normalize(&stack.slices[m]);
        }
        stack.presence = needed;
    }
    let gt: Vec<u8> = case.labels.voxels.iter().map(|&v| v.round() as u8).collect();
    Ok(CaseData { id, extents: case.labels.extents, stacks, gt })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LedgerRecord {
    Step {
        step: u64,
        epoch: usize,
        l_final: f32,
        l_dice: f32,
        l_focal: f32,
        l_c: f32,
    },
    Eval {
        epoch: usize,
        reports: Vec<MetricsReport>,
    },
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<Vec<LedgerRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("bad ledger line: {e}")))
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub ledger_path: PathBuf,
    pub steps: u64,
    pub final_params: ModelParams,
    pub model_config: ModelConfig,
}

/// Train from scratch on a dataset directory.
pub fn train(data_dir: impl AsRef<Path>, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    let cases = load_dataset(data_dir, [true; 4])?;
    let (model_cfg, aug) = resolve_model_config(cfg, &cases)?;
    let params = build_model(&model_cfg, mix_seed(cfg.train.seed, STREAM_INIT))?;
    let adam = AdamState::new(cfg.train.lr);
    run_training(&cases, cfg, &aug, model_cfg, out_dir.as_ref(), params, adam, 0)
}

/// Continue a run from an epoch-boundary checkpoint. The configuration
/// must match the original run for step-for-step equivalence.
pub fn resume_train(
    ckpt: impl AsRef<Path>,
    data_dir: impl AsRef<Path>,
    cfg: &RunConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let Checkpoint { params, adam, config: model_cfg, .. } = load_checkpoint(ckpt)?;
    let cases = load_dataset(data_dir, [true; 4])?;
    let (expected_cfg, aug) = resolve_model_config(cfg, &cases)?;
    if expected_cfg != model_cfg {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint model {model_cfg:?} vs configured {expected_cfg:?}"
        )));
    }
    let steps_per_epoch = steps_per_epoch(&cases, cfg)?;
    if adam.step_count % steps_per_epoch as u64 != 0 {
        return Err(Error::Contract(format!(
            "checkpoint at step {} is not an epoch boundary ({steps_per_epoch} steps per epoch)",
            adam.step_count
        )));
    }
    let start_epoch = (adam.step_count / steps_per_epoch as u64) as usize;
    run_training(&cases, cfg, &aug, model_cfg, out_dir.as_ref(), params, adam, start_epoch)
}

fn resolve_model_config(cfg: &RunConfig, cases: &[CaseData]) -> Result<(ModelConfig, crate::data::AugmentConfig)> {
    cfg.validate()?;
    let (h, w) = {
        let s = cases
            .first()
            .and_then(|c| c.stacks.first())
            .ok_or_else(|| Error::Data("dataset has no slices".into()))?;
        s.extent()
    };
    for c in cases {
        for s in &c.stacks {
            if s.extent() != (h, w) {
                return Err(Error::Alignment(format!(
                    "case {} slice extent {:?} differs from {:?}",
                    c.id,
                    s.extent(),
                    (h, w)
                )));
            }
        }
    }
    let mut aug = cfg.augment.clone();
    aug.seed = cfg.train.seed;
    let input = if cfg.augment_enabled {
        if h != w {
            return Err(Error::Config(format!(
                "augmentation assumes square slices, got {h}x{w}"
            )));
        }
        aug = aug.scaled_to(h);
        (aug.final_size, aug.final_size)
    } else {
        (h, w)
    };
    if let Some(fixed) = cfg.input_size {
        if fixed != input {
            return Err(Error::Config(format!(
                "configured input_size {fixed:?} but the pipeline produces {input:?}"
            )));
        }
    }
    let model_cfg = ModelConfig { input_size: input, ..cfg.model };
    model_cfg.validate()?;
    model_cfg.check_extent(input.0, input.1)?;
    Ok((model_cfg, aug))
}

fn steps_per_epoch(cases: &[CaseData], cfg: &RunConfig) -> Result<usize> {
    let total: usize = cases.iter().map(|c| c.stacks.len()).sum();
    let n = cfg.train.batch_size;
    let steps = if cfg.train.beta > 0.0 { total / n } else { total.div_ceil(n) };
    if steps == 0 {
        return Err(Error::Config(format!(
            "dataset of {total} slices yields no batches of size {n}"
        )));
    }
    Ok(steps)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    cases: &[CaseData],
    cfg: &RunConfig,
    aug: &crate::data::AugmentConfig,
    model_cfg: ModelConfig,
    out_dir: &Path,
    mut params: ModelParams,
    mut adam: AdamState,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ledger_path = out_dir.join("ledger.jsonl");
    let ledger_file = fs::File::create(&ledger_path).map_err(|e| Error::io(ledger_path.display().to_string(), e))?;
    let mut ledger = BufWriter::new(ledger_file);
    let write_record = |rec: &LedgerRecord, ledger: &mut BufWriter<fs::File>| -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("ledger encode: {e}")))?;
        writeln!(ledger, "{line}").map_err(|e| Error::io(ledger_path.display().to_string(), e))?;
        Ok(())
    };

    let all_stacks: Vec<&ModalityStack> = cases.iter().flat_map(|c| c.stacks.iter()).collect();
    let seed = cfg.train.seed;
    let contrastive = cfg.train.beta > 0.0;

    for epoch in start_epoch..cfg.train.epochs {
        let order = shuffled_indices(all_stacks.len(), mix_seed(seed, STREAM_SHUFFLE + epoch as u64));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_AUGMENT + epoch as u64));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_DROPOUT + epoch as u64));

        for chunk in order.chunks(cfg.train.batch_size) {
            if chunk.len() < cfg.train.batch_size && contrastive {
                break;
            }
            let batch = if cfg.augment_enabled {
                let augmented: Vec<ModalityStack> = chunk
                    .iter()
                    .map(|&i| {
                        let s = all_stacks[i];
                        let (h, w) = s.extent();
                        let draw = AugmentDraw::sample(aug, h, w, &mut aug_rng);
                        augment(s, aug, &draw)
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&ModalityStack> = augmented.iter().collect();
                collate(&refs)?
            } else {
                let refs: Vec<&ModalityStack> = chunk.iter().map(|&i| all_stacks[i]).collect();
                collate(&refs)?
            };

            let mut presence = batch.presence;
            if cfg.train.modality_dropout_p > 0.0 {
                let mut dropped = [false; 4];
                for d in &mut dropped {
                    *d = drop_rng.gen::<f32>() < cfg.train.modality_dropout_p;
                }
                if !dropped.iter().all(|&d| d) {
                    for (p, &d) in presence.iter_mut().zip(&dropped) {
                        *p &= !d;
                    }
                }
            }

            let step = adam.step_count + 1;
            let (l_final, l_dice, l_focal, l_c, touched) =
                train_step(&mut params, &model_cfg, &batch, presence, &cfg.loss, &cfg.focal, step)?;
            adam_step_subset(&mut params, &mut adam, &touched)?;
            params.zero_grads();

            write_record(
                &LedgerRecord::Step { step: adam.step_count, epoch, l_final, l_dice, l_focal, l_c },
                &mut ledger,
            )?;
        }

        let boundary = epoch + 1;
        if cfg.train.eval_every > 0 && boundary % cfg.train.eval_every == 0 {
            let reports = evaluate_dataset(&mut params, &model_cfg, cases, [true; 4], cfg.train.beta)?;
            write_record(&LedgerRecord::Eval { epoch, reports }, &mut ledger)?;
        }
        if cfg.train.checkpoint_every > 0 && boundary % cfg.train.checkpoint_every == 0 && boundary < cfg.train.epochs {
            let p = out_dir.join(format!("ckpt_e{boundary:04}.rfsg"));
            save_checkpoint(&params, &adam, &model_cfg, cfg.train.beta, &p)?;
        }
    }

    ledger.flush().map_err(|e| Error::io(ledger_path.display().to_string(), e))?;
    let checkpoint_path = out_dir.join("final.rfsg");
    save_checkpoint(&params, &adam, &model_cfg, cfg.train.beta, &checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint_path,
        ledger_path,
        steps: adam.step_count,
        final_params: params,
        model_config: model_cfg,
    })
}

fn train_step(
    params: &mut ModelParams,
    model_cfg: &ModelConfig,
    batch: &Batch,
    presence: [bool; 4],
    lw: &LossWeights,
    fp: &FocalParams,
    step: u64,
) -> Result<(f32, f32, f32, f32, Vec<String>)> {
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, params, model_cfg, true);
    let out = forward(&mut fx, &batch.inputs, presence, lw.beta > 0.0)?;
    let target = one_hot(&batch.labels, batch.n, model_cfg.num_classes, batch.h, batch.w)?;
    let loss = final_loss(fx.tape, out.prob, &target, &out.projections, presence, lw, fp)?;
    let (l_final, l_dice, l_focal, l_c) = loss.values(fx.tape);
    if !l_final.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("dice {l_dice}, focal {l_focal}, contrastive {l_c}"),
        });
    }
    fx.tape.backward(loss.total)?;
    let touched = fx.write_back_grads();
    Ok((l_final, l_dice, l_focal, l_c, touched))
}

const INFER_CHUNK: usize = 8;

/// Eval-mode prediction over one case's stacks: argmax class per voxel,
/// stacked in z order. Absent modalities are excluded from every fusion.
pub fn infer_case(
    params: &mut ModelParams,
    model_cfg: &ModelConfig,
    stacks: &[ModalityStack],
    presence: [bool; 4],
) -> Result<Vec<u8>> {
    if !presence.iter().any(|&p| p) {
        return Err(Error::EmptyFusion);
    }
    let mut out = Vec::new();
    for chunk in stacks.chunks(INFER_CHUNK) {
        let refs: Vec<&ModalityStack> = chunk.iter().collect();
        let batch = collate(&refs)?;
        let mut tape = Tape::no_grad();
        let mut fx = Forward::new(&mut tape, params, model_cfg, false);
        let fwd = forward(&mut fx, &batch.inputs, presence, false)?;
        let prob = tape.value(fwd.prob);
        let c = model_cfg.num_classes;
        let s = batch.h * batch.w;
        for b in 0..batch.n {
            for i in 0..s {
                let mut best = 0usize;
                let mut best_v = prob[(b * c) * s + i];
                for ch in 1..c {
                    let v = prob[(b * c + ch) * s + i];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    Ok(out)
}

/// Inference for one on-disk case with a set of dropped modalities; files
/// for dropped modalities are never opened.
pub fn infer(
    ckpt: impl AsRef<Path>,
    case_dir: impl AsRef<Path>,
    drop: &[ModalityId],
) -> Result<(Vec<u8>, [usize; 3])> {
    let Checkpoint { mut params, config, .. } = load_checkpoint(ckpt)?;
    let mut presence = [true; 4];
    for m in drop {
        presence[m.index()] = false;
    }
    if !presence.iter().any(|&p| p) {
        return Err(Error::EmptyFusion);
    }
    let case = load_case_data(case_dir.as_ref(), presence)?;
    let labels = infer_case(&mut params, &config, &case.stacks, presence)?;
    Ok((labels, case.extents))
}

pub fn evaluate_dataset(
    params: &mut ModelParams,
    model_cfg: &ModelConfig,
    cases: &[CaseData],
    presence: [bool; 4],
    beta: f32,
) -> Result<Vec<MetricsReport>> {
    let dropped = dropped_name(presence);
    cases
        .iter()
        .map(|case| {
            let mut p = params.clone();
            let pred = infer_case(&mut p, model_cfg, &case.stacks, presence)?;
            let (dice, hd95) = evaluate_case(&pred, &case.gt, case.extents, &Hd95Config::default())?;
            Ok(MetricsReport {
                case_id: case.id.clone(),
                dropped_modality: dropped.clone(),
                beta: beta as f64,
                dice,
                hd95,
            })
        })
        .collect()
}

fn dropped_name(presence: [bool; 4]) -> Option<String> {
    let absent: Vec<&str> = ModalityId::ALL
        .iter()
        .filter(|m| !presence[m.index()])
        .map(|m| m.name())
        .collect();
    if absent.is_empty() {
        None
    } else {
        Some(absent.join(","))
    }
}

/// Mean per-region metrics of one drop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRow {
    pub dropped_modality: Option<String>,
    pub cases: usize,
    pub dice: RegionValues,
    pub hd95: RegionValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub beta: f64,
    pub rows: Vec<MatrixRow>,
}

/// Evaluate full-modality inference plus the four single-drop
/// configurations over every case. Cases run in parallel; report order is
/// by case then configuration.
pub fn drop_modality_matrix(
    ckpt: impl AsRef<Path>,
    data_dir: impl AsRef<Path>,
    report_path: impl AsRef<Path>,
) -> Result<(Vec<MetricsReport>, MatrixSummary)> {
    let Checkpoint { params, config, beta, .. } = load_checkpoint(ckpt)?;
    let cases = load_dataset(data_dir, [true; 4])?;
    let configurations: Vec<[bool; 4]> = std::iter::once([true; 4])
        .chain(ModalityId::ALL.iter().map(|m| {
            let mut p = [true; 4];
            p[m.index()] = false;
            p
        }))
        .collect();

    let per_case: Vec<Vec<MetricsReport>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<MetricsReport>> {
            let mut local = params.clone();
            configurations
                .iter()
                .map(|&presence| {
                    let pred = infer_case(&mut local, &config, &case.stacks, presence)?;
                    let (dice, hd95) =
                        evaluate_case(&pred, &case.gt, case.extents, &Hd95Config::default())?;
                    Ok(MetricsReport {
                        case_id: case.id.clone(),
                        dropped_modality: dropped_name(presence),
                        beta: beta as f64,
                        dice,
                        hd95,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = per_case.into_iter().flatten().collect();

    let report_path = report_path.as_ref();
    let mut out = String::new();
    for r in &reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(format!("report encode: {e}")))?);
        out.push('\n');
    }
    fs::write(report_path, out).map_err(|e| Error::io(report_path.display().to_string(), e))?;

    let summary = summarize_reports(&reports)?;
    Ok((reports, summary))
}

/// Group per-case reports by drop configuration and average.
pub fn summarize_reports(reports: &[MetricsReport]) -> Result<MatrixSummary> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to summarize".into()));
    }
    let beta = reports[0].beta;
    let mut groups: BTreeMap<Option<String>, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.dropped_modality.clone()).or_default().push(r);
    }
    let order: Vec<Option<String>> = std::iter::once(None)
        .chain(ModalityId::ALL.iter().map(|m| Some(m.name().to_string())))
        .collect();
    let mut rows = Vec::new();
    for key in order {
        if let Some(group) = groups.remove(&key) {
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> [f64; 3]| {
                let mut acc = [0.0f64; 3];
                for r in &group {
                    let v = f(r);
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                acc.map(|v| v / n)
            };
            rows.push(MatrixRow {
                dropped_modality: key,
                cases: group.len(),
                dice: RegionValues::from_array(mean(&|r| r.dice.as_array())),
                hd95: RegionValues::from_array(mean(&|r| r.hd95.as_array())),
            });
        }
    }
    // configurations outside the canonical five (multi-drops) follow
    for (key, group) in groups {
        let n = group.len() as f64;
        let mut dice = [0.0f64; 3];
        let mut hd = [0.0f64; 3];
        for r in &group {
            for (a, b) in dice.iter_mut().zip(r.dice.as_array()) {
                *a += b;
            }
            for (a, b) in hd.iter_mut().zip(r.hd95.as_array()) {
                *a += b;
            }
        }
        rows.push(MatrixRow {
            dropped_modality: key,
            cases: group.len(),
            dice: RegionValues::from_array(dice.map(|v| v / n)),
            hd95: RegionValues::from_array(hd.map(|v| v / n)),
        });
    }
    Ok(MatrixSummary { beta, rows })
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad report line: {e}"))))
        .collect()
}

/// Side-by-side comparison of two runs (typically beta = 0 against
/// beta = 1) in the drop-modality table layout.
pub fn format_comparison_table(a: &MatrixSummary, b: &MatrixSummary) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:<14} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}\n",
        "Modality", "Contrastive", "Dice", "", "", "HD95", "", ""
    ));
    s.push_str(&format!(
        "{:<10} {:<14} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}\n",
        "Dropped", "(beta)", "ET", "TC", "WT", "ET", "TC", "WT"
    ));
    s.push_str(&"-".repeat(82));
    s.push('\n');
    let keys: Vec<Option<String>> = a.rows.iter().map(|r| r.dropped_modality.clone()).collect();
    for key in keys {
        for summary in [a, b] {
            if let Some(row) = summary.rows.iter().find(|r| r.dropped_modality == key) {
                let name = key.clone().unwrap_or_else(|| "(none)".to_string());
                let d = row.dice.as_array();
                let h = row.hd95.as_array();
                s.push_str(&format!(
                    "{:<10} {:<14} {:>8.3} {:>8.3} {:>8.3}   {:>8.2} {:>8.2} {:>8.2}\n",
                    name,
                    format!("{:.2}", summary.beta),
                    d[0],
                    d[1],
                    d[2],
                    h[0],
                    h[1],
                    h[2]
                ));
            }
        }
    }
    s
}
