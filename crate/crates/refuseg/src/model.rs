//! The segmentation network: four independent residual encoders (one per
//! modality), per-modality contrastive projection heads, element-wise-max
//! fusion of the per-level feature maps over the present modalities, and a
//! shared decoder fed by the fused maps through every skip connection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ModalityId;
use crate::error::{Error, Result};
use crate::gradcore::{ModelParams, NodeId, Tape, Tensor};
use crate::util::{fnv1a64, mix_seed};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            base_width: 8,
            blocks_per_stage: 2,
            proj_dim: 32,
            num_classes: 4,
            input_size: (240, 240),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config(format!("stages must be >= 2, got {}", self.stages)));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width must be >= 4, got {}", self.base_width)));
        }
        if self.proj_dim < 2 {
            return Err(Error::Config(format!("proj_dim must be >= 2, got {}", self.proj_dim)));
        }
        if self.blocks_per_stage < 1 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Channel width at 1-based stage `s`: doubles per stage.
    pub fn width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.stages - 1)
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input extent {h}x{w} not divisible by the {f}x downsample of {} stages",
                self.stages
            )));
        }
        Ok(())
    }
}

enum Init {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
    RunningStats,
}

fn init_tensor(name: &str, shape: Vec<usize>, kind: Init, seed: u64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = match kind {
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a64(name.as_bytes())));
            (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect()
        }
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::RunningStats => {
            // [2,C]: mean row zero, variance row one
            let c = numel / 2;
            let mut v = vec![0.0; numel];
            v[c..].iter_mut().for_each(|x| *x = 1.0);
            v
        }
    };
    Tensor::new(shape, data).expect("consistent init shape")
}

/// Walk every parameter of the model in a fixed order. `emit` receives
/// (name, shape, init kind, trainable).
fn for_each_parameter(cfg: &ModelConfig, mut emit: impl FnMut(String, Vec<usize>, Init, bool)) {
    let bn = |prefix: String, c: usize, emit: &mut dyn FnMut(String, Vec<usize>, Init, bool)| {
        emit(format!("{prefix}.gamma"), vec![c], Init::Ones, true);
        emit(format!("{prefix}.beta"), vec![c], Init::Zeros, true);
        emit(format!("{prefix}.running"), vec![2, c], Init::RunningStats, false);
    };
    for m in ModalityId::ALL {
        let e = format!("enc.{}", m.name());
        let w1 = cfg.width(1);
        emit(format!("{e}.stem.conv.w"), vec![w1, 1, 3, 3], Init::HeNormal { fan_in: 9 }, true);
        bn(format!("{e}.stem.bn"), w1, &mut emit);
        for s in 1..=cfg.stages {
            let out = cfg.width(s);
            for b in 0..cfg.blocks_per_stage {
                let inc = if b == 0 && s > 1 { cfg.width(s - 1) } else { out };
                let stride = if b == 0 && s > 1 { 2 } else { 1 };
                let p = format!("{e}.s{s}.b{b}");
                emit(
                    format!("{p}.conv1.w"),
                    vec![out, inc, 3, 3],
                    Init::HeNormal { fan_in: inc * 9 },
                    true,
                );
                bn(format!("{p}.bn1"), out, &mut emit);
                emit(
                    format!("{p}.conv2.w"),
                    vec![out, out, 3, 3],
                    Init::HeNormal { fan_in: out * 9 },
                    true,
                );
                bn(format!("{p}.bn2"), out, &mut emit);
                if stride != 1 || inc != out {
                    emit(
                        format!("{p}.down.w"),
                        vec![out, inc, 1, 1],
                        Init::HeNormal { fan_in: inc },
                        true,
                    );
                    bn(format!("{p}.down_bn"), out, &mut emit);
                }
            }
        }
        let p = format!("proj.{}", m.name());
        let deep = cfg.width(cfg.stages);
        emit(format!("{p}.fc1.w"), vec![cfg.proj_dim, deep], Init::HeNormal { fan_in: deep }, true);
        emit(format!("{p}.fc1.b"), vec![cfg.proj_dim], Init::Zeros, true);
        bn(format!("{p}.bn1"), cfg.proj_dim, &mut emit);
        emit(
            format!("{p}.fc2.w"),
            vec![cfg.proj_dim, cfg.proj_dim],
            Init::HeNormal { fan_in: cfg.proj_dim },
            true,
        );
        emit(format!("{p}.fc2.b"), vec![cfg.proj_dim], Init::Zeros, true);
        bn(format!("{p}.bn2"), cfg.proj_dim, &mut emit);
    }
    for lvl in (0..cfg.stages - 1).rev() {
        let out = cfg.width(lvl + 1);
        let inc = cfg.width(lvl + 2) + out;
        let p = format!("dec.l{lvl}");
        emit(format!("{p}.conv1.w"), vec![out, inc, 3, 3], Init::HeNormal { fan_in: inc * 9 }, true);
        bn(format!("{p}.bn1"), out, &mut emit);
        emit(format!("{p}.conv2.w"), vec![out, out, 3, 3], Init::HeNormal { fan_in: out * 9 }, true);
        bn(format!("{p}.bn2"), out, &mut emit);
    }
    emit(
        "dec.head.w".to_string(),
        vec![cfg.num_classes, cfg.width(1), 1, 1],
        Init::HeNormal { fan_in: cfg.width(1) },
        true,
    );
    emit("dec.head.b".to_string(), vec![cfg.num_classes], Init::Zeros, true);
}

/// He fan-in normal initialization for conv/linear weights, zeros for
/// biases, ones/zeros for norm scale/shift. Each parameter draws from its
/// own stream keyed by (seed, name), so the four encoders start distinct
/// and adding parameters never shifts the others.
pub fn build_model(cfg: &ModelConfig, init_seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    for_each_parameter(cfg, |name, shape, kind, trainable| {
        let t = init_tensor(&name, shape, kind, init_seed);
        params.insert(name, t, trainable);
    });
    Ok(params)
}

/// One forward construction over a tape. Binds each used parameter as a
/// tape leaf on first access, so parameters of absent modalities are never
/// bound and can never receive gradient.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a mut ModelParams,
    pub cfg: &'a ModelConfig,
    pub training: bool,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut ModelParams, cfg: &'a ModelConfig, training: bool) -> Self {
        Forward { tape, params, cfg, training, bound: BTreeMap::new() }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let entry = self.params.get_mut(name)?;
        let id = self.tape.leaf(&mut entry.tensor);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(&mut self, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.p(name)?;
        self.tape.conv2d(x, w, None, stride, pad)
    }

    fn bn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let training = self.training;
        let running = &mut self.params.get_mut(&format!("{prefix}.running"))?.tensor;
        self.tape.batchnorm(x, gamma, beta, running, training, BN_MOMENTUM, BN_EPS)
    }

    fn conv_bn_relu(&mut self, conv_name: &str, bn_prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let c = self.conv(conv_name, x, stride, pad)?;
        let b = self.bn(bn_prefix, c)?;
        Ok(self.tape.relu(b))
    }

    fn residual_block(&mut self, prefix: &str, x: NodeId, stride: usize, project: bool) -> Result<NodeId> {
        let main = self.conv_bn_relu(&format!("{prefix}.conv1.w"), &format!("{prefix}.bn1"), x, stride, 1)?;
        let main = self.conv(&format!("{prefix}.conv2.w"), main, 1, 1)?;
        let main = self.bn(&format!("{prefix}.bn2"), main)?;
        let shortcut = if project {
            let d = self.conv(&format!("{prefix}.down.w"), x, stride, 0)?;
            self.bn(&format!("{prefix}.down_bn"), d)?
        } else {
            x
        };
        let sum = self.tape.add(main, shortcut)?;
        Ok(self.tape.relu(sum))
    }

    /// Consume the forward context: write accumulated leaf gradients back
    /// into the parameter store and return the names of trainable
    /// parameters that actually received gradient.
    pub fn write_back_grads(self) -> Vec<String> {
        let mut touched = Vec::new();
        for (name, id) in self.bound {
            if self.tape.grad(id).is_some() {
                let entry = self.params.get_mut(&name).expect("bound name exists");
                self.tape.write_back_grad(&mut entry.tensor);
                if entry.trainable {
                    touched.push(name);
                }
            }
        }
        touched
    }
}

/// Feature maps per stage for one modality, shallow to deep. Each stage
/// past the first halves the spatial extent via its stride-2 first block.
pub fn encode_modality(fx: &mut Forward, modality: ModalityId, x: NodeId) -> Result<Vec<NodeId>> {
    let shape = fx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Dim(format!("encoder input must be [N,1,H,W], got {shape:?}")));
    }
    fx.cfg.check_extent(shape[2], shape[3])?;
    let e = format!("enc.{}", modality.name());
    let mut cur = fx.conv_bn_relu(&format!("{e}.stem.conv.w"), &format!("{e}.stem.bn"), x, 1, 1)?;
    let mut features = Vec::with_capacity(fx.cfg.stages);
    for s in 1..=fx.cfg.stages {
        for b in 0..fx.cfg.blocks_per_stage {
            let project = b == 0 && s > 1;
            let stride = if project { 2 } else { 1 };
            cur = fx.residual_block(&format!("{e}.s{s}.b{b}"), cur, stride, project)?;
        }
        features.push(cur);
    }
    Ok(features)
}

/// Element-wise max across the present modalities, level by level.
pub fn fuse_levels(
    tape: &mut Tape,
    features: &BTreeMap<ModalityId, Vec<NodeId>>,
    presence: [bool; 4],
) -> Result<Vec<NodeId>> {
    let present: Vec<ModalityId> = ModalityId::ALL
        .into_iter()
        .filter(|m| presence[m.index()])
        .collect();
    if present.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let stages = features
        .get(&present[0])
        .ok_or_else(|| Error::Contract(format!("missing features for {}", present[0])))?
        .len();
    let mut fused = Vec::with_capacity(stages);
    for lvl in 0..stages {
        let level_inputs: Vec<NodeId> = present
            .iter()
            .map(|m| {
                features
                    .get(m)
                    .and_then(|f| f.get(lvl))
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("missing level {lvl} features for {m}")))
            })
            .collect::<Result<_>>()?;
        fused.push(tape.elemwise_max_n(&level_inputs)?);
    }
    Ok(fused)
}

/// Contrastive projection of the deepest encoder feature map:
/// global average pool, then two (linear, batch-norm) stages.
pub fn project_contrastive(fx: &mut Forward, modality: ModalityId, deepest: NodeId) -> Result<NodeId> {
    let p = format!("proj.{}", modality.name());
    let pooled = fx.tape.global_avgpool(deepest)?;
    let w1 = fx.p(&format!("{p}.fc1.w"))?;
    let b1 = fx.p(&format!("{p}.fc1.b"))?;
    let h = fx.tape.linear(pooled, w1, Some(b1))?;
    let h = fx.bn(&format!("{p}.bn1"), h)?;
    let w2 = fx.p(&format!("{p}.fc2.w"))?;
    let b2 = fx.p(&format!("{p}.fc2.b"))?;
    let h = fx.tape.linear(h, w2, Some(b2))?;
    fx.bn(&format!("{p}.bn2"), h)
}

/// U-Net-style decoder over the fused levels: repeated (upsample, concat
/// with the next-shallower fused map, two conv-norm-relu blocks), then a
/// 1x1 head to class logits at input resolution.
pub fn decode(fx: &mut Forward, fused: &[NodeId]) -> Result<NodeId> {
    if fused.len() != fx.cfg.stages {
        return Err(Error::Dim(format!(
            "decoder expects {} fused levels, got {}",
            fx.cfg.stages,
            fused.len()
        )));
    }
    let mut x = fused[fx.cfg.stages - 1];
    for lvl in (0..fx.cfg.stages - 1).rev() {
        x = fx.tape.upsample_nearest2x(x)?;
        let (xs, fs) = (fx.tape.shape(x).to_vec(), fx.tape.shape(fused[lvl]).to_vec());
        if xs[0] != fs[0] || xs[2] != fs[2] || xs[3] != fs[3] {
            return Err(Error::Dim(format!(
                "skip junction at level {lvl}: upsampled {xs:?} vs fused {fs:?}"
            )));
        }
        x = fx.tape.concat_channels(&[x, fused[lvl]])?;
        let p = format!("dec.l{lvl}");
        x = fx.conv_bn_relu(&format!("{p}.conv1.w"), &format!("{p}.bn1"), x, 1, 1)?;
        x = fx.conv_bn_relu(&format!("{p}.conv2.w"), &format!("{p}.bn2"), x, 1, 1)?;
    }
    let w = fx.p("dec.head.w")?;
    let b = fx.p("dec.head.b")?;
    fx.tape.conv2d(x, w, Some(b), 1, 0)
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub prob: NodeId,
    pub projections: BTreeMap<ModalityId, NodeId>,
}

/// Full pass: encode each present modality, fuse, decode, softmax. Absent
/// modalities are never read; their encoders stay unbound. Projections are
/// computed for present modalities when `with_projections` is set.
pub fn forward(
    fx: &mut Forward,
    inputs: &[Tensor; 4],
    presence: [bool; 4],
    with_projections: bool,
) -> Result<ForwardOutput> {
    if !presence.iter().any(|&p| p) {
        return Err(Error::EmptyFusion);
    }
    let mut features: BTreeMap<ModalityId, Vec<NodeId>> = BTreeMap::new();
    for m in ModalityId::ALL {
        if presence[m.index()] {
            let x = fx.tape.constant(&inputs[m.index()]);
            features.insert(m, encode_modality(fx, m, x)?);
        }
    }
    let fused = fuse_levels(fx.tape, &features, presence)?;
    let logits = decode(fx, &fused)?;
    let prob = fx.tape.softmax_channels(logits)?;
    let mut projections = BTreeMap::new();
    if with_projections {
        for (&m, levels) in &features {
            let deepest = *levels.last().expect("at least one stage");
            projections.insert(m, project_contrastive(fx, m, deepest)?);
        }
    }
    Ok(ForwardOutput { logits, prob, projections })
}
