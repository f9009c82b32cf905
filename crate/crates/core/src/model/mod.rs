//! MONO/DI/TRI architectures.
//!
//! Each input scale feeds its own frozen convolutional branch ending in global
//! average pooling. Branch features are concatenated coarse-to-fine (25x,
//! 100x, 400x, skipping absent scales) and classified by a trainable head:
//! `dense(fc) relu dropout dense(fc) relu dropout dense(6) softmax`.

mod cache;

pub use cache::{precompute_features, read_cache, write_cache, FeatureCache, TileKey};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::class::{Magnification, ScaleSet, NUM_CLASSES};
use crate::dataset::{apply_dihedral, Dihedral};
use crate::error::{Error, Result};
use crate::nn::{
    init_weights, load_weights, save_weights, LayerSpec, ModelWeights, Sequential, Tensor,
};
use crate::seed;
use crate::tiling::{Tile, TileTriplet, TILE_SIZE};

pub const FC_GRID: [usize; 5] = [512, 1024, 1536, 2048, 4096];
pub const DROPOUT_GRID: [f32; 3] = [0.0, 0.3, 0.5];

pub const CONFIG_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.tswt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    Mono,
    Di,
    Tri,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Mono, Arch::Di, Arch::Tri];

    pub fn scales(self) -> ScaleSet {
        use Magnification::*;
        match self {
            Arch::Mono => [X400].into_iter().collect(),
            Arch::Di => [X100, X400].into_iter().collect(),
            Arch::Tri => ScaleSet::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mono => "MONO",
            Arch::Di => "DI",
            Arch::Tri => "TRI",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage("arch", format!("'{s}' is not one of MONO, DI, TRI")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchKind {
    /// VGG16 convolutional base: 13 convs in 5 blocks, 512 features.
    Vgg16,
    /// Five single-conv blocks (8, 16, 32, 64, 64), 64 features.
    Small,
}

impl BranchKind {
    pub fn blocks(self) -> &'static [&'static [usize]] {
        match self {
            BranchKind::Vgg16 => &[
                &[64, 64],
                &[128, 128],
                &[256, 256, 256],
                &[512, 512, 512],
                &[512, 512, 512],
            ],
            BranchKind::Small => &[&[8], &[16], &[32], &[64], &[64]],
        }
    }

    pub fn feature_width(self) -> usize {
        *self.blocks().last().and_then(|b| b.last()).unwrap()
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut channels = 3;
        for block in self.blocks() {
            for &out in *block {
                layers.push(LayerSpec::Conv3x3 {
                    in_channels: channels,
                    out_channels: out,
                });
                layers.push(LayerSpec::Relu);
                channels = out;
            }
            layers.push(LayerSpec::MaxPool2x2);
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Vgg16 => "vgg16",
            BranchKind::Small => "small",
        }
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" | "vgg16_shape" => Ok(BranchKind::Vgg16),
            "small" => Ok(BranchKind::Small),
            _ => Err(Error::usage(
                "branch",
                format!("'{s}' is not one of vgg16, small"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub fc_neurons: usize,
    pub dropout: f32,
    pub branch: BranchKind,
    /// Seeds the frozen branches (per scale) and the initial head.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        arch: Arch,
        fc_neurons: usize,
        dropout: f32,
        branch: BranchKind,
        seed: u64,
    ) -> Result<Self> {
        let config = ModelConfig {
            arch,
            fc_neurons,
            dropout,
            branch,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !FC_GRID.contains(&self.fc_neurons) {
            return Err(Error::usage(
                "fc",
                format!("{} is not one of {FC_GRID:?}", self.fc_neurons),
            ));
        }
        if !DROPOUT_GRID.contains(&self.dropout) {
            return Err(Error::usage(
                "dropout",
                format!("{} is not one of 0, 0.3, 0.5", self.dropout),
            ));
        }
        Ok(())
    }

    pub fn head_input_width(&self) -> usize {
        self.branch.feature_width() * self.arch.scales().len()
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        let fc = self.fc_neurons;
        vec![
            LayerSpec::Dense {
                inputs: self.head_input_width(),
                units: fc,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::Dense {
                inputs: fc,
                units: fc,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::Dense {
                inputs: fc,
                units: NUM_CLASSES,
            },
            LayerSpec::Softmax,
        ]
    }

    /// Short key used in logs and summaries, e.g. `DI-fc2048-do0.3`.
    pub fn key(&self) -> String {
        format!("{}-fc{}-do{}", self.arch, self.fc_neurons, self.dropout)
    }
}

/// `(trainable, total)` parameter counts from layer arithmetic alone.
pub fn count_params(config: &ModelConfig) -> (u64, u64) {
    let branch: u64 = config
        .branch
        .layers()
        .iter()
        .map(LayerSpec::param_count)
        .sum();
    let head: u64 = config
        .head_layers()
        .iter()
        .map(LayerSpec::param_count)
        .sum();
    (head, head + branch * config.arch.scales().len() as u64)
}

/// Rounds to two significant figures in millions, e.g. `5.3M`, `20M`.
pub fn format_millions(n: u64) -> String {
    let m = n as f64 / 1e6;
    if m >= 10.0 {
        format!("{}M", m.round() as u64)
    } else {
        format!("{:.1}M", m)
    }
}

fn branch_prefix(m: Magnification) -> String {
    format!("branch_{}", m.tag())
}

pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Coarse to fine, one per input scale.
    pub branches: Vec<(Magnification, Sequential)>,
    pub head: Sequential,
    pub weights: ModelWeights,
}

fn layout(config: &ModelConfig) -> (Vec<(Magnification, Sequential)>, Sequential) {
    let branches = config
        .arch
        .scales()
        .iter()
        .map(|m| (m, Sequential::new(branch_prefix(m), config.branch.layers())))
        .collect();
    (branches, Sequential::new(HEAD_PREFIX, config.head_layers()))
}

/// Builds the model with seeded weights. Branch weights depend only on
/// `(seed, scale, branch kind)`, so MONO, DI and TRI built from one seed share
/// identical branches for the scales they have in common.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let (branches, head) = layout(config);
    let mut weights = ModelWeights::new();
    let branch_seed = seed::derive(config.seed, &[seed::tag("branch")]);
    for (_, net) in &branches {
        weights.extend(init_weights(net, branch_seed, true)?)?;
    }
    weights.extend(init_weights(
        &head,
        seed::derive(config.seed, &[seed::tag("head")]),
        false,
    )?)?;
    Ok(Model {
        config: *config,
        branches,
        head,
        weights,
    })
}

/// Converts an RGB tile to a `[1, 3, 128, 128]` tensor scaled to `[-1, 1]`.
pub fn tile_tensor(tile: &Tile) -> Tensor {
    let plane = TILE_SIZE * TILE_SIZE;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in tile.as_bytes().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[1, 3, TILE_SIZE, TILE_SIZE], data).expect("tile tensor shape")
}

impl Model {
    pub fn scales(&self) -> ScaleSet {
        self.config.arch.scales()
    }

    /// Hash of all branch tensors; keys feature caches.
    pub fn branch_hash(&self) -> [u8; 32] {
        self.weights.hash("branch_")
    }

    /// Hash of the branch for one scale.
    pub fn scale_branch_hash(&self, m: Magnification) -> [u8; 32] {
        self.weights.hash(&format!("{}.", branch_prefix(m)))
    }

    pub fn head_weights(&self) -> ModelWeights {
        self.weights.subset(HEAD_PREFIX)
    }

    fn branch(&self, m: Magnification) -> Result<&Sequential> {
        self.branches
            .iter()
            .find(|(s, _)| *s == m)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::Input(format!("{} has no {m} branch", self.config.arch)))
    }

    /// Feature vector of one tile through the branch for `m`.
    pub fn branch_features(
        &self,
        m: Magnification,
        tile: &Tile,
        augment: Dihedral,
    ) -> Result<Vec<f32>> {
        let net = self.branch(m)?;
        let input = if augment == Dihedral::Identity {
            tile_tensor(tile)
        } else {
            tile_tensor(&apply_dihedral(tile, augment))
        };
        Ok(net.infer(&self.weights, input)?.into_data())
    }

    fn check_scales(&self, triplet: &TileTriplet) -> Result<()> {
        let need = self.scales();
        if !triplet.scales_present().is_superset(need) {
            return Err(Error::Input(format!(
                "{} needs scales {need}, triplet has {}",
                self.config.arch,
                triplet.scales_present()
            )));
        }
        Ok(())
    }

    /// Concatenated head input for one triplet, reading branch features from
    /// `cache` when an entry exists.
    pub fn head_input(
        &self,
        triplet: &TileTriplet,
        augment: Dihedral,
        cached: Option<(&FeatureCache, &TileKey)>,
    ) -> Result<Vec<f32>> {
        self.check_scales(triplet)?;
        if let Some((cache, _)) = cached {
            cache.check_model(self)?;
        }
        let mut out = Vec::with_capacity(self.config.head_input_width());
        for m in self.scales().iter() {
            match cached.and_then(|(c, k)| c.get(k, m)) {
                Some(f) => out.extend_from_slice(f),
                None => {
                    let tile = triplet.tile(m).expect("scale presence checked");
                    out.extend(self.branch_features(m, tile, augment)?);
                }
            }
        }
        Ok(out)
    }

    /// Class probabilities for a batch of head inputs (`[n, width]`).
    pub fn classify_features(&self, inputs: Tensor) -> Result<Tensor> {
        self.head.infer(&self.weights, inputs)
    }

    pub fn predict(
        &self,
        triplet: &TileTriplet,
        cached: Option<(&FeatureCache, &TileKey)>,
    ) -> Result<[f32; NUM_CLASSES]> {
        let augment = cached.map_or(Dihedral::Identity, |(_, k)| k.augment);
        self.probabilities(self.head_input(triplet, augment, cached)?)
    }

    /// Cache-free prediction of an augmented triplet.
    pub fn predict_augmented(
        &self,
        triplet: &TileTriplet,
        augment: Dihedral,
    ) -> Result<[f32; NUM_CLASSES]> {
        self.probabilities(self.head_input(triplet, augment, None)?)
    }

    fn probabilities(&self, features: Vec<f32>) -> Result<[f32; NUM_CLASSES]> {
        let width = features.len();
        let probs = self.classify_features(Tensor::from_vec(&[1, width], features)?)?;
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(probs.data());
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        let text =
            serde_json::to_string_pretty(&self.config).map_err(|e| Error::format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        save_weights(&self.weights, &dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        config.validate()?;
        let weights = load_weights(&dir.join(WEIGHTS_FILE))?;
        Model::from_parts(config, weights)
    }

    /// Assembles a model from a config and externally supplied weights,
    /// checking every expected tensor name and shape.
    pub fn from_parts(config: ModelConfig, weights: ModelWeights) -> Result<Model> {
        let (branches, head) = layout(&config);
        let expected: Vec<(String, Vec<usize>)> = branches
            .iter()
            .flat_map(|(_, n)| n.param_specs())
            .chain(head.param_specs())
            .collect();
        if expected.len() != weights.len() {
            return Err(Error::format(format!(
                "weights hold {} tensors, {} expects {}",
                weights.len(),
                config.key(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            if weights.tensor(name)?.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "tensor '{name}' has the wrong shape"
                )));
            }
        }
        Ok(Model {
            config,
            branches,
            head,
            weights,
        })
    }
}
