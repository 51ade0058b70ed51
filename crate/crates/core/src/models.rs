//! Per-view U-Nets and the inception-style fusion network, plus their weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{json_file, Error, Result};
use crate::nn::graph::param_infos;
use crate::nn::{self, Mode, Node, Op, ParamInfo, ParamRole, Scalar, Tensor};
use crate::volume::{Axis, SliceShapeTable};

/// The four networks of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "M_x")]
    Mx,
    #[serde(rename = "M_y")]
    My,
    #[serde(rename = "M_z")]
    Mz,
    #[serde(rename = "SAN")]
    San,
}

impl ModelName {
    /// The U-Net that segments slices of `axis`.
    pub fn for_axis(axis: Axis) -> Self {
        match axis {
            Axis::Axial => ModelName::Mx,
            Axis::Lateral => ModelName::My,
            Axis::Frontal => ModelName::Mz,
        }
    }

    pub fn axis(self) -> Option<Axis> {
        match self {
            ModelName::Mx => Some(Axis::Axial),
            ModelName::My => Some(Axis::Lateral),
            ModelName::Mz => Some(Axis::Frontal),
            ModelName::San => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Mx => "M_x",
            ModelName::My => "M_y",
            ModelName::Mz => "M_z",
            ModelName::San => "SAN",
        }
    }
}

impl std::fmt::Display for ModelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    /// Number of 2× downsampling steps.
    pub depth: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_width: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SanConfig {
    /// Filters per inception branch.
    pub branch_width: usize,
}

impl Default for SanConfig {
    fn default() -> Self {
        Self { branch_width: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Unet(UnetConfig),
    San(SanConfig),
}

/// Architecture of one network as a layer graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ModelName,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub architecture: Architecture,
    pub layers: Vec<Node>,
    /// Trainable parameter count.
    pub param_count: usize,
}

impl ModelSpec {
    fn new(
        name: ModelName,
        input_shape: (usize, usize, usize),
        architecture: Architecture,
        layers: Vec<Node>,
    ) -> Self {
        let param_count = param_infos(&layers)
            .iter()
            .filter(|p| p.role.trainable())
            .map(ParamInfo::len)
            .sum();
        Self {
            name,
            input_shape,
            architecture,
            layers,
            param_count,
        }
    }

    pub fn params(&self) -> Vec<ParamInfo> {
        param_infos(&self.layers)
    }

    /// Spatial input shape `(height, width)`.
    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.input_shape.0, self.input_shape.1)
    }

    pub fn in_channels(&self) -> usize {
        self.input_shape.2
    }
}

struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    fn new(channels: usize) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input { channels },
                inputs: Vec::new(),
            }],
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: &str, from: usize, cin: usize, cout: usize, kernel: usize, bias: bool) -> usize {
        self.push(
            name,
            Op::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel,
                bias,
            },
            vec![from],
        )
    }

    /// conv 3×3 → batch norm → ReLU, twice.
    fn double_conv(&mut self, prefix: &str, from: usize, cin: usize, cout: usize) -> usize {
        let mut at = from;
        let mut channels = cin;
        for k in 1..=2 {
            at = self.conv(&format!("{prefix}_conv{k}"), at, channels, cout, 3, false);
            at = self.push(
                format!("{prefix}_bn{k}"),
                Op::BatchNorm { channels: cout },
                vec![at],
            );
            at = self.push(format!("{prefix}_relu{k}"), Op::Relu, vec![at]);
            channels = cout;
        }
        at
    }
}

/// Builds a U-Net for single-channel `(height, width)` slices.
pub fn build_unet(name: ModelName, input_shape: (usize, usize), config: &UnetConfig) -> Result<ModelSpec> {
    let (h, w) = input_shape;
    let UnetConfig { depth, base_width } = *config;
    if base_width == 0 {
        return Err(Error::InvalidValue("U-Net base width must be positive".into()));
    }
    let factor = 1usize << depth;
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        let pad = |v: usize| v.div_ceil(factor).max(1) * factor;
        return Err(Error::Shape(format!(
            "U-Net of depth {depth} needs input sides divisible by {factor}; \
             {h}x{w} could be padded to {}x{}",
            pad(h),
            pad(w)
        )));
    }

    let mut g = GraphBuilder::new(1);
    let mut at = 0;
    let mut channels = 1;
    let mut skips = Vec::with_capacity(depth);
    for level in 0..depth {
        let width = base_width << level;
        at = g.double_conv(&format!("enc{level}"), at, channels, width);
        skips.push((at, width));
        at = g.push(format!("enc{level}_pool"), Op::MaxPool, vec![at]);
        channels = width;
    }
    let bottom = base_width << depth;
    at = g.double_conv("bottleneck", at, channels, bottom);
    channels = bottom;
    for level in (0..depth).rev() {
        let (skip, width) = skips[level];
        let up = g.push(
            format!("dec{level}_up"),
            Op::UpConv {
                in_channels: channels,
                out_channels: width,
            },
            vec![at],
        );
        let cat = g.push(format!("dec{level}_cat"), Op::Concat, vec![up, skip]);
        at = g.double_conv(&format!("dec{level}"), cat, 2 * width, width);
        channels = width;
    }
    at = g.conv("head_conv", at, channels, 1, 1, true);
    g.push("head_sigmoid", Op::Sigmoid, vec![at]);
    Ok(ModelSpec::new(
        name,
        (h, w, 1),
        Architecture::Unet(*config),
        g.nodes,
    ))
}

/// Builds the three per-view U-Nets for a slice-shape table.
pub fn build_view_unets(table: &SliceShapeTable, config: &UnetConfig) -> Result<[ModelSpec; 3]> {
    let build = |axis: Axis| build_unet(ModelName::for_axis(axis), table.shape(axis), config);
    Ok([
        build(Axis::Axial)?,
        build(Axis::Lateral)?,
        build(Axis::Frontal)?,
    ])
}

/// Builds the fusion network: one inception block over the three stacked
/// per-view maps, then a 1×1 convolution and sigmoid.
pub fn build_san(input_shape: (usize, usize), config: &SanConfig) -> Result<ModelSpec> {
    let (h, w) = input_shape;
    if h == 0 || w == 0 || config.branch_width == 0 {
        return Err(Error::Shape(format!(
            "fusion network needs positive dims and width, got {h}x{w}, width {}",
            config.branch_width
        )));
    }
    let bw = config.branch_width;
    let mut g = GraphBuilder::new(3);
    let mut branches = Vec::with_capacity(4);
    for k in [1, 3, 5] {
        let c = g.conv(&format!("branch{k}x{k}_conv"), 0, 3, bw, k, true);
        branches.push(g.push(format!("branch{k}x{k}_relu"), Op::Relu, vec![c]));
    }
    let pool = g.push("branch_pool_avg", Op::AvgPool, vec![0]);
    let c = g.conv("branch_pool_conv", pool, 3, bw, 1, true);
    branches.push(g.push("branch_pool_relu", Op::Relu, vec![c]));
    let cat = g.push("inception_cat", Op::Concat, branches);
    let head = g.conv("head_conv", cat, 4 * bw, 1, 1, true);
    g.push("head_sigmoid", Op::Sigmoid, vec![head]);
    Ok(ModelSpec::new(
        ModelName::San,
        (h, w, 3),
        Architecture::San(*config),
        g.nodes,
    ))
}

/// Metadata carried with trained weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
}

/// Parameter tensors of one network, in the slot order of its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    dtype: String,
}

impl Weights {
    /// Fan-in scaled normal initialization; deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let infos = spec.params();
        let mut values = Vec::with_capacity(infos.len());
        for info in &infos {
            let node = &spec.layers[info.node];
            let v = match (info.role, &node.op) {
                (ParamRole::Weight, op) => {
                    let (fan_in, gain) = match *op {
                        Op::Conv {
                            in_channels,
                            kernel,
                            ..
                        } => {
                            // The output head feeds a sigmoid, everything else a ReLU.
                            let gain = if node.name == "head_conv" { 1.0 } else { 2.0 };
                            (in_channels * kernel * kernel, gain)
                        }
                        Op::UpConv { in_channels, .. } => (in_channels, 1.0),
                        _ => unreachable!("only convolutions own weights"),
                    };
                    let normal = Normal::new(0.0f32, (gain / fan_in as f32).sqrt())
                        .expect("finite positive std");
                    (0..info.len()).map(|_| normal.sample(&mut rng)).collect()
                }
                (ParamRole::Gamma | ParamRole::RunningVar, _) => vec![1.0; info.len()],
                _ => vec![0.0; info.len()],
            };
            values.push(v);
        }
        Self::from_parts(&infos, values)
    }

    fn from_parts(infos: &[ParamInfo], values: Vec<Vec<f32>>) -> Self {
        Self {
            names: infos.iter().map(|p| p.name.clone()).collect(),
            shapes: infos.iter().map(|p| p.shape.clone()).collect(),
            values,
            meta: TrainingMeta::default(),
        }
    }

    /// Wraps slot-ordered values for `spec`.
    pub fn from_slots<T: Scalar>(spec: &ModelSpec, slots: &[Vec<T>]) -> Result<Self> {
        let infos = spec.params();
        if infos.len() != slots.len() || infos.iter().zip(slots).any(|(i, s)| i.len() != s.len()) {
            return Err(Error::Shape(format!(
                "parameter slots do not match the layout of {}",
                spec.name
            )));
        }
        let values = slots
            .iter()
            .map(|s| s.iter().map(|v| v.to_f32_lossy()).collect())
            .collect();
        Ok(Self::from_parts(&infos, values))
    }

    pub fn to_slots<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.values
            .iter()
            .map(|v| v.iter().map(|&x| T::from_f32_lossy(x)).collect())
            .collect()
    }

    pub fn slots(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn slots_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.values[i])
    }

    /// Checks that every tensor matches a parameter of `spec` by name and shape.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let infos = spec.params();
        if infos.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "{} has {} parameter tensors, weights have {}",
                spec.name,
                infos.len(),
                self.names.len()
            )));
        }
        for (i, info) in infos.iter().enumerate() {
            if self.names[i] != info.name || self.shapes[i] != info.shape || self.values[i].len() != info.len() {
                return Err(Error::Shape(format!(
                    "weight {} {:?} does not match layer parameter {} {:?}",
                    self.names[i], self.shapes[i], info.name, info.shape
                )));
            }
        }
        Ok(())
    }

    /// Writes one little-endian f32 file per tensor plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for ((name, shape), values) in self.names.iter().zip(&self.shapes).zip(&self.values) {
            let path = dir.join(format!("{name}.bin"));
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            index.insert(
                name.clone(),
                IndexEntry {
                    shape: shape.clone(),
                    dtype: "f32".into(),
                },
            );
        }
        json_file::write(&dir.join("index.json"), &index)?;
        json_file::write(&dir.join("meta.json"), &self.meta)
    }

    /// Loads weights saved by [`Weights::save`] in the slot order of `spec`.
    pub fn load(dir: &Path, spec: &ModelSpec) -> Result<Self> {
        let index: BTreeMap<String, IndexEntry> = json_file::read(&dir.join("index.json"))?;
        let infos = spec.params();
        if index.len() != infos.len() {
            return Err(Error::Shape(format!(
                "{}: index lists {} tensors, {} expects {}",
                dir.display(),
                index.len(),
                spec.name,
                infos.len()
            )));
        }
        let mut values = Vec::with_capacity(infos.len());
        for info in &infos {
            let entry = index.get(&info.name).ok_or_else(|| {
                Error::Shape(format!("{}: missing tensor {}", dir.display(), info.name))
            })?;
            if entry.shape != info.shape || entry.dtype != "f32" {
                return Err(Error::Shape(format!(
                    "{}: tensor {} is {} {:?}, expected f32 {:?}",
                    dir.display(),
                    info.name,
                    entry.dtype,
                    entry.shape,
                    info.shape
                )));
            }
            let path = dir.join(format!("{}.bin", info.name));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != 4 * info.len() {
                return Err(Error::Shape(format!(
                    "{}: {} bytes, expected {}",
                    path.display(),
                    bytes.len(),
                    4 * info.len()
                )));
            }
            values.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let mut w = Self::from_parts(&infos, values);
        let meta_path = dir.join("meta.json");
        if meta_path.exists() {
            w.meta = json_file::read(&meta_path)?;
        }
        Ok(w)
    }
}

/// A spec with matching weights.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    weights: Weights,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: Weights) -> Result<Self> {
        weights.check_against(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelSpec, Weights) {
        (self.spec, self.weights)
    }

    /// Evaluation-mode forward pass on an NCHW batch.
    pub fn predict(&self, input: Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, c, h, w] = input.shape();
        if c != self.spec.in_channels() || (h, w) != self.spec.spatial_shape() {
            return Err(Error::Shape(format!(
                "{} takes {:?} inputs, got {c}x{h}x{w}",
                self.spec.name, self.spec.input_shape
            )));
        }
        Ok(nn::forward(&self.spec.layers, self.weights.slots(), input, Mode::Eval)?.into_output())
    }

    /// Writes `spec.json` and the weight files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.weights.save(dir)?;
        json_file::write(&dir.join("spec.json"), &self.spec)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: ModelSpec = json_file::read(&dir.join("spec.json"))?;
        let weights = Weights::load(dir, &spec)?;
        Self::new(spec, weights)
    }
}

/// Fusion-network weights that compute the per-pixel channel mean `m` of
/// the three inputs and output `sigmoid(gain * (m - 0.5))`, so thresholding
/// at 0.5 yields the 2-of-3 majority of binary inputs.
pub fn san_averaging_weights(spec: &ModelSpec) -> Result<Weights> {
    if spec.name != ModelName::San {
        return Err(Error::Precondition(format!(
            "averaging weights only apply to SAN, not {}",
            spec.name
        )));
    }
    const GAIN: f32 = 6.0;
    let mut w = Weights::from_parts(
        &spec.params(),
        spec.params().iter().map(|p| vec![0.0; p.len()]).collect(),
    );
    // Filter 0 of the 1×1 branch: [1/3, 1/3, 1/3]; its ReLU is a no-op on [0, 1] inputs.
    let branch = w
        .get_mut("branch1x1_conv.weight")
        .expect("SAN has a 1x1 branch");
    branch[..3].fill(1.0 / 3.0);
    w.get_mut("head_conv.weight").expect("SAN has a head")[0] = GAIN;
    w.get_mut("head_conv.bias").expect("SAN head has a bias")[0] = -0.5 * GAIN;
    Ok(w)
}
