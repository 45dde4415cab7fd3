//! The shared per-level CNN, the offset-regressing MLP, and their parameters.
//!
//! Parameters live in one ordered list: CNN tensors first (in layer order),
//! then the three MLP layers. Forward passes bind that list onto a tape and
//! walk it with a cursor, so the same code runs in `f32` and `f64`.

mod init;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glimpse::PATCH_SIZE;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::trainer::LandmarkStats;

pub use init::{kaiming_normal, orthogonal_init};
pub use io::{
    decode, encode, load_params, save_params, write_sidecar, ModelIoError, FORMAT_VERSION, MAGIC,
};

/// Hidden widths of the offset regressor.
pub const MLP_HIDDEN: [usize; 2] = [512, 128];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("patch stack must be [B,1,64,64], got {0:?}")]
    PatchShape(Vec<usize>),
    #[error("feature width {got} does not match the MLP input width {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Three conv3×3-32/relu/maxpool stages, 32×8×8 output.
    Tiny,
    /// ResNet-34 with a single-channel stride-1 stem and without its last
    /// stage or classifier, 256×8×8 output. Batch norm uses the statistics
    /// of the patch stack being processed.
    #[serde(rename = "resnet34-trunc")]
    Resnet34Trunc,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Resnet34Trunc => "resnet34-trunc",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "resnet34-trunc" | "resnet34" => Ok(Preset::Resnet34Trunc),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// conv3×3(stride)-bn-relu-conv3×3-bn plus identity or 1×1-conv-bn
    /// shortcut, followed by relu.
    BasicBlock {
        name: String,
        c_in: usize,
        c_out: usize,
        stride: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Kaiming { fan_in: usize },
    Orthogonal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_specs(
    out: &mut Vec<ParamSpec>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![c_out, c_in, k, k],
        init: Init::Kaiming {
            fan_in: c_in * k * k,
        },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![c_out],
            init: Init::Zeros,
        });
    }
}

fn bn_specs(out: &mut Vec<ParamSpec>, name: &str, channels: usize) {
    out.push(ParamSpec {
        name: format!("{name}.gamma"),
        shape: vec![channels],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.beta"),
        shape: vec![channels],
        init: Init::Zeros,
    });
}

/// Layer list of a CNN preset together with its declared output shape.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnArchitecture {
    pub preset: Preset,
    pub layers: Vec<Layer>,
    /// `(C, H, W)` produced from one 64×64 patch.
    pub output: (usize, usize, usize),
}

impl CnnArchitecture {
    pub fn new(preset: Preset) -> Self {
        match preset {
            Preset::Tiny => {
                let mut layers = Vec::new();
                for (i, c_in) in [1usize, 32, 32].into_iter().enumerate() {
                    layers.push(Layer::Conv {
                        name: format!("cnn.conv{}", i + 1),
                        c_in,
                        c_out: 32,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: true,
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool {
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    });
                }
                CnnArchitecture {
                    preset,
                    layers,
                    output: (32, 8, 8),
                }
            }
            Preset::Resnet34Trunc => {
                let mut layers = vec![
                    Layer::Conv {
                        name: "cnn.conv1".into(),
                        c_in: 1,
                        c_out: 64,
                        kernel: 7,
                        stride: 1,
                        padding: 3,
                        bias: false,
                    },
                    Layer::BatchNorm {
                        name: "cnn.bn1".into(),
                        channels: 64,
                    },
                    Layer::Relu,
                    Layer::MaxPool {
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                ];
                let stages = [(1usize, 3usize, 64usize), (2, 4, 128), (3, 6, 256)];
                let mut c_in = 64;
                for (stage, blocks, c_out) in stages {
                    for b in 0..blocks {
                        let stride = if b == 0 && stage > 1 { 2 } else { 1 };
                        layers.push(Layer::BasicBlock {
                            name: format!("cnn.layer{stage}.{b}"),
                            c_in,
                            c_out,
                            stride,
                        });
                        c_in = c_out;
                    }
                }
                CnnArchitecture {
                    preset,
                    layers,
                    output: (256, 8, 8),
                }
            }
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    name,
                    c_in,
                    c_out,
                    kernel,
                    bias,
                    ..
                } => conv_specs(&mut out, name, *c_in, *c_out, *kernel, *bias),
                Layer::BatchNorm { name, channels } => bn_specs(&mut out, name, *channels),
                Layer::Relu | Layer::MaxPool { .. } => {}
                Layer::BasicBlock {
                    name,
                    c_in,
                    c_out,
                    stride,
                } => {
                    conv_specs(&mut out, &format!("{name}.conv1"), *c_in, *c_out, 3, false);
                    bn_specs(&mut out, &format!("{name}.bn1"), *c_out);
                    conv_specs(&mut out, &format!("{name}.conv2"), *c_out, *c_out, 3, false);
                    bn_specs(&mut out, &format!("{name}.bn2"), *c_out);
                    if *stride != 1 || c_in != c_out {
                        conv_specs(&mut out, &format!("{name}.down"), *c_in, *c_out, 1, false);
                        bn_specs(&mut out, &format!("{name}.down_bn"), *c_out);
                    }
                }
            }
        }
        out
    }

    /// Multiply-accumulate count for one 64×64 patch.
    pub fn macs_per_patch(&self) -> u64 {
        let mut hw = (PATCH_SIZE, PATCH_SIZE);
        let mut macs = 0u64;
        let out_dim = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    hw = (
                        out_dim(hw.0, *kernel, *stride, *padding),
                        out_dim(hw.1, *kernel, *stride, *padding),
                    );
                    macs += (hw.0 * hw.1 * c_in * c_out * kernel * kernel) as u64;
                }
                Layer::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    hw = (
                        out_dim(hw.0, *kernel, *stride, *padding),
                        out_dim(hw.1, *kernel, *stride, *padding),
                    )
                }
                Layer::BasicBlock {
                    c_in,
                    c_out,
                    stride,
                    ..
                } => {
                    hw = (out_dim(hw.0, 3, *stride, 1), out_dim(hw.1, 3, *stride, 1));
                    let plane = (hw.0 * hw.1) as u64;
                    macs += plane * (*c_in * c_out * 9 + c_out * c_out * 9) as u64;
                    if *stride != 1 || c_in != c_out {
                        macs += plane * (*c_in * c_out) as u64;
                    }
                }
                Layer::BatchNorm { .. } | Layer::Relu => {}
            }
        }
        macs
    }
}

/// Walks bound parameter variables in declaration order.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

fn conv_bn<T: Real>(
    tape: &mut Tape<T>,
    cur: &mut Cursor,
    x: Var,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<Var, TensorError> {
    let w = cur.next();
    let y = tape.conv2d(x, w, None, stride, padding)?;
    let (g, b) = (cur.next(), cur.next());
    let y = tape.batch_norm(y, g, b)?;
    Ok(if relu { tape.relu(y) } else { y })
}

impl CnnArchitecture {
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        cur: &mut Cursor,
        mut x: Var,
    ) -> Result<Var, TensorError> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv {
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let w = cur.next();
                    let b = if *bias { Some(cur.next()) } else { None };
                    tape.conv2d(x, w, b, *stride, *padding)?
                }
                Layer::BatchNorm { .. } => {
                    let (g, b) = (cur.next(), cur.next());
                    tape.batch_norm(x, g, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.max_pool(x, *kernel, *stride, *padding)?,
                Layer::BasicBlock {
                    c_in,
                    c_out,
                    stride,
                    ..
                } => {
                    let y = conv_bn(tape, cur, x, *stride, 1, true)?;
                    let y = conv_bn(tape, cur, y, 1, 1, false)?;
                    let shortcut = if *stride != 1 || c_in != c_out {
                        conv_bn(tape, cur, x, *stride, 0, false)?
                    } else {
                        x
                    };
                    let s = tape.add(y, shortcut)?;
                    tape.relu(s)
                }
            };
        }
        Ok(x)
    }
}

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub preset: Preset,
    /// Pyramid levels N the MLP input was sized for.
    pub levels: usize,
    pub channels: usize,
    pub landmark: usize,
    pub landmark_name: Option<String>,
    pub stats: Option<LandmarkStats>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

/// CNN and MLP parameters plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub params: Vec<Param>,
}

/// An architecture paired with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: CnnArchitecture,
    pub params: ModelParams,
}

impl Model {
    /// Randomly initialised model: Kaiming-normal convolutions, orthogonal
    /// MLP weights, zero biases.
    pub fn new(preset: Preset, levels: usize, seed: u64) -> Self {
        let arch = CnnArchitecture::new(preset);
        let specs = Self::specs_for(&arch, levels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Kaiming { fan_in } => kaiming_normal(n, fan_in, &mut rng),
                    Init::Orthogonal => orthogonal_init(s.shape[0], s.shape[1], &mut rng),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    name: s.name,
                    value: Tensor::new(s.shape, data).expect("spec shape"),
                }
            })
            .collect();
        let meta = ModelMeta {
            preset,
            levels,
            channels: arch.output.0,
            landmark: 0,
            landmark_name: None,
            stats: None,
            config_hash: None,
        };
        Model {
            arch,
            params: ModelParams { meta, params },
        }
    }

    /// Rebuilds a model from loaded parameters, checking every name and shape.
    pub fn from_params(params: ModelParams) -> Result<Self, ModelError> {
        let arch = CnnArchitecture::new(params.meta.preset);
        let specs = Self::specs_for(&arch, params.meta.levels);
        if specs.len() != params.params.len() {
            return Err(ModelError::ParamShape {
                name: "<count>".into(),
                expected: vec![specs.len()],
                got: vec![params.params.len()],
            });
        }
        for (s, p) in specs.iter().zip(&params.params) {
            if s.name != p.name || s.shape != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    expected: s.shape.clone(),
                    got: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Model { arch, params })
    }

    pub fn specs_for(arch: &CnnArchitecture, levels: usize) -> Vec<ParamSpec> {
        let mut specs = arch.param_specs();
        let widths = [levels * 3 * arch.output.0, MLP_HIDDEN[0], MLP_HIDDEN[1], 2];
        for l in 0..3 {
            specs.push(ParamSpec {
                name: format!("mlp.{l}.weight"),
                shape: vec![widths[l + 1], widths[l]],
                init: Init::Orthogonal,
            });
            specs.push(ParamSpec {
                name: format!("mlp.{l}.bias"),
                shape: vec![widths[l + 1]],
                init: Init::Zeros,
            });
        }
        specs
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.params.meta
    }

    pub fn levels(&self) -> usize {
        self.params.meta.levels
    }

    /// MLP input width `N·3·C`.
    pub fn feature_width(&self) -> usize {
        self.levels() * 3 * self.arch.output.0
    }

    pub fn num_cnn_params(&self) -> usize {
        self.params.params.len() - 6
    }

    pub fn tensors(&self) -> Vec<Tensor<f32>> {
        self.params.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor<f32>>) {
        assert_eq!(tensors.len(), self.params.params.len());
        for (p, t) in self.params.params.iter_mut().zip(tensors) {
            assert_eq!(p.value.shape(), t.shape());
            p.value = t;
        }
    }

    /// Sets every MLP weight and bias to zero, making the predicted offset 0.
    pub fn zero_mlp(&mut self) {
        let n = self.num_cnn_params();
        for p in &mut self.params.params[n..] {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Records every parameter as a leaf, in declaration order.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .params
            .iter()
            .map(|p| tape.leaf(p.value.cast(), trainable))
            .collect()
    }

    /// `[B,1,64,64]` patches to `[B,C,H,W]` activations.
    pub fn cnn_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(patches);
        if s.len() != 4 || s[1] != 1 || s[2] != PATCH_SIZE || s[3] != PATCH_SIZE {
            return Err(ModelError::PatchShape(s.to_vec()));
        }
        let mut cur = Cursor { vars, pos: 0 };
        Ok(self.arch.forward(tape, &mut cur, patches)?)
    }

    /// `[B, N·3·C]` (or `[N·3·C]`) features to `[B,2]` (or `[2]`) offsets.
    pub fn mlp_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: Var,
    ) -> Result<Var, ModelError> {
        let width = *tape.shape(features).last().unwrap_or(&0);
        if width != self.feature_width() {
            return Err(ModelError::FeatureWidth {
                expected: self.feature_width(),
                got: width,
            });
        }
        let base = self.num_cnn_params();
        let mut x = features;
        for l in 0..3 {
            x = tape.linear(x, vars[base + 2 * l], vars[base + 2 * l + 1])?;
            if l < 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Patches of `B` glimpses (`[B·N,1,64,64]`, glimpse-major) to `[B,2]`
    /// offsets in the glimpse frame.
    pub fn forward_glimpses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        glimpses: usize,
    ) -> Result<Var, ModelError> {
        let a = self.cnn_forward(tape, vars, patches)?;
        let f = tape.spatialize(a)?;
        let s = tape.reshape(f, &[glimpses, self.feature_width()])?;
        self.mlp_forward(tape, vars, s)
    }
}
