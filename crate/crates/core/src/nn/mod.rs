//! Minimal dense neural stack with reverse-mode gradients, tailored to the
//! fixed detector/descriptor pipeline graph.

pub mod checkpoint;
pub mod gradcheck;
pub mod sgd;
pub mod tape;
pub mod tensor;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use tensor::Tensor2;

/// Per-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// One dense layer: `y = act(x . weight + bias)`, weight is `in x out`,
/// bias is `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T: Real> {
    pub weight: Tensor2<T>,
    pub bias: Tensor2<T>,
    pub activation: Activation,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weight: Tensor2::zeros(input, output),
            bias: Tensor2::zeros(1, output),
            activation,
        }
    }

    /// He-style uniform init scaled by fan-in; biases start at zero.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let mut weight = Tensor2::zeros(input, output);
        for v in weight.data_mut() {
            *v = T::cast(rng.gen_range(-bound..bound));
        }
        DenseLayer {
            weight,
            bias: Tensor2::zeros(1, output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }
}

/// A shared (pointwise) MLP applied independently to each row of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> Mlp<T> {
    /// `widths` = `[input, h1, ..., output]`; ReLU between hidden layers,
    /// linear output.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("MLP needs at least input and output widths".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let act = if i + 2 == widths.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::init(widths[i], widths[i + 1], act, rng));
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_width())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_width())
    }

    /// Plain forward pass over rows (no gradient recording).
    pub fn forward(&self, rows: &Tensor2<T>) -> Result<Tensor2<T>> {
        if rows.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "MLP input width {} does not match first layer {}",
                rows.cols(),
                self.input_width()
            )));
        }
        let mut x = rows.clone();
        for layer in &self.layers {
            let bias_rows = layer.bias.data().repeat(x.rows());
            let mut y = Tensor2::from_vec(x.rows(), layer.output_width(), bias_rows)?;
            T::gemm(
                x.rows(),
                x.cols(),
                layer.output_width(),
                T::one(),
                x.data(),
                layer.weight.data(),
                T::one(),
                y.data_mut(),
            );
            if layer.activation == Activation::Relu {
                for v in y.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            x = y;
        }
        Ok(x)
    }
}

/// Which readout turns the detector feature map into per-neighbor scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionHead {
    /// max over the feature channels of each row (the default reading)
    ChannelMax,
    /// learned 1-wide linear head
    Linear,
}

/// Architecture hyperparameters. All widths are configurable; the defaults
/// are the desk-scale values the rest of the library is tuned for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// extra per-point channels of the input cloud (normals + curvature)
    pub input_channels: usize,
    /// attentive feature width C_a
    pub feature_width: usize,
    /// descriptor global feature width C_f
    pub global_width: usize,
    /// descriptor dimension d
    pub descriptor_dim: usize,
    /// hidden widths of the detector shared MLP (output width is C_a)
    pub detector_hidden: Vec<usize>,
    /// hidden widths of the saliency head (output width is 1)
    pub saliency_hidden: Vec<usize>,
    /// hidden widths of the descriptor point MLP (output width is C_f)
    pub descriptor_point_hidden: Vec<usize>,
    /// hidden widths of the descriptor fuse MLP (output width is d)
    pub descriptor_fuse_hidden: Vec<usize>,
    pub attention_head: AttentionHead,
    /// feed the attentive feature map into the descriptor (ablation toggle)
    pub use_attentive_map: bool,
    /// L2-normalize descriptors (off by default; matching uses raw distances)
    pub l2_normalize: bool,
    /// gain on the descriptor output; keeps initial pairwise squared
    /// distances near 1 so the inverse-distance matching scores start in the
    /// temperature's responsive range
    pub descriptor_output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_channels: 4,
            feature_width: 64,
            global_width: 64,
            descriptor_dim: 128,
            detector_hidden: vec![64, 64],
            saliency_hidden: vec![64],
            descriptor_point_hidden: vec![64],
            descriptor_fuse_hidden: vec![128],
            attention_head: AttentionHead::ChannelMax,
            use_attentive_map: true,
            l2_normalize: false,
            descriptor_output_scale: 0.2,
        }
    }
}

impl NetConfig {
    pub fn cluster_feature_width(&self) -> usize {
        4 + self.input_channels
    }

    pub fn fuse_input_width(&self) -> usize {
        // [point feature | duplicated global | attentive row]
        self.global_width * 2 + self.feature_width
    }

    fn widths(&self, input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }
}

/// All learnable parameters of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T: Real> {
    pub config: NetConfig,
    /// shared MLP producing the K x C_a detector feature map
    pub detector_mlp: Mlp<T>,
    /// optional learned attention head (when `attention_head = linear`)
    pub attention_linear: Option<DenseLayer<T>>,
    /// saliency head on the summed global feature
    pub saliency_mlp: Mlp<T>,
    /// descriptor per-point MLP
    pub descriptor_point_mlp: Mlp<T>,
    /// descriptor fuse MLP after concatenation
    pub descriptor_fuse_mlp: Mlp<T>,
}

impl<T: Real> NetParams<T> {
    /// Deterministic seeded initialization; identical `(config, seed)` always
    /// produces identical parameters.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = config.cluster_feature_width();
        let detector_mlp = Mlp::init(
            &config.widths(c_in, &config.detector_hidden, config.feature_width),
            &mut rng,
        )?;
        let attention_linear = match config.attention_head {
            AttentionHead::ChannelMax => None,
            AttentionHead::Linear => Some(DenseLayer::init(
                config.feature_width,
                1,
                Activation::Linear,
                &mut rng,
            )),
        };
        let saliency_mlp = Mlp::init(
            &config.widths(config.feature_width, &config.saliency_hidden, 1),
            &mut rng,
        )?;
        let descriptor_point_mlp = Mlp::init(
            &config.widths(c_in, &config.descriptor_point_hidden, config.global_width),
            &mut rng,
        )?;
        let descriptor_fuse_mlp = Mlp::init(
            &config.widths(
                config.fuse_input_width(),
                &config.descriptor_fuse_hidden,
                config.descriptor_dim,
            ),
            &mut rng,
        )?;
        Ok(NetParams {
            config: config.clone(),
            detector_mlp,
            attention_linear,
            saliency_mlp,
            descriptor_point_mlp,
            descriptor_fuse_mlp,
        })
    }

    /// Canonical flat view of every parameter tensor. The order is the
    /// contract used by gradients, the optimizer and the checkpoint format.
    pub fn param_tensors(&self) -> Vec<&Tensor2<T>> {
        fn push_mlp<'a, T: Real>(mlp: &'a Mlp<T>, out: &mut Vec<&'a Tensor2<T>>) {
            for layer in &mlp.layers {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        let mut out = Vec::new();
        push_mlp(&self.detector_mlp, &mut out);
        if let Some(att) = &self.attention_linear {
            out.push(&att.weight);
            out.push(&att.bias);
        }
        push_mlp(&self.saliency_mlp, &mut out);
        push_mlp(&self.descriptor_point_mlp, &mut out);
        push_mlp(&self.descriptor_fuse_mlp, &mut out);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut out: Vec<&mut Tensor2<T>> = Vec::new();
        for layer in &mut self.detector_mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        if let Some(att) = &mut self.attention_linear {
            out.push(&mut att.weight);
            out.push(&mut att.bias);
        }
        for layer in &mut self.saliency_mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for layer in &mut self.descriptor_point_mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for layer in &mut self.descriptor_fuse_mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Owned clones of every parameter tensor in canonical order (the tape
    /// environment for graph building).
    pub fn param_env(&self) -> Vec<Tensor2<T>> {
        self.param_tensors().into_iter().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Total number of parameter tensors (gradient slots).
    pub fn tensor_count(&self) -> usize {
        self.param_tensors().len()
    }

    /// Converts every parameter to another scalar type (used to widen f32
    /// checkpoints into f64 reference runs).
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let cast_mlp = |mlp: &Mlp<T>| Mlp {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: cast_tensor::<T, U>(&l.weight),
                    bias: cast_tensor::<T, U>(&l.bias),
                    activation: l.activation,
                })
                .collect(),
        };
        NetParams {
            config: self.config.clone(),
            detector_mlp: cast_mlp(&self.detector_mlp),
            attention_linear: self.attention_linear.as_ref().map(|l| DenseLayer {
                weight: cast_tensor::<T, U>(&l.weight),
                bias: cast_tensor::<T, U>(&l.bias),
                activation: l.activation,
            }),
            saliency_mlp: cast_mlp(&self.saliency_mlp),
            descriptor_point_mlp: cast_mlp(&self.descriptor_point_mlp),
            descriptor_fuse_mlp: cast_mlp(&self.descriptor_fuse_mlp),
        }
    }
}

/// Weight/bias environment slots plus activation for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerSlots {
    pub weight: usize,
    pub bias: usize,
    pub activation: Activation,
}

/// Maps the logical network blocks onto the canonical flat parameter order
/// of [`NetParams::param_tensors`]. Graph builders use these slot indices to
/// reference shared weights on a tape without cloning them.
#[derive(Clone, Debug)]
pub struct ParamSlots {
    pub detector: Vec<LayerSlots>,
    pub attention: Option<LayerSlots>,
    pub saliency: Vec<LayerSlots>,
    pub descriptor_point: Vec<LayerSlots>,
    pub descriptor_fuse: Vec<LayerSlots>,
}

impl ParamSlots {
    pub fn of(config: &NetConfig) -> ParamSlots {
        fn block(next: &mut usize, n_layers: usize) -> Vec<LayerSlots> {
            (0..n_layers)
                .map(|i| {
                    let s = LayerSlots {
                        weight: *next,
                        bias: *next + 1,
                        activation: if i + 1 == n_layers {
                            Activation::Linear
                        } else {
                            Activation::Relu
                        },
                    };
                    *next += 2;
                    s
                })
                .collect()
        }
        let mut next = 0usize;
        let detector = block(&mut next, config.detector_hidden.len() + 1);
        let attention = match config.attention_head {
            AttentionHead::ChannelMax => None,
            AttentionHead::Linear => {
                let s = LayerSlots {
                    weight: next,
                    bias: next + 1,
                    activation: Activation::Linear,
                };
                next += 2;
                Some(s)
            }
        };
        let saliency = block(&mut next, config.saliency_hidden.len() + 1);
        let descriptor_point = block(&mut next, config.descriptor_point_hidden.len() + 1);
        let descriptor_fuse = block(&mut next, config.descriptor_fuse_hidden.len() + 1);
        ParamSlots {
            detector,
            attention,
            saliency,
            descriptor_point,
            descriptor_fuse,
        }
    }

    pub fn slot_count(&self) -> usize {
        let per = |v: &[LayerSlots]| v.len() * 2;
        per(&self.detector)
            + self.attention.map_or(0, |_| 2)
            + per(&self.saliency)
            + per(&self.descriptor_point)
            + per(&self.descriptor_fuse)
    }
}

fn cast_tensor<T: Real, U: Real>(t: &Tensor2<T>) -> Tensor2<U> {
    Tensor2::from_vec(
        t.rows(),
        t.cols(),
        t.data().iter().map(|&v| U::cast(v.as_f64())).collect(),
    )
    .expect("shape preserved")
}

/// Per-tensor gradients, aligned with [`NetParams::param_tensors`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    pub tensors: Vec<Tensor2<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetParams<T>) -> Self {
        Gradients {
            tensors: params
                .param_tensors()
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        assert_eq!(self.tensors.len(), other.tensors.len(), "gradient slot count");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .iter()
            .fold(T::zero(), |m, t| {
                let v = t.max_abs();
                if v > m {
                    v
                } else {
                    m
                }
            })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
