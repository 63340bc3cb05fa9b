//! The backbone network: a frozen prefix `g_s`, a trainable feature
//! suffix `g_l`, and a classifier head `h_c`, all drawing parameters from
//! a single named store.
//!
//! Both training branches (reference cross-entropy and target
//! compactness) run the same `Model`, so weight tying is structural:
//! there is no second copy of the parameters to drift out of sync. The
//! feature used for template matching is the activation at the end of
//! `g_l`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{Fnv1a, Kind, Reader, Writer};
use crate::tensor::{no_grad, Tensor};

/// One layer of the backbone. Convolution and dense layers carry explicit
/// input sizes so a broken chain is a validation error, not a surprise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Image { c: usize, h: usize, w: usize },
    Vector { d: usize },
}

/// Architecture plus the two split points: layers `[0, frozen_layers)`
/// form the frozen prefix `g_s`, layers `[0, feature_layers)` produce the
/// template feature, and the rest is the classifier head `h_c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub frozen_layers: usize,
    pub feature_layers: usize,
}

impl ModelSpec {
    /// The default desk-scale backbone for `c×h×w` inputs:
    /// a frozen conv stem, two trainable conv+pool blocks, a hidden
    /// fully-connected feature layer of width 64, and a classifier head.
    /// Five parameterized layers in total; the last four train.
    pub fn desk_default(input: (usize, usize, usize), classes: usize) -> ModelSpec {
        let (c, _, _) = input;
        let mut layers = vec![
            LayerSpec::Conv {
                in_channels: c,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
        ];
        let mut flow = Flow::Image {
            c: input.0,
            h: input.1,
            w: input.2,
        };
        for layer in &layers {
            flow = propagate(flow, layer).expect("desk backbone chains by construction");
        }
        let flat = match flow {
            Flow::Vector { d } => d,
            Flow::Image { .. } => unreachable!("flatten produces a vector"),
        };
        layers.push(LayerSpec::Dense {
            in_features: flat,
            out_features: 64,
        });
        layers.push(LayerSpec::Relu);
        let feature_layers = layers.len();
        layers.push(LayerSpec::Dense {
            in_features: 64,
            out_features: classes,
        });
        ModelSpec {
            input,
            layers,
            frozen_layers: 3,
            feature_layers,
        }
    }

    /// Walk the layer chain, checking every junction. Returns the flow
    /// shape after each layer.
    fn validate(&self) -> Result<Vec<Flow>> {
        if self.frozen_layers > self.feature_layers || self.feature_layers > self.layers.len() {
            return Err(Error::Invalid(format!(
                "split points {}/{} out of order for {} layers",
                self.frozen_layers,
                self.feature_layers,
                self.layers.len()
            )));
        }
        let has_conv = self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. }));
        let has_dense = self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dense { .. }));
        if !has_conv || !has_dense {
            return Err(Error::Invalid(
                "backbone needs at least one conv and one fully-connected layer".into(),
            ));
        }
        let mut flow = Flow::Image {
            c: self.input.0,
            h: self.input.1,
            w: self.input.2,
        };
        let mut flows = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            flow = propagate(flow, layer)
                .map_err(|e| Error::Invalid(format!("layer {i}: {e}")))?;
            flows.push(flow);
        }
        match flows[self.feature_layers - 1] {
            Flow::Vector { .. } => {}
            Flow::Image { .. } => {
                return Err(Error::Invalid(
                    "feature split must sit after a flatten or dense layer".into(),
                ))
            }
        }
        match flows[self.layers.len() - 1] {
            Flow::Vector { .. } => Ok(flows),
            Flow::Image { .. } => Err(Error::Invalid(
                "backbone must end in logits, not an image".into(),
            )),
        }
    }

    /// Width of the template feature `g(x)`.
    pub fn feature_dim(&self) -> Result<usize> {
        let flows = self.validate()?;
        match flows[self.feature_layers - 1] {
            Flow::Vector { d } => Ok(d),
            Flow::Image { .. } => unreachable!("validate checked the feature split"),
        }
    }

    /// Number of output classes of the head.
    pub fn class_count(&self) -> Result<usize> {
        let flows = self.validate()?;
        match flows[self.layers.len() - 1] {
            Flow::Vector { d } => Ok(d),
            Flow::Image { .. } => unreachable!("validate checked the head"),
        }
    }

    /// Parameter name for layer `i`, if it has parameters: conv layers are
    /// `conv1, conv2, …` and dense layers `fc1, fc2, …` in network order.
    fn param_names(&self) -> Vec<Option<String>> {
        let (mut conv, mut fc) = (0, 0);
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => {
                    conv += 1;
                    Some(format!("conv{conv}"))
                }
                LayerSpec::Dense { .. } => {
                    fc += 1;
                    Some(format!("fc{fc}"))
                }
                _ => None,
            })
            .collect()
    }
}

fn propagate(flow: Flow, layer: &LayerSpec) -> std::result::Result<Flow, String> {
    match (flow, layer) {
        (
            Flow::Image { c, h, w },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
        ) => {
            if *in_channels != c {
                return Err(format!("conv expects {in_channels} channels, chain has {c}"));
            }
            if *kernel == 0 || *stride == 0 {
                return Err("conv kernel and stride must be positive".into());
            }
            if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                return Err(format!("conv kernel {kernel} larger than padded {h}x{w}"));
            }
            Ok(Flow::Image {
                c: *out_channels,
                h: (h + 2 * padding - kernel) / stride + 1,
                w: (w + 2 * padding - kernel) / stride + 1,
            })
        }
        (f @ Flow::Image { .. }, LayerSpec::Relu) => Ok(f),
        (f @ Flow::Vector { .. }, LayerSpec::Relu) => Ok(f),
        (Flow::Image { c, h, w }, LayerSpec::MaxPool { size, stride }) => {
            if *size == 0 || *stride == 0 {
                return Err("pool size and stride must be positive".into());
            }
            if *size > h || *size > w {
                return Err(format!("pool window {size} larger than {h}x{w}"));
            }
            Ok(Flow::Image {
                c,
                h: (h - size) / stride + 1,
                w: (w - size) / stride + 1,
            })
        }
        (Flow::Image { c, h, w }, LayerSpec::Flatten) => Ok(Flow::Vector { d: c * h * w }),
        (
            Flow::Vector { d },
            LayerSpec::Dense {
                in_features,
                out_features,
            },
        ) => {
            if *in_features != d {
                return Err(format!("dense expects {in_features} inputs, chain has {d}"));
            }
            Ok(Flow::Vector { d: *out_features })
        }
        (Flow::Vector { .. }, l) => Err(format!("{l:?} cannot follow a vector")),
        (Flow::Image { .. }, l) => Err(format!("{l:?} cannot follow an image")),
    }
}

/// Training metadata embedded in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iterations: u64,
    pub lambda: f64,
    /// Fully resolved run configuration, echoed verbatim so the artifact
    /// can be regenerated from itself.
    pub config: String,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            seed: 0,
            iterations: 0,
            lambda: 0.0,
            config: String::new(),
        }
    }
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Build with seeded He-style fan-in initialization: weights uniform
    /// in ±sqrt(6/fan_in), biases zero. Deterministic per seed.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = spec.param_names();
        let mut params = BTreeMap::new();
        for (layer, name) in spec.layers.iter().zip(names) {
            let Some(name) = name else { continue };
            let (w_shape, fan_in, bias_len) = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * kernel * kernel,
                    *out_channels,
                ),
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => (
                    vec![*in_features, *out_features],
                    *in_features,
                    *out_features,
                ),
                _ => unreachable!("param_names only names conv/dense layers"),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(format!("{name}.weight"), Tensor::tracked(weights, &w_shape)?);
            params.insert(
                format!("{name}.bias"),
                Tensor::tracked(vec![0.0; bias_len], &[bias_len])?,
            );
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim().expect("validated at build")
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count().expect("validated at build")
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Replace one parameter; the new tensor must match the old shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self
            .params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if old.shape() != value.shape() {
            return Err(Error::Invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                old.shape(),
                value.shape()
            )));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Names of parameters outside the frozen prefix, in deterministic order.
    pub fn trainable_param_names(&self) -> Vec<String> {
        let names = self.spec.param_names();
        let mut out = Vec::new();
        for (i, name) in names.iter().enumerate() {
            if i < self.spec.frozen_layers {
                continue;
            }
            if let Some(name) = name {
                out.push(format!("{name}.weight"));
                out.push(format!("{name}.bias"));
            }
        }
        out.sort();
        out
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Invalid(format!(
                "input shape {s:?} does not match model input {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Run layers `[0, upto)`. With `freeze_prefix`, the frozen prefix runs
    /// off the tape so its parameters never receive gradients.
    fn forward_upto(&self, x: &Tensor, upto: usize, freeze_prefix: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let names = self.spec.param_names();
        let split = if freeze_prefix {
            self.spec.frozen_layers.min(upto)
        } else {
            0
        };
        let run = |from: usize, to: usize, mut value: Tensor| -> Result<Tensor> {
            for i in from..to {
                value = match &self.spec.layers[i] {
                    LayerSpec::Conv {
                        stride, padding, ..
                    } => {
                        let name = names[i].as_ref().expect("conv has params");
                        let w = &self.params[&format!("{name}.weight")];
                        let b = &self.params[&format!("{name}.bias")];
                        value.conv2d(w, *stride, *padding)?.add_bias(b)?
                    }
                    LayerSpec::Relu => value.relu(),
                    LayerSpec::MaxPool { size, stride } => value.maxpool2d(*size, *stride)?,
                    LayerSpec::Flatten => value.flatten()?,
                    LayerSpec::Dense { .. } => {
                        let name = names[i].as_ref().expect("dense has params");
                        let w = &self.params[&format!("{name}.weight")];
                        let b = &self.params[&format!("{name}.bias")];
                        value.matmul(w)?.add_bias(b)?
                    }
                };
            }
            Ok(value)
        };
        let mid = if split > 0 {
            no_grad(|| run(0, split, x.clone()))?
        } else {
            x.clone()
        };
        run(split, upto, mid)
    }

    /// Template feature `g(x) = g_l(g_s(x))`: activation at the end of the
    /// feature suffix, shape `[n×k]`. No head applied.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_upto(x, self.spec.feature_layers, true)
    }

    /// Unnormalized logits `h_c(g(x))` over the reference classes.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_upto(x, self.spec.layers.len(), true)
    }

    /// Logits with the frozen prefix on the tape too; pretraining updates
    /// the whole network.
    pub fn forward_logits_unfrozen(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_upto(x, self.spec.layers.len(), false)
    }

    /// FNV-1a over every parameter's name, shape and value bits.
    pub fn param_hash(&self) -> u64 {
        hash_params(self.params.iter())
    }

    /// Hash of the frozen prefix only; must not change across training.
    pub fn frozen_param_hash(&self) -> u64 {
        let names = self.spec.param_names();
        let frozen: Vec<&String> = names[..self.spec.frozen_layers]
            .iter()
            .flatten()
            .collect();
        hash_params(self.params.iter().filter(|(k, _)| {
            frozen
                .iter()
                .any(|n| k.as_str().starts_with(&format!("{n}.")))
        }))
    }

    // ---- persistence ------------------------------------------------------

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let mut w = Writer::new(Kind::Checkpoint);
        w.u32(self.spec.input.0 as u32);
        w.u32(self.spec.input.1 as u32);
        w.u32(self.spec.input.2 as u32);
        w.u32(self.spec.frozen_layers as u32);
        w.u32(self.spec.feature_layers as u32);
        w.u32(self.spec.layers.len() as u32);
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    w.u8(1);
                    for v in [in_channels, out_channels, kernel, stride, padding] {
                        w.u32(*v as u32);
                    }
                }
                LayerSpec::Relu => w.u8(2),
                LayerSpec::MaxPool { size, stride } => {
                    w.u8(3);
                    w.u32(*size as u32);
                    w.u32(*stride as u32);
                }
                LayerSpec::Flatten => w.u8(4),
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    w.u8(5);
                    w.u32(*in_features as u32);
                    w.u32(*out_features as u32);
                }
            }
        }
        w.u64(meta.seed);
        w.u64(meta.iterations);
        w.f64(meta.lambda);
        w.str(&meta.config);
        w.u32(self.params.len() as u32);
        for (name, tensor) in &self.params {
            w.str(name);
            w.tensor(tensor.shape(), tensor.data());
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
        let mut r = Reader::open(bytes, Kind::Checkpoint)?;
        let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let frozen_layers = r.u32()? as usize;
        let feature_layers = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(match r.u8()? {
                1 => LayerSpec::Conv {
                    in_channels: r.u32()? as usize,
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                    padding: r.u32()? as usize,
                },
                2 => LayerSpec::Relu,
                3 => LayerSpec::MaxPool {
                    size: r.u32()? as usize,
                    stride: r.u32()? as usize,
                },
                4 => LayerSpec::Flatten,
                5 => LayerSpec::Dense {
                    in_features: r.u32()? as usize,
                    out_features: r.u32()? as usize,
                },
                t => return Err(Error::Corrupt(format!("unknown layer tag {t}"))),
            });
        }
        let spec = ModelSpec {
            input,
            layers,
            frozen_layers,
            feature_layers,
        };
        spec.validate()?;
        let meta = CheckpointMeta {
            seed: r.u64()?,
            iterations: r.u64()?,
            lambda: r.f64()?,
            config: r.str()?,
        };
        let n_params = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let (shape, data) = r.tensor_parts()?;
            params.insert(name, Tensor::tracked(data, &shape)?);
        }
        r.expect_end()?;

        // the stored parameters must match what the layer table implies
        let reference = Model::build(spec.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Corrupt(format!(
                "layer table implies {} parameters, file has {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(stored) if stored.shape() == t.shape() => {}
                Some(stored) => {
                    return Err(Error::Corrupt(format!(
                        "parameter {name} has shape {:?}, layer table implies {:?}",
                        stored.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Corrupt(format!("missing parameter {name}"))),
            }
        }
        Ok((Model { spec, params }, meta))
    }
}

fn hash_params<'a>(params: impl Iterator<Item = (&'a String, &'a Tensor)>) -> u64 {
    let mut h = Fnv1a::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(&v.to_bits().to_le_bytes());
        }
    }
    h.finish()
}
