//! Layers, the LeNet variant the experiments use, cross-entropy, and the
//! dropout layer that constitutes the defense.
//!
//! The model geometry follows the reference gradient-leakage setup: three
//! 5×5 sigmoid conv layers (12 channels, strides 2/2/1, pad 2), an optional
//! dropout layer between the encoder and the classifier, then a single
//! linear head. Weights are drawn uniformly in [−0.5, 0.5].

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, conv2d, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Sigmoid,
    Dropout {
        rate: f64,
    },
    Flatten,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

/// Binary keep/drop mask for one dropout application. Entries are exactly
/// 0.0 or 1.0; the 1/(1−p) scaling is applied at use, not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub mask: Tensor,
    pub rate: f64,
}

impl DropoutMask {
    /// Each entry independently kept with probability 1−rate.
    pub fn sample(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
            .collect();
        DropoutMask {
            mask: Tensor::new(shape.to_vec(), data).unwrap(),
            rate,
        }
    }
}

/// How the dropout mask is chosen during a forward pass.
pub enum MaskPolicy<'a> {
    /// Inverted-dropout eval mode: dropout is the identity.
    Expected,
    /// Use a caller-supplied mask.
    Fixed(&'a DropoutMask),
    /// Draw a fresh mask from the given stream.
    Resample(&'a mut ChaCha8Rng),
}

/// Named parameter gradients, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Parameter leaves of this pass, in registry order, for backward targets.
    pub param_vars: Vec<(String, Var)>,
    /// The mask actually applied, when a dropout layer sampled one.
    pub mask_used: Option<DropoutMask>,
}

/// Ordered layers plus a named parameter registry. Immutable after
/// construction except through `set_param`/`apply_param_step`.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    params: Vec<(String, Tensor)>,
    pub dropout_rate: f64,
    /// (channels, height, width) of a single input image.
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

/// The reference LeNet variant on 32×32 RGB input.
pub fn build_lenet(num_classes: usize, dropout_rate: f64, seed: u64) -> Result<Model> {
    build_lenet_for_input(num_classes, dropout_rate, seed, (3, 32, 32))
}

/// Weight initialization scheme. The reference attack setting draws every
/// weight uniformly in [−0.5, 0.5]; that saturates the sigmoids badly
/// enough that gradient-descent training stalls at the uniform-prediction
/// plateau, so the training loop uses a fan-in-scaled uniform instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Uniform [−limit, limit] for every parameter.
    Uniform { limit: f64 },
    /// Uniform [−1/√fan_in, 1/√fan_in] per layer (LeCun-style).
    ScaledUniform,
}

/// Same architecture on an arbitrary input geometry (micro-models for tests
/// and desk-scale runs).
pub fn build_lenet_for_input(
    num_classes: usize,
    dropout_rate: f64,
    seed: u64,
    input_shape: (usize, usize, usize),
) -> Result<Model> {
    build_lenet_with_init(
        num_classes,
        dropout_rate,
        seed,
        input_shape,
        WeightInit::Uniform { limit: 0.5 },
    )
}

pub fn build_lenet_with_init(
    num_classes: usize,
    dropout_rate: f64,
    seed: u64,
    input_shape: (usize, usize, usize),
    init: WeightInit,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {dropout_rate}"
        )));
    }
    let (c, h, w) = input_shape;
    let conv = |name: &str, in_c: usize, stride: usize| Layer::Conv2d {
        name: name.to_string(),
        in_channels: in_c,
        out_channels: 12,
        kernel: 5,
        stride,
        pad: 2,
    };
    let out_dim = |d: usize, stride: usize| (d + 2 * 2 - 5) / stride + 1;
    let (h1, w1) = (out_dim(h, 2), out_dim(w, 2));
    let (h2, w2) = (out_dim(h1, 2), out_dim(w1, 2));
    let (h3, w3) = (out_dim(h2, 1), out_dim(w2, 1));
    let flat = 12 * h3 * w3;

    let mut layers = vec![
        conv("conv1", c, 2),
        Layer::Sigmoid,
        conv("conv2", 12, 2),
        Layer::Sigmoid,
        conv("conv3", 12, 1),
        Layer::Sigmoid,
    ];
    if dropout_rate > 0.0 {
        layers.push(Layer::Dropout { rate: dropout_rate });
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear {
        name: "fc".to_string(),
        in_features: flat,
        out_features: num_classes,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize], fan_in: usize| {
        let limit = match init {
            WeightInit::Uniform { limit } => limit,
            WeightInit::ScaledUniform => 1.0 / (fan_in as f64).sqrt(),
        };
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
        )
        .unwrap()
    };
    let mut params = Vec::new();
    for layer in &layers {
        match layer {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                params.push((
                    format!("{name}.weight"),
                    draw(&[*out_channels, *in_channels, *kernel, *kernel], fan_in),
                ));
                params.push((format!("{name}.bias"), draw(&[*out_channels], fan_in)));
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
            } => {
                params.push((
                    format!("{name}.weight"),
                    draw(&[*out_features, *in_features], *in_features),
                ));
                params.push((format!("{name}.bias"), draw(&[*out_features], *in_features)));
            }
            _ => {}
        }
    }

    Ok(Model {
        layers,
        params,
        dropout_rate,
        input_shape,
        num_classes,
    })
}

impl Model {
    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { .. }))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    /// Shape of the activation entering the dropout layer (batch size `n`),
    /// or None when the model has no dropout.
    pub fn dropout_input_shape(&self, n: usize) -> Option<Vec<usize>> {
        if !self.has_dropout() {
            return None;
        }
        let (c, h, w) = self.input_shape;
        let mut shape = vec![n, c, h, w];
        for layer in &self.layers {
            match layer {
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    shape[1] = *out_channels;
                    shape[2] = (shape[2] + 2 * pad - kernel) / stride + 1;
                    shape[3] = (shape[3] + 2 * pad - kernel) / stride + 1;
                }
                Layer::Dropout { .. } => return Some(shape),
                _ => {}
            }
        }
        None
    }

    /// Run only the conv/sigmoid encoder stack (everything before the
    /// dropout/flatten boundary).
    pub fn encoder_forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv2d {
                    name, stride, pad, ..
                } => {
                    let w = tape.leaf(self.param(&format!("{name}.weight")).unwrap().clone());
                    let b = tape.leaf(self.param(&format!("{name}.bias")).unwrap().clone());
                    conv2d(&cur, &w, &b, *stride, *pad)?
                }
                Layer::Sigmoid => cur.sigmoid()?,
                _ => break,
            };
        }
        Ok(cur)
    }

    /// Run the model on `x` (shape [n, c, h, w]) recording onto `tape`.
    pub fn forward(&self, tape: &Tape, x: &Var, mut policy: MaskPolicy) -> Result<ForwardOutput> {
        let xs = x.shape();
        let (c, h, w) = self.input_shape;
        if xs.len() != 4 || xs[1] != c || xs[2] != h || xs[3] != w {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: xs,
                rhs: vec![0, c, h, w],
            });
        }
        if let MaskPolicy::Fixed(m) = &policy {
            if !self.has_dropout() {
                return Err(Error::InvalidArgument(
                    "fixed dropout mask given to a model with no dropout layer".into(),
                ));
            }
            let expect = self.dropout_input_shape(xs[0]).unwrap();
            if m.mask.shape() != expect {
                return Err(Error::ShapeMismatch {
                    op: "dropout_mask",
                    lhs: m.mask.shape().to_vec(),
                    rhs: expect,
                });
            }
        }

        let param_vars: Vec<(String, Var)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect();
        let lookup = |name: &str| -> &Var {
            &param_vars
                .iter()
                .find(|(n, _)| n == name)
                .expect("registered parameter")
                .1
        };

        let mut cur = x.clone();
        let mut mask_used = None;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv2d {
                    name, stride, pad, ..
                } => conv2d(
                    &cur,
                    lookup(&format!("{name}.weight")),
                    lookup(&format!("{name}.bias")),
                    *stride,
                    *pad,
                )?,
                Layer::Sigmoid => cur.sigmoid()?,
                Layer::Dropout { rate } => match &mut policy {
                    MaskPolicy::Expected => cur,
                    MaskPolicy::Fixed(m) => apply_dropout(tape, &cur, m)?,
                    MaskPolicy::Resample(rng) => {
                        let m = DropoutMask::sample(&cur.shape(), *rate, rng);
                        let out = apply_dropout(tape, &cur, &m)?;
                        mask_used = Some(m);
                        out
                    }
                },
                Layer::Flatten => {
                    let n = cur.shape()[0];
                    let rest = cur.value().numel() / n;
                    cur.reshape(&[n, rest])?
                }
                Layer::Linear { name, .. } => {
                    let w = lookup(&format!("{name}.weight"));
                    let b = lookup(&format!("{name}.bias"));
                    cur.matmul(w, false, true)?.add(b)?
                }
            };
        }
        if let MaskPolicy::Fixed(m) = policy {
            mask_used = Some(m.clone());
        }
        Ok(ForwardOutput {
            logits: cur,
            param_vars,
            mask_used,
        })
    }
}

fn apply_dropout(tape: &Tape, x: &Var, mask: &DropoutMask) -> Result<Var> {
    let m = tape.leaf(mask.mask.clone());
    x.mul(&m)?.scale(1.0 / (1.0 - mask.rate))
}

/// −log softmax(logits)[label], stable via log-sum-exp. Logits shape [1, C]
/// or [C]. The gradient w.r.t. logits is softmax(logits) − onehot(label).
pub fn cross_entropy(logits: &Var, label: usize) -> Result<Var> {
    let shape = logits.shape();
    let classes = *shape.last().ok_or(Error::NotScalar(shape.clone()))?;
    let rows: usize = shape.iter().product::<usize>() / classes;
    if rows != 1 {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy expects a single row of logits, got shape {shape:?}"
        )));
    }
    if label >= classes {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        });
    }
    let z = logits.reshape(&[1, classes])?;
    let lse = z.logsumexp()?.reshape(&[])?;
    let zy = z.gather(std::rc::Rc::new(vec![label as i64]), &[])?;
    lse.sub(&zy)
}

/// Mean cross-entropy over a batch of logits [n, C] with hard labels.
pub fn cross_entropy_batch(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy_batch: logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    for &l in labels {
        if l >= c {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: c,
            });
        }
    }
    let lse = logits.logsumexp()?.reshape(&[n])?;
    let idx: Vec<i64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (i * c + l) as i64)
        .collect();
    let zy = logits
        .reshape(&[n * c])?
        .gather(std::rc::Rc::new(idx), &[n])?;
    lse.sub(&zy)?.sum()?.scale(1.0 / n as f64)
}

/// d cross_entropy / dθ for every registered parameter on a single example.
/// Returns the gradients and the dropout mask that was applied (if any).
pub fn param_gradients(
    model: &Model,
    x: &Tensor,
    label: usize,
    policy: MaskPolicy,
) -> Result<(Gradients, Option<DropoutMask>)> {
    let tape = Tape::new();
    let (c, h, w) = model.input_shape;
    let xv = tape.leaf(x.reshaped(&[1, c, h, w])?);
    let out = model.forward(&tape, &xv, policy)?;
    let loss = cross_entropy(&out.logits, label)?;
    let targets: Vec<Var> = out.param_vars.iter().map(|(_, v)| v.clone()).collect();
    let grads = backward(&loss, &targets, false)?;
    let entries = out
        .param_vars
        .iter()
        .zip(grads)
        .map(|((n, _), g)| (n.clone(), g.value()))
        .collect();
    Ok((Gradients::new(entries), out.mask_used))
}

const MODEL_MAGIC: &[u8; 4] = b"GLKM";
const MODEL_VERSION: u32 = 1;

impl Model {
    /// Write parameters as: magic "GLKM", version u32 LE, then per parameter
    /// (name len u16, name bytes, rank u8, dims u32×rank, f64 data LE).
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Load parameters saved by `save_params` into this model, matching by
    /// name and checking shapes.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::InvalidArgument(format!("bad model file: {msg}"));
        if bytes.len() < 8 || &bytes[0..4] != MODEL_MAGIC {
            return Err(bad("missing GLKM magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::InvalidArgument(
                        "bad model file: truncated".to_string(),
                    ));
                }
                let s = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
        }
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 8,
        };
        let mut loaded = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| bad("non-utf8 parameter name"))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push((name, Tensor::new(shape, data)?));
        }
        for (name, t) in loaded {
            self.set_param(&name, t)?;
        }
        Ok(())
    }
}

// Keep Write in scope for potential streaming writers without a second import
// at call sites.
#[allow(unused)]
fn _assert_write_usable(w: &mut dyn Write) {}
