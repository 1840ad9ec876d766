//! Student and teacher segmentation networks.
//!
//! Both share the same layout: a strided convolutional encoder followed by a
//! segmentation decoder. The student can additionally carry an auxiliary
//! decoder attached to the same encoder output:
//!
//! * a reconstruction decoder whose last 1×1 convolution maps the `d` latent
//!   channels to RGB with no bias, so each output channel is exactly a weighted
//!   sum of the latent slices;
//! * or a two-class foreground/background head.
//!
//! The auxiliary decoder mirrors the segmentation decoder layer for layer and
//! differs only in its final layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxHead {
    None,
    Reconstruction,
    /// Two-way foreground/background segmentation.
    Fgbg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub stages: usize,
    /// Channel count of the latent stack feeding the final 1×1 layers.
    pub latent_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            num_classes: 4,
            base_width: 16,
            stages: 2,
            latent_width: 16,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_width < 1 {
            return bad("latent_width must be >= 1");
        }
        if self.stages < 1 {
            return bad("stages must be >= 1");
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes must be in [2, 255]");
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return bad("widths must be >= 1");
        }
        Ok(())
    }

    /// Spatial downsampling factor of the encoder.
    pub fn reduction(&self) -> usize {
        1 << self.stages
    }

    /// Output channels of encoder stage `s`; width doubles per stage.
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Decoder {
    stages: Vec<Conv>,
    head: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    role: Role,
    config: NetworkConfig,
    aux: AuxHead,
    names: Vec<String>,
    params: Vec<Tensor>,
    encoder: Vec<Conv>,
    seg: Decoder,
    aux_decoder: Option<Decoder>,
}

/// Latent slices of the reconstruction decoder and its final-layer weights.
#[derive(Clone, Debug)]
pub struct LatentStack {
    /// `[N, d, H, W]` activations entering the final 1×1 convolution.
    pub z: Tensor,
    /// `[3, d]` final-layer weights.
    pub weights: Tensor,
}

impl LatentStack {
    pub fn width(&self) -> usize {
        self.z.shape()[1]
    }

    /// Σ_k Z^k · w^k_c for sample `n`, evaluated in f64.
    pub fn weighted_sum(&self, n: usize, channel: usize) -> Vec<f64> {
        let [_, d, h, w] = self.z.dims4().expect("4-d latent");
        let hw = h * w;
        let z = &self.z.data()[n * d * hw..(n + 1) * d * hw];
        let wc = &self.weights.data()[channel * d..(channel + 1) * d];
        let mut out = vec![0.0f64; hw];
        for (k, &wk) in wc.iter().enumerate() {
            for (o, &zv) in out.iter_mut().zip(&z[k * hw..(k + 1) * hw]) {
                *o += wk as f64 * zv as f64;
            }
        }
        out
    }
}

/// Tape handles produced by a training forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    /// `(latent, output)` of the auxiliary decoder when requested.
    pub aux: Option<(Var, Var)>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = (gain / fan_in).sqrt();
        let weight = Tensor::from_fn([cout, cin, k, k], |_| {
            self.rng.random_range(-bound..bound) as f32
        });
        self.names.push(format!("{name}.weight"));
        self.params.push(weight);
        let w = self.params.len() - 1;
        let b = bias.then(|| {
            self.names.push(format!("{name}.bias"));
            self.params.push(Tensor::zeros([cout]));
            self.params.len() - 1
        });
        Conv {
            weight: w,
            bias: b,
            stride,
            pad: k / 2,
        }
    }

    fn decoder(&mut self, prefix: &str, cfg: &NetworkConfig, out: usize, head_bias: bool) -> Decoder {
        let mut stages = Vec::with_capacity(cfg.stages);
        // Mirrors the encoder: stage s undoes encoder stage `stages - 1 - s`.
        let mut cin = cfg.stage_width(cfg.stages - 1);
        for s in 0..cfg.stages {
            let cout = if s + 1 == cfg.stages {
                cfg.latent_width
            } else {
                cfg.stage_width(cfg.stages - 2 - s)
            };
            stages.push(self.conv(&format!("{prefix}.{s}"), cin, cout, 3, 1, true, RELU_GAIN));
            cin = cout;
        }
        let head = self.conv(&format!("{prefix}.head"), cfg.latent_width, out, 1, 1, head_bias, LINEAR_GAIN);
        Decoder { stages, head }
    }
}

const RELU_GAIN: f64 = 6.0;
/// Fixed input standardization; images live in [0, 1].
const INPUT_MEAN: f32 = 0.5;
const INPUT_STD: f32 = 0.25;
const LINEAR_GAIN: f64 = 3.0;

impl Network {
    /// Builds a student with the given auxiliary head and a teacher that is an
    /// exact copy of the student's encoder and segmentation decoder.
    ///
    /// Encoder and segmentation parameters are drawn first, so they do not
    /// depend on `aux`.
    pub fn build(config: NetworkConfig, aux: AuxHead, seed: u64) -> Result<(Network, Network)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
        };
        let encoder = Self::encoder_layout(&mut b, &config);
        let seg = b.decoder("seg", &config, config.num_classes, true);
        let aux_decoder = match aux {
            AuxHead::None => None,
            AuxHead::Reconstruction => Some(b.decoder("rec", &config, 3, false)),
            AuxHead::Fgbg => Some(b.decoder("fgbg", &config, 2, true)),
        };
        let student = Network {
            role: Role::Student,
            config,
            aux,
            names: b.names,
            params: b.params,
            encoder,
            seg,
            aux_decoder,
        };
        let teacher = student.teacher_copy();
        Ok((student, teacher))
    }

    fn encoder_layout(b: &mut Builder<'_>, cfg: &NetworkConfig) -> Vec<Conv> {
        let mut layers = Vec::with_capacity(cfg.stages * 2);
        let mut cin = cfg.in_channels;
        for s in 0..cfg.stages {
            let width = cfg.stage_width(s);
            layers.push(b.conv(&format!("encoder.{}", 2 * s), cin, width, 3, 2, true, RELU_GAIN));
            layers.push(b.conv(&format!("encoder.{}", 2 * s + 1), width, width, 3, 1, true, RELU_GAIN));
            cin = width;
        }
        layers
    }

    /// A teacher holding copies of the shared (encoder + segmentation) parameters.
    pub fn teacher_copy(&self) -> Network {
        let shared = self.shared_count();
        Network {
            role: Role::Teacher,
            config: self.config,
            aux: AuxHead::None,
            names: self.names[..shared].to_vec(),
            params: self.params[..shared].to_vec(),
            encoder: self.encoder.clone(),
            seg: self.seg.clone(),
            aux_decoder: None,
        }
    }

    fn shared_count(&self) -> usize {
        self.names
            .iter()
            .take_while(|n| n.starts_with("encoder.") || n.starts_with("seg."))
            .count()
    }

    /// Parameter names and shapes the given layout would produce, in order.
    pub fn layout(config: NetworkConfig, aux: AuxHead) -> Result<Vec<(String, Vec<usize>)>> {
        let (s, _) = Self::build(config, aux, 0)?;
        Ok(s.names
            .into_iter()
            .zip(s.params.iter().map(|p| p.shape().to_vec()))
            .collect())
    }

    /// Reassembles a network from named tensors, inferring its configuration
    /// from the tensor shapes.
    pub fn from_named(tensors: Vec<(String, Tensor)>, role: Role) -> Result<Network> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::TensorTable(format!("missing tensor `{name}`")))
        };
        let first = find("encoder.0.weight")?;
        let stages = tensors
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.") && n.ends_with(".weight"))
            .count()
            / 2;
        if stages == 0 || first.len() != 4 {
            return Err(Error::TensorTable("malformed encoder".into()));
        }
        let last_stage = find(&format!("seg.{}.weight", stages - 1))?;
        let head = find("seg.head.weight")?;
        let config = NetworkConfig {
            in_channels: first[1],
            num_classes: head[0],
            base_width: first[0],
            stages,
            latent_width: last_stage[0],
        };
        config
            .validate()
            .map_err(|e| Error::TensorTable(e.to_string()))?;
        let has = |p: &str| tensors.iter().any(|(n, _)| n.starts_with(p));
        let aux = match (has("rec."), has("fgbg.")) {
            (false, false) => AuxHead::None,
            (true, false) => AuxHead::Reconstruction,
            (false, true) => AuxHead::Fgbg,
            (true, true) => return Err(Error::TensorTable("both rec and fgbg heads".into())),
        };
        if role == Role::Teacher && aux != AuxHead::None {
            return Err(Error::TensorTable("teacher cannot carry an auxiliary decoder".into()));
        }
        let (mut net, _) = Self::build(config, aux, 0)?;
        net.role = role;
        net.load_named(tensors)?;
        Ok(net)
    }

    /// Replaces every parameter with the same-named tensor; the name/shape
    /// table must match exactly.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.names.len() {
            return Err(Error::TensorTable(format!(
                "expected {} tensors, found {}",
                self.names.len(),
                tensors.len()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.names.len()];
        for (name, t) in tensors {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::TensorTable(format!("unexpected tensor `{name}`")))?;
            if t.shape() != self.params[i].shape() {
                return Err(Error::TensorTable(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params[i].shape()
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::TensorTable(format!("duplicate tensor `{name}`")));
            }
        }
        self.params = slots.into_iter().map(|t| t.expect("all slots filled")).collect();
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn aux(&self) -> AuxHead {
        self.aux
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let r = self.config.reduction();
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, network expects {}", self.config.in_channels),
            ));
        }
        if h % r != 0 || w % r != 0 {
            return Err(Error::shape(
                "forward",
                format!("spatial size {h}x{w} not divisible by {r}"),
            ));
        }
        Ok(())
    }

    fn apply_conv(&self, tape: &mut Tape, pv: &[Var], x: Var, c: &Conv) -> Result<Var> {
        tape.conv2d(x, pv[c.weight], c.bias.map(|b| pv[b]), c.stride, c.pad)
    }

    fn decode(&self, tape: &mut Tape, pv: &[Var], feat: Var, d: &Decoder) -> Result<(Var, Var)> {
        let mut x = feat;
        for conv in &d.stages {
            let up = tape.upsample(x, 2)?;
            let c = self.apply_conv(tape, pv, up, conv)?;
            x = tape.relu(c);
        }
        let out = self.apply_conv(tape, pv, x, &d.head)?;
        Ok((x, out))
    }

    /// Records every parameter on `tape`; the returned handles are indexed like [`Self::params`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect()
    }

    /// Runs the encoder once and both decoders on its output.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor, with_aux: bool) -> Result<ForwardVars> {
        self.check_input(x)?;
        if with_aux && self.aux_decoder.is_none() {
            return Err(Error::NoReconstructionDecoder);
        }
        let pv = self.bind(tape);
        let mut h = tape.input(x.map(|v| (v - INPUT_MEAN) / INPUT_STD));
        for conv in &self.encoder {
            let c = self.apply_conv(tape, &pv, h, conv)?;
            h = tape.relu(c);
        }
        let (_, logits) = self.decode(tape, &pv, h, &self.seg)?;
        let aux = match (&self.aux_decoder, with_aux) {
            (Some(d), true) => Some(self.decode(tape, &pv, h, d)?),
            _ => None,
        };
        Ok(ForwardVars {
            features: h,
            logits,
            aux,
        })
    }

    /// Segmentation logits `[N, C, H, W]`.
    pub fn forward_seg(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, x, false)?;
        Ok(tape.value(fv.logits).clone())
    }

    /// Latent stack and reconstructed image `[N, 3, H, W]`.
    pub fn forward_rec(&self, x: &Tensor) -> Result<(LatentStack, Tensor)> {
        if self.aux != AuxHead::Reconstruction {
            return Err(Error::NoReconstructionDecoder);
        }
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, x, true)?;
        let (z, out) = fv.aux.expect("aux requested");
        let head = self.aux_decoder.as_ref().expect("rec decoder").head;
        let w = &self.params[head.weight];
        let [c, d, _, _] = w.dims4()?;
        let latent = LatentStack {
            z: tape.value(z).clone(),
            weights: w.clone().reshape([c, d])?,
        };
        Ok((latent, tape.value(out).clone()))
    }

    /// Channel-wise softmax of the segmentation logits.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        ops::softmax_channels(&self.forward_seg(x)?)
    }

    /// Per-pixel predicted classes, `[N, H, W]` flattened.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        ops::argmax_channels(&self.forward_seg(x)?)
    }

    /// `θ_t ← α·θ_t + (1−α)·θ_s` over the teacher's parameters (encoder and
    /// segmentation decoder). The student's auxiliary decoder is not read.
    pub fn ema_update(&mut self, student: &Network, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("ema alpha {alpha} outside [0, 1]")));
        }
        for (name, t) in self.names.iter().zip(self.params.iter_mut()) {
            let s = student
                .param(name)
                .ok_or_else(|| Error::shape("ema_update", format!("student lacks `{name}`")))?;
            if s.shape() != t.shape() {
                return Err(Error::shape(
                    "ema_update",
                    format!("`{name}`: teacher {:?} vs student {:?}", t.shape(), s.shape()),
                ));
            }
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = (alpha * *tv as f64 + (1.0 - alpha) * sv as f64) as f32;
            }
        }
        Ok(())
    }
}
