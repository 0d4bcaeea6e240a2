use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderKind, ModelConfig};
use crate::numcore::Tensor;

/// Parameter groups, updated by separate optimizer phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    Generator,
    Discriminator,
    Classifier,
    Monitor,
}

impl Group {
    pub const ALL: [Group; 5] =
        [Group::Encoder, Group::Generator, Group::Discriminator, Group::Classifier, Group::Monitor];
}

/// Affine map `x · weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// LSTM cell with gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<T> {
    pub w_input: T,
    pub w_hidden: T,
    pub bias: T,
}

/// Feed-forward stack; tanh between layers, affine output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams<T> {
    Hier { img: LstmCell<T>, pos: LstmCell<T>, rot: LstmCell<T>, fusion: LstmCell<T> },
    Flat2 { lower: LstmCell<T>, upper: LstmCell<T> },
}

/// Every trainable tensor of the model, generic over storage so the same tree
/// holds concrete tensors or their handles on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub encoder: EncoderParams<T>,
    pub generator: Mlp<T>,
    pub discriminator: Mlp<T>,
    pub classifier: Linear<T>,
    pub monitor: Mlp<T>,
}

pub type ModelParams = Params<Tensor>;

type MapFn<'f, T, U> = dyn FnMut(Group, &str, &T) -> U + 'f;

impl<T> Linear<T> {
    pub fn map<U>(&self, g: Group, prefix: &str, f: &mut MapFn<T, U>) -> Linear<U> {
        Linear { weight: f(g, &format!("{prefix}.weight"), &self.weight), bias: f(g, &format!("{prefix}.bias"), &self.bias) }
    }

    fn refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn refs_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> LstmCell<T> {
    pub fn map<U>(&self, g: Group, prefix: &str, f: &mut MapFn<T, U>) -> LstmCell<U> {
        LstmCell {
            w_input: f(g, &format!("{prefix}.w_input"), &self.w_input),
            w_hidden: f(g, &format!("{prefix}.w_hidden"), &self.w_hidden),
            bias: f(g, &format!("{prefix}.bias"), &self.bias),
        }
    }

    fn refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_input"), &self.w_input));
        out.push((format!("{prefix}.w_hidden"), &self.w_hidden));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn refs_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w_input"), &mut self.w_input));
        out.push((format!("{prefix}.w_hidden"), &mut self.w_hidden));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, g: Group, prefix: &str, f: &mut MapFn<T, U>) -> Mlp<U> {
        let layers = self.layers.iter().enumerate().map(|(i, l)| l.map(g, &format!("{prefix}.{i}"), f)).collect();
        Mlp { layers }
    }

    fn refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.refs(&format!("{prefix}.{i}"), out);
        }
    }

    fn refs_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.refs_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

impl<T> EncoderParams<T> {
    fn map<U>(&self, f: &mut MapFn<T, U>) -> EncoderParams<U> {
        let g = Group::Encoder;
        match self {
            EncoderParams::Hier { img, pos, rot, fusion } => EncoderParams::Hier {
                img: img.map(g, "encoder.img", f),
                pos: pos.map(g, "encoder.pos", f),
                rot: rot.map(g, "encoder.rot", f),
                fusion: fusion.map(g, "encoder.fusion", f),
            },
            EncoderParams::Flat2 { lower, upper } => EncoderParams::Flat2 {
                lower: lower.map(g, "encoder.lower", f),
                upper: upper.map(g, "encoder.upper", f),
            },
        }
    }

    fn refs<'a>(&'a self, out: &mut Vec<(String, &'a T)>) {
        match self {
            EncoderParams::Hier { img, pos, rot, fusion } => {
                img.refs("encoder.img", out);
                pos.refs("encoder.pos", out);
                rot.refs("encoder.rot", out);
                fusion.refs("encoder.fusion", out);
            }
            EncoderParams::Flat2 { lower, upper } => {
                lower.refs("encoder.lower", out);
                upper.refs("encoder.upper", out);
            }
        }
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut T)>) {
        match self {
            EncoderParams::Hier { img, pos, rot, fusion } => {
                img.refs_mut("encoder.img", out);
                pos.refs_mut("encoder.pos", out);
                rot.refs_mut("encoder.rot", out);
                fusion.refs_mut("encoder.fusion", out);
            }
            EncoderParams::Flat2 { lower, upper } => {
                lower.refs_mut("encoder.lower", out);
                upper.refs_mut("encoder.upper", out);
            }
        }
    }
}

impl<T> Params<T> {
    /// Applies `f` to every leaf in canonical order, producing a tree of results.
    pub fn map<U>(&self, f: &mut MapFn<T, U>) -> Params<U> {
        Params {
            encoder: self.encoder.map(f),
            generator: self.generator.map(Group::Generator, "generator", f),
            discriminator: self.discriminator.map(Group::Discriminator, "discriminator", f),
            classifier: self.classifier.map(Group::Classifier, "classifier", f),
            monitor: self.monitor.map(Group::Monitor, "monitor", f),
        }
    }

    /// Leaves of one group in canonical order.
    pub fn group(&self, group: Group) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        match group {
            Group::Encoder => self.encoder.refs(&mut out),
            Group::Generator => self.generator.refs("generator", &mut out),
            Group::Discriminator => self.discriminator.refs("discriminator", &mut out),
            Group::Classifier => self.classifier.refs("classifier", &mut out),
            Group::Monitor => self.monitor.refs("monitor", &mut out),
        }
        out
    }

    pub fn group_mut(&mut self, group: Group) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        match group {
            Group::Encoder => self.encoder.refs_mut(&mut out),
            Group::Generator => self.generator.refs_mut("generator", &mut out),
            Group::Discriminator => self.discriminator.refs_mut("discriminator", &mut out),
            Group::Classifier => self.classifier.refs_mut("classifier", &mut out),
            Group::Monitor => self.monitor.refs_mut("monitor", &mut out),
        }
        out
    }

    /// All leaves in canonical order (encoder, generator, discriminator, classifier, monitor).
    pub fn named(&self) -> Vec<(String, &T)> {
        Group::ALL.iter().flat_map(|&g| self.group(g)).collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.encoder.refs_mut(&mut out);
        self.generator.refs_mut("generator", &mut out);
        self.discriminator.refs_mut("discriminator", &mut out);
        self.classifier.refs_mut("classifier", &mut out);
        self.monitor.refs_mut("monitor", &mut out);
        out
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let s = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-s..s)).collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    fn linear(&mut self, input: usize, output: usize) -> Linear<Tensor> {
        Linear { weight: self.uniform(&[input, output], input), bias: self.uniform(&[output], input) }
    }

    fn lstm(&mut self, input: usize, hidden: usize) -> LstmCell<Tensor> {
        let mut bias = self.uniform(&[4 * hidden], input + hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_input: self.uniform(&[input, 4 * hidden], input),
            w_hidden: self.uniform(&[hidden, 4 * hidden], hidden),
            bias,
        }
    }

    fn mlp(&mut self, widths: &[usize]) -> Mlp<Tensor> {
        Mlp { layers: widths.windows(2).map(|w| self.linear(w[0], w[1])).collect() }
    }
}

/// Width of the pose encoding seen by the discriminator: position plus (sin, cos) per angle.
pub(crate) const POSE_CODE_LEN: usize = 9;

impl ModelParams {
    /// Seeded initialization: uniform in `±1/√fan_in`, forget-gate bias 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let three_n = cfg.imu_stream_len();
        let encoder = match cfg.encoder {
            EncoderKind::Hier => EncoderParams::Hier {
                img: init.lstm(cfg.d_img, cfg.hidden_img),
                pos: init.lstm(three_n, cfg.hidden_pos),
                rot: init.lstm(three_n, cfg.hidden_rot),
                fusion: init.lstm(cfg.hidden_img + cfg.hidden_pos + cfg.hidden_rot, cfg.hidden_fuse),
            },
            EncoderKind::Flat2 => EncoderParams::Flat2 {
                lower: init.lstm(cfg.d_img + 2 * three_n, cfg.hidden_fuse),
                upper: init.lstm(cfg.hidden_fuse, cfg.hidden_fuse),
            },
        };
        let h = cfg.hidden_fuse;
        let (gw, dw) = (cfg.generator_width, cfg.discriminator_width);
        Params {
            encoder,
            generator: init.mlp(&[h, gw, gw, 6]),
            discriminator: init.mlp(&[h + POSE_CODE_LEN, dw, dw, 1]),
            classifier: init.linear(h, cfg.num_classes),
            monitor: init.mlp(&[h + 1, cfg.monitor_width, 2]),
        }
    }

    /// Same layout with every value zero.
    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, _, t| Tensor::zeros(t.shape()))
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Expected shapes for a configuration, in canonical order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::init(cfg, 0).named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }
}
