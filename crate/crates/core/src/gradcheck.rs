//! Finite-difference verification of every differentiable component.
//!
//! Each component is rebuilt on a fresh tape from a flat list of input
//! tensors, reduced to a scalar through a fixed random projection, and its
//! analytic gradient with respect to every input is compared against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{
    classify, discriminate, encode_step, generate, lstm_step, monitor, EncoderKind, EncoderParams, EncoderState, Linear,
    LstmCell, Mlp, ModelConfig, ModelParams,
};
use crate::numcore::{finite_diff_grad, max_relative_error, Primitive, Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 5;
const BATCH: usize = 3;

/// Result for one component over all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub component: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

type Builder = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Worst relative error of `build` over all its inputs.
pub fn check_component(inputs: &[Tensor], build: &Builder) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0_f64;
    for (k, theta) in inputs.iter().enumerate() {
        let mut failure = None;
        let objective = |probe: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.constant(if j == k { probe.clone() } else { x.clone() }))
                .collect();
            match build(&mut t, &vs) {
                Ok(v) => t.value(v).item(),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        };
        let numeric = finite_diff_grad(objective, theta, EPSILON);
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&grads.wrt(vars[k]), &numeric?));
    }
    Ok(worst)
}

/// Small sizes keep the coordinate-wise differences cheap.
pub fn tiny_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder,
        d_img: 5,
        imu_samples: 2,
        hidden_img: 4,
        hidden_pos: 3,
        hidden_rot: 3,
        hidden_fuse: 4,
        generator_width: 5,
        discriminator_width: 5,
        monitor_width: 5,
        num_classes: 6,
    }
}

struct Instance {
    rng: ChaCha8Rng,
}

impl Instance {
    fn new(seed: u64, component: usize, instance: usize) -> Self {
        let s = seed ^ ((component as u64) << 32) ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self { rng: ChaCha8Rng::seed_from_u64(s) }
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.random_range(lo..hi)).collect()).expect("shape matches")
    }

    /// Model parameters with every leaf drawn from `[-0.6, 0.6)`.
    fn params(&mut self, cfg: &ModelConfig) -> ModelParams {
        ModelParams::init(cfg, 0).map(&mut |_, _, t| self.uniform(t.shape(), -0.6, 0.6))
    }

    /// `[B, cols]` probability rows.
    fn probs(&mut self, cols: usize) -> Tensor {
        let mut t = self.uniform(&[BATCH, cols], 0.1, 1.0);
        for r in 0..BATCH {
            let s: f64 = t.row(r).iter().sum();
            for v in &mut t.data_mut()[r * cols..(r + 1) * cols] {
                *v /= s;
            }
        }
        t
    }
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m)?)
}

fn cell_tensors(c: &LstmCell<Tensor>) -> Vec<Tensor> {
    vec![c.w_input.clone(), c.w_hidden.clone(), c.bias.clone()]
}

fn cell_vars(v: &[Var]) -> LstmCell<Var> {
    LstmCell { w_input: v[0], w_hidden: v[1], bias: v[2] }
}

fn mlp_tensors(m: &Mlp<Tensor>) -> Vec<Tensor> {
    m.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
}

fn mlp_vars(v: &[Var]) -> Mlp<Var> {
    Mlp { layers: v.chunks(2).map(|c| Linear { weight: c[0], bias: c[1] }).collect() }
}

fn encoder_tensors(e: &EncoderParams<Tensor>) -> Vec<Tensor> {
    match e {
        EncoderParams::Hier { img, pos, rot, fusion } => [img, pos, rot, fusion].into_iter().flat_map(cell_tensors).collect(),
        EncoderParams::Flat2 { lower, upper } => [lower, upper].into_iter().flat_map(cell_tensors).collect(),
    }
}

fn encoder_vars(kind: EncoderKind, v: &[Var]) -> EncoderParams<Var> {
    match kind {
        EncoderKind::Hier => EncoderParams::Hier {
            img: cell_vars(&v[0..3]),
            pos: cell_vars(&v[3..6]),
            rot: cell_vars(&v[6..9]),
            fusion: cell_vars(&v[9..12]),
        },
        EncoderKind::Flat2 => EncoderParams::Flat2 { lower: cell_vars(&v[0..3]), upper: cell_vars(&v[3..6]) },
    }
}

/// Names of the checked components, in report order.
pub const COMPONENTS: [&str; 17] = [
    "lstm_img",
    "lstm_pos",
    "lstm_rot",
    "fusion",
    "encoder_hier",
    "encoder_flat2",
    "generator",
    "discriminator",
    "classifier",
    "monitor",
    "pose_distance",
    "loss_reg",
    "loss_adv",
    "loss_gen",
    "loss_dis",
    "loss_cls",
    "loss_mon",
];

/// Inputs and builder of one instance of a component.
fn instance(component: &str, inst: &mut Instance) -> Result<(Vec<Tensor>, Box<Builder>)> {
    let hier = tiny_config(EncoderKind::Hier);
    let flat = tiny_config(EncoderKind::Flat2);
    let three_n = hier.imu_stream_len();
    let p = inst.params(&hier);
    let cell_case = |inst: &mut Instance, cell: &LstmCell<Tensor>| -> (Vec<Tensor>, Box<Builder>) {
        let (input, hidden) = (cell.w_input.shape()[0], cell.w_hidden.shape()[0]);
        let mut inputs = cell_tensors(cell);
        inputs.push(inst.uniform(&[BATCH, input], -1.0, 1.0));
        inputs.push(inst.uniform(&[BATCH, hidden], -0.9, 0.9));
        inputs.push(inst.uniform(&[BATCH, hidden], -1.5, 1.5));
        let (rh, rc) = (inst.uniform(&[BATCH, hidden], -1.0, 1.0), inst.uniform(&[BATCH, hidden], -1.0, 1.0));
        let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let (h, c) = lstm_step(t, &cell_vars(&v[0..3]), v[3], v[4], v[5])?;
            let a = project(t, h, &rh)?;
            let b = project(t, c, &rc)?;
            Ok(t.add(a, b)?)
        };
        (inputs, Box::new(build))
    };
    let EncoderParams::Hier { img, pos, rot, fusion } = &p.encoder else { unreachable!("hier config") };
    let h_fuse = hier.hidden_fuse;
    Ok(match component {
        "lstm_img" => cell_case(inst, img),
        "lstm_pos" => cell_case(inst, pos),
        "lstm_rot" => cell_case(inst, rot),
        "fusion" => cell_case(inst, fusion),
        "encoder_hier" | "encoder_flat2" => {
            let cfg = if component == "encoder_hier" { hier.clone() } else { flat.clone() };
            let enc = if component == "encoder_hier" { p.encoder.clone() } else { inst.params(&flat).encoder };
            let mut inputs = encoder_tensors(&enc);
            let n = inputs.len();
            // Two frames so the recurrence itself is differentiated.
            for _ in 0..2 {
                inputs.push(inst.uniform(&[BATCH, cfg.d_img], -1.0, 1.0));
                inputs.push(inst.uniform(&[BATCH, three_n], -1.0, 1.0));
                inputs.push(inst.uniform(&[BATCH, three_n], -1.0, 1.0));
            }
            let r = inst.uniform(&[BATCH, cfg.hidden_fuse], -1.0, 1.0);
            let kind = cfg.encoder;
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let enc = encoder_vars(kind, &v[..n]);
                let mut state = EncoderState::zeros(t, &cfg, BATCH);
                for f in 0..2 {
                    let base = n + 3 * f;
                    state = encode_step(t, &enc, v[base], v[base + 1], v[base + 2], &state)?;
                }
                project(t, state.fused(), &r)
            };
            (inputs, Box::new(build))
        }
        "generator" => {
            let mut inputs = mlp_tensors(&p.generator);
            let n = inputs.len();
            inputs.push(inst.uniform(&[BATCH, h_fuse], -1.0, 1.0));
            let r = inst.uniform(&[BATCH, 6], -1.0, 1.0);
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let out = generate(t, &mlp_vars(&v[..n]), v[n])?;
                project(t, out, &r)
            };
            (inputs, Box::new(build))
        }
        "discriminator" => {
            let mut inputs = mlp_tensors(&p.discriminator);
            let n = inputs.len();
            inputs.push(inst.uniform(&[BATCH, h_fuse], -1.0, 1.0));
            let mut pose = inst.uniform(&[BATCH, 6], -0.5, 0.5);
            for r in 0..BATCH {
                for c in 3..6 {
                    pose.data_mut()[r * 6 + c] *= 700.0;
                }
            }
            inputs.push(pose);
            let r = inst.uniform(&[BATCH, 1], -1.0, 1.0);
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let d = discriminate(t, &mlp_vars(&v[..n]), v[n], v[n + 1])?;
                project(t, d, &r)
            };
            (inputs, Box::new(build))
        }
        "classifier" => {
            let inputs = vec![p.classifier.weight.clone(), p.classifier.bias.clone(), inst.uniform(&[BATCH, h_fuse], -1.0, 1.0)];
            let r = inst.uniform(&[BATCH, hier.num_classes], -1.0, 1.0);
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let q = classify(t, &Linear { weight: v[0], bias: v[1] }, v[2])?;
                project(t, q, &r)
            };
            (inputs, Box::new(build))
        }
        "monitor" => {
            let mut inputs = mlp_tensors(&p.monitor);
            let n = inputs.len();
            inputs.push(inst.uniform(&[BATCH, h_fuse], -1.0, 1.0));
            inputs.push(inst.uniform(&[BATCH, 1], 0.05, 0.95));
            let r = inst.uniform(&[BATCH, 2], -1.0, 1.0);
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let y = monitor(t, &mlp_vars(&v[..n]), v[n], v[n + 1])?;
                project(t, y, &r)
            };
            (inputs, Box::new(build))
        }
        "pose_distance" | "loss_reg" => {
            let steps = if component == "pose_distance" { 1 } else { 3 };
            let mut inputs = Vec::new();
            for _ in 0..2 * steps {
                let mut pose = inst.uniform(&[BATCH, 6], -0.5, 0.5);
                for r in 0..BATCH {
                    for c in 3..6 {
                        pose.data_mut()[r * 6 + c] *= 720.0;
                    }
                }
                inputs.push(pose);
            }
            let w = inst.uniform(&[BATCH], 0.0, 1.0);
            let r = inst.uniform(&[BATCH, 1], -1.0, 1.0);
            let single = component == "pose_distance";
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                if single {
                    let d = losses::pose_distance_rows(t, v[0], v[1])?;
                    return project(t, d, &r);
                }
                losses::regression_loss(t, &v[..steps], &v[steps..], &w)
            };
            (inputs, Box::new(build))
        }
        "loss_adv" | "loss_dis" | "loss_mon" => {
            let steps = 3;
            let w = inst.uniform(&[BATCH], 0.0, 1.0);
            let labels: Vec<bool> = (0..BATCH).map(|_| inst.rng.random_bool(0.5)).collect();
            let mut inputs = Vec::new();
            let count = if component == "loss_dis" { 2 * steps } else { steps };
            for _ in 0..count {
                inputs.push(if component == "loss_mon" { inst.probs(2) } else { inst.uniform(&[BATCH, 1], 0.05, 0.95) });
            }
            let which = component.to_string();
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                match which.as_str() {
                    "loss_adv" => losses::adversarial_loss(t, v, &w),
                    "loss_dis" => losses::discriminator_loss(t, &v[..steps], &v[steps..], &w),
                    _ => losses::monitoring_loss(t, v, &labels, &w),
                }
            };
            (inputs, Box::new(build))
        }
        "loss_gen" => {
            let lambda = inst.rng.random_range(0.0..2.0);
            let inputs = vec![inst.uniform(&[], 0.0, 2.0), inst.uniform(&[], 0.0, 2.0)];
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> { losses::generator_loss(t, v[0], v[1], lambda) };
            (inputs, Box::new(build))
        }
        "loss_cls" => {
            let k = hier.num_classes;
            let inputs = vec![inst.probs(k)];
            let labels: Vec<usize> = (0..BATCH).map(|_| inst.rng.random_range(0..k)).collect();
            let w = inst.uniform(&[BATCH], 0.0, 1.0);
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> { losses::classification_loss(t, v[0], &labels, &w) };
            (inputs, Box::new(build))
        }
        other => return Err(Error::Invalid(format!("unknown gradcheck component '{other}'"))),
    })
}

/// Checks every component over [`INSTANCES`] seeded instances.
pub fn run(seed: u64) -> Result<Vec<GradcheckRow>> {
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(ci, &component)| {
            let mut worst = 0.0_f64;
            for i in 0..INSTANCES {
                let mut inst = Instance::new(seed, ci, i);
                let (inputs, build) = instance(component, &mut inst)?;
                worst = worst.max(check_component(&inputs, &*build)?);
            }
            Ok(GradcheckRow { component, instances: INSTANCES, max_relative_error: worst })
        })
        .collect()
}

/// Primitive names accepted for fault injection.
pub fn parse_primitive(name: &str) -> Result<Primitive> {
    use Primitive::*;
    let all = [
        ("matmul", Matmul),
        ("add", Add),
        ("add_row", AddRow),
        ("sub", Sub),
        ("mul", Mul),
        ("scale", Scale),
        ("offset", Offset),
        ("concat", Concat),
        ("slice", Slice),
        ("sigmoid", Sigmoid),
        ("tanh", Tanh),
        ("log", Log),
        ("cos", Cos),
        ("sin", Sin),
        ("softmax", Softmax),
        ("clamp", Clamp),
        ("sum", Sum),
        ("mean", Mean),
    ];
    all.iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, p)| p)
        .ok_or_else(|| Error::Invalid(format!("unknown primitive '{name}'")))
}

/// Text report, one row per component.
pub fn render(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<14} {:>9} {:>14}  result\n", "component", "instances", "max rel err");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>9} {:>14.3e}  {}\n",
            r.component,
            r.instances,
            r.max_relative_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}
