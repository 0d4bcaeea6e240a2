use super::params::{EncoderParams, LstmCell, Mlp, ModelParams, Params};
use super::{split_imu, Frame, ModelConfig, Pose, DEG_PER_RAD, PROB_FLOOR, RAD_PER_DEG};
use crate::numcore::{NumError, Tape, Tensor, Var};

/// One LSTM update for a batch: `x` is `[B, in]`, `h`/`c` are `[B, H]`.
pub fn lstm_step(tape: &mut Tape, cell: &LstmCell<Var>, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumError> {
    let hidden = tape.shape(cell.w_hidden)[0];
    let zx = tape.matmul(x, cell.w_input)?;
    let zh = tape.matmul(h, cell.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, cell.bias)?;
    let zi = tape.slice(z, 0, hidden)?;
    let zf = tape.slice(z, hidden, hidden)?;
    let zg = tape.slice(z, 2 * hidden, hidden)?;
    let zo = tape.slice(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Hidden and cell states of every encoder cell. For the hierarchical encoder
/// the order is img, pos, rot, fusion; for flat2 it is lower, upper.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub cells: Vec<(Var, Var)>,
}

impl EncoderState {
    pub fn zeros(tape: &mut Tape, cfg: &ModelConfig, batch: usize) -> Self {
        let sizes: Vec<usize> = match cfg.encoder {
            super::EncoderKind::Hier => vec![cfg.hidden_img, cfg.hidden_pos, cfg.hidden_rot, cfg.hidden_fuse],
            super::EncoderKind::Flat2 => vec![cfg.hidden_fuse, cfg.hidden_fuse],
        };
        let cells = sizes
            .into_iter()
            .map(|h| (tape.constant(Tensor::zeros(&[batch, h])), tape.constant(Tensor::zeros(&[batch, h]))))
            .collect();
        Self { cells }
    }

    /// Fused encoding `h_t`.
    pub fn fused(&self) -> Var {
        self.cells.last().expect("encoder has cells").0
    }
}

/// Advances the encoder by one frame and returns the new state; the fused
/// encoding is `state.fused()`.
pub fn encode_step(
    tape: &mut Tape,
    enc: &EncoderParams<Var>,
    feature: Var,
    accel: Var,
    gyro: Var,
    state: &EncoderState,
) -> Result<EncoderState, NumError> {
    match enc {
        EncoderParams::Hier { img, pos, rot, fusion } => {
            if state.cells.len() != 4 {
                return Err(NumError::Shape(format!("hierarchical encoder needs 4 cell states, got {}", state.cells.len())));
            }
            let (hi, ci) = lstm_step(tape, img, feature, state.cells[0].0, state.cells[0].1)?;
            let (hp, cp) = lstm_step(tape, pos, accel, state.cells[1].0, state.cells[1].1)?;
            let (hr, cr) = lstm_step(tape, rot, gyro, state.cells[2].0, state.cells[2].1)?;
            let joined = tape.concat(&[hi, hp, hr])?;
            let (hf, cf) = lstm_step(tape, fusion, joined, state.cells[3].0, state.cells[3].1)?;
            Ok(EncoderState { cells: vec![(hi, ci), (hp, cp), (hr, cr), (hf, cf)] })
        }
        EncoderParams::Flat2 { lower, upper } => {
            if state.cells.len() != 2 {
                return Err(NumError::Shape(format!("flat2 encoder needs 2 cell states, got {}", state.cells.len())));
            }
            let joined = tape.concat(&[feature, accel, gyro])?;
            let (h1, c1) = lstm_step(tape, lower, joined, state.cells[0].0, state.cells[0].1)?;
            let (h2, c2) = lstm_step(tape, upper, h1, state.cells[1].0, state.cells[1].1)?;
            Ok(EncoderState { cells: vec![(h1, c1), (h2, c2)] })
        }
    }
}

/// Feed-forward pass with tanh hidden layers and an affine output.
pub fn mlp_forward(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var, NumError> {
    let mut a = x;
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        let z = tape.matmul(a, layer.weight)?;
        a = tape.add_row(z, layer.bias)?;
        if i < last {
            a = tape.tanh(a)?;
        }
    }
    Ok(a)
}

/// Next-step pose forecast `[B, 6]`. The last three outputs are scaled from
/// radians to degrees so unit-scale activations cover full turns.
pub fn generate(tape: &mut Tape, generator: &Mlp<Var>, h: Var) -> Result<Var, NumError> {
    let raw = mlp_forward(tape, generator, h)?;
    let pos = tape.slice(raw, 0, 3)?;
    let rot = tape.slice(raw, 3, 3)?;
    let rot = tape.scale(rot, DEG_PER_RAD)?;
    tape.concat(&[pos, rot])
}

/// `[B, 6]` pose in degrees to `[B, 9]`: position, then sin and cos of each angle.
pub fn encode_pose(tape: &mut Tape, pose: Var) -> Result<Var, NumError> {
    let pos = tape.slice(pose, 0, 3)?;
    let rot = tape.slice(pose, 3, 3)?;
    let rad = tape.scale(rot, RAD_PER_DEG)?;
    let s = tape.sin(rad)?;
    let c = tape.cos(rad)?;
    tape.concat(&[pos, s, c])
}

/// Probability `[B, 1]` that `(h, pose)` is a real pair, clamped into the open unit interval.
pub fn discriminate(tape: &mut Tape, disc: &Mlp<Var>, h: Var, pose: Var) -> Result<Var, NumError> {
    let code = encode_pose(tape, pose)?;
    let x = tape.concat(&[h, code])?;
    let logit = mlp_forward(tape, disc, x)?;
    let d = tape.sigmoid(logit)?;
    tape.clamp(d, PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Initial-state class probabilities `[B, |Z|]`.
pub fn classify(tape: &mut Tape, classifier: &super::Linear<Var>, h: Var) -> Result<Var, NumError> {
    let z = tape.matmul(h, classifier.weight)?;
    let z = tape.add_row(z, classifier.bias)?;
    tape.softmax(z)
}

/// Monitor probabilities `[B, 2]` (failure, success) from `h` and score `d` (`[B, 1]`).
pub fn monitor(tape: &mut Tape, mon: &Mlp<Var>, h: Var, d: Var) -> Result<Var, NumError> {
    let x = tape.concat(&[h, d])?;
    let logits = mlp_forward(tape, mon, x)?;
    tape.softmax(logits)
}

/// Per-channel standardization fitted on training frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Six IMU channels, shared across the samples of a window.
    pub imu_mean: [f64; 6],
    pub imu_std: [f64; 6],
}

impl Normalizer {
    pub fn identity(d_img: usize) -> Self {
        Self { feature_mean: vec![0.0; d_img], feature_std: vec![1.0; d_img], imu_mean: [0.0; 6], imu_std: [1.0; 6] }
    }

    pub fn fit<'a>(d_img: usize, frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let mut fsum = vec![0.0; d_img];
        let mut fsq = vec![0.0; d_img];
        let mut isum = [0.0; 6];
        let mut isq = [0.0; 6];
        let (mut nf, mut ni) = (0usize, 0usize);
        for frame in frames {
            for (j, &v) in frame.feature.iter().enumerate() {
                fsum[j] += v;
                fsq[j] += v * v;
            }
            nf += 1;
            for s in &frame.imu.samples {
                for k in 0..6 {
                    isum[k] += s[k];
                    isq[k] += s[k] * s[k];
                }
                ni += 1;
            }
        }
        let stats = |sum: f64, sq: f64, n: usize| {
            if n == 0 {
                return (0.0, 1.0);
            }
            let m = sum / n as f64;
            let var = (sq / n as f64 - m * m).max(0.0);
            (m, var.sqrt().max(1e-6))
        };
        let mut out = Self::identity(d_img);
        for j in 0..d_img {
            (out.feature_mean[j], out.feature_std[j]) = stats(fsum[j], fsq[j], nf);
        }
        for k in 0..6 {
            (out.imu_mean[k], out.imu_std[k]) = stats(isum[k], isq[k], ni);
        }
        out
    }
}

/// Batched, normalized observations of one time step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub features: Tensor,
    pub accel: Tensor,
    pub gyro: Tensor,
}

impl StepInputs {
    /// Gathers frame `t` of every sequence into `[B, ·]` matrices.
    pub fn gather(seqs: &[&[Frame]], t: usize, norm: &Normalizer) -> Result<Self, NumError> {
        let b = seqs.len();
        let d = norm.feature_mean.len();
        let n3 = seqs.first().map(|s| 3 * s[t].imu.len()).unwrap_or(0);
        let mut features = Vec::with_capacity(b * d);
        let mut accel = Vec::with_capacity(b * n3);
        let mut gyro = Vec::with_capacity(b * n3);
        for seq in seqs {
            let frame = &seq[t];
            if frame.feature.len() != d {
                return Err(NumError::Shape(format!("frame feature length {} but model expects {d}", frame.feature.len())));
            }
            features.extend(frame.feature.iter().enumerate().map(|(j, v)| (v - norm.feature_mean[j]) / norm.feature_std[j]));
            let (a, g) = split_imu(&frame.imu);
            if a.len() != n3 {
                return Err(NumError::Shape(format!("IMU window of {} samples, expected {}", a.len() / 3, n3 / 3)));
            }
            accel.extend(a.iter().enumerate().map(|(j, v)| (v - norm.imu_mean[j % 3]) / norm.imu_std[j % 3]));
            gyro.extend(g.iter().enumerate().map(|(j, v)| (v - norm.imu_mean[3 + j % 3]) / norm.imu_std[3 + j % 3]));
        }
        Ok(Self {
            features: Tensor::matrix(b, d, features)?,
            accel: Tensor::matrix(b, n3, accel)?,
            gyro: Tensor::matrix(b, n3, gyro)?,
        })
    }
}

/// Per-step outputs of the heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPrediction {
    /// `y'_t`: probability the sequence succeeds.
    pub success: f64,
    /// Forecast of the next pose, rotations wrapped to `[0, 360)`.
    pub next_pose: Pose,
    /// Discriminator score fed to the monitor.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub steps: Vec<StepPrediction>,
    /// Initial-state class probabilities at the last encoded step.
    pub class_probs: Vec<f64>,
    pub class: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A configured model with its parameters and input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let params = ModelParams::init(&config, seed);
        let normalizer = Normalizer::identity(config.d_img);
        Self { config, params, normalizer }
    }

    /// Binds every parameter as a constant on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(&mut |_, _, t| tape.constant(t.clone()))
    }

    /// Runs the encoder over frames `1..T-1` of each sequence and applies every
    /// head. With `use_score` unset the monitor sees the constant score 0.5.
    pub fn predict_batch(&self, seqs: &[&[Frame]], use_score: bool) -> Result<Vec<Prediction>, NumError> {
        let Some(first) = seqs.first() else { return Ok(Vec::new()) };
        let len = first.len();
        if len < 2 || seqs.iter().any(|s| s.len() != len) {
            return Err(NumError::Shape("prediction batch needs equal-length sequences of at least 2 frames".into()));
        }
        let b = seqs.len();
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let mut state = EncoderState::zeros(&mut tape, &self.config, b);
        let mut preds: Vec<Prediction> =
            (0..b).map(|_| Prediction { steps: Vec::with_capacity(len - 1), class_probs: Vec::new(), class: 0 }).collect();
        let half = tape.constant(Tensor::full(&[b, 1], 0.5));
        for t in 0..len - 1 {
            let inputs = StepInputs::gather(seqs, t, &self.normalizer)?;
            let f = tape.constant(inputs.features);
            let a = tape.constant(inputs.accel);
            let g = tape.constant(inputs.gyro);
            state = encode_step(&mut tape, &p.encoder, f, a, g, &state)?;
            let h = state.fused();
            let pose = generate(&mut tape, &p.generator, h)?;
            let d = discriminate(&mut tape, &p.discriminator, h, pose)?;
            let fed = if use_score { d } else { half };
            let y = monitor(&mut tape, &p.monitor, h, fed)?;
            for (r, pred) in preds.iter_mut().enumerate() {
                let pv = tape.value(pose).row(r);
                let success = tape.value(y).get2(r, 1).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                pred.steps.push(StepPrediction {
                    success,
                    next_pose: Pose::from_array([pv[0], pv[1], pv[2], pv[3], pv[4], pv[5]]).wrapped(),
                    score: tape.value(fed).get2(r, 0),
                });
            }
        }
        let q = classify(&mut tape, &p.classifier, state.fused())?;
        for (r, pred) in preds.iter_mut().enumerate() {
            pred.class_probs = tape.value(q).row(r).to_vec();
            pred.class = argmax(&pred.class_probs);
        }
        Ok(preds)
    }

    pub fn predict(&self, frames: &[Frame], use_score: bool) -> Result<Prediction, NumError> {
        Ok(self.predict_batch(&[frames], use_score)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, Group, ImuWindow};

    fn frame(cfg: &ModelConfig, k: f64) -> Frame {
        Frame {
            feature: (0..cfg.d_img).map(|j| ((j as f64) * 0.37 + k).sin()).collect(),
            imu: ImuWindow { samples: (0..cfg.imu_samples).map(|s| [k, -k, 0.1 * s as f64, 1.0, k * 2.0, -0.5]).collect() },
            pose: Pose { position: [0.1, 0.2, 0.3], rotation: [10.0, 20.0, 350.0] },
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_img: 5,
            imu_samples: 2,
            hidden_img: 4,
            hidden_pos: 3,
            hidden_rot: 3,
            hidden_fuse: 4,
            generator_width: 5,
            discriminator_width: 5,
            monitor_width: 6,
            num_classes: 36,
            encoder: EncoderKind::Hier,
        }
    }

    #[test]
    fn zero_lstm_stays_zero() {
        let mut tape = Tape::new();
        let cell = LstmCell {
            w_input: tape.constant(Tensor::zeros(&[3, 8])),
            w_hidden: tape.constant(Tensor::zeros(&[2, 8])),
            bias: tape.constant(Tensor::zeros(&[8])),
        };
        let x = tape.constant(Tensor::matrix(1, 3, vec![5.0, -2.0, 9.0]).unwrap());
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let (h2, c2) = lstm_step(&mut tape, &cell, x, h, c).unwrap();
        assert_eq!(tape.value(c2).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(tape.shape(h2), &[1, 2]);
    }

    #[test]
    fn default_fusion_widths() {
        let cfg = ModelConfig::full_scale();
        let params = ModelParams::init(&ModelConfig { d_img: 8, ..cfg.clone() }, 0);
        let EncoderParams::Hier { fusion, .. } = &params.encoder else { panic!() };
        assert_eq!(fusion.w_input.shape(), &[768, 2048]);
        assert_eq!(fusion.w_hidden.shape(), &[512, 2048]);
    }

    #[test]
    fn flat2_consumes_raw_concatenation() {
        let cfg = ModelConfig { encoder: EncoderKind::Flat2, ..ModelConfig::desk_scale() };
        let params = ModelParams::init(&cfg, 0);
        let EncoderParams::Flat2 { lower, .. } = &params.encoder else { panic!() };
        assert_eq!(lower.w_input.shape()[0], 32 + 6 * 38);
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg.clone(), 4);
        for g in [Group::Generator, Group::Discriminator, Group::Classifier, Group::Monitor] {
            for (_, t) in model.params.group_mut(g) {
                t.data_mut().fill(0.0);
            }
        }
        let seq: Vec<Frame> = (0..4).map(|k| frame(&cfg, k as f64)).collect();
        let pred = model.predict(&seq, true).unwrap();
        assert_eq!(pred.steps.len(), 3);
        for s in &pred.steps {
            assert_eq!(s.success, 0.5);
            assert_eq!(s.score, 0.5);
            assert_eq!(s.next_pose, Pose::default());
        }
        assert!(pred.class_probs.iter().all(|&q| (q - 1.0 / 36.0).abs() < 1e-15));
        assert_eq!(pred.class, 0);
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 11);
        let seq: Vec<Frame> = (0..5).map(|k| frame(&cfg, k as f64)).collect();
        assert_eq!(model.predict(&seq, true).unwrap(), model.predict(&seq, true).unwrap());
    }

    #[test]
    fn score_invariant_to_full_turns() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 2);
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let a = tape.constant(Tensor::matrix(1, 6, vec![0.1, 0.2, 0.3, 10.0, 200.0, 359.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 6, vec![0.1, 0.2, 0.3, 370.0, -160.0, 719.0]).unwrap());
        let da = discriminate(&mut tape, &p.discriminator, h, a).unwrap();
        let db = discriminate(&mut tape, &p.discriminator, h, b).unwrap();
        assert!((tape.value(da).item() - tape.value(db).item()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.0; 9]), 0);
    }

    #[test]
    fn imu_perturbation_does_not_reach_image_cell() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 5);
        let run = |imu_bump: f64| {
            let mut tape = Tape::new();
            let p = model.bind_frozen(&mut tape);
            let st = EncoderState::zeros(&mut tape, &cfg, 1);
            let mut fr = frame(&cfg, 0.3);
            for s in fr.imu.samples.iter_mut() {
                s[0] += imu_bump;
                s[4] -= imu_bump;
            }
            let inp = StepInputs::gather(&[std::slice::from_ref(&fr)], 0, &model.normalizer).unwrap();
            let (f, a, g) = (tape.constant(inp.features), tape.constant(inp.accel), tape.constant(inp.gyro));
            let next = encode_step(&mut tape, &p.encoder, f, a, g, &st).unwrap();
            (tape.value(next.cells[0].0).clone(), tape.value(next.fused()).clone())
        };
        let (img0, fused0) = run(0.0);
        let (img1, fused1) = run(3.0);
        assert_eq!(img0, img1);
        assert_ne!(fused0, fused1);
    }
}
