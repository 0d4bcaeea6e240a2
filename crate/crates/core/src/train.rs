//! Joint training of the encoder and heads.
//!
//! Each batch runs two phases. The discriminator phase updates only the
//! discriminator on real and generated next poses, with the encodings and the
//! forecasts frozen as constants. The joint phase then updates the encoder,
//! generator, classifier and monitor on `L_Gen + L_cls + L_mon`, reading the
//! freshly updated discriminator as a constant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Fold;
use crate::losses::{self, LossBundle};
use crate::model::{
    classify, discriminate, encode_step, generate, monitor, EncoderState, Group, Model, ModelConfig, Normalizer,
    Params, StepInputs,
};
use crate::numcore::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use crate::simulator::{ClassRegime, Dataset, Sequence};

/// Ablation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Monitor only; the monitor sees a constant score of 0.5.
    Vanilla,
    /// Adds initial-state classification.
    Iosc,
    /// Adds adversarial trajectory forecasting and feeds the discriminator score to the monitor.
    Tf,
    /// Both auxiliary tasks, forecasting by regression alone.
    NoAdv,
    /// Both auxiliary tasks with adversarial forecasting.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vanilla, Variant::Iosc, Variant::Tf, Variant::NoAdv, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Iosc => "iosc",
            Variant::Tf => "tf",
            Variant::NoAdv => "noadv",
            Variant::Full => "full",
        }
    }

    pub fn forecasting(self) -> bool {
        matches!(self, Variant::Tf | Variant::NoAdv | Variant::Full)
    }

    pub fn classification(self) -> bool {
        matches!(self, Variant::Iosc | Variant::NoAdv | Variant::Full)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::Tf | Variant::Full)
    }

    /// Whether the monitor reads the discriminator score (otherwise 0.5).
    pub fn uses_score(self) -> bool {
        self.adversarial()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}' (expected vanilla | iosc | tf | noadv | full)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Layer sizes, encoder kind and class count.
    pub model: ModelConfig,
    /// Weight of the adversarial term in the generator objective.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip applied per optimizer phase.
    pub clip_norm: f64,
    /// Restrict forecasting and classification losses to successful sequences.
    pub aux_success_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            model: ModelConfig::desk_scale(),
            lambda: 1.0,
            learning_rate: 1e-4,
            batch_size: 24,
            epochs: 60,
            seed: 0,
            clip_norm: 5.0,
            aux_success_only: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("learning rate, batch size and clip norm must be positive".into()));
        }
        Ok(())
    }

    /// λ actually applied: zero when adversarial training is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.adversarial() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// One Adam state per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    states: BTreeMap<Group, AdamState>,
}

impl Optimizers {
    pub fn new(learning_rate: f64) -> Self {
        let cfg = AdamConfig { learning_rate, ..AdamConfig::default() };
        Self { states: Group::ALL.iter().map(|&g| (g, AdamState::new(cfg))).collect() }
    }

    pub fn steps(&self, group: Group) -> u64 {
        self.states[&group].step_count()
    }

    fn step(&mut self, model: &mut Model, group: Group, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let state = self.states.get_mut(&group).expect("every group has a state");
        let mut params = model.params.group_mut(group);
        let mut refs: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        state.step(&mut refs, grads)?;
        Ok(())
    }
}

/// Collects gradients of the given groups by parameter name.
fn collect_grads(bound: &Params<Var>, grads: &Gradients, groups: &[Group]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for &g in groups {
        for (name, &v) in bound.group(g) {
            out.insert(name, grads.wrt(v));
        }
    }
    out
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

fn pose_matrix(seqs: &[&Sequence], t: usize) -> Result<Tensor> {
    let data = seqs.iter().flat_map(|s| s.frames[t].pose.to_array()).collect();
    Ok(Tensor::matrix(seqs.len(), 6, data)?)
}

/// Which optimizer phases [`train_step_phases`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phases {
    pub discriminator: bool,
    pub joint: bool,
}

impl Phases {
    pub const BOTH: Phases = Phases { discriminator: true, joint: true };
}

/// One discriminator step followed by one joint step on `batch`.
pub fn train_step(
    batch: &[&Sequence],
    model: &mut Model,
    opt: &mut Optimizers,
    cfg: &TrainConfig,
    regime: ClassRegime,
) -> Result<LossBundle> {
    train_step_phases(batch, model, opt, cfg, regime, Phases::BOTH)
}

/// As [`train_step`], applying only the selected updates. Losses are computed
/// either way.
pub fn train_step_phases(
    batch: &[&Sequence],
    model: &mut Model,
    opt: &mut Optimizers,
    cfg: &TrainConfig,
    regime: ClassRegime,
    phases: Phases,
) -> Result<LossBundle> {
    let Some(first) = batch.first() else {
        return Err(Error::Invalid("empty batch".into()));
    };
    let len = first.len();
    if len < 2 || batch.iter().any(|s| s.len() != len) {
        return Err(Error::Invalid("batch needs equal-length sequences of at least 2 frames".into()));
    }
    if regime.num_classes() != model.config.num_classes {
        return Err(Error::Invalid(format!(
            "model has {} classes but the protocol uses {}",
            model.config.num_classes,
            regime.num_classes()
        )));
    }
    let variant = cfg.variant;
    let b = batch.len();
    let steps = len - 1;
    let success: Vec<bool> = batch.iter().map(|s| s.outcome.is_success()).collect();
    let aux_mask: Vec<bool> = if cfg.aux_success_only { success.clone() } else { vec![true; b] };
    let aux_rows = aux_mask.iter().filter(|&&m| m).count();
    let aux_w = losses::mean_weights(&aux_mask);
    let all_w = losses::mean_weights(&vec![true; b]);

    let forecasting = variant.forecasting() && aux_rows > 0;
    let classifying = variant.classification() && aux_rows > 0;
    let adversarial = variant.adversarial() && aux_rows > 0;
    let mut joint_groups = vec![Group::Encoder, Group::Monitor];
    if forecasting {
        joint_groups.push(Group::Generator);
    }
    if classifying {
        joint_groups.push(Group::Classifier);
    }

    let mut tape = Tape::new();
    let bound = model.params.map(&mut |g, _, t| {
        if joint_groups.contains(&g) {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    });
    let frames: Vec<&[crate::model::Frame]> = batch.iter().map(|s| s.frames.as_slice()).collect();
    let mut state = EncoderState::zeros(&mut tape, &model.config, b);
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let inputs = StepInputs::gather(&frames, t, &model.normalizer)?;
        let f = tape.constant(inputs.features);
        let a = tape.constant(inputs.accel);
        let g = tape.constant(inputs.gyro);
        state = encode_step(&mut tape, &bound.encoder, f, a, g, &state)?;
        hs.push(state.fused());
    }

    let mut forecasts = Vec::new();
    let mut truths = Vec::new();
    if variant.forecasting() {
        for (t, &h) in hs.iter().enumerate() {
            forecasts.push(generate(&mut tape, &bound.generator, h)?);
            truths.push(tape.constant(pose_matrix(batch, t + 1)?));
        }
    }

    let mut bundle = LossBundle { lambda: cfg.effective_lambda(), ..LossBundle::default() };

    // Discriminator phase: its own tape; encodings and forecasts enter as constants.
    if adversarial {
        let mut dtape = Tape::new();
        let dbound = model.params.map(&mut |g, _, t| {
            if g == Group::Discriminator {
                dtape.param(t.clone())
            } else {
                dtape.constant(t.clone())
            }
        });
        let mut real = Vec::with_capacity(steps);
        let mut fake = Vec::with_capacity(steps);
        for t in 0..steps {
            let h = dtape.constant(tape.value(hs[t]).clone());
            let x_real = dtape.constant(tape.value(truths[t]).clone());
            let x_fake = dtape.constant(tape.value(forecasts[t]).clone());
            real.push(discriminate(&mut dtape, &dbound.discriminator, h, x_real)?);
            fake.push(discriminate(&mut dtape, &dbound.discriminator, h, x_fake)?);
        }
        let l_dis = losses::discriminator_loss(&mut dtape, &real, &fake, &aux_w)?;
        bundle.dis = dtape.value(l_dis).item();
        let grads = dtape.backward(l_dis)?;
        let mut dg = collect_grads(&dbound, &grads, &[Group::Discriminator]);
        clip(&mut dg, cfg.clip_norm);
        if phases.discriminator {
            opt.step(model, Group::Discriminator, &dg)?;
        }
    }

    // Joint phase. The discriminator is re-read after its update, as constants.
    let disc = model.params.discriminator.map(Group::Discriminator, "discriminator", &mut |_, _, t| tape.constant(t.clone()));
    let mut total: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
        Ok(())
    };

    let mut scores = Vec::with_capacity(steps);
    if variant.forecasting() {
        let l_reg = losses::regression_loss(&mut tape, &forecasts, &truths, &aux_w)?;
        bundle.reg = tape.value(l_reg).item();
        let l_gen = if variant.adversarial() {
            let mut fake = Vec::with_capacity(steps);
            for (t, &h) in hs.iter().enumerate() {
                fake.push(discriminate(&mut tape, &disc, h, forecasts[t])?);
                // The monitor's score carries no gradient into any network.
                let hd = tape.detach(h);
                let xd = tape.detach(forecasts[t]);
                let d = discriminate(&mut tape, &disc, hd, xd)?;
                scores.push(tape.detach(d));
            }
            let l_adv = losses::adversarial_loss(&mut tape, &fake, &aux_w)?;
            bundle.adv = tape.value(l_adv).item();
            losses::generator_loss(&mut tape, l_reg, l_adv, cfg.lambda)?
        } else {
            let zero = tape.constant(Tensor::scalar(0.0));
            losses::generator_loss(&mut tape, l_reg, zero, 0.0)?
        };
        bundle.gen = tape.value(l_gen).item();
        if forecasting {
            add_term(&mut tape, l_gen)?;
        }
    }
    if scores.is_empty() {
        let half = tape.constant(Tensor::full(&[b, 1], 0.5));
        scores = vec![half; steps];
    }

    if variant.classification() {
        let labels: Vec<usize> = batch.iter().map(|s| regime.class_of(s.state)).collect();
        let q = classify(&mut tape, &bound.classifier, *hs.last().expect("steps >= 1"))?;
        let l_cls = losses::classification_loss(&mut tape, q, &labels, &aux_w)?;
        bundle.cls = tape.value(l_cls).item();
        if classifying {
            add_term(&mut tape, l_cls)?;
        }
    }

    let mut probs = Vec::with_capacity(steps);
    for (t, &h) in hs.iter().enumerate() {
        probs.push(monitor(&mut tape, &bound.monitor, h, scores[t])?);
    }
    let l_mon = losses::monitoring_loss(&mut tape, &probs, &success, &all_w)?;
    bundle.mon = tape.value(l_mon).item();
    add_term(&mut tape, l_mon)?;

    if !bundle.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss: {bundle:?}")));
    }
    let loss = total.expect("monitor term always present");
    let grads = tape.backward(loss)?;
    let mut jg = collect_grads(&bound, &grads, &joint_groups);
    clip(&mut jg, cfg.clip_norm);
    if phases.joint {
        for &g in &joint_groups {
            opt.step(model, g, &jg)?;
        }
    }
    Ok(bundle)
}

/// Mean loss bundle of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBundle,
}

impl EpochLog {
    /// `epoch L_reg L_adv L_Gen L_Dis L_cls L_mon`, tab-separated.
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, l.reg, l.adv, l.gen, l.dis, l.cls, l.mon
        )
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub fold: Option<crate::eval::SplitSpec>,
    pub log: Vec<EpochLog>,
}

/// Trains on the training part of `fold`. Deterministic in its arguments.
pub fn train_run(cfg: &TrainConfig, dataset: &Dataset, fold: &Fold) -> Result<TrainedModel> {
    train_run_with(cfg, dataset, fold, |_| {})
}

/// As [`train_run`], calling `on_epoch` after each epoch.
pub fn train_run_with(
    cfg: &TrainConfig,
    dataset: &Dataset,
    fold: &Fold,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let regime = fold.spec.scheme.regime();
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = regime.num_classes();
    let cfg = TrainConfig { model: model_cfg.clone(), ..cfg.clone() };
    if fold.train.is_empty() {
        return Err(Error::Invalid("training fold is empty".into()));
    }
    let train: Vec<&Sequence> = fold.train.iter().map(|&i| &dataset.sequences[i]).collect();
    if let Some(s) = train.iter().find(|s| s.frames.first().is_some_and(|f| f.feature.len() != model_cfg.d_img)) {
        return Err(Error::Invalid(format!(
            "sequence {} has {}-d visual features, model expects {}",
            s.id(),
            s.frames[0].feature.len(),
            model_cfg.d_img
        )));
    }

    let mut model = Model::new(model_cfg.clone(), cfg.seed);
    model.normalizer = Normalizer::fit(model_cfg.d_img, train.iter().flat_map(|s| s.frames.iter()));
    let mut opt = Optimizers::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A_F00D_CAFE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBundle::default();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| train[i]).collect();
            let l = train_step(&batch, &mut model, &mut opt, &cfg, regime)
                .map_err(|e| Error::Diverged { epoch, batch: bi, detail: e.to_string() })?;
            sum.reg += l.reg;
            sum.adv += l.adv;
            sum.gen += l.gen;
            sum.dis += l.dis;
            sum.cls += l.cls;
            sum.mon += l.mon;
            batches += 1;
        }
        let n = batches as f64;
        let losses = LossBundle {
            reg: sum.reg / n,
            adv: sum.adv / n,
            gen: sum.gen / n,
            dis: sum.dis / n,
            cls: sum.cls / n,
            mon: sum.mon / n,
            lambda: cfg.effective_lambda(),
        };
        let entry = EpochLog { epoch: epoch + 1, losses };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedModel { model, config: cfg, fold: Some(fold.spec), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{synth_sequence, InitialState, Outcome, SimConfig};

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            model: ModelConfig {
                d_img: 6,
                imu_samples: 3,
                hidden_img: 5,
                hidden_pos: 3,
                hidden_rot: 3,
                hidden_fuse: 5,
                generator_width: 4,
                discriminator_width: 4,
                monitor_width: 6,
                num_classes: 36,
                ..ModelConfig::desk_scale()
            },
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn tiny_batch(outcomes: &[Outcome]) -> Vec<Sequence> {
        let sim = SimConfig { frames: 5, d_img: 6, imu_samples: 3, trials: 1, ..SimConfig::default() };
        outcomes
            .iter()
            .enumerate()
            .map(|(i, &o)| synth_sequence(&sim, InitialState::from_index(i * 5).unwrap(), i % 5, 0, o).unwrap())
            .collect()
    }

    fn group_snapshot(model: &Model, g: Group) -> Vec<Tensor> {
        model.params.group(g).into_iter().map(|(_, t)| t.clone()).collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn vanilla_leaves_aux_heads_untouched() {
        let cfg = tiny_cfg(Variant::Vanilla);
        let seqs = tiny_batch(&[Outcome::Success, Outcome::Failure, Outcome::Success]);
        let batch: Vec<&Sequence> = seqs.iter().collect();
        let mut model = Model::new(cfg.model.clone(), 1);
        let before = model.clone();
        let mut opt = Optimizers::new(cfg.learning_rate);
        let l = train_step(&batch, &mut model, &mut opt, &cfg, ClassRegime::Full).unwrap();
        assert_eq!((l.reg, l.adv, l.gen, l.dis, l.cls), (0.0, 0.0, 0.0, 0.0, 0.0));
        for g in [Group::Generator, Group::Discriminator, Group::Classifier] {
            assert_eq!(group_snapshot(&model, g), group_snapshot(&before, g), "{g:?}");
        }
        assert_ne!(group_snapshot(&model, Group::Monitor), group_snapshot(&before, Group::Monitor));
    }

    #[test]
    fn noadv_generator_loss_is_regression() {
        let cfg = tiny_cfg(Variant::NoAdv);
        let seqs = tiny_batch(&[Outcome::Success, Outcome::Failure]);
        let batch: Vec<&Sequence> = seqs.iter().collect();
        let mut model = Model::new(cfg.model.clone(), 2);
        let before = model.clone();
        let mut opt = Optimizers::new(cfg.learning_rate);
        let l = train_step(&batch, &mut model, &mut opt, &cfg, ClassRegime::Full).unwrap();
        assert_eq!(l.gen, l.reg);
        assert_eq!(l.lambda, 0.0);
        assert_eq!(group_snapshot(&model, Group::Discriminator), group_snapshot(&before, Group::Discriminator));
    }

    #[test]
    fn failure_only_batch_updates_monitor_path_only() {
        let cfg = tiny_cfg(Variant::Full);
        let seqs = tiny_batch(&[Outcome::Failure, Outcome::Failure]);
        let batch: Vec<&Sequence> = seqs.iter().collect();
        let mut model = Model::new(cfg.model.clone(), 3);
        let before = model.clone();
        let mut opt = Optimizers::new(cfg.learning_rate);
        let l = train_step(&batch, &mut model, &mut opt, &cfg, ClassRegime::Full).unwrap();
        assert_eq!((l.reg, l.adv, l.dis, l.cls), (0.0, 0.0, 0.0, 0.0));
        assert!(l.mon > 0.0);
        for g in [Group::Generator, Group::Discriminator, Group::Classifier] {
            assert_eq!(group_snapshot(&model, g), group_snapshot(&before, g), "{g:?}");
        }
        assert_ne!(group_snapshot(&model, Group::Encoder), group_snapshot(&before, Group::Encoder));
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = tiny_cfg(Variant::Full);
        let mut model = Model::new(cfg.model.clone(), 0);
        let mut opt = Optimizers::new(cfg.learning_rate);
        assert!(train_step(&[], &mut model, &mut opt, &cfg, ClassRegime::Full).is_err());
    }

    #[test]
    fn class_regime_mismatch_rejected() {
        let cfg = tiny_cfg(Variant::Full);
        let seqs = tiny_batch(&[Outcome::Success]);
        let batch: Vec<&Sequence> = seqs.iter().collect();
        let mut model = Model::new(cfg.model.clone(), 0);
        let mut opt = Optimizers::new(cfg.learning_rate);
        assert!(train_step(&batch, &mut model, &mut opt, &cfg, ClassRegime::FillOnly).is_err());
    }

    #[test]
    fn untrained_zero_monitor_gives_ln2() {
        let cfg = tiny_cfg(Variant::Vanilla);
        let seqs = tiny_batch(&[Outcome::Success, Outcome::Failure, Outcome::Success, Outcome::Failure]);
        let batch: Vec<&Sequence> = seqs.iter().collect();
        let mut model = Model::new(cfg.model.clone(), 5);
        for (_, t) in model.params.group_mut(Group::Monitor) {
            t.data_mut().fill(0.0);
        }
        let mut opt = Optimizers::new(cfg.learning_rate);
        let l = train_step(&batch, &mut model, &mut opt, &cfg, ClassRegime::Full).unwrap();
        assert!((l.mon - std::f64::consts::LN_2).abs() < 1e-6);
    }
}
