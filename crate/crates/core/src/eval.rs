//! Leave-one-out protocols, metrics and report tables.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Frame, Pose};
use crate::simulator::{ClassRegime, Container, Dataset, Outcome, Sequence};
use crate::train::TrainedModel;

/// Generalization protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    CrossTrial,
    CrossContainer,
    CrossUser,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::CrossTrial, Scheme::CrossContainer, Scheme::CrossUser];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::CrossTrial => "cross-trial",
            Scheme::CrossContainer => "cross-container",
            Scheme::CrossUser => "cross-user",
        }
    }

    /// Classifier label space: held-out containers leave only the fill levels.
    pub fn regime(self) -> ClassRegime {
        match self {
            Scheme::CrossContainer => ClassRegime::FillOnly,
            _ => ClassRegime::Full,
        }
    }

    /// Identity a sequence is grouped by under this scheme.
    pub fn identity(self, seq: &Sequence) -> usize {
        match self {
            Scheme::CrossTrial => seq.trial,
            Scheme::CrossContainer => seq.state.container.index(),
            Scheme::CrossUser => seq.user,
        }
    }

    fn format_identity(self, id: usize) -> String {
        match self {
            Scheme::CrossContainer => Container::ALL.get(id).map(|c| c.letter().to_string()).unwrap_or_else(|| id.to_string()),
            _ => id.to_string(),
        }
    }

    fn parse_identity(self, s: &str) -> Result<usize> {
        let bad = || Error::Invalid(format!("bad held-out identity '{s}' for {}", self.name()));
        match self {
            Scheme::CrossContainer => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_alphabetic() => Ok(Container::from_letter(c)?.index()),
                    _ => s.parse().map_err(|_| bad()),
                }
            }
            _ => s.parse().map_err(|_| bad()),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}' (expected cross-trial | cross-container | cross-user)"))
    }
}

/// A protocol and the identity it holds out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SplitSpec {
    pub scheme: Scheme,
    pub held_out: usize,
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme, self.scheme.format_identity(self.held_out))
    }
}

impl FromStr for SplitSpec {
    type Err = Error;
    /// `scheme:identity`, e.g. `cross-user:3` or `cross-container:d`.
    fn from_str(s: &str) -> Result<Self> {
        let (scheme, id) = s.split_once(':').ok_or_else(|| Error::Invalid(format!("split '{s}' is not scheme:identity")))?;
        let scheme: Scheme = scheme.parse().map_err(Error::Invalid)?;
        Ok(Self { scheme, held_out: scheme.parse_identity(id)? })
    }
}

/// Indices into a dataset: everything with the held-out identity is tested.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct identity of the scheme, in increasing identity order.
pub fn make_folds(dataset: &Dataset, scheme: Scheme) -> Result<Vec<Fold>> {
    let ids: BTreeSet<usize> = dataset.sequences.iter().map(|s| scheme.identity(s)).collect();
    if ids.len() < 2 {
        return Err(Error::Invalid(format!(
            "{} needs at least two distinct identities, dataset has {}",
            scheme,
            ids.len()
        )));
    }
    ids.into_iter().map(|id| fold_for(dataset, SplitSpec { scheme, held_out: id })).collect()
}

/// The fold holding out `spec.held_out`.
pub fn fold_for(dataset: &Dataset, spec: SplitSpec) -> Result<Fold> {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| spec.scheme.identity(&dataset.sequences[i]) == spec.held_out);
    if test.is_empty() {
        return Err(Error::Invalid(format!("no sequences with held-out identity {spec}")));
    }
    if train.is_empty() {
        return Err(Error::Invalid(format!("holding out {spec} leaves no training data")));
    }
    Ok(Fold { spec, train, test })
}

/// Sequence label from per-step success probabilities: success iff the mean
/// exceeds 0.5; an exact 0.5 is a failure.
pub fn sequence_verdict(success_probs: &[f64]) -> Outcome {
    let mean = success_probs.iter().sum::<f64>() / success_probs.len().max(1) as f64;
    if mean > 0.5 {
        Outcome::Success
    } else {
        Outcome::Failure
    }
}

/// Smallest absolute angle between two headings, in `[0, 180]` degrees.
pub fn wrapped_angle_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Mean Euclidean position error (m) and mean per-axis wrapped rotation error (°).
pub fn trajectory_errors(pairs: &[(Pose, Pose)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let mut pos = 0.0;
    let mut rot = 0.0;
    for (pred, truth) in pairs {
        pos += pred.position.iter().zip(&truth.position).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        rot += pred.rotation.iter().zip(&truth.rotation).map(|(&a, &b)| wrapped_angle_error(a, b)).sum::<f64>() / 3.0;
    }
    let n = pairs.len() as f64;
    (pos / n, rot / n)
}

/// Metrics of one test fold. Inapplicable metrics are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    pub spec: SplitSpec,
    pub test_sequences: usize,
    /// Sequence-level success/failure accuracy, percent.
    pub success_accuracy: f64,
    /// Per-step success/failure accuracy, percent.
    pub step_accuracy: f64,
    pub class_accuracy: Option<f64>,
    pub position_error: Option<f64>,
    pub rotation_error: Option<f64>,
}

/// Per-fold metrics and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub folds: Vec<FoldMetrics>,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn success_accuracy(&self) -> f64 {
        mean_opt(self.folds.iter().map(|f| Some(f.success_accuracy))).unwrap_or(0.0)
    }

    pub fn step_accuracy(&self) -> f64 {
        mean_opt(self.folds.iter().map(|f| Some(f.step_accuracy))).unwrap_or(0.0)
    }

    pub fn class_accuracy(&self) -> Option<f64> {
        mean_opt(self.folds.iter().map(|f| f.class_accuracy))
    }

    pub fn position_error(&self) -> Option<f64> {
        mean_opt(self.folds.iter().map(|f| f.position_error))
    }

    pub fn rotation_error(&self) -> Option<f64> {
        mean_opt(self.folds.iter().map(|f| f.rotation_error))
    }
}

const EVAL_BATCH: usize = 64;

/// Evaluates a trained model on the test part of `fold`.
pub fn evaluate_fold(trained: &TrainedModel, dataset: &Dataset, fold: &Fold) -> Result<FoldMetrics> {
    let regime = fold.spec.scheme.regime();
    let model = &trained.model;
    if model.config.num_classes != regime.num_classes() {
        return Err(Error::Invalid(format!(
            "checkpoint classifies {} initial states but {} uses {}",
            model.config.num_classes,
            fold.spec.scheme,
            regime.num_classes()
        )));
    }
    let variant = trained.config.variant;
    let test: Vec<&Sequence> = fold.test.iter().map(|&i| &dataset.sequences[i]).collect();
    let mut correct = 0usize;
    let mut step_correct = 0usize;
    let mut steps = 0usize;
    let mut class_hits = 0usize;
    let mut class_total = 0usize;
    let mut pairs = Vec::new();
    for chunk in test.chunks(EVAL_BATCH) {
        let frames: Vec<&[Frame]> = chunk.iter().map(|s| s.frames.as_slice()).collect();
        let preds = model.predict_batch(&frames, variant.uses_score())?;
        for (seq, pred) in chunk.iter().zip(&preds) {
            let ys: Vec<f64> = pred.steps.iter().map(|s| s.success).collect();
            if sequence_verdict(&ys) == seq.outcome {
                correct += 1;
            }
            let label = seq.outcome.is_success();
            step_correct += ys.iter().filter(|&&y| (y > 0.5) == label).count();
            steps += ys.len();
            let scored = seq.outcome.is_success() || !trained.config.aux_success_only;
            if scored {
                if pred.class == regime.class_of(seq.state) {
                    class_hits += 1;
                }
                class_total += 1;
                for (t, sp) in pred.steps.iter().enumerate() {
                    pairs.push((sp.next_pose, seq.frames[t + 1].pose));
                }
            }
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let (pos, rot) = trajectory_errors(&pairs);
    let forecast = variant.forecasting() && !pairs.is_empty();
    Ok(FoldMetrics {
        spec: fold.spec,
        test_sequences: test.len(),
        success_accuracy: pct(correct, test.len()),
        step_accuracy: pct(step_correct, steps),
        class_accuracy: (variant.classification() && class_total > 0).then(|| pct(class_hits, class_total)),
        position_error: forecast.then_some(pos),
        rotation_error: forecast.then_some(rot),
    })
}

fn cell(v: Option<f64>, precision: usize, suffix: &str) -> String {
    match v {
        Some(x) => format!("{x:.precision$}{suffix}"),
        None => "N/A".to_string(),
    }
}

/// Header lines naming the aggregation and error conventions.
pub const REPORT_CONVENTIONS: [&str; 2] = [
    "sequence verdict: mean per-step success probability > 0.5 (ties are failures)",
    "position error: mean Euclidean distance in meters; rotation error: mean wrapped per-axis difference in degrees",
];

/// Plain-text table, one averaged row per report.
pub fn render_table(scheme: Scheme, reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    writeln!(out, "# scheme: {scheme}").unwrap();
    for c in REPORT_CONVENTIONS {
        writeln!(out, "# {c}").unwrap();
    }
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    writeln!(
        out,
        "{:<width$} | {:>18} | {:>19} | {:>17} | {:>19}",
        "Model", "Succ./Fail. Acc.", "Classification Acc.", "Position Err. (m)", "Rotation Err. (deg)"
    )
    .unwrap();
    writeln!(out, "{}", "-".repeat(width + 84)).unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<width$} | {:>18} | {:>19} | {:>17} | {:>19}",
            r.label,
            cell(Some(r.success_accuracy()), 2, " %"),
            cell(r.class_accuracy(), 2, " %"),
            cell(r.position_error(), 4, ""),
            cell(r.rotation_error(), 2, ""),
        )
        .unwrap();
    }
    out
}

/// CSV with one row per fold and a `mean` row per report.
pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "model,fold,held_out,test_sequences,success_acc_pct,step_acc_pct,class_acc_pct,position_err_m,rotation_err_deg\n",
    );
    let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
    for r in reports {
        for f in &r.folds {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                f.spec.scheme,
                f.spec.scheme.format_identity(f.spec.held_out),
                f.test_sequences,
                num(Some(f.success_accuracy)),
                num(Some(f.step_accuracy)),
                num(f.class_accuracy),
                num(f.position_error),
                num(f.rotation_error)
            )
            .unwrap();
        }
        let n: usize = r.folds.iter().map(|f| f.test_sequences).sum();
        writeln!(
            out,
            "{},mean,all,{},{},{},{},{},{}",
            r.label,
            n,
            num(Some(r.success_accuracy())),
            num(Some(r.step_accuracy())),
            num(r.class_accuracy()),
            num(r.position_error()),
            num(r.rotation_error())
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{synth_dataset, SimConfig};

    fn tiny_dataset(users: usize, trials: usize) -> Dataset {
        synth_dataset(&SimConfig { frames: 3, d_img: 4, imu_samples: 2, users, trials, ..SimConfig::default() }).unwrap()
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(sequence_verdict(&[0.9; 5]), Outcome::Success);
        assert_eq!(sequence_verdict(&[0.5; 5]), Outcome::Failure);
        assert_eq!(sequence_verdict(&[0.2, 0.9, 0.9, 0.9]), Outcome::Success);
        assert_eq!(sequence_verdict(&[0.9, 0.2, 0.2, 0.2]), Outcome::Failure);
    }

    #[test]
    fn trajectory_error_cases() {
        let p = Pose { position: [0.1, 0.2, 0.3], rotation: [10.0, 20.0, 30.0] };
        assert_eq!(trajectory_errors(&[(p, p)]), (0.0, 0.0));
        let mut q = p;
        q.position[0] += 0.01;
        let (pos, rot) = trajectory_errors(&[(q, p)]);
        assert!((pos - 0.01).abs() < 1e-12 && rot == 0.0);
        let a = Pose { position: [0.0; 3], rotation: [359.0, 0.0, 0.0] };
        let b = Pose { position: [0.0; 3], rotation: [0.0, 0.0, 0.0] };
        let (_, rot) = trajectory_errors(&[(a, b)]);
        assert!((rot - 1.0 / 3.0).abs() < 1e-12);
        assert!((wrapped_angle_error(359.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fold_counts_per_scheme() {
        let ds = tiny_dataset(5, 5);
        assert_eq!(ds.len(), 1800);
        let user = make_folds(&ds, Scheme::CrossUser).unwrap();
        assert_eq!(user.len(), 5);
        assert!(user.iter().all(|f| f.test.len() == 360));
        assert_eq!(make_folds(&ds, Scheme::CrossTrial).unwrap().len(), 5);
        let cont = make_folds(&ds, Scheme::CrossContainer).unwrap();
        assert_eq!(cont.len(), 4);
        assert_eq!(Scheme::CrossContainer.regime().num_classes(), 9);
        for scheme in Scheme::ALL {
            let folds = make_folds(&ds, scheme).unwrap();
            let mut seen = vec![0usize; ds.len()];
            for f in &folds {
                assert_eq!(f.train.len() + f.test.len(), ds.len());
                for &i in &f.test {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{scheme}");
        }
    }

    #[test]
    fn missing_identity_rejected() {
        let ds = tiny_dataset(5, 1);
        assert!(make_folds(&ds, Scheme::CrossTrial).is_err());
        assert!(fold_for(&ds, SplitSpec { scheme: Scheme::CrossUser, held_out: 7 }).is_err());
    }

    #[test]
    fn split_spec_parsing() {
        let s: SplitSpec = "cross-container:d".parse().unwrap();
        assert_eq!(s, SplitSpec { scheme: Scheme::CrossContainer, held_out: 2 });
        assert_eq!(s.to_string(), "cross-container:d");
        let u: SplitSpec = "cross-user:3".parse().unwrap();
        assert_eq!(u.held_out, 3);
        assert!("cross-user".parse::<SplitSpec>().is_err());
        assert!("sideways:1".parse::<SplitSpec>().is_err());
    }

    #[test]
    fn table_marks_missing_metrics() {
        let f = FoldMetrics {
            spec: SplitSpec { scheme: Scheme::CrossUser, held_out: 0 },
            test_sequences: 10,
            success_accuracy: 90.0,
            step_accuracy: 80.0,
            class_accuracy: None,
            position_error: None,
            rotation_error: None,
        };
        let r = MetricsReport { label: "vanilla/hier".into(), folds: vec![f] };
        let t = render_table(Scheme::CrossUser, &[r.clone()]);
        assert!(t.contains("90.00 %") && t.contains("N/A"));
        let c = render_csv(&[r]);
        assert!(c.lines().nth(1).unwrap().ends_with("NA,NA,NA"));
    }
}
