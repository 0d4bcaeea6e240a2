//! Seeded kinematic generator of pouring demonstrations.
//!
//! A demonstration is simulated on a fine time grid (one point per IMU
//! sample). The wrist approaches the target container along an arc, then
//! tilts the source container toward a pouring angle that depends on the
//! container and its remaining fill. Liquid flows once the tilt passes the
//! container's pour threshold. Successful pours return upright when the target
//! reaches 80% or the source runs dry; failed pours overshoot the tilt at a
//! style-dependent moment and spill.
//!
//! Camera frames are every `N`-th grid point. IMU samples are finite
//! differences of the grid trajectory, so summing a window's angular
//! velocities times the sample period reproduces the frame-to-frame rotation
//! change exactly before noise. Visual features are a fixed random projection
//! of an instantaneous scene descriptor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{wrap_degrees, Frame, ImuWindow, Pose};

/// Source containers, in index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Container {
    B,
    C,
    D,
    E,
}

impl Container {
    pub const ALL: [Container; 4] = [Container::B, Container::C, Container::D, Container::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['b', 'c', 'd', 'e'][self.index()]
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c {
            'b' => Ok(Container::B),
            'c' => Ok(Container::C),
            'd' => Ok(Container::D),
            'e' => Ok(Container::E),
            other => Err(Error::Invalid(format!("unknown container '{other}' (expected b, c, d or e)"))),
        }
    }

    fn physics(self) -> ContainerPhysics {
        // Angles in degrees; capacity relative to the target container.
        match self {
            Container::B => ContainerPhysics { angle_full: 28.0, angle_empty: 92.0, flow_gain: 0.055, capacity: 1.2, reach: 0.00 },
            Container::C => ContainerPhysics { angle_full: 40.0, angle_empty: 100.0, flow_gain: 0.040, capacity: 1.6, reach: 0.03 },
            Container::D => ContainerPhysics { angle_full: 18.0, angle_empty: 80.0, flow_gain: 0.070, capacity: 0.9, reach: -0.02 },
            Container::E => ContainerPhysics { angle_full: 48.0, angle_empty: 110.0, flow_gain: 0.032, capacity: 2.0, reach: 0.05 },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ContainerPhysics {
    angle_full: f64,
    angle_empty: f64,
    /// Target-capacity fraction per second per degree past the threshold.
    flow_gain: f64,
    capacity: f64,
    /// Extra horizontal offset of the pouring position, meters.
    reach: f64,
}

impl ContainerPhysics {
    fn threshold(&self, source_fill: f64) -> f64 {
        self.angle_empty - (self.angle_empty - self.angle_full) * source_fill
    }
}

pub const SOURCE_FILLS: [u8; 3] = [10, 50, 80];
pub const TARGET_FILLS: [u8; 3] = [0, 30, 50];
pub const NUM_STATES: usize = 36;
pub const NUM_FILL_STATES: usize = 9;

/// Initial object state: source container, source fill α and target fill β (percent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InitialState {
    pub container: Container,
    pub alpha: u8,
    pub beta: u8,
}

impl InitialState {
    pub fn new(container: Container, alpha: u8, beta: u8) -> Result<Self> {
        let s = Self { container, alpha, beta };
        s.alpha_index()?;
        s.beta_index()?;
        Ok(s)
    }

    fn alpha_index(&self) -> Result<usize> {
        SOURCE_FILLS
            .iter()
            .position(|&a| a == self.alpha)
            .ok_or_else(|| Error::Invalid(format!("source fill {}% not in {SOURCE_FILLS:?}", self.alpha)))
    }

    fn beta_index(&self) -> Result<usize> {
        TARGET_FILLS
            .iter()
            .position(|&b| b == self.beta)
            .ok_or_else(|| Error::Invalid(format!("target fill {}% not in {TARGET_FILLS:?}", self.beta)))
    }

    /// Container-major index in `0..36`.
    pub fn index(&self) -> usize {
        self.container.index() * 9 + self.fill_index()
    }

    /// Index of (α, β) alone, in `0..9`.
    pub fn fill_index(&self) -> usize {
        self.alpha_index().expect("validated") * 3 + self.beta_index().expect("validated")
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= NUM_STATES {
            return Err(Error::Invalid(format!("initial state index {i} out of range 0..36")));
        }
        Ok(Self { container: Container::ALL[i / 9], alpha: SOURCE_FILLS[(i % 9) / 3], beta: TARGET_FILLS[i % 3] })
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_STATES).map(|i| Self::from_index(i).expect("in range"))
    }
}

/// Label space of the initial-state classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassRegime {
    /// All 36 (container, α, β) states.
    Full,
    /// The 9 (α, β) states, for protocols that hold out a container.
    FillOnly,
}

impl ClassRegime {
    pub fn num_classes(self) -> usize {
        match self {
            ClassRegime::Full => NUM_STATES,
            ClassRegime::FillOnly => NUM_FILL_STATES,
        }
    }

    pub fn class_of(self, state: InitialState) -> usize {
        match self {
            ClassRegime::Full => state.index(),
            ClassRegime::FillOnly => state.fill_index(),
        }
    }
}

/// Success or failure of a demonstration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }
}

/// Pouring style of one demonstrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserStyle {
    /// Maximum tilt speed, deg/s.
    pub tilt_rate: f64,
    /// Height of the approach arc, meters.
    pub arc_height: f64,
    /// Duration of the approach, seconds.
    pub approach_time: f64,
    /// Degrees tilted past the pour threshold while pouring.
    pub pour_margin: f64,
    /// Delay after the approach at which a failed pour starts overshooting, seconds.
    pub slip_delay: f64,
    /// Extra tilt of a failed pour, degrees.
    pub overshoot: f64,
    /// Heading of the wrist, degrees.
    pub yaw: f64,
}

impl UserStyle {
    pub fn defaults() -> [UserStyle; 5] {
        [
            UserStyle { tilt_rate: 85.0, arc_height: 0.08, approach_time: 0.70, pour_margin: 12.0, slip_delay: 0.45, overshoot: 42.0, yaw: 354.0 },
            UserStyle { tilt_rate: 110.0, arc_height: 0.05, approach_time: 0.55, pour_margin: 16.0, slip_delay: 0.35, overshoot: 38.0, yaw: 8.0 },
            UserStyle { tilt_rate: 135.0, arc_height: 0.11, approach_time: 0.80, pour_margin: 10.0, slip_delay: 0.30, overshoot: 46.0, yaw: 20.0 },
            UserStyle { tilt_rate: 70.0, arc_height: 0.07, approach_time: 0.60, pour_margin: 18.0, slip_delay: 0.55, overshoot: 40.0, yaw: 341.0 },
            UserStyle { tilt_rate: 160.0, arc_height: 0.04, approach_time: 0.50, pour_margin: 14.0, slip_delay: 0.40, overshoot: 50.0, yaw: 2.0 },
        ]
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Frames per sequence (`T`).
    pub frames: usize,
    pub d_img: usize,
    /// IMU samples per frame window (`N`).
    pub imu_samples: usize,
    /// Seconds between camera frames.
    pub frame_period: f64,
    /// Users `0..users` are generated, each with its own style.
    pub users: usize,
    /// Repetitions per (state, user, outcome).
    pub trials: usize,
    /// Gaussian noise as a fraction of each channel's signal standard deviation.
    pub noise_scale: f64,
    pub styles: Vec<UserStyle>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            d_img: 32,
            imu_samples: 38,
            frame_period: 0.2,
            users: 5,
            trials: 5,
            noise_scale: 0.05,
            styles: UserStyle::defaults().to_vec(),
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Invalid(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.d_img == 0 || self.imu_samples == 0 || self.trials == 0 {
            return Err(Error::Invalid("d_img, imu_samples and trials must be positive".into()));
        }
        if self.users == 0 || self.users > self.styles.len() {
            return Err(Error::Invalid(format!("users must be in 1..={}, got {}", self.styles.len(), self.users)));
        }
        if !(self.frame_period > 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::Invalid("frame_period must be positive and noise_scale non-negative".into()));
        }
        for (i, a) in self.styles.iter().enumerate() {
            for b in &self.styles[i + 1..] {
                if a.tilt_rate == b.tilt_rate {
                    return Err(Error::Invalid("user tilt rates must be pairwise distinct".into()));
                }
            }
        }
        Ok(())
    }
}

/// One demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub outcome: Outcome,
    pub state: InitialState,
    pub user: usize,
    pub trial: usize,
    /// First frame (1-based) showing spilled liquid; `None` for successes.
    pub spill_onset: Option<usize>,
}

impl Sequence {
    pub fn id(&self) -> String {
        format!(
            "u{}_t{}_z{:02}_{}",
            self.user,
            self.trial,
            self.state.index(),
            if self.outcome.is_success() { "s" } else { "f" }
        )
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Ordered collection of demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one sequence, derived from the master seed and its identity tuple.
pub fn sequence_seed(master: u64, state: InitialState, user: usize, trial: usize, outcome: Outcome) -> u64 {
    let mut h = mix(master);
    for part in [state.index() as u64, user as u64, trial as u64, outcome as u64] {
        h = mix(h ^ part);
    }
    h
}

const DESCRIPTOR_LEN: usize = 10;

/// Fixed projection from scene descriptors to visual features, `[d_img][DESCRIPTOR_LEN]`.
fn projection(master: u64, d_img: usize) -> Vec<[f64; DESCRIPTOR_LEN]> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(master ^ 0x5EED_F00D));
    let normal = Normal::new(0.0, 1.0 / (DESCRIPTOR_LEN as f64).sqrt()).expect("valid");
    (0..d_img).map(|_| std::array::from_fn(|_| normal.sample(&mut rng))).collect()
}

/// Kinematic state on the fine grid.
struct Trace {
    /// Position per grid point, including one padding point on each side.
    position: Vec<[f64; 3]>,
    rotation: Vec<[f64; 3]>,
    source_fill: Vec<f64>,
    target_fill: Vec<f64>,
    spilled: Vec<bool>,
    approach: Vec<f64>,
}

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

struct Trial {
    style: UserStyle,
    physics: ContainerPhysics,
    start: [f64; 3],
    pour_point: [f64; 3],
    approach_time: f64,
    slip_time: f64,
    margin: f64,
    rate: f64,
    wobble_phase: f64,
}

fn simulate(cfg: &SimConfig, state: InitialState, outcome: Outcome, tr: &Trial) -> Trace {
    let n = cfg.imu_samples;
    let h = cfg.frame_period / n as f64;
    // Grid: index 0 is padding at τ = -dt - h; index 1 is τ = -dt; frame f sits at 1 + (f + 1)·N.
    let points = (cfg.frames + 1) * n + 3;
    let mut out = Trace {
        position: Vec::with_capacity(points),
        rotation: Vec::with_capacity(points),
        source_fill: Vec::with_capacity(points),
        target_fill: Vec::with_capacity(points),
        spilled: Vec::with_capacity(points),
        approach: Vec::with_capacity(points),
    };
    let mut tilt = 0.0_f64;
    let mut tilt_rate = 0.0_f64;
    let mut src = state.alpha as f64 / 100.0;
    let mut tgt = state.beta as f64 / 100.0;
    let mut spilled = false;
    let mut done = false;
    let failure = outcome == Outcome::Failure;
    let spill_gap = 20.0;
    for k in 0..points {
        let tau = (k as f64 - 1.0 - n as f64) * h;
        let s = smootherstep(tau / tr.approach_time);
        let pouring = tau >= tr.approach_time;
        let slipping = failure && tau >= tr.slip_time;
        let thr = tr.physics.threshold(src);
        let (target_angle, rate_limit) = if !pouring || done {
            (0.0, tr.rate)
        } else if slipping {
            (thr + tr.margin + tr.style.overshoot, 2.0 * tr.rate)
        } else {
            (thr + tr.margin, tr.rate)
        };
        // Rate command with a first-order lag keeps the angular velocity continuous.
        let command = ((target_angle - tilt) / 0.12).clamp(-rate_limit, rate_limit);
        tilt_rate += (command - tilt_rate) * (h / 0.06).min(1.0);
        if tau >= 0.0 {
            tilt += tilt_rate * h;
        }
        let excess = (tilt - thr).max(0.0);
        if excess > 0.0 && src > 0.0 {
            let volume = (tr.physics.flow_gain * excess * h).min(src * tr.physics.capacity);
            src -= volume / tr.physics.capacity;
            tgt += volume;
        }
        if failure && (tilt > thr + tr.margin + spill_gap || tgt > 1.0) {
            spilled = true;
        }
        if !failure && (tgt >= 0.8 || src < 0.02) {
            done = true;
        }
        if failure && spilled && tau > tr.slip_time + 0.4 {
            done = true;
        }
        let lift = tr.style.arc_height * (std::f64::consts::PI * s).sin();
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = tr.start[i] + (tr.pour_point[i] - tr.start[i]) * s;
        }
        p[2] += lift - 0.0009 * tilt;
        p[1] += 0.0006 * tilt;
        let wobble = 3.0 * (2.0 * std::f64::consts::PI * 0.8 * tau + tr.wobble_phase).sin();
        let rot = [tilt, 0.12 * tilt + wobble, tr.style.yaw + 6.0 * s + 0.5 * wobble];
        out.position.push(p);
        out.rotation.push(rot);
        out.source_fill.push(src);
        out.target_fill.push(tgt.min(1.0));
        out.spilled.push(spilled);
        out.approach.push(s);
    }
    out
}

fn channel_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        sum += v;
        sq += v * v;
    }
    if n == 0.0 {
        return 0.0;
    }
    let m = sum / n;
    (sq / n - m * m).max(0.0).sqrt()
}

/// Generates one demonstration, deterministic in all arguments.
pub fn synth_sequence(
    cfg: &SimConfig,
    state: InitialState,
    user: usize,
    trial: usize,
    outcome: Outcome,
) -> Result<Sequence> {
    cfg.validate()?;
    if user >= cfg.users {
        return Err(Error::Invalid(format!("user {user} out of range 0..{}", cfg.users)));
    }
    let seed = sequence_seed(cfg.seed, state, user, trial, outcome);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = cfg.styles[user];
    let physics = state.container.physics();
    let mut jitter = |scale: f64| rng.random_range(-scale..scale);
    let start = [0.30 + jitter(0.02), -0.25 + jitter(0.02), 0.95 + jitter(0.02)];
    let pour_point = [0.52 + physics.reach + jitter(0.015), -0.02 + jitter(0.015), 1.08 + jitter(0.01)];
    let approach_time = style.approach_time * (1.0 + jitter(0.1));
    let slip_time = approach_time + style.slip_delay * (1.0 + jitter(0.15));
    let tr = Trial {
        style,
        physics,
        start,
        pour_point,
        approach_time,
        slip_time,
        margin: style.pour_margin + jitter(3.0),
        rate: style.tilt_rate * (1.0 + jitter(0.08)),
        wobble_phase: jitter(std::f64::consts::PI),
    };
    let trace = simulate(cfg, state, outcome, &tr);

    let n = cfg.imu_samples;
    let h = cfg.frame_period / n as f64;
    let frame_point = |f: usize| 1 + (f + 1) * n;

    // IMU windows: window of frame f covers grid points frame_point(f) - N ..= frame_point(f).
    let mut windows: Vec<Vec<[f64; 6]>> = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let end = frame_point(f);
        let mut samples = Vec::with_capacity(n);
        for k in end - n..end {
            let (p, r) = (&trace.position, &trace.rotation);
            let mut s = [0.0; 6];
            for i in 0..3 {
                let second = |j: usize| p[j + 1][i] - 2.0 * p[j][i] + p[j - 1][i];
                s[i] = 0.5 * (second(k) + second(k + 1)) / (h * h);
                s[3 + i] = (r[k + 1][i] - r[k][i]) / h;
            }
            samples.push(s);
        }
        windows.push(samples);
    }

    let proj = projection(cfg.seed, cfg.d_img);
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let k = frame_point(f);
        let mut desc = [0.0; DESCRIPTOR_LEN];
        desc[state.container.index()] = 1.0;
        desc[4] = trace.source_fill[k];
        desc[5] = trace.target_fill[k];
        desc[6] = trace.rotation[k][0] / 90.0;
        desc[7] = if trace.spilled[k] { 1.0 } else { 0.0 };
        desc[8] = trace.approach[k];
        desc[9] = 1.0;
        features.push(proj.iter().map(|row| row.iter().zip(&desc).map(|(w, d)| w * d).sum()).collect());
    }

    if cfg.noise_scale > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("valid");
        for c in 0..6 {
            let sd = cfg.noise_scale * channel_std(windows.iter().flatten().map(|s| s[c]));
            for s in windows.iter_mut().flatten() {
                s[c] += sd * unit.sample(&mut rng);
            }
        }
        for j in 0..cfg.d_img {
            let sd = cfg.noise_scale * channel_std(features.iter().map(|v| v[j]));
            for v in features.iter_mut() {
                v[j] += sd * unit.sample(&mut rng);
            }
        }
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut spill_onset = None;
    for (f, (feature, samples)) in features.into_iter().zip(windows).enumerate() {
        let k = frame_point(f);
        if spill_onset.is_none() && trace.spilled[k] {
            spill_onset = Some(f + 1);
        }
        let pose = Pose { position: trace.position[k], rotation: trace.rotation[k] }.wrapped();
        frames.push(Frame { feature, imu: ImuWindow { samples }, pose });
    }
    if outcome == Outcome::Failure {
        // A failure always spills by the last frame; never at the first.
        let onset = spill_onset.unwrap_or(cfg.frames).max(2);
        spill_onset = Some(onset);
    } else {
        spill_onset = None;
    }
    Ok(Sequence { frames, outcome, state, user, trial, spill_onset })
}

/// Full product of outcomes × users × trials × states, ordered by
/// (user, trial, state, outcome).
pub fn synth_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut sequences = Vec::with_capacity(2 * cfg.users * cfg.trials * NUM_STATES);
    for user in 0..cfg.users {
        for trial in 0..cfg.trials {
            for state in InitialState::all() {
                for outcome in [Outcome::Success, Outcome::Failure] {
                    sequences.push(synth_sequence(cfg, state, user, trial, outcome)?);
                }
            }
        }
    }
    Ok(Dataset { sequences })
}

/// Sum of a window's angular velocities times the sample period, per axis.
pub fn integrate_gyro(window: &ImuWindow, frame_period: f64) -> [f64; 3] {
    let h = frame_period / window.len() as f64;
    let mut out = [0.0; 3];
    for s in &window.samples {
        for i in 0..3 {
            out[i] += s[3 + i] * h;
        }
    }
    out
}

/// Signed smallest difference `b - a` between two angles in degrees, in `(-180, 180]`.
pub fn angle_delta(a: f64, b: f64) -> f64 {
    let d = wrap_degrees(b - a);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}
