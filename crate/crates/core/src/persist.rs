//! On-disk formats for datasets and checkpoints.
//!
//! A dataset directory holds `manifest.tsv` and one binary file per sequence
//! under `sequences/`. The manifest starts with a header row naming the
//! columns `id user container alpha beta trial label T spill_onset path`
//! (tab separated); `spill_onset` is `-` for successful sequences. A sequence
//! file is the ASCII magic `POUR1`, then `T`, `d_img` and `N` as little-endian
//! u32, then per frame `[feature (d_img) | IMU (6N, sample-major) | pose (6)]`
//! as little-endian f32.
//!
//! A checkpoint is the magic `POURCKPT`, a u32 format version, a u32-length
//! block of `key=value` configuration lines, a u32 tensor count, then per
//! tensor its name, rank, dims and f64 payload (all little-endian). Tensors
//! appear in canonical parameter order followed by the normalizer.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::model::{EncoderKind, Frame, ImuWindow, Model, ModelConfig, Normalizer, Pose};
use crate::numcore::Tensor;
use crate::simulator::{Container, Dataset, InitialState, Outcome, Sequence};
use crate::train::{TrainConfig, TrainedModel, Variant};

pub const SEQUENCE_MAGIC: &[u8; 5] = b"POUR1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POURCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tuser\tcontainer\talpha\tbeta\ttrial\tlabel\tT\tspill_onset\tpath";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that names the file in every error.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

/// Encodes one sequence in the `POUR1` layout.
pub fn encode_sequence(seq: &Sequence) -> Result<Vec<u8>> {
    let first = seq.frames.first().ok_or_else(|| Error::Invalid(format!("sequence {} has no frames", seq.id())))?;
    let d_img = first.feature.len();
    let n = first.imu.samples.len();
    let mut out = Vec::with_capacity(17 + seq.frames.len() * (d_img + 6 * n + 6) * 4);
    out.extend_from_slice(SEQUENCE_MAGIC);
    put_u32(&mut out, seq.frames.len());
    put_u32(&mut out, d_img);
    put_u32(&mut out, n);
    for f in &seq.frames {
        if f.feature.len() != d_img || f.imu.samples.len() != n {
            return Err(Error::Invalid(format!("sequence {} has ragged frames", seq.id())));
        }
        let pose = f.pose.to_array();
        for &v in f.feature.iter().chain(f.imu.samples.iter().flatten()).chain(&pose) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes the frames of a `POUR1` file.
pub fn decode_frames(path: &Path, bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut r = Reader::new(path, bytes);
    let magic = r.take(SEQUENCE_MAGIC.len())?;
    if magic != SEQUENCE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"POUR1\"", String::from_utf8_lossy(magic))));
    }
    let t = r.u32()? as usize;
    let d_img = r.u32()? as usize;
    let n = r.u32()? as usize;
    let per_frame = d_img + 6 * n + 6;
    if r.bytes.len() - r.pos != t * per_frame * 4 {
        return Err(Error::format(
            path,
            format!("truncated or oversized payload: header says T={t}, d_img={d_img}, N={n} ({} bytes), found {}", t * per_frame * 4, r.bytes.len() - r.pos),
        ));
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let feature = (0..d_img).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = [0.0; 6];
            for v in &mut s {
                *v = f64::from(r.f32()?);
            }
            samples.push(s);
        }
        let mut pose = [0.0; 6];
        for v in &mut pose {
            *v = f64::from(r.f32()?);
        }
        // Quantization can push 359.99… up to 360.
        frames.push(Frame { feature, imu: ImuWindow { samples }, pose: Pose::from_array(pose).wrapped() });
    }
    r.finish()?;
    Ok(frames)
}

fn relative_path(seq: &Sequence) -> String {
    format!("sequences/{}.bin", seq.id())
}

fn manifest_row(seq: &Sequence) -> String {
    let onset = seq.spill_onset.map(|o| o.to_string()).unwrap_or_else(|| "-".into());
    let label = if seq.outcome.is_success() { "success" } else { "failure" };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        seq.id(),
        seq.user,
        seq.state.container.letter(),
        seq.state.alpha,
        seq.state.beta,
        seq.trial,
        label,
        seq.frames.len(),
        onset,
        relative_path(seq)
    )
}

/// Writes every sequence file, then the manifest.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let seq_dir = dir.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut seen = std::collections::HashSet::new();
    for seq in &dataset.sequences {
        if !seen.insert(seq.id()) {
            return Err(Error::Invalid(format!("duplicate sequence id {}", seq.id())));
        }
        write_atomic(&dir.join(relative_path(seq)), &encode_sequence(seq)?)?;
        manifest.push_str(&manifest_row(seq));
        manifest.push('\n');
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::format(path, format!("line {line}: bad {name} '{s}'")))
}

/// One manifest row, before the data file is read.
struct ManifestRow {
    id: String,
    user: usize,
    state: InitialState,
    trial: usize,
    outcome: Outcome,
    frames: usize,
    spill_onset: Option<usize>,
    path: String,
}

fn parse_row(path: &Path, line: usize, text: &str) -> Result<ManifestRow> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 10 {
        return Err(Error::format(path, format!("line {line}: expected 10 columns, found {}", cols.len())));
    }
    let bad = |what: String| Error::format(path, format!("line {line}: {what}"));
    let mut letter = cols[2].chars();
    let container = match (letter.next(), letter.next()) {
        (Some(c), None) => Container::from_letter(c).map_err(|e| bad(e.to_string()))?,
        _ => return Err(bad(format!("bad container '{}'", cols[2]))),
    };
    let alpha: u8 = parse_field(path, line, "alpha", cols[3])?;
    let beta: u8 = parse_field(path, line, "beta", cols[4])?;
    let state = InitialState::new(container, alpha, beta).map_err(|e| bad(e.to_string()))?;
    let outcome = match cols[6] {
        "success" => Outcome::Success,
        "failure" => Outcome::Failure,
        other => return Err(bad(format!("bad label '{other}'"))),
    };
    let spill_onset = match cols[8] {
        "-" => None,
        s => Some(parse_field(path, line, "spill_onset", s)?),
    };
    Ok(ManifestRow {
        id: cols[0].to_string(),
        user: parse_field(path, line, "user", cols[1])?,
        state,
        trial: parse_field(path, line, "trial", cols[5])?,
        outcome,
        frames: parse_field(path, line, "T", cols[7])?,
        spill_onset,
        path: cols[9].to_string(),
    })
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::format(&mpath, "missing or unexpected header row")),
    }
    let mut ids = std::collections::HashSet::new();
    let mut sequences = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = parse_row(&mpath, i + 1, line)?;
        if !ids.insert(row.id.clone()) {
            return Err(Error::format(&mpath, format!("line {}: duplicate id {}", i + 1, row.id)));
        }
        let fpath: PathBuf = dir.join(&row.path);
        let frames = decode_frames(&fpath, &read(&fpath)?)?;
        if frames.len() != row.frames {
            return Err(Error::format(&fpath, format!("manifest says T={}, file has {} frames", row.frames, frames.len())));
        }
        let seq = Sequence {
            frames,
            outcome: row.outcome,
            state: row.state,
            user: row.user,
            trial: row.trial,
            spill_onset: row.spill_onset,
        };
        if seq.id() != row.id {
            return Err(Error::format(&mpath, format!("line {}: id {} disagrees with its fields ({})", i + 1, row.id, seq.id())));
        }
        sequences.push(seq);
    }
    Ok(Dataset { sequences })
}

/// Configuration lines echoed into a checkpoint, in file order.
pub fn config_echo(cfg: &TrainConfig, fold: Option<SplitSpec>) -> Vec<(String, String)> {
    let m = &cfg.model;
    let kv: Vec<(&str, String)> = vec![
        ("variant", cfg.variant.name().into()),
        ("encoder", m.encoder.name().into()),
        ("d_img", m.d_img.to_string()),
        ("imu_samples", m.imu_samples.to_string()),
        ("hidden_img", m.hidden_img.to_string()),
        ("hidden_pos", m.hidden_pos.to_string()),
        ("hidden_rot", m.hidden_rot.to_string()),
        ("hidden_fuse", m.hidden_fuse.to_string()),
        ("generator_width", m.generator_width.to_string()),
        ("discriminator_width", m.discriminator_width.to_string()),
        ("monitor_width", m.monitor_width.to_string()),
        ("num_classes", m.num_classes.to_string()),
        ("lambda", format!("{:?}", cfg.lambda)),
        ("learning_rate", format!("{:?}", cfg.learning_rate)),
        ("batch_size", cfg.batch_size.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("seed", cfg.seed.to_string()),
        ("clip_norm", format!("{:?}", cfg.clip_norm)),
        ("aux_success_only", cfg.aux_success_only.to_string()),
        ("split", fold.map(|f| f.to_string()).unwrap_or_else(|| "-".into())),
        ("verdict", "mean-probability>0.5".into()),
        ("position_error", "mean-euclidean".into()),
    ];
    kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn parse_echo(path: &Path, text: &str) -> Result<(TrainConfig, Option<SplitSpec>)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(path, format!("config line '{line}' is not key=value")))?;
        map.insert(k, v);
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::format(path, format!("config echo lacks '{k}'")));
    fn num<T: std::str::FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::format(path, format!("config '{k}' has bad value '{v}'")))
    }
    let n = |k: &str| -> Result<usize> { num(path, k, get(k)?) };
    let f = |k: &str| -> Result<f64> { num(path, k, get(k)?) };
    let model = ModelConfig {
        encoder: get("encoder")?.parse::<EncoderKind>().map_err(|e| Error::format(path, e.to_string()))?,
        d_img: n("d_img")?,
        imu_samples: n("imu_samples")?,
        hidden_img: n("hidden_img")?,
        hidden_pos: n("hidden_pos")?,
        hidden_rot: n("hidden_rot")?,
        hidden_fuse: n("hidden_fuse")?,
        generator_width: n("generator_width")?,
        discriminator_width: n("discriminator_width")?,
        monitor_width: n("monitor_width")?,
        num_classes: n("num_classes")?,
    };
    let cfg = TrainConfig {
        variant: get("variant")?.parse::<Variant>().map_err(|e| Error::format(path, e))?,
        model,
        lambda: f("lambda")?,
        learning_rate: f("learning_rate")?,
        batch_size: n("batch_size")?,
        epochs: n("epochs")?,
        seed: num(path, "seed", get("seed")?)?,
        clip_norm: f("clip_norm")?,
        aux_success_only: num(path, "aux_success_only", get("aux_success_only")?)?,
    };
    cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let split = match get("split")? {
        "-" => None,
        s => Some(s.parse::<SplitSpec>().map_err(|e| Error::format(path, e.to_string()))?),
    };
    Ok((cfg, split))
}

fn checkpoint_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let norm = &model.normalizer;
    out.push(("normalizer.feature_mean".into(), Tensor::vector(norm.feature_mean.clone())));
    out.push(("normalizer.feature_std".into(), Tensor::vector(norm.feature_std.clone())));
    out.push(("normalizer.imu_mean".into(), Tensor::vector(norm.imu_mean.to_vec())));
    out.push(("normalizer.imu_std".into(), Tensor::vector(norm.imu_std.to_vec())));
    out
}

/// Serializes a trained model.
pub fn encode_checkpoint(trained: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo: String = config_echo(&trained.config, trained.fold).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, echo.len());
    out.extend_from_slice(echo.as_bytes());
    let tensors = checkpoint_tensors(&trained.model);
    put_u32(&mut out, tensors.len());
    for (name, t) in &tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(trained: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(trained))
}

/// Parses a checkpoint; the epoch log is not stored and comes back empty.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader::new(path, bytes);
    let magic = r.take(CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint format version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"),
        ));
    }
    let echo_len = r.u32()? as usize;
    let echo = std::str::from_utf8(r.take(echo_len)?).map_err(|_| Error::format(path, "config echo is not UTF-8"))?;
    let (config, fold) = parse_echo(path, echo)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    r.finish()?;

    let mut model = Model::new(config.model.clone(), 0);
    let expected = checkpoint_tensors(&model);
    if expected.len() != tensors.len() {
        return Err(Error::format(path, format!("expected {} tensors for this configuration, found {}", expected.len(), tensors.len())));
    }
    for ((en, et), (n, t)) in expected.iter().zip(&tensors) {
        if en != n {
            return Err(Error::format(path, format!("expected tensor {en}, found {n}")));
        }
        if et.shape() != t.shape() {
            return Err(Error::format(
                path,
                format!("tensor {n} has shape {:?} but the config echo implies {:?}", t.shape(), et.shape()),
            ));
        }
    }
    let mut iter = tensors.into_iter();
    for ((_, slot), (_, t)) in model.params.named_mut().into_iter().zip(iter.by_ref()) {
        *slot = t;
    }
    let vec_of = |iter: &mut dyn Iterator<Item = (String, Tensor)>| iter.next().expect("count checked").1.into_data();
    let feature_mean = vec_of(&mut iter);
    let feature_std = vec_of(&mut iter);
    let imu_mean = vec_of(&mut iter);
    let imu_std = vec_of(&mut iter);
    model.normalizer = Normalizer {
        feature_mean,
        feature_std,
        imu_mean: imu_mean.try_into().expect("shape checked"),
        imu_std: imu_std.try_into().expect("shape checked"),
    };
    Ok(TrainedModel { model, config, fold, log: Vec::new() })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(path, &read(path)?)
}
