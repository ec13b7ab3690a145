//! Procedural talking-face clips with two kinds of fake.
//!
//! Every clip is a drawn face whose mouth opening follows the loudness of an
//! amplitude-modulated tone. A desync fake shifts the mouth track in time; an
//! artifact fake keeps sync but blends a checkerboard into the upper face.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::prep::{prepare_sample, AudioFrameMatrix, AudioTrack, CropBox, LipSequence, PrepProfile, PreparedSample, VideoClip};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Real,
    Desync,
    Artifact,
}

impl Kind {
    pub fn label(&self) -> usize {
        match self {
            Kind::Real => 0,
            Kind::Desync | Kind::Artifact => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Real => "real",
            Kind::Desync => "desync",
            Kind::Artifact => "artifact",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Kind::Real),
            "desync" => Ok(Kind::Desync),
            "artifact" => Ok(Kind::Artifact),
            _ => Err(format!("unknown sample kind `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// source frames per clip
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_samples: usize,
    pub sample_rate: u32,
    pub frame_rate: f64,
    pub tone_hz: f64,
    pub seed: u64,
    /// cyclic mouth shift of desync fakes, as a fraction of `frames`
    pub shift_fraction: f64,
    /// side of the square checkerboard of artifact fakes
    pub patch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl SynthConfig {
    /// One second at 30 fps and 44.1 kHz on 64×64 frames.
    pub fn desk() -> Self {
        SynthConfig {
            frames: 30,
            height: 64,
            width: 64,
            audio_samples: 44_100,
            sample_rate: 44_100,
            frame_rate: 30.0,
            tone_hz: 300.0,
            seed: 0,
            shift_fraction: 0.3,
            patch_size: 12,
            n_train: 160,
            n_test: 80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.audio_samples % self.frames != 0 {
            return Err(Error::Config(format!(
                "{} frames must divide {} audio samples",
                self.frames, self.audio_samples
            )));
        }
        if !(self.shift_fraction >= 0.25 && self.shift_fraction < 1.0) {
            return Err(Error::Config(format!(
                "shift fraction {} must lie in [0.25, 1)",
                self.shift_fraction
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("frames must be at least 32×32".into()));
        }
        let (top, bottom) = self.patch_rows();
        if self.patch_size < 2 || top + self.patch_size > bottom || self.patch_size + 4 > self.width {
            return Err(Error::Config(format!(
                "patch size {} does not fit the upper face",
                self.patch_size
            )));
        }
        if self.sample_rate == 0 || !(self.frame_rate > 0.0) || !(self.tone_hz > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        Ok(())
    }

    /// Cyclic shift of desync fakes in frames.
    pub fn shift_frames(&self) -> usize {
        ((self.shift_fraction * self.frames as f64).round() as usize).clamp(1, self.frames - 1)
    }

    pub fn face_box(&self) -> CropBox {
        CropBox::new(0, 0, self.height, self.width)
    }

    /// Mouth region with the 1:4 aspect of the lip crops.
    pub fn lip_box(&self) -> CropBox {
        let h = (self.height * 3 / 16).max(4);
        let w = (4 * h).min(self.width);
        let cy = self.mouth_center().0;
        CropBox::new(cy - h / 2, (self.width - w) / 2, h, w)
    }

    fn mouth_center(&self) -> (usize, usize) {
        (self.height * 23 / 32, self.width / 2)
    }

    /// Rows available to the artifact patch: above the lip crop.
    fn patch_rows(&self) -> (usize, usize) {
        (self.height / 8, self.lip_box().top.saturating_sub(2))
    }

    pub fn samples_per_frame(&self) -> usize {
        self.audio_samples / self.frames
    }
}

/// A generated clip before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub clip: VideoClip,
    pub audio: AudioTrack,
    pub face_boxes: Vec<CropBox>,
    pub lip_boxes: Vec<CropBox>,
    pub kind: Kind,
    /// per-frame mouth opening in `[0, 1]` as drawn
    pub aperture: Vec<f64>,
    /// top-left corner of the checkerboard, for artifact fakes
    pub patch: Option<(usize, usize)>,
}

impl LabeledSample {
    pub fn label(&self) -> usize {
        self.kind.label()
    }
}

/// Smooth loudness curve in `[0.1, 0.9]`, one value per audio sample.
fn envelope(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.audio_samples;
    // (Hz, amplitude, phase)
    let comps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(1.0..4.0), rng.gen_range(0.5..1.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            comps.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter().map(|v| 0.1 + 0.8 * (v - lo) / span).collect()
}

fn frame_means(xs: &[f64], frames: usize) -> Vec<f64> {
    let per = xs.len() / frames;
    xs.chunks_exact(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Pearson correlation of `a[(f + lag) mod T]` against `b[f]`.
pub fn lagged_correlation(a: &[f64], b: &[f64], lag: usize) -> f64 {
    let t = a.len();
    let shifted: Vec<f64> = (0..t).map(|f| a[(f + lag) % t]).collect();
    pearson(&shifted, b)
}

/// Root-mean-square of each frame's audio window.
pub fn frame_rms(audio: &AudioTrack, frames: usize) -> Vec<f64> {
    let s = audio.samples().data();
    let ch = audio.channels();
    let per = s.len() / ch / frames;
    (0..frames)
        .map(|f| {
            let w = &s[f * per * ch..(f + 1) * per * ch];
            (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
        })
        .collect()
}

/// Mean darkness `1 - luma` inside the lip box of every frame.
pub fn mouth_darkness(s: &LabeledSample) -> Vec<f64> {
    let b = s.lip_boxes[0];
    let frames = s.clip.frames();
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let d = frames.data();
    (0..s.clip.len())
        .map(|f| {
            let mut acc = 0.0;
            for y in b.top..b.top + b.height {
                for x in b.left..b.left + b.width {
                    let p = ((f * h + y) * w + x) * 3;
                    acc += 1.0 - (0.299 * d[p] + 0.587 * d[p + 1] + 0.114 * d[p + 2]);
                }
            }
            acc / (b.height * b.width) as f64
        })
        .collect()
}

/// Mean absolute 4-neighbour Laplacian of the luma over a square region,
/// averaged over frames.
pub fn laplacian_energy(clip: &VideoClip, top: usize, left: usize, size: usize) -> f64 {
    let frames = clip.frames();
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let d = frames.data();
    let luma = |f: usize, y: usize, x: usize| {
        let p = ((f * h + y) * w + x) * 3;
        0.299 * d[p] + 0.587 * d[p + 1] + 0.114 * d[p + 2]
    };
    let mut acc = 0.0;
    let mut n = 0usize;
    for f in 0..clip.len() {
        for y in top.max(1)..(top + size).min(h - 1) {
            for x in left.max(1)..(left + size).min(w - 1) {
                let c = luma(f, y, x);
                let lap = luma(f, y - 1, x) + luma(f, y + 1, x) + luma(f, y, x - 1) + luma(f, y, x + 1) - 4.0 * c;
                acc += lap.abs();
                n += 1;
            }
        }
    }
    acc / n.max(1) as f64
}

struct Face {
    skin: [f64; 3],
    background: [f64; 3],
    texture: Vec<f64>,
    mouth_half_width: f64,
}

fn draw_face(cfg: &SynthConfig, face: &Face, aperture: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let (h, w) = (cfg.height, cfg.width);
    let (cy, cx) = (h as f64 * 0.47, w as f64 / 2.0);
    let (ry, rx) = (h as f64 * 0.44, w as f64 * 0.36);
    let eye_y = h as f64 * 0.34;
    let eye_dx = w as f64 * 0.16;
    let eye_r = (w as f64 * 0.05).max(1.5);
    let (my, mx) = cfg.mouth_center();
    let (my, mx) = (my as f64 + 0.5, mx as f64);
    let m_ry = 0.6 + aperture * (cfg.lip_box().height as f64 / 2.0 - 1.2);
    let m_rx = face.mouth_half_width;
    const SS: usize = 4;
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0;
            let mut px = if inside { face.skin } else { face.background };
            let eye = [(eye_y, cx - eye_dx), (eye_y, cx + eye_dx)]
                .iter()
                .any(|&(ey, ex)| (fy - ey).powi(2) + (fx - ex).powi(2) <= eye_r * eye_r);
            if eye {
                px = [0.1, 0.1, 0.15];
            }
            if (fy - my).abs() <= m_ry + 1.0 && (fx - mx).abs() <= m_rx + 1.0 {
                let mut cover = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let qx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        if ((py - my) / m_ry).powi(2) + ((qx - mx) / m_rx).powi(2) <= 1.0 {
                            cover += 1;
                        }
                    }
                }
                let a = cover as f64 / (SS * SS) as f64;
                let lip = [0.3, 0.08, 0.1];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + lip[c] * a;
                }
            }
            let tex = face.texture[y * w + x];
            for c in 0..3 {
                let jitter = rng.gen_range(-0.01..0.01);
                out.push((px[c] + tex + jitter).clamp(0.0, 1.0));
            }
        }
    }
}

fn render(cfg: &SynthConfig, kind: Kind, seed: u64) -> Result<LabeledSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.frames;
    let shift = cfg.shift_frames();

    let mut env = envelope(cfg, &mut rng);
    if kind == Kind::Desync {
        // redraw envelopes whose per-frame curve is nearly periodic at the shift
        for _ in 0..32 {
            let a = frame_means(&env, t);
            if lagged_correlation(&a, &a, shift) < 0.5 {
                break;
            }
            env = envelope(cfg, &mut rng);
        }
    }
    let sr = cfg.sample_rate as f64;
    let samples: Vec<f64> = env
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let tone = (2.0 * PI * cfg.tone_hz * i as f64 / sr).sin();
            (0.9 * e * tone + rng.gen_range(-0.005..0.005)).clamp(-1.0, 1.0)
        })
        .collect();
    let audio = AudioTrack::new(Tensor::new(vec![samples.len()], samples)?, cfg.sample_rate)?;

    let frame_env = frame_means(&env, t);
    let in_sync: Vec<f64> = frame_env.iter().map(|e| (e - 0.1) / 0.8).collect();
    let aperture: Vec<f64> = match kind {
        Kind::Desync => (0..t).map(|f| in_sync[(f + t - shift) % t]).collect(),
        _ => in_sync,
    };

    let gray = rng.gen_range(0.25..0.45);
    let face = Face {
        skin: [rng.gen_range(0.75..0.9), rng.gen_range(0.6..0.72), rng.gen_range(0.5..0.62)],
        background: [gray, gray, gray + 0.05],
        texture: (0..cfg.height * cfg.width).map(|_| rng.gen_range(-0.03..0.03)).collect(),
        mouth_half_width: cfg.width as f64 * rng.gen_range(0.13..0.17),
    };
    let (rows_lo, rows_hi) = cfg.patch_rows();
    let patch_top = rng.gen_range(rows_lo..=rows_hi - cfg.patch_size);
    let patch_left = rng.gen_range(2..=cfg.width - cfg.patch_size - 2);

    let mut pixels = Vec::with_capacity(t * cfg.height * cfg.width * 3);
    for &a in &aperture {
        draw_face(cfg, &face, a, &mut rng, &mut pixels);
    }
    let patch = (kind == Kind::Artifact).then_some((patch_top, patch_left));
    if let Some((top, left)) = patch {
        let (h, w) = (cfg.height, cfg.width);
        for f in 0..t {
            for y in top..top + cfg.patch_size {
                for x in left..left + cfg.patch_size {
                    let v = ((x + y) % 2) as f64;
                    for c in 0..3 {
                        let p = &mut pixels[((f * h + y) * w + x) * 3 + c];
                        *p = 0.5 * *p + 0.5 * v;
                    }
                }
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![t, cfg.height, cfg.width, 3], pixels)?, cfg.frame_rate)?;
    Ok(LabeledSample {
        clip,
        audio,
        face_boxes: vec![cfg.face_box(); t],
        lip_boxes: vec![cfg.lip_box(); t],
        kind,
        aperture,
        patch,
    })
}

fn oracle_error(kind: Kind, seed: u64, msg: String) -> Error {
    Error::InvalidArgument(format!("generated {kind} sample (seed {seed}) failed its self-check: {msg}"))
}

/// Correlation between the drawn mouth darkness and the audio loudness.
pub fn sync_correlation(s: &LabeledSample) -> f64 {
    let rms = frame_rms(&s.audio, s.clip.len());
    pearson(&mouth_darkness(s), &rms)
}

pub fn gen_real(cfg: &SynthConfig, seed: u64) -> Result<LabeledSample> {
    let s = render(cfg, Kind::Real, seed)?;
    let r = sync_correlation(&s);
    if r <= 0.9 {
        return Err(oracle_error(Kind::Real, seed, format!("aperture/RMS correlation {r:.3} <= 0.9")));
    }
    Ok(s)
}

pub fn gen_desync_fake(cfg: &SynthConfig, seed: u64) -> Result<LabeledSample> {
    let s = render(cfg, Kind::Desync, seed)?;
    let rms = frame_rms(&s.audio, s.clip.len());
    let dark = mouth_darkness(&s);
    let shift = cfg.shift_frames();
    let at_zero = pearson(&dark, &rms);
    let at_shift = lagged_correlation(&dark, &rms, shift);
    if !(at_zero < at_shift && at_shift > 0.9) {
        return Err(oracle_error(
            Kind::Desync,
            seed,
            format!("correlation {at_zero:.3} at lag 0 vs {at_shift:.3} at lag {shift}"),
        ));
    }
    Ok(s)
}

pub fn gen_artifact_fake(cfg: &SynthConfig, seed: u64) -> Result<LabeledSample> {
    let s = render(cfg, Kind::Artifact, seed)?;
    let reference = render(cfg, Kind::Real, seed)?;
    let (top, left) = s.patch.expect("artifact samples carry a patch");
    let fake = laplacian_energy(&s.clip, top, left, cfg.patch_size);
    let real = laplacian_energy(&reference.clip, top, left, cfg.patch_size);
    if fake < 2.0 * real {
        return Err(oracle_error(
            Kind::Artifact,
            seed,
            format!("patch Laplacian energy {fake:.4} < 2 × {real:.4}"),
        ));
    }
    let r = sync_correlation(&s);
    if r <= 0.9 {
        return Err(oracle_error(Kind::Artifact, seed, format!("aperture/RMS correlation {r:.3} <= 0.9")));
    }
    Ok(s)
}

pub fn generate(cfg: &SynthConfig, kind: Kind, seed: u64) -> Result<LabeledSample> {
    match kind {
        Kind::Real => gen_real(cfg, seed),
        Kind::Desync => gen_desync_fake(cfg, seed),
        Kind::Artifact => gen_artifact_fake(cfg, seed),
    }
}

/// Exactly `n/2` real, `n/4` desync and the remainder artifact, in a seeded order.
pub fn class_plan(n: usize, rng: &mut ChaCha8Rng) -> Vec<Kind> {
    let real = n / 2;
    let desync = n / 4;
    let mut kinds: Vec<Kind> = std::iter::repeat(Kind::Real)
        .take(real)
        .chain(std::iter::repeat(Kind::Desync).take(desync))
        .chain(std::iter::repeat(Kind::Artifact).take(n - real - desync))
        .collect();
    kinds.shuffle(rng);
    kinds
}

/// A preprocessed sample with its manifest identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub label: usize,
    pub kind: Kind,
    pub sample: PreparedSample,
}

fn sample_seed(base: u64, split: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index as u64)
}

/// Generates and preprocesses one split (`0` train, `1` test).
pub fn generate_split(cfg: &SynthConfig, prep: &PrepProfile, split: u64) -> Result<Vec<DatasetItem>> {
    cfg.validate()?;
    let (n, name) = match split {
        0 => (cfg.n_train, "train"),
        1 => (cfg.n_test, "test"),
        _ => return Err(Error::InvalidArgument(format!("unknown split {split}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, usize::MAX));
    class_plan(n, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let raw = generate(cfg, kind, sample_seed(cfg.seed, split, i))?;
            let sample = prepare_sample(&raw.clip, &raw.face_boxes, &raw.lip_boxes, &raw.audio, prep)?;
            Ok(DatasetItem {
                id: format!("{name}-{i:04}"),
                label: kind.label(),
                kind,
                sample,
            })
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub faces: PathBuf,
    pub lips: PathBuf,
    pub audio: PathBuf,
    pub label: usize,
    pub kind: Kind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// directory the entry paths are relative to
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::Manifest {
                path: path.clone(),
                line: i + 1,
                msg,
            };
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let label: usize = match f[4] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
            };
            let kind: Kind = f[5].parse().map_err(bad)?;
            if kind.label() != label {
                return Err(bad(format!("label {label} contradicts kind {kind}")));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(bad(format!("duplicate id `{}`", f[0])));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                faces: f[1].into(),
                lips: f[2].into(),
                audio: f[3].into(),
                label,
                kind,
            });
        }
        Ok(Manifest {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn load(&self, i: usize) -> Result<DatasetItem> {
        let e = &self.entries[i];
        let faces = load_tensor(&self.root.join(&e.faces))?;
        let lips_path = self.root.join(&e.lips);
        let lips = load_tensor(&lips_path)?;
        let audio_path = self.root.join(&e.audio);
        let audio = load_tensor(&audio_path)?;
        let shape = lips.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::format(&lips_path, format!("lip tensor must be 3-D, got {shape:?}")));
        }
        let lips = LipSequence::with_size(lips, shape[1], shape[2])?;
        let audio = AudioFrameMatrix::new(audio).map_err(|e| Error::format(&audio_path, e.to_string()))?;
        Ok(DatasetItem {
            id: e.id.clone(),
            label: e.label,
            kind: e.kind,
            sample: PreparedSample::new(faces, lips, audio)?,
        })
    }
}

pub fn write_dataset(items: &[DatasetItem], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for it in items {
        let names = ["faces", "lips", "audio"].map(|k| format!("{}.{k}.mmtf", it.id));
        save_tensor(&dir.join(&names[0]), &it.sample.faces)?;
        save_tensor(&dir.join(&names[1]), it.sample.lips.frames())?;
        save_tensor(&dir.join(&names[2]), it.sample.audio.frames())?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            it.id, names[0], names[1], names[2], it.label, it.kind
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetItem>)> {
    let m = Manifest::read(dir)?;
    let items = (0..m.entries.len()).map(|i| m.load(i)).collect::<Result<Vec<_>>>()?;
    Ok((m, items))
}

/// Writes `<out>/train` and `<out>/test`.
pub fn synthesize(cfg: &SynthConfig, prep: &PrepProfile, out: &Path) -> Result<()> {
    for (split, name) in [(0, "train"), (1, "test")] {
        let items = generate_split(cfg, prep, split)?;
        write_dataset(&items, &out.join(name))?;
    }
    Ok(())
}
