//! Frame sampling, crop geometry, resizing, luma conversion and audio framing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LIP_HEIGHT: usize = 35;
pub const LIP_WIDTH: usize = 140;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    frame_rate: f64,
}

impl VideoClip {
    /// `frames` is `[T, H, W, C]` with `C ∈ {1, 3}` and values in `[0, 1]`.
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let [_, _, _, c] = frames.shape()[..] else {
            return Err(Error::InvalidShape(format!(
                "video frames must be [T, H, W, C], got {:?}",
                frames.shape()
            )));
        };
        if c != 1 && c != 3 {
            return Err(Error::InvalidShape(format!("video must have 1 or 3 channels, got {c}")));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("frame rate must be positive, got {frame_rate}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(VideoClip { frames, frame_rate })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame(&self, i: usize) -> Tensor {
        self.frames.index0(i)
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    samples: Tensor,
    sample_rate: u32,
}

impl AudioTrack {
    /// `samples` is `[N]` (mono) or `[N, 2]` (stereo), values in `[-1, 1]`.
    pub fn new(samples: Tensor, sample_rate: u32) -> Result<Self> {
        match samples.shape()[..] {
            [_] | [_, 2] => {}
            _ => {
                return Err(Error::InvalidShape(format!(
                    "audio must be [N] or [N, 2], got {:?}",
                    samples.shape()
                )))
            }
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("audio samples must lie in [-1, 1]".into()));
        }
        Ok(AudioTrack {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        if self.samples.ndim() == 1 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        CropBox {
            top,
            left,
            height,
            width,
        }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.top + self.height <= h && self.left + self.width <= w
    }
}

/// Grayscale lip crops, `[T, 35, 140]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LipSequence {
    frames: Tensor,
}

impl LipSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        Self::with_size(frames, LIP_HEIGHT, LIP_WIDTH)
    }

    /// Lip frames of a non-standard size, for reduced test models.
    pub fn with_size(frames: Tensor, h: usize, w: usize) -> Result<Self> {
        match frames.shape()[..] {
            [_, fh, fw] if fh == h && fw == w => Ok(LipSequence { frames }),
            _ => Err(Error::shape("lip sequence", &[0, h, w], frames.shape())),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Audio cut into one row per lip frame, `[T, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrameMatrix {
    frames: Tensor,
}

impl AudioFrameMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        frames.dims2("audio frame matrix")?;
        Ok(AudioFrameMatrix { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn samples_per_frame(&self) -> usize {
        self.frames.cols()
    }
}

/// Indices `floor(i·T/n)` for `i in 0..n`.
pub fn sample_equally_spaced(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} frames out of {total}"
        )));
    }
    Ok((0..n).map(|i| i * total / n).collect())
}

fn hwc(frame: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match frame.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::InvalidShape(format!(
            "{op} expects [H, W, C], got {:?}",
            frame.shape()
        ))),
    }
}

pub fn crop(frame: &Tensor, b: CropBox) -> Result<Tensor> {
    let (h, w, c) = hwc(frame, "crop")?;
    if !b.fits(h, w) {
        return Err(Error::InvalidArgument(format!(
            "crop box {b:?} does not lie inside a {h}x{w} frame"
        )));
    }
    let mut out = Vec::with_capacity(b.height * b.width * c);
    for r in b.top..b.top + b.height {
        let start = (r * w + b.left) * c;
        out.extend_from_slice(&frame.data()[start..start + b.width * c]);
    }
    Ok(Tensor::from_parts(vec![b.height, b.width, c], out))
}

/// Source coordinate and blend weight for half-pixel-centre sampling.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(frame, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(frame.clone());
    }
    let d = frame.data();
    let px = |r: usize, col: usize, ch: usize| d[(r * w + col) * c + ch];
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                // a + (b - a)·f keeps constant regions exactly constant
                let (a, b) = (px(y0, x0, ch), px(y0, x1, ch));
                let top = a + (b - a) * fx;
                let (a, b) = (px(y1, x0, ch), px(y1, x1, ch));
                let bottom = a + (b - a) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

/// BT.601 luma, `[H, W, 3] -> [H, W]`.
pub fn to_grayscale(frame: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(frame, "to_grayscale")?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("to_grayscale needs 3 channels, got {c}")));
    }
    let out = frame
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Ok(Tensor::from_parts(vec![h, w], out))
}

pub fn stereo_to_mono(audio: &AudioTrack) -> AudioTrack {
    if audio.channels() == 1 {
        return audio.clone();
    }
    let mono = audio
        .samples
        .data()
        .chunks_exact(2)
        .map(|s| (s[0] + s[1]) / 2.0)
        .collect();
    AudioTrack {
        samples: Tensor::from_parts(vec![audio.len()], mono),
        sample_rate: audio.sample_rate,
    }
}

/// Keeps the first `target` samples, zero-padding at the end when shorter.
pub fn crop_or_pad_audio(audio: &AudioTrack, target: usize) -> Result<AudioTrack> {
    if target == 0 {
        return Err(Error::InvalidArgument("audio target length must be >= 1".into()));
    }
    let ch = audio.channels();
    let mut data = audio.samples.data().to_vec();
    data.resize(target * ch, 0.0);
    let shape = if ch == 1 { vec![target] } else { vec![target, 2] };
    Ok(AudioTrack {
        samples: Tensor::from_parts(shape, data),
        sample_rate: audio.sample_rate,
    })
}

/// Row `i` holds samples `[i·S, (i+1)·S)` with `S = N / n_frames`.
pub fn partition_audio(audio: &AudioTrack, n_frames: usize) -> Result<AudioFrameMatrix> {
    if audio.channels() != 1 {
        return Err(Error::InvalidArgument("partition_audio needs mono audio".into()));
    }
    let n = audio.len();
    if n_frames == 0 || n % n_frames != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot be split into {n_frames} equal frames"
        )));
    }
    AudioFrameMatrix::new(audio.samples.reshape(&[n_frames, n / n_frames])?)
}

/// Geometry of a preprocessing run.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepProfile {
    /// Equally spaced face frames fed to the face branch.
    pub face_frames: usize,
    pub face_height: usize,
    pub face_width: usize,
    pub lip_height: usize,
    pub lip_width: usize,
    /// Mono sample count after crop/pad; must divide evenly by the frame count.
    pub audio_samples: usize,
}

impl PrepProfile {
    /// 30 faces at 256×256×3, 35×140 lips, 441,000 audio samples.
    pub fn paper() -> Self {
        PrepProfile {
            face_frames: 30,
            face_height: 256,
            face_width: 256,
            lip_height: LIP_HEIGHT,
            lip_width: LIP_WIDTH,
            audio_samples: 441_000,
        }
    }

    /// 10 faces at 64×64×3, 35×140 lips, 44,100 audio samples.
    pub fn desk() -> Self {
        PrepProfile {
            face_frames: 10,
            face_height: 64,
            face_width: 64,
            lip_height: LIP_HEIGHT,
            lip_width: LIP_WIDTH,
            audio_samples: 44_100,
        }
    }

    /// Output shapes `(faces, lips, audio)` for a clip of `total_frames` frames.
    pub fn output_shapes(&self, total_frames: usize) -> Result<[Vec<usize>; 3]> {
        sample_equally_spaced(total_frames, self.face_frames)?;
        if self.audio_samples % total_frames != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} audio samples cannot be split into {total_frames} frames",
                self.audio_samples
            )));
        }
        Ok([
            vec![self.face_frames, self.face_height, self.face_width, 3],
            vec![total_frames, self.lip_height, self.lip_width],
            vec![total_frames, self.audio_samples / total_frames],
        ])
    }
}

/// Model-ready tensors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// `[N_f, H', W', 3]`
    pub faces: Tensor,
    pub lips: LipSequence,
    pub audio: AudioFrameMatrix,
}

impl PreparedSample {
    /// Values are rounded to `f32`, the on-disk precision, so that a written and
    /// re-read sample equals the in-memory one.
    pub fn new(faces: Tensor, lips: LipSequence, audio: AudioFrameMatrix) -> Result<Self> {
        if lips.len() != audio.len() {
            return Err(Error::InvalidArgument(format!(
                "{} lip frames but {} audio frames",
                lips.len(),
                audio.len()
            )));
        }
        let faces = faces.to_f32_precision();
        let lips = LipSequence {
            frames: lips.frames.to_f32_precision(),
        };
        let audio = AudioFrameMatrix {
            frames: audio.frames.to_f32_precision(),
        };
        Ok(PreparedSample { faces, lips, audio })
    }
}

fn rgb(frame: Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(&frame, "prepare")?;
    if c == 3 {
        return Ok(frame);
    }
    let data = frame.data().iter().flat_map(|&v| [v, v, v]).collect();
    Ok(Tensor::from_parts(vec![h, w, 3], data))
}

pub fn prepare_sample(
    clip: &VideoClip,
    face_boxes: &[CropBox],
    lip_boxes: &[CropBox],
    audio: &AudioTrack,
    profile: &PrepProfile,
) -> Result<PreparedSample> {
    let t = clip.len();
    if face_boxes.len() != t || lip_boxes.len() != t {
        return Err(Error::InvalidArgument(format!(
            "{t} frames but {} face boxes and {} lip boxes",
            face_boxes.len(),
            lip_boxes.len()
        )));
    }
    profile.output_shapes(t)?;

    let mut faces = Vec::with_capacity(profile.face_frames);
    for i in sample_equally_spaced(t, profile.face_frames)? {
        let face = rgb(crop(&clip.frame(i), face_boxes[i])?)?;
        faces.push(resize_bilinear(&face, profile.face_height, profile.face_width)?);
    }

    let mut lips = Vec::with_capacity(t);
    for (i, &b) in lip_boxes.iter().enumerate() {
        let region = rgb(crop(&clip.frame(i), b)?)?;
        let (h, w) = (region.shape()[0], region.shape()[1]);
        let gray = to_grayscale(&region)?.into_reshaped(&[h, w, 1])?;
        let lip = resize_bilinear(&gray, profile.lip_height, profile.lip_width)?;
        lips.push(lip.into_reshaped(&[profile.lip_height, profile.lip_width])?);
    }

    let mono = stereo_to_mono(audio);
    let fitted = crop_or_pad_audio(&mono, profile.audio_samples)?;
    let frames = partition_audio(&fitted, t)?;

    PreparedSample::new(
        Tensor::stack(&faces)?,
        LipSequence::with_size(Tensor::stack(&lips)?, profile.lip_height, profile.lip_width)?,
        frames,
    )
}
