use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionConfig, EncoderBlockParams, ENCODER_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::prep::PrepProfile;
use crate::tokenizer::{token_counts, PatchGrid, TubeletConfig};

/// Which sub-networks a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// face branch and lip/audio branch, fused
    Multimodal,
    /// lip/audio branch with its own head
    LipAudioOnly,
    /// pooled extractor features with a linear head; no transformer
    FeaturesOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Multimodal, Mode::LipAudioOnly, Mode::FeaturesOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Multimodal => "multimodal",
            Mode::LipAudioOnly => "lip-audio-only",
            Mode::FeaturesOnly => "features-only",
        }
    }

    /// The parameter groups a forward pass in this mode reads.
    pub fn groups(&self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Mode::Multimodal => &[Extractor, Video, Audio, FusionHead],
            Mode::LipAudioOnly => &[Audio, LipAudioHead],
            Mode::FeaturesOnly => &[Extractor, FeaturesHead],
        }
    }

    /// Name of the classifier head parameter that identifies this mode.
    pub fn head_weight(&self) -> &'static str {
        match self {
            Mode::Multimodal => "head.fusion.w",
            Mode::LipAudioOnly => "head.lip_audio.w",
            Mode::FeaturesOnly => "head.features.w",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(Mode::Multimodal),
            "lip-audio-only" => Ok(Mode::LipAudioOnly),
            "features-only" => Ok(Mode::FeaturesOnly),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (expected multimodal, lip-audio-only or features-only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Video,
    Audio,
    FusionHead,
    LipAudioHead,
    FeaturesHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One rung of the VGG-style ladder: `convs` 3×3 convolutions to `channels`
/// channels (each followed by ReLU), then a 2×2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvExtractorConfig {
    pub frame_size: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    /// channels of the closing 1×1 projection; each channel is one `P×P` patch
    pub n_patches: usize,
}

impl ConvExtractorConfig {
    /// Side length `P` of the final feature map.
    pub fn patch_size(&self) -> usize {
        self.frame_size >> self.stages.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
    Custom,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
            Profile::Custom => "custom",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub profile: Profile,
    pub extractor: ConvExtractorConfig,
    pub grid: PatchGrid,
    pub video_attention: AttentionConfig,
    pub video_blocks: usize,
    /// lip frames (= audio frames) per sample
    pub lip_frames: usize,
    pub lip_height: usize,
    pub lip_width: usize,
    pub audio_frame_width: usize,
    /// subtract the clip's mean lip frame from every query row
    pub center_lips: bool,
    /// shared output width of the L1/L2 adapters
    pub adapter_width: usize,
    /// frames per token when reducing the cross-attention output
    pub audio_tubelet_depth: usize,
    pub audio_attention: AttentionConfig,
    pub audio_blocks: usize,
    /// width of each branch embedding
    pub d: usize,
}

impl ModelConfig {
    /// Dimensions printed for the full-size network: 30 faces at 256×256 through
    /// a VGG-16 ladder to 512 patches of 8×8, 3073×1280 tokens, 300×4900 lip
    /// queries with square 4900 adapters, 300×1470 audio frames, d = 2.
    pub fn paper() -> Self {
        let vgg = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
        ModelConfig {
            profile: Profile::Paper,
            extractor: ConvExtractorConfig {
                frame_size: 256,
                in_channels: 3,
                stages: vgg.iter().map(|&(convs, channels)| ConvStage { convs, channels }).collect(),
                n_patches: 512,
            },
            grid: PatchGrid { n_f: 30, n_p: 512, p: 8, f: 5 },
            video_attention: AttentionConfig::new(8, 1280, 5120),
            video_blocks: 1,
            lip_frames: 300,
            lip_height: 35,
            lip_width: 140,
            audio_frame_width: 1470,
            center_lips: true,
            adapter_width: 4900,
            audio_tubelet_depth: 10,
            audio_attention: AttentionConfig::new(8, 1280, 5120),
            audio_blocks: 1,
            d: 2,
        }
    }

    /// Reduced network on 30-frame, 64×64 clips. Lip crops (35×140), audio
    /// rows (1470) and d = 2 keep their full-size values.
    pub fn desk() -> Self {
        ModelConfig {
            profile: Profile::Desk,
            extractor: ConvExtractorConfig {
                frame_size: 64,
                in_channels: 3,
                stages: vec![
                    ConvStage { convs: 1, channels: 4 },
                    ConvStage { convs: 1, channels: 8 },
                    ConvStage { convs: 1, channels: 16 },
                ],
                n_patches: 16,
            },
            grid: PatchGrid { n_f: 10, n_p: 16, p: 8, f: 5 },
            video_attention: AttentionConfig::new(4, 64, 128),
            video_blocks: 1,
            lip_frames: 30,
            lip_height: 35,
            lip_width: 140,
            audio_frame_width: 1470,
            center_lips: true,
            adapter_width: 32,
            audio_tubelet_depth: 1,
            audio_attention: AttentionConfig::new(4, 64, 128),
            audio_blocks: 2,
            d: 2,
        }
    }

    /// A few hundred parameters: 2 faces of 8×8, 4 lip frames of 5×7, audio
    /// rows of 6 samples. Small enough for whole-model finite differences.
    pub fn micro() -> Self {
        ModelConfig {
            profile: Profile::Custom,
            extractor: ConvExtractorConfig {
                frame_size: 8,
                in_channels: 3,
                stages: vec![ConvStage { convs: 1, channels: 2 }],
                n_patches: 2,
            },
            grid: PatchGrid { n_f: 2, n_p: 2, p: 4, f: 2 },
            video_attention: AttentionConfig::new(2, 4, 6),
            video_blocks: 1,
            lip_frames: 4,
            lip_height: 5,
            lip_width: 7,
            audio_frame_width: 6,
            center_lips: true,
            adapter_width: 3,
            audio_tubelet_depth: 2,
            audio_attention: AttentionConfig::new(2, 4, 6),
            audio_blocks: 1,
            d: 2,
        }
    }

    pub fn for_profile(p: Profile) -> Result<Self> {
        match p {
            Profile::Paper => Ok(Self::paper()),
            Profile::Desk => Ok(Self::desk()),
            Profile::Custom => Err(Error::Config("custom profiles have no preset".into())),
        }
    }

    /// Preprocessing geometry that feeds this network.
    pub fn prep_profile(&self) -> PrepProfile {
        PrepProfile {
            face_frames: self.grid.n_f,
            face_height: self.extractor.frame_size,
            face_width: self.extractor.frame_size,
            lip_height: self.lip_height,
            lip_width: self.lip_width,
            audio_samples: self.lip_frames * self.audio_frame_width,
        }
    }

    pub fn lip_query_width(&self) -> usize {
        self.lip_height * self.lip_width
    }

    /// Width of one cross-attention row after the value residual is appended.
    pub fn audio_row_width(&self) -> usize {
        2 * self.audio_frame_width
    }

    pub fn audio_tubelet(&self) -> TubeletConfig {
        TubeletConfig::new(1, self.audio_row_width(), self.audio_tubelet_depth)
    }

    pub fn audio_token_count(&self) -> usize {
        token_counts(1, self.audio_row_width(), self.lip_frames, self.audio_tubelet()).0
    }

    pub fn audio_token_width(&self) -> usize {
        self.audio_tubelet_depth * self.audio_row_width()
    }

    pub fn validate(&self) -> Result<()> {
        let ex = &self.extractor;
        if ex.stages.is_empty() || ex.stages.iter().any(|s| s.convs == 0 || s.channels == 0) {
            return Err(Error::Config("extractor needs >= 1 stage, each with >= 1 conv and channel".into()));
        }
        if ex.frame_size % (1 << ex.stages.len()) != 0 || ex.patch_size() == 0 {
            return Err(Error::Config(format!(
                "frame size {} is not divisible by 2^{}",
                ex.frame_size,
                ex.stages.len()
            )));
        }
        self.grid.validate()?;
        if self.grid.n_p != ex.n_patches || self.grid.p != ex.patch_size() {
            return Err(Error::Config(format!(
                "patch grid {:?} disagrees with extractor output {}x{}x{}",
                self.grid,
                ex.n_patches,
                ex.patch_size(),
                ex.patch_size()
            )));
        }
        self.video_attention.validate()?;
        self.audio_attention.validate()?;
        if self.video_blocks == 0 || self.audio_blocks == 0 {
            return Err(Error::Config("each branch needs >= 1 encoder block".into()));
        }
        if self.lip_frames == 0 || self.lip_height == 0 || self.lip_width == 0 || self.audio_frame_width == 0 {
            return Err(Error::Config("lip and audio sizes must be >= 1".into()));
        }
        if self.adapter_width == 0 {
            return Err(Error::Config("adapter width must be >= 1".into()));
        }
        if self.audio_tubelet_depth == 0 || self.audio_tubelet_depth > self.lip_frames {
            return Err(Error::Config(format!(
                "audio tubelet depth {} must lie in 1..={}",
                self.audio_tubelet_depth, self.lip_frames
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        Ok(())
    }

    /// Every parameter of every mode, in initialisation order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, group, init| {
            specs.push(ParamSpec { name, shape, group, init })
        };
        let glorot = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };

        // extractor ladder
        let ex = &self.extractor;
        let mut cin = ex.in_channels;
        for (i, st) in ex.stages.iter().enumerate() {
            for j in 0..st.convs {
                let name = format!("extractor.stage{i}.conv{j}");
                add(format!("{name}.w"), vec![9 * cin, st.channels], ParamGroup::Extractor, glorot(9 * cin, 9 * st.channels));
                add(format!("{name}.b"), vec![st.channels], ParamGroup::Extractor, Init::Zeros);
                cin = st.channels;
            }
        }
        add("extractor.proj.w".into(), vec![cin, ex.n_patches], ParamGroup::Extractor, glorot(cin, ex.n_patches));
        add("extractor.proj.b".into(), vec![ex.n_patches], ParamGroup::Extractor, Init::Zeros);

        let branch = |prefix: &str,
                      group: ParamGroup,
                      token_width: usize,
                      tokens: usize,
                      attn: &AttentionConfig,
                      blocks: usize,
                      add: &mut dyn FnMut(String, Vec<usize>, ParamGroup, Init)| {
            let d_model = attn.d_model;
            add(format!("{prefix}.embed.e"), vec![token_width, d_model], group, glorot(token_width, d_model));
            add(format!("{prefix}.embed.cls"), vec![d_model], group, glorot(1, d_model));
            add(format!("{prefix}.embed.pos"), vec![tokens + 1, d_model], group, glorot(tokens + 1, d_model));
            for b in 0..blocks {
                for (suffix, shape) in ENCODER_PARAM_NAMES.iter().zip(EncoderBlockParams::shapes(attn)) {
                    let init = match *suffix {
                        "ln1.gamma" | "ln2.gamma" => Init::Ones,
                        s if s.starts_with("ln") || s.ends_with(".b1") || s.ends_with(".b2") => Init::Zeros,
                        _ => glorot(shape[0], shape[1]),
                    };
                    add(format!("{prefix}.block{b}.{suffix}"), shape, group, init);
                }
            }
        };

        let mut add_dyn = |name: String, shape: Vec<usize>, group, init| add(name, shape, group, init);

        branch(
            "video",
            ParamGroup::Video,
            self.grid.token_width(),
            self.grid.token_count(),
            &self.video_attention,
            self.video_blocks,
            &mut add_dyn,
        );
        let dv = self.video_attention.d_model;
        add_dyn("video.out.w".into(), vec![dv, self.d], ParamGroup::Video, glorot(dv, self.d));
        add_dyn("video.out.b".into(), vec![self.d], ParamGroup::Video, Init::Zeros);

        let (qw, r) = (self.lip_query_width(), self.adapter_width);
        add_dyn("audio.adapter.l1".into(), vec![qw, r], ParamGroup::Audio, glorot(qw, r));
        let aw = self.audio_frame_width;
        add_dyn("audio.adapter.l2".into(), vec![aw, r], ParamGroup::Audio, glorot(aw, r));
        branch(
            "audio",
            ParamGroup::Audio,
            self.audio_token_width(),
            self.audio_token_count(),
            &self.audio_attention,
            self.audio_blocks,
            &mut add_dyn,
        );
        let da = self.audio_attention.d_model;
        add_dyn("audio.out.w".into(), vec![da, self.d], ParamGroup::Audio, glorot(da, self.d));
        add_dyn("audio.out.b".into(), vec![self.d], ParamGroup::Audio, Init::Zeros);

        let d = self.d;
        add_dyn("head.fusion.w".into(), vec![2 * d, 2], ParamGroup::FusionHead, glorot(2 * d, 2));
        add_dyn("head.fusion.b".into(), vec![2], ParamGroup::FusionHead, Init::Zeros);
        add_dyn("head.lip_audio.w".into(), vec![d, 2], ParamGroup::LipAudioHead, glorot(d, 2));
        add_dyn("head.lip_audio.b".into(), vec![2], ParamGroup::LipAudioHead, Init::Zeros);
        let fw = self.grid.n_p * self.grid.p * self.grid.p;
        add_dyn("head.features.w".into(), vec![fw, 2], ParamGroup::FeaturesHead, glorot(fw, 2));
        add_dyn("head.features.b".into(), vec![2], ParamGroup::FeaturesHead, Init::Zeros);
        specs
    }

    pub fn param_specs_for(&self, mode: Mode) -> Vec<ParamSpec> {
        let groups = mode.groups();
        self.param_specs()
            .into_iter()
            .filter(|s| groups.contains(&s.group))
            .collect()
    }

    /// Parameter count of `mode` computed from shapes alone.
    pub fn count_parameters(&self, mode: Mode) -> usize {
        self.param_specs_for(mode).iter().map(ParamSpec::numel).sum()
    }

    /// Named intermediate shapes of a forward pass in `mode`, derived from the
    /// configuration without materialising any tensor.
    pub fn shape_plan(&self, mode: Mode) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.validate()?;
        let ex = &self.extractor;
        let g = self.grid;
        let p2 = g.p * g.p;
        let mut plan = Vec::new();
        let uses = |grp| mode.groups().contains(&grp);
        if uses(ParamGroup::Extractor) {
            plan.push(("faces", vec![g.n_f, ex.frame_size, ex.frame_size, ex.in_channels]));
            plan.push(("features", vec![g.n_f, g.n_p, p2]));
        }
        if uses(ParamGroup::Video) {
            let [rows, cols] = g.flattened_shape()?;
            plan.push(("patches", vec![rows, cols]));
            plan.push(("video_embedding", vec![cols, self.video_attention.d_model]));
            plan.push(("video_tokens", vec![rows + 1, self.video_attention.d_model]));
            plan.push(("y_v", vec![1, self.d]));
        }
        if uses(ParamGroup::Audio) {
            let (m, r) = (self.lip_frames, self.adapter_width);
            plan.push(("lips", vec![m, self.lip_height, self.lip_width]));
            plan.push(("lip_queries", vec![m, self.lip_query_width()]));
            plan.push(("audio_frames", vec![m, self.audio_frame_width]));
            plan.push(("adapter_l1", vec![self.lip_query_width(), r]));
            plan.push(("adapter_l2", vec![self.audio_frame_width, r]));
            plan.push(("adapted_queries", vec![m, r]));
            plan.push(("adapted_keys", vec![m, r]));
            plan.push(("cross_weights", vec![m, m]));
            plan.push(("cross_output", vec![m, self.audio_frame_width]));
            plan.push(("audio_tokens", vec![self.audio_token_count() + 1, self.audio_attention.d_model]));
            plan.push(("y_a", vec![1, self.d]));
        }
        match mode {
            Mode::Multimodal => plan.push(("joint", vec![1, 2 * self.d])),
            Mode::LipAudioOnly => {}
            Mode::FeaturesOnly => plan.push(("pooled_features", vec![1, g.n_p * p2])),
        }
        plan.push(("probs", vec![1, 2]));
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn names_are_unique() {
        for cfg in [ModelConfig::paper(), ModelConfig::desk()] {
            let specs = cfg.param_specs();
            let names: HashSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            assert_eq!(names.len(), specs.len());
        }
    }

    #[test]
    fn grid_must_match_extractor() {
        let mut cfg = ModelConfig::desk();
        cfg.grid.n_p = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.grid.f = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.video_attention.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_strings_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn desk_extractor_output() {
        let cfg = ModelConfig::desk();
        let plan = cfg.shape_plan(Mode::FeaturesOnly).unwrap();
        assert_eq!(plan[1], ("features", vec![10, 16, 64]));
    }
}
