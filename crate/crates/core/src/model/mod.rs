//! The two-branch detector: convolutional face features tokenised into
//! tubelets and self-attended, lip/audio cross-attention reduced to tokens and
//! self-attended, and a fused real/fake head. Two ablation heads share the
//! same parameters.

mod config;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConvExtractorConfig, ConvStage, Init, Mode, ModelConfig, ParamGroup, ParamSpec, Profile};

use crate::attention::{attention_graph, encoder_block_graph, EncoderBlockVars, ENCODER_PARAM_NAMES};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{glorot_uniform, ParamSet};
use crate::prep::PreparedSample;
use crate::tensor::Tensor;
use crate::tokenizer::{embed_graph, tubelet_index};

/// Label index of the fake class; `probs[FAKE]` is the detection score.
pub const FAKE: usize = 1;
pub const REAL: usize = 0;

/// A recorded forward pass.
pub struct Trace {
    pub graph: Graph,
    /// parameters read by the pass, in first-use order
    pub params: Vec<(String, Var)>,
    /// named intermediates, matching [`ModelConfig::shape_plan`]
    pub taps: Vec<(&'static str, Var)>,
    /// `[1, 2]` class probabilities, `[real, fake]`
    pub probs: Var,
}

impl Trace {
    pub fn tap(&self, name: &str) -> Option<&Tensor> {
        self.taps
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| self.graph.value(v))
    }

    pub fn fake_probability(&self) -> f64 {
        self.graph.value(self.probs).data()[FAKE]
    }
}

struct Builder<'a> {
    g: Graph,
    params: &'a ParamSet,
    trainable: bool,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    taps: Vec<(&'static str, Var)>,
}

impl<'a> Builder<'a> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .value(name)
            .map_err(|_| Error::InvalidArgument(format!("model has no parameter `{name}`")))?
            .clone();
        let v = if self.trainable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        self.order.push((name.to_string(), v));
        Ok(v)
    }

    fn tap(&mut self, name: &'static str, v: Var) -> Var {
        self.taps.push((name, v));
        v
    }

    fn encoder(&mut self, prefix: &str, blocks: usize, z0: Var, cfg: &crate::attention::AttentionConfig) -> Result<Var> {
        let mut z = z0;
        let mut y = z0;
        for b in 0..blocks {
            let vars = ENCODER_PARAM_NAMES
                .iter()
                .map(|s| self.param(&format!("{prefix}.block{b}.{s}")))
                .collect::<Result<Vec<_>>>()?;
            let (z1, yb) = encoder_block_graph(&mut self.g, z, &EncoderBlockVars::from_vars(&vars), cfg)?;
            z = z1;
            y = yb;
        }
        Ok(y)
    }

    /// Class token of the last block's output mapped to width `d`.
    fn branch_head(&mut self, prefix: &str, y: Var) -> Result<Var> {
        let cls = self.g.select_row(y, 0)?;
        let w = self.param(&format!("{prefix}.out.w"))?;
        let b = self.param(&format!("{prefix}.out.b"))?;
        self.g.linear(cls, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Initialises every parameter of every mode from `seed`: Glorot-uniform
    /// weights, zero biases and shifts, unit layer-norm gains. Values are
    /// rounded to `f32` so checkpoints reproduce them exactly.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in config.param_specs() {
            let t = match spec.init {
                Init::Glorot { fan_in, fan_out } => glorot_uniform(&spec.shape, fan_in, fan_out, &mut rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
            };
            params.insert(spec.name, t.to_f32_precision())?;
        }
        Ok(Model { config, params })
    }

    /// Wraps loaded parameters after checking each against the configuration.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs: HashMap<String, ParamSpec> =
            config.param_specs().into_iter().map(|s| (s.name.clone(), s)).collect();
        for p in params.iter() {
            let spec = specs
                .get(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected parameter `{}`", p.name)))?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    left: spec.shape.clone(),
                    right: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Whether every parameter `mode` reads is present.
    pub fn supports(&self, mode: Mode) -> bool {
        self.config
            .param_specs_for(mode)
            .iter()
            .all(|s| self.params.get(&s.name).is_some())
    }

    /// The modes a loaded checkpoint can run, in [`Mode::ALL`] order.
    pub fn supported_modes(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|&m| self.supports(m)).collect()
    }

    pub fn require_mode(&self, mode: Mode) -> Result<()> {
        if self.supports(mode) {
            return Ok(());
        }
        let have: Vec<&str> = self.supported_modes().iter().map(Mode::as_str).collect();
        Err(Error::ModeMismatch {
            checkpoint: if have.is_empty() { "none".into() } else { have.join(",") },
            requested: mode.to_string(),
        })
    }

    /// Writes the parameters `mode` reads.
    pub fn save(&self, path: &Path, mode: Mode) -> Result<()> {
        self.require_mode(mode)?;
        let names: Vec<String> = self.config.param_specs_for(mode).into_iter().map(|s| s.name).collect();
        let entries: Vec<(&str, &Tensor)> = names
            .iter()
            .map(|n| (n.as_str(), &self.params.get(n).expect("checked").value))
            .collect();
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let params = checkpoint::load(path)?;
        Self::from_params(config, params).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Records a forward pass. With `trainable` the parameters become gradient
    /// leaves; otherwise they are constants.
    pub fn trace(&self, sample: &PreparedSample, mode: Mode, trainable: bool) -> Result<Trace> {
        self.check_sample(sample, mode)?;
        let mut b = Builder {
            g: Graph::new(),
            params: &self.params,
            trainable,
            bound: HashMap::new(),
            order: Vec::new(),
            taps: Vec::new(),
        };
        let cfg = &self.config;
        let probs = match mode {
            Mode::Multimodal => {
                let feats = self.extract(&mut b, sample)?;
                let y_v = self.video_branch(&mut b, feats)?;
                let y_a = self.audio_branch(&mut b, sample)?;
                let joint = b.g.concat_cols(&[y_v, y_a])?;
                b.tap("joint", joint);
                let w = b.param("head.fusion.w")?;
                let bias = b.param("head.fusion.b")?;
                let logits = b.g.linear(joint, w, Some(bias))?;
                b.g.softmax_rows(logits)?
            }
            Mode::LipAudioOnly => {
                let y_a = self.audio_branch(&mut b, sample)?;
                let w = b.param("head.lip_audio.w")?;
                let bias = b.param("head.lip_audio.b")?;
                let logits = b.g.linear(y_a, w, Some(bias))?;
                b.g.softmax_rows(logits)?
            }
            Mode::FeaturesOnly => {
                let feats = self.extract(&mut b, sample)?;
                let g = cfg.grid;
                let flat = b.g.reshape(feats, &[g.n_f, g.n_p * g.p * g.p])?;
                let pooled = b.g.mean_rows(flat)?;
                b.tap("pooled_features", pooled);
                let w = b.param("head.features.w")?;
                let bias = b.param("head.features.b")?;
                let logits = b.g.linear(pooled, w, Some(bias))?;
                b.g.softmax_rows(logits)?
            }
        };
        b.tap("probs", probs);
        Ok(Trace {
            graph: b.g,
            params: b.order,
            taps: b.taps,
            probs,
        })
    }

    /// `[P(real), P(fake)]`.
    pub fn predict(&self, sample: &PreparedSample, mode: Mode) -> Result<[f64; 2]> {
        let t = self.trace(sample, mode, false)?;
        let p = t.graph.value(t.probs).data();
        Ok([p[0], p[1]])
    }

    /// Checks that `s` has the shapes `mode` reads.
    pub fn check_sample(&self, s: &PreparedSample, mode: Mode) -> Result<()> {
        self.require_mode(mode)?;
        let cfg = &self.config;
        let ex = &cfg.extractor;
        if mode != Mode::LipAudioOnly {
            let want = [cfg.grid.n_f, ex.frame_size, ex.frame_size, ex.in_channels];
            if s.faces.shape() != want {
                return Err(Error::shape("face frames", &want, s.faces.shape()));
            }
        }
        if mode != Mode::FeaturesOnly {
            let want = [cfg.lip_frames, cfg.lip_height, cfg.lip_width];
            if s.lips.frames().shape() != want {
                return Err(Error::shape("lip frames", &want, s.lips.frames().shape()));
            }
            let want = [cfg.lip_frames, cfg.audio_frame_width];
            if s.audio.frames().shape() != want {
                return Err(Error::shape("audio frames", &want, s.audio.frames().shape()));
            }
        }
        Ok(())
    }

    /// Conv ladder then a 1×1 projection, rearranged to `[N_f, N_p, P²]`.
    fn extract(&self, b: &mut Builder, s: &PreparedSample) -> Result<Var> {
        let ex = &self.config.extractor;
        let faces = b.g.constant(s.faces.clone());
        b.tap("faces", faces);
        let mut x = faces;
        for (i, st) in ex.stages.iter().enumerate() {
            for j in 0..st.convs {
                let w = b.param(&format!("extractor.stage{i}.conv{j}.w"))?;
                let bias = b.param(&format!("extractor.stage{i}.conv{j}.b"))?;
                let c = b.g.conv2d(x, w, bias, 3)?;
                x = b.g.relu(c)?;
            }
            x = b.g.max_pool2(x)?;
        }
        let w = b.param("extractor.proj.w")?;
        let bias = b.param("extractor.proj.b")?;
        let maps = b.g.conv2d(x, w, bias, 1)?;
        let (n, p, np) = (self.config.grid.n_f, ex.patch_size(), ex.n_patches);
        let p2 = p * p;
        let mut index = Vec::with_capacity(n * np * p2);
        for f in 0..n {
            for c in 0..np {
                for yx in 0..p2 {
                    index.push((f * p2 + yx) * np + c);
                }
            }
        }
        let feats = b.g.gather(maps, index, vec![n, np, p2])?;
        Ok(b.tap("features", feats))
    }

    fn video_branch(&self, b: &mut Builder, feats: Var) -> Result<Var> {
        let cfg = &self.config;
        let index = cfg.grid.flatten_index()?;
        let shape = cfg.grid.flattened_shape()?;
        let patches = b.g.gather(feats, index, shape.to_vec())?;
        b.tap("patches", patches);
        let e = b.param("video.embed.e")?;
        b.tap("video_embedding", e);
        let cls = b.param("video.embed.cls")?;
        let pos = b.param("video.embed.pos")?;
        let tokens = embed_graph(&mut b.g, patches, e, cls, pos)?;
        b.tap("video_tokens", tokens);
        let y = b.encoder("video", cfg.video_blocks, tokens, &cfg.video_attention)?;
        let y_v = b.branch_head("video", y)?;
        Ok(b.tap("y_v", y_v))
    }

    /// Lip queries attend over audio keys. The attended audio is placed beside
    /// the frame's own audio row, consecutive frames are grouped into tokens,
    /// and the tokens pass through a self-attention encoder.
    fn audio_branch(&self, b: &mut Builder, s: &PreparedSample) -> Result<Var> {
        let cfg = &self.config;
        let m = cfg.lip_frames;
        let lips = if cfg.center_lips {
            b.g.constant(center_frames(s.lips.frames()))
        } else {
            b.g.constant(s.lips.frames().clone())
        };
        b.tap("lips", lips);
        let q = b.g.reshape(lips, &[m, cfg.lip_query_width()])?;
        b.tap("lip_queries", q);
        let audio = b.g.constant(s.audio.frames().clone());
        b.tap("audio_frames", audio);
        let l1 = b.param("audio.adapter.l1")?;
        b.tap("adapter_l1", l1);
        let l2 = b.param("audio.adapter.l2")?;
        b.tap("adapter_l2", l2);
        let qp = b.g.matmul(q, l1)?;
        b.tap("adapted_queries", qp);
        let kp = b.g.matmul(audio, l2)?;
        b.tap("adapted_keys", kp);
        let (out, weights) = attention_graph(&mut b.g, qp, kp, audio)?;
        b.tap("cross_weights", weights);
        b.tap("cross_output", out);
        let rows = b.g.concat_cols(&[out, audio])?;
        let (index, shape) = tubelet_index(m, 1, cfg.audio_row_width(), cfg.audio_tubelet())?;
        let grouped = b.g.gather(rows, index, shape.to_vec())?;
        let e = b.param("audio.embed.e")?;
        let cls = b.param("audio.embed.cls")?;
        let pos = b.param("audio.embed.pos")?;
        let tokens = embed_graph(&mut b.g, grouped, e, cls, pos)?;
        b.tap("audio_tokens", tokens);
        let y = b.encoder("audio", cfg.audio_blocks, tokens, &cfg.audio_attention)?;
        let y_a = b.branch_head("audio", y)?;
        Ok(b.tap("y_a", y_a))
    }
}

/// Removes the per-pixel temporal mean of a `[frames, ...]` tensor.
fn center_frames(t: &Tensor) -> Tensor {
    let n = t.shape()[0];
    let w = t.numel() / n;
    let mut mean = vec![0.0; w];
    for row in t.data().chunks(w) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let data = t.data().chunks(w).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
