//! Scaled dot-product attention, multi-head self-attention, the pre-norm
//! encoder block, and lip/audio cross-attention with width adapters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::glorot_uniform;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    /// hidden width of the block's MLP
    pub mlp_hidden: usize,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize, mlp_hidden: usize) -> Self {
        AttentionConfig {
            n_heads,
            d_model,
            mlp_hidden,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(format!("attention sizes must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// `softmax(Q·Kᵀ / √d)·V` recorded on `g`; returns `(output, weights)`.
pub fn attention_graph(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec(), g.value(v).shape().to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention query/key", &qs, &ks));
    }
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::shape("attention key/value", &ks, &vs));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, w) = attention_graph(&mut g, qv, kv, vv)?;
    Ok((g.value(out).clone(), g.value(w).clone()))
}

/// Parameters of one encoder block. Head `h` owns columns
/// `h·d_k .. (h+1)·d_k` of `wq`, `wk` and `wv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Parameter suffixes in the order of [`EncoderBlockParams::tensors`].
pub const ENCODER_PARAM_NAMES: [&str; 12] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gamma", "ln2.beta",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl EncoderBlockParams {
    pub fn shapes(cfg: &AttentionConfig) -> [Vec<usize>; 12] {
        let (d, hdim) = (cfg.d_model, cfg.mlp_hidden);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d, hdim],
            vec![hdim],
            vec![hdim, d],
            vec![d],
        ]
    }

    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let (d, hdim) = (cfg.d_model, cfg.mlp_hidden);
        EncoderBlockParams {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: glorot_uniform(&[d, d], d, d, rng),
            wk: glorot_uniform(&[d, d], d, d, rng),
            wv: glorot_uniform(&[d, d], d, d, rng),
            wo: glorot_uniform(&[d, d], d, d, rng),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w1: glorot_uniform(&[d, hdim], d, hdim, rng),
            b1: Tensor::zeros(&[hdim]),
            w2: glorot_uniform(&[hdim, d], hdim, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// All sublayer weights zero; layer norms at identity gain.
    pub fn zero_sublayers(cfg: &AttentionConfig) -> Self {
        let shapes = Self::shapes(cfg);
        let mut t: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        t[0] = Tensor::full(&shapes[0], 1.0);
        t[6] = Tensor::full(&shapes[6], 1.0);
        Self::from_tensors(t)
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn from_tensors(t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("12 encoder tensors");
        EncoderBlockParams {
            ln1_gamma: next(),
            ln1_beta: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }

    pub fn to_graph(&self, g: &mut Graph) -> EncoderBlockVars {
        let vars: Vec<Var> = self.tensors().iter().map(|t| g.constant((*t).clone())).collect();
        EncoderBlockVars::from_vars(&vars)
    }
}

/// Graph handles for the tensors of an [`EncoderBlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderBlockVars {
    /// `vars` in [`ENCODER_PARAM_NAMES`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 12);
        EncoderBlockVars {
            ln1_gamma: vars[0],
            ln1_beta: vars[1],
            wq: vars[2],
            wk: vars[3],
            wv: vars[4],
            wo: vars[5],
            ln2_gamma: vars[6],
            ln2_beta: vars[7],
            w1: vars[8],
            b1: vars[9],
            w2: vars[10],
            b2: vars[11],
        }
    }
}

/// Self-attention with per-head projections, heads concatenated in head order
/// and mapped through `wo`. `z: [n, D]`.
pub fn mhsa_graph(g: &mut Graph, z: Var, wq: Var, wk: Var, wv: Var, wo: Var, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    let zs = g.value(z).shape().to_vec();
    if zs.len() != 2 || zs[1] != cfg.d_model {
        return Err(Error::shape("self-attention input", &[zs[0], cfg.d_model], &zs));
    }
    let q = g.matmul(z, wq)?;
    let k = g.matmul(z, wk)?;
    let v = g.matmul(z, wv)?;
    let dk = cfg.d_k();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (s, e) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        heads.push(attention_graph(g, qh, kh, vh)?.0);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, wo)
}

pub fn multi_head_self_attention(z: &TokenSequence, params: &EncoderBlockParams, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.tokens.clone());
    let p = params.to_graph(&mut g);
    let out = mhsa_graph(&mut g, zv, p.wq, p.wk, p.wv, p.wo, cfg)?;
    Ok(g.value(out).clone())
}

/// Pre-norm block: `z′ = MSA(LN(z₀)) + z₀`, `z₁ = MLP(LN(z′)) + z′`, `y = LN(z₁)`.
///
/// The final normalisation has no learnable gain or shift. Returns `(z₁, y)`.
pub fn encoder_block_graph(g: &mut Graph, z0: Var, p: &EncoderBlockVars, cfg: &AttentionConfig) -> Result<(Var, Var)> {
    let n1 = g.layer_norm(z0, p.ln1_gamma, p.ln1_beta)?;
    let attn = mhsa_graph(g, n1, p.wq, p.wk, p.wv, p.wo, cfg)?;
    let z1p = g.add(attn, z0)?;
    let n2 = g.layer_norm(z1p, p.ln2_gamma, p.ln2_beta)?;
    let h = g.linear(n2, p.w1, Some(p.b1))?;
    let h = g.gelu(h)?;
    let mlp = g.linear(h, p.w2, Some(p.b2))?;
    let z1 = g.add(mlp, z1p)?;
    let d = cfg.d_model;
    let one = g.constant(Tensor::full(&[d], 1.0));
    let zero = g.constant(Tensor::zeros(&[d]));
    let y = g.layer_norm(z1, one, zero)?;
    Ok((z1, y))
}

pub fn encoder_block(z0: &TokenSequence, params: &EncoderBlockParams, cfg: &AttentionConfig) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let zv = g.constant(z0.tokens.clone());
    let p = params.to_graph(&mut g);
    let (z1, y) = encoder_block_graph(&mut g, zv, &p, cfg)?;
    Ok((g.value(z1).clone(), g.value(y).clone()))
}

/// `L1: [d_q, r]` maps lip queries and `L2: [d_k, r]` maps audio keys to the
/// shared width `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionAdapters {
    pub l1: Tensor,
    pub l2: Tensor,
}

impl CrossAttentionAdapters {
    pub fn validate(&self) -> Result<()> {
        let (_, r1) = self.l1.dims2("adapter L1")?;
        let (_, r2) = self.l2.dims2("adapter L2")?;
        if r1 != r2 {
            return Err(Error::shape("adapter output widths", self.l1.shape(), self.l2.shape()));
        }
        Ok(())
    }
}

/// `Q′ = Q·L1`, `K′ = K·L2`, output `softmax(Q′K′ᵀ/√r)·V`. Returns `(output, weights)`.
pub fn cross_attention_graph(g: &mut Graph, q: Var, k: Var, v: Var, l1: Var, l2: Var) -> Result<(Var, Var)> {
    let (l1s, l2s) = (g.value(l1).shape().to_vec(), g.value(l2).shape().to_vec());
    let (qs, ks) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec());
    if qs.len() != 2 || qs[1] != l1s[0] {
        return Err(Error::shape("cross-attention query/L1", &qs, &l1s));
    }
    if ks.len() != 2 || ks[1] != l2s[0] {
        return Err(Error::shape("cross-attention key/L2", &ks, &l2s));
    }
    if l1s[1] != l2s[1] {
        return Err(Error::shape("adapter output widths", &l1s, &l2s));
    }
    let qp = g.matmul(q, l1)?;
    let kp = g.matmul(k, l2)?;
    attention_graph(g, qp, kp, v)
}

pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, adapters: &CrossAttentionAdapters) -> Result<(Tensor, Tensor)> {
    adapters.validate()?;
    let mut g = Graph::new();
    let vars = [q, k, v, &adapters.l1, &adapters.l2].map(|t| g.constant(t.clone()));
    let (out, w) = cross_attention_graph(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4])?;
    Ok((g.value(out).clone(), g.value(w).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key() {
        let x = m(&[&[1.0, 0.0]]);
        let (out, w) = scaled_dot_attention(&x, &x, &x).unwrap();
        assert_eq!(out, x);
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = m(&[&[0.3, -1.0]]);
        let k = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let v = m(&[&[1.0, 5.0], &[3.0, -1.0]]);
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn two_key_hand_value() {
        // scores [1/√2, 0]; w0 = 1 / (1 + e^{-1/√2})
        let (out, w) = scaled_dot_attention(
            &m(&[&[1.0, 0.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &m(&[&[1.0, 2.0], &[3.0, 4.0]]),
        )
        .unwrap();
        let w0 = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
        assert!((w.data()[0] - w0).abs() < 1e-12);
        assert!((w.data()[0] - 0.6698).abs() < 1e-4 && (w.data()[1] - 0.3302).abs() < 1e-4);
        assert!((out.data()[0] - 1.6604).abs() < 1e-4 && (out.data()[1] - 2.6604).abs() < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(scaled_dot_attention(&a, &Tensor::zeros(&[2, 4]), &a).is_err());
        assert!(scaled_dot_attention(&a, &a, &Tensor::zeros(&[3, 3])).is_err());
        assert!(AttentionConfig::new(3, 8, 4).validate().is_err());
    }

    #[test]
    fn zero_projections_give_zero_output() {
        let cfg = AttentionConfig::new(2, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = TokenSequence { tokens: Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng) };
        let p = EncoderBlockParams::zero_sublayers(&cfg);
        let out = multi_head_self_attention(&z, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_head_identity_is_plain_attention() {
        let cfg = AttentionConfig::new(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut p = EncoderBlockParams::zero_sublayers(&cfg);
        p.wq = Tensor::eye(3);
        p.wk = Tensor::eye(3);
        p.wv = Tensor::eye(3);
        p.wo = Tensor::eye(3);
        let out = multi_head_self_attention(&TokenSequence { tokens: z.clone() }, &p, &cfg).unwrap();
        let (expect, _) = scaled_dot_attention(&z, &z, &z).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn zero_sublayers_pass_through() {
        let cfg = AttentionConfig::new(2, 6, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::uniform(&[5, 6], -2.0, 2.0, &mut rng);
        let p = EncoderBlockParams::zero_sublayers(&cfg);
        let (z1, y) = encoder_block(&TokenSequence { tokens: z0.clone() }, &p, &cfg).unwrap();
        assert_eq!(z1, z0);
        let ln = layer_norm(&z0, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-5).unwrap();
        assert_eq!(y, ln);
    }

    #[test]
    fn cross_attention_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::uniform(&[1, 5], 0.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
        let ad = CrossAttentionAdapters {
            l1: Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng),
            l2: Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng),
        };
        let (out, w) = cross_attention(&q, &k, &k, &ad).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out, k);
        let bad = CrossAttentionAdapters {
            l1: Tensor::zeros(&[5, 4]),
            l2: Tensor::zeros(&[3, 2]),
        };
        assert!(cross_attention(&q, &k, &k, &bad).is_err());
        let wrong_q = Tensor::zeros(&[1, 6]);
        assert!(cross_attention(&wrong_q, &k, &k, &ad).is_err());
    }
}
