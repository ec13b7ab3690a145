//! Tubelet partitioning, patch flattening and token embedding.
//!
//! Tubelet and patch rows are produced by index maps so that the same
//! rearrangement can be recorded on a [`Graph`] as a differentiable gather.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Spatial size `h × w` and temporal depth `t` of one tubelet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TubeletConfig {
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl TubeletConfig {
    pub fn new(h: usize, w: usize, t: usize) -> Self {
        TubeletConfig { h, w, t }
    }
}

/// `(n_t, n_h, n_w) = (⌊T/t⌋, ⌊H/h⌋, ⌊W/w⌋)`; remainders are dropped.
pub fn token_counts(h: usize, w: usize, t: usize, cfg: TubeletConfig) -> (usize, usize, usize) {
    (t / cfg.t.max(1), h / cfg.h.max(1), w / cfg.w.max(1))
}

/// Flat source index for each entry of the `[n_tok, t·h·w]` tubelet matrix.
///
/// Rows run time-major, then row-major over space; each row is the tubelet
/// volume flattened in `(t, h, w)` order.
pub fn tubelet_index(frames: usize, height: usize, width: usize, cfg: TubeletConfig) -> Result<(Vec<usize>, [usize; 2])> {
    if cfg.h == 0 || cfg.w == 0 || cfg.t == 0 {
        return Err(Error::InvalidArgument(format!("tubelet dimensions must be >= 1: {cfg:?}")));
    }
    let (nt, nh, nw) = token_counts(height, width, frames, cfg);
    if nt == 0 || nh == 0 || nw == 0 {
        return Err(Error::InvalidArgument(format!(
            "tubelet {cfg:?} is larger than a {frames}x{height}x{width} stack"
        )));
    }
    let vol = cfg.t * cfg.h * cfg.w;
    let mut index = Vec::with_capacity(nt * nh * nw * vol);
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                for dt in 0..cfg.t {
                    for dh in 0..cfg.h {
                        let f = it * cfg.t + dt;
                        let r = ih * cfg.h + dh;
                        let base = (f * height + r) * width + iw * cfg.w;
                        index.extend(base..base + cfg.w);
                    }
                }
            }
        }
    }
    Ok((index, [nt * nh * nw, vol]))
}

fn thw(stack: &Tensor) -> Result<(usize, usize, usize)> {
    match stack.shape()[..] {
        [t, h, w] => Ok((t, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "tubelet stacks are [T, H, W], got {:?}",
            stack.shape()
        ))),
    }
}

pub fn tubelet_partition(stack: &Tensor, cfg: TubeletConfig) -> Result<Tensor> {
    let (t, h, w) = thw(stack)?;
    let (index, shape) = tubelet_index(t, h, w, cfg)?;
    let d = stack.data();
    Ok(Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| d[i]).collect()))
}

/// Inverse of [`tubelet_partition`] on the covered region: returns the
/// `[n_t·t, n_h·h, n_w·w]` stack the tubelets were cut from.
pub fn tubelet_reassemble(tokens: &Tensor, frames: usize, height: usize, width: usize, cfg: TubeletConfig) -> Result<Tensor> {
    let (index, shape) = tubelet_index(frames, height, width, cfg)?;
    if tokens.shape() != shape {
        return Err(Error::shape("tubelet_reassemble", &shape, tokens.shape()));
    }
    let (nt, nh, nw) = token_counts(height, width, frames, cfg);
    let (ct, ch, cw) = (nt * cfg.t, nh * cfg.h, nw * cfg.w);
    let mut out = vec![0.0; ct * ch * cw];
    for (&src, &v) in index.iter().zip(tokens.data()) {
        let f = src / (height * width);
        let r = (src / width) % height;
        let c = src % width;
        out[(f * ch + r) * cw + c] = v;
    }
    Ok(Tensor::from_parts(vec![ct, ch, cw], out))
}

/// Temporal/spatial division of the extracted feature stack `[N_f, N_p, P²]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// temporal divisions per video (frames)
    pub n_f: usize,
    /// spatial divisions per frame
    pub n_p: usize,
    /// spatial division size
    pub p: usize,
    /// temporal division size
    pub f: usize,
}

impl PatchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.n_p == 0 || self.p == 0 || self.f == 0 {
            return Err(Error::Config(format!("patch grid dimensions must be >= 1: {self:?}")));
        }
        if self.n_f % self.f != 0 {
            return Err(Error::Config(format!(
                "temporal division size F={} does not divide N_f={}",
                self.f, self.n_f
            )));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.n_p * self.n_f / self.f
    }

    pub fn token_width(&self) -> usize {
        self.p * self.p * self.f
    }

    /// Shape of the flattened patch matrix, `[(N_p·N_f)/F, P²·F]`.
    pub fn flattened_shape(&self) -> Result<[usize; 2]> {
        self.validate()?;
        Ok([self.token_count(), self.token_width()])
    }

    /// Row `g·N_p + p` stacks patch `p` of frames `g·F .. g·F+F`.
    pub fn flatten_index(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let p2 = self.p * self.p;
        let mut index = Vec::with_capacity(self.n_f * self.n_p * p2);
        for g in 0..self.n_f / self.f {
            for patch in 0..self.n_p {
                for df in 0..self.f {
                    let base = ((g * self.f + df) * self.n_p + patch) * p2;
                    index.extend(base..base + p2);
                }
            }
        }
        Ok(index)
    }
}

pub fn flatten_patches(x: &Tensor, grid: PatchGrid) -> Result<Tensor> {
    let p2 = grid.p * grid.p;
    if x.shape() != [grid.n_f, grid.n_p, p2] {
        return Err(Error::shape("flatten_patches", &[grid.n_f, grid.n_p, p2], x.shape()));
    }
    let index = grid.flatten_index()?;
    let d = x.data();
    let shape = grid.flattened_shape()?;
    Ok(Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| d[i]).collect()))
}

/// Embedded tokens, `[(1 + n_tokens), D]`; row 0 is the classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// projection `[patch_width, D]`
    pub e: Tensor,
    /// positional embedding `[1 + n_tokens, D]`
    pub e_pos: Tensor,
    /// classification token `[D]`
    pub cls: Tensor,
}

/// `[x_cls; x_p·E] + E_pos` recorded on `g`.
pub fn embed_graph(g: &mut Graph, x_p: Var, e: Var, cls: Var, e_pos: Var) -> Result<Var> {
    let proj = g.matmul(x_p, e)?;
    let width = g.value(proj).cols();
    let cls_shape = g.value(cls).shape().to_vec();
    if cls_shape != [width] {
        return Err(Error::shape("embed cls", &[width], &cls_shape));
    }
    let cls_row = g.reshape(cls, &[1, width])?;
    let seq = g.concat_rows(&[cls_row, proj])?;
    let rows = g.value(seq).rows();
    let pos_shape = g.value(e_pos).shape().to_vec();
    if pos_shape != [rows, width] {
        return Err(Error::shape("embed positions", &[rows, width], &pos_shape));
    }
    g.add(seq, e_pos)
}

pub fn embed(x_p: &Tensor, params: &EmbeddingParams) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let x = g.constant(x_p.clone());
    let e = g.constant(params.e.clone());
    let cls = g.constant(params.cls.clone());
    let pos = g.constant(params.e_pos.clone());
    let out = embed_graph(&mut g, x, e, cls, pos)?;
    Ok(TokenSequence {
        tokens: g.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn token_count_examples() {
        assert_eq!(token_counts(256, 256, 30, TubeletConfig::new(16, 16, 5)), (6, 16, 16));
        assert_eq!(token_counts(257, 256, 30, TubeletConfig::new(16, 16, 5)).1, 16);
        assert_eq!(token_counts(35, 140, 300, TubeletConfig::new(7, 28, 10)), (30, 5, 5));
    }

    #[test]
    fn partition_examples() {
        let s = ramp(&[2, 2, 2]);
        let one = tubelet_partition(&s, TubeletConfig::new(2, 2, 2)).unwrap();
        assert_eq!(one.shape(), &[1, 8]);
        assert_eq!(one.data(), s.data());

        let s = ramp(&[4, 2, 2]);
        let two = tubelet_partition(&s, TubeletConfig::new(2, 2, 2)).unwrap();
        assert_eq!(two.shape(), &[2, 8]);
        assert_eq!(two.row(0), &(0..8).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(two.row(1), &(8..16).map(f64::from).collect::<Vec<_>>()[..]);

        assert!(tubelet_partition(&s, TubeletConfig::new(3, 2, 2)).is_err());
    }

    #[test]
    fn spatial_ordering_is_row_major() {
        // 1 frame, 2x4, tubelets 1x2: rows are (0,0), (0,1), (1,0), (1,1)
        let s = ramp(&[1, 2, 4]);
        let t = tubelet_partition(&s, TubeletConfig::new(1, 2, 1)).unwrap();
        assert_eq!(t.data(), s.data());
        let t = tubelet_partition(&s, TubeletConfig::new(2, 2, 1)).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }

    proptest! {
        #[test]
        fn reassembly_inverts_partition(
            t in 1usize..7, h in 1usize..9, w in 1usize..9,
            ct in 1usize..4, ch in 1usize..4, cw in 1usize..4,
        ) {
            prop_assume!(ct <= t && ch <= h && cw <= w);
            let cfg = TubeletConfig::new(ch, cw, ct);
            let s = ramp(&[t, h, w]);
            let tokens = tubelet_partition(&s, cfg).unwrap();
            let back = tubelet_reassemble(&tokens, t, h, w, cfg).unwrap();
            let (nt, nh, nw) = token_counts(h, w, t, cfg);
            prop_assert_eq!(back.shape(), &[nt * ct, nh * ch, nw * cw]);
            for f in 0..nt * ct {
                for r in 0..nh * ch {
                    for c in 0..nw * cw {
                        prop_assert_eq!(back.data()[(f * nh * ch + r) * nw * cw + c], s.data()[(f * h + r) * w + c]);
                    }
                }
            }
        }

        #[test]
        fn token_counts_monotone(h in 1usize..300, w in 1usize..300, t in 1usize..300,
                                 a in 1usize..20, b in 1usize..20, c in 1usize..20) {
            let (nt, nh, nw) = token_counts(h, w, t, TubeletConfig::new(a, b, c));
            let (nt2, nh2, nw2) = token_counts(h, w, t, TubeletConfig::new(a + 1, b + 1, c + 1));
            prop_assert!(nt2 <= nt && nh2 <= nh && nw2 <= nw);
        }

        #[test]
        fn embed_adds_one_row(n_p in 1usize..5, groups in 1usize..4, f in 1usize..4, p in 1usize..4, d in 1usize..6) {
            let grid = PatchGrid { n_f: groups * f, n_p, p, f };
            let x = ramp(&[grid.n_f, n_p, p * p]);
            let xp = flatten_patches(&x, grid).unwrap();
            let params = EmbeddingParams {
                e: Tensor::full(&[grid.token_width(), d], 0.01),
                e_pos: Tensor::zeros(&[xp.rows() + 1, d]),
                cls: Tensor::zeros(&[d]),
            };
            let z = embed(&xp, &params).unwrap();
            prop_assert_eq!(z.len(), xp.rows() + 1);
        }
    }

    #[test]
    fn flatten_examples() {
        let grid = PatchGrid { n_f: 6, n_p: 4, p: 2, f: 3 };
        let x = ramp(&[6, 4, 4]);
        let xp = flatten_patches(&x, grid).unwrap();
        assert_eq!(xp.shape(), &[8, 12]);
        // row 1 = patch 1 of frames 0, 1, 2
        let expect: Vec<f64> = [4.0, 20.0, 36.0].iter().flat_map(|&b| (0..4).map(move |k| b + k as f64)).collect();
        assert_eq!(xp.row(1), &expect[..]);
        // row 4 = patch 0 of frames 3, 4, 5
        assert_eq!(xp.row(4)[0], 48.0);

        let g1 = PatchGrid { n_f: 6, n_p: 4, p: 2, f: 1 };
        assert_eq!(flatten_patches(&x, g1).unwrap().shape(), &[24, 4]);

        let paper = PatchGrid { n_f: 30, n_p: 512, p: 8, f: 5 };
        assert_eq!(paper.flattened_shape().unwrap(), [3072, 320]);

        let bad = PatchGrid { n_f: 6, n_p: 4, p: 2, f: 4 };
        assert!(flatten_patches(&x, bad).is_err());
    }

    #[test]
    fn embed_examples() {
        let xp = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let zero = EmbeddingParams {
            e: Tensor::eye(2),
            e_pos: Tensor::zeros(&[3, 2]),
            cls: Tensor::zeros(&[2]),
        };
        let z = embed(&xp, &zero).unwrap();
        assert_eq!(z.tokens.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);

        let p = EmbeddingParams {
            e: Tensor::full(&[2, 2], 0.7),
            e_pos: Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            cls: Tensor::vector(vec![-1.0, 0.5]).unwrap(),
        };
        let z = embed(&Tensor::zeros(&[2, 2]), &p).unwrap();
        assert_eq!(z.tokens.data(), &[0.0, 2.5, 3.0, 4.0, 5.0, 6.0]);

        let bad = EmbeddingParams {
            e_pos: Tensor::zeros(&[2, 2]),
            ..zero
        };
        assert!(embed(&xp, &bad).is_err());
    }
}
