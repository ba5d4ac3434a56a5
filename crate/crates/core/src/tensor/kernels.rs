//! Raw loops behind the graph operations.

use super::Real;

/// Geometry of a batched 2-D convolution over NCHW data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*kh*kw, out_h*out_w]`.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npix = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let npix = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention over `[batch*seq, dim]` rows.
///
/// Writes the attended values to `out` and the row-stochastic attention weights
/// `[batch, heads, seq, seq]` to `probs`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
    causal: bool,
    out: &mut [T],
    probs: &mut [T],
) {
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut scores = alloc::vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = ((b * heads + h) * seq) * seq;
            for t in 0..seq {
                let qt = &q[(b * seq + t) * dim + h * dh..][..dh];
                let limit = if causal { t + 1 } else { seq };
                let mut max = T::neg_infinity();
                for (s, score) in scores.iter_mut().enumerate().take(limit) {
                    let ks = &k[(b * seq + s) * dim + h * dh..][..dh];
                    let dot: T = qt.iter().zip(ks).map(|(&a, &c)| a * c).sum();
                    *score = dot * scale;
                    if *score > max {
                        max = *score;
                    }
                }
                let prow = &mut probs[p_base + t * seq..p_base + (t + 1) * seq];
                let mut total = T::zero();
                for s in 0..seq {
                    if s < limit {
                        let e = (scores[s] - max).exp();
                        prow[s] = e;
                        total += e;
                    } else {
                        prow[s] = T::zero();
                    }
                }
                prow.iter_mut().take(limit).for_each(|p| *p /= total);
                let ot = &mut out[(b * seq + t) * dim + h * dh..][..dh];
                ot.iter_mut().for_each(|o| *o = T::zero());
                for (s, &p) in prow.iter().enumerate().take(limit) {
                    let vs = &v[(b * seq + s) * dim + h * dh..][..dh];
                    for (o, &x) in ot.iter_mut().zip(vs) {
                        *o += p * x;
                    }
                }
            }
        }
    }
}

/// Backward pass of [`attention_forward`]; accumulates into whichever of
/// `dq`, `dk`, `dv` are present.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dp = alloc::vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = ((b * heads + h) * seq) * seq;
            for t in 0..seq {
                let prow = &probs[p_base + t * seq..p_base + (t + 1) * seq];
                let dot_row = &dout[(b * seq + t) * dim + h * dh..][..dh];
                let mut weighted = T::zero();
                for s in 0..seq {
                    let vs = &v[(b * seq + s) * dim + h * dh..][..dh];
                    dp[s] = dot_row.iter().zip(vs).map(|(&a, &c)| a * c).sum();
                    weighted += prow[s] * dp[s];
                    if let Some(dv) = dv.as_deref_mut() {
                        let dvs = &mut dv[(b * seq + s) * dim + h * dh..][..dh];
                        for (d, &g) in dvs.iter_mut().zip(dot_row) {
                            *d += prow[s] * g;
                        }
                    }
                }
                let qt = &q[(b * seq + t) * dim + h * dh..][..dh];
                for s in 0..seq {
                    let ds = prow[s] * (dp[s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    if let Some(dq) = dq.as_deref_mut() {
                        let ks = &k[(b * seq + s) * dim + h * dh..][..dh];
                        let dqt = &mut dq[(b * seq + t) * dim + h * dh..][..dh];
                        for (d, &x) in dqt.iter_mut().zip(ks) {
                            *d += ds * x;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let dks = &mut dk[(b * seq + s) * dim + h * dh..][..dh];
                        for (d, &x) in dks.iter_mut().zip(qt) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
    }
}
