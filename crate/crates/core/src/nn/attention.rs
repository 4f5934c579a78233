use alloc::vec;
use alloc::vec::Vec;

use super::{Dense, Module, Param, Real};
use crate::rng::Rng;

/// Multi-head cross-attention from image positions (queries) to context
/// tokens (keys and values). The caller adds the residual.
///
/// With [`CrossAttention::with_positions`], one shared projection of a
/// positional encoding is added to both queries and keys (as in DETR), so
/// the logits start out with a kernel that peaks where a pixel's position
/// matches a token's.
#[derive(Debug, Clone)]
pub struct CrossAttention<T> {
    pub heads: usize,
    pub dim: usize,
    pub to_q: Dense<T>,
    pub to_k: Dense<T>,
    pub to_v: Dense<T>,
    pub to_out: Dense<T>,
    pub pos: Option<Dense<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct AttentionCache<T> {
    x: Vec<T>,
    ctx: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Post-softmax weights, `[head, position, token]`.
    pub probs: Vec<T>,
    mixed: Vec<T>,
    pos_q: Vec<T>,
    pos_k: Vec<T>,
    n: usize,
    tokens: usize,
}

impl<T: Real> CrossAttention<T> {
    pub fn new(name: &str, channels: usize, ctx_dim: usize, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        Self {
            heads,
            dim,
            to_q: Dense::new(&alloc::format!("{name}.q"), channels, dim, 1.0, rng),
            to_k: Dense::new(&alloc::format!("{name}.k"), ctx_dim, dim, 1.0, rng),
            to_v: Dense::new(&alloc::format!("{name}.v"), ctx_dim, dim, 1.0, rng),
            to_out: Dense::new(&alloc::format!("{name}.out"), dim, channels, 0.5, rng),
            pos: None,
        }
    }

    /// Adds the shared positional projection from `pos_dim` encoding channels.
    pub fn with_positions(mut self, name: &str, pos_dim: usize, rng: &mut Rng) -> Self {
        self.pos = Some(Dense::new(&alloc::format!("{name}.pos"), pos_dim, self.dim, 1.5, rng));
        self
    }

    fn scale(&self) -> T {
        T::from_f64(1.0 / num_traits::Float::sqrt((self.dim / self.heads) as f64))
    }

    /// `x` is `[channels, n]`, `ctx` is `[ctx_dim, tokens]`; masked-out tokens
    /// receive zero weight. At least one token must be unmasked.
    pub fn forward(&self, x: &[T], n: usize, ctx: &[T], tokens: usize, mask: &[bool]) -> (Vec<T>, AttentionCache<T>) {
        self.forward_positional(x, n, ctx, tokens, mask, &[], &[])
    }

    /// [`CrossAttention::forward`] with positional encodings `pos_q[pos_dim, n]`
    /// and `pos_k[pos_dim, tokens]`; ignored unless built [`CrossAttention::with_positions`].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_positional(
        &self,
        x: &[T],
        n: usize,
        ctx: &[T],
        tokens: usize,
        mask: &[bool],
        pos_q: &[T],
        pos_k: &[T],
    ) -> (Vec<T>, AttentionCache<T>) {
        debug_assert!(mask.iter().any(|m| *m));
        let mut q = self.to_q.forward(x, n);
        let mut k = self.to_k.forward(ctx, tokens);
        if let Some(pos) = &self.pos {
            super::add_into(&mut q, &pos.forward(pos_q, n));
            super::add_into(&mut k, &pos.forward(pos_k, tokens));
        }
        let v = self.to_v.forward(ctx, tokens);
        let dh = self.dim / self.heads;
        let scale = self.scale();
        let mut probs = vec![T::zero(); self.heads * n * tokens];
        let mut mixed = vec![T::zero(); self.dim * n];
        let mut scores = vec![T::zero(); tokens];
        for h in 0..self.heads {
            for p in 0..n {
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    if !mask[j] {
                        continue;
                    }
                    let mut acc = T::zero();
                    for i in h * dh..(h + 1) * dh {
                        acc += q[i * n + p] * k[i * tokens + j];
                    }
                    *s = acc * scale;
                    max = max.max(*s);
                }
                let row = &mut probs[(h * n + p) * tokens..][..tokens];
                let mut total = T::zero();
                for j in 0..tokens {
                    if mask[j] {
                        row[j] = (scores[j] - max).exp();
                        total += row[j];
                    }
                }
                for r in row.iter_mut() {
                    *r = *r / total;
                }
                for i in h * dh..(h + 1) * dh {
                    let mut acc = T::zero();
                    for (j, &a) in row.iter().enumerate() {
                        acc += a * v[i * tokens + j];
                    }
                    mixed[i * n + p] = acc;
                }
            }
        }
        let out = self.to_out.forward(&mixed, n);
        let (pos_q, pos_k) = if self.pos.is_some() { (pos_q.to_vec(), pos_k.to_vec()) } else { (Vec::new(), Vec::new()) };
        let cache = AttentionCache { x: x.to_vec(), ctx: ctx.to_vec(), q, k, v, probs, mixed, pos_q, pos_k, n, tokens };
        (out, cache)
    }

    /// Returns gradients with respect to `x` and `ctx`.
    pub fn backward(&mut self, dout: &[T], c: &AttentionCache<T>) -> (Vec<T>, Vec<T>) {
        let (n, tokens) = (c.n, c.tokens);
        let dh = self.dim / self.heads;
        let scale = self.scale();
        let dmixed = self.to_out.backward(dout, &c.mixed, n);
        let mut dq = vec![T::zero(); self.dim * n];
        let mut dk = vec![T::zero(); self.dim * tokens];
        let mut dv = vec![T::zero(); self.dim * tokens];
        let mut dprob = vec![T::zero(); tokens];
        for h in 0..self.heads {
            for p in 0..n {
                let row = &c.probs[(h * n + p) * tokens..][..tokens];
                for (j, dp) in dprob.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for i in h * dh..(h + 1) * dh {
                        let g = dmixed[i * n + p];
                        acc += g * c.v[i * tokens + j];
                        dv[i * tokens + j] += g * row[j];
                    }
                    *dp = acc;
                }
                let dot = row.iter().zip(&dprob).fold(T::zero(), |a, (&r, &d)| a + r * d);
                for j in 0..tokens {
                    let ds = row[j] * (dprob[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for i in h * dh..(h + 1) * dh {
                        dq[i * n + p] += ds * c.k[i * tokens + j];
                        dk[i * tokens + j] += ds * c.q[i * n + p];
                    }
                }
            }
        }
        if let Some(pos) = &mut self.pos {
            pos.backward(&dq, &c.pos_q, n);
            pos.backward(&dk, &c.pos_k, tokens);
        }
        let dx = self.to_q.backward(&dq, &c.x, n);
        let mut dctx = self.to_k.backward(&dk, &c.ctx, tokens);
        super::add_into(&mut dctx, &self.to_v.backward(&dv, &c.ctx, tokens));
        (dx, dctx)
    }

    /// Head-averaged weights `[token, position]` from a forward cache.
    pub fn head_averaged_maps(&self, cache: &AttentionCache<T>) -> Vec<T> {
        let (n, tokens) = (cache.n, cache.tokens);
        let inv = T::from_f64(1.0 / self.heads as f64);
        let mut out = vec![T::zero(); tokens * n];
        for h in 0..self.heads {
            for p in 0..n {
                for j in 0..tokens {
                    out[j * n + p] += cache.probs[(h * n + p) * tokens + j] * inv;
                }
            }
        }
        out
    }

    pub fn macs(&self, n: usize, tokens: usize) -> usize {
        self.to_q.macs(n) + self.to_k.macs(tokens) + self.to_v.macs(tokens) + self.to_out.macs(n) + 2 * self.dim * n * tokens
    }
}

impl<T: Real> Module<T> for CrossAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        [&self.to_q, &self.to_k, &self.to_v, &self.to_out]
            .into_iter()
            .chain(self.pos.as_ref())
            .flat_map(|d| d.params())
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let Self { to_q, to_k, to_v, to_out, pos, .. } = self;
        [to_q, to_k, to_v, to_out].into_iter().chain(pos.as_mut()).flat_map(|d| d.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let mut att = CrossAttention::<f64>::new("a", 3, 2, 4, 2, &mut rng);
        let (n, tokens) = (5, 3);
        let mask = [true, false, true];
        let x: Vec<f64> = (0..3 * n).map(|_| rng.normal()).collect();
        let ctx: Vec<f64> = (0..2 * tokens).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..3 * n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let loss = |a: &CrossAttention<f64>, x: &[f64], ctx: &[f64]| -> f64 {
            let (y, _) = a.forward(x, n, ctx, tokens, &mask);
            y.iter().zip(&weights).map(|(a, w)| a * a * w).sum()
        };
        let (y, cache) = att.forward(&x, n, &ctx, tokens, &mask);
        let dy: Vec<f64> = y.iter().zip(&weights).map(|(a, w)| 2.0 * a * w).collect();
        let (dx, dctx) = att.backward(&dy, &cache);
        let eps = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let num = (loss(&att, &xp, &ctx) - loss(&att, &xm, &ctx)) / (2.0 * eps);
            assert!((num - dx[i]).abs() < 1e-6 * num.abs().max(1.0), "x[{i}]");
        }
        for i in 0..ctx.len() {
            let (mut cp, mut cm) = (ctx.clone(), ctx.clone());
            cp[i] += eps;
            cm[i] -= eps;
            let num = (loss(&att, &x, &cp) - loss(&att, &x, &cm)) / (2.0 * eps);
            assert!((num - dctx[i]).abs() < 1e-6 * num.abs().max(1.0), "ctx[{i}]");
        }
        // masked token gets no weight
        assert!(cache.probs.chunks(3).all(|r| r[1] == 0.0));
        let maps = att.head_averaged_maps(&cache);
        for p in 0..n {
            let s: f64 = (0..tokens).map(|j| maps[j * n + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let mut att = CrossAttention::<f64>::new("a", 3, 2, 4, 2, &mut rng).with_positions("a", 2, &mut rng);
        let (n, tokens) = (4, 2);
        let mask = [true, true];
        let x: Vec<f64> = (0..3 * n).map(|_| rng.normal()).collect();
        let ctx: Vec<f64> = (0..2 * tokens).map(|_| rng.normal()).collect();
        let pq: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
        let pk: Vec<f64> = (0..2 * tokens).map(|_| rng.normal()).collect();
        let loss = |a: &CrossAttention<f64>| -> f64 {
            let (y, _) = a.forward_positional(&x, n, &ctx, tokens, &mask, &pq, &pk);
            y.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64)).sum()
        };
        let (y, cache) = att.forward_positional(&x, n, &ctx, tokens, &mask, &pq, &pk);
        let dy: Vec<f64> = y.iter().enumerate().map(|(i, v)| 2.0 * v * (1.0 + i as f64)).collect();
        att.backward(&dy, &cache);
        let analytic = att.pos.as_ref().unwrap().weight.grad.clone();
        for i in 0..analytic.len() {
            let orig = att.pos.as_ref().unwrap().weight.value[i];
            att.pos.as_mut().unwrap().weight.value[i] = orig + 1e-6;
            let lp = loss(&att);
            att.pos.as_mut().unwrap().weight.value[i] = orig - 1e-6;
            let lm = loss(&att);
            att.pos.as_mut().unwrap().weight.value[i] = orig;
            let num = (lp - lm) / 2e-6;
            assert!((num - analytic[i]).abs() < 1e-6 * num.abs().max(1.0), "pos[{i}]");
        }
    }
}
