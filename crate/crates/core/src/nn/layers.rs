//! Layers with explicit forward caches and backward passes.
//!
//! Activations are row-major `(rows x width)` slices. Backward functions
//! accumulate parameter gradients into a [`Grads`] buffer and return the
//! gradient with respect to the layer input.

use rand::Rng;

use super::{
    gelu, gelu_grad, gemm, matmul, matmul_nt, matmul_tn, softmax_in_place, Grads, ParamId, ParamStore, Real, View,
    ViewMut,
};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(p: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = p.xavier(format!("{name}.w"), vec![d_in, d_out], rng);
        let b = p.zeros(format!("{name}.b"), vec![d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], n: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(n * self.d_out);
        let b = p.get(self.b);
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        matmul(x, p.get(self.w), &mut y, n, self.d_in, self.d_out, true);
        y
    }

    /// Accumulates weight gradients only.
    pub fn backward_params<T: Real>(&self, g: &mut Grads<T>, x: &[T], dy: &[T], n: usize) {
        matmul_tn(x, dy, g.get_mut(self.w), n, self.d_in, self.d_out, true);
        let db = g.get_mut(self.b);
        for row in dy.chunks_exact(self.d_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &[T], dy: &[T], n: usize) -> Vec<T> {
        self.backward_params(g, x, dy, n);
        let mut dx = vec![T::ZERO; n * self.d_in];
        matmul_nt(dy, p.get(self.w), &mut dx, n, self.d_out, self.d_in, false);
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(p: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = p.filled(format!("{name}.gamma"), vec![dim], 1.0);
        let beta = p.zeros(format!("{name}.beta"), vec![dim]);
        Self {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(self.eps);
        let mut y = vec![T::ZERO; n * d];
        let mut xhat = vec![T::ZERO; n * d];
        let mut rstd = vec![T::ZERO; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gamma[c] + beta[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
        n: usize,
    ) -> Vec<T> {
        let d = self.dim;
        let gamma = p.get(self.gamma);
        let inv_d = T::from_f64(1.0 / d as f64);
        {
            let dg = g.get_mut(self.gamma);
            for r in 0..n {
                for c in 0..d {
                    dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
                }
            }
        }
        {
            let db = g.get_mut(self.beta);
            for r in 0..n {
                for c in 0..d {
                    db[c] += dy[r * d + c];
                }
            }
        }
        let mut dx = vec![T::ZERO; n * d];
        for r in 0..n {
            let mut mean_dxhat = T::ZERO;
            let mut mean_dxhat_xhat = T::ZERO;
            for c in 0..d {
                let dxh = dy[r * d + c] * gamma[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[r * d + c];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            for c in 0..d {
                let dxh = dy[r * d + c] * gamma[c];
                dx[r * d + c] = cache.rstd[r] * (dxh - mean_dxhat - cache.xhat[r * d + c] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(p: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(p, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(p, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(p, x, n);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(p, &act, n);
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &[T],
        cache: &FeedForwardCache<T>,
        dy: &[T],
        n: usize,
    ) -> Vec<T> {
        let mut dact = self.down.backward(p, g, &cache.act, dy, n);
        for (d, &h) in dact.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(h);
        }
        self.up.backward(p, g, x, &dact, n)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// heads x n x m attention probabilities
    probs: Vec<T>,
    ctx: Vec<T>,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(p: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Self {
            q: Linear::new(p, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(p, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(p, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(p, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn scale<T: Real>(&self) -> T {
        T::from_f64(1.0 / ((self.dim / self.heads) as f64).sqrt())
    }

    /// Projected keys and values for a memory of `m` rows.
    pub fn project_kv<T: Real>(&self, p: &ParamStore<T>, xkv: &[T], m: usize) -> (Vec<T>, Vec<T>) {
        (self.k.forward(p, xkv, m), self.v.forward(p, xkv, m))
    }

    /// Attention over pre-projected keys/values; returns the context rows
    /// (before the output projection) and the probabilities.
    pub fn attend<T: Real>(&self, q: &[T], k: &[T], v: &[T], n: usize, m: usize, causal: bool) -> (Vec<T>, Vec<T>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale: T = self.scale();
        let mut probs = vec![T::ZERO; self.heads * n * m];
        let mut ctx = vec![T::ZERO; n * d];
        for h in 0..self.heads {
            let s = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                scale,
                View::cols_of(q, n, d, h * dh, dh),
                View::cols_of(k, m, d, h * dh, dh).t(),
                T::ZERO,
                ViewMut::dense(s, n, m),
            );
            for r in 0..n {
                let row = &mut s[r * m..(r + 1) * m];
                if causal {
                    // Query r sees keys 0..=r (queries and keys are aligned).
                    let visible = r + 1;
                    softmax_in_place(&mut row[..visible]);
                    row[visible..].fill(T::ZERO);
                } else {
                    softmax_in_place(row);
                }
            }
            gemm(
                T::ONE,
                View::dense(s, n, m),
                View::cols_of(v, m, d, h * dh, dh),
                T::ZERO,
                ViewMut::cols_of(&mut ctx, n, d, h * dh, dh),
            );
        }
        (ctx, probs)
    }

    /// Full forward; returns output rows and the cache for backward.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        xq: &[T],
        n: usize,
        xkv: &[T],
        m: usize,
        causal: bool,
    ) -> (Vec<T>, AttentionCache<T>) {
        let q = self.q.forward(p, xq, n);
        let (k, v) = self.project_kv(p, xkv, m);
        let (ctx, probs) = self.attend(&q, &k, &v, n, m, causal);
        let out = self.o.forward(p, &ctx, n);
        (out, AttentionCache { q, k, v, probs, ctx })
    }

    /// Returns (d xq, d xkv).
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        xq: &[T],
        n: usize,
        xkv: &[T],
        m: usize,
        cache: &AttentionCache<T>,
        dout: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale: T = self.scale();
        let dctx = self.o.backward(p, g, &cache.ctx, dout, n);
        let mut dq = vec![T::ZERO; n * d];
        let mut dk = vec![T::ZERO; m * d];
        let mut dv = vec![T::ZERO; m * d];
        let mut ds = vec![T::ZERO; n * m];
        for h in 0..self.heads {
            let probs = &cache.probs[h * n * m..(h + 1) * n * m];
            // dP = dctx_h @ V_h^T
            gemm(
                T::ONE,
                View::cols_of(&dctx, n, d, h * dh, dh),
                View::cols_of(&cache.v, m, d, h * dh, dh).t(),
                T::ZERO,
                ViewMut::dense(&mut ds, n, m),
            );
            // dV_h = P^T @ dctx_h
            gemm(
                T::ONE,
                View::dense(probs, n, m).t(),
                View::cols_of(&dctx, n, d, h * dh, dh),
                T::ZERO,
                ViewMut::cols_of(&mut dv, m, d, h * dh, dh),
            );
            for r in 0..n {
                let pr = &probs[r * m..(r + 1) * m];
                let dr = &mut ds[r * m..(r + 1) * m];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            gemm(
                scale,
                View::dense(&ds, n, m),
                View::cols_of(&cache.k, m, d, h * dh, dh),
                T::ZERO,
                ViewMut::cols_of(&mut dq, n, d, h * dh, dh),
            );
            gemm(
                scale,
                View::dense(&ds, n, m).t(),
                View::cols_of(&cache.q, n, d, h * dh, dh),
                T::ZERO,
                ViewMut::cols_of(&mut dk, m, d, h * dh, dh),
            );
        }
        let dxq = self.q.backward(p, g, xq, &dq, n);
        let mut dxkv = self.k.backward(p, g, xkv, &dk, m);
        let dxv = self.v.backward(p, g, xkv, &dv, m);
        for (a, b) in dxkv.iter_mut().zip(dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar objective sum(out * weights) checked against central differences.
    fn check_grads<F>(p: &mut ParamStore<f64>, f: F, analytic: &Grads<f64>)
    where
        F: Fn(&ParamStore<f64>) -> f64,
    {
        let h = 1e-6;
        for ti in 0..p.len() {
            let n = p.tensors()[ti].data.len();
            for i in 0..n {
                let orig = p.tensors()[ti].data[i];
                p.tensors_mut()[ti].data[i] = orig + h;
                let fp = f(p);
                p.tensors_mut()[ti].data[i] = orig - h;
                let fm = f(p);
                p.tensors_mut()[ti].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.data[ti][i];
                let diff = (fd - an).abs();
                assert!(
                    diff < 1e-8 || diff / fd.abs().max(an.abs()) < 1e-4,
                    "{}[{i}]: fd {fd} vs analytic {an}",
                    p.tensors()[ti].name
                );
            }
        }
    }

    #[test]
    fn attention_gradients_cross_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &causal in &[false, true] {
            let mut p = ParamStore::<f64>::new();
            let att = Attention::new(&mut p, "att", 8, 2, &mut rng);
            let ln = LayerNorm::new(&mut p, "ln", 8);
            let ff = FeedForward::new(&mut p, "ff", 8, 12, &mut rng);
            let n = 4;
            let m = if causal { 4 } else { 5 };
            let xq = rand_vec(&mut rng, n * 8);
            let xkv = rand_vec(&mut rng, m * 8);
            let wts = rand_vec(&mut rng, n * 8);
            let f = |p: &ParamStore<f64>| {
                let (h, _) = ln.forward(p, &xq, n);
                let (a, _) = att.forward(p, &h, n, &xkv, m, causal);
                let (y, _) = ff.forward(p, &a, n);
                y.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut g = p.zero_grads();
            let (h, lc) = ln.forward(&p, &xq, n);
            let (a, ac) = att.forward(&p, &h, n, &xkv, m, causal);
            let (_, fc) = ff.forward(&p, &a, n);
            let da = ff.backward(&p, &mut g, &a, &fc, &wts, n);
            let (dh, _) = att.backward(&p, &mut g, &h, n, &xkv, m, &ac, &da);
            ln.backward(&p, &mut g, &lc, &dh, n);
            check_grads(&mut p, f, &g);
        }
    }
}
