//! Pre-norm causal transformer over action tokens with hand-written backward.
//!
//! All parameters live in one flat vector; [`Layout`] records where each
//! tensor starts. Matrices are row-major `[in, out]`.

use crate::scalar::Scalar;
use crate::taxonomy::ActionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    /// Goal embedding rows including the null goal; 0 disables goal tokens.
    pub n_goals: usize,
    pub query: bool,
    pub ctx: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub verb_emb: usize,
    pub noun_emb: usize,
    pub goal_emb: Option<usize>,
    pub query_emb: Option<usize>,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub verb_head: usize,
    pub verb_bias: usize,
    pub noun_head: usize,
    pub noun_bias: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(dims: &Dims) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let d = dims.d;
        let verb_emb = take(dims.n_verbs * d);
        let noun_emb = take(dims.n_nouns * d);
        let goal_emb = (dims.n_goals > 0).then(|| take(dims.n_goals * d));
        let query_emb = dims.query.then(|| take(d));
        let pos_emb = take(dims.ctx * d);
        let layers = (0..dims.layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * dims.ff),
                b1: take(dims.ff),
                w2: take(dims.ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let verb_head = take(d * dims.n_verbs);
        let verb_bias = take(dims.n_verbs);
        let noun_head = take(d * dims.n_nouns);
        let noun_bias = take(dims.n_nouns);
        Layout {
            verb_emb,
            noun_emb,
            goal_emb,
            query_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            verb_head,
            verb_bias,
            noun_head,
            noun_bias,
            total: at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Token {
    Goal(usize),
    Action(ActionLabel),
    Query,
}

/// `out[m,n] = a[m,k] @ w[k,n]`.
fn matmul<F: Scalar>(a: &[F], w: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(F::zero());
        for p in 0..k {
            let aip = a[i * k + p];
            let wrow = &w[p * n..(p + 1) * n];
            for (r, &wv) in row.iter_mut().zip(wrow) {
                *r += aip * wv;
            }
        }
    }
}

/// `gw[k,n] += a[m,k]^T @ dout[m,n]`.
fn matmul_wgrad<F: Scalar>(a: &[F], dout: &[F], m: usize, k: usize, n: usize, gw: &mut [F]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let grow = &mut gw[p * n..(p + 1) * n];
            for (g, &dv) in grow.iter_mut().zip(drow) {
                *g += aip * dv;
            }
        }
    }
}

/// `da[m,k] += dout[m,n] @ w[k,n]^T`.
fn matmul_dinput<F: Scalar>(dout: &[F], w: &[F], m: usize, k: usize, n: usize, da: &mut [F]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let wrow = &w[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&dv, &wv) in drow.iter().zip(wrow) {
                s += dv * wv;
            }
            da[i * k + p] += s;
        }
    }
}

fn add_bias<F: Scalar>(x: &mut [F], b: &[F]) {
    for row in x.chunks_mut(b.len()) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn bias_grad<F: Scalar>(dout: &[F], gb: &mut [F]) {
    for row in dout.chunks(gb.len()) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
}

const LN_EPS: f64 = 1e-5;

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates gain/bias grads and adds the input grad into `dx`.
fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    g: &[F],
    d: usize,
    dg: &mut [F],
    db: &mut [F],
    dx: &mut [F],
) {
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..cache.rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let mean_a = sum_dxhat * inv_d;
        let mean_b = sum_dxhat_xhat * inv_d;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] += cache.rstd[r] * (dxh - mean_a - xh[j] * mean_b);
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let s = F::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (s * (x + F::of(GELU_C) * x * x * x)).tanh();
    F::of(0.5) * x * (F::one() + t)
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let s = F::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (s * (x + F::of(GELU_C) * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * s * (F::one() + F::of(3.0 * GELU_C) * x * x)
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[heads, T, T]`, zero above the diagonal.
    probs: Vec<F>,
    o: Vec<F>,
    ln2: LnCache<F>,
    c: Vec<F>,
    h1: Vec<F>,
    g: Vec<F>,
}

/// Activations retained for the backward pass.
pub(crate) struct Forward<F> {
    tokens: Vec<Token>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    /// Final normalized hidden states `[T, d]`.
    pub hidden: Vec<F>,
}

pub(crate) fn forward<F: Scalar>(p: &[F], lay: &Layout, dims: &Dims, tokens: &[Token]) -> Forward<F> {
    let (d, t_len) = (dims.d, tokens.len());
    let mut x = vec![F::zero(); t_len * d];
    for (t, tok) in tokens.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        let add = |row: &mut [F], off: usize| {
            for (r, &v) in row.iter_mut().zip(&p[off..off + d]) {
                *r += v;
            }
        };
        match *tok {
            Token::Action(l) => {
                add(row, lay.verb_emb + l.verb * d);
                add(row, lay.noun_emb + l.noun * d);
            }
            Token::Goal(g) => add(row, lay.goal_emb.expect("goal embedding") + g * d),
            Token::Query => add(row, lay.query_emb.expect("query embedding")),
        }
        add(row, lay.pos_emb + t * d);
    }

    let dh = d / dims.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut caches = Vec::with_capacity(dims.layers);
    for ll in &lay.layers {
        let (a, ln1) = layer_norm(&x, &p[ll.ln1_g..ll.ln1_g + d], &p[ll.ln1_b..ll.ln1_b + d], d);
        let mut q = vec![F::zero(); t_len * d];
        let mut k = vec![F::zero(); t_len * d];
        let mut v = vec![F::zero(); t_len * d];
        matmul(&a, &p[ll.wq..ll.wq + d * d], t_len, d, d, &mut q);
        matmul(&a, &p[ll.wk..ll.wk + d * d], t_len, d, d, &mut k);
        matmul(&a, &p[ll.wv..ll.wv + d * d], t_len, d, d, &mut v);

        let mut probs = vec![F::zero(); dims.heads * t_len * t_len];
        let mut o = vec![F::zero(); t_len * d];
        for h in 0..dims.heads {
            let off = h * dh;
            for i in 0..t_len {
                let pr = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    pr[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = F::zero();
                for s in pr.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in pr.iter_mut().take(i + 1) {
                    *s /= z;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let w = pr[j];
                    for (ov, &vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *ov += w * vv;
                    }
                }
            }
        }
        let mut attn = vec![F::zero(); t_len * d];
        matmul(&o, &p[ll.wo..ll.wo + d * d], t_len, d, d, &mut attn);
        add_bias(&mut attn, &p[ll.bo..ll.bo + d]);
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv += *av;
        }

        let (c, ln2) = layer_norm(&x, &p[ll.ln2_g..ll.ln2_g + d], &p[ll.ln2_b..ll.ln2_b + d], d);
        let ff = dims.ff;
        let mut h1 = vec![F::zero(); t_len * ff];
        matmul(&c, &p[ll.w1..ll.w1 + d * ff], t_len, d, ff, &mut h1);
        add_bias(&mut h1, &p[ll.b1..ll.b1 + ff]);
        let g: Vec<F> = h1.iter().map(|&u| gelu(u)).collect();
        let mut m = vec![F::zero(); t_len * d];
        matmul(&g, &p[ll.w2..ll.w2 + ff * d], t_len, ff, d, &mut m);
        add_bias(&mut m, &p[ll.b2..ll.b2 + d]);
        for (xv, mv) in x.iter_mut().zip(&m) {
            *xv += *mv;
        }
        caches.push(LayerCache { ln1, a, q, k, v, probs, o, ln2, c, h1, g });
    }
    let (hidden, lnf) = layer_norm(&x, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], d);
    Forward { tokens: tokens.to_vec(), layers: caches, lnf, hidden }
}

/// Verb and noun logits at hidden row `pos`.
pub(crate) fn readout<F: Scalar>(p: &[F], lay: &Layout, dims: &Dims, fwd: &Forward<F>, pos: usize) -> (Vec<F>, Vec<F>) {
    let d = dims.d;
    let h = &fwd.hidden[pos * d..(pos + 1) * d];
    let head = |w: usize, b: usize, n: usize| {
        let mut out = p[b..b + n].to_vec();
        for (j, &hv) in h.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&p[w + j * n..w + (j + 1) * n]) {
                *o += hv * wv;
            }
        }
        out
    };
    (head(lay.verb_head, lay.verb_bias, dims.n_verbs), head(lay.noun_head, lay.noun_bias, dims.n_nouns))
}

/// Back-propagates logit gradients at `positions` into `grad`.
pub(crate) fn backward<F: Scalar>(
    p: &[F],
    lay: &Layout,
    dims: &Dims,
    fwd: &Forward<F>,
    positions: &[usize],
    dlogits: &[(Vec<F>, Vec<F>)],
    grad: &mut [F],
) {
    let (d, t_len) = (dims.d, fwd.tokens.len());
    let mut dhidden = vec![F::zero(); t_len * d];
    for (&pos, (dv, dn)) in positions.iter().zip(dlogits) {
        let h = &fwd.hidden[pos * d..(pos + 1) * d];
        let dh_row = &mut dhidden[pos * d..(pos + 1) * d];
        for (w, b, n, dl) in
            [(lay.verb_head, lay.verb_bias, dims.n_verbs, dv), (lay.noun_head, lay.noun_bias, dims.n_nouns, dn)]
        {
            for (gb, &g) in grad[b..b + n].iter_mut().zip(dl) {
                *gb += g;
            }
            for j in 0..d {
                let wrow = &p[w + j * n..w + (j + 1) * n];
                let mut s = F::zero();
                for (&wv, &g) in wrow.iter().zip(dl) {
                    s += wv * g;
                }
                dh_row[j] += s;
                let hv = h[j];
                for (gw, &g) in grad[w + j * n..w + (j + 1) * n].iter_mut().zip(dl) {
                    *gw += hv * g;
                }
            }
        }
    }

    let mut dx = vec![F::zero(); t_len * d];
    {
        let (gg, gb) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
        layer_norm_backward(&dhidden, &fwd.lnf, &p[lay.lnf_g..lay.lnf_g + d], d, gg, gb, &mut dx);
    }

    let dh = d / dims.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let ff = dims.ff;
    for (ll, cache) in lay.layers.iter().zip(&fwd.layers).rev() {
        // MLP branch: x2 = x1 + W2 gelu(W1 LN(x1) + b1) + b2
        let dm = &dx;
        bias_grad(dm, &mut grad[ll.b2..ll.b2 + d]);
        matmul_wgrad(&cache.g, dm, t_len, ff, d, &mut grad[ll.w2..ll.w2 + ff * d]);
        let mut dgl = vec![F::zero(); t_len * ff];
        matmul_dinput(dm, &p[ll.w2..ll.w2 + ff * d], t_len, ff, d, &mut dgl);
        for (dg, &u) in dgl.iter_mut().zip(&cache.h1) {
            *dg *= gelu_grad(u);
        }
        bias_grad(&dgl, &mut grad[ll.b1..ll.b1 + ff]);
        matmul_wgrad(&cache.c, &dgl, t_len, d, ff, &mut grad[ll.w1..ll.w1 + d * ff]);
        let mut dc = vec![F::zero(); t_len * d];
        matmul_dinput(&dgl, &p[ll.w1..ll.w1 + d * ff], t_len, d, ff, &mut dc);
        let mut dx1 = dx.clone();
        {
            let (gg, gb) = split_pair(grad, ll.ln2_g, ll.ln2_b, d);
            layer_norm_backward(&dc, &cache.ln2, &p[ll.ln2_g..ll.ln2_g + d], d, gg, gb, &mut dx1);
        }

        // Attention branch: x1 = x + Wo attn(LN(x)) + bo
        let dattn = &dx1;
        bias_grad(dattn, &mut grad[ll.bo..ll.bo + d]);
        matmul_wgrad(&cache.o, dattn, t_len, d, d, &mut grad[ll.wo..ll.wo + d * d]);
        let mut d_o = vec![F::zero(); t_len * d];
        matmul_dinput(dattn, &p[ll.wo..ll.wo + d * d], t_len, d, d, &mut d_o);

        let mut dq = vec![F::zero(); t_len * d];
        let mut dk = vec![F::zero(); t_len * d];
        let mut dv = vec![F::zero(); t_len * d];
        let mut dp = vec![F::zero(); t_len];
        for h in 0..dims.heads {
            let off = h * dh;
            for i in 0..t_len {
                let pr = &cache.probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let doi = &d_o[i * d + off..i * d + off + dh];
                let mut dot = F::zero();
                for j in 0..=i {
                    let vj = &cache.v[j * d + off..j * d + off + dh];
                    let s = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<F>();
                    dp[j] = s;
                    dot += pr[j] * s;
                    for (dvv, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                        *dvv += pr[j] * g;
                    }
                }
                for j in 0..=i {
                    let ds = pr[j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                        dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                    }
                }
            }
        }
        let mut da = vec![F::zero(); t_len * d];
        for (w, dproj) in [(ll.wq, &dq), (ll.wk, &dk), (ll.wv, &dv)] {
            matmul_wgrad(&cache.a, dproj, t_len, d, d, &mut grad[w..w + d * d]);
            matmul_dinput(dproj, &p[w..w + d * d], t_len, d, d, &mut da);
        }
        let mut dx0 = dx1;
        {
            let (gg, gb) = split_pair(grad, ll.ln1_g, ll.ln1_b, d);
            layer_norm_backward(&da, &cache.ln1, &p[ll.ln1_g..ll.ln1_g + d], d, gg, gb, &mut dx0);
        }
        dx = dx0;
    }

    for (t, tok) in fwd.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let mut scatter = |off: usize| {
            for (g, &v) in grad[off..off + d].iter_mut().zip(row) {
                *g += v;
            }
        };
        match *tok {
            Token::Action(l) => {
                scatter(lay.verb_emb + l.verb * d);
                scatter(lay.noun_emb + l.noun * d);
            }
            Token::Goal(g) => scatter(lay.goal_emb.expect("goal embedding") + g * d),
            Token::Query => scatter(lay.query_emb.expect("query embedding")),
        }
        scatter(lay.pos_emb + t * d);
    }
}

/// Two disjoint mutable windows of length `n` into `buf` (`a < b`).
fn split_pair<F>(buf: &mut [F], a: usize, b: usize, n: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(a + n <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + n], &mut hi[..n])
}

pub(crate) fn softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: F = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub(crate) fn log_softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let scaled: Vec<F> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|&s| s.exp()).sum::<F>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}
