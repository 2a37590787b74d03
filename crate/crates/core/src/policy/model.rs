//! One-block causal transformer with tied input/output embeddings and exact
//! reverse-mode gradients.
//!
//! Attention, feed-forward and output read parameter-free RMS-normalized
//! copies of the residual stream; without them the tied output layer lets
//! logit scale grow quadratically in the embedding norm and plain SGD diverges.
//!
//! Parameters live in a single flat buffer so snapshots, global-norm clipping
//! and finite-difference checks operate on plain slices.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_heads: 4,
            max_len: 128,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        4 * self.d_model
    }
}

/// Offsets of each tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            tok_emb: take(cfg.vocab_size * d),
            pos_emb: take(cfg.max_len * d),
            wq: take(d * d),
            wk: take(d * d),
            wv: take(d * d),
            wo: take(d * d),
            w1: take(d * cfg.ffn()),
            w2: take(cfg.ffn() * d),
        }
    }

    pub fn total(&self) -> usize {
        self.w2.end
    }
}

/// All trainable parameters of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    layout: Layout,
}

/// Activations retained for the backward pass.
pub struct Forward {
    tokens: Vec<TokenId>,
    n: usize,
    n0: Norm,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[head][t][s]` with `s <= t`, dense `n x n` per head.
    att: Vec<f64>,
    o: Vec<f64>,
    n1: Norm,
    u: Vec<f64>,
    g: Vec<f64>,
    n2: Norm,
    /// Positions whose next-token logits were computed.
    pub positions: Vec<usize>,
    /// Logits per entry of `positions`, each of length `vocab_size`.
    pub logits: Vec<Vec<f64>>,
}

const NORM_EPS: f64 = 1e-6;

/// Row-wise `y = x / sqrt(mean(x^2) + eps)` together with the inverse scales.
struct Norm {
    y: Vec<f64>,
    inv: Vec<f64>,
}

impl Norm {
    fn new(x: &[f64], d: usize) -> Self {
        let mut y = vec![0.0; x.len()];
        let inv: Vec<f64> = x
            .chunks(d)
            .zip(y.chunks_mut(d))
            .map(|(xr, yr)| {
                let r = 1.0 / (dot(xr, xr) / d as f64 + NORM_EPS).sqrt();
                for (o, &v) in yr.iter_mut().zip(xr) {
                    *o = v * r;
                }
                r
            })
            .collect();
        Self { y, inv }
    }

    /// Accumulate into `dx` the pullback of `dy`.
    fn backward(&self, dy: &[f64], dx: &mut [f64], d: usize) {
        for (t, &r) in self.inv.iter().enumerate() {
            let row = t * d..(t + 1) * d;
            let yr = &self.y[row.clone()];
            let dyr = &dy[row.clone()];
            let m = dot(dyr, yr) / d as f64;
            for ((o, &g), &y) in dx[row].iter_mut().zip(dyr).zip(yr) {
                *o += r * (g - y * m);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `out (n x b) = x (n x a) * w (a x b)`.
fn matmul(x: &[f64], w: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        let row = &mut out[i * b..(i + 1) * b];
        for kk in 0..a {
            let xv = x[i * a + kk];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[kk * b..(kk + 1) * b];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `dw (a x b) += x^T (a x n) * dy (n x b)`.
fn accum_outer(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, a: usize, b: usize) {
    for i in 0..n {
        let dyr = &dy[i * b..(i + 1) * b];
        for kk in 0..a {
            let xv = x[i * a + kk];
            if xv == 0.0 {
                continue;
            }
            let dwr = &mut dw[kk * b..(kk + 1) * b];
            for (g, &d) in dwr.iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
    }
}

/// `dx (n x a) += dy (n x b) * w^T (b x a)`.
fn accum_back(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, a: usize, b: usize) {
    for i in 0..n {
        let dyr = &dy[i * b..(i + 1) * b];
        for kk in 0..a {
            let wr = &w[kk * b..(kk + 1) * b];
            dx[i * a + kk] += dot(dyr, wr);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

impl PolicyParams {
    /// Random initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total()];
        let mut r = rng::stream(seed, rng::stream_id(30, 0));
        let d = config.d_model as f64;
        let emb = Normal::new(0.0, config.init_std).expect("valid std");
        for x in &mut data[layout.tok_emb.clone()] {
            *x = emb.sample(&mut r);
        }
        for x in &mut data[layout.pos_emb.clone()] {
            *x = emb.sample(&mut r) * 0.5;
        }
        let square = Normal::new(0.0, 0.5 / d.sqrt()).expect("valid std");
        for range in [&layout.wq, &layout.wk, &layout.wv, &layout.wo, &layout.w1] {
            for x in &mut data[range.clone()] {
                *x = square.sample(&mut r);
            }
        }
        let down = Normal::new(0.0, 0.5 / (4.0 * d).sqrt()).expect("valid std");
        for x in &mut data[layout.w2.clone()] {
            *x = down.sample(&mut r);
        }
        Ok(Self { config, data, layout })
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self {
            data: vec![0.0; layout.total()],
            config,
            layout,
        })
    }

    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total() {
            return Err(Error::Input(format!(
                "parameter count {} does not match config ({})",
                data.len(),
                layout.total()
            )));
        }
        Ok(Self { config, data, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Run the network over `tokens`, producing next-token logits at each of
    /// `positions` (position `p` predicts token `p + 1`).
    pub fn forward(&self, tokens: &[TokenId], positions: &[usize]) -> Result<Forward> {
        let n = tokens.len();
        let cfg = &self.config;
        if n == 0 || n > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {n} outside [1, {}]",
                cfg.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!("token {t} outside the vocabulary")));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::Input(format!("output position {p} beyond length {n}")));
        }
        let d = cfg.d_model;
        let f = cfg.ffn();
        let h = cfg.n_heads;
        let dh = d / h;
        let l = &self.layout;
        let emb = self.slice(&l.tok_emb);
        let pos = self.slice(&l.pos_emb);

        let mut x0 = vec![0.0; n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            let p = &pos[t * d..(t + 1) * d];
            for j in 0..d {
                x0[t * d + j] = e[j] + p[j];
            }
        }
        let n0 = Norm::new(&x0, d);
        let q = matmul(&n0.y, self.slice(&l.wq), n, d, d);
        let k = matmul(&n0.y, self.slice(&l.wk), n, d, d);
        let v = matmul(&n0.y, self.slice(&l.wv), n, d, d);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = vec![0.0; h * n * n];
        let mut o = vec![0.0; n * d];
        for hh in 0..h {
            let c = hh * dh..(hh + 1) * dh;
            for t in 0..n {
                let qt = &q[t * d + c.start..t * d + c.end];
                let row = &mut att[(hh * n + t) * n..(hh * n + t) * n + n];
                let mut m = f64::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k[s * d + c.start..s * d + c.end];
                    row[s] = dot(qt, ks) * scale;
                    m = m.max(row[s]);
                }
                let mut z = 0.0;
                for s in 0..=t {
                    row[s] = (row[s] - m).exp();
                    z += row[s];
                }
                for s in 0..=t {
                    row[s] /= z;
                    let a = row[s];
                    for j in c.clone() {
                        o[t * d + j] += a * v[s * d + j];
                    }
                }
            }
        }
        let attn_out = matmul(&o, self.slice(&l.wo), n, d, d);
        let x1: Vec<f64> = x0.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let n1 = Norm::new(&x1, d);
        let u = matmul(&n1.y, self.slice(&l.w1), n, d, f);
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let ff = matmul(&g, self.slice(&l.w2), n, f, d);
        let x2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        let n2 = Norm::new(&x2, d);

        let vsize = cfg.vocab_size;
        let logits: Vec<Vec<f64>> = positions
            .iter()
            .map(|&p| {
                let xp = &n2.y[p * d..(p + 1) * d];
                (0..vsize).map(|tok| dot(xp, &emb[tok * d..(tok + 1) * d])).collect()
            })
            .collect();
        if logits.iter().flatten().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logits in forward pass".into()));
        }
        Ok(Forward {
            tokens: tokens.to_vec(),
            n,
            n0,
            q,
            k,
            v,
            att,
            o,
            n1,
            u,
            g,
            n2,
            positions: positions.to_vec(),
            logits,
        })
    }

    /// Accumulate into `grad` the gradient of a scalar objective whose
    /// derivative with respect to `fwd.logits[i]` is `dlogits[i]`.
    pub fn backward(&self, fwd: &Forward, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        assert_eq!(dlogits.len(), fwd.positions.len());
        assert_eq!(grad.len(), self.data.len());
        let cfg = &self.config;
        let n = fwd.n;
        let d = cfg.d_model;
        let f = cfg.ffn();
        let h = cfg.n_heads;
        let dh = d / h;
        let l = self.layout.clone();
        let emb = self.slice(&l.tok_emb);

        // Output projection (tied to the token embeddings).
        let mut dn2 = vec![0.0; n * d];
        {
            let gemb = &mut grad[l.tok_emb.clone()];
            for (&p, dz) in fwd.positions.iter().zip(dlogits) {
                let xp = &fwd.n2.y[p * d..(p + 1) * d];
                let dxp = &mut dn2[p * d..(p + 1) * d];
                for (tok, &g) in dz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = tok * d..(tok + 1) * d;
                    for ((ge, &x), (dx, &e)) in gemb[row.clone()].iter_mut().zip(xp).zip(dxp.iter_mut().zip(&emb[row]))
                    {
                        *ge += g * x;
                        *dx += g * e;
                    }
                }
            }
        }

        let mut dx2 = vec![0.0; n * d];
        fwd.n2.backward(&dn2, &mut dx2, d);

        // Feed-forward block: x2 = x1 + gelu(norm(x1) W1) W2.
        let mut dx1 = dx2.clone();
        accum_outer(&mut grad[l.w2.clone()], &fwd.g, &dx2, n, f, d);
        let mut dg = vec![0.0; n * f];
        accum_back(&mut dg, &dx2, self.slice(&l.w2), n, f, d);
        let du: Vec<f64> = dg.iter().zip(&fwd.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        accum_outer(&mut grad[l.w1.clone()], &fwd.n1.y, &du, n, d, f);
        let mut dn1 = vec![0.0; n * d];
        accum_back(&mut dn1, &du, self.slice(&l.w1), n, d, f);
        fwd.n1.backward(&dn1, &mut dx1, d);

        // Attention block: x1 = x0 + attn(norm(x0)) Wo.
        let mut dx0 = dx1.clone();
        accum_outer(&mut grad[l.wo.clone()], &fwd.o, &dx1, n, d, d);
        let mut dout = vec![0.0; n * d];
        accum_back(&mut dout, &dx1, self.slice(&l.wo), n, d, d);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut da = vec![0.0; n];
        for hh in 0..h {
            let c = hh * dh..(hh + 1) * dh;
            for t in 0..n {
                let row = &fwd.att[(hh * n + t) * n..(hh * n + t) * n + n];
                let dot_t = &dout[t * d + c.start..t * d + c.end];
                let mut weighted = 0.0;
                for s in 0..=t {
                    da[s] = dot(dot_t, &fwd.v[s * d + c.start..s * d + c.end]);
                    weighted += row[s] * da[s];
                    for (j, &g) in c.clone().zip(dot_t) {
                        dv[s * d + j] += row[s] * g;
                    }
                }
                for s in 0..=t {
                    let ds = row[s] * (da[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in c.clone() {
                        dq[t * d + j] += ds * fwd.k[s * d + j];
                        dk[s * d + j] += ds * fwd.q[t * d + j];
                    }
                }
            }
        }
        accum_outer(&mut grad[l.wq.clone()], &fwd.n0.y, &dq, n, d, d);
        accum_outer(&mut grad[l.wk.clone()], &fwd.n0.y, &dk, n, d, d);
        accum_outer(&mut grad[l.wv.clone()], &fwd.n0.y, &dv, n, d, d);
        let mut dn0 = vec![0.0; n * d];
        accum_back(&mut dn0, &dq, self.slice(&l.wq), n, d, d);
        accum_back(&mut dn0, &dk, self.slice(&l.wk), n, d, d);
        accum_back(&mut dn0, &dv, self.slice(&l.wv), n, d, d);
        fwd.n0.backward(&dn0, &mut dx0, d);

        for (t, &tok) in fwd.tokens.iter().enumerate() {
            let src = &dx0[t * d..(t + 1) * d];
            let e = l.tok_emb.start + tok as usize * d;
            for (g, &x) in grad[e..e + d].iter_mut().zip(src) {
                *g += x;
            }
            let p = l.pos_emb.start + t * d;
            for (g, &x) in grad[p..p + d].iter_mut().zip(src) {
                *g += x;
            }
        }
    }

    /// Next-token distribution after `prefix`.
    pub fn next_distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let fwd = self.forward(prefix, &[prefix.len() - 1])?;
        Ok(softmax(&fwd.logits[0]))
    }

    /// Ancestral sampling from `prefix`; stops after `eos` or `max_new` tokens.
    /// A temperature of zero decodes greedily.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        temperature: f64,
        eos: TokenId,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        if prefix.is_empty() || prefix.len() + max_new > self.config.max_len {
            return Err(Error::Input(format!(
                "prefix {} + max_new {max_new} exceeds context {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        let mut dec = Decoder::new(self);
        for &t in &prefix[..prefix.len() - 1] {
            dec.push(t, false)?;
        }
        let mut z = dec.push(prefix[prefix.len() - 1], true)?;
        let mut out = Vec::with_capacity(max_new);
        for i in 0..max_new {
            let next = if temperature <= 1e-8 {
                argmax(&z)
            } else {
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                rng::sample_logits(&scaled, rng)
            } as TokenId;
            out.push(next);
            if next == eos || i + 1 == max_new {
                break;
            }
            z = dec.push(next, true)?;
        }
        Ok(out)
    }
}

/// Incremental decoding with cached keys and values. Every per-token
/// operation matches `forward` step for step, so logits agree bitwise.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    k: Vec<f64>,
    v: Vec<f64>,
    n: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        Self {
            params,
            k: Vec::new(),
            v: Vec::new(),
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Append `token`; returns its next-token logits when `want_logits`
    /// (otherwise an empty vector).
    pub fn push(&mut self, token: TokenId, want_logits: bool) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        if self.n >= cfg.max_len {
            return Err(Error::Input(format!("decoder context {} is full", cfg.max_len)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token {token} outside the vocabulary")));
        }
        let d = cfg.d_model;
        let f = cfg.ffn();
        let h = cfg.n_heads;
        let dh = d / h;
        let l = &p.layout;
        let emb = p.slice(&l.tok_emb);
        let pos = p.slice(&l.pos_emb);
        let t = self.n;
        let e = &emb[token as usize * d..(token as usize + 1) * d];
        let x0: Vec<f64> = (0..d).map(|j| e[j] + pos[t * d + j]).collect();
        let n0 = Norm::new(&x0, d);
        let q = matmul(&n0.y, p.slice(&l.wq), 1, d, d);
        self.k.extend(matmul(&n0.y, p.slice(&l.wk), 1, d, d));
        self.v.extend(matmul(&n0.y, p.slice(&l.wv), 1, d, d));
        self.n += 1;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = vec![0.0; d];
        let mut row = vec![0.0; t + 1];
        for hh in 0..h {
            let c = hh * dh..(hh + 1) * dh;
            let qt = &q[c.clone()];
            let mut m = f64::NEG_INFINITY;
            for s in 0..=t {
                let ks = &self.k[s * d + c.start..s * d + c.end];
                row[s] = dot(qt, ks) * scale;
                m = m.max(row[s]);
            }
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            for s in 0..=t {
                row[s] /= z;
                let a = row[s];
                for j in c.clone() {
                    o[j] += a * self.v[s * d + j];
                }
            }
        }
        let attn_out = matmul(&o, p.slice(&l.wo), 1, d, d);
        let x1: Vec<f64> = x0.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let n1 = Norm::new(&x1, d);
        let u = matmul(&n1.y, p.slice(&l.w1), 1, d, f);
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let ff = matmul(&g, p.slice(&l.w2), 1, f, d);
        let x2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        if !want_logits {
            return Ok(Vec::new());
        }
        let n2 = Norm::new(&x2, d);
        let z: Vec<f64> = (0..cfg.vocab_size)
            .map(|tok| dot(&n2.y, &emb[tok * d..(tok + 1) * d]))
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits in decoder".into()));
        }
        Ok(z)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyParams {
        PolicyParams::init(
            ModelConfig {
                vocab_size: 11,
                d_model: 8,
                n_heads: 2,
                max_len: 16,
                init_std: 0.5,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(ModelConfig::for_vocab(50)).unwrap();
        let dist = p.next_distribution(&[1, 2, 3]).unwrap();
        for x in dist {
            assert!((x - 1.0 / 50.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_normalized() {
        let p = tiny();
        let fwd = p.forward(&[1, 4, 2, 9, 3], &[0, 1, 2, 3, 4]).unwrap();
        for z in &fwd.logits {
            let s: f64 = softmax(z).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = tiny();
        let a = p.forward(&[1, 4, 2], &[1]).unwrap();
        let b = p.forward(&[1, 4, 2, 7, 7, 7], &[1]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = tiny();
        assert!(matches!(p.forward(&[0; 17], &[0]), Err(Error::Input(_))));
        assert!(matches!(p.forward(&[11], &[0]), Err(Error::Input(_))));
        assert!(matches!(p.forward(&[1, 2], &[2]), Err(Error::Input(_))));
        assert!(PolicyParams::init(
            ModelConfig {
                n_heads: 3,
                ..ModelConfig::for_vocab(10)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn greedy_sampling_is_deterministic() {
        let p = tiny();
        let mut r1 = rng::stream(1, 0);
        let mut r2 = rng::stream(2, 0);
        let a = p.sample(&[1, 2], 6, 0.0, 0, &mut r1).unwrap();
        let b = p.sample(&[1, 2], 6, 0.0, 0, &mut r2).unwrap();
        assert_eq!(a, b);
        let c = p.sample(&[1, 2], 6, 1.0, 0, &mut rng::stream(5, 0)).unwrap();
        let d = p.sample(&[1, 2], 6, 1.0, 0, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn cached_decoder_matches_full_forward_bitwise() {
        let p = tiny();
        let toks: Vec<TokenId> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let positions: Vec<usize> = (0..toks.len()).collect();
        let full = p.forward(&toks, &positions).unwrap();
        let mut dec = Decoder::new(&p);
        for (i, &t) in toks.iter().enumerate() {
            assert_eq!(dec.push(t, true).unwrap(), full.logits[i]);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
