//! The conditional diffusion transformer.
//!
//! Latent rows are the tokens. Each token is the concatenation of the noisy
//! latent row and the matching original-latent row (the paired-latent input
//! header). Blocks run adaLN-Zero modulated self-attention, cross-attention
//! over the 77 text rows, and a pointwise feed-forward, all conditioned on
//! timestep-plus-identity embeddings. Forward and backward passes are written
//! by hand; the backward returns gradients for every parameter.
//!
//! Pad text rows are exactly zero and the key/value projections carry no
//! bias, so pads act as null attention slots: they contribute softmax mass
//! `exp(0)` and a zero value, which lets both passes skip them entirely.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::num::{self, Real};
use crate::seed::rng_from;
use crate::textcond::{TextEmbeddingSeq, SEQ_LEN};
use crate::world::LatentCode;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub k: usize,
    pub d: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_txt: usize,
    pub id_dim: usize,
    pub mlp_ratio: usize,
    /// Largest valid diffusion timestep.
    pub t_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 32,
            hidden: 128,
            n_blocks: 4,
            n_heads: 4,
            d_txt: 64,
            id_dim: 64,
            mlp_ratio: 4,
            t_max: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(EditError::InvalidConfig(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        for (name, v) in [
            ("k", self.k),
            ("d", self.d),
            ("hidden", self.hidden),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_txt", self.d_txt),
            ("id_dim", self.id_dim),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(EditError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.hidden
    }
}

/// Everything the denoiser consumes besides (w_t, t). `w_o` and `id_emb` are
/// both present or both absent (the image-null flag); `text` absent is the
/// empty-instruction null.
#[derive(Debug, Clone)]
pub struct Conditioning<F> {
    pub w_o: Option<LatentCode<F>>,
    pub id_emb: Option<Array1<F>>,
    pub text: Option<TextEmbeddingSeq<F>>,
}

impl<F: Real> Conditioning<F> {
    pub fn null() -> Self {
        Self { w_o: None, id_emb: None, text: None }
    }

    pub fn image_null(&self) -> bool {
        self.w_o.is_none()
    }

    pub fn text_null(&self) -> bool {
        self.text.is_none()
    }

    fn check(&self) -> Result<()> {
        if self.w_o.is_some() != self.id_emb.is_some() {
            return Err(EditError::InvalidConfig(
                "inconsistent null flags: w_o and id_emb must be nulled together".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Accumulates weight/bias grads and returns the input grad.
    fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        grad.w = &grad.w + &x.t().dot(dy);
        if let Some(gb) = &mut grad.b {
            *gb = &*gb + &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.t())
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: self.b.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<F> {
    /// adaLN-Zero: silu(cond) -> 9h (shift/scale/gate per sub-layer).
    pub modulation: Linear<F>,
    pub attn_qkv: Linear<F>,
    pub attn_out: Linear<F>,
    pub cross_q: Linear<F>,
    /// d_txt -> 2h (keys then values), bias-free so pad rows stay null.
    pub cross_kv: Linear<F>,
    pub cross_out: Linear<F>,
    pub mlp_fc1: Linear<F>,
    pub mlp_fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct Params<F> {
    pub header: Linear<F>,
    pub time_mlp1: Linear<F>,
    pub time_mlp2: Linear<F>,
    /// Bias-free tanh MLP so a zero identity embeds to exactly zero.
    pub id_mlp1: Linear<F>,
    pub id_mlp2: Linear<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// silu(cond) -> 2h (shift, scale) for the final norm.
    pub final_mod: Linear<F>,
    pub head: Linear<F>,
}

pub enum TensorRef<'a, F> {
    M(&'a Array2<F>),
    V(&'a Array1<F>),
}

pub enum TensorMut<'a, F> {
    M(&'a mut Array2<F>),
    V(&'a mut Array1<F>),
}

macro_rules! push_linear {
    ($list:expr, $name:expr, $lin:expr, $wrap_m:expr, $wrap_v:expr) => {{
        $list.push((format!("{}.w", $name), $wrap_m(&$lin.w)));
        if let Some(b) = &$lin.b {
            $list.push((format!("{}.b", $name), $wrap_v(b)));
        }
    }};
}

macro_rules! push_linear_mut {
    ($list:expr, $name:expr, $lin:expr) => {{
        $list.push((format!("{}.w", $name), TensorMut::M(&mut $lin.w)));
        if let Some(b) = &mut $lin.b {
            $list.push((format!("{}.b", $name), TensorMut::V(b)));
        }
    }};
}

impl<F: Real> Params<F> {
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_, F>)> {
        let mut out: Vec<(String, TensorRef<'_, F>)> = Vec::new();
        let m = TensorRef::M;
        let v = TensorRef::V;
        push_linear!(out, "header", self.header, m, v);
        push_linear!(out, "time_mlp1", self.time_mlp1, m, v);
        push_linear!(out, "time_mlp2", self.time_mlp2, m, v);
        push_linear!(out, "id_mlp1", self.id_mlp1, m, v);
        push_linear!(out, "id_mlp2", self.id_mlp2, m, v);
        for (i, b) in self.blocks.iter().enumerate() {
            push_linear!(out, format!("blocks.{i}.modulation"), b.modulation, m, v);
            push_linear!(out, format!("blocks.{i}.attn_qkv"), b.attn_qkv, m, v);
            push_linear!(out, format!("blocks.{i}.attn_out"), b.attn_out, m, v);
            push_linear!(out, format!("blocks.{i}.cross_q"), b.cross_q, m, v);
            push_linear!(out, format!("blocks.{i}.cross_kv"), b.cross_kv, m, v);
            push_linear!(out, format!("blocks.{i}.cross_out"), b.cross_out, m, v);
            push_linear!(out, format!("blocks.{i}.mlp_fc1"), b.mlp_fc1, m, v);
            push_linear!(out, format!("blocks.{i}.mlp_fc2"), b.mlp_fc2, m, v);
        }
        push_linear!(out, "final_mod", self.final_mod, m, v);
        push_linear!(out, "head", self.head, m, v);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out: Vec<(String, TensorMut<'_, F>)> = Vec::new();
        push_linear_mut!(out, "header", self.header);
        push_linear_mut!(out, "time_mlp1", self.time_mlp1);
        push_linear_mut!(out, "time_mlp2", self.time_mlp2);
        push_linear_mut!(out, "id_mlp1", self.id_mlp1);
        push_linear_mut!(out, "id_mlp2", self.id_mlp2);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_linear_mut!(out, format!("blocks.{i}.modulation"), b.modulation);
            push_linear_mut!(out, format!("blocks.{i}.attn_qkv"), b.attn_qkv);
            push_linear_mut!(out, format!("blocks.{i}.attn_out"), b.attn_out);
            push_linear_mut!(out, format!("blocks.{i}.cross_q"), b.cross_q);
            push_linear_mut!(out, format!("blocks.{i}.cross_kv"), b.cross_kv);
            push_linear_mut!(out, format!("blocks.{i}.cross_out"), b.cross_out);
            push_linear_mut!(out, format!("blocks.{i}.mlp_fc1"), b.mlp_fc1);
            push_linear_mut!(out, format!("blocks.{i}.mlp_fc2"), b.mlp_fc2);
        }
        push_linear_mut!(out, "final_mod", self.final_mod);
        push_linear_mut!(out, "head", self.head);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            })
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            header: self.header.zeros_like(),
            time_mlp1: self.time_mlp1.zeros_like(),
            time_mlp2: self.time_mlp2.zeros_like(),
            id_mlp1: self.id_mlp1.zeros_like(),
            id_mlp2: self.id_mlp2.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    modulation: b.modulation.zeros_like(),
                    attn_qkv: b.attn_qkv.zeros_like(),
                    attn_out: b.attn_out.zeros_like(),
                    cross_q: b.cross_q.zeros_like(),
                    cross_kv: b.cross_kv.zeros_like(),
                    cross_out: b.cross_out.zeros_like(),
                    mlp_fc1: b.mlp_fc1.zeros_like(),
                    mlp_fc2: b.mlp_fc2.zeros_like(),
                })
                .collect(),
            final_mod: self.final_mod.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn get_flat(&self, index: usize) -> F {
        let mut remaining = index;
        for (_, t) in self.tensors() {
            let len = match &t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            };
            if remaining < len {
                return match t {
                    TensorRef::M(m) => *m.iter().nth(remaining).expect("in range"),
                    TensorRef::V(v) => v[remaining],
                };
            }
            remaining -= len;
        }
        panic!("flat index {index} out of range");
    }

    pub fn add_flat(&mut self, index: usize, delta: F) {
        let mut remaining = index;
        for (_, t) in self.tensors_mut() {
            let len = match &t {
                TensorMut::M(m) => m.len(),
                TensorMut::V(v) => v.len(),
            };
            if remaining < len {
                match t {
                    TensorMut::M(m) => {
                        *m.iter_mut().nth(remaining).expect("in range") += delta;
                    }
                    TensorMut::V(v) => v[remaining] += delta,
                }
                return;
            }
            remaining -= len;
        }
        panic!("flat index {index} out of range");
    }

    /// self += a * other (same structure).
    pub fn axpy(&mut self, a: F, other: &Self) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        debug_assert_eq!(mine.len(), theirs.len());
        for ((_, dst), (_, src)) in mine.iter_mut().zip(theirs.iter()) {
            match (dst, src) {
                (TensorMut::M(d), TensorRef::M(s)) => **d = &**d + &s.mapv(|v| v * a),
                (TensorMut::V(d), TensorRef::V(s)) => **d = &**d + &s.mapv(|v| v * a),
                _ => unreachable!("mismatched tensor kinds"),
            }
        }
    }

    pub fn scale(&mut self, a: F) {
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::M(m) => m.mapv_inplace(|v| v * a),
                TensorMut::V(v) => v.mapv_inplace(|x| x * a),
            }
        }
    }

    pub fn l2_norm(&self) -> F {
        let mut acc = F::zero();
        for (_, t) in self.tensors() {
            match t {
                TensorRef::M(m) => {
                    for v in m.iter() {
                        acc += *v * *v;
                    }
                }
                TensorRef::V(v) => {
                    for x in v.iter() {
                        acc += *x * *x;
                    }
                }
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| match t {
            TensorRef::M(m) => m.iter().all(|v| v.is_finite()),
            TensorRef::V(v) => v.iter().all(|x| x.is_finite()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub init_seed: u64,
}

fn init_linear<F: Real, R: rand::Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    zero: bool,
) -> Linear<F> {
    let w = if zero {
        Array2::zeros((fan_in, fan_out))
    } else {
        num::normal_mat::<F, _>(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    };
    Linear { w, b: bias.then(|| Array1::zeros(fan_out)) }
}

pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    config.validate()?;
    let h = config.hidden;
    let mut rng = rng_from(seed);
    let blocks = (0..config.n_blocks)
        .map(|_| BlockParams {
            modulation: init_linear(&mut rng, h, 9 * h, true, true),
            attn_qkv: init_linear(&mut rng, h, 3 * h, true, false),
            attn_out: init_linear(&mut rng, h, h, true, false),
            cross_q: init_linear(&mut rng, h, h, true, false),
            cross_kv: init_linear(&mut rng, config.d_txt, 2 * h, false, false),
            cross_out: init_linear(&mut rng, h, h, true, false),
            mlp_fc1: init_linear(&mut rng, h, config.mlp_hidden(), true, false),
            mlp_fc2: init_linear(&mut rng, config.mlp_hidden(), h, true, false),
        })
        .collect();
    let params = Params {
        header: init_linear(&mut rng, 2 * config.d, h, true, false),
        time_mlp1: init_linear(&mut rng, h, h, true, false),
        time_mlp2: init_linear(&mut rng, h, h, true, false),
        id_mlp1: init_linear(&mut rng, config.id_dim, h, false, false),
        id_mlp2: init_linear(&mut rng, h, h, false, false),
        blocks,
        final_mod: init_linear(&mut rng, h, 2 * h, true, true),
        head: init_linear(&mut rng, h, config.d, true, false),
    };
    Ok(Model { config: config.clone(), params, init_seed: seed })
}

/// Closed-form parameter count for a config (checked against enumeration).
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden;
    let m = cfg.mlp_hidden();
    let per_block = (h * 9 * h + 9 * h)      // modulation
        + (h * 3 * h + 3 * h)                // qkv
        + (h * h + h)                        // attn out
        + (h * h + h)                        // cross q
        + cfg.d_txt * 2 * h                  // cross kv, bias-free
        + (h * h + h)                        // cross out
        + (h * m + m) + (m * h + h); // mlp
    (2 * cfg.d * h + h)
        + 2 * (h * h + h)                    // time mlp
        + (cfg.id_dim * h + h * h)           // id mlp, bias-free
        + cfg.n_blocks * per_block
        + (h * 2 * h + 2 * h)                // final modulation
        + (h * cfg.d + cfg.d) // head
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
fn silu_prime<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s + x * s * (F::one() - s)
}

/// Sinusoidal timestep features of dimension `dim`.
pub fn time_features<F: Real>(t: usize, dim: usize) -> Array1<F> {
    let mut out = Array1::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(i as f64 / half as f64);
        out[2 * i] = F::from_f64((t as f64 * freq).sin());
        out[2 * i + 1] = F::from_f64((t as f64 * freq).cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = F::from_f64((t as f64).sin());
    }
    out
}

struct LnCache<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>) -> LnCache<F> {
    let n = x.dim().1;
    let nf = F::from_f64(n as f64);
    let eps = F::from_f64(LN_EPS);
    let mut normalized = Array2::zeros(x.dim());
    let mut inv_std = Array1::zeros(x.dim().0);
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / nf;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= nf;
        let is = F::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for (c, &v) in row.iter().enumerate() {
            normalized[[r, c]] = (v - mean) * is;
        }
    }
    LnCache { normalized, inv_std }
}

fn layer_norm_backward<F: Real>(cache: &LnCache<F>, dy: &Array2<F>) -> Array2<F> {
    let (rows, n) = dy.dim();
    let nf = F::from_f64(n as f64);
    let mut dx = Array2::zeros((rows, n));
    for r in 0..rows {
        let y = cache.normalized.row(r);
        let g = dy.row(r);
        let mean_g = g.sum() / nf;
        let mut mean_gy = F::zero();
        for (a, b) in g.iter().zip(y.iter()) {
            mean_gy += *a * *b;
        }
        mean_gy /= nf;
        let is = cache.inv_std[r];
        for c in 0..n {
            dx[[r, c]] = (g[c] - mean_g - y[c] * mean_gy) * is;
        }
    }
    dx
}

struct SelfAttnCache<F> {
    input: Array2<F>,
    qkv: Array2<F>,
    /// (B * n_heads) of (k, k) softmax weights.
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
}

struct CrossAttnCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    /// Per example: non-pad text rows (ns, d_txt) and their K/V projections.
    text_rows: Vec<Array2<F>>,
    kv: Vec<Array2<F>>,
    /// Per (example, head): (k, ns) weights over real rows (pads hold the rest
    /// of the mass and contribute zero value).
    probs: Vec<Vec<Array2<F>>>,
    concat: Array2<F>,
}

struct MlpCache<F> {
    input: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

struct SubLayerCache<F> {
    ln: LnCache<F>,
    modulated_ln: Array2<F>,
    raw_out: Array2<F>,
}

struct BlockCache<F> {
    mod_out: Array2<F>,
    sa: SubLayerCache<F>,
    sa_inner: SelfAttnCache<F>,
    ca: SubLayerCache<F>,
    ca_inner: CrossAttnCache<F>,
    ff: SubLayerCache<F>,
    ff_inner: MlpCache<F>,
}

pub struct Cache<F> {
    batch: usize,
    header_in: Array2<F>,
    time_feats: Array2<F>,
    time_pre: Array2<F>,
    time_act: Array2<F>,
    id_in: Array2<F>,
    id_act1: Array2<F>,
    id_pre2: Array2<F>,
    has_id: Vec<bool>,
    cond: Array2<F>,
    cond_silu: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    final_ln: LnCache<F>,
    final_mod_out: Array2<F>,
    final_modulated: Array2<F>,
}

pub struct BatchInput<F> {
    pub w_t: Vec<LatentCode<F>>,
    pub t: Vec<usize>,
    pub conds: Vec<Conditioning<F>>,
}

impl<F: Real> Model<F> {
    /// Single-example denoiser pass.
    pub fn forward(&self, w_t: &LatentCode<F>, t: usize, cond: &Conditioning<F>) -> Result<LatentCode<F>> {
        let input = BatchInput {
            w_t: vec![w_t.clone()],
            t: vec![t],
            conds: vec![cond.clone()],
        };
        let (mut eps, _) = self.forward_batch(&input)?;
        Ok(eps.pop().expect("batch of one"))
    }

    /// Batched forward with activation cache for the backward pass.
    pub fn forward_batch(&self, input: &BatchInput<F>) -> Result<(Vec<LatentCode<F>>, Cache<F>)> {
        let cfg = &self.config;
        let p = &self.params;
        let b = input.w_t.len();
        if b == 0 || input.t.len() != b || input.conds.len() != b {
            return Err(EditError::InvalidConfig("empty or ragged batch".into()));
        }
        let (k, d, h) = (cfg.k, cfg.d, cfg.hidden);
        let nh = cfg.n_heads;
        let dh = h / nh;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        // Input header: token i = [w_t row i | w_o row i (or zeros)].
        let mut header_in = Array2::zeros((b * k, 2 * d));
        for (bi, w) in input.w_t.iter().enumerate() {
            if w.dim() != (k, d) {
                return Err(EditError::ShapeMismatch {
                    expected: format!("{k}x{d}"),
                    got: format!("{:?}", w.dim()),
                });
            }
            let cond = &input.conds[bi];
            cond.check()?;
            header_in.slice_mut(s![bi * k..(bi + 1) * k, 0..d]).assign(w);
            if let Some(w_o) = &cond.w_o {
                if w_o.dim() != (k, d) {
                    return Err(EditError::ShapeMismatch {
                        expected: format!("{k}x{d}"),
                        got: format!("{:?}", w_o.dim()),
                    });
                }
                header_in.slice_mut(s![bi * k..(bi + 1) * k, d..2 * d]).assign(w_o);
            }
        }
        let mut x = p.header.forward(&header_in);

        // Conditioning vector: time embedding + identity embedding.
        let mut time_feats = Array2::zeros((b, h));
        for (bi, &t) in input.t.iter().enumerate() {
            if t > cfg.t_max {
                return Err(EditError::OutOfRange(format!("t = {t} > t_max = {}", cfg.t_max)));
            }
            time_feats.row_mut(bi).assign(&time_features::<F>(t, h));
        }
        let time_pre = p.time_mlp1.forward(&time_feats);
        let time_act = time_pre.mapv(silu);
        let time_emb = p.time_mlp2.forward(&time_act);

        let mut id_in = Array2::zeros((b, cfg.id_dim));
        let mut has_id = vec![false; b];
        for (bi, cond) in input.conds.iter().enumerate() {
            if let Some(id) = &cond.id_emb {
                if id.len() != cfg.id_dim {
                    return Err(EditError::ShapeMismatch {
                        expected: format!("identity of dim {}", cfg.id_dim),
                        got: format!("{}", id.len()),
                    });
                }
                id_in.row_mut(bi).assign(id);
                has_id[bi] = true;
            }
        }
        let id_pre1 = id_in.dot(&p.id_mlp1.w);
        let id_act1 = id_pre1.mapv(|v| v.tanh());
        let id_pre2 = id_act1.dot(&p.id_mlp2.w);
        let mut cond_vec = time_emb;
        for bi in 0..b {
            if has_id[bi] {
                for j in 0..h {
                    cond_vec[[bi, j]] += id_pre2[[bi, j]].tanh();
                }
            }
        }
        let cond_silu = cond_vec.mapv(silu);

        let mut blocks_cache = Vec::with_capacity(cfg.n_blocks);
        for bp in &p.blocks {
            let mod_out = bp.modulation.forward(&cond_silu); // (B, 9h)

            // Self-attention sub-layer.
            let sa_ln = layer_norm(&x);
            let sa_mod = modulate(&sa_ln.normalized, &mod_out, 0, k, h);
            let qkv = bp.attn_qkv.forward(&sa_mod);
            let mut sa_probs = Vec::with_capacity(b * nh);
            let mut concat = Array2::zeros((b * k, h));
            for bi in 0..b {
                let rows = s![bi * k..(bi + 1) * k, ..];
                for hd in 0..nh {
                    let q = qkv.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);
                    let kk = qkv.slice(s![bi * k..(bi + 1) * k, h + hd * dh..h + (hd + 1) * dh]);
                    let v = qkv.slice(s![bi * k..(bi + 1) * k, 2 * h + hd * dh..2 * h + (hd + 1) * dh]);
                    let scores = q.dot(&kk.t()).mapv(|s| s * scale);
                    let probs = softmax_rows(&scores);
                    let o = probs.dot(&v);
                    concat
                        .slice_mut(rows)
                        .slice_mut(s![.., hd * dh..(hd + 1) * dh])
                        .assign(&o);
                    sa_probs.push(probs);
                }
            }
            let sa_raw = bp.attn_out.forward(&concat);
            apply_gate(&mut x, &sa_raw, &mod_out, 0, k, h);
            let sa_cache = SubLayerCache { ln: sa_ln, modulated_ln: sa_mod, raw_out: sa_raw };
            let sa_inner = SelfAttnCache {
                input: sa_cache.modulated_ln.clone(),
                qkv,
                probs: sa_probs,
                concat,
            };

            // Cross-attention sub-layer over non-pad text rows.
            let ca_ln = layer_norm(&x);
            let ca_mod = modulate(&ca_ln.normalized, &mod_out, 1, k, h);
            let q_all = bp.cross_q.forward(&ca_mod);
            let mut text_rows = Vec::with_capacity(b);
            let mut kv_list = Vec::with_capacity(b);
            let mut probs_list: Vec<Vec<Array2<F>>> = Vec::with_capacity(b);
            let mut concat = Array2::zeros((b * k, h));
            for bi in 0..b {
                let rows = extract_text_rows(input.conds[bi].text.as_ref(), cfg.d_txt)?;
                let ns = rows.dim().0;
                let pad_mass = F::from_f64((SEQ_LEN - ns) as f64);
                let kv = rows.dot(&bp.cross_kv.w); // (ns, 2h)
                let mut per_head = Vec::with_capacity(nh);
                for hd in 0..nh {
                    let q = q_all.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);
                    let (probs, o) = if ns > 0 {
                        let kk = kv.slice(s![.., hd * dh..(hd + 1) * dh]);
                        let v = kv.slice(s![.., h + hd * dh..h + (hd + 1) * dh]);
                        let scores = q.dot(&kk.t()).mapv(|s| s * scale);
                        let probs = softmax_rows_with_pad(&scores, pad_mass);
                        let o = probs.dot(&v);
                        (probs, o)
                    } else {
                        (Array2::zeros((k, 0)), Array2::zeros((k, dh)))
                    };
                    concat
                        .slice_mut(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh])
                        .assign(&o);
                    per_head.push(probs);
                }
                text_rows.push(rows);
                kv_list.push(kv);
                probs_list.push(per_head);
            }
            let ca_raw = bp.cross_out.forward(&concat);
            apply_gate(&mut x, &ca_raw, &mod_out, 1, k, h);
            let ca_cache = SubLayerCache { ln: ca_ln, modulated_ln: ca_mod, raw_out: ca_raw };
            let ca_inner = CrossAttnCache {
                input: ca_cache.modulated_ln.clone(),
                q: q_all,
                text_rows,
                kv: kv_list,
                probs: probs_list,
                concat,
            };

            // Feed-forward sub-layer.
            let ff_ln = layer_norm(&x);
            let ff_mod = modulate(&ff_ln.normalized, &mod_out, 2, k, h);
            let pre = bp.mlp_fc1.forward(&ff_mod);
            let act = pre.mapv(silu);
            let ff_raw = bp.mlp_fc2.forward(&act);
            apply_gate(&mut x, &ff_raw, &mod_out, 2, k, h);
            let ff_cache = SubLayerCache { ln: ff_ln, modulated_ln: ff_mod, raw_out: ff_raw };
            let ff_inner = MlpCache { input: ff_cache.modulated_ln.clone(), pre, act };

            blocks_cache.push(BlockCache {
                mod_out,
                sa: sa_cache,
                sa_inner,
                ca: ca_cache,
                ca_inner,
                ff: ff_cache,
                ff_inner,
            });
        }

        // Final modulated norm + output head.
        let final_ln = layer_norm(&x);
        let final_mod_out = p.final_mod.forward(&cond_silu); // (B, 2h)
        let mut final_modulated = final_ln.normalized.clone();
        for bi in 0..b {
            for r in bi * k..(bi + 1) * k {
                for c in 0..h {
                    let shift = final_mod_out[[bi, c]];
                    let sc = final_mod_out[[bi, h + c]];
                    final_modulated[[r, c]] = final_modulated[[r, c]] * (F::one() + sc) + shift;
                }
            }
        }
        let out = p.head.forward(&final_modulated); // (Bk, d)
        let eps: Vec<LatentCode<F>> = (0..b)
            .map(|bi| out.slice(s![bi * k..(bi + 1) * k, ..]).to_owned())
            .collect();

        let cache = Cache {
            batch: b,
            header_in,
            time_feats,
            time_pre,
            time_act,
            id_in,
            id_act1,
            id_pre2,
            has_id,
            cond: cond_vec,
            cond_silu,
            blocks: blocks_cache,
            final_ln,
            final_mod_out,
            final_modulated,
        };
        Ok((eps, cache))
    }

    /// Backward pass: given dL/d(eps_hat) per example, returns parameter
    /// gradients. Accumulation order is fixed, so results are deterministic.
    pub fn backward_batch(
        &self,
        _input: &BatchInput<F>,
        cache: &Cache<F>,
        d_eps: &[LatentCode<F>],
    ) -> Result<Params<F>> {
        let cfg = &self.config;
        let p = &self.params;
        let b = cache.batch;
        if d_eps.len() != b {
            return Err(EditError::InvalidConfig("gradient batch size mismatch".into()));
        }
        let (k, d, h) = (cfg.k, cfg.d, cfg.hidden);
        let nh = cfg.n_heads;
        let dh = h / nh;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut grads = p.zeros_like();

        let mut d_out = Array2::zeros((b * k, d));
        for (bi, g) in d_eps.iter().enumerate() {
            d_out.slice_mut(s![bi * k..(bi + 1) * k, ..]).assign(g);
        }

        // Head and final modulated norm.
        let d_final_modulated = p.head.backward(&cache.final_modulated, &d_out, &mut grads.head);
        let mut d_final_ln = Array2::zeros((b * k, h));
        let mut d_final_mod = Array2::zeros((b, 2 * h));
        for bi in 0..b {
            for r in bi * k..(bi + 1) * k {
                for c in 0..h {
                    let g = d_final_modulated[[r, c]];
                    let y = cache.final_ln.normalized[[r, c]];
                    let sc = cache.final_mod_out[[bi, h + c]];
                    d_final_ln[[r, c]] = g * (F::one() + sc);
                    d_final_mod[[bi, c]] += g;
                    d_final_mod[[bi, h + c]] += g * y;
                }
            }
        }
        let mut d_cond_silu = p
            .final_mod
            .backward(&cache.cond_silu, &d_final_mod, &mut grads.final_mod);
        let mut d_x = layer_norm_backward(&cache.final_ln, &d_final_ln);

        // Blocks in reverse.
        for (bp, bc, gb) in itertools_rev(&p.blocks, &cache.blocks, &mut grads.blocks) {
            let mut d_mod = Array2::zeros((b, 9 * h));

            // Feed-forward.
            let d_ff_raw = gate_backward(&d_x, &bc.ff.raw_out, &bc.mod_out, 2, k, h, &mut d_mod);
            let d_act = bp.mlp_fc2.backward(&bc.ff_inner.act, &d_ff_raw, &mut gb.mlp_fc2);
            let d_pre = &d_act * &bc.ff_inner.pre.mapv(silu_prime);
            let d_ff_mod = bp.mlp_fc1.backward(&bc.ff_inner.input, &d_pre, &mut gb.mlp_fc1);
            modulate_backward(&d_ff_mod, &bc.ff.ln, &bc.mod_out, 2, k, h, &mut d_mod, &mut d_x);

            // Cross-attention.
            let d_ca_raw = gate_backward(&d_x, &bc.ca.raw_out, &bc.mod_out, 1, k, h, &mut d_mod);
            let d_concat = bp
                .cross_out
                .backward(&bc.ca_inner.concat, &d_ca_raw, &mut gb.cross_out);
            let mut d_q = Array2::zeros((b * k, h));
            for bi in 0..b {
                let rows = &bc.ca_inner.text_rows[bi];
                let ns = rows.dim().0;
                if ns == 0 {
                    continue;
                }
                let kv = &bc.ca_inner.kv[bi];
                let mut d_kv = Array2::zeros((ns, 2 * h));
                for hd in 0..nh {
                    let probs = &bc.ca_inner.probs[bi][hd];
                    let d_o = d_concat.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);
                    let v = kv.slice(s![.., h + hd * dh..h + (hd + 1) * dh]);
                    let kk = kv.slice(s![.., hd * dh..(hd + 1) * dh]);
                    let q = bc.ca_inner.q.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);

                    let d_p = d_o.dot(&v.t()); // (k, ns)
                    // Softmax over real rows + implicit pads with zero value:
                    // ds_i = p_i (dp_i - sum_j p_j dp_j), sums over real rows.
                    let mut d_s = Array2::zeros((k, ns));
                    for r in 0..k {
                        let mut dot = F::zero();
                        for c in 0..ns {
                            dot += probs[[r, c]] * d_p[[r, c]];
                        }
                        for c in 0..ns {
                            d_s[[r, c]] = probs[[r, c]] * (d_p[[r, c]] - dot);
                        }
                    }
                    let d_s_scaled = d_s.mapv(|v| v * scale);
                    d_q.slice_mut(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh])
                        .assign(&d_s_scaled.dot(&kk));
                    let d_k = d_s_scaled.t().dot(&q);
                    let d_v = probs.t().dot(&d_o);
                    d_kv.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&d_k);
                    d_kv.slice_mut(s![.., h + hd * dh..h + (hd + 1) * dh]).assign(&d_v);
                }
                gb.cross_kv.w = &gb.cross_kv.w + &rows.t().dot(&d_kv);
            }
            let d_ca_mod = bp.cross_q.backward(&bc.ca_inner.input, &d_q, &mut gb.cross_q);
            modulate_backward(&d_ca_mod, &bc.ca.ln, &bc.mod_out, 1, k, h, &mut d_mod, &mut d_x);

            // Self-attention.
            let d_sa_raw = gate_backward(&d_x, &bc.sa.raw_out, &bc.mod_out, 0, k, h, &mut d_mod);
            let d_concat = bp
                .attn_out
                .backward(&bc.sa_inner.concat, &d_sa_raw, &mut gb.attn_out);
            let mut d_qkv = Array2::zeros((b * k, 3 * h));
            for bi in 0..b {
                for hd in 0..nh {
                    let probs = &bc.sa_inner.probs[bi * nh + hd];
                    let qkv = &bc.sa_inner.qkv;
                    let q = qkv.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);
                    let kk = qkv.slice(s![bi * k..(bi + 1) * k, h + hd * dh..h + (hd + 1) * dh]);
                    let v = qkv.slice(s![bi * k..(bi + 1) * k, 2 * h + hd * dh..2 * h + (hd + 1) * dh]);
                    let d_o = d_concat.slice(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh]);

                    let d_p = d_o.dot(&v.t());
                    let mut d_s = Array2::zeros((k, k));
                    for r in 0..k {
                        let mut dot = F::zero();
                        for c in 0..k {
                            dot += probs[[r, c]] * d_p[[r, c]];
                        }
                        for c in 0..k {
                            d_s[[r, c]] = probs[[r, c]] * (d_p[[r, c]] - dot);
                        }
                    }
                    let d_s_scaled = d_s.mapv(|x| x * scale);
                    let d_q = d_s_scaled.dot(&kk);
                    let d_k = d_s_scaled.t().dot(&q);
                    let d_v = probs.t().dot(&d_o);
                    d_qkv
                        .slice_mut(s![bi * k..(bi + 1) * k, hd * dh..(hd + 1) * dh])
                        .assign(&d_q);
                    d_qkv
                        .slice_mut(s![bi * k..(bi + 1) * k, h + hd * dh..h + (hd + 1) * dh])
                        .assign(&d_k);
                    d_qkv
                        .slice_mut(s![bi * k..(bi + 1) * k, 2 * h + hd * dh..2 * h + (hd + 1) * dh])
                        .assign(&d_v);
                }
            }
            let d_sa_mod = bp.attn_qkv.backward(&bc.sa_inner.input, &d_qkv, &mut gb.attn_qkv);
            modulate_backward(&d_sa_mod, &bc.sa.ln, &bc.mod_out, 0, k, h, &mut d_mod, &mut d_x);

            d_cond_silu = d_cond_silu + bp.modulation.backward(&cache.cond_silu, &d_mod, &mut gb.modulation);
        }

        // Input header.
        let _ = p.header.backward(&cache.header_in, &d_x, &mut grads.header);

        // Conditioning path: c = time_emb + tanh(id path); shared silu input.
        let mut d_cond = Array2::zeros((b, h));
        for bi in 0..b {
            for j in 0..h {
                d_cond[[bi, j]] = d_cond_silu[[bi, j]] * silu_prime(cache.cond[[bi, j]]);
            }
        }
        // Time branch.
        let d_time_act = p.time_mlp2.backward(&cache.time_act, &d_cond, &mut grads.time_mlp2);
        let d_time_pre = &d_time_act * &cache.time_pre.mapv(silu_prime);
        let _ = p
            .time_mlp1
            .backward(&cache.time_feats, &d_time_pre, &mut grads.time_mlp1);
        // Identity branch, only rows that carried an identity embedding.
        let mut d_id_pre2 = Array2::zeros((b, h));
        for bi in 0..b {
            if !cache.has_id[bi] {
                continue;
            }
            for j in 0..h {
                let t = cache.id_pre2[[bi, j]].tanh();
                d_id_pre2[[bi, j]] = d_cond[[bi, j]] * (F::one() - t * t);
            }
        }
        grads.id_mlp2.w = &grads.id_mlp2.w + &cache.id_act1.t().dot(&d_id_pre2);
        let d_id_act1 = d_id_pre2.dot(&p.id_mlp2.w.t());
        let mut d_id_pre1 = Array2::zeros((b, h));
        for bi in 0..b {
            for j in 0..h {
                let t = cache.id_act1[[bi, j]];
                d_id_pre1[[bi, j]] = d_id_act1[[bi, j]] * (F::one() - t * t);
            }
        }
        grads.id_mlp1.w = &grads.id_mlp1.w + &cache.id_in.t().dot(&d_id_pre1);

        Ok(grads)
    }

    /// Conditioning-vector embedding of a timestep (time branch only).
    pub fn time_embed(&self, t: usize) -> Result<Array1<F>> {
        if t > self.config.t_max {
            return Err(EditError::OutOfRange(format!(
                "t = {t} > t_max = {}",
                self.config.t_max
            )));
        }
        let feats = time_features::<F>(t, self.config.hidden)
            .insert_axis(Axis(0));
        let pre = self.params.time_mlp1.forward(&feats);
        let emb = self.params.time_mlp2.forward(&pre.mapv(silu));
        Ok(emb.row(0).to_owned())
    }

    /// Identity-conditioning embedding; `None` maps to exactly zero.
    pub fn identity_embed(&self, id: Option<&Array1<F>>) -> Result<Array1<F>> {
        let h = self.config.hidden;
        let Some(id) = id else {
            return Ok(Array1::zeros(h));
        };
        if id.len() != self.config.id_dim {
            return Err(EditError::ShapeMismatch {
                expected: format!("identity of dim {}", self.config.id_dim),
                got: format!("{}", id.len()),
            });
        }
        let a1 = id.dot(&self.params.id_mlp1.w).mapv(|v| v.tanh());
        Ok(a1.dot(&self.params.id_mlp2.w).mapv(|v| v.tanh()))
    }
}

/// Applies per-example (shift, scale) from modulation slot `slot` to rows.
fn modulate<F: Real>(
    normalized: &Array2<F>,
    mod_out: &Array2<F>,
    slot: usize,
    k: usize,
    h: usize,
) -> Array2<F> {
    let mut out = normalized.clone();
    let b = mod_out.dim().0;
    for bi in 0..b {
        for r in bi * k..(bi + 1) * k {
            for c in 0..h {
                let shift = mod_out[[bi, slot * 3 * h + c]];
                let sc = mod_out[[bi, slot * 3 * h + h + c]];
                out[[r, c]] = out[[r, c]] * (F::one() + sc) + shift;
            }
        }
    }
    out
}

/// x += gate * raw for modulation slot `slot`.
fn apply_gate<F: Real>(x: &mut Array2<F>, raw: &Array2<F>, mod_out: &Array2<F>, slot: usize, k: usize, h: usize) {
    let b = mod_out.dim().0;
    for bi in 0..b {
        for r in bi * k..(bi + 1) * k {
            for c in 0..h {
                let gate = mod_out[[bi, slot * 3 * h + 2 * h + c]];
                x[[r, c]] += gate * raw[[r, c]];
            }
        }
    }
}

/// Backward of `x_out = x_in + gate * raw`: returns d_raw, accumulates the
/// gate gradient into `d_mod`; `d_x` flows through unchanged as d_x_in.
fn gate_backward<F: Real>(
    d_x: &Array2<F>,
    raw: &Array2<F>,
    mod_out: &Array2<F>,
    slot: usize,
    k: usize,
    h: usize,
    d_mod: &mut Array2<F>,
) -> Array2<F> {
    let b = mod_out.dim().0;
    let mut d_raw = Array2::zeros(raw.dim());
    for bi in 0..b {
        for r in bi * k..(bi + 1) * k {
            for c in 0..h {
                let gate = mod_out[[bi, slot * 3 * h + 2 * h + c]];
                d_raw[[r, c]] = d_x[[r, c]] * gate;
                d_mod[[bi, slot * 3 * h + 2 * h + c]] += d_x[[r, c]] * raw[[r, c]];
            }
        }
    }
    d_raw
}

/// Backward of modulate + layer norm; adds the result into `d_x`.
#[allow(clippy::too_many_arguments)]
fn modulate_backward<F: Real>(
    d_modulated: &Array2<F>,
    ln: &LnCache<F>,
    mod_out: &Array2<F>,
    slot: usize,
    k: usize,
    h: usize,
    d_mod: &mut Array2<F>,
    d_x: &mut Array2<F>,
) {
    let b = mod_out.dim().0;
    let mut d_ln = Array2::zeros(d_modulated.dim());
    for bi in 0..b {
        for r in bi * k..(bi + 1) * k {
            for c in 0..h {
                let g = d_modulated[[r, c]];
                let y = ln.normalized[[r, c]];
                let sc = mod_out[[bi, slot * 3 * h + h + c]];
                d_ln[[r, c]] = g * (F::one() + sc);
                d_mod[[bi, slot * 3 * h + c]] += g;
                d_mod[[bi, slot * 3 * h + h + c]] += g * y;
            }
        }
    }
    let dx = layer_norm_backward(ln, &d_ln);
    *d_x = &*d_x + &dx;
}

fn softmax_rows<F: Real>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut max = F::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax over the real rows plus `pad_mass` implicit pad slots with logit 0
/// (their values are zero, so only the normalizer sees them).
fn softmax_rows_with_pad<F: Real>(scores: &Array2<F>, pad_mass: F) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut max = F::zero(); // pad logit
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = pad_mass * (-max).exp();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Non-pad rows of the text conditioning matrix; `None` text behaves exactly
/// like an all-zero matrix.
fn extract_text_rows<F: Real>(
    text: Option<&TextEmbeddingSeq<F>>,
    d_txt: usize,
) -> Result<Array2<F>> {
    let Some(text) = text else {
        return Ok(Array2::zeros((0, d_txt)));
    };
    if text.0.dim() != (SEQ_LEN, d_txt) {
        return Err(EditError::ShapeMismatch {
            expected: format!("{SEQ_LEN}x{d_txt}"),
            got: format!("{:?}", text.0.dim()),
        });
    }
    let nonzero: Vec<usize> = (0..SEQ_LEN)
        .filter(|&r| text.0.row(r).iter().any(|&v| v != F::zero()))
        .collect();
    let mut rows = Array2::zeros((nonzero.len(), d_txt));
    for (i, &r) in nonzero.iter().enumerate() {
        rows.row_mut(i).assign(&text.0.row(r));
    }
    Ok(rows)
}

/// Reverse zip over blocks for the backward pass.
fn itertools_rev<'a, F>(
    params: &'a [BlockParams<F>],
    caches: &'a [BlockCache<F>],
    grads: &'a mut [BlockParams<F>],
) -> impl Iterator<Item = (&'a BlockParams<F>, &'a BlockCache<F>, &'a mut BlockParams<F>)> {
    params
        .iter()
        .rev()
        .zip(caches.iter().rev())
        .zip(grads.iter_mut().rev())
        .map(|((p, c), g)| (p, c, g))
}

#[allow(dead_code)]
fn unused_view_guard<F: Real>(_: ArrayView2<'_, F>) {}
