//! Utterance, image, context, knowledge-base and transformer encoders.

use rand::Rng;

use crate::corpus::MAX_IMAGES;
use crate::error::{Error, Result};
use crate::numkernel::{Axis, Graph, ParamId, ParamStore, Var};

/// Gated recurrent unit with fused gate blocks.
///
/// `w` is `d_in x 3 d_h` with column blocks `[z | r | candidate]`, `b` the
/// matching `1 x 3 d_h` bias, `u_zr` the `d_h x 2 d_h` recurrent weights of
/// the two gates and `u_h` the `d_h x d_h` recurrent weight of the candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w: ParamId,
    pub b: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Result<Self> {
        Ok(GruParams {
            w: store.add_uniform(&format!("{prefix}.w"), d_in, 3 * d_h, rng)?,
            b: store.add_zeros(&format!("{prefix}.b"), 1, 3 * d_h)?,
            u_zr: store.add_uniform(&format!("{prefix}.u_zr"), d_h, 2 * d_h, rng)?,
            u_h: store.add_uniform(&format!("{prefix}.u_h"), d_h, d_h, rng)?,
            d_in,
            d_h,
        })
    }

    /// Input projection `x W + b` for every row of `x`.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.d_in {
            return Err(Error::dim("gru input", &[c], &[self.d_in]));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// One recurrence step from a precomputed `1 x 3 d_h` input projection.
    pub fn step(&self, g: &mut Graph, xp: Var, h: Var) -> Result<Var> {
        let d = self.d_h;
        if g.shape(h) != (1, d) {
            let (r, c) = g.shape(h);
            return Err(Error::dim("gru state", &[r, c], &[1, d]));
        }
        let u_zr = g.param(self.u_zr);
        let u_h = g.param(self.u_h);
        let x_zr = g.slice_cols(xp, 0, 2 * d)?;
        let x_h = g.slice_cols(xp, 2 * d, d)?;
        let h_zr = g.matmul(h, u_zr)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre);
        let z = g.slice_cols(zr, 0, d)?;
        let r = g.slice_cols(zr, d, d)?;
        let rh = g.mul(r, h)?;
        let rh_u = g.matmul(rh, u_h)?;
        let pre_h = g.add(x_h, rh_u)?;
        let cand = g.tanh(pre_h);
        // (1 - z) h + z cand, written as h + z (cand - h)
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }

    /// Runs over the rows of `x` (`T x d_in`) from a zero state; returns the
    /// `T` states in input order. With `reverse` the recurrence starts at the last row.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let (t, _) = g.shape(x);
        let xp = self.project(g, x)?;
        let mut h = g.zeros(1, self.d_h);
        let mut states = vec![h; t];
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t).rev()) } else { Box::new(0..t) };
        for i in order {
            let xi = g.row(xp, i)?;
            h = self.step(g, xi, h)?;
            states[i] = h;
        }
        Ok(states)
    }
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let xp = p.project(g, x)?;
    p.step(g, xp, h_prev)
}

/// Bidirectional GRU over `T x d_e` embeddings.
///
/// Returns the `T x 2 d_h` per-token states `[forward_t ; backward_t]` and the
/// `1 x 2 d_h` utterance vector `[forward_T ; backward_1]`, the last state of
/// each direction.
pub fn encode_utterance(g: &mut Graph, embeds: Var, fwd: &GruParams, bwd: &GruParams) -> Result<(Var, Var)> {
    let (t, _) = g.shape(embeds);
    if t == 0 {
        return Err(Error::Input("utterance has no tokens".into()));
    }
    let f = fwd.run(g, embeds, false)?;
    let b = bwd.run(g, embeds, true)?;
    let fs = g.concat_rows(&f)?;
    let bs = g.concat_rows(&b)?;
    let states = g.concat_cols(&[fs, bs])?;
    let last = g.concat_cols(&[f[t - 1], b[0]])?;
    Ok((states, last))
}

/// Scaled dot-product self-attention with `Q = K = V = h`.
///
/// Returns the row-stochastic `T x T` weights and the `T x d` output.
pub fn self_attention(g: &mut Graph, h: Var) -> Result<(Var, Var)> {
    let (_, d) = g.shape(h);
    let ht = g.transpose(h);
    let scores = g.matmul(h, ht)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores, Axis::Cols);
    let out = g.matmul(weights, h)?;
    Ok((weights, out))
}

/// Slot self-attention over the utterance states, with dropout on the output.
pub fn slot_attention(g: &mut Graph, h: Var, dropout: f64) -> Result<(Var, Var)> {
    let (weights, out) = self_attention(g, h)?;
    let out = g.dropout(out, dropout)?;
    Ok((weights, out))
}

/// Linear image encoder parameters: `W_I` is `5 d_img x d_h`.
#[derive(Debug, Clone, Copy)]
pub struct ImageParams {
    pub w: ParamId,
    pub b: ParamId,
    pub d_img: usize,
    pub d_h: usize,
}

impl ImageParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_img: usize, d_h: usize, rng: &mut R) -> Result<Self> {
        Ok(ImageParams {
            w: store.add_uniform(&format!("{prefix}.w"), MAX_IMAGES * d_img, d_h, rng)?,
            b: store.add_zeros(&format!("{prefix}.b"), 1, d_h)?,
            d_img,
            d_h,
        })
    }
}

fn check_images(features: &[Vec<f64>], d_img: usize) -> Result<()> {
    if features.len() > MAX_IMAGES {
        return Err(Error::Input(format!(
            "{} images attached; a turn carries at most {MAX_IMAGES}",
            features.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.len() != d_img) {
        return Err(Error::dim("image feature", &[f.len()], &[d_img]));
    }
    Ok(())
}

/// `ReLU(W_I [f_1; …; f_5] + b_I)` with missing images padded by zeros.
pub fn encode_images(g: &mut Graph, features: &[Vec<f64>], p: &ImageParams) -> Result<Var> {
    check_images(features, p.d_img)?;
    let mut flat = vec![0.0; MAX_IMAGES * p.d_img];
    for (i, f) in features.iter().enumerate() {
        flat[i * p.d_img..(i + 1) * p.d_img].copy_from_slice(f);
    }
    let x = g.constant(1, MAX_IMAGES * p.d_img, flat)?;
    let w = g.param(p.w);
    let b = g.param(p.b);
    let xw = g.matmul(x, w)?;
    let pre = g.add_row(xw, b)?;
    Ok(g.relu(pre))
}

/// Context GRU over per-turn inputs (`1 x d_in` each); returns one state per turn.
pub fn encode_context(g: &mut Graph, turns: &[Var], p: &GruParams) -> Result<Vec<Var>> {
    if turns.is_empty() {
        return Err(Error::Input("context needs at least one turn".into()));
    }
    let x = g.concat_rows(turns)?;
    p.run(g, x, false)
}

/// Outputs of the knowledge-base encoder, each a row vector.
#[derive(Debug, Clone, Copy)]
pub struct KbEncoding {
    pub query_final: Var,
    pub entity_final: Var,
    pub joint: Var,
    /// `2 x 2` self-attention weights over `[query_final; entity_final]`, if a record was present.
    pub weights: Option<Var>,
    /// Self-attended `[query_final; entity_final]`, flattened to `1 x 2 d_h`.
    pub attended: Var,
}

impl KbEncoding {
    pub fn empty(g: &mut Graph, d_h: usize) -> Self {
        let z = g.zeros(1, d_h);
        let z2 = g.zeros(1, 2 * d_h);
        KbEncoding {
            query_final: z,
            entity_final: z,
            joint: z2,
            weights: None,
            attended: z2,
        }
    }
}

/// Encodes a KB record; `None` on either side yields the all-zero encoding.
pub fn encode_kb(
    g: &mut Graph,
    query: Option<Var>,
    entity: Option<Var>,
    q_gru: &GruParams,
    e_gru: &GruParams,
) -> Result<KbEncoding> {
    let (Some(query), Some(entity)) = (query, entity) else {
        return Ok(KbEncoding::empty(g, q_gru.d_h));
    };
    let qs = q_gru.run(g, query, false)?;
    let es = e_gru.run(g, entity, false)?;
    let query_final = *qs.last().expect("non-empty query");
    let entity_final = *es.last().expect("non-empty entity");
    let joint = g.concat_cols(&[query_final, entity_final])?;
    let stacked = g.concat_rows(&[query_final, entity_final])?;
    let (weights, out) = self_attention(g, stacked)?;
    let attended = g.reshape(out, 1, 2 * q_gru.d_h)?;
    Ok(KbEncoding {
        query_final,
        entity_final,
        joint,
        weights: Some(weights),
        attended,
    })
}

/// Sinusoidal position encodings, `T x d` row-major.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn add_positions(g: &mut Graph, h: Var) -> Result<Var> {
    let (t, d) = g.shape(h);
    let pe = g.constant(t, d, positional_encoding(t, d))?;
    g.add(h, pe)
}

/// Pre-layer-norm transformer block with fused per-head projections.
///
/// `wq`, `wk`, `wv` are `d x d`; head `i` uses columns `i*d/h .. (i+1)*d/h`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl TransformerBlockParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dimension {d} is not divisible by {heads} heads")));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(TransformerBlockParams {
            ln1_gain: store.add_constant(&n("ln1.gain"), 1, d, 1.0)?,
            ln1_bias: store.add_zeros(&n("ln1.bias"), 1, d)?,
            wq: store.add_uniform(&n("wq"), d, d, rng)?,
            wk: store.add_uniform(&n("wk"), d, d, rng)?,
            wv: store.add_uniform(&n("wv"), d, d, rng)?,
            wo: store.add_uniform(&n("wo"), d, d, rng)?,
            ln2_gain: store.add_constant(&n("ln2.gain"), 1, d, 1.0)?,
            ln2_bias: store.add_zeros(&n("ln2.bias"), 1, d)?,
            ff1: store.add_uniform(&n("ff1"), d, ff, rng)?,
            ff1_bias: store.add_zeros(&n("ff1.bias"), 1, ff)?,
            ff2: store.add_uniform(&n("ff2"), ff, d, rng)?,
            ff2_bias: store.add_zeros(&n("ff2.bias"), 1, d)?,
            d,
            heads,
        })
    }
}

/// One block; returns the output and each head's `T x T` attention weights.
pub fn transformer_block(g: &mut Graph, h: Var, p: &TransformerBlockParams) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.shape(h);
    if d != p.d {
        return Err(Error::dim("transformer input", &[d], &[p.d]));
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!("model dimension {d} is not divisible by {} heads", p.heads)));
    }
    let dk = d / p.heads;
    let (g1, b1) = (g.param(p.ln1_gain), g.param(p.ln1_bias));
    let x = g.layer_norm(h, g1, b1)?;
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let qi = g.slice_cols(q, i * dk, dk)?;
        let ki = g.slice_cols(k, i * dk, dk)?;
        let vi = g.slice_cols(v, i * dk, dk)?;
        let kt = g.transpose(ki);
        let s = g.matmul(qi, kt)?;
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let a = g.softmax(s, Axis::Cols);
        heads.push(g.matmul(a, vi)?);
        weights.push(a);
    }
    let cat = g.concat_cols(&heads)?;
    let attn = g.matmul(cat, wo)?;
    let h = g.add(h, attn)?;

    let (g2, b2) = (g.param(p.ln2_gain), g.param(p.ln2_bias));
    let x = g.layer_norm(h, g2, b2)?;
    let (f1, fb1, f2, fb2) = (g.param(p.ff1), g.param(p.ff1_bias), g.param(p.ff2), g.param(p.ff2_bias));
    let u = g.matmul(x, f1)?;
    let u = g.add_row(u, fb1)?;
    let u = g.relu(u);
    let u = g.matmul(u, f2)?;
    let u = g.add_row(u, fb2)?;
    Ok((g.add(h, u)?, weights))
}

/// Input projection followed by position encodings and a stack of blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub blocks: Vec<TransformerBlockParams>,
}

impl TransformerEncoder {
    pub const BLOCKS: usize = 2;
    pub const HEADS: usize = 4;

    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d: usize, rng: &mut R) -> Result<Self> {
        let proj = store.add_uniform(&format!("{prefix}.proj"), d_in, d, rng)?;
        let proj_bias = store.add_zeros(&format!("{prefix}.proj.bias"), 1, d)?;
        let blocks = (0..Self::BLOCKS)
            .map(|i| TransformerBlockParams::new(store, &format!("{prefix}.block{i}"), d, Self::HEADS, 4 * d, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder {
            proj,
            proj_bias,
            blocks,
        })
    }

    /// Encodes `T x d_in` rows; returns `T x d` states and every head's weights.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let (w, b) = (g.param(self.proj), g.param(self.proj_bias));
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        let mut h = add_positions(g, h)?;
        let mut all = Vec::new();
        for blk in &self.blocks {
            let (out, ws) = transformer_block(g, h, blk)?;
            h = out;
            all.extend(ws);
        }
        Ok((h, all))
    }
}

/// Transformer image path: projects each feature, encodes the set, and mean-pools.
/// No images gives the zero vector.
pub fn encode_images_transformer(
    g: &mut Graph,
    features: &[Vec<f64>],
    d_img: usize,
    enc: &TransformerEncoder,
    d_h: usize,
) -> Result<(Var, Vec<Var>)> {
    check_images(features, d_img)?;
    if features.is_empty() {
        return Ok((g.zeros(1, d_h), Vec::new()));
    }
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let x = g.constant(features.len(), d_img, flat)?;
    let (h, ws) = enc.encode(g, x)?;
    Ok((g.mean_rows(h), ws))
}
