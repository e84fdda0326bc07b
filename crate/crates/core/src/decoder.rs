//! Attention decoder with input feeding and KB conditioning, the
//! teacher-forced loss, and greedy and beam search.

use std::cmp::Ordering;

use rand::Rng;

use crate::encoders::GruParams;
use crate::error::{Error, Result};
use crate::numkernel::{linalg, Axis, Graph, ParamId, ParamStore, Var};
use crate::slots::argmax;
use crate::textcore::{BOS, EOS, PAD};

/// Decoder parameters.
///
/// The GRU input is `[embed(y_prev) ; input_feed ; kb]`, so its fused input
/// weight has `d_e + d_h + 2 d_h` rows in that order.
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub gru: GruParams,
    /// Bilinear attention weight `W_f`, `d_h x d_h`.
    pub w_f: ParamId,
    /// `W_h̃`, `2 d_h x d_h`, applied to `[hidden ; c]`.
    pub w_out: ParamId,
    /// Vocabulary projection `W_S`, `d_h x V`.
    pub w_s: ParamId,
    /// Token embedding table, `V x d_e`.
    pub embed: ParamId,
    pub d_e: usize,
    pub d_h: usize,
    pub vocab: usize,
}

impl DecoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embed: ParamId,
        d_e: usize,
        d_h: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (v, e) = store.get(embed).dims2()?;
        if (v, e) != (vocab, d_e) {
            return Err(Error::dim("decoder embedding", &[v, e], &[vocab, d_e]));
        }
        Ok(DecoderParams {
            gru: GruParams::new(store, "dec.gru", d_e + 3 * d_h, d_h, rng)?,
            w_f: store.add_uniform("dec.w_f", d_h, d_h, rng)?,
            w_out: store.add_uniform("dec.w_out", 2 * d_h, d_h, rng)?,
            w_s: store.add_uniform("dec.w_s", d_h, vocab, rng)?,
            embed,
            d_e,
            d_h,
            vocab,
        })
    }
}

/// Per-hypothesis recurrent state.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    /// Previous `h̃`; zero at step 0.
    pub input_feed: Var,
    pub step: usize,
}

/// Quantities shared by every step of one response: attention memory, the
/// KB contribution to the GRU input, and the split input weights.
#[derive(Debug, Clone, Copy)]
pub struct DecoderContext {
    /// `N x d_h` context states.
    pub memory: Var,
    /// `(memory W_f)ᵀ`, `d_h x N`.
    keys_t: Var,
    /// `kb W_kb + b`, `1 x 3 d_h`.
    static_in: Var,
    w_emb: Var,
    w_feed: Var,
    init: Var,
}

/// Prepares attention over `context` (`N x d_h`, last row initializes the
/// hidden state) with the `1 x 2 d_h` KB vector.
pub fn prepare(g: &mut Graph, p: &DecoderParams, context: Var, kb: Var) -> Result<DecoderContext> {
    let (n, d) = g.shape(context);
    if d != p.d_h || n == 0 {
        return Err(Error::dim("decoder context", &[n, d], &[n, p.d_h]));
    }
    if g.shape(kb) != (1, 2 * p.d_h) {
        let (r, c) = g.shape(kb);
        return Err(Error::dim("decoder kb", &[r, c], &[1, 2 * p.d_h]));
    }
    let w_f = g.param(p.w_f);
    let keys = g.matmul(context, w_f)?;
    let keys_t = g.transpose(keys);
    let w = g.param(p.gru.w);
    let b = g.param(p.gru.b);
    let w_emb = g.slice_rows(w, 0, p.d_e)?;
    let w_feed = g.slice_rows(w, p.d_e, p.d_h)?;
    let w_kb = g.slice_rows(w, p.d_e + p.d_h, 2 * p.d_h)?;
    let kb_in = g.matmul(kb, w_kb)?;
    let static_in = g.add(kb_in, b)?;
    let init = g.row(context, n - 1)?;
    Ok(DecoderContext {
        memory: context,
        keys_t,
        static_in,
        w_emb,
        w_feed,
        init,
    })
}

impl DecoderContext {
    pub fn initial_state(&self, g: &mut Graph, d_h: usize) -> DecoderState {
        DecoderState {
            hidden: self.init,
            input_feed: g.zeros(1, d_h),
            step: 0,
        }
    }
}

/// `alphas = softmax_m(ctx_mᵀ W_f q)`, `c = Σ_m alphas_m ctx_m`.
pub fn luong_attention(g: &mut Graph, query: Var, context: Var, w_f: Var) -> Result<(Var, Var)> {
    let keys = g.matmul(context, w_f)?;
    let keys_t = g.transpose(keys);
    attend(g, query, context, keys_t)
}

fn attend(g: &mut Graph, query: Var, memory: Var, keys_t: Var) -> Result<(Var, Var)> {
    let scores = g.matmul(query, keys_t)?;
    let alphas = g.softmax(scores, Axis::Cols);
    let c = g.matmul(alphas, memory)?;
    Ok((alphas, c))
}

/// Embedding contributions `embed(ids) W_emb` for a run of input tokens, `T x 3 d_h`.
pub fn project_inputs(g: &mut Graph, p: &DecoderParams, dc: &DecoderContext, ids: &[u32]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= p.vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", p.vocab)));
    }
    let table = g.param(p.embed);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let e = g.gather(table, &idx)?;
    g.matmul(e, dc.w_emb)
}

/// Output of one decoder step before the vocabulary projection.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub h_tilde: Var,
    pub alphas: Var,
    pub state: DecoderState,
}

/// Advances one step given the projected embedding of `y_prev` (`1 x 3 d_h`).
pub fn step_projected(
    g: &mut Graph,
    p: &DecoderParams,
    dc: &DecoderContext,
    emb_in: Var,
    state: &DecoderState,
) -> Result<StepOutput> {
    let feed = g.matmul(state.input_feed, dc.w_feed)?;
    let xp = g.add(emb_in, feed)?;
    let xp = g.add(xp, dc.static_in)?;
    let hidden = p.gru.step(g, xp, state.hidden)?;
    let (alphas, c) = attend(g, hidden, dc.memory, dc.keys_t)?;
    let hc = g.concat_cols(&[hidden, c])?;
    let w_out = g.param(p.w_out);
    let pre = g.matmul(hc, w_out)?;
    let h_tilde = g.tanh(pre);
    Ok(StepOutput {
        h_tilde,
        alphas,
        state: DecoderState {
            hidden,
            input_feed: h_tilde,
            step: state.step + 1,
        },
    })
}

/// Vocabulary logits `h̃ W_S` for one or more stacked `h̃` rows.
pub fn output_logits(g: &mut Graph, p: &DecoderParams, h_tilde: Var) -> Result<Var> {
    let w_s = g.param(p.w_s);
    g.matmul(h_tilde, w_s)
}

/// One full step from a token id: returns `softmax(W_S h̃)` (`1 x V`), the
/// attention weights and the next state.
pub fn decode_step(
    g: &mut Graph,
    p: &DecoderParams,
    dc: &DecoderContext,
    y_prev: u32,
    state: &DecoderState,
) -> Result<(Var, Var, DecoderState)> {
    let emb = project_inputs(g, p, dc, &[y_prev])?;
    let out = step_projected(g, p, dc, emb, state)?;
    let logits = output_logits(g, p, out.h_tilde)?;
    Ok((g.softmax(logits, Axis::Cols), out.alphas, out.state))
}

/// Teacher-forced logits (`L x V`) for `BOS, y_1, …, y_{L-1}` inputs.
pub fn teacher_forced_logits(g: &mut Graph, p: &DecoderParams, dc: &DecoderContext, inputs: &[u32]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Input("empty decoder input".into()));
    }
    let proj = project_inputs(g, p, dc, inputs)?;
    let mut state = dc.initial_state(g, p.d_h);
    let mut outs = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let e = g.row(proj, t)?;
        let o = step_projected(g, p, dc, e, &state)?;
        outs.push(o.h_tilde);
        state = o.state;
    }
    let h = g.concat_rows(&outs)?;
    output_logits(g, p, h)
}

/// Decoder input and target sequences for a gold response: `BOS y` and `y EOS`.
pub fn frame_response(tokens: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}

/// Summed negative log-likelihood over non-PAD targets and the number of such targets.
pub fn masked_nll(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<(Var, usize)> {
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&y| if y == PAD { None } else { Some(y as usize) })
        .collect();
    let n = t.iter().filter(|x| x.is_some()).count();
    Ok((g.cross_entropy(logits, &t)?, n))
}

/// Mean negative log-likelihood over non-PAD targets.
pub fn teacher_forced_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let (sum, n) = masked_nll(g, logits, targets)?;
    if n == 0 {
        return Err(Error::Input("no non-PAD target tokens".into()));
    }
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// Decoding limits and ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub max_len: usize,
    pub beam_width: usize,
    pub length_norm_alpha: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_len: 20,
            beam_width: 1,
            length_norm_alpha: 0.7,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.length_norm_alpha) {
            return Err(Error::Config(format!(
                "length normalization {} outside [0, 1]",
                self.length_norm_alpha
            )));
        }
        Ok(())
    }
}

/// A (possibly partial) output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of generated tokens (EOS included, BOS excluded).
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `log_prob / len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.len().max(1) as f64).powf(alpha)
    }

    /// Generated tokens with BOS and a trailing EOS removed.
    pub fn content(&self) -> Vec<u32> {
        let mut out = self.tokens[1..].to_vec();
        if out.last() == Some(&EOS) {
            out.pop();
        }
        out
    }
}

/// Anything that yields next-token log-probabilities from an opaque state.
pub trait StepModel {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;

    /// Log-probabilities over the vocabulary after feeding `token`.
    fn step(&mut self, state: &Self::State, token: u32) -> Result<(Vec<f64>, Self::State)>;
}

fn check_log_probs(lp: &[f64]) -> Result<()> {
    if lp.is_empty() || lp.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("decoder produced an invalid distribution".into()));
    }
    Ok(())
}

/// Argmax decoding (lowest id wins ties).
pub fn greedy_search<M: StepModel>(model: &mut M, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut state = model.start()?;
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while !hyp.finished {
        let (lp, next) = model.step(&state, *hyp.tokens.last().expect("non-empty"))?;
        check_log_probs(&lp)?;
        let y = argmax(&lp);
        hyp.tokens.push(y as u32);
        hyp.log_prob += lp[y];
        hyp.finished = y as u32 == EOS || hyp.len() == cfg.max_len;
        state = next;
    }
    Ok(hyp)
}

pub fn greedy_decode<M: StepModel>(model: &mut M, cfg: &GenerationConfig) -> Result<Vec<u32>> {
    Ok(greedy_search(model, cfg)?.content())
}

/// Beam search over summed log-probabilities.
///
/// Each step keeps the `beam_width` best expansions (ties: earlier beam, then
/// lower token id). Expansions ending in EOS or reaching `max_len` retire to
/// a pool; the greedy hypothesis is also pooled. The pooled hypothesis with
/// the best length-normalized score is returned (ties: earliest pooled).
pub fn beam_search<M: StepModel>(model: &mut M, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let greedy = greedy_search(model, cfg)?;
    let mut pool = vec![greedy];
    let start = model.start()?;
    let mut live = vec![(
        Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        },
        start,
    )];
    while !live.is_empty() {
        let mut expansions = Vec::new();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, (hyp, state)) in live.iter().enumerate() {
            let (lp, next) = model.step(state, *hyp.tokens.last().expect("non-empty"))?;
            check_log_probs(&lp)?;
            for (y, &l) in lp.iter().enumerate() {
                candidates.push((hyp.log_prob + l, b, y));
            }
            expansions.push((lp, next));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(cfg.beam_width);
        for &(lp, b, y) in candidates.iter().take(cfg.beam_width) {
            let mut tokens = live[b].0.tokens.clone();
            tokens.push(y as u32);
            let mut hyp = Hypothesis {
                tokens,
                log_prob: lp,
                finished: false,
            };
            hyp.finished = y as u32 == EOS || hyp.len() == cfg.max_len;
            if hyp.finished {
                pool.push(hyp);
            } else {
                next_live.push((hyp, expansions[b].1.clone()));
            }
        }
        live = next_live;
    }
    let alpha = cfg.length_norm_alpha;
    let mut best = 0;
    for (i, h) in pool.iter().enumerate().skip(1) {
        if h.score(alpha) > pool[best].score(alpha) {
            best = i;
        }
    }
    Ok(pool.swap_remove(best))
}

pub fn beam_decode<M: StepModel>(model: &mut M, cfg: &GenerationConfig) -> Result<Vec<u32>> {
    Ok(beam_search(model, cfg)?.content())
}

/// Log-softmax of a single logit row, shared by step-model implementations.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    linalg::log_softmax(logits)
}
