//! The joint slot-extraction and response-generation model: parameter
//! layout, data preparation, the per-dialogue training graph and inference.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Pooling, RunConfig, Variant};
use crate::corpus::{CatalogItem, DialogueRecord, ImageFeaturizer, KbRef, KbStore, Role};
use crate::decoder::{
    beam_search, frame_response, greedy_search, log_probs, masked_nll, output_logits, prepare, project_inputs, step_projected,
    teacher_forced_logits, DecoderContext, DecoderParams, DecoderState, GenerationConfig, StepModel,
};
use crate::encoders::{
    encode_context, encode_images, encode_images_transformer, encode_kb, encode_utterance, slot_attention,
    GruParams, ImageParams, KbEncoding, TransformerEncoder,
};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::numkernel::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::seed::mix;
use crate::slots::{predict_slots, slot_logits, SlotHead, Tag, NUM_TAGS};
use crate::textcore::{ContextualEmbedder, EmbeddingProvider, Vocabulary, CONTEXTUAL_DIM};

/// Seed of the frozen contextual-embedding provider; part of the model definition, not of a run.
pub const CONTEXTUAL_SEED: u64 = 0x5EED_0FC0_47E7;

#[derive(Debug, Clone)]
pub enum TextEncoder {
    BiGru { fwd: GruParams, bwd: GruParams },
    Transformer(TransformerEncoder),
}

#[derive(Debug, Clone)]
pub enum ImageEncoder {
    Linear(ImageParams),
    Transformer(TransformerEncoder),
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub text: TextEncoder,
    pub image: Option<ImageEncoder>,
    pub slot: Option<SlotHead>,
    pub context: GruParams,
    pub kb: Option<(GruParams, GruParams)>,
    pub decoder: DecoderParams,
}

/// Everything needed for training and inference except the data.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub params: ModelParams,
    provider: EmbeddingProvider,
}

/// Model-ready view of one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTurn {
    pub role: Role,
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub tags: Option<Vec<Tag>>,
    pub images: Vec<Vec<f64>>,
    /// Precomputed contextual vectors when the contextual provider is in use.
    pub contextual: Option<Tensor>,
    pub kb: Option<PreparedKb>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedKb {
    pub query: Vec<u32>,
    pub entity: Vec<u32>,
    pub query_ctx: Option<Tensor>,
    pub entity_ctx: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDialogue {
    pub id: String,
    pub turns: Vec<PreparedTurn>,
}

impl PreparedDialogue {
    /// Target tokens (responses plus EOS) contributing to the generation loss.
    pub fn generation_tokens(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.role == Role::System)
            .map(|t| t.ids.len() + 1)
            .sum()
    }

    /// Tagged tokens contributing to the slot loss.
    pub fn slot_tokens(&self) -> usize {
        self.turns.iter().filter_map(|t| t.tags.as_ref()).map(Vec::len).sum()
    }
}

/// Image features for every catalog item, indexed by id.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    features: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(catalog: &[CatalogItem], d_img: usize) -> Result<Self> {
        let f = ImageFeaturizer::new(d_img)?;
        Ok(FeatureTable {
            features: catalog.iter().map(|it| f.feature(it)).collect(),
        })
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.features.get(id as usize).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Intermediate results for one turn.
#[derive(Debug, Clone)]
pub struct EncodedTurn {
    pub token_states: Var,
    pub utterance_final: Var,
    pub sa_weights: Option<Var>,
    pub sa_output: Option<Var>,
    pub text_vec: Var,
    pub image_vec: Option<Var>,
    /// Transformer head weights recorded while encoding the turn.
    pub head_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncodedDialogue {
    pub turns: Vec<EncodedTurn>,
    /// `N x d_h` context states.
    pub context: Var,
}

/// Loss terms of one dialogue.
#[derive(Debug, Clone, Copy)]
pub struct DialogueLoss {
    /// `gen_sum * gen_scale + slot_weight * slot_sum * slot_scale`.
    pub total: Var,
    pub gen_sum: f64,
    pub gen_count: usize,
    pub slot_sum: f64,
    pub slot_count: usize,
}

/// Reduced result of a batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Gradients,
}

/// Generated responses and slot tags for one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct DialoguePrediction {
    /// One per system turn, in order.
    pub responses: Vec<Vec<String>>,
    /// One per user turn, in order.
    pub slots: Vec<Vec<Tag>>,
}

impl Model {
    /// Builds freshly initialized parameters for `config` and `vocab`.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x1417));
        let mut store = ParamStore::new();
        let (d_h, d_e, v) = (config.d_h, config.d_e, vocab.len());
        let embed = store.add_uniform("embed.word", v, d_e, &mut rng)?;
        let d_in = if config.use_pgpt { CONTEXTUAL_DIM } else { d_e };
        let text = if config.variant.transformer_text() {
            TextEncoder::Transformer(TransformerEncoder::new(&mut store, "enc.trans", d_in, 2 * d_h, &mut rng)?)
        } else {
            TextEncoder::BiGru {
                fwd: GruParams::new(&mut store, "enc.fwd", d_in, d_h, &mut rng)?,
                bwd: GruParams::new(&mut store, "enc.bwd", d_in, d_h, &mut rng)?,
            }
        };
        let image = match config.variant {
            Variant::Hred => None,
            Variant::Mhred | Variant::MTrans => Some(ImageEncoder::Linear(ImageParams::new(
                &mut store,
                "img",
                config.d_img,
                d_h,
                &mut rng,
            )?)),
            Variant::MulTrans => Some(ImageEncoder::Transformer(TransformerEncoder::new(
                &mut store,
                "img.trans",
                config.d_img,
                d_h,
                &mut rng,
            )?)),
        };
        let slot = if config.use_sa {
            Some(SlotHead {
                weight: store.add_uniform("slot.w", 2 * d_h, NUM_TAGS, &mut rng)?,
                bias: store.add_zeros("slot.b", 1, NUM_TAGS)?,
                salience_gain: store.add_zeros("slot.gain", 1, NUM_TAGS)?,
            })
        } else {
            None
        };
        let ctx_in = 2 * d_h + if image.is_some() { d_h } else { 0 };
        let context = GruParams::new(&mut store, "ctx.gru", ctx_in, d_h, &mut rng)?;
        let kb = if config.use_kb {
            Some((
                GruParams::new(&mut store, "kb.query", d_in, d_h, &mut rng)?,
                GruParams::new(&mut store, "kb.entity", d_in, d_h, &mut rng)?,
            ))
        } else {
            None
        };
        let decoder = DecoderParams::new(&mut store, embed, d_e, d_h, v, &mut rng)?;
        let provider = if config.use_pgpt {
            EmbeddingProvider::Contextual(Arc::new(ContextualEmbedder::new(CONTEXTUAL_SEED, CONTEXTUAL_DIM)))
        } else {
            EmbeddingProvider::Trainable { table: embed, dim: d_e }
        };
        Ok(Model {
            config,
            vocab,
            store,
            params: ModelParams {
                text,
                image,
                slot,
                context,
                kb,
                decoder,
            },
            provider,
        })
    }

    fn contextual(&self) -> Option<&ContextualEmbedder> {
        match &self.provider {
            EmbeddingProvider::Contextual(c) => Some(c),
            EmbeddingProvider::Trainable { .. } => None,
        }
    }

    fn prepare_kb(&self, kb: &KbStore, r: &KbRef) -> Result<PreparedKb> {
        let values = kb
            .lookup(r)
            .ok_or_else(|| Error::Validation(format!("knowledge base has no record {r}")))?;
        let query_tokens: Vec<&str> = r.key().split_whitespace().collect();
        let entity_tokens: Vec<&str> = values.iter().flat_map(|v| v.split_whitespace()).collect();
        let query = self.vocab.encode(&query_tokens);
        let entity = self.vocab.encode(&entity_tokens);
        let (query_ctx, entity_ctx) = match self.contextual() {
            Some(c) => (Some(c.embed(&[], &query)?), Some(c.embed(&[], &entity)?)),
            None => (None, None),
        };
        Ok(PreparedKb {
            query,
            entity,
            query_ctx,
            entity_ctx,
        })
    }

    /// Encodes tokens, resolves images and KB records, and precomputes contextual vectors.
    pub fn prepare(&self, d: &DialogueRecord, features: &FeatureTable, kb: &KbStore) -> Result<PreparedDialogue> {
        d.validate(Some(features.len()))?;
        let mut turns: Vec<PreparedTurn> = Vec::with_capacity(d.turns.len());
        for t in &d.turns {
            let ids = self.vocab.encode(&t.tokens);
            let images = t
                .images
                .iter()
                .map(|&id| {
                    features
                        .get(id)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::Validation(format!("dialogue {}: unknown image {id}", d.id)))
                })
                .collect::<Result<_>>()?;
            let contextual = match self.contextual() {
                Some(c) => {
                    let prev = turns.last().map(|p| p.ids.as_slice()).unwrap_or(&[]);
                    Some(c.embed(prev, &ids)?)
                }
                None => None,
            };
            let prepared_kb = match &t.kb_ref {
                Some(r) => Some(self.prepare_kb(kb, r)?),
                None => None,
            };
            turns.push(PreparedTurn {
                role: t.role,
                tokens: t.tokens.clone(),
                ids,
                tags: t.tags.clone(),
                images,
                contextual,
                kb: prepared_kb,
            });
        }
        Ok(PreparedDialogue {
            id: d.id.clone(),
            turns,
        })
    }

    pub fn prepare_all(
        &self,
        records: &[DialogueRecord],
        features: &FeatureTable,
        kb: &KbStore,
        exec: Execution,
    ) -> Result<Vec<PreparedDialogue>> {
        try_map_indexed(exec, records, |_, d| self.prepare(d, features, kb))
    }

    fn text_input(&self, g: &mut Graph, prev: &[u32], ids: &[u32], cached: Option<&Tensor>) -> Result<Var> {
        match cached {
            Some(t) => g.leaf(t.clone()),
            None => self.provider.embed(g, prev, ids),
        }
    }

    fn encode_turn(&self, g: &mut Graph, prev: &[u32], t: &PreparedTurn) -> Result<EncodedTurn> {
        let x = self.text_input(g, prev, &t.ids, t.contextual.as_ref())?;
        let mut head_weights = Vec::new();
        let (token_states, utterance_final) = match &self.params.text {
            TextEncoder::BiGru { fwd, bwd } => encode_utterance(g, x, fwd, bwd)?,
            TextEncoder::Transformer(enc) => {
                let (h, ws) = enc.encode(g, x)?;
                head_weights.extend(ws);
                let pooled = g.mean_rows(h);
                (h, pooled)
            }
        };
        let (sa_weights, sa_output, text_vec) = if self.config.use_sa {
            let (w, out) = slot_attention(g, token_states, self.config.dropout())?;
            let pooled = match self.config.sa_pooling {
                Pooling::Mean => g.mean_rows(out),
                Pooling::Final => {
                    let (n, _) = g.shape(out);
                    g.row(out, n - 1)?
                }
            };
            (Some(w), Some(out), pooled)
        } else {
            (None, None, utterance_final)
        };
        let image_vec = match &self.params.image {
            None => None,
            Some(ImageEncoder::Linear(p)) => Some(encode_images(g, &t.images, p)?),
            Some(ImageEncoder::Transformer(enc)) => {
                let (v, ws) = encode_images_transformer(g, &t.images, self.config.d_img, enc, self.config.d_h)?;
                head_weights.extend(ws);
                Some(v)
            }
        };
        Ok(EncodedTurn {
            token_states,
            utterance_final,
            sa_weights,
            sa_output,
            text_vec,
            image_vec,
            head_weights,
        })
    }

    /// Encodes every turn and runs the context GRU over them.
    pub fn encode_dialogue(&self, g: &mut Graph, d: &PreparedDialogue) -> Result<EncodedDialogue> {
        if d.turns.is_empty() {
            return Err(Error::Input(format!("dialogue {} has no turns", d.id)));
        }
        let mut turns = Vec::with_capacity(d.turns.len());
        let mut inputs = Vec::with_capacity(d.turns.len());
        for (i, t) in d.turns.iter().enumerate() {
            let prev = if i > 0 { d.turns[i - 1].ids.as_slice() } else { &[] };
            let e = self.encode_turn(g, prev, t)?;
            inputs.push(match e.image_vec {
                Some(img) => g.concat_cols(&[e.text_vec, img])?,
                None => e.text_vec,
            });
            turns.push(e);
        }
        let states = encode_context(g, &inputs, &self.params.context)?;
        let context = g.concat_rows(&states)?;
        Ok(EncodedDialogue { turns, context })
    }

    /// KB encoding used while generating the response that follows `user_turn`.
    pub fn kb_encoding(&self, g: &mut Graph, user_turn: &PreparedTurn) -> Result<KbEncoding> {
        let Some((q, e)) = &self.params.kb else {
            return Ok(KbEncoding::empty(g, self.config.d_h));
        };
        let Some(kb) = &user_turn.kb else {
            return Ok(KbEncoding::empty(g, self.config.d_h));
        };
        if kb.query.is_empty() || kb.entity.is_empty() {
            return Ok(KbEncoding::empty(g, self.config.d_h));
        }
        let qx = self.text_input(g, &[], &kb.query, kb.query_ctx.as_ref())?;
        let ex = self.text_input(g, &[], &kb.entity, kb.entity_ctx.as_ref())?;
        encode_kb(g, Some(qx), Some(ex), q, e)
    }

    /// Decoder context for the system turn at index `sys` (attends over turns `0..sys`).
    pub fn decoder_context(&self, g: &mut Graph, d: &PreparedDialogue, enc: &EncodedDialogue, sys: usize) -> Result<(DecoderContext, KbEncoding)> {
        if sys == 0 || sys >= d.turns.len() {
            return Err(Error::Input(format!("no system turn at index {sys}")));
        }
        let memory = g.slice_rows(enc.context, 0, sys)?;
        let kb = self.kb_encoding(g, &d.turns[sys - 1])?;
        let dc = prepare(g, &self.params.decoder, memory, kb.attended)?;
        Ok((dc, kb))
    }

    /// Records the joint loss of one dialogue, scaled by the batch-level token counts.
    pub fn dialogue_loss(
        &self,
        g: &mut Graph,
        d: &PreparedDialogue,
        gen_scale: f64,
        slot_scale: f64,
    ) -> Result<DialogueLoss> {
        let enc = self.encode_dialogue(g, d)?;
        let mut terms = Vec::new();
        let (mut gen_sum, mut gen_count) = (0.0, 0usize);
        for (i, t) in d.turns.iter().enumerate() {
            if t.role != Role::System {
                continue;
            }
            let (dc, _) = self.decoder_context(g, d, &enc, i)?;
            let (input, target) = frame_response(&t.ids);
            let logits = teacher_forced_logits(g, &self.params.decoder, &dc, &input)?;
            let (nll, n) = masked_nll(g, logits, &target)?;
            gen_sum += g.scalar(nll);
            gen_count += n;
            terms.push(g.scale(nll, gen_scale));
        }
        let (mut slot_sum, mut slot_count) = (0.0, 0usize);
        if let Some(head) = &self.params.slot {
            for (t, e) in d.turns.iter().zip(&enc.turns) {
                let (Some(tags), Some(w), Some(out)) = (&t.tags, e.sa_weights, e.sa_output) else {
                    continue;
                };
                let logits = slot_logits(g, out, w, head)?;
                let targets: Vec<Option<usize>> = tags.iter().map(|t| Some(t.id())).collect();
                let ce = g.cross_entropy(logits, &targets)?;
                slot_sum += g.scalar(ce);
                slot_count += tags.len();
                terms.push(g.scale(ce, slot_scale * self.config.slot_weight));
            }
        }
        if terms.is_empty() {
            return Err(Error::Input(format!("dialogue {} has nothing to learn from", d.id)));
        }
        let parts: Vec<Var> = terms;
        let stacked = g.concat_cols(&parts)?;
        let total = g.sum(stacked);
        Ok(DialogueLoss {
            total,
            gen_sum,
            gen_count,
            slot_sum,
            slot_count,
        })
    }

    fn norms(&self, batch: &[&PreparedDialogue]) -> Result<(f64, f64)> {
        let gen: usize = batch.iter().map(|d| d.generation_tokens()).sum();
        let slot: usize = batch.iter().map(|d| d.slot_tokens()).sum();
        if gen == 0 {
            return Err(Error::Input("batch has no target tokens".into()));
        }
        let slot_scale = if slot == 0 || self.params.slot.is_none() { 0.0 } else { 1.0 / slot as f64 };
        Ok((1.0 / gen as f64, slot_scale))
    }

    /// Joint loss and gradients of a batch, one tape per dialogue, reduced in batch order.
    ///
    /// `seeds[i]` drives the dropout masks of dialogue `i`.
    pub fn batch_gradients(&self, batch: &[&PreparedDialogue], seeds: &[u64], exec: Execution) -> Result<BatchResult> {
        if batch.len() != seeds.len() {
            return Err(Error::Contract("one seed per dialogue required".into()));
        }
        let (gen_scale, slot_scale) = self.norms(batch)?;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let parts = try_map_indexed(exec, &idx, |_, &i| -> Result<(f64, Gradients)> {
            let mut g = Graph::with_params(&self.store).train_mode(seeds[i]);
            let l = self.dialogue_loss(&mut g, batch[i], gen_scale, slot_scale)?;
            g.backward(l.total)?;
            Ok((g.scalar(l.total), g.param_grads()))
        })?;
        let mut grads = Gradients::new(self.store.len());
        let mut loss = 0.0;
        for (l, gr) in &parts {
            loss += l;
            grads.add_assign(gr);
        }
        Ok(BatchResult { loss, grads })
    }

    /// Forward-only joint loss of a batch with dropout at `seeds` (used for finite differences).
    pub fn batch_loss(&self, batch: &[&PreparedDialogue], seeds: &[u64]) -> Result<f64> {
        let (gen_scale, slot_scale) = self.norms(batch)?;
        let mut loss = 0.0;
        for (d, &s) in batch.iter().zip(seeds) {
            let mut g = Graph::with_params(&self.store).train_mode(s);
            let total = self.dialogue_loss(&mut g, d, gen_scale, slot_scale)?.total;
            loss += g.scalar(total);
        }
        Ok(loss)
    }

    /// Evaluation-mode joint loss over a corpus, normalized by its total token counts.
    pub fn corpus_loss(&self, data: &[PreparedDialogue], exec: Execution) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let parts = try_map_indexed(exec, data, |_, d| -> Result<DialogueLoss> {
            let mut g = Graph::with_params(&self.store);
            self.dialogue_loss(&mut g, d, 1.0, 1.0)
        })?;
        let (mut gs, mut gc, mut ss, mut sc) = (0.0, 0usize, 0.0, 0usize);
        for p in &parts {
            gs += p.gen_sum;
            gc += p.gen_count;
            ss += p.slot_sum;
            sc += p.slot_count;
        }
        let slot = if sc == 0 { 0.0 } else { self.config.slot_weight * ss / sc as f64 };
        Ok(gs / gc.max(1) as f64 + slot)
    }

    /// Slot tags for every user turn (all `O` without slot attention).
    pub fn predict_tags(&self, g: &mut Graph, d: &PreparedDialogue, enc: &EncodedDialogue) -> Result<Vec<Vec<Tag>>> {
        let mut out = Vec::new();
        for (t, e) in d.turns.iter().zip(&enc.turns) {
            if t.role != Role::User {
                continue;
            }
            out.push(match (&self.params.slot, e.sa_weights, e.sa_output) {
                (Some(head), Some(w), Some(o)) => predict_slots(g, o, w, head)?.tags,
                _ => vec![Tag::O; t.ids.len()],
            });
        }
        Ok(out)
    }

    /// Generates the response at system turn `sys` from the gold history before it.
    pub fn generate(&self, g: &mut Graph, d: &PreparedDialogue, enc: &EncodedDialogue, sys: usize, gen: &GenerationConfig) -> Result<Vec<u32>> {
        let (dc, _) = self.decoder_context(g, d, enc, sys)?;
        let mut stepper = Stepper {
            g,
            p: &self.params.decoder,
            dc,
        };
        let hyp = if gen.beam_width == 1 {
            greedy_search(&mut stepper, gen)?
        } else {
            beam_search(&mut stepper, gen)?
        };
        Ok(hyp.content())
    }

    /// Responses for every system turn and tags for every user turn.
    pub fn predict_dialogue(&self, d: &PreparedDialogue, gen: &GenerationConfig) -> Result<DialoguePrediction> {
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode_dialogue(&mut g, d)?;
        let slots = self.predict_tags(&mut g, d, &enc)?;
        let mut responses = Vec::new();
        for (i, t) in d.turns.iter().enumerate() {
            if t.role == Role::System {
                let ids = self.generate(&mut g, d, &enc, i, gen)?;
                responses.push(self.vocab.decode(&ids));
            }
        }
        Ok(DialoguePrediction { responses, slots })
    }

    /// Slot tags for every user turn, without decoding responses.
    pub fn tag_dialogue(&self, d: &PreparedDialogue) -> Result<Vec<Vec<Tag>>> {
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode_dialogue(&mut g, d)?;
        self.predict_tags(&mut g, d, &enc)
    }

    /// Tags of the last user turn and a response for the final system turn,
    /// whose own tokens are ignored.
    pub fn respond(&self, d: &PreparedDialogue, gen: &GenerationConfig) -> Result<(Vec<Tag>, Vec<String>)> {
        let n = d.turns.len();
        if n < 2 || d.turns[n - 1].role != Role::System {
            return Err(Error::Input("respond needs a dialogue ending in a system turn".into()));
        }
        gen.validate()?;
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode_dialogue(&mut g, d)?;
        let tags = self.predict_tags(&mut g, d, &enc)?.pop().unwrap_or_default();
        let ids = self.generate(&mut g, d, &enc, n - 1, gen)?;
        Ok((tags, self.vocab.decode(&ids)))
    }
}

/// Adapts the decoder to the search routines; the state lives on the shared tape.
pub struct Stepper<'a, 'p> {
    pub g: &'a mut Graph<'p>,
    pub p: &'a DecoderParams,
    pub dc: DecoderContext,
}

impl StepModel for Stepper<'_, '_> {
    type State = DecoderState;

    fn start(&mut self) -> Result<DecoderState> {
        Ok(self.dc.initial_state(self.g, self.p.d_h))
    }

    fn step(&mut self, state: &DecoderState, token: u32) -> Result<(Vec<f64>, DecoderState)> {
        let emb = project_inputs(self.g, self.p, &self.dc, &[token])?;
        let out = step_projected(self.g, self.p, &self.dc, emb, state)?;
        let logits = output_logits(self.g, self.p, out.h_tilde)?;
        Ok((log_probs(self.g.value(logits)), out.state))
    }
}
