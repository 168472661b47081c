//! Full model: encoder heads, differentiable traversal and decoder.
//!
//! One forward pass binds every parameter block onto a fresh tape,
//! encodes the dialogue history, predicts per-hop relation and gate
//! distributions, walks the reified KG, and decodes the response
//! attending over the history plus the highest-weight retrieved
//! entities. The token embedding table is shared by the encoder, the
//! entity-scoring operation and the decoder.

use crate::decoder::{
    bind_decoder, build_context, decode_loss, generate, init_decoder_params, DecoderBlocks, DecoderDims, Pointers,
};
use crate::diff::{ParamStore, Tape, ValueId};
use crate::embed::EntityTokenMap;
use crate::encoder::{
    bind_encoder, encode_history, init_encoder_params, predict_heads, EncoderBlocks, EncoderDims, Mode,
};
use crate::kg::{ReifiedKg, Vocab};
use crate::reasoner::{top_k_entities, traverse, HopTrace, ReasonerConfig};
use crate::text::TokenVocab;
use crate::{Error, Result, Scalar};

/// Model hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub d: usize,
    pub h_hops: usize,
    pub top_k: usize,
    pub eps: f64,
    /// Weight of the relation-path supervision term.
    pub lambda: f64,
    pub max_gen_len: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 128, h_hops: 5, top_k: 8, eps: 1e-12, lambda: 1.0, max_gen_len: 30, mode: Mode::Full }
    }
}

/// Immutable per-dataset structures the model runs against.
#[derive(Debug, Clone)]
pub struct Assets {
    pub kg: ReifiedKg,
    pub entities: Vocab,
    pub relations: Vocab,
    pub tokens: TokenVocab,
    pub entity_tokens: EntityTokenMap,
    /// Index of the self-loop relation.
    pub to_self: u32,
}

impl Assets {
    pub fn build(kg: ReifiedKg, entities: Vocab, relations: Vocab, tokens: TokenVocab, to_self: u32) -> Result<Self> {
        let entity_tokens = EntityTokenMap::build(&entities, &tokens, None)?;
        Ok(Self { kg, entities, relations, tokens, entity_tokens, to_self })
    }
}

/// Trainable state: all parameter blocks plus their layout.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub params: ParamStore<S>,
    pub enc: EncoderBlocks,
    pub dec: DecoderBlocks,
    pub cfg: ModelConfig,
}

impl<S: Scalar> Model<S> {
    pub fn init(assets: &Assets, cfg: ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let mut params = ParamStore::new();
        let enc_dims = EncoderDims {
            d: cfg.d,
            h_hops: cfg.h_hops,
            n_relations: assets.kg.n_relations(),
            vocab_size: assets.tokens.len(),
        };
        let enc = init_encoder_params(&mut params, &enc_dims, rng);
        let dec = init_decoder_params(&mut params, &DecoderDims { d: cfg.d, vocab_size: assets.tokens.len() }, rng);
        Self { params, enc, dec, cfg }
    }

    pub fn encoder_dims(&self, assets: &Assets) -> EncoderDims {
        EncoderDims {
            d: self.cfg.d,
            h_hops: self.cfg.h_hops,
            n_relations: assets.kg.n_relations(),
            vocab_size: assets.tokens.len(),
        }
    }

    fn reasoner_cfg(&self, assets: &Assets) -> ReasonerConfig {
        ReasonerConfig {
            h_hops: self.cfg.h_hops,
            eps: self.cfg.eps,
            top_k: self.cfg.top_k.min(assets.kg.n_entities()),
        }
    }
}

/// One example, resolved to indices and ready for a forward pass.
#[derive(Debug, Clone)]
pub struct PreparedExample<S> {
    pub history_tokens: Vec<u32>,
    /// Indicator vector over entities.
    pub e1: Vec<S>,
    pub target_tokens: Vec<u32>,
    /// Gold relation path (unpadded); padded with the self-loop relation
    /// to `H` hops for supervision.
    pub gold_path: Option<Vec<u32>>,
}

/// Loss and trace of one teacher-forced forward pass.
pub struct ForwardResult<S> {
    pub loss: ValueId,
    pub decoder_loss_value: S,
    pub trace: HopTrace<S>,
}

struct FrontHalf<S> {
    enc_nodes: crate::encoder::EncoderNodes,
    x: ValueId,
    heads: crate::encoder::HeadOutputs,
    trace: HopTrace<S>,
    top: Vec<(usize, S)>,
    ctx: Vec<ValueId>,
    /// Vocabulary-length pointer distribution: the renormalized top-k
    /// retrieval weights scattered onto the name tokens of their
    /// entities; feeds the decoder's gated pointer bonus.
    pointer: ValueId,
    /// Vocabulary-length pointer over relation-name tokens, weighted by
    /// the first hop's relation distribution: lets the decoder name the
    /// queried relation (extraction-style responses) through the same
    /// gated-pointer mechanism.
    rel_pointer: ValueId,
}

fn run_front_half<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    assets: &Assets,
    ex: &PreparedExample<S>,
) -> Result<FrontHalf<S>> {
    let enc_nodes = bind_encoder(tape, &model.params, &model.enc);
    let dims = model.encoder_dims(assets);
    let x = encode_history(tape, &enc_nodes, &ex.history_tokens)?;
    let heads = predict_heads(tape, &enc_nodes, &dims, x, model.cfg.mode)?;
    if ex.e1.len() != assets.kg.n_entities() {
        return Err(Error::DimMismatch(format!(
            "initial entity vector {} vs {} entities",
            ex.e1.len(),
            assets.kg.n_entities()
        )));
    }
    let e1 = tape.leaf(ex.e1.clone());
    let rcfg = model.reasoner_cfg(assets);
    let (e_final, trace) = traverse(tape, e1, &heads, &assets.kg, enc_nodes.emb, &assets.entity_tokens, &rcfg)?;
    let top = top_k_entities(tape.value(e_final), rcfg.top_k)?;
    // Renormalize the top-k retrieval weights before they scale the
    // decoder context: the gate blend dilutes absolute entity weights
    // hop by hop, but relative confidence among the survivors is what
    // the copy path needs.
    let cols: Vec<u32> = top.iter().map(|&(i, _)| i as u32).collect();
    let gather = crate::kg::OneHotRows::new(cols, assets.kg.n_entities())?;
    let w_top = tape.sp_apply(&gather, e_final)?;
    let w_norm = tape.normalize_eps(w_top, S::from_f64(rcfg.eps))?;
    let ctx = build_context(tape, enc_nodes.emb, &ex.history_tokens, w_norm, &top, &assets.entity_tokens)?;
    // Scatter each slot's weight onto the name tokens of its entity:
    // expand w_norm from slots to (slot, token) pairs, then scatter-add
    // the pairs into a vocabulary-length vector.
    let vocab_size = tape.shape(enc_nodes.emb).0;
    let mut pair_slot = Vec::new();
    let mut pair_tok = Vec::new();
    for (slot, &(entity, _)) in top.iter().enumerate() {
        for &tok in assets.entity_tokens.tokens[entity].iter() {
            pair_slot.push(slot as u32);
            pair_tok.push(tok);
        }
    }
    let expand = crate::kg::OneHotRows::new(pair_slot, top.len())?;
    let scatter = crate::kg::OneHotRows::new(pair_tok, vocab_size)?;
    let w_pairs = tape.sp_apply(&expand, w_norm)?;
    let pointer = tape.sp_apply_transpose(&scatter, w_pairs)?;
    // Same construction for relations, weighted by the hop-1 relation
    // distribution. The self-loop and any reserved-special tokens are
    // skipped: neither is ever part of a response.
    let mut rpair_rel = Vec::new();
    let mut rpair_tok = Vec::new();
    for (r, name) in assets.relations.names().enumerate() {
        if r as u32 == assets.to_self {
            continue;
        }
        for tok in assets.tokens.encode(name) {
            if (tok as usize) <= crate::text::EOS {
                continue;
            }
            rpair_rel.push(r as u32);
            rpair_tok.push(tok);
        }
    }
    let rexpand = crate::kg::OneHotRows::new(rpair_rel, assets.kg.n_relations())?;
    let rscatter = crate::kg::OneHotRows::new(rpair_tok, vocab_size)?;
    let r_pairs = tape.sp_apply(&rexpand, heads.rels[0])?;
    let rel_pointer = tape.sp_apply_transpose(&rscatter, r_pairs)?;
    Ok(FrontHalf { enc_nodes, x, heads, trace, top, ctx, pointer, rel_pointer })
}

/// Teacher-forced loss: decoder cross-entropy plus, when a gold path is
/// present, `λ` times the negative log-likelihood of the gold relation
/// at every hop (gold paths shorter than `H` are padded with self-loops).
pub fn forward_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    assets: &Assets,
    ex: &PreparedExample<S>,
) -> Result<ForwardResult<S>> {
    let FrontHalf { enc_nodes, x, heads, trace, ctx, pointer, rel_pointer, .. } = run_front_half(tape, model, assets, ex)?;
    let dec_nodes = bind_decoder(tape, &model.params, &model.dec);
    let ptrs = Pointers { entity: Some(pointer), relation: Some(rel_pointer) };
    let dec_loss = decode_loss(tape, &dec_nodes, enc_nodes.emb, &ctx, x, &ex.target_tokens, &ptrs)?;
    let decoder_loss_value = tape.value(dec_loss)[0];
    let loss = match &ex.gold_path {
        Some(path) if model.cfg.lambda != 0.0 => {
            if path.len() > model.cfg.h_hops {
                return Err(Error::BadData(format!(
                    "gold path of {} hops exceeds H={}",
                    path.len(),
                    model.cfg.h_hops
                )));
            }
            let mut terms = Vec::with_capacity(model.cfg.h_hops);
            for h in 0..model.cfg.h_hops {
                let rel = path.get(h).copied().unwrap_or(assets.to_self);
                terms.push(tape.neg_log_entry(heads.rels[h], rel as usize)?);
            }
            let psum = tape.add_n(&terms)?;
            let scaled = tape.scale(psum, S::from_f64(model.cfg.lambda));
            tape.add(dec_loss, scaled)?
        }
        _ => dec_loss,
    };
    Ok(ForwardResult { loss, decoder_loss_value, trace })
}

/// Greedy inference output.
pub struct Prediction<S> {
    pub tokens: Vec<u32>,
    pub text: String,
    pub trace: HopTrace<S>,
    /// Top retrieved entities with weights, descending.
    pub top_entities: Vec<(usize, S)>,
}

/// Run the full pipeline and decode greedily.
pub fn predict<S: Scalar>(model: &Model<S>, assets: &Assets, ex: &PreparedExample<S>) -> Result<Prediction<S>> {
    let mut tape = Tape::new();
    let FrontHalf { enc_nodes, x, trace, top, ctx, pointer, rel_pointer, .. } = run_front_half(&mut tape, model, assets, ex)?;
    let dec_nodes = bind_decoder(&mut tape, &model.params, &model.dec);
    let ptrs = Pointers { entity: Some(pointer), relation: Some(rel_pointer) };
    let tokens = generate(&mut tape, &dec_nodes, enc_nodes.emb, &ctx, x, model.cfg.max_gen_len, &ptrs)?;
    let text = assets.tokens.decode(&tokens);
    Ok(Prediction { tokens, text, trace, top_entities: top })
}
