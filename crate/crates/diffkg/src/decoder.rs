//! Autoregressive response decoder.
//!
//! A single gated recurrent layer attends over a context made of the
//! dialogue-history token embeddings plus the token blocks of the
//! highest-weight retrieved entities (each scaled by its retrieval
//! weight, so gradients flow back into the traversal). Output logits tie
//! the output matrix with the token embedding table, add a copy score
//! against the attention context, and — when the caller supplies a
//! pointer distribution over the vocabulary — a gated pointer bonus that
//! lets the decoder name a retrieved entity without having to learn a
//! per-entity output row. Training is teacher-forced cross-entropy;
//! generation is greedy with ties broken toward the lowest index.

use crate::diff::{ParamStore, Tape, ValueId};
use crate::embed::EntityTokenMap;
use crate::encoder::uniform_init;
use crate::text::{BOS, EOS, PAD, UNK};
use crate::{Error, Result, Scalar};

/// Decoder dimensions.
#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub d: usize,
    pub vocab_size: usize,
}

/// Parameter-block ids for the decoder.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlocks {
    pub init_w: usize,
    pub init_b: usize,
    pub att_q: usize,
    pub att_k: usize,
    pub att_v: usize,
    pub z_y: usize,
    pub z_c: usize,
    pub z_s: usize,
    pub z_b: usize,
    pub h_y: usize,
    pub h_c: usize,
    pub h_s: usize,
    pub h_b: usize,
    pub w_out: usize,
    pub ptr_w: usize,
    pub ptr_b: usize,
    pub ptr_rel_w: usize,
    pub ptr_rel_b: usize,
}

/// Optional pointer distributions (vocabulary-length, entries in
/// [0, 1]) fed to every decode step, each with its own learned gate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pointers {
    pub entity: Option<ValueId>,
    pub relation: Option<ValueId>,
}

/// Fixed gain on the gated pointer bonus. The pointer weights live in
/// [0, 1]; without a gain their logit contribution could never dominate
/// a vocabulary-sized softmax, and the gate alone (a sigmoid) cannot
/// exceed one.
pub const PTR_SCALE: f64 = 5.0;

/// Register decoder parameter blocks: uniform [-0.08, 0.08], zero biases.
pub fn init_decoder_params<S: Scalar>(
    store: &mut ParamStore<S>,
    dims: &DecoderDims,
    rng: &mut impl rand::Rng,
) -> DecoderBlocks {
    let d = dims.d;
    let v = dims.vocab_size;
    DecoderBlocks {
        init_w: store.add_block("dec_init_w", d, d, uniform_init(rng, d * d)),
        init_b: store.add_block("dec_init_b", d, 1, vec![S::zero(); d]),
        att_q: store.add_block("att_q", d, d, uniform_init(rng, d * d)),
        att_k: store.add_block("att_k", d, d, uniform_init(rng, d * d)),
        att_v: store.add_block("att_v", d, 1, uniform_init(rng, d)),
        z_y: store.add_block("dec_z_y", d, d, uniform_init(rng, d * d)),
        z_c: store.add_block("dec_z_c", d, d, uniform_init(rng, d * d)),
        z_s: store.add_block("dec_z_s", d, d, uniform_init(rng, d * d)),
        z_b: store.add_block("dec_z_b", d, 1, vec![S::zero(); d]),
        h_y: store.add_block("dec_h_y", d, d, uniform_init(rng, d * d)),
        h_c: store.add_block("dec_h_c", d, d, uniform_init(rng, d * d)),
        h_s: store.add_block("dec_h_s", d, d, uniform_init(rng, d * d)),
        h_b: store.add_block("dec_h_b", d, 1, vec![S::zero(); d]),
        w_out: store.add_block("w_out", v, d, uniform_init(rng, v * d)),
        ptr_w: store.add_block("ptr_w", 1, d, uniform_init(rng, d)),
        ptr_b: store.add_block("ptr_b", 1, 1, vec![S::zero()]),
        ptr_rel_w: store.add_block("ptr_rel_w", 1, d, uniform_init(rng, d)),
        ptr_rel_b: store.add_block("ptr_rel_b", 1, 1, vec![S::zero()]),
    }
}

/// Decoder parameter nodes bound onto a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    pub init_w: ValueId,
    pub init_b: ValueId,
    pub att_q: ValueId,
    pub att_k: ValueId,
    pub att_v: ValueId,
    pub z_y: ValueId,
    pub z_c: ValueId,
    pub z_s: ValueId,
    pub z_b: ValueId,
    pub h_y: ValueId,
    pub h_c: ValueId,
    pub h_s: ValueId,
    pub h_b: ValueId,
    pub w_out: ValueId,
    pub ptr_w: ValueId,
    pub ptr_b: ValueId,
    pub ptr_rel_w: ValueId,
    pub ptr_rel_b: ValueId,
}

pub fn bind_decoder<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, blocks: &DecoderBlocks) -> DecoderNodes {
    DecoderNodes {
        init_w: tape.param(store, blocks.init_w),
        init_b: tape.param(store, blocks.init_b),
        att_q: tape.param(store, blocks.att_q),
        att_k: tape.param(store, blocks.att_k),
        att_v: tape.param(store, blocks.att_v),
        z_y: tape.param(store, blocks.z_y),
        z_c: tape.param(store, blocks.z_c),
        z_s: tape.param(store, blocks.z_s),
        z_b: tape.param(store, blocks.z_b),
        h_y: tape.param(store, blocks.h_y),
        h_c: tape.param(store, blocks.h_c),
        h_s: tape.param(store, blocks.h_s),
        h_b: tape.param(store, blocks.h_b),
        w_out: tape.param(store, blocks.w_out),
        ptr_w: tape.param(store, blocks.ptr_w),
        ptr_b: tape.param(store, blocks.ptr_b),
        ptr_rel_w: tape.param(store, blocks.ptr_rel_w),
        ptr_rel_b: tape.param(store, blocks.ptr_rel_b),
    }
}

/// Assemble the attention context: one vector per history token followed
/// by the token blocks of the top-`k` entities in descending retrieval
/// weight. Entity token embeddings are scaled by the (differentiable)
/// weight in `top_weights` for their slot — callers pass the retrieval
/// weights of the top-`k` entities, renormalized so relative confidence
/// survives gate dilution; padding positions are zero vectors, so the
/// context length is always `|history| + k * m`.
pub fn build_context<S: Scalar>(
    tape: &mut Tape<S>,
    emb: ValueId,
    history: &[u32],
    top_weights: ValueId,
    top: &[(usize, S)],
    entity_tokens: &EntityTokenMap,
) -> Result<Vec<ValueId>> {
    let (_, d) = tape.shape(emb);
    let mut ctx = Vec::with_capacity(history.len() + top.len() * entity_tokens.m);
    for &tok in history {
        ctx.push(tape.row(emb, tok as usize)?);
    }
    for (slot, &(entity, _)) in top.iter().enumerate() {
        let tokens = &entity_tokens.tokens[entity];
        for pos in 0..entity_tokens.m {
            match tokens.get(pos) {
                Some(&tok) => {
                    let row = tape.row(emb, tok as usize)?;
                    ctx.push(tape.entry_scale(row, top_weights, slot)?);
                }
                None => ctx.push(tape.leaf(vec![S::zero(); d])),
            }
        }
    }
    if ctx.is_empty() {
        return Err(Error::BadData("empty decoder context".into()));
    }
    Ok(ctx)
}

/// Attention keys, computed once per example.
pub fn attention_keys<S: Scalar>(tape: &mut Tape<S>, nodes: &DecoderNodes, ctx: &[ValueId]) -> Result<Vec<ValueId>> {
    ctx.iter().map(|&c| tape.matvec(nodes.att_k, c)).collect()
}

/// `s₀ = tanh(W x̃ + b)` from the encoder query vector.
pub fn initial_state<S: Scalar>(tape: &mut Tape<S>, nodes: &DecoderNodes, x: ValueId) -> Result<ValueId> {
    let mixed = tape.matvec(nodes.init_w, x)?;
    let pre = tape.add(mixed, nodes.init_b)?;
    Ok(tape.tanh(pre))
}

/// One decode step: attend, update the gated state, emit tied logits
/// plus copy and (optional) pointer scores.
#[allow(clippy::too_many_arguments)]
fn step<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &DecoderNodes,
    emb: ValueId,
    ctx: &[ValueId],
    keys: &[ValueId],
    s: ValueId,
    prev_tok: u32,
    pointers: &Pointers,
) -> Result<(ValueId, ValueId)> {
    let y = tape.row(emb, prev_tok as usize)?;
    let q = tape.matvec(nodes.att_q, s)?;
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let pre = tape.add(q, k)?;
        let t = tape.tanh(pre);
        scores.push(tape.dot(nodes.att_v, t)?);
    }
    let score_vec = tape.concat_scalars(&scores)?;
    let att = tape.softmax(score_vec)?;
    let c = tape.weighted_sum(att, ctx)?;

    let zy = tape.matvec(nodes.z_y, y)?;
    let zc = tape.matvec(nodes.z_c, c)?;
    let zs = tape.matvec(nodes.z_s, s)?;
    let z_pre = tape.add_n(&[zy, zc, zs, nodes.z_b])?;
    let z = tape.sigmoid(z_pre);

    let hy = tape.matvec(nodes.h_y, y)?;
    let hc = tape.matvec(nodes.h_c, c)?;
    let hs = tape.matvec(nodes.h_s, s)?;
    let h_pre = tape.add_n(&[hy, hc, hs, nodes.h_b])?;
    let h = tape.tanh(h_pre);

    let keep = tape.one_minus(z);
    let old = tape.hadamard(keep, s)?;
    let new = tape.hadamard(z, h)?;
    let s_next = tape.add(old, new)?;

    let out = tape.matvec(nodes.w_out, s_next)?;
    let tied = tape.matvec(emb, s_next)?;
    // Copy path: scoring tokens directly against the attention context
    // makes emitting an attended history or retrieved-entity token cheap
    // from the very first updates.
    let copy = tape.matvec(emb, c)?;
    let mut terms = vec![out, tied, copy];
    // Gated pointers: a linear readout of the new state decides when to
    // emit one of the pointed-at tokens (e.g. an entity name right
    // after "inform", a relation name right after "include").
    for (p, gate_w, gate_b) in [
        (pointers.entity, nodes.ptr_w, nodes.ptr_b),
        (pointers.relation, nodes.ptr_rel_w, nodes.ptr_rel_b),
    ] {
        let Some(p) = p else { continue };
        let g_lin = tape.matvec(gate_w, s_next)?;
        let g_pre = tape.add(g_lin, gate_b)?;
        let g = tape.sigmoid(g_pre);
        let amplified = tape.scale(p, S::from_f64(PTR_SCALE));
        terms.push(tape.entry_scale(amplified, g, 0)?);
    }
    let logits = tape.add_n(&terms)?;
    Ok((s_next, logits))
}

/// Teacher-forced sequence loss: the sum of per-token cross-entropies
/// over the target tokens plus the closing end-of-sequence token.
pub fn decode_loss<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &DecoderNodes,
    emb: ValueId,
    ctx: &[ValueId],
    x: ValueId,
    target: &[u32],
    pointers: &Pointers,
) -> Result<ValueId> {
    if ctx.is_empty() {
        return Err(Error::BadData("decode_loss: empty context".into()));
    }
    let keys = attention_keys(tape, nodes, ctx)?;
    let mut s = initial_state(tape, nodes, x)?;
    let mut losses = Vec::with_capacity(target.len() + 1);
    let mut prev = BOS as u32;
    for &tgt in target.iter().chain(std::iter::once(&(EOS as u32))) {
        let (s_next, logits) = step(tape, nodes, emb, ctx, &keys, s, prev, pointers)?;
        losses.push(tape.cross_entropy(logits, tgt as usize)?);
        s = s_next;
        prev = tgt;
    }
    tape.add_n(&losses)
}

/// Greedy generation: argmax at every step (ties to the lowest index),
/// PAD/UNK/BOS masked out, stopping at EOS or `max_len` tokens.
pub fn generate<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &DecoderNodes,
    emb: ValueId,
    ctx: &[ValueId],
    x: ValueId,
    max_len: usize,
    pointers: &Pointers,
) -> Result<Vec<u32>> {
    if ctx.is_empty() {
        return Err(Error::BadData("generate: empty context".into()));
    }
    let keys = attention_keys(tape, nodes, ctx)?;
    let mut s = initial_state(tape, nodes, x)?;
    let mut out = Vec::new();
    let mut prev = BOS as u32;
    for _ in 0..max_len {
        let (s_next, logits) = step(tape, nodes, emb, ctx, &keys, s, prev, pointers)?;
        let lv = tape.value(logits);
        let mut best = EOS;
        let mut best_val = S::neg_infinity();
        for (i, &v) in lv.iter().enumerate() {
            if i == PAD || i == UNK || i == BOS {
                continue;
            }
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best as u32);
        s = s_next;
        prev = best as u32;
    }
    Ok(out)
}
