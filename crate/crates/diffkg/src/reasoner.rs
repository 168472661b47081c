//! Differentiable multi-hop traversal over the reified KG.
//!
//! One hop is the normalized step
//! `normalize_eps(M_tᵀ((M_h e) ⊙ (M_r r)), eps)`; the unnormalized
//! product is kept for tests and benchmarks because its norm decays
//! geometrically when relation weights are below one. Each hop blends
//! the traversal result with a learnable entity-scoring operation via a
//! two-way gate, and the whole walk is recorded as an interpretable trace.

use crate::diff::{Tape, ValueId};
use crate::embed::EntityTokenMap;
use crate::encoder::HeadOutputs;
use crate::kg::{ReifiedKg, Vocab};
use crate::{Error, Result, Scalar};
use std::collections::BTreeSet;

/// Traversal settings.
#[derive(Debug, Clone, Copy)]
pub struct ReasonerConfig {
    pub h_hops: usize,
    pub eps: f64,
    pub top_k: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self { h_hops: 5, eps: 1e-12, top_k: 8 }
    }
}

/// One normalized traversal hop on the tape.
pub fn next_hop<S: Scalar>(tape: &mut Tape<S>, e: ValueId, r: ValueId, kg: &ReifiedKg, eps: S) -> Result<ValueId> {
    let he = tape.sp_apply(&kg.m_h, e)?;
    let rr = tape.sp_apply(&kg.m_r, r)?;
    let prod = tape.hadamard(he, rr)?;
    let t = tape.sp_apply_transpose(&kg.m_t, prod)?;
    tape.normalize_eps(t, eps)
}

/// The unnormalized hop product (test/benchmark use only).
pub fn follow_unnormalized<S: Scalar>(tape: &mut Tape<S>, e: ValueId, r: ValueId, kg: &ReifiedKg) -> Result<ValueId> {
    let he = tape.sp_apply(&kg.m_h, e)?;
    let rr = tape.sp_apply(&kg.m_r, r)?;
    let prod = tape.hadamard(he, rr)?;
    tape.sp_apply_transpose(&kg.m_t, prod)
}

/// Forward-only normalized hop over plain vectors (no tape).
pub fn next_hop_values<S: Scalar>(e: &[S], r: &[S], kg: &ReifiedKg, eps: S) -> Result<Vec<S>> {
    let mut out = follow_values(e, r, kg)?;
    let norm = out.iter().map(|&v| v * v).sum::<S>().sqrt();
    let denom = norm + eps;
    for v in out.iter_mut() {
        *v = *v / denom;
    }
    Ok(out)
}

/// Forward-only unnormalized hop over plain vectors.
pub fn follow_values<S: Scalar>(e: &[S], r: &[S], kg: &ReifiedKg) -> Result<Vec<S>> {
    if e.len() != kg.n_entities() || r.len() != kg.n_relations() {
        return Err(Error::DimMismatch(format!(
            "hop: entity vec {} / relation vec {} vs KG {}x{}",
            e.len(),
            r.len(),
            kg.n_entities(),
            kg.n_relations()
        )));
    }
    let mut out = vec![S::zero(); kg.n_entities()];
    let heads = kg.m_h.cols.as_ref();
    let rels = kg.m_r.cols.as_ref();
    let tails = kg.m_t.cols.as_ref();
    for k in 0..kg.n_triples() {
        let w = e[heads[k] as usize] * r[rels[k] as usize];
        if w != S::zero() {
            out[tails[k] as usize] += w;
        }
    }
    Ok(out)
}

/// Learnable check: score each entity by the operation vector dotted
/// against its mean-pooled name embedding, weighted by the current
/// entity vector, then softmax.
///
/// `emb_table` is the token embedding table node; the per-entity mean
/// pooling over the padded token dimension uses the fixed divisor `m`.
pub fn operate<S: Scalar>(
    tape: &mut Tape<S>,
    e: ValueId,
    a: ValueId,
    emb_table: ValueId,
    entity_tokens: &EntityTokenMap,
) -> Result<ValueId> {
    let (n_e, _) = tape.shape(e);
    if n_e != entity_tokens.n_entities() {
        return Err(Error::DimMismatch(format!(
            "operate: entity vec {} vs {} entities",
            n_e,
            entity_tokens.n_entities()
        )));
    }
    let pooled = tape.pool_rows(emb_table, entity_tokens.tokens.clone(), entity_tokens.m)?;
    let scores = tape.matvec(pooled, a)?;
    let weighted = tape.hadamard(scores, e)?;
    tape.softmax(weighted)
}

/// Gate blend `c[0]·e_walk + c[1]·e_check`.
pub fn combine<S: Scalar>(tape: &mut Tape<S>, gate: ValueId, e_walk: ValueId, e_check: ValueId) -> Result<ValueId> {
    let g = tape.value(gate);
    if g.len() != 2 {
        return Err(Error::DimMismatch(format!("combine: gate length {}", g.len())));
    }
    let sum = g[0] + g[1];
    let tol = S::from_f64(1e-6);
    if g[0] < -tol || g[1] < -tol || (sum - S::one()).abs() > tol {
        return Err(Error::BadData("combine: gate is not a distribution".into()));
    }
    tape.weighted_sum(gate, &[e_walk, e_check])
}

/// Per-hop record of the walk: post-combination entity weights, the
/// relation distribution and the gate used.
#[derive(Debug, Clone)]
pub struct HopRecord<S> {
    pub entity_weights: Vec<S>,
    pub relation_dist: Vec<S>,
    pub gate: [S; 2],
}

/// The interpretable reasoning path of one traversal.
#[derive(Debug, Clone)]
pub struct HopTrace<S> {
    pub initial: Vec<S>,
    pub hops: Vec<HopRecord<S>>,
}

impl<S: Scalar> HopTrace<S> {
    pub fn final_entities(&self) -> &[S] {
        &self.hops.last().expect("trace has at least one hop").entity_weights
    }
}

/// Execute `H` hops from the indicator vector, recording the trace.
///
/// In full mode each hop blends `next_hop` with `operate` through the
/// predicted gate; with pinned (1, 0) gates (walk-only) the operate
/// branch is skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn traverse<S: Scalar>(
    tape: &mut Tape<S>,
    e1: ValueId,
    heads: &HeadOutputs,
    kg: &ReifiedKg,
    emb_table: ValueId,
    entity_tokens: &EntityTokenMap,
    cfg: &ReasonerConfig,
) -> Result<(ValueId, HopTrace<S>)> {
    if heads.rels.len() != cfg.h_hops || heads.gates.len() != cfg.h_hops {
        return Err(Error::DimMismatch(format!(
            "traverse: {} relation rows / {} gates for H={}",
            heads.rels.len(),
            heads.gates.len(),
            cfg.h_hops
        )));
    }
    let eps = S::from_f64(cfg.eps);
    let mut trace = HopTrace { initial: tape.value(e1).to_vec(), hops: Vec::with_capacity(cfg.h_hops) };
    let mut e = e1;
    for h in 0..cfg.h_hops {
        let e_walk = next_hop(tape, e, heads.rels[h], kg, eps)?;
        let next = match heads.a {
            Some(a) => {
                let e_check = operate(tape, e, a, emb_table, entity_tokens)?;
                combine(tape, heads.gates[h], e_walk, e_check)?
            }
            None => e_walk,
        };
        let g = tape.value(heads.gates[h]);
        trace.hops.push(HopRecord {
            entity_weights: tape.value(next).to_vec(),
            relation_dist: tape.value(heads.rels[h]).to_vec(),
            gate: [g[0], g[1]],
        });
        e = next;
    }
    Ok((e, trace))
}

/// Forward-only walk given per-hop relation distributions; records the
/// same trace shape with pinned walk gates.
pub fn traverse_walk_values<S: Scalar>(
    e1: &[S],
    rels: &[Vec<S>],
    kg: &ReifiedKg,
    eps: S,
) -> Result<(Vec<S>, HopTrace<S>)> {
    let mut trace = HopTrace { initial: e1.to_vec(), hops: Vec::with_capacity(rels.len()) };
    let mut e = e1.to_vec();
    for r in rels {
        e = next_hop_values(&e, r, kg, eps)?;
        trace.hops.push(HopRecord { entity_weights: e.clone(), relation_dist: r.clone(), gate: [S::one(), S::zero()] });
    }
    Ok((e, trace))
}

/// `k` largest-weight entities, ties broken by lower index.
pub fn top_k_entities<S: Scalar>(weights: &[S], k: usize) -> Result<Vec<(usize, S)>> {
    if k == 0 || k > weights.len() {
        return Err(Error::BadConfig(format!("top_k {k} out of range for {} entities", weights.len())));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, weights[i])).collect())
}

/// Head-indexed adjacency for symbolic frontier advancement.
#[derive(Debug, Clone)]
pub struct KgIndex {
    adj: Vec<Vec<(u32, u32)>>,
}

impl KgIndex {
    pub fn new(kg: &ReifiedKg) -> Self {
        let mut adj = vec![Vec::new(); kg.n_entities()];
        for t in kg.triples() {
            adj[t.head as usize].push((t.relation, t.tail));
        }
        Self { adj }
    }
}

/// A ranked candidate relation path.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPath<S> {
    pub relations: Vec<u32>,
    pub score: S,
}

/// Beam search over hop-wise relation choices.
///
/// At each hop only relations with support from the current hard entity
/// frontier are considered; a path's score is the product of the chosen
/// relations' probabilities. Trailing self-loop choices are stripped so
/// shorter paths are representable; when stripping collapses several
/// beam items onto one path the best score is kept.
pub fn extract_paths<S: Scalar>(
    trace: &HopTrace<S>,
    index: &KgIndex,
    to_self: Option<u32>,
    beam_width: usize,
) -> Vec<RankedPath<S>> {
    #[derive(Clone)]
    struct Cand<S> {
        rels: Vec<u32>,
        score: S,
        frontier: BTreeSet<u32>,
    }

    let start: BTreeSet<u32> =
        trace.initial.iter().enumerate().filter(|(_, w)| **w > S::zero()).map(|(i, _)| i as u32).collect();
    if start.is_empty() {
        return Vec::new();
    }

    let mut beam = vec![Cand { rels: Vec::new(), score: S::one(), frontier: start }];
    for hop in &trace.hops {
        let mut next: Vec<Cand<S>> = Vec::new();
        for cand in &beam {
            let mut allowed: BTreeSet<u32> = BTreeSet::new();
            for &e in &cand.frontier {
                for &(r, _) in &index.adj[e as usize] {
                    allowed.insert(r);
                }
            }
            for r in allowed {
                let mut frontier = BTreeSet::new();
                for &e in &cand.frontier {
                    for &(rr, t) in &index.adj[e as usize] {
                        if rr == r {
                            frontier.insert(t);
                        }
                    }
                }
                let mut rels = cand.rels.clone();
                rels.push(r);
                next.push(Cand { rels, score: cand.score * hop.relation_dist[r as usize], frontier });
            }
        }
        next.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.rels.cmp(&b.rels))
        });
        next.truncate(beam_width);
        beam = next;
    }

    // Strip trailing self-loops and keep the best score per stripped path.
    let mut best: Vec<RankedPath<S>> = Vec::new();
    for cand in beam {
        let mut rels = cand.rels;
        if let Some(ts) = to_self {
            while rels.last() == Some(&ts) {
                rels.pop();
            }
        }
        match best.iter_mut().find(|p| p.relations == rels) {
            Some(p) if p.score < cand.score => p.score = cand.score,
            Some(_) => {}
            None => best.push(RankedPath { relations: rels, score: cand.score }),
        }
    }
    best.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.relations.cmp(&b.relations))
    });
    best
}

fn top_n<S: Scalar>(v: &[S], n: usize) -> Vec<(usize, S)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i, v[i])).collect()
}

/// Human-readable trace: one hop per line with the top-3 relations,
/// top-3 entities and the gate. Walk-only traces omit the gate column.
pub fn format_trace<S: Scalar>(
    trace: &HopTrace<S>,
    entities: &Vocab,
    relations: &Vocab,
    show_gate: bool,
) -> String {
    let mut out = String::new();
    for (h, hop) in trace.hops.iter().enumerate() {
        let rels: Vec<String> = top_n(&hop.relation_dist, 3)
            .into_iter()
            .map(|(i, p)| format!("{}:{:.3}", relations.raw_name(i), p.to_f64()))
            .collect();
        let ents: Vec<String> = top_n(&hop.entity_weights, 3)
            .into_iter()
            .map(|(i, w)| format!("{}:{:.3}", entities.raw_name(i), w.to_f64()))
            .collect();
        out.push_str(&format!("hop {}\trels {}\tentities {}", h + 1, rels.join(" "), ents.join(" ")));
        if show_gate {
            out.push_str(&format!("\tgate walk={:.3} check={:.3}", hop.gate[0].to_f64(), hop.gate[1].to_f64()));
        }
        out.push('\n');
    }
    out
}
