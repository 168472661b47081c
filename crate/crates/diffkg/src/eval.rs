//! Evaluation loop shared by training (validation) and the CLI.
//!
//! Runs greedy prediction per example, scores the generated text against
//! the reference with the order-free metrics, and ranks extracted
//! relation paths against the gold path when one is present. Examples
//! are scored in parallel but aggregated in input order, so reports are
//! deterministic.

use crate::data::{prepare, DialogueExample};
use crate::kg::permute_triples;
use crate::metrics::{corpus_bleu, entity_f1, exact_match, path_at_k, token_f1, EvalReport, ExampleMetrics};
use crate::model::{predict, Assets, Model};
use crate::reasoner::{extract_paths, KgIndex};
use crate::text::tokenize;
use crate::{Result, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Scoring knobs.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// `k` for path@k (path@1 is always reported too).
    pub k: usize,
    /// Beam width for path extraction.
    pub beam_width: usize,
    /// Maximum n-gram order for BLEU.
    pub bleu_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: 5, beam_width: 10, bleu_n: 4 }
    }
}

/// Evaluate a model over a dialogue split.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    assets: &Assets,
    examples: &[DialogueExample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let index = KgIndex::new(&assets.kg);
    let scored: Vec<Result<(ExampleMetrics, Vec<String>, Vec<String>)>> = examples
        .par_iter()
        .map(|ex| {
            let prep = prepare::<S>(ex, assets)?;
            let pred = predict(model, assets, &prep)?;
            let pred_tokens = tokenize(&pred.text);
            let gold_tokens = tokenize(&ex.response);
            let (p1, pk) = match &prep.gold_path {
                Some(gold) => {
                    let ranked =
                        extract_paths(&pred.trace, &index, Some(assets.to_self), opts.beam_width.max(opts.k));
                    let seqs: Vec<Vec<u32>> = ranked.into_iter().map(|p| p.relations).collect();
                    (Some(path_at_k(&seqs, gold, 1)), Some(path_at_k(&seqs, gold, opts.k)))
                }
                None => (None, None),
            };
            let m = ExampleMetrics {
                exact_match: exact_match(&pred_tokens, &gold_tokens),
                token_f1: token_f1(&pred_tokens, &gold_tokens),
                entity_f1: entity_f1(&pred_tokens, &gold_tokens, &assets.entities),
                path_at_1: p1,
                path_at_k: pk,
                reasoning_type: ex.reasoning_type.clone(),
                domain: ex.domain.clone(),
            };
            Ok((m, pred_tokens, gold_tokens))
        })
        .collect();

    let mut report = EvalReport { k: opts.k, ..Default::default() };
    let mut preds = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for item in scored {
        let (m, p, g) = item?;
        report.push(m);
        preds.push(p);
        refs.push(g);
    }
    report.bleu = corpus_bleu(&preds, &refs, opts.bleu_n);
    Ok(report)
}

/// Assets with the KG's triple rows randomly permuted; evaluation over
/// the result must match the unpermuted KG.
pub fn shuffled_assets(assets: &Assets, seed: u64) -> Result<Assets> {
    let mut perm: Vec<usize> = (0..assets.kg.n_triples()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let kg = permute_triples(&assets.kg, &perm)?;
    let mut out = assets.clone();
    out.kg = kg;
    Ok(out)
}
