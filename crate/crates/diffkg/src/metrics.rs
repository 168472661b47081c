//! Evaluation metrics and the aggregated report.
//!
//! Response quality is scored order-free: exact match compares token
//! multisets, token F1 is multiset precision/recall, entity F1 runs a
//! longest-match scan for KG entity mentions, BLEU is corpus-level with
//! the standard brevity penalty, and path@k checks whether the gold
//! relation path appears in the top-k extracted paths.

use crate::kg::Vocab;
use crate::text::tokenize;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

/// Order-free exact match: the two token multisets are equal.
pub fn exact_match(pred: &[String], gold: &[String]) -> bool {
    if pred.len() != gold.len() {
        return false;
    }
    let mut a = pred.to_vec();
    let mut b = gold.to_vec();
    a.sort();
    b.sort();
    a == b
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset token F1.
pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pc = counts(pred);
    let gc = counts(gold);
    let overlap: usize = pc.iter().map(|(t, &c)| c.min(*gc.get(t).unwrap_or(&0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Entity mentions in a token sequence via greedy longest match against
/// the entity vocabulary's tokenized names.
pub fn find_entity_mentions(tokens: &[String], entities: &Vocab) -> Vec<usize> {
    // Tokenized entity names, longest first per leading token.
    let mut table: HashMap<String, Vec<(Vec<String>, usize)>> = HashMap::new();
    for i in 0..entities.len() {
        let name_tokens = tokenize(entities.name(i));
        if let Some(first) = name_tokens.first() {
            table.entry(first.clone()).or_default().push((name_tokens.clone(), i));
        }
    }
    for cands in table.values_mut() {
        cands.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    }

    let mut found = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut advanced = false;
        if let Some(cands) = table.get(tokens[pos].as_str()) {
            for (name_tokens, idx) in cands {
                let end = pos + name_tokens.len();
                if end <= tokens.len() && tokens[pos..end].iter().zip(name_tokens).all(|(a, b)| a == b) {
                    found.push(*idx);
                    pos = end;
                    advanced = true;
                    break;
                }
            }
        }
        if !advanced {
            pos += 1;
        }
    }
    found
}

/// F1 over entity-mention multisets found in the two token sequences.
pub fn entity_f1(pred: &[String], gold: &[String], entities: &Vocab) -> f64 {
    let pm = find_entity_mentions(pred, entities);
    let gm = find_entity_mentions(gold, entities);
    if pm.is_empty() && gm.is_empty() {
        return 1.0;
    }
    if pm.is_empty() || gm.is_empty() {
        return 0.0;
    }
    let mut pc: HashMap<usize, usize> = HashMap::new();
    for &e in &pm {
        *pc.entry(e).or_insert(0) += 1;
    }
    let mut gc: HashMap<usize, usize> = HashMap::new();
    for &e in &gm {
        *gc.entry(e).or_insert(0) += 1;
    }
    let overlap: usize = pc.iter().map(|(e, &c)| c.min(*gc.get(e).unwrap_or(&0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pm.len() as f64;
    let r = overlap as f64 / gm.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with uniform weights over 1..=`max_n` grams and the
/// standard brevity penalty. Any order with zero corpus-wide matches
/// drives the score to zero.
pub fn corpus_bleu(preds: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    assert_eq!(preds.len(), refs.len(), "corpus_bleu: prediction/reference count mismatch");
    if preds.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (p, r) in preds.iter().zip(refs) {
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let pc = ngram_counts(p, n);
            let rc = ngram_counts(r, n);
            for (g, &c) in &pc {
                matched[n - 1] += c.min(*rc.get(g).unwrap_or(&0));
            }
            total[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if pred_len >= ref_len || pred_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    bp * precision
}

/// Whether the gold relation path is among the top `k` ranked paths.
pub fn path_at_k(ranked: &[Vec<u32>], gold: &[u32], k: usize) -> bool {
    ranked.iter().take(k).any(|p| p == gold)
}

/// Running mean.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Metric aggregates for one slice of the data.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SliceReport {
    pub n: usize,
    pub exact_match: Mean,
    pub token_f1: Mean,
    pub entity_f1: Mean,
    pub path_at_1: Mean,
    pub path_at_k: Mean,
}

impl SliceReport {
    fn push(&mut self, m: &ExampleMetrics) {
        self.n += 1;
        self.exact_match.push(if m.exact_match { 1.0 } else { 0.0 });
        self.token_f1.push(m.token_f1);
        self.entity_f1.push(m.entity_f1);
        if let Some(p1) = m.path_at_1 {
            self.path_at_1.push(if p1 { 1.0 } else { 0.0 });
        }
        if let Some(pk) = m.path_at_k {
            self.path_at_k.push(if pk { 1.0 } else { 0.0 });
        }
    }
}

/// Per-example scores fed into the report.
#[derive(Debug, Clone)]
pub struct ExampleMetrics {
    pub exact_match: bool,
    pub token_f1: f64,
    pub entity_f1: f64,
    /// None when the example carries no gold path.
    pub path_at_1: Option<bool>,
    pub path_at_k: Option<bool>,
    pub reasoning_type: Option<String>,
    pub domain: Option<String>,
}

/// Aggregated evaluation result with per-type and per-domain breakdowns.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub overall: SliceReport,
    pub by_type: BTreeMap<String, SliceReport>,
    pub by_domain: BTreeMap<String, SliceReport>,
    pub bleu: f64,
    pub k: usize,
}

impl EvalReport {
    pub fn push(&mut self, m: ExampleMetrics) {
        self.overall.push(&m);
        if let Some(t) = &m.reasoning_type {
            self.by_type.entry(t.clone()).or_default().push(&m);
        }
        if let Some(d) = &m.domain {
            self.by_domain.entry(d.clone()).or_default().push(&m);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// TSV: one row per slice, overall first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("slice\tn\tem\ttoken_f1\tentity_f1\tbleu\tpath@1\tpath@k\n");
        let row = |name: &str, s: &SliceReport, bleu: &str| {
            format!(
                "{name}\t{}\t{:.4}\t{:.4}\t{:.4}\t{bleu}\t{:.4}\t{:.4}\n",
                s.n,
                s.exact_match.value(),
                s.token_f1.value(),
                s.entity_f1.value(),
                s.path_at_1.value(),
                s.path_at_k.value()
            )
        };
        out.push_str(&row("overall", &self.overall, &format!("{:.4}", self.bleu)));
        for (t, s) in &self.by_type {
            out.push_str(&row(&format!("type:{t}"), s, "-"));
        }
        for (d, s) in &self.by_domain {
            out.push_str(&row(&format!("domain:{d}"), s, "-"));
        }
        out
    }
}
