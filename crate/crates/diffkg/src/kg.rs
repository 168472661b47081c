//! Reified sparse knowledge-graph store.
//!
//! A triple store becomes three triple-indexed one-hot matrices: row `k`
//! of the head / relation / tail matrix selects the head entity, relation
//! and tail entity of triple `k`. Each matrix is stored as one column
//! index per row, so the whole structure is three `u32` arrays and memory
//! grows linearly in the triple count.

use crate::{Error, Result, Scalar};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

/// Name of the synthetic self-loop relation appended by [`add_to_self`].
pub const TO_SELF: &str = "toself";

/// One triple as vocabulary indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

/// Bidirectional name <-> dense index map.
///
/// Lookup keys are normalized (lowercased, internal whitespace collapsed);
/// the first-seen raw spelling is retained for display.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercase and collapse runs of whitespace to a single space.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_space = false;
    for ch in name.trim().chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
        }
    }
    out
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a name (normalizing first), returning its index.
    pub fn intern(&mut self, raw: &str) -> usize {
        let key = normalize_name(raw);
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(key.clone(), i);
        self.names.push(key);
        self.raw.push(raw.trim().to_string());
        i
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_name(name)).copied()
    }

    /// Normalized name for an index.
    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// First-seen raw spelling for an index.
    pub fn raw_name(&self, index: usize) -> &str {
        &self.raw[index]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    /// Content hash over the normalized names in index order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

/// Sparse 0/1 matrix whose rows each contain exactly one `1`.
#[derive(Debug, Clone)]
pub struct OneHotRows {
    pub cols: Arc<Vec<u32>>,
    pub n_cols: usize,
}

impl OneHotRows {
    pub fn new(cols: Vec<u32>, n_cols: usize) -> Result<Self> {
        for &c in &cols {
            if c as usize >= n_cols {
                return Err(Error::IndexOutOfRange { index: c as usize, bound: n_cols });
            }
        }
        Ok(Self { cols: Arc::new(cols), n_cols })
    }

    pub fn n_rows(&self) -> usize {
        self.cols.len()
    }

    /// Stored nonzeros (one per row).
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Dense reconstruction, for oracles and small checks.
    pub fn to_dense<S: Scalar>(&self) -> Vec<Vec<S>> {
        let mut m = vec![vec![S::zero(); self.n_cols]; self.n_rows()];
        for (k, &c) in self.cols.iter().enumerate() {
            m[k][c as usize] = S::one();
        }
        m
    }
}

/// The three one-hot matrices of the reified KG plus dimensions.
#[derive(Debug, Clone)]
pub struct ReifiedKg {
    pub m_h: OneHotRows,
    pub m_r: OneHotRows,
    pub m_t: OneHotRows,
}

impl ReifiedKg {
    pub fn n_triples(&self) -> usize {
        self.m_h.n_rows()
    }

    pub fn n_entities(&self) -> usize {
        self.m_h.n_cols
    }

    pub fn n_relations(&self) -> usize {
        self.m_r.n_cols
    }

    /// Total stored nonzeros across the three matrices.
    pub fn nnz(&self) -> usize {
        self.m_h.nnz() + self.m_r.nnz() + self.m_t.nnz()
    }

    /// Heap bytes held by the matrix storage.
    pub fn heap_bytes(&self) -> usize {
        (self.m_h.cols.len() + self.m_r.cols.len() + self.m_t.cols.len()) * std::mem::size_of::<u32>()
    }

    /// Triple for row `k`, decoded from the one-hot rows.
    pub fn triple(&self, k: usize) -> Triple {
        Triple {
            head: self.m_h.cols[k],
            relation: self.m_r.cols[k],
            tail: self.m_t.cols[k],
        }
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        (0..self.n_triples()).map(|k| self.triple(k))
    }
}

fn check_name(name: &str, line: usize) -> Result<()> {
    if name.contains('\t') || name.contains('\n') {
        Err(Error::Malformed { line, msg: format!("illegal character in name {name:?}") })
    } else if normalize_name(name).is_empty() {
        Err(Error::Malformed { line, msg: "empty name".into() })
    } else {
        Ok(())
    }
}

/// Build entity and relation vocabularies from string triples.
///
/// Indices are assigned in first-appearance order (heads and tails share
/// the entity vocabulary).
pub fn build_vocabs(triples: &[(String, String, String)]) -> Result<(Vocab, Vocab)> {
    if triples.is_empty() {
        return Err(Error::EmptyKg);
    }
    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    for (i, (h, r, t)) in triples.iter().enumerate() {
        check_name(h, i + 1)?;
        check_name(r, i + 1)?;
        check_name(t, i + 1)?;
        entities.intern(h);
        relations.intern(r);
        entities.intern(t);
    }
    Ok((entities, relations))
}

/// Resolve string triples against vocabs and drop duplicates, keeping
/// first-appearance order.
pub fn resolve_and_dedup(
    triples: &[(String, String, String)],
    entities: &Vocab,
    relations: &Vocab,
) -> Result<Vec<Triple>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (h, r, t) in triples {
        let head = entities.lookup(h).ok_or_else(|| Error::UnknownEntity(h.clone()))? as u32;
        let relation = relations.lookup(r).ok_or_else(|| Error::UnknownRelation(r.clone()))? as u32;
        let tail = entities.lookup(t).ok_or_else(|| Error::UnknownEntity(t.clone()))? as u32;
        let triple = Triple { head, relation, tail };
        if seen.insert(triple) {
            out.push(triple);
        }
    }
    Ok(out)
}

/// Encode index triples as the three one-hot matrices. Row order equals
/// input order.
pub fn reify(triples: &[Triple], n_entities: usize, n_relations: usize) -> Result<ReifiedKg> {
    let mut heads = Vec::with_capacity(triples.len());
    let mut rels = Vec::with_capacity(triples.len());
    let mut tails = Vec::with_capacity(triples.len());
    for t in triples {
        if t.head as usize >= n_entities {
            return Err(Error::IndexOutOfRange { index: t.head as usize, bound: n_entities });
        }
        if t.relation as usize >= n_relations {
            return Err(Error::IndexOutOfRange { index: t.relation as usize, bound: n_relations });
        }
        if t.tail as usize >= n_entities {
            return Err(Error::IndexOutOfRange { index: t.tail as usize, bound: n_entities });
        }
        heads.push(t.head);
        rels.push(t.relation);
        tails.push(t.tail);
    }
    Ok(ReifiedKg {
        m_h: OneHotRows::new(heads, n_entities)?,
        m_r: OneHotRows::new(rels, n_relations)?,
        m_t: OneHotRows::new(tails, n_entities)?,
    })
}

/// Convenience: vocabs + dedup + reify in one step.
pub fn ingest(triples: &[(String, String, String)]) -> Result<(ReifiedKg, Vocab, Vocab)> {
    let (entities, relations) = build_vocabs(triples)?;
    let resolved = resolve_and_dedup(triples, &entities, &relations)?;
    let kg = reify(&resolved, entities.len(), relations.len())?;
    Ok((kg, entities, relations))
}

/// Append one self-loop triple `(e, ToSelf, e)` per entity.
///
/// Self-loops go after the original triples so existing row indices stay
/// stable. Returns the augmented KG, the extended relation vocab and the
/// index of the new relation.
pub fn add_to_self(kg: &ReifiedKg, relations: &Vocab) -> Result<(ReifiedKg, Vocab, u32)> {
    if relations.lookup(TO_SELF).is_some() {
        return Err(Error::AlreadyAugmented);
    }
    let mut relations = relations.clone();
    let to_self = relations.intern("ToSelf") as u32;
    let n_e = kg.n_entities();

    let mut heads = kg.m_h.cols.as_ref().clone();
    let mut rels = kg.m_r.cols.as_ref().clone();
    let mut tails = kg.m_t.cols.as_ref().clone();
    for e in 0..n_e as u32 {
        heads.push(e);
        rels.push(to_self);
        tails.push(e);
    }
    let kg = ReifiedKg {
        m_h: OneHotRows::new(heads, n_e)?,
        m_r: OneHotRows::new(rels, relations.len())?,
        m_t: OneHotRows::new(tails, n_e)?,
    };
    Ok((kg, relations, to_self))
}

/// Indicator vector over entities for a set of names.
pub fn initial_entity_vector<S: Scalar>(names: &[String], entities: &Vocab, n_entities: usize) -> Result<Vec<S>> {
    if names.is_empty() {
        return Err(Error::UnknownEntity("(empty initial entity list)".into()));
    }
    let mut v = vec![S::zero(); n_entities];
    let mut missing = Vec::new();
    for name in names {
        match entities.lookup(name) {
            Some(i) => v[i] = S::one(),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnknownEntity(missing.join(", ")));
    }
    Ok(v)
}

/// Reorder triple rows: row `i` of the output is row `perm[i]` of the
/// input, applied identically to all three matrices.
pub fn permute_triples(kg: &ReifiedKg, perm: &[usize]) -> Result<ReifiedKg> {
    let n = kg.n_triples();
    if perm.len() != n {
        return Err(Error::BadPermutation);
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::BadPermutation);
        }
        seen[p] = true;
    }
    let gather = |cols: &[u32]| perm.iter().map(|&p| cols[p]).collect::<Vec<_>>();
    Ok(ReifiedKg {
        m_h: OneHotRows::new(gather(&kg.m_h.cols), kg.n_entities())?,
        m_r: OneHotRows::new(gather(&kg.m_r.cols), kg.n_relations())?,
        m_t: OneHotRows::new(gather(&kg.m_t.cols), kg.n_entities())?,
    })
}

/// Parse a triple file: one `head TAB relation TAB tail` per line, `#`
/// comment lines and blank lines ignored.
pub fn parse_triple_file(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path)?;
    parse_triples(&text)
}

pub fn parse_triples(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed {
                line: line_no,
                msg: format!("expected 3 TAB-separated fields, got {}", fields.len()),
            });
        }
        for f in &fields {
            check_name(f, line_no)?;
        }
        out.push((fields[0].to_string(), fields[1].to_string(), fields[2].to_string()));
    }
    if out.is_empty() {
        return Err(Error::EmptyKg);
    }
    Ok(out)
}

/// Write triples as the TSV triple-file format.
pub fn write_triple_file(path: &Path, triples: &[(String, String, String)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (h, r, t) in triples {
        writeln!(f, "{h}\t{r}\t{t}")?;
    }
    Ok(())
}
