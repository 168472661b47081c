//! Data ingestion: dialogue corpora, SMD-style KG construction from
//! annotated tables, and a synthetic multi-hop reasoning dataset
//! generator.
//!
//! The synthetic KG is a homogeneous functional graph: every
//! `(entity, chain relation)` pair has at most one tail, so a relation
//! multiset walked in its canonical (index-sorted) order has a unique
//! answer. Questions always present relations in canonical order, which
//! keeps the order-free history encoding unambiguous. Questions come in
//! four reasoning types (inform, selection, true_false, extraction)
//! mixed by configurable weights, and every label is re-derivable from
//! the KG symbolically.

use crate::kg::Vocab;
use crate::model::{Assets, PreparedExample};
use crate::{Error, Result, Scalar};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

/// One dialogue example in the line-oriented JSON corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueExample {
    /// Utterances in order, alternating speakers.
    pub history: Vec<String>,
    pub response: String,
    pub initial_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_path: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl DialogueExample {
    fn validate(&self, line: usize) -> Result<()> {
        if self.history.is_empty() || self.history.iter().all(|u| u.trim().is_empty()) {
            return Err(Error::Malformed { line, msg: "empty history".into() });
        }
        if self.response.trim().is_empty() {
            return Err(Error::Malformed { line, msg: "empty response".into() });
        }
        if self.initial_entities.is_empty() {
            return Err(Error::Malformed { line, msg: "no initial entities".into() });
        }
        Ok(())
    }

    /// Flattened history text.
    pub fn history_text(&self) -> String {
        self.history.join(" ")
    }
}

/// Parse a JSON-lines dialogue corpus, reporting the offending line on
/// error.
pub fn parse_dialogues(text: &str) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: DialogueExample = serde_json::from_str(line)
            .map_err(|e| Error::Malformed { line: line_no, msg: e.to_string() })?;
        ex.validate(line_no)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dialogues(path: &Path) -> Result<Vec<DialogueExample>> {
    parse_dialogues(&std::fs::read_to_string(path)?)
}

pub fn save_dialogues(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::BadData(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Resolve one dialogue example against built assets.
pub fn prepare<S: Scalar>(ex: &DialogueExample, assets: &Assets) -> Result<PreparedExample<S>> {
    let history_tokens = assets.tokens.encode(&ex.history_text());
    if history_tokens.is_empty() {
        return Err(Error::BadData("history tokenizes to nothing".into()));
    }
    let e1 = crate::kg::initial_entity_vector(&ex.initial_entities, &assets.entities, assets.kg.n_entities())?;
    let target_tokens = assets.tokens.encode(&ex.response);
    let gold_path = match &ex.gold_path {
        Some(rels) => {
            let mut path = Vec::with_capacity(rels.len());
            for r in rels {
                path.push(assets.relations.lookup(r).ok_or_else(|| Error::UnknownRelation(r.clone()))? as u32);
            }
            Some(path)
        }
        None => None,
    };
    Ok(PreparedExample { history_tokens, e1, target_tokens, gold_path })
}

// ---------------------------------------------------------------------
// SMD-style KG construction
// ---------------------------------------------------------------------

/// SMD domain of one table record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmdDomain {
    Schedule,
    Navigation,
    Weather,
}

impl SmdDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            SmdDomain::Schedule => "schedule",
            SmdDomain::Navigation => "navigation",
            SmdDomain::Weather => "weather",
        }
    }
}

/// One annotated table item: a domain plus attribute -> value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmdTableRecord {
    pub domain: SmdDomain,
    pub attributes: BTreeMap<String, String>,
}

/// (attribute key, forward relation, inverse relation) per domain.
/// Weather attributes hang off a generated `ReportID<n>` entity.
const SCHEDULE_ATTRS: &[(&str, &str, &str)] = &[
    ("time", "HasTime", "IsTimeOf"),
    ("date", "HasDate", "IsDateOf"),
    ("party", "HasParty", "IsPartyOf"),
    ("room", "HasRoom", "IsRoomOf"),
    ("agenda", "HasAgenda", "IsAgendaOf"),
];
const NAVIGATION_ATTRS: &[(&str, &str, &str)] = &[
    ("address", "HasAddress", "IsAddressOf"),
    ("type", "HasType", "IsTypeOf"),
    ("traffic", "HasTraffic", "IsTrafficOf"),
    ("distance", "HasDistance", "IsDistanceFrom"),
];
const WEATHER_ATTRS: &[(&str, &str, &str)] = &[
    ("location", "HasLocation", "IsLocationOf"),
    ("date", "HasDate", "IsDateOf"),
    ("weather", "HasWeather", "IsWeatherOf"),
    ("low_temp", "HasLowTemp", "IsLowTempOf"),
    ("high_temp", "HasHighTemp", "IsHighTempOf"),
];

/// The full (domain, relation) inventory: 29 entries. `HasDate` /
/// `IsDateOf` appear under both schedule and weather; weather adds the
/// unpaired `IsEqualTo` linking reports that share a location.
pub fn smd_relation_inventory() -> Vec<(&'static str, &'static str)> {
    let mut out = Vec::new();
    for &(_, f, i) in SCHEDULE_ATTRS {
        out.push(("schedule", f));
        out.push(("schedule", i));
    }
    for &(_, f, i) in NAVIGATION_ATTRS {
        out.push(("navigation", f));
        out.push(("navigation", i));
    }
    for &(_, f, i) in WEATHER_ATTRS {
        out.push(("weather", f));
        out.push(("weather", i));
    }
    out.push(("weather", "IsEqualTo"));
    out
}

/// Build string triples from annotated table records.
///
/// Schedule and navigation items map directly to
/// `(subject, HasAttr, value)` plus the materialized inverse. Weather
/// records each get a fresh `ReportID<n>` entity carrying the report's
/// location, date and the split weather / low / high attributes;
/// reports sharing a location are linked pairwise with `IsEqualTo`.
pub fn build_smd_kg(records: &[SmdTableRecord]) -> Result<Vec<(String, String, String)>> {
    if records.is_empty() {
        return Err(Error::EmptyKg);
    }
    let mut out = Vec::new();
    let mut report_no = 0usize;
    let mut reports_by_location: HashMap<String, Vec<String>> = HashMap::new();
    for rec in records {
        match rec.domain {
            SmdDomain::Schedule | SmdDomain::Navigation => {
                let (subject_key, attrs) = match rec.domain {
                    SmdDomain::Schedule => ("event", SCHEDULE_ATTRS),
                    _ => ("poi", NAVIGATION_ATTRS),
                };
                let subject = rec
                    .attributes
                    .get(subject_key)
                    .ok_or_else(|| Error::BadData(format!("{} record missing {subject_key:?}", rec.domain.as_str())))?;
                for (key, value) in &rec.attributes {
                    if key == subject_key {
                        continue;
                    }
                    let (_, fwd, inv) = attrs
                        .iter()
                        .find(|(a, _, _)| a == key)
                        .ok_or_else(|| Error::BadData(format!("unknown {} attribute {key:?}", rec.domain.as_str())))?;
                    out.push((subject.clone(), (*fwd).to_string(), value.clone()));
                    out.push((value.clone(), (*inv).to_string(), subject.clone()));
                }
            }
            SmdDomain::Weather => {
                report_no += 1;
                let report = format!("ReportID{report_no}");
                for (key, value) in &rec.attributes {
                    let (_, fwd, inv) = WEATHER_ATTRS
                        .iter()
                        .find(|(a, _, _)| a == key)
                        .ok_or_else(|| Error::BadData(format!("unknown weather attribute {key:?}")))?;
                    out.push((report.clone(), (*fwd).to_string(), value.clone()));
                    out.push((value.clone(), (*inv).to_string(), report.clone()));
                }
                if let Some(loc) = rec.attributes.get("location") {
                    let siblings = reports_by_location.entry(loc.clone()).or_default();
                    for other in siblings.iter() {
                        out.push((report.clone(), "IsEqualTo".to_string(), other.clone()));
                        out.push((other.clone(), "IsEqualTo".to_string(), report.clone()));
                    }
                    siblings.push(report.clone());
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Synthetic dataset generator
// ---------------------------------------------------------------------

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total entity count (a fraction become numeric value entities).
    pub n_entities: usize,
    pub n_relations: usize,
    /// Target triple count (chain + value triples).
    pub n_triples: usize,
    pub hops_max: usize,
    pub n_examples: usize,
    /// Weights for inform / selection / true_false / extraction.
    pub reasoning_mix: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_relations: 8,
            n_triples: 1200,
            hops_max: 3,
            n_examples: 4000,
            reasoning_mix: [0.70, 0.10, 0.10, 0.10],
        }
    }
}

/// Number of value relations used by selection questions.
const N_VALUE_RELS: usize = 3;

/// Generated KG plus train/valid/test splits (75 / 12.5 / 12.5).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub triples: Vec<(String, String, String)>,
    pub train: Vec<DialogueExample>,
    pub valid: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

struct SynthGraph {
    /// Regular entities (chain heads and tails).
    core: Vec<String>,
    /// Numeric value entities, alongside their integer values.
    numeric: Vec<(String, i64)>,
    /// Chain relation names, index order is the canonical path order.
    chain_rels: Vec<String>,
    /// (head, rel index) -> tail over chain triples.
    chain: HashMap<(String, usize), String>,
    /// core entity -> per value relation (numeric entity, value).
    values: HashMap<String, Vec<(String, String, i64)>>,
    triples: Vec<(String, String, String)>,
}

fn build_graph(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthGraph> {
    if cfg.hops_max == 0 {
        return Err(Error::BadConfig("hops_max must be at least 1".into()));
    }
    if cfg.n_relations < N_VALUE_RELS + 2 {
        return Err(Error::BadConfig(format!(
            "n_relations={} too small: need at least 2 chain + {N_VALUE_RELS} value relations",
            cfg.n_relations
        )));
    }
    let n_numeric = (cfg.n_entities / 8).max(N_VALUE_RELS + 1);
    if cfg.n_entities < n_numeric + 8 {
        return Err(Error::BadConfig(format!("n_entities={} too small", cfg.n_entities)));
    }
    let n_core = cfg.n_entities - n_numeric;
    let value_triples = n_core * N_VALUE_RELS;
    if cfg.n_triples < value_triples + n_core {
        return Err(Error::BadConfig(format!(
            "n_triples={} cannot cover {value_triples} value triples plus one chain edge per entity",
            cfg.n_triples
        )));
    }

    let core: Vec<String> = (0..n_core).map(|i| format!("ent{i}")).collect();
    let mut nums: Vec<i64> = Vec::with_capacity(n_numeric);
    while nums.len() < n_numeric {
        let v = rng.random_range(0..(10 * n_numeric as i64));
        if !nums.contains(&v) {
            nums.push(v);
        }
    }
    let numeric: Vec<(String, i64)> = nums.into_iter().map(|v| (format!("num{v}"), v)).collect();
    let n_chain_rels = cfg.n_relations - N_VALUE_RELS;
    let chain_rels: Vec<String> = (0..n_chain_rels).map(|i| format!("rel{i}")).collect();
    let value_rels: Vec<String> = (0..N_VALUE_RELS).map(|i| format!("val{i}")).collect();

    // Chain grid: shuffle all (entity, relation) cells, keep one edge per
    // entity first, then fill up to the chain budget.
    let mut grid: Vec<(usize, usize)> = (0..n_core)
        .flat_map(|e| (0..n_chain_rels).map(move |r| (e, r)))
        .collect();
    grid.shuffle(rng);
    let budget = (cfg.n_triples - value_triples).min(grid.len());
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(budget);
    let mut covered: HashSet<usize> = HashSet::new();
    let mut deferred = Vec::new();
    for cell in grid {
        if covered.insert(cell.0) {
            kept.push(cell);
        } else {
            deferred.push(cell);
        }
    }
    for cell in deferred {
        if kept.len() >= budget {
            break;
        }
        kept.push(cell);
    }

    let mut chain = HashMap::new();
    let mut triples = Vec::new();
    for (e, r) in kept {
        let head = core[e].clone();
        let tail = core[rng.random_range(0..n_core)].clone();
        chain.insert((head.clone(), r), tail.clone());
        triples.push((head, chain_rels[r].clone(), tail));
    }

    // Values: every core entity gets one numeric tail per value relation,
    // distinct within the entity.
    let mut values: HashMap<String, Vec<(String, String, i64)>> = HashMap::new();
    for e in &core {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < N_VALUE_RELS {
            let i = rng.random_range(0..numeric.len());
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        // Values increase with the relation index for every entity, so a
        // min/max over named value relations resolves to the lowest /
        // highest named index consistently across the graph.
        picked.sort_by_key(|&i| numeric[i].1);
        let mut entries = Vec::new();
        for (rel, &i) in value_rels.iter().zip(&picked) {
            let (name, v) = numeric[i].clone();
            triples.push((e.clone(), rel.clone(), name.clone()));
            entries.push((rel.clone(), name, v));
        }
        values.insert(e.clone(), entries);
    }

    Ok(SynthGraph { core, numeric, chain_rels, chain, values, triples })
}

/// Symbolically follow a relation path over string triples from a start
/// entity; returns every entity reachable by exactly that path.
pub fn execute_path(
    triples: &[(String, String, String)],
    start: &str,
    path: &[String],
) -> Vec<String> {
    let mut frontier: HashSet<&str> = [start].into();
    for rel in path {
        let mut next = HashSet::new();
        for (h, r, t) in triples {
            if r == rel && frontier.contains(h.as_str()) {
                next.insert(t.as_str());
            }
        }
        frontier = next;
    }
    let mut out: Vec<String> = frontier.into_iter().map(|s| s.to_string()).collect();
    out.sort();
    out
}

fn weighted_type(mix: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, &w) in mix.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    3
}

const QUESTION_TEMPLATES: [&str; 2] = ["what is the", "give me the"];
/// Extraction prompts are deliberately disjoint from
/// [`QUESTION_TEMPLATES`]: a one-hop lookup question and a
/// missing-relation question about the same subject would otherwise be
/// word-for-word identical, making the response type undecidable from
/// the text.
const EXTRACTION_TEMPLATES: [&str; 2] = ["check whether any", "confirm the missing"];

/// Generate the synthetic KG and dataset. Deterministic given the seed;
/// examples are unique by history text and split 75 / 12.5 / 12.5.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if cfg.n_examples < 8 {
        return Err(Error::BadConfig("n_examples must be at least 8".into()));
    }
    if cfg.reasoning_mix.iter().any(|&w| w < 0.0) || cfg.reasoning_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::BadConfig("reasoning_mix must be nonnegative with positive sum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = build_graph(cfg, &mut rng)?;
    let n_core = g.core.len();

    let mut examples: Vec<DialogueExample> = Vec::with_capacity(cfg.n_examples);
    let mut seen: HashSet<String> = HashSet::new();
    let mut tf_flip = false;
    let mut attempts = 0usize;
    let max_attempts = cfg.n_examples.saturating_mul(200);
    while examples.len() < cfg.n_examples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::BadConfig(format!(
                "unsatisfiable synthetic config: only {} distinct examples found",
                examples.len()
            )));
        }
        let start = g.core[rng.random_range(0..n_core)].clone();
        let template = QUESTION_TEMPLATES[rng.random_range(0..QUESTION_TEMPLATES.len())];
        let ex = match weighted_type(&cfg.reasoning_mix, &mut rng) {
            0 => {
                // Inform: a canonically ordered relation multiset whose
                // chain exists end to end.
                let h = rng.random_range(1..=cfg.hops_max);
                let mut rels: Vec<usize> =
                    (0..h).map(|_| rng.random_range(0..g.chain_rels.len())).collect();
                rels.sort_unstable();
                let mut entity = start.clone();
                let mut ok = true;
                for &r in &rels {
                    match g.chain.get(&(entity.clone(), r)) {
                        Some(t) => entity = t.clone(),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let path: Vec<String> = rels.iter().map(|&r| g.chain_rels[r].clone()).collect();
                DialogueExample {
                    history: vec![format!("{template} {} of {start} ?", path.join(" "))],
                    response: format!("inform {entity}"),
                    initial_entities: vec![start],
                    gold_path: Some(path),
                    reasoning_type: Some("inform".into()),
                    domain: None,
                }
            }
            1 => {
                // Selection: min or max over a subset of value relations.
                let want_min = rng.random_bool(0.5);
                let size = rng.random_range(2..=N_VALUE_RELS);
                let mut idx: Vec<usize> = (0..N_VALUE_RELS).collect();
                idx.shuffle(&mut rng);
                idx.truncate(size);
                idx.sort_unstable();
                let entries = &g.values[&start];
                let subset: Vec<&(String, String, i64)> = idx.iter().map(|&i| &entries[i]).collect();
                let pick = if want_min {
                    subset.iter().min_by_key(|(_, _, v)| *v).unwrap()
                } else {
                    subset.iter().max_by_key(|(_, _, v)| *v).unwrap()
                };
                let word = if want_min { "smallest" } else { "largest" };
                let names: Vec<&str> = subset.iter().map(|(r, _, _)| r.as_str()).collect();
                DialogueExample {
                    history: vec![format!("select the {word} of {} of {start}", names.join(" "))],
                    response: format!("inform {}", pick.1),
                    initial_entities: vec![start],
                    gold_path: Some(vec![pick.0.clone()]),
                    reasoning_type: Some("selection".into()),
                    domain: None,
                }
            }
            2 => {
                // True/false: verify a 1-hop statement; alternate labels.
                let r = rng.random_range(0..g.chain_rels.len());
                let Some(actual) = g.chain.get(&(start.clone(), r)) else { continue };
                let positive = tf_flip;
                let claimed = if positive {
                    actual.clone()
                } else {
                    loop {
                        let cand = &g.core[rng.random_range(0..n_core)];
                        if cand != actual {
                            break cand.clone();
                        }
                    }
                };
                DialogueExample {
                    history: vec![format!("verify that the {} of {start} is {claimed}", g.chain_rels[r])],
                    response: (if positive { "yes" } else { "no" }).to_string(),
                    initial_entities: vec![start],
                    gold_path: Some(vec![g.chain_rels[r].clone()]),
                    reasoning_type: Some("true_false".into()),
                    domain: None,
                }
            }
            _ => {
                // Extraction: a relation the start entity does not have.
                // Numeric entities have no chain edges at all, core
                // entities miss the cells dropped by the triple budget.
                let from_numeric = rng.random_bool(0.3);
                let (subject, r) = if from_numeric {
                    let s = g.numeric[rng.random_range(0..g.numeric.len())].0.clone();
                    (s, rng.random_range(0..g.chain_rels.len()))
                } else {
                    let r = rng.random_range(0..g.chain_rels.len());
                    if g.chain.contains_key(&(start.clone(), r)) {
                        continue;
                    }
                    (start, r)
                };
                let rel = g.chain_rels[r].clone();
                let etemplate = EXTRACTION_TEMPLATES[rng.random_range(0..EXTRACTION_TEMPLATES.len())];
                DialogueExample {
                    history: vec![format!("{etemplate} {rel} of {subject} ?")],
                    response: format!("include {rel}"),
                    initial_entities: vec![subject],
                    // The asked relation is the supervision target for the
                    // first hop even though the subject lacks it: the head
                    // must name the queried relation for the response.
                    gold_path: Some(vec![rel]),
                    reasoning_type: Some("extraction".into()),
                    domain: None,
                }
            }
        };
        let key = ex.history_text();
        if seen.insert(key) {
            // Alternate labels only on kept examples, so duplicate
            // discards cannot skew the yes/no balance.
            if ex.reasoning_type.as_deref() == Some("true_false") {
                tf_flip = !tf_flip;
            }
            examples.push(ex);
        }
    }

    examples.shuffle(&mut rng);
    let n = examples.len();
    let n_valid = n / 8;
    let n_test = n / 8;
    let n_train = n - n_valid - n_test;
    let mut it = examples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let valid: Vec<_> = it.by_ref().take(n_valid).collect();
    let test: Vec<_> = it.collect();

    Ok(SynthDataset { triples: g.triples, train, valid, test })
}

/// Token corpus covering everything the model must embed: entity and
/// relation names plus all histories and responses of the dataset.
pub fn synth_token_corpus(ds: &SynthDataset, entities: &Vocab, relations: &Vocab) -> Vec<String> {
    let mut corpus: Vec<String> = entities.names().map(|s| s.to_string()).collect();
    corpus.extend(relations.names().map(|s| s.to_string()));
    for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        corpus.push(ex.history_text());
        corpus.push(ex.response.clone());
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(domain: SmdDomain, pairs: &[(&str, &str)]) -> SmdTableRecord {
        SmdTableRecord {
            domain,
            attributes: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    #[test]
    fn dialogue_round_trip() {
        let ex = DialogueExample {
            history: vec!["hi".into(), "where is the gas station ?".into()],
            response: "valero is 4 miles away".into(),
            initial_entities: vec!["valero".into()],
            gold_path: Some(vec!["HasDistance".into()]),
            reasoning_type: Some("inform".into()),
            domain: Some("navigation".into()),
        };
        let line = serde_json::to_string(&ex).unwrap();
        let parsed = parse_dialogues(&line).unwrap();
        assert_eq!(parsed, vec![ex]);
    }

    #[test]
    fn minimal_record_parses() {
        let line = r#"{"history":["hi"],"response":"hello","initial_entities":["A"]}"#;
        let parsed = parse_dialogues(line).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].gold_path, None);
    }

    #[test]
    fn malformed_lines_report_numbers() {
        let text = "{\"history\":[\"hi\"],\"response\":\"x\",\"initial_entities\":[\"A\"]}\nnot json\n";
        match parse_dialogues(text) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
        // Unknown fields rejected.
        let unknown = r#"{"history":["hi"],"response":"x","initial_entities":["A"],"extra":1}"#;
        assert!(parse_dialogues(unknown).is_err());
        // Empty history rejected.
        let empty = r#"{"history":[],"response":"x","initial_entities":["A"]}"#;
        assert!(parse_dialogues(empty).is_err());
    }

    #[test]
    fn smd_schedule_fixture_triple() {
        let triples =
            build_smd_kg(&[rec(SmdDomain::Schedule, &[("event", "tennis activity"), ("time", "7pm")])]).unwrap();
        assert!(triples.contains(&("tennis activity".into(), "HasTime".into(), "7pm".into())));
        assert!(triples.contains(&("7pm".into(), "IsTimeOf".into(), "tennis activity".into())));
    }

    #[test]
    fn smd_navigation_fixture_triple() {
        let triples =
            build_smd_kg(&[rec(SmdDomain::Navigation, &[("poi", "Chevron"), ("type", "gas station")])]).unwrap();
        assert!(triples.contains(&("Chevron".into(), "HasType".into(), "gas station".into())));
    }

    #[test]
    fn smd_weather_splits_reports() {
        let triples = build_smd_kg(&[rec(
            SmdDomain::Weather,
            &[
                ("location", "cleveland"),
                ("date", "monday"),
                ("weather", "rain"),
                ("low_temp", "40f"),
                ("high_temp", "60f"),
            ],
        )])
        .unwrap();
        assert!(triples.contains(&("ReportID1".into(), "HasLocation".into(), "cleveland".into())));
        assert!(triples.contains(&("ReportID1".into(), "HasWeather".into(), "rain".into())));
        assert!(triples.contains(&("ReportID1".into(), "HasLowTemp".into(), "40f".into())));
        assert!(triples.contains(&("ReportID1".into(), "HasHighTemp".into(), "60f".into())));
        assert!(triples.contains(&("monday".into(), "IsDateOf".into(), "ReportID1".into())));
    }

    #[test]
    fn smd_same_location_reports_linked() {
        let make = |date: &str| {
            rec(SmdDomain::Weather, &[("location", "cleveland"), ("date", date), ("weather", "rain")])
        };
        let triples = build_smd_kg(&[make("monday"), make("tuesday")]).unwrap();
        assert!(triples.contains(&("ReportID2".into(), "IsEqualTo".into(), "ReportID1".into())));
        assert!(triples.contains(&("ReportID1".into(), "IsEqualTo".into(), "ReportID2".into())));
    }

    #[test]
    fn smd_unknown_attribute_rejected() {
        assert!(build_smd_kg(&[rec(SmdDomain::Schedule, &[("event", "x"), ("color", "red")])]).is_err());
        assert!(build_smd_kg(&[rec(SmdDomain::Schedule, &[("time", "7pm")])]).is_err());
        assert!(build_smd_kg(&[]).is_err());
    }

    #[test]
    fn smd_inventory_is_29_and_pure() {
        assert_eq!(smd_relation_inventory().len(), 29);
        // Permutation invariance of the triple set.
        let a = rec(SmdDomain::Schedule, &[("event", "tennis"), ("time", "7pm")]);
        let b = rec(SmdDomain::Navigation, &[("poi", "Chevron"), ("type", "gas station")]);
        let t1 = build_smd_kg(&[a.clone(), b.clone()]).unwrap();
        let t2 = build_smd_kg(&[b, a]).unwrap();
        let s1: HashSet<_> = t1.into_iter().collect();
        let s2: HashSet<_> = t2.into_iter().collect();
        assert_eq!(s1, s2);
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_entities: 48,
            n_relations: 8,
            n_triples: 300,
            hops_max: 2,
            n_examples: 200,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_deterministic() {
        let a = gen_synthetic(&small_cfg(), 7).unwrap();
        let b = gen_synthetic(&small_cfg(), 7).unwrap();
        assert_eq!(a.triples, b.triples);
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        let c = gen_synthetic(&small_cfg(), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn synthetic_splits_disjoint_and_sized() {
        let ds = gen_synthetic(&small_cfg(), 3).unwrap();
        assert_eq!(ds.train.len() + ds.valid.len() + ds.test.len(), 200);
        assert_eq!(ds.valid.len(), 25);
        assert_eq!(ds.test.len(), 25);
        let keys = |v: &[DialogueExample]| v.iter().map(|e| e.history_text()).collect::<HashSet<_>>();
        let (tr, va, te) = (keys(&ds.train), keys(&ds.valid), keys(&ds.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    }

    #[test]
    fn inform_gold_paths_execute_to_answer() {
        let ds = gen_synthetic(&small_cfg(), 11).unwrap();
        let mut checked = 0;
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() != Some("inform") {
                continue;
            }
            let path = ex.gold_path.as_ref().unwrap();
            let reached = execute_path(&ds.triples, &ex.initial_entities[0], path);
            let answer = ex.response.strip_prefix("inform ").unwrap();
            assert_eq!(reached, vec![answer.to_string()], "example {:?}", ex.history);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn inform_paths_canonically_ordered() {
        let ds = gen_synthetic(&small_cfg(), 31).unwrap();
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() != Some("inform") {
                continue;
            }
            let path = ex.gold_path.as_ref().unwrap();
            let mut sorted = path.clone();
            sorted.sort();
            assert_eq!(*path, sorted, "path not canonical in {:?}", ex.history);
        }
    }

    #[test]
    fn selection_answers_match_symbolic_min_max() {
        let ds = gen_synthetic(&small_cfg(), 13).unwrap();
        let mut checked = 0;
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() != Some("selection") {
                continue;
            }
            let start = &ex.initial_entities[0];
            let want_min = ex.history[0].contains("smallest");
            // The value relations named in the question, re-resolved
            // independently from the emitted triples.
            let named: Vec<&str> =
                ex.history[0].split_whitespace().filter(|w| w.starts_with("val")).collect();
            assert!(named.len() >= 2);
            let mut best: Option<(i64, &str)> = None;
            for (h, r, t) in &ds.triples {
                if h == start && named.contains(&r.as_str()) {
                    let v: i64 = t.strip_prefix("num").unwrap().parse().unwrap();
                    let better = match best {
                        None => true,
                        Some((bv, _)) => {
                            if want_min {
                                v < bv
                            } else {
                                v > bv
                            }
                        }
                    };
                    if better {
                        best = Some((v, t));
                    }
                }
            }
            assert_eq!(ex.response, format!("inform {}", best.unwrap().1));
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn true_false_balanced() {
        let cfg = SynthConfig {
            n_examples: 1000,
            n_entities: 120,
            n_triples: 800,
            reasoning_mix: [0.4, 0.1, 0.4, 0.1],
            ..small_cfg()
        };
        let ds = gen_synthetic(&cfg, 17).unwrap();
        let mut yes = 0usize;
        let mut total = 0usize;
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() == Some("true_false") {
                total += 1;
                if ex.response == "yes" {
                    yes += 1;
                }
            }
        }
        assert!(total >= 100);
        let frac = yes as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.05, "positive fraction {frac}");
    }

    #[test]
    fn true_false_labels_consistent_with_kg() {
        let ds = gen_synthetic(&small_cfg(), 19).unwrap();
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() != Some("true_false") {
                continue;
            }
            let rel = &ex.gold_path.as_ref().unwrap()[0];
            let words: Vec<&str> = ex.history[0].split_whitespace().collect();
            let claimed = *words.last().unwrap();
            let reached = execute_path(&ds.triples, &ex.initial_entities[0], std::slice::from_ref(rel));
            let actual_yes = reached == vec![claimed.to_string()];
            assert_eq!(ex.response == "yes", actual_yes);
        }
    }

    #[test]
    fn extraction_relations_truly_absent() {
        let ds = gen_synthetic(&small_cfg(), 23).unwrap();
        let mut checked = 0;
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if ex.reasoning_type.as_deref() != Some("extraction") {
                continue;
            }
            let rel = ex.response.strip_prefix("include ").unwrap();
            let reached = execute_path(&ds.triples, &ex.initial_entities[0], &[rel.to_string()]);
            assert!(reached.is_empty(), "extraction relation {rel} reachable from {}", ex.initial_entities[0]);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn gold_paths_bounded_and_resolvable() {
        let ds = gen_synthetic(&small_cfg(), 29).unwrap();
        let rel_names: HashSet<&str> = ds.triples.iter().map(|(_, r, _)| r.as_str()).collect();
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if let Some(path) = &ex.gold_path {
                assert!(!path.is_empty() && path.len() <= 2);
                for r in path {
                    assert!(rel_names.contains(r.as_str()), "unknown relation {r}");
                }
            }
        }
    }

    #[test]
    fn default_config_generates() {
        let ds = gen_synthetic(&SynthConfig::default(), 1).unwrap();
        assert_eq!(ds.train.len(), 3000);
        assert_eq!(ds.valid.len(), 500);
        assert_eq!(ds.test.len(), 500);
        // Entity count: every head/tail, matching the configured budget.
        let ents: HashSet<&str> = ds
            .triples
            .iter()
            .flat_map(|(h, _, t)| [h.as_str(), t.as_str()])
            .collect();
        assert!(ents.len() <= 200);
        assert!(ds.triples.len() <= 1200);
    }

    #[test]
    fn unsatisfiable_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.hops_max = 0;
        assert!(gen_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.n_relations = 4;
        assert!(gen_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.n_entities = 10;
        assert!(gen_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.n_triples = 100;
        assert!(gen_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.n_examples = 1_000_000; // far beyond distinct question capacity
        assert!(gen_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.reasoning_mix = [0.0; 4];
        assert!(gen_synthetic(&cfg, 1).is_err());
    }
}
