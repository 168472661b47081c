//! Command-line front end: KG building, synthetic data generation,
//! training, evaluation, gradient checking and trace inspection.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric failure (non-finite loss or a failed gradient check).

use clap::{Args, Parser, Subcommand};
use diffkg::data::{
    gen_synthetic, load_dialogues, prepare, save_dialogues, DialogueExample, SmdTableRecord,
    SynthConfig,
};
use diffkg::diff::{grad_check_blocks, ParamStore, Tape};
use diffkg::encoder::Mode;
use diffkg::eval::{evaluate, shuffled_assets, EvalOptions};
use diffkg::kg::{add_to_self, ingest, parse_triple_file, write_triple_file};
use diffkg::model::{forward_loss, Assets, Model};
use diffkg::reasoner::format_trace;
use diffkg::text::TokenVocab;
use diffkg::trainer::{
    load_checkpoint, parse_kv_text, save_checkpoint, seeded_rng, train_loop, TrainConfig,
};
use diffkg::{Error, Real, Result};
use rand::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "diffkg", version, about = "Differentiable KG reasoning for dialogue response generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a triple file from annotated tables or normalize an existing triple file.
    BuildKg(BuildKgArgs),
    /// Generate the synthetic KG + dialogue splits.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dialogue file.
    Eval(EvalArgs),
    /// Print the hop-by-hop reasoning trace for one query.
    Trace(TraceArgs),
    /// Finite-difference check of all parameter-block gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct BuildKgArgs {
    /// Annotated table records, one JSON object per line.
    #[arg(long, conflicts_with = "triples", required_unless_present = "triples")]
    tables: Option<PathBuf>,
    /// Existing head\trelation\ttail file to normalize and dedup.
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Flat key=value generator config (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for triples.tsv and the three split files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory containing train.jsonl and valid.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Triple file.
    #[arg(long)]
    kg: PathBuf,
    /// Flat key=value training config (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dialogue file to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    /// Evaluate against a KG with triple rows shuffled by this seed.
    #[arg(long)]
    shuffle_triples: Option<u64>,
    /// Emit the report as JSON instead of TSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    /// Dialogue history text.
    #[arg(long)]
    history: String,
    /// Comma-separated initial entity names.
    #[arg(long)]
    entities: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Flat key=value training config controlling d, h_hops, mode, ...
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 4e-3)]
    h: f64,
    /// Per-block relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadConfig(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BuildKg(a) => cmd_build_kg(a),
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Trace(a) => cmd_trace(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ---------------------------------------------------------------------
// Asset assembly
// ---------------------------------------------------------------------

/// Ingest a triple file and build model assets with the given token
/// vocabulary.
fn assets_from_kg(kg_path: &Path, tokens: TokenVocab) -> Result<Assets> {
    let triples = parse_triple_file(kg_path)?;
    let (kg, entities, relations) = ingest(&triples)?;
    let (kg, relations, to_self) = add_to_self(&kg, &relations)?;
    Assets::build(kg, entities, relations, tokens, to_self)
}

/// Token corpus spanning the KG names plus every dialogue split found.
fn training_token_vocab(kg_path: &Path, splits: &[&[DialogueExample]]) -> Result<TokenVocab> {
    let triples = parse_triple_file(kg_path)?;
    let (_, entities, relations) = ingest(&triples)?;
    let mut corpus: Vec<String> = entities.names().map(|s| s.to_string()).collect();
    corpus.extend(relations.names().map(|s| s.to_string()));
    for split in splits {
        for ex in *split {
            corpus.push(ex.history_text());
            corpus.push(ex.response.clone());
        }
    }
    Ok(TokenVocab::build(&corpus))
}

fn token_vocab_from_checkpoint(ckpt: &Path) -> Result<TokenVocab> {
    let path = ckpt.join("tokens.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(TokenVocab::from_tokens(text.lines().map(|l| l.to_string()).collect()))
}

fn write_token_vocab(ckpt: &Path, tokens: &TokenVocab) -> Result<()> {
    let mut text = String::new();
    for t in tokens.tokens() {
        text.push_str(t);
        text.push('\n');
    }
    std::fs::write(ckpt.join("tokens.txt"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

fn cmd_build_kg(a: BuildKgArgs) -> Result<()> {
    let raw: Vec<(String, String, String)> = match (&a.tables, &a.triples) {
        (Some(tables), None) => {
            let text = std::fs::read_to_string(tables)?;
            let mut records = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SmdTableRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Malformed { line: lineno + 1, msg: e.to_string() })?;
                records.push(rec);
            }
            diffkg::data::build_smd_kg(&records)?
        }
        (None, Some(triples)) => parse_triple_file(triples)?,
        _ => return Err(Error::BadConfig("pass exactly one of --tables or --triples".into())),
    };
    // Round-trip through the store to normalize names and dedup rows.
    let (kg, entities, relations) = ingest(&raw)?;
    let normalized: Vec<(String, String, String)> = kg
        .triples()
        .map(|t| {
            (
                entities.raw_name(t.head as usize).to_string(),
                relations.raw_name(t.relation as usize).to_string(),
                entities.raw_name(t.tail as usize).to_string(),
            )
        })
        .collect();
    write_triple_file(&a.out, &normalized)?;
    println!("N_E={} N_R={} N_T={}", kg.n_entities(), kg.n_relations(), kg.n_triples());
    Ok(())
}

fn synth_config_from_kv(text: &str) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::default();
    for (key, value) in parse_kv_text(text)? {
        let bad = |e: &dyn std::fmt::Display| Error::BadConfig(format!("invalid value for {key}: {e}"));
        match key.as_str() {
            "n_entities" => cfg.n_entities = value.parse().map_err(|e| bad(&e))?,
            "n_relations" => cfg.n_relations = value.parse().map_err(|e| bad(&e))?,
            "n_triples" => cfg.n_triples = value.parse().map_err(|e| bad(&e))?,
            "hops_max" => cfg.hops_max = value.parse().map_err(|e| bad(&e))?,
            "n_examples" => cfg.n_examples = value.parse().map_err(|e| bad(&e))?,
            "mix_inform" => cfg.reasoning_mix[0] = value.parse().map_err(|e| bad(&e))?,
            "mix_selection" => cfg.reasoning_mix[1] = value.parse().map_err(|e| bad(&e))?,
            "mix_true_false" => cfg.reasoning_mix[2] = value.parse().map_err(|e| bad(&e))?,
            "mix_extraction" => cfg.reasoning_mix[3] = value.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::BadConfig(format!("unknown generator config key {other:?}"))),
        }
    }
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => synth_config_from_kv(&std::fs::read_to_string(path)?)?,
        None => SynthConfig::default(),
    };
    let ds = gen_synthetic(&cfg, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    write_triple_file(&a.out.join("triples.tsv"), &ds.triples)?;
    save_dialogues(&a.out.join("train.jsonl"), &ds.train)?;
    save_dialogues(&a.out.join("valid.jsonl"), &ds.valid)?;
    save_dialogues(&a.out.join("test.jsonl"), &ds.test)?;
    let mut counts = std::collections::BTreeMap::new();
    for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        *counts.entry(ex.reasoning_type.clone().unwrap_or_else(|| "untyped".into())).or_insert(0usize) += 1;
    }
    for (t, n) in counts {
        println!("{t}\t{n}");
    }
    println!("train={} valid={} test={}", ds.train.len(), ds.valid.len(), ds.test.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_kv_text(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let train = load_dialogues(&a.data.join("train.jsonl"))?;
    let valid = load_dialogues(&a.data.join("valid.jsonl"))?;
    let test_path = a.data.join("test.jsonl");
    let test = if test_path.exists() { load_dialogues(&test_path)? } else { Vec::new() };

    let tokens = training_token_vocab(&a.kg, &[&train, &valid, &test])?;
    let assets = assets_from_kg(&a.kg, tokens)?;

    let mut progress = |log: &diffkg::trainer::EpochLog| {
        println!(
            "epoch {}\ttrain_loss {:.6}\tval_em {:.4}\tval_f1 {:.4}\tval_path@1 {:.4}",
            log.epoch, log.train_loss, log.val_em, log.val_token_f1, log.val_path_at_1
        );
    };
    let result = train_loop::<Real>(&cfg, &assets, &train, &valid, Some(&mut progress))?;
    std::fs::create_dir_all(&a.out)?;
    save_checkpoint(&a.out, &result.model, &cfg, &assets)?;
    write_token_vocab(&a.out, &assets.tokens)?;
    std::fs::write(a.out.join("metrics.tsv"), result.log_tsv())?;
    println!("best epoch {} metric {:.4}", result.best_epoch, result.best_metric);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let tokens = token_vocab_from_checkpoint(&a.ckpt)?;
    let assets = assets_from_kg(&a.kg, tokens)?;
    let (model, _cfg) = load_checkpoint::<Real>(&a.ckpt, &assets)?;
    let assets = match a.shuffle_triples {
        Some(seed) => shuffled_assets(&assets, seed)?,
        None => assets,
    };
    let examples = load_dialogues(&a.data)?;
    let report = evaluate(&model, &assets, &examples, &EvalOptions::default())?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_tsv());
    }
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let tokens = token_vocab_from_checkpoint(&a.ckpt)?;
    let assets = assets_from_kg(&a.kg, tokens)?;
    let (model, cfg) = load_checkpoint::<Real>(&a.ckpt, &assets)?;
    let ex = DialogueExample {
        history: vec![a.history.clone()],
        response: String::new(),
        initial_entities: a.entities.split(',').map(|s| s.trim().to_string()).collect(),
        gold_path: None,
        reasoning_type: None,
        domain: None,
    };
    // Only the history and entities matter for tracing.
    let mut prep = prepare::<Real>(&ex, &assets)?;
    prep.target_tokens.clear();
    let pred = diffkg::model::predict(&model, &assets, &prep)?;
    print!(
        "{}",
        format_trace(&pred.trace, &assets.entities, &assets.relations, cfg.mode == Mode::Full)
    );
    println!("response: {}", pred.text);
    Ok(())
}

/// Tiny random model + KG + example for the end-to-end gradient check:
/// 12 entities, 5 relations, ~30 tokens.
fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => TrainConfig::from_kv_text(&std::fs::read_to_string(path)?)?,
        None => TrainConfig { d: 16, h_hops: 3, top_k: 4, ..Default::default() },
    };
    if a.h <= 0.0 || a.tol <= 0.0 {
        return Err(Error::BadConfig("h and tol must be positive".into()));
    }
    let mut rng = seeded_rng(a.seed, "data");
    let n_e = 12usize;
    let n_r = 5usize;
    let mut triples = Vec::new();
    for e in 0..n_e {
        triples.push((format!("e{e}"), format!("r{}", rng.random_range(0..n_r)), format!("e{}", rng.random_range(0..n_e))));
    }
    for _ in 0..12 {
        triples.push((
            format!("e{}", rng.random_range(0..n_e)),
            format!("r{}", rng.random_range(0..n_r)),
            format!("e{}", rng.random_range(0..n_e)),
        ));
    }
    let (kg, entities, relations) = ingest(&triples)?;
    let (kg, relations, to_self) = add_to_self(&kg, &relations)?;
    let mut corpus: Vec<String> = entities.names().map(|s| s.to_string()).collect();
    corpus.extend(relations.names().map(|s| s.to_string()));
    corpus.push("w0 w1 w2 w3 w4 w5 w6 w7 w8".into());
    let tokens = TokenVocab::build(&corpus);
    let assets = Assets::build(kg, entities, relations, tokens, to_self)?;

    let mut init_rng = seeded_rng(a.seed, "init");
    let model = Model::<Real>::init(&assets, cfg.model_config(), &mut init_rng);
    let start = rng.random_range(0..n_e);
    let mut e1 = vec![0.0; assets.kg.n_entities()];
    e1[assets.entities.lookup(&format!("e{start}")).expect("entity")] = 1.0;
    let gold_rel = assets.relations.lookup(&format!("r{}", rng.random_range(0..n_r))).expect("relation") as u32;
    let ex = diffkg::model::PreparedExample::<Real> {
        history_tokens: assets.tokens.encode(&format!("w0 w1 e{start} w2 w3")),
        e1,
        target_tokens: assets.tokens.encode(&format!("w4 e{}", rng.random_range(0..n_e))),
        gold_path: Some(vec![gold_rel]),
    };

    let enc = model.enc;
    let dec = model.dec;
    let mcfg = model.cfg;
    let program = |p: &ParamStore<Real>, t: &mut Tape<Real>| {
        let m = Model { params: p.clone(), enc, dec, cfg: mcfg };
        let fwd = forward_loss(t, &m, &assets, &ex)?;
        Ok(fwd.loss)
    };
    let blocks = grad_check_blocks(program, &model.params, a.h)?;
    let mut worst: f64 = 0.0;
    for (name, err) in &blocks {
        println!("{name}\t{err:.3e}");
        worst = worst.max(*err);
    }
    if worst > a.tol {
        return Err(Error::NonFinite(format!("gradient check failed: max rel err {worst:.3e} > {:.1e}", a.tol)));
    }
    println!("ok: max rel err {worst:.3e}");
    Ok(())
}
