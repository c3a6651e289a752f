//! The five subcommand bodies. Each one validates its inputs, does its
//! work, and leaves a manifest next to its outputs so the run can be
//! reproduced from the artifacts alone.

use crate::config::RunConfig;
use anyhow::{bail, Context};
use indexmap::IndexMap;
use semtok_core::checkpoint::{self, Checkpoint};
use semtok_core::eval::{
    ambiguous_mask, group_eval, pairwise_choice_eval, retrieval_eval, swap_probes, twin_quads,
    GroupScore, SimilarityReport,
};
use semtok_core::rank::{build_ranks, WeightEncoding};
use semtok_core::synth::{generate, read_truth, write_truth, SceneTruth};
use semtok_core::tokens::{layout, read_corpus, write_corpus, TokenSet};
use semtok_core::trainer::TrainSession;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
}

/// Snapshot of the effective config, written before the command's real
/// output so interrupted runs still say what they were.
fn write_manifest(cfg: &RunConfig, command: &str) -> anyhow::Result<()> {
    let manifest = Manifest { command, version: env!("CARGO_PKG_VERSION"), config: cfg };
    let path = cfg.paths.manifest(command);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_corpus_vec(path: &Path) -> anyhow::Result<Vec<TokenSet>> {
    let reader = read_corpus(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let sets: Result<Vec<TokenSet>, _> = reader.collect();
    Ok(sets.with_context(|| format!("reading corpus {}", path.display()))?)
}

/// Generates the train and validation corpora from one scene stream so
/// both halves share class prototypes; the split falls on a twin-pair
/// boundary. Byte-identical outputs for identical configs.
pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    write_manifest(cfg, "gen-data")?;

    let total = cfg.data.train_scenes + cfg.data.val_scenes;
    log::info!("generating {total} scenes ({} train, {} val)", cfg.data.train_scenes, cfg.data.val_scenes);
    let (sets, truths) = generate(total, &cfg.scene, cfg.data.seed)?;
    let (train_sets, val_sets) = sets.split_at(cfg.data.train_scenes);
    let (train_truths, val_truths) = truths.split_at(cfg.data.train_scenes);

    write_corpus(train_sets, cfg.paths.train_corpus())?;
    write_truth(cfg.paths.train_truth(), train_truths)?;
    write_corpus(val_sets, cfg.paths.val_corpus())?;
    write_truth(cfg.paths.val_truth(), val_truths)?;

    println!("wrote {} train scenes to {}", train_sets.len(), cfg.paths.train_corpus().display());
    println!("wrote {} val scenes to {}", val_sets.len(), cfg.paths.val_corpus().display());
    Ok(())
}

/// Appends any log lines not yet on disk.
fn flush_metrics(path: &Path, log: &[String], written: &mut usize) -> anyhow::Result<()> {
    if *written >= log.len() {
        return Ok(());
    }
    let mut file = std::fs::OpenOptions::new().append(true).open(path)?;
    for line in &log[*written..] {
        writeln!(file, "{line}")?;
    }
    *written = log.len();
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    eval_every: usize,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    write_manifest(cfg, "train")?;

    let corpus = read_corpus_vec(&cfg.paths.train_corpus())?;
    let val = if eval_every > 0 { Some(read_corpus_vec(&cfg.paths.val_corpus())?) } else { None };

    let mut session = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            log::info!("resuming from {} at epoch {}, step {}", path.display(), ckpt.epoch, ckpt.step);
            TrainSession::resume(ckpt, cfg.train.clone(), corpus)?
        }
        None => {
            // A fresh run owns the metrics file; a resumed one appends.
            std::fs::write(cfg.paths.metrics(), "")?;
            TrainSession::new(cfg.model.clone(), cfg.train.clone(), corpus)?
        }
    };

    log::info!(
        "{} steps/epoch, {} total steps, additive attention {}",
        session.steps_per_epoch(),
        session.total_steps(),
        if cfg.train.additive_attention { "on" } else { "off" }
    );

    let metrics_path = cfg.paths.metrics();
    if resume.is_some() && !metrics_path.exists() {
        std::fs::write(&metrics_path, "")?;
    }
    let mut written = 0usize;
    while session.epoch < cfg.train.epochs as u64 {
        let mean = session.run_epoch()?;
        log::info!("epoch {:>3}  mean loss {mean:.6}", session.epoch);
        if let Some(val) = &val {
            if eval_every > 0 && (session.epoch % eval_every as u64 == 0 || session.epoch == cfg.train.epochs as u64) {
                let report = retrieval_eval(&session.params, &session.model_cfg, val, cfg.train.additive_attention, None)?;
                log::info!(
                    "epoch {:>3}  val t2i {:.3}  i2t {:.3}",
                    session.epoch,
                    report.t2i_top1,
                    report.i2t_top1
                );
                let mut metrics = IndexMap::new();
                metrics.insert("val_t2i_top1".to_string(), report.t2i_top1);
                metrics.insert("val_i2t_top1".to_string(), report.i2t_top1);
                session.log_epoch(metrics);
            }
        }
        flush_metrics(&metrics_path, &session.log, &mut written)?;
        checkpoint::save(&session.checkpoint(), cfg.paths.checkpoint())?;
    }
    // Covers epochs == 0, where the loop never saves: the checkpoint of
    // the initial parameters is still a valid artifact.
    checkpoint::save(&session.checkpoint(), cfg.paths.checkpoint())?;
    flush_metrics(&metrics_path, &session.log, &mut written)?;

    let final_loss = session.last_epoch_mean();
    if final_loss.is_finite() {
        println!("trained {} epochs, final epoch mean loss {final_loss:.6}", session.epoch);
    } else {
        println!("trained 0 epochs; wrote the initial checkpoint");
    }
    println!("checkpoint: {}", cfg.paths.checkpoint().display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

#[derive(Serialize)]
struct RetrievalSection {
    n: usize,
    t2i_top1: f64,
    i2t_top1: f64,
    diag_mean: f64,
    offdiag_mean: f64,
}

impl From<&SimilarityReport> for RetrievalSection {
    fn from(r: &SimilarityReport) -> Self {
        RetrievalSection {
            n: r.n,
            t2i_top1: r.t2i_top1,
            i2t_top1: r.i2t_top1,
            diag_mean: r.diag_mean,
            offdiag_mean: r.offdiag_mean,
        }
    }
}

#[derive(Serialize)]
struct ChoiceSection {
    n_probes: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct GroupSection {
    n_quads: usize,
    text_correct: f64,
    image_correct: f64,
    group_correct: f64,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_step: u64,
    checkpoint_epoch: u64,
    additive_attention: bool,
    retrieval: RetrievalSection,
    swap_choice: ChoiceSection,
    /// Swap choice restricted to scenes in direction-twin pairs; absent
    /// when the corpus has none.
    #[serde(skip_serializing_if = "Option::is_none")]
    swap_choice_ambiguous: Option<ChoiceSection>,
    group: GroupSection,
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    write_manifest(cfg, "eval")?;

    let ckpt_path = cfg.paths.checkpoint();
    let ckpt = checkpoint::load(&ckpt_path).with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let sets = read_corpus_vec(&cfg.paths.val_corpus())?;
    let truths = read_truth(cfg.paths.val_truth())?;
    let additive = cfg.train.additive_attention;

    let cache = cfg.paths.cache_dir();
    let retrieval = retrieval_eval(&ckpt.params, &ckpt.config, &sets, additive, Some(&cache))?;

    let probes = swap_probes(&sets, &truths)?;
    let choice = pairwise_choice_eval(&ckpt.params, &ckpt.config, &probes, additive)?;

    let mask = ambiguous_mask(&truths);
    let amb_sets: Vec<TokenSet> =
        sets.iter().zip(&mask).filter(|(_, &m)| m).map(|(ts, _)| ts.clone()).collect();
    let amb_truths: Vec<SceneTruth> =
        truths.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t.clone()).collect();
    let amb_probes = swap_probes(&amb_sets, &amb_truths)?;
    let swap_choice_ambiguous = if amb_probes.is_empty() {
        None
    } else {
        Some(ChoiceSection {
            n_probes: amb_probes.len(),
            accuracy: pairwise_choice_eval(&ckpt.params, &ckpt.config, &amb_probes, additive)?,
        })
    };

    let quads = twin_quads(&sets, &truths)?;
    let group: GroupScore = group_eval(&ckpt.params, &ckpt.config, &quads, additive)?;

    let report = EvalReport {
        checkpoint_step: ckpt.step,
        checkpoint_epoch: ckpt.epoch,
        additive_attention: additive,
        retrieval: RetrievalSection::from(&retrieval),
        swap_choice: ChoiceSection { n_probes: probes.len(), accuracy: choice },
        swap_choice_ambiguous,
        group: GroupSection {
            n_quads: quads.len(),
            text_correct: group.text_correct,
            image_correct: group.image_correct,
            group_correct: group.group_correct,
        },
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(cfg.paths.eval_report(), &text)?;

    println!("scenes: {}   additive attention: {}", retrieval.n, if additive { "on" } else { "off" });
    println!("retrieval   t2i top-1 {:.4}   i2t top-1 {:.4}", retrieval.t2i_top1, retrieval.i2t_top1);
    println!("similarity  matched {:.4}   unmatched {:.4}", retrieval.diag_mean, retrieval.offdiag_mean);
    println!("swap choice {:.4} over {} probes", choice, probes.len());
    if let Some(amb) = &report.swap_choice_ambiguous {
        println!("  direction-ambiguous only: {:.4} over {} probes", amb.accuracy, amb.n_probes);
    }
    println!(
        "group       text {:.4}   image {:.4}   both {:.4} over {} quads",
        group.text_correct, group.image_correct, group.group_correct, report.group.n_quads
    );
    println!("report: {}", cfg.paths.eval_report().display());
    Ok(())
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Token table, rank grid, and weight table for one corpus sample. The
/// weight table comes from the checkpoint when one is given, otherwise
/// from the zero encoding every model starts at.
pub fn inspect_sample(
    corpus: &Path,
    sample_id: &str,
    ckpt: Option<&Checkpoint>,
) -> anyhow::Result<()> {
    let mut found = None;
    for ts in read_corpus(corpus)? {
        let ts = ts?;
        if ts.sample_id == sample_id {
            found = Some(ts);
            break;
        }
    }
    let Some(ts) = found else {
        bail!("no sample `{sample_id}` in {}", corpus.display());
    };

    println!(
        "sample {} (d={}, {} tangible, {} intangible, {} triplets)",
        ts.sample_id,
        ts.d,
        ts.tangible.len(),
        ts.intangible.len(),
        ts.triplets.len()
    );
    println!("\ntokens:");
    println!("  {:<5} {:<11} {:>8}  {}", "pos", "kind", "norm", "neighbors (nearest first)");
    println!("  {:<5} {:<11} {:>8.4}", "l", "image", norm(&ts.l));
    for (j, row) in ts.tangible.iter().enumerate() {
        let nbr = ts.neighbors[j].iter().map(|b| format!("v{b}")).collect::<Vec<_>>().join(" ");
        println!("  {:<5} {:<11} {:>8.4}  {}", format!("v{j}"), "tangible", norm(row), nbr);
    }
    for (c, row) in ts.intangible.iter().enumerate() {
        println!("  {:<5} {:<11} {:>8.4}", format!("u{c}"), "intangible", norm(row));
    }

    println!("\ntriplets:");
    for (i, t) in ts.triplets.iter().enumerate() {
        println!("  {i}: v{} -> v{} via u{}", t.subject, t.object, t.predicate);
    }

    // Tight context: the grid is zero outside the valid prefix, so the
    // model's wider window would only add blank rows.
    let context = ts.valid_len();
    let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
    let rm = build_ranks(&ts, &positions, context)?;
    println!("\nrank grid (row attends to column; . is rank 0):");
    print!("{}", rm.render_grid(&positions));

    let enc = match ckpt {
        Some(c) => {
            let a = c.params.get("rank.a").map(|p| p.data.clone()).unwrap_or_default();
            WeightEncoding::from_a(a).unwrap_or_default()
        }
        None => WeightEncoding::new(),
    };
    let w = enc.weights();
    let label = if ckpt.is_some() { "from checkpoint" } else { "zero encoding" };
    println!("\nweight table w = cumsum(exp(a)) ({label}):");
    for (r, wr) in w.iter().enumerate().skip(1) {
        println!("  rank {r}: {wr:.6}");
    }
    Ok(())
}

/// Parameter inventory and learned scalars of a checkpoint.
pub fn inspect_checkpoint(ckpt: &Checkpoint) -> anyhow::Result<()> {
    println!("checkpoint: seed {}, epoch {}, step {}", ckpt.seed, ckpt.epoch, ckpt.step);
    let e = &ckpt.config.encoder;
    let t = &ckpt.config.text;
    println!(
        "image encoder: d={} d_model={} layers={} heads={} d_ff={} context={} embed={}",
        ckpt.config.d, e.d_model, e.n_layers, e.n_heads, e.d_ff, e.context_length, e.embed_dim
    );
    println!(
        "text encoder:  vocab={} d_model={} layers={} heads={} d_ff={} context={}",
        t.vocab_size, t.d_model, t.n_layers, t.n_heads, t.d_ff, t.context_length
    );
    println!("optimizer moments: {}", if ckpt.optim.is_some() { "present" } else { "absent" });

    println!("\nparameters:");
    println!("  {:<22} {:>14} {:>10}", "path", "shape", "numel");
    let mut total = 0usize;
    for (path, p) in ckpt.params.iter() {
        total += p.data.len();
        println!("  {:<22} {:>14} {:>10}", path, format!("{:?}", p.shape), p.data.len());
    }
    println!("  {:<22} {:>14} {:>10}", "total", "", total);

    if let Some(a) = ckpt.params.get("rank.a") {
        let w = WeightEncoding::from_a(a.data.clone())?.weights();
        let cells: Vec<String> = w.iter().enumerate().skip(1).map(|(r, x)| format!("w[{r}]={x:.4}")).collect();
        println!("\nweight table: {}", cells.join(" "));
    }
    if let Some(tau) = ckpt.params.get("temp.tau") {
        println!("temperature scale exp(tau) = {:.4}", tau.data[0].exp());
    }
    Ok(())
}

pub fn inspect(
    corpus: Option<&Path>,
    sample_id: Option<&str>,
    checkpoint_path: Option<&Path>,
) -> anyhow::Result<()> {
    let ckpt = match checkpoint_path {
        Some(p) => Some(checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    match (corpus, sample_id, &ckpt) {
        (Some(corpus), Some(id), _) => inspect_sample(corpus, id, ckpt.as_ref()),
        (None, None, Some(c)) => inspect_checkpoint(c),
        (Some(_), None, _) | (None, Some(_), _) => {
            bail!("inspecting a sample needs both --corpus and --sample")
        }
        (None, None, None) => bail!("nothing to inspect: give --corpus with --sample, or --checkpoint"),
    }
}

/// Runs the runtime property suite and reports one line per check.
/// Returns an error (nonzero exit) if anything fails.
pub fn verify(seed: u64) -> anyhow::Result<()> {
    let outcomes = semtok_core::verify::run_all(seed);
    let mut failures = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<28} {:>7.2}s  {}", o.name, o.seconds, o.detail);
        if !o.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} checks failed", outcomes.len());
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

