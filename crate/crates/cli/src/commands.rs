//! The five subcommands. Each one loads its inputs first, then claims the
//! output directory, writes `run_config.toml`, and emits every artifact
//! through atomic writes, so a failed run never leaves a half-written file.

use serde::Serialize;

use glotta_core::corpus;
use glotta_core::error::{Error, Result};
use glotta_core::fsio;
use glotta_core::model::{load_parameters, Component};
use glotta_core::profiler::{
    self, corpus_targets, rank_agreement, write_importance_csv, AbsConvention, ImportanceMethod,
    ImportanceTarget,
};
use glotta_core::repr::{similarity_profile, write_layer_profile_csv, write_similarity_csv};
use glotta_core::tokenizer::{fertility, Tokenizer};
use glotta_core::training::{train_on_documents, TrainOptions};

use crate::config::*;

pub fn tokenizer_train(mut cfg: TokenizerTrainConfig, run: RunFlags) -> Result<()> {
    let out = resolve_run(run.seed, run.out, &mut cfg.seed, &mut cfg.out)?;
    let docs = corpus::load_documents(&cfg.corpus)?;
    if docs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no documents in {}",
            cfg.corpus.display()
        )));
    }
    let tok = Tokenizer::train(docs.iter().map(|d| d.text.as_bytes()), cfg.n_merges);

    prepare_out(&out, run.force)?;
    write_provenance("tokenizer-train", &cfg, &out)?;
    let path = out.join("tokenizer.txt");
    tok.save(&path)?;
    println!(
        "tokenizer: {} merges, vocab {} -> {}",
        tok.n_merges(),
        tok.vocab_size(),
        path.display()
    );
    Ok(())
}

pub fn tokenizer_fertility(mut cfg: FertilityConfig, run: RunFlags) -> Result<()> {
    let out = resolve_run(run.seed, run.out, &mut cfg.seed, &mut cfg.out)?;
    let tok = Tokenizer::load(&cfg.tokenizer)?;
    let parallel = corpus::load_parallel(&cfg.parallel)?;
    let report = fertility(&tok, parallel.lang_texts());

    prepare_out(&out, run.force)?;
    write_provenance("tokenizer-fertility", &cfg, &out)?;
    let path = out.join("fertility.csv");
    fsio::atomic_write_with(&path, |w| {
        report.write_csv(w).map_err(|e| Error::io(&path, e))
    })?;
    println!(
        "fertility.csv: {} languages -> {}",
        report.per_lang.len(),
        path.display()
    );
    Ok(())
}

pub fn train(mut cfg: TrainCmdConfig, run: RunFlags) -> Result<()> {
    let out = resolve_run(run.seed, run.out, &mut cfg.seed, &mut cfg.out)?;
    // The run seed is the training seed; a seed inside [train] is ignored.
    cfg.train.seed = cfg.seed;
    let tok = Tokenizer::load(&cfg.tokenizer)?;
    let docs = corpus::load_documents(&cfg.corpus)?;

    prepare_out(&out, run.force)?;
    write_provenance("train", &cfg, &out)?;
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        resume: cfg.resume.clone(),
    };
    let result = train_on_documents(&cfg.model, &cfg.train, &docs, &tok, &opts)?;
    let last = result.records.last().expect("at least one step ran");
    println!(
        "trained to step {} (loss {:.4}), {} checkpoints in {}",
        last.step,
        last.loss,
        result.checkpoints.len(),
        out.display()
    );
    Ok(())
}

/// Everything the per-language CSVs compress away: raw per-neuron values
/// plus the set aggregations at (layer, component) and layer granularity.
#[derive(Serialize)]
struct ImportanceBundle<'a> {
    step: u64,
    method: ImportanceMethod,
    convention: AbsConvention,
    components: Vec<&'static str>,
    languages: Vec<LanguageImportance<'a>>,
}

#[derive(Serialize)]
struct LanguageImportance<'a> {
    lang: &'a str,
    sentences: usize,
    /// `values[layer][component][channel]`.
    values: &'a Vec<Vec<Vec<f64>>>,
    layer_component_totals: Vec<Vec<f64>>,
    layer_totals: Vec<f64>,
}

#[derive(Serialize)]
struct ValidationReport {
    spearman: f64,
    sampled: usize,
    rows: usize,
    seed: u64,
    soft_floor: f64,
    below_floor: bool,
}

pub fn profile_neurons(mut cfg: ProfileConfig, run: RunFlags, validate: bool) -> Result<()> {
    let out = resolve_run(run.seed, run.out, &mut cfg.seed, &mut cfg.out)?;
    let (params, model_cfg, step) = load_parameters(&cfg.checkpoint)?;
    let tok = Tokenizer::load(&cfg.tokenizer)?;
    let parallel = corpus::load_parallel(&cfg.parallel)?;
    let maps = profiler::profile_languages(
        &params,
        &model_cfg,
        &tok,
        &parallel,
        cfg.method,
        cfg.convention,
    )?;

    prepare_out(&out, run.force)?;
    write_provenance("profile-neurons", &cfg, &out)?;
    for (lang, map) in &maps {
        let path = out.join(format!("importance_{lang}.csv"));
        fsio::atomic_write_with(&path, |w| {
            write_importance_csv(map, w).map_err(|e| Error::io(&path, e))
        })?;
    }
    let bundle = ImportanceBundle {
        step,
        method: cfg.method,
        convention: cfg.convention,
        components: Component::ALL.iter().map(|c| c.name()).collect(),
        languages: maps
            .iter()
            .map(|(lang, map)| LanguageImportance {
                lang,
                sentences: map.sentences,
                values: &map.values,
                layer_component_totals: map.layer_component_totals(),
                layer_totals: map.layer_totals(),
            })
            .collect(),
    };
    let path = out.join("importance.json");
    fsio::atomic_write_with(&path, |w| {
        serde_json::to_writer(&mut *w, &bundle)
            .map_err(|e| Error::InvalidInput(format!("unencodable importance bundle: {e}")))?;
        writeln!(w).map_err(|e| Error::io(&path, e))
    })?;
    println!(
        "profiled {} languages at step {step}: {} layers x 8 components each",
        maps.len(),
        model_cfg.n_layers
    );

    if validate {
        let targets = corpus_targets(&params, &model_cfg, &tok, &parallel, cfg.validate_rows)?;
        let refs: Vec<&dyn ImportanceTarget> =
            targets.iter().map(|t| t as &dyn ImportanceTarget).collect();
        let agreement = rank_agreement(&refs, cfg.convention, cfg.validate_sample, cfg.seed)?;
        let report = ValidationReport {
            spearman: agreement.spearman,
            sampled: agreement.sampled,
            rows: cfg.validate_rows,
            seed: cfg.seed,
            soft_floor: 0.5,
            below_floor: agreement.spearman < 0.5,
        };
        let path = out.join("validation.json");
        fsio::atomic_write_with(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, &report)
                .map_err(|e| Error::InvalidInput(format!("unencodable validation report: {e}")))?;
            writeln!(w).map_err(|e| Error::io(&path, e))
        })?;
        println!(
            "validation: spearman(exact, first-order) = {:.4} over {} neurons",
            report.spearman, report.sampled
        );
        if report.below_floor {
            eprintln!(
                "warning: rank agreement {:.4} is below the 0.5 soft floor",
                report.spearman
            );
        }
    }
    Ok(())
}

pub fn analyze_repr(mut cfg: ReprConfig, run: RunFlags) -> Result<()> {
    let out = resolve_run(run.seed, run.out, &mut cfg.seed, &mut cfg.out)?;
    let (params, model_cfg, _) = load_parameters(&cfg.checkpoint)?;
    let tok = Tokenizer::load(&cfg.tokenizer)?;
    let parallel = corpus::load_parallel(&cfg.parallel)?;
    let profile = similarity_profile(&params, &model_cfg, &tok, &parallel)?;

    prepare_out(&out, run.force)?;
    write_provenance("analyze-repr", &cfg, &out)?;
    for matrix in &profile.matrices {
        let path = out.join(format!("similarity_{}.csv", matrix.layer));
        fsio::atomic_write_with(&path, |w| {
            write_similarity_csv(matrix, w).map_err(|e| Error::io(&path, e))
        })?;
    }
    let path = out.join("layer_profile.csv");
    fsio::atomic_write_with(&path, |w| {
        write_layer_profile_csv(&profile, w).map_err(|e| Error::io(&path, e))
    })?;
    println!(
        "similarity profile: {} languages across {} states (emb + {} blocks)",
        profile.languages.len(),
        profile.labels.len(),
        model_cfg.n_layers
    );
    Ok(())
}

/// The shared `--seed` / `--out` / `--force` overrides.
pub struct RunFlags {
    pub seed: Option<u64>,
    pub out: Option<std::path::PathBuf>,
    pub force: bool,
}
