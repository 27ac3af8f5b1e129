use std::path::Path;

use gnsp_core::metrics::{evaluate_accuracy, retrieval_recall_at_k};
use gnsp_core::{load_checkpoint, save_checkpoint, ContinualState};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::experiment::{build_data, execute, find_pairs, initial_model, HELD_OUT_PROBE};
use crate::outputs::{self, RunLog};
use crate::plot;
use crate::selftest::{self, SelftestOptions};

/// Runs the configured experiment and writes every artifact into `out_dir`.
/// `seed` overrides `trainer.seed`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    run_config(&cfg, out_dir)
}

pub fn run_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let dir = outputs::ensure_dir(out_dir)?;
    let mut log = RunLog::create(&dir)?;
    log.line(&format!("run started, method {:?}", cfg.trainer.method));
    std::fs::write(dir.join(outputs::EFFECTIVE_CONFIG_FILE), cfg.to_toml())
        .map_err(|e| CliError::runtime("output", e))?;

    let data = build_data(cfg)?;
    log.line(&format!(
        "generated {} tasks, {} reference pairs, {} probes",
        data.tasks.len(),
        data.reference.len(),
        data.probes.len()
    ));
    let model = initial_model(cfg)?;
    log.line(&format!(
        "initial model ready after {} pretraining steps",
        cfg.pretrain.iterations
    ));
    let result = execute(cfg, &data, model)?;
    log.line(&format!(
        "training finished: last {:.4}, average {:.4}",
        result.summary.last, result.summary.average
    ));

    outputs::write_accuracy(&dir.join(outputs::ACCURACY_FILE), &result.outcome.accuracy)?;
    outputs::write_summary(&dir.join(outputs::SUMMARY_FILE), &result.summary)?;
    outputs::write_gaps(&dir.join(outputs::GAP_FILE), &result.outcome.gaps)?;
    outputs::write_recall(&dir.join(outputs::RECALL_FILE), &result.recall)?;
    if let Some(rows) = &result.spectra {
        outputs::write_spectra(&dir.join(outputs::SPECTRA_FILE), rows)?;
    }
    if cfg.output.embeddings {
        let model = &result.outcome.state.model;
        for p in &data.probes {
            let img = model
                .embed_images(&p.pairs.images)
                .map_err(|e| CliError::runtime("export", e))?;
            let txt = model
                .embed_texts(&p.pairs.texts)
                .map_err(|e| CliError::runtime("export", e))?;
            outputs::write_embeddings(&dir.join(format!("embeddings_{}.csv", p.name)), &img, &txt)?;
        }
    }
    if cfg.output.plots {
        plot::plot_file(&dir.join(outputs::GAP_FILE), &dir.join("gap.svg"), false)?;
        if result.spectra.is_some() {
            plot::plot_file(&dir.join(outputs::SPECTRA_FILE), &dir.join("spectra.svg"), true)?;
        }
    }
    save_checkpoint(&result.outcome.state, &dir.join(outputs::CHECKPOINT_FILE))
        .map_err(|e| CliError::runtime("checkpoint", e))?;
    log.line("run complete");
    Ok(())
}

pub fn cmd_selftest(opts: SelftestOptions) -> Result<(), CliError> {
    let failures = selftest::run(opts);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failures))
    }
}

pub fn cmd_plot(input: &Path, output: &Path, log_y: bool) -> Result<(), CliError> {
    plot::plot_file(input, output, log_y)
}

fn load_state(path: &Path) -> Result<ContinualState, CliError> {
    load_checkpoint(path).map_err(|e| CliError::runtime("checkpoint", e))
}

/// Scores a saved model against the tasks and probes described by `config`.
/// Prints `metric,name,value` rows.
pub fn cmd_eval(checkpoint: &Path, config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let state = load_state(checkpoint)?;
    let data = build_data(&cfg)?;
    let phase = |e| CliError::runtime("evaluate", e);
    println!("metric,name,value");
    for (_, test) in &data.tasks {
        println!(
            "accuracy,{},{}",
            test.name,
            evaluate_accuracy(&state.model, test).map_err(phase)?
        );
    }
    for p in &data.probes {
        let img = state.model.embed_images(&p.pairs.images).map_err(phase)?;
        let txt = state.model.embed_texts(&p.pairs.texts).map_err(phase)?;
        println!(
            "gap,{},{}",
            p.name,
            gnsp_core::losses::modality_gap(&img, &txt).map_err(phase)?
        );
    }
    for &k in &cfg.output.recall_k {
        let r = retrieval_recall_at_k(&state.model, &data.probes[0].pairs, k).map_err(phase)?;
        println!("recall@{k},{HELD_OUT_PROBE},{r}");
    }
    Ok(())
}

/// Dumps image and text embeddings of a named pair set for external
/// projection tools. Probe data is regenerated from `config` (defaults when
/// absent).
pub fn cmd_export_embeddings(
    checkpoint: &Path,
    probe: &str,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let state = load_state(checkpoint)?;
    let data = build_data(&cfg)?;
    let pairs = find_pairs(&data, probe).ok_or_else(|| {
        let mut names = vec![
            HELD_OUT_PROBE.to_string(),
            crate::experiment::REFERENCE_PROBE.to_string(),
        ];
        names.extend(data.tasks.iter().map(|(t, _)| t.name.clone()));
        CliError::input(
            None,
            format!("unknown probe `{probe}`; available: {}", names.join(", ")),
        )
    })?;
    let phase = |e| CliError::runtime("export", e);
    let img = state.model.embed_images(&pairs.images).map_err(phase)?;
    let txt = state.model.embed_texts(&pairs.texts).map_err(phase)?;
    outputs::write_embeddings(out, &img, &txt)
}
