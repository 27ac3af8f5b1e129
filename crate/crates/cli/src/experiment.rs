//! Turns a [`RunConfig`] into datasets, an initial model and a finished run.

use gnsp_core::metrics::{retrieval_recall_at_k, Probe};
use gnsp_core::projection::{spectrum_rows, SpectrumRow};
use gnsp_core::tasks::split_cil;
use gnsp_core::{
    make_reference_set, make_sequence, make_task, pretrain_alignment, run_sequence, summarize, DualEncoder,
    ReferenceSet, RunOutcome, Summary, TaskDataset,
};

use crate::config::{Protocol, RunConfig};
use crate::error::CliError;

/// Name of the held-out probe drawn like the reference set.
pub const HELD_OUT_PROBE: &str = "probe";
/// Name under which the reference set itself can be exported.
pub const REFERENCE_PROBE: &str = "reference";

/// Everything a run needs except the model.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub tasks: Vec<(TaskDataset, TaskDataset)>,
    pub reference: ReferenceSet,
    /// The held-out probe first, then (optionally) each task's test pairs.
    pub probes: Vec<Probe>,
}

pub fn build_data(cfg: &RunConfig) -> Result<ExperimentData, CliError> {
    let phase = |e| CliError::runtime("data", e);
    let (d_img, d_txt) = (cfg.d_image_in(), cfg.d_text_in());
    let tasks = match cfg.tasks.protocol {
        Protocol::Til => make_sequence(&cfg.sequence_spec()).map_err(phase)?,
        Protocol::Cil => {
            let t = &cfg.tasks;
            let (train, test) = make_task(
                t.base_seed + 1,
                t.count * t.classes,
                t.per_class,
                d_img,
                d_txt,
                t.separations[0],
            )
            .map_err(phase)?;
            let trains = split_cil(&train, t.count).map_err(phase)?;
            let tests = split_cil(&test, t.count).map_err(phase)?;
            trains
                .into_iter()
                .zip(tests)
                .enumerate()
                .map(|(i, (mut a, mut b))| {
                    a.name = format!("task{}", i + 1);
                    b.name = a.name.clone();
                    (a, b)
                })
                .collect()
        }
    };
    let reference = make_reference_set(cfg.reference.seed, cfg.reference.size, d_img, d_txt).map_err(phase)?;
    let mut probes = vec![Probe {
        name: HELD_OUT_PROBE.to_string(),
        pairs: make_reference_set(cfg.probes.seed, cfg.probes.size, d_img, d_txt).map_err(phase)?,
    }];
    if cfg.probes.include_task_tests {
        probes.extend(tasks.iter().map(|(_, test)| Probe {
            name: test.name.clone(),
            pairs: test.as_pairs(),
        }));
    }
    Ok(ExperimentData {
        tasks,
        reference,
        probes,
    })
}

/// Randomly initialized model, contrastively aligned on a held-out corpus.
pub fn initial_model(cfg: &RunConfig) -> Result<DualEncoder, CliError> {
    let mut model = DualEncoder::init(&cfg.model_spec(), cfg.model.seed).map_err(|e| CliError::runtime("init", e))?;
    let p = &cfg.pretrain;
    if p.iterations > 0 {
        let corpus = make_reference_set(p.corpus_seed, p.corpus_size, cfg.d_image_in(), cfg.d_text_in())
            .map_err(|e| CliError::runtime("pretrain", e))?;
        pretrain_alignment(
            &mut model,
            &corpus,
            p.iterations,
            p.learning_rate,
            p.batch_size,
            cfg.trainer.map_temperature,
            p.seed,
        )
        .map_err(|e| CliError::runtime("pretrain", e))?;
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: RunOutcome,
    pub summary: Summary,
    /// `(k, recall@k)` on the held-out probe with the final model.
    pub recall: Vec<(usize, f64)>,
    pub spectra: Option<Vec<SpectrumRow>>,
}

pub fn execute(cfg: &RunConfig, data: &ExperimentData, initial: DualEncoder) -> Result<RunResult, CliError> {
    let outcome = run_sequence(
        initial,
        &data.tasks,
        &data.reference,
        &data.probes,
        &cfg.trainer_config(),
    )
    .map_err(|e| CliError::runtime("train", e))?;
    let summary = summarize(&outcome.accuracy);
    let held_out = &data.probes[0].pairs;
    let recall = cfg
        .output
        .recall_k
        .iter()
        .map(|&k| Ok((k, retrieval_recall_at_k(&outcome.state.model, held_out, k)?)))
        .collect::<gnsp_core::Result<Vec<_>>>()
        .map_err(|e| CliError::runtime("evaluate", e))?;
    let spectra = if cfg.output.spectra {
        Some(spectrum_rows(&outcome.state.gram, cfg.trainer.rho).map_err(|e| CliError::runtime("spectra", e))?)
    } else {
        None
    };
    Ok(RunResult {
        outcome,
        summary,
        recall,
        spectra,
    })
}

/// Looks up a named pair set: the held-out probe, the reference set, or a
/// task's test pairs.
pub fn find_pairs(data: &ExperimentData, name: &str) -> Option<ReferenceSet> {
    if name == REFERENCE_PROBE {
        return Some(data.reference.clone());
    }
    if let Some(p) = data.probes.iter().find(|p| p.name == name) {
        return Some(p.pairs.clone());
    }
    data.tasks
        .iter()
        .find(|(_, t)| t.name == name)
        .map(|(_, t)| t.as_pairs())
}
