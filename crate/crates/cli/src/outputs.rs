//! CSV artifacts of a run. Numbers use Rust's shortest round-trip float
//! formatting, so identical runs produce identical bytes.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gnsp_core::metrics::GapSeries;
use gnsp_core::projection::SpectrumRow;
use gnsp_core::{AccuracyMatrix, Matrix, Summary};

use crate::error::CliError;

pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const RECALL_FILE: &str = "recall.csv";
pub const SPECTRA_FILE: &str = "spectra.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const LOG_FILE: &str = "run.log";

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::runtime("output", format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<(), CliError> {
    w.flush()
        .map_err(|e| CliError::runtime("output", format!("{}: {e}", path.display())))
}

macro_rules! row {
    ($w:expr, $path:expr, $($field:expr),+ $(,)?) => {
        $w.write_record([$($field.to_string()),+])
            .map_err(|e| CliError::runtime("output", format!("{}: {e}", $path.display())))?
    };
}

pub fn write_accuracy(path: &Path, acc: &AccuracyMatrix) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let mut header = vec!["after_task".to_string()];
    header.extend(acc.task_names.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::runtime("output", e))?;
    for (i, r) in acc.grid.row_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| CliError::runtime("output", e))?;
    }
    finish(w, path)
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<(), CliError> {
    let mut w = writer(path)?;
    row!(w, path, "transfer", "last", "average");
    let transfer = s.transfer.map(|t| t.to_string()).unwrap_or_default();
    row!(w, path, transfer, s.last, s.average);
    finish(w, path)
}

pub fn write_gaps(path: &Path, gaps: &GapSeries) -> Result<(), CliError> {
    let mut w = writer(path)?;
    row!(w, path, "checkpoint", "probe", "gap");
    for r in &gaps.records {
        row!(w, path, r.checkpoint, r.probe, r.gap);
    }
    finish(w, path)
}

pub fn write_recall(path: &Path, recall: &[(usize, f64)]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    row!(w, path, "k", "recall");
    for (k, r) in recall {
        row!(w, path, k, r);
    }
    finish(w, path)
}

pub fn write_spectra(path: &Path, rows: &[SpectrumRow]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    row!(w, path, "layer", "index", "eigenvalue", "selected");
    for r in rows {
        row!(w, path, r.layer, r.index, r.eigenvalue, u8::from(r.selected));
    }
    finish(w, path)
}

/// One row per embedding: `index,modality,e0,…`.
pub fn write_embeddings(path: &Path, images: &Matrix, texts: &Matrix) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let mut header = vec!["index".to_string(), "modality".to_string()];
    header.extend((0..images.cols()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(|e| CliError::runtime("output", e))?;
    for (modality, m) in [("image", images), ("text", texts)] {
        for (i, r) in m.row_iter().enumerate() {
            let mut rec = vec![i.to_string(), modality.to_string()];
            rec.extend(r.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| CliError::runtime("output", e))?;
        }
    }
    finish(w, path)
}

/// Append-only, timestamped log. The only output that is allowed to differ
/// between otherwise identical runs.
pub struct RunLog {
    file: File,
}

impl RunLog {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::runtime("output", format!("{}: {e}", path.display())))?;
        Ok(Self { file })
    }

    pub fn line(&mut self, msg: &str) {
        log::info!("{msg}");
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        // a failing log write must not abort the run
        let _ = writeln!(self.file, "[{}.{:03}] {msg}", t.as_secs(), t.subsec_millis());
    }
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime("output", format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}
