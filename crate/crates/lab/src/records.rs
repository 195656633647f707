//! CSV artifacts and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sane_core::refinery::StepReport;
use sane_core::theory::{GapCell, RecoveryRow};

use crate::error::{LabError, Result};

pub const RECOVERY_HEADER: [&str; 8] = [
    "iter",
    "loss",
    "label_err",
    "pred_err",
    "frac_label_correct",
    "frac_pred_correct",
    "resid_splus",
    "resid_sminus",
];

pub const GAP_HEADER: [&str; 6] = ["rho", "seed", "label_err", "train_risk", "heldout_risk", "gap"];

pub const TRAIN_HEADER: [&str; 7] = [
    "iter",
    "loss",
    "onehot_loss",
    "mixup_loss",
    "mu",
    "mean_alpha",
    "mean_beta",
];

pub const SPECTRUM_HEADER: [&str; 2] = ["index", "singular_value"];

// `{:?}` is the shortest string that parses back to the same f64
fn real(v: f64) -> String {
    format!("{v:?}")
}

fn to_csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    // writing into a Vec cannot fail
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

pub fn recovery_csv(rows: &[RecoveryRow]) -> String {
    to_csv(
        RECOVERY_HEADER,
        rows.iter().map(|r| {
            [
                r.iter.to_string(),
                real(r.loss),
                real(r.label_err),
                real(r.pred_err),
                real(r.frac_label_correct),
                real(r.frac_pred_correct),
                real(r.resid_splus),
                real(r.resid_sminus),
            ]
        }),
    )
}

pub fn gap_csv(cells: &[GapCell]) -> String {
    to_csv(
        GAP_HEADER,
        cells.iter().map(|c| {
            [
                real(c.rho),
                c.seed.to_string(),
                real(c.label_err),
                real(c.train_risk),
                real(c.heldout_risk),
                real(c.gap),
            ]
        }),
    )
}

pub fn train_csv(reports: &[StepReport]) -> String {
    to_csv(
        TRAIN_HEADER,
        reports.iter().map(|r| {
            [
                r.iteration.to_string(),
                real(r.loss),
                real(r.onehot_loss),
                real(r.mixup_loss),
                real(r.mu),
                real(r.mean_alpha),
                real(r.mean_beta),
            ]
        }),
    )
}

pub fn spectrum_csv(values: &[f64]) -> String {
    to_csv(
        SPECTRUM_HEADER,
        values.iter().enumerate().map(|(i, v)| [(i + 1).to_string(), real(*v)]),
    )
}

/// Reads back a recovery metrics CSV.
pub fn parse_recovery_csv(text: &str) -> Result<Vec<RecoveryRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| LabError::Format(format!("metrics csv: {e}")))?
        .clone();
    if header.iter().ne(RECOVERY_HEADER) {
        return Err(LabError::Format("metrics csv: unexpected header".into()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| LabError::Format(format!("metrics csv: {e}")))?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| LabError::Format(format!("metrics csv: bad number `{}`", &record[i])))
        };
        rows.push(RecoveryRow {
            iter: record[0]
                .parse()
                .map_err(|_| LabError::Format(format!("metrics csv: bad iteration `{}`", &record[0])))?,
            loss: num(1)?,
            label_err: num(2)?,
            pred_err: num(3)?,
            frac_label_correct: num(4)?,
            frac_pred_correct: num(5)?,
            resid_splus: num(6)?,
            resid_sminus: num(7)?,
            alpha: f64::NAN,
            positive_pred_err: f64::NAN,
            noisy_label_err: f64::NAN,
        });
    }
    Ok(rows)
}

/// Structured summary written last into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub duration_seconds: f64,
    /// Every file under the run directory, relative and `/`-separated, sorted,
    /// including `manifest.json` itself.
    pub files: Vec<String>,
    pub config: String,
    pub version: String,
}

/// Version string: `git describe` at build time, or the crate version.
pub fn version() -> &'static str {
    option_env!("SANE_LAB_GIT_DESCRIBE").unwrap_or(env!("CARGO_PKG_VERSION"))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| LabError::io(path, e))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| LabError::io(dir, e))? {
        let entry = entry.map_err(|e| LabError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Lists the run directory, adds `manifest.json`, and writes the manifest.
pub fn write_manifest(
    dir: &Path,
    run_id: &str,
    command: &str,
    seed: u64,
    duration_seconds: f64,
) -> Result<RunManifest> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.push("manifest.json".to_string());
    files.sort();
    files.dedup();
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        command: command.to_string(),
        seed,
        duration_seconds,
        files,
        config: "config.cfg".to_string(),
        version: version().to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

/// Creates `out/run_id`, adding `-2`, `-3`, … on collision.
pub fn create_run_dir(out: &Path, base_id: &str) -> Result<(String, PathBuf)> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    for attempt in 1.. {
        let id = if attempt == 1 {
            base_id.to_string()
        } else {
            format!("{base_id}-{attempt}")
        };
        let dir = out.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(LabError::io(&dir, e)),
        }
    }
    unreachable!("attempt counter is unbounded")
}
