//! Grid search over `(layers, dim)`, one worker process per cell.
//!
//! Finished cells are recorded in `grid_manifest.json` as they complete, so a
//! rerun with the same inputs only executes the missing cells.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Instant;

use igt_core::train::{CellResult, TrainConfig};
use igt_core::{IgtError, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{content_hash, read_json, write_json, RunManifest};
use crate::{config_map, out_dir, train_kv, GridArgs};

pub const CSV_HEADER: &str = "L,D,val_mae,test_mae,test_mape,test_mare,seconds_per_epoch";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellRecord {
    Done {
        result: CellResult,
    },
    Failed {
        exit_code: Option<i32>,
        message: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridManifest {
    /// Hash of the merged config, data and grid axes.
    pub key: String,
    pub cells: BTreeMap<String, CellRecord>,
}

fn cell_name(l: usize, d: usize) -> String {
    format!("L{l}_D{d}")
}

fn csv_row(l: usize, d: usize, rec: &CellRecord) -> String {
    match rec {
        CellRecord::Done { result: r } => format!(
            "{l},{d},{},{},{},{},{}",
            r.val_mae,
            r.test.mae,
            100.0 * r.test.mape,
            100.0 * r.test.mare,
            r.seconds_per_epoch
        ),
        CellRecord::Failed { .. } => format!("{l},{d},NaN,NaN,NaN,NaN,NaN"),
    }
}

fn write_csv(path: &Path, cells: &[(usize, usize)], gm: &GridManifest) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for &(l, d) in cells {
        if let Some(rec) = gm.cells.get(&cell_name(l, d)) {
            s.push_str(&csv_row(l, d, rec));
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn run_cell(exe: &Path, data: &Path, config: &Path, dir: &Path, l: usize, d: usize) -> CellRecord {
    let cell_dir = dir.join("cells").join(cell_name(l, d));
    let spawn = || -> std::io::Result<std::process::ExitStatus> {
        std::fs::create_dir_all(&cell_dir)?;
        let log = std::fs::File::create(cell_dir.join("log.txt"))?;
        Command::new(exe)
            .arg("train")
            .arg("--data")
            .arg(data)
            .arg("--config")
            .arg(config)
            .args([
                "--layers",
                &l.to_string(),
                "--dim",
                &d.to_string(),
                "--quiet",
            ])
            .arg("--out-dir")
            .arg(&cell_dir)
            .stdout(log.try_clone()?)
            .stderr(log)
            .stdin(Stdio::null())
            .status()
    };
    match spawn() {
        Ok(status) if status.success() => match read_json(&cell_dir.join("result.json")) {
            Ok(result) => CellRecord::Done { result },
            Err(e) => CellRecord::Failed {
                exit_code: status.code(),
                message: e.to_string(),
            },
        },
        Ok(status) => {
            let log = std::fs::read_to_string(cell_dir.join("log.txt")).unwrap_or_default();
            let message = log
                .lines()
                .rev()
                .find(|l| !l.is_empty())
                .unwrap_or("")
                .to_string();
            CellRecord::Failed {
                exit_code: status.code(),
                message,
            }
        }
        Err(e) => CellRecord::Failed {
            exit_code: None,
            message: e.to_string(),
        },
    }
}

pub fn run(a: &GridArgs) -> Result<()> {
    let started = Instant::now();
    if a.grid_layers.is_empty() || a.grid_dims.is_empty() {
        return Err(IgtError::Config("grid axes must be non-empty".into()));
    }
    if a.jobs == 0 {
        return Err(IgtError::Config("--jobs must be at least 1".into()));
    }
    let kv = train_kv(&a.shared, &a.flags)?;
    let base = TrainConfig::from_kv(&kv)?;
    for &l in &a.grid_layers {
        for &d in &a.grid_dims {
            let mut c = base.clone();
            c.model.layers = l;
            c.model.dim = d;
            c.validate()?;
        }
    }
    let dir = out_dir(&a.shared)?;
    let data = std::fs::canonicalize(&a.data)
        .map_err(|e| IgtError::Data(format!("{}: {e}", a.data.display())))?;
    let data_hash = content_hash(&std::fs::read(&data)?);
    let config_path = dir.join("grid_config.cfg");
    std::fs::write(&config_path, kv.render())?;
    let key = content_hash(
        format!(
            "{}\n{data_hash}\n{:?}\n{:?}",
            kv.render(),
            a.grid_layers,
            a.grid_dims
        )
        .as_bytes(),
    );

    let manifest_path = dir.join("grid_manifest.json");
    let gm = if manifest_path.exists() {
        let gm: GridManifest = read_json(&manifest_path)?;
        if gm.key != key {
            return Err(IgtError::Config(format!(
                "{} belongs to a different grid, data set or config; use a fresh --out-dir",
                manifest_path.display()
            )));
        }
        gm
    } else {
        GridManifest {
            key,
            cells: BTreeMap::new(),
        }
    };
    let cells: Vec<(usize, usize)> = a
        .grid_layers
        .iter()
        .flat_map(|&l| a.grid_dims.iter().map(move |&d| (l, d)))
        .collect();
    let pending: Vec<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(l, d)| !gm.cells.contains_key(&cell_name(l, d)))
        .collect();
    let csv_path = dir.join("grid.csv");
    write_csv(&csv_path, &cells, &gm)?;
    eprintln!("{} of {} cells pending", pending.len(), cells.len());

    let exe = std::env::current_exe()?;
    let queue = Mutex::new(pending.iter());
    let state = Mutex::new((gm, None::<IgtError>));
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(pending.len()) {
            s.spawn(|| loop {
                let Some(&(l, d)) = queue.lock().expect("queue").next() else {
                    break;
                };
                let rec = run_cell(&exe, &data, &config_path, &dir, l, d);
                if let CellRecord::Failed { message, .. } = &rec {
                    eprintln!("cell L={l} D={d} failed: {message}");
                } else {
                    eprintln!("cell L={l} D={d} done");
                }
                let mut st = state.lock().expect("state");
                st.0.cells.insert(cell_name(l, d), rec);
                let saved = write_json(&manifest_path, &st.0)
                    .and_then(|()| write_csv(&csv_path, &cells, &st.0));
                if let Err(e) = saved {
                    st.1.get_or_insert(e);
                }
            });
        }
    });
    let (gm, err) = state.into_inner().expect("state");
    if let Some(e) = err {
        return Err(e);
    }
    write_csv(&csv_path, &cells, &gm)?;

    let mut m = RunManifest::new("grid", base.seed);
    m.config = config_map(&kv);
    m.config.insert("grid_layers".into(), join(&a.grid_layers));
    m.config.insert("grid_dims".into(), join(&a.grid_dims));
    m.inputs.insert(data.display().to_string(), data_hash);
    if let Some(p) = &a.shared.config {
        m.input(p)?;
    }
    for p in [&csv_path, &manifest_path, &config_path] {
        m.output(p);
    }
    let failed = gm
        .cells
        .values()
        .filter(|c| matches!(c, CellRecord::Failed { .. }))
        .count();
    m.notes
        .insert("cells_total".into(), cells.len().to_string());
    m.notes
        .insert("cells_executed".into(), pending.len().to_string());
    m.notes.insert("cells_failed".into(), failed.to_string());
    m.timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    m.write(&dir)?;
    println!(
        "executed {} of {} cells ({failed} failed); results in {}",
        pending.len(),
        cells.len(),
        csv_path.display()
    );
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
