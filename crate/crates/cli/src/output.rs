//! Run directories, manifests, CSV tables and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use floodfuse_core::metrics::MetricReport;
use floodfuse_core::train::EpochRecord;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Enough to rerun a command: what ran, with which configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<root>/<name>-<command>-NNN` with the first free counter.
    pub fn create(root: &Path, name: &str, command: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        for n in 1.. {
            let path = root.join(format!("{name}-{command}-{n:03}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!()
    }

    pub fn at(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_text(name, &serde_json::to_string_pretty(value).expect("serializable"))
    }

    /// Config snapshot plus run manifest.
    pub fn write_header(&self, cfg: &ExperimentConfig, command: &str, args: &[String]) -> Result<()> {
        self.write_text(CONFIG_SNAPSHOT, &cfg.snapshot())?;
        self.write_json(
            RUN_MANIFEST,
            &RunManifest {
                command: command.to_string(),
                args: args.to_vec(),
                config_hash: cfg.hash(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.training.seed,
            },
        )?;
        Ok(())
    }
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_miou: f64,
    train_eval_miou: Option<f64>,
    val_loss: Option<f64>,
    val_miou: Option<f64>,
    val_mdice: Option<f64>,
    improved: bool,
    grad_norm: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let rows: Vec<EpochRow> = history
        .iter()
        .map(|r| EpochRow {
            epoch: r.epoch,
            lr: r.lr,
            train_loss: r.train_loss,
            train_miou: r.train_miou,
            train_eval_miou: r.train_eval_miou,
            val_loss: r.val_loss,
            val_miou: r.val_miou,
            val_mdice: r.val_mdice,
            improved: r.improved,
            grad_norm: r.grad_norm,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn write_per_image(path: &Path, report: &MetricReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        miou: f64,
    }
    let rows: Vec<Row> = report.per_image_miou.iter().map(|(id, m)| Row { id, miou: *m }).collect();
    write_csv(path, &rows)
}

/// One named series of `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

/// Line chart with markers, one colour per series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let err = |e: String| CliError::Plot {
        path: path.to_path_buf(),
        message: e,
    };
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
        (lo - d, hi + d)
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (name, s)) in series.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let data: Vec<(f64, f64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(data.clone(), colour.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colour.stroke_width(2)));
        chart
            .draw_series(data.into_iter().map(|p| Circle::new(p, 3, colour.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}

/// Loss and mIoU curves of a training history.
pub fn plot_history(dir: &RunDir, history: &[EpochRecord]) -> Result<()> {
    let ep = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        history.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let mut loss: Vec<Series> = vec![("train".into(), ep(&|r| Some(r.train_loss)))];
    let val_loss = ep(&|r| r.val_loss);
    if !val_loss.is_empty() {
        loss.push(("val".into(), val_loss));
    }
    line_plot(&dir.join("loss.svg"), "Loss", "epoch", "cross-entropy", &loss)?;
    let mut miou: Vec<Series> = vec![("train".into(), ep(&|r| Some(r.train_miou)))];
    for (name, s) in [("train (eval)", ep(&|r| r.train_eval_miou)), ("val", ep(&|r| r.val_miou))] {
        if !s.is_empty() {
            miou.push((name.into(), s));
        }
    }
    line_plot(&dir.join("miou.svg"), "mIoU", "epoch", "mIoU", &miou)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.svg");
        let s: Vec<Series> = vec![
            ("a".into(), vec![(0.2, 0.5), (0.4, 0.6)]),
            ("b".into(), vec![(0.2, 0.4), (0.4, f64::NAN)]),
        ];
        line_plot(&p, "t", "x", "y", &s).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline") || text.contains("<path"));
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::create(dir.path(), "toy", "train").unwrap();
        let b = RunDir::create(dir.path(), "toy", "train").unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.ends_with("toy-train-001"));
    }
}
