//! Diagnostics over distilled data and training runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{capture_batch_stats, read_running_stats, Model};
use crate::nn::{NormMode, Pass};
use crate::pipeline::store::write_atomic;
use crate::posteval::{csv_err, TrainingTrace};
use crate::recover::{RoundProvenance, SyntheticSet};
use crate::tensor::{ImageBatch, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_class: BTreeMap<usize, f64>,
    pub overall_mean: f64,
    pub embed_arch: String,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity within each class of `embeddings` (rows),
/// and the mean over classes.
pub fn cosine_report(embeddings: &Tensor, labels: &[usize], num_classes: usize, embed_arch: &str) -> Result<DiversityReport> {
    let (n, _) = embeddings.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} embeddings for {} labels", labels.len())));
    }
    let mut per_class = BTreeMap::new();
    for class in 0..num_classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples(format!("class {class} has one sample")));
        }
        let (mut s, mut pairs) = (0.0, 0usize);
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                s += cosine(embeddings.item(i), embeddings.item(j));
                pairs += 1;
            }
        }
        per_class.insert(class, s / pairs as f64);
    }
    if per_class.is_empty() {
        return Err(Error::InsufficientSamples("no classes present".into()));
    }
    let overall_mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(DiversityReport {
        per_class,
        overall_mean,
        embed_arch: embed_arch.to_string(),
    })
}

/// Embeds every distilled image with `embed_model`'s penultimate features
/// (running statistics) and reports intra-class cosine similarity.
pub fn intraclass_cosine(distilled: &SyntheticSet, embed_model: &Model) -> Result<DiversityReport> {
    if distilled.ipc < 2 {
        return Err(Error::InsufficientSamples(format!("ipc {} < 2", distilled.ipc)));
    }
    let emb = embed_model.embed(&distilled.images, &mut Pass::new(NormMode::Running, false))?;
    cosine_report(&emb, &distilled.labels, distilled.num_classes, &embed_model.spec().member_id())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGap {
    pub layer_id: String,
    pub mean_gap: f64,
    pub var_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNDiscrepancyReport {
    pub per_layer: Vec<LayerGap>,
    pub batches_evaluated: usize,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-layer L2 distance between each batch's statistics and the teacher's
/// running statistics, averaged over batches.
pub fn bn_discrepancy(batches: &[ImageBatch], teacher: &Model) -> Result<BNDiscrepancyReport> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let running = read_running_stats(teacher)?;
    let mut per_layer: Vec<LayerGap> = running
        .per_layer
        .iter()
        .map(|l| LayerGap {
            layer_id: l.layer_id.clone(),
            mean_gap: 0.0,
            var_gap: 0.0,
        })
        .collect();
    for b in batches {
        let cap = capture_batch_stats(teacher, b)?;
        for ((gap, run), got) in per_layer.iter_mut().zip(&running.per_layer).zip(&cap.stats.per_layer) {
            gap.mean_gap += l2(&got.mean, &run.mean);
            gap.var_gap += l2(&got.var, &run.var);
        }
    }
    let k = batches.len() as f64;
    for g in &mut per_layer {
        g.mean_gap /= k;
        g.var_gap /= k;
    }
    Ok(BNDiscrepancyReport {
        per_layer,
        batches_evaluated: batches.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run: String,
    pub epoch: usize,
    pub train_top1: f64,
    pub test_top1: f64,
}

/// Writes `curves.csv` and `curves.svg` (train and test top-1 per run) into
/// `out_dir`; returns both paths.
pub fn emit_curves(traces: &[TrainingTrace], labels: &[String], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if traces.is_empty() {
        return Err(Error::Alignment("no traces to plot".into()));
    }
    if traces.len() != labels.len() {
        return Err(Error::Alignment(format!("{} traces but {} labels", traces.len(), labels.len())));
    }
    let epochs: Vec<usize> = traces[0].per_epoch.iter().map(|r| r.epoch).collect();
    for (t, l) in traces.iter().zip(labels) {
        if t.per_epoch.iter().map(|r| r.epoch).ne(epochs.iter().copied()) {
            return Err(Error::Alignment(format!("run `{l}` covers different epochs")));
        }
    }
    let csv_path = out_dir.join("curves.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for (t, l) in traces.iter().zip(labels) {
        for r in &t.per_epoch {
            w.serialize(CurveRow {
                run: l.clone(),
                epoch: r.epoch,
                train_top1: r.train_top1,
                test_top1: r.test_top1,
            })
            .map_err(|e| csv_err(&csv_path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: csv_path.clone(),
        msg: e.to_string(),
    })?;
    write_atomic(&csv_path, &bytes)?;

    let svg_path = out_dir.join("curves.svg");
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        let plot_err = |e: String| Error::Format {
            path: svg_path.clone(),
            msg: e,
        };
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let last = epochs.last().copied().unwrap_or(0).max(1);
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(0usize..last, 0f64..100f64)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("top-1 (%)")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (k, (t, l)) in traces.iter().zip(labels).enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let train: Vec<(usize, f64)> = t.per_epoch.iter().map(|r| (r.epoch, r.train_top1)).collect();
            let test: Vec<(usize, f64)> = t
                .per_epoch
                .iter()
                .filter(|r| r.test_top1.is_finite())
                .map(|r| (r.epoch, r.test_top1))
                .collect();
            chart
                .draw_series(LineSeries::new(train, color.stroke_width(1)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(format!("{l} train"));
            chart
                .draw_series(LineSeries::new(test, color.stroke_width(3)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(format!("{l} test"));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    write_atomic(&svg_path, svg.as_bytes())?;
    Ok((csv_path, svg_path))
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<CurveRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Cumulative wall-clock marks (ms) after each optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub marks_ms: Vec<f64>,
    pub images_per_step: usize,
}

impl From<&RoundProvenance> for RunLog {
    fn from(p: &RoundProvenance) -> Self {
        let mut marks_ms = vec![0.0];
        marks_ms.extend(&p.timing_ms);
        RunLog {
            marks_ms,
            images_per_step: p.images_per_step,
        }
    }
}

/// Mean milliseconds per optimized image per iteration.
pub fn timing_probe(log: &RunLog) -> Result<f64> {
    if log.marks_ms.len() < 2 {
        return Err(Error::IncompleteLog(format!("{} timing marks", log.marks_ms.len())));
    }
    if log.images_per_step == 0 {
        return Err(Error::IncompleteLog("no images per step".into()));
    }
    let span = log.marks_ms[log.marks_ms.len() - 1] - log.marks_ms[0];
    let steps = (log.marks_ms.len() - 1) as f64;
    Ok(span / steps / log.images_per_step as f64)
}
