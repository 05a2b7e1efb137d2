//! Parameter census, multiply-accumulate counts and forward latency per
//! head mode.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneSpec};
use crate::boxes::BBox;
use crate::error::Result;
use crate::head::HeadMode;
use crate::model::{Detector, ModelConfig};
use crate::tensor::{Element, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: HeadMode,
    pub head_params: usize,
    pub total_params: usize,
    pub head_macs: u64,
    pub total_macs: u64,
    pub proposals: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub image_size: (usize, usize),
    pub warmup: usize,
    pub runs: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn row(&self, mode: HeadMode) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Mean latency of `mode` relative to the baseline head.
    pub fn latency_ratio(&self, mode: HeadMode) -> Option<f64> {
        Some(self.row(mode)?.latency_ms_mean / self.row(HeadMode::Baseline)?.latency_ms_mean)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>12} {:>12} {:>14} {:>14} {:>6} {:>10} {:>10}\n",
            "mode", "head params", "all params", "head MACs", "all MACs", "rois", "mean ms", "min ms"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<20} {:>12} {:>12} {:>14} {:>14} {:>6} {:>10.2} {:>10.2}\n",
                r.mode.name(),
                r.head_params,
                r.total_params,
                r.head_macs,
                r.total_macs,
                r.proposals,
                r.latency_ms_mean,
                r.latency_ms_min
            ));
        }
        s
    }
}

struct Probe<T: Element> {
    mode: HeadMode,
    detector: Detector,
    store: ParamStore<T>,
}

/// Network forward from pixels to head outputs, without post-processing.
/// Returns `(head MACs, total MACs, proposals)`.
fn forward<T: Element>(p: &Probe<T>, image: &Tensor<T>) -> Result<(u64, u64, usize)> {
    let mut g = Graph::new(&p.store);
    let x = g.input(image.clone());
    let (h, w) = (image.dim(2), image.dim(3));
    let pyr = p.detector.features(&mut g, x)?;
    let out = p.detector.rpn_forward(&mut g, &pyr)?;
    let props = p.detector.proposals(&g, &out, &p.detector.anchors(h, w), 1)?;
    let rois: Vec<(usize, BBox)> = props[0].iter().map(|q| (0, q.bbox)).collect();
    let before = g.macs();
    if !rois.is_empty() {
        p.detector.head().forward(&mut g, &pyr, &rois, &p.detector.config().roi)?;
    }
    Ok((g.macs() - before, g.macs(), rois.len()))
}

/// Every mode shares `seed`, so backbone, pyramid and RPN weights (and
/// hence the proposals) are identical across rows. Runs are interleaved
/// across modes to spread clock drift evenly.
pub fn measure<T: Element>(base: &ModelConfig, modes: &[HeadMode], image_size: (usize, usize), warmup: usize, runs: usize, seed: u64) -> Result<CostReport> {
    let spec = SceneSpec {
        image_size,
        seed,
        ..SceneSpec::default()
    };
    let image = generate_scene(&spec, 0)?.batch().cast::<T>();
    let probes = modes
        .iter()
        .map(|&mode| {
            let mut cfg = base.clone();
            cfg.head.mode = mode;
            let mut store = ParamStore::new();
            let detector = Detector::new(&cfg, &mut store, seed)?;
            Ok(Probe { mode, detector, store })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(runs); probes.len()];
    let mut counts = vec![(0, 0, 0); probes.len()];
    for i in 0..warmup + runs {
        for (k, p) in probes.iter().enumerate() {
            let t = Instant::now();
            counts[k] = forward(p, &image)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            if i >= warmup {
                times[k].push(ms);
            }
        }
    }
    let rows = probes
        .iter()
        .zip(times.iter().zip(&counts))
        .map(|(p, (t, &(head_macs, total_macs, proposals)))| CostRow {
            mode: p.mode,
            head_params: p.store.count("head."),
            total_params: p.store.count(""),
            head_macs,
            total_macs,
            proposals,
            latency_ms_mean: t.iter().sum::<f64>() / t.len().max(1) as f64,
            latency_ms_min: t.iter().copied().fold(f64::INFINITY, f64::min),
        })
        .collect();
    Ok(CostReport {
        image_size,
        warmup,
        runs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::GcaHead;

    #[test]
    fn census_matches_closed_form_and_proposals_agree() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.widths = [8, 8, 16, 16];
        cfg.rpn.post_nms_top = 16;
        let r = measure::<f32>(&cfg, &[HeadMode::Baseline, HeadMode::Lightweight, HeadMode::Full], (64, 64), 0, 1, 3).unwrap();
        for row in &r.rows {
            let mut head = cfg.head.clone();
            head.mode = row.mode;
            assert_eq!(row.head_params, GcaHead::param_count(&head, cfg.roi.output_size).unwrap());
            assert_eq!(row.proposals, r.rows[0].proposals);
            assert!(row.head_macs > 0 && row.total_macs > row.head_macs);
        }
        assert!(r.row(HeadMode::Baseline).unwrap().head_params < r.row(HeadMode::Lightweight).unwrap().head_params);
        assert!(r.table().lines().count() == 4);
    }
}
