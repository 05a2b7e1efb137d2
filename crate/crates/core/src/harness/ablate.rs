//! Grid ablations: every cell of the cartesian product trains from the same
//! base config and seed, then scores on the held-out scenes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::eval::evaluate;
use super::scene::generate_set;
use super::train::{smoothed, train, TrainOptions};
use crate::error::{Error, Result};
use crate::head::{AttentionVariant, GcaHead, HeadMode};

/// Grid keys in the order they appear in tables.
pub const GRID_KEYS: [&str; 5] = ["mode", "pool_size", "variant", "r", "rpn_recalibrate"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mode: Vec<HeadMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool_size: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variant: Vec<AttentionVariant>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rpn_recalibrate: Vec<bool>,
}

/// One grid coordinate; `None` keeps the base config's value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cell {
    pub mode: Option<HeadMode>,
    pub pool_size: Option<(usize, usize)>,
    pub variant: Option<AttentionVariant>,
    pub r: Option<usize>,
    pub rpn_recalibrate: Option<bool>,
}

impl Cell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let head = &mut cfg.model.head;
        if let Some(m) = self.mode {
            head.mode = m;
        }
        if let Some(p) = self.pool_size {
            head.pool_size = p;
        }
        if let Some(v) = self.variant {
            head.variant = v;
        }
        if let Some(r) = self.r {
            head.reduction = r;
        }
        if let Some(b) = self.rpn_recalibrate {
            cfg.rpn_recalibrate = b;
        }
        cfg
    }

    /// Values of the grid's own keys, rendered for tables and JSON.
    pub fn labels(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("mode", self.mode.map(|v| v.to_string()));
        put("pool_size", self.pool_size.map(|(a, b)| format!("{a}x{b}")));
        put("variant", self.variant.map(|v| v.to_string()));
        put("r", self.r.map(|v| v.to_string()));
        put("rpn_recalibrate", self.rpn_recalibrate.map(|v| v.to_string()));
        m
    }
}

impl AblationGrid {
    /// Parse a JSON object of `key → [values]`, naming any key outside
    /// [`GRID_KEYS`].
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v.as_object().ok_or_else(|| Error::Config("ablation grid must be a JSON object".into()))?;
        if let Some(bad) = obj.keys().find(|k| !GRID_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("invalid grid key `{bad}` (expected one of {})", GRID_KEYS.join(", "))));
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn keys(&self) -> Vec<&'static str> {
        let lens = [self.mode.len(), self.pool_size.len(), self.variant.len(), self.r.len(), self.rpn_recalibrate.len()];
        GRID_KEYS.iter().zip(lens).filter(|(_, n)| *n > 0).map(|(k, _)| *k).collect()
    }

    /// Cartesian product, last key varying fastest. An empty grid yields
    /// the single default cell.
    pub fn cells(&self) -> Vec<Cell> {
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        }
        let mut out = Vec::new();
        for &mode in &axis(&self.mode) {
            for &pool_size in &axis(&self.pool_size) {
                for &variant in &axis(&self.variant) {
                    for &r in &axis(&self.r) {
                        for &rpn_recalibrate in &axis(&self.rpn_recalibrate) {
                            out.push(Cell {
                                mode,
                                pool_size,
                                variant,
                                r,
                                rpn_recalibrate,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Dense connection on/off.
    pub fn dense() -> Self {
        Self {
            mode: vec![HeadMode::Baseline, HeadMode::DenseNoAttention],
            ..Self::default()
        }
    }

    /// Pool sizes for 128×128 inputs, where the finest level is 32×32.
    pub fn pooling() -> Self {
        Self {
            pool_size: vec![(32, 32), (24, 24), (16, 16), (8, 8)],
            ..Self::default()
        }
    }

    pub fn variants() -> Self {
        Self {
            variant: AttentionVariant::ALL.to_vec(),
            ..Self::default()
        }
    }

    pub fn reduction() -> Self {
        Self {
            r: vec![4, 8, 16],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dense" => Ok(Self::dense()),
            "pooling" => Ok(Self::pooling()),
            "variants" => Ok(Self::variants()),
            "reduction" => Ok(Self::reduction()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (dense, pooling, variants, reduction)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: BTreeMap<String, String>,
    pub head_params: usize,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub keys: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut header: Vec<String> = self.keys.clone();
        header.extend(["head params", "loss 0", "loss end", "AP50", "AP75", "AP"].map(String::from));
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v: Vec<String> = self.keys.iter().map(|k| r.cell.get(k).cloned().unwrap_or_default()).collect();
                v.push(r.head_params.to_string());
                v.extend([r.initial_loss, r.final_loss].map(|x| format!("{x:.4}")));
                v.extend([r.ap50, r.ap75, r.map].map(|x| format!("{:.3}", x)));
                v
            })
            .collect();
        let widths: Vec<usize> = (0..header.len()).map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0)).collect();
        let line = |v: &[String]| {
            v.iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i < self.keys.len() { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut s = line(&header) + "\n";
        for c in &cells {
            s.push_str(&line(c));
            s.push('\n');
        }
        s
    }
}

/// Train and evaluate every cell. `progress` sees each row as it lands.
pub fn ablate(base: &ExperimentConfig, grid: &AblationGrid, mut progress: Option<&mut dyn FnMut(&AblationRow)>) -> Result<AblationReport> {
    base.validate()?;
    let cells = grid.cells();
    let configs: Vec<ExperimentConfig> = cells.iter().map(|c| c.apply(base)).collect();
    for c in &configs {
        c.validate()?;
    }
    let train_set = generate_set(&base.dataset, 0, base.train_images)?;
    let eval_set = generate_set(&base.dataset, base.eval_offset, base.eval_images)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, cfg) in cells.iter().zip(&configs) {
        let out = train(cfg, &train_set, TrainOptions::default())?;
        let (summary, _) = evaluate(&out.detector, &out.store, &eval_set)?;
        let sm = smoothed(&out.log, 50);
        let row = AblationRow {
            cell: cell.labels(),
            head_params: GcaHead::param_count(&cfg.model.head, cfg.model.roi.output_size)?,
            iterations: out.log.len(),
            initial_loss: out.log.first().map_or(0.0, |r| r.total),
            final_loss: sm.last().copied().unwrap_or(0.0),
            ap50: summary.ap50,
            ap75: summary.ap75,
            map: summary.map,
            per_class: summary.per_class,
        };
        if let Some(cb) = progress.as_mut() {
            cb(&row);
        }
        rows.push(row);
    }
    Ok(AblationReport {
        keys: grid.keys().into_iter().map(String::from).collect(),
        seed: base.seed,
        epochs: base.epochs,
        train_images: base.train_images,
        eval_images: base.eval_images,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_cells() {
        let g = AblationGrid::from_json(r#"{"mode": ["baseline", "dense_no_attention"]}"#).unwrap();
        assert_eq!(g, AblationGrid::dense());
        assert_eq!(g.cells().len(), 2);
        let g = AblationGrid::from_json(r#"{"r": [4, 8, 16], "pool_size": [[16, 16], [8, 8]]}"#).unwrap();
        assert_eq!(g.keys(), vec!["pool_size", "r"]);
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].labels()["r"], "8");
        assert_eq!(cells[3].labels()["pool_size"], "8x8");
        let empty = AblationGrid::from_json("{}").unwrap();
        assert_eq!(empty.cells(), vec![Cell::default()]);
        assert!(empty.keys().is_empty());
    }

    #[test]
    fn invalid_keys_are_named() {
        match AblationGrid::from_json(r#"{"reduction": [4]}"#) {
            Err(Error::Config(m)) => assert!(m.contains("reduction")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(AblationGrid::from_json(r#"{"mode": ["dense"]}"#).is_err());
        assert!(AblationGrid::preset("table9").is_err());
    }

    #[test]
    fn cell_application() {
        let base = ExperimentConfig::default();
        let c = Cell {
            variant: Some(AttentionVariant::Fc2),
            r: Some(16),
            rpn_recalibrate: Some(true),
            ..Cell::default()
        };
        let cfg = c.apply(&base);
        assert_eq!(cfg.model.head.variant, AttentionVariant::Fc2);
        assert_eq!(cfg.model.head.reduction, 16);
        assert!(cfg.rpn_recalibrate);
        assert_eq!(cfg.model.head.mode, base.model.head.mode);
    }

    #[test]
    fn smoke_run_schema() {
        let mut base = ExperimentConfig {
            epochs: 1,
            train_images: 2,
            eval_images: 2,
            ..ExperimentConfig::default()
        };
        base.dataset.image_size = (64, 64);
        base.dataset.object_size = (12.0, 32.0);
        base.model.backbone.widths = [8, 8, 16, 16];
        let report = ablate(&base, &AblationGrid::dense(), None).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].cell["mode"], "baseline");
        assert!(report.rows[0].head_params < report.rows[1].head_params);
        let json = serde_json::to_string(&report).unwrap();
        let back: AblationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.keys, vec!["mode"]);
        assert_eq!(report.table().lines().count(), 3);
    }
}
