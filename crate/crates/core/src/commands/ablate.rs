//! `ablate`: trains and evaluates every (window, layer placement) pair plus
//! a vanilla row without context-aware layers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::evaluate::{evaluate, DecodeConfig, EvalResult};
use crate::commands::train::train;
use crate::data::{Checkpoint, Example, RunConfig, Vocab};
use crate::error::{Error, Result};
use crate::model::LayerSelection;

pub const RESULTS_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub wins: Vec<usize>,
    pub layers: Vec<LayerSelection>,
    /// Adds the row without any context-aware layer.
    pub include_none: bool,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            wins: vec![3, 5, 7, 9, 11],
            layers: ["1", "1-3", "L", "L-2..L", "1..L"]
                .iter()
                .map(|s| LayerSelection(s.to_string()))
                .collect(),
            include_none: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub win: Option<usize>,
    pub layers: Vec<usize>,
    pub result: EvalResult,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
struct Point {
    setting: String,
    slug: String,
    win: Option<usize>,
    layers: Vec<usize>,
}

fn points(grid: &AblationGrid, num_layers: usize) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    for &w in &grid.wins {
        for sel in &grid.layers {
            let layers = sel.resolve(num_layers)?;
            if layers.is_empty() {
                return Err(Error::Config(format!("layer selection `{sel}` is empty; use the none row")));
            }
            let slug: String = format!("win{w}_layers{sel}")
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            out.push(Point {
                setting: format!("win={w};layers={sel}"),
                slug,
                win: Some(w),
                layers,
            });
        }
    }
    if grid.include_none {
        out.push(Point {
            setting: "none".into(),
            slug: "none".into(),
            win: None,
            layers: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    Ok(out)
}

pub fn results_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,win,layers,token_acc,bleu,le\n");
    for r in rows {
        let layers: Vec<String> = r.layers.iter().map(|l| l.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.setting,
            r.win.map(|w| w.to_string()).unwrap_or_default(),
            layers.join(" "),
            r.result.token_acc,
            r.result.bleu,
            r.result.le
        ));
    }
    s
}

/// Runs the grid with the base config's seed for every point. Each point
/// trains in `<out_dir>/<slug>`; the table goes to `<out_dir>/ablation.csv`.
pub fn ablate(
    base: &RunConfig,
    grid: &AblationGrid,
    vocab: &Vocab,
    train_set: &[Example],
    valid: &[Example],
    test: &[Example],
    decode: DecodeConfig,
) -> Result<Vec<AblationRow>> {
    let pts = points(grid, base.model.dec_layers)?;
    fs::create_dir_all(&base.out_dir)?;
    let mut rows = Vec::with_capacity(pts.len());
    for p in pts {
        let mut cfg = base.clone();
        cfg.out_dir = base.out_dir.join(&p.slug);
        if let Some(w) = p.win {
            cfg.model.win = w;
        }
        cfg.model.ccan_layers = p.layers.clone();
        let outcome = train(&cfg, vocab, train_set, valid)?;
        let model = Checkpoint::load(&outcome.final_checkpoint)?.model()?;
        let result = evaluate(&model, test, decode)?;
        rows.push(AblationRow {
            setting: p.setting,
            win: p.win,
            layers: p.layers,
            result,
            checkpoint: outcome.final_checkpoint,
        });
        fs::write(base.out_dir.join(RESULTS_FILE), results_csv(&rows))?;
    }
    Ok(rows)
}

pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join(RESULTS_FILE)
}
