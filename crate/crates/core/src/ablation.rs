//! Ablation grids over attention gates, decoder masks and objectives,
//! scored by held-out NTP accuracy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::DecoderMode;
use crate::infill::{BlockDocument, SpecialVocab};
use crate::model::{Model, ModelConfig};
use crate::train::{make_examples, ntp_accuracy, pretrain, NtpReport, Objective, TrainConfig, TrainError};

/// Gates `(λ_ts, λ_st, λ_ss)`.
pub type Gates = (f64, f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub gates: Gates,
    pub mode: DecoderMode,
    pub objective: Objective,
}

impl AblationCell {
    pub fn new(gates: Gates, mode: DecoderMode, objective: Objective) -> Self {
        let obj = match objective {
            Objective::Autoregressive => "ar",
            Objective::Infill => "infill",
        };
        Self {
            name: format!("{}/{}/{obj}", gate_label(gates), mode.name()),
            gates,
            mode,
            objective,
        }
    }
}

/// `T2S + S2T + S2S + T2T` style label; T2T is always present.
pub fn gate_label(g: Gates) -> String {
    let mut parts = Vec::new();
    if g.0 != 0.0 {
        parts.push("T2S");
    }
    if g.1 != 0.0 {
        parts.push("S2T");
    }
    if g.2 != 0.0 {
        parts.push("S2S");
    }
    parts.push("T2T");
    parts.join(" + ")
}

/// The seven gate rows, text-only first.
pub const SPATIAL_ROWS: [Gates; 7] = [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 1.0, 1.0),
];

/// Gate rows compared between causal and prefix decoders.
pub const PARITY_ROWS: [Gates; 5] = [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 1.0),
];

/// The seven gate rows under the infill objective and a causal decoder.
pub fn spatial_grid() -> Vec<AblationCell> {
    SPATIAL_ROWS
        .iter()
        .map(|&g| AblationCell::new(g, DecoderMode::Causal, Objective::Infill))
        .collect()
}

/// Causal and prefix cells for the parity rows.
pub fn decoder_grid() -> Vec<AblationCell> {
    PARITY_ROWS
        .iter()
        .flat_map(|&g| {
            [DecoderMode::Causal, DecoderMode::Prefix]
                .map(|m| AblationCell::new(g, m, Objective::Infill))
        })
        .collect()
}

/// causal, causal+spatial, infill+spatial.
pub fn objective_grid() -> Vec<AblationCell> {
    vec![
        AblationCell::new((0.0, 0.0, 0.0), DecoderMode::Causal, Objective::Autoregressive),
        AblationCell::new((0.0, 0.0, 1.0), DecoderMode::Causal, Objective::Autoregressive),
        AblationCell::new((0.0, 0.0, 1.0), DecoderMode::Causal, Objective::Infill),
    ]
}

/// Everything the three comparisons need, without duplicates.
pub fn full_grid() -> Vec<AblationCell> {
    let mut out: Vec<AblationCell> = Vec::new();
    for c in spatial_grid().into_iter().chain(decoder_grid()).chain(objective_grid()) {
        if !out.iter().any(|o| o.name == c.name) {
            out.push(c);
        }
    }
    out
}

/// Shared data and hyperparameters of a grid.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub train_docs: &'a [BlockDocument],
    pub heldout_docs: &'a [BlockDocument],
    pub specials: SpecialVocab,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds the held-out masks; fixed across cells and seeds.
    pub eval_seed: u64,
}

/// Trains one cell with `seed` and scores it on the held-out documents.
pub fn run_cell(setup: &AblationSetup<'_>, cell: &AblationCell, seed: u64) -> Result<NtpReport, TrainError> {
    let mut mcfg = setup.model;
    let (ts, st, ss) = cell.gates;
    mcfg.attention = mcfg.attention.with_gates(ts, st, ss);
    mcfg.attention.decoder_mode = cell.mode;
    let model = Model::new(mcfg, seed)?;
    let tcfg = TrainConfig {
        seed,
        objective: cell.objective,
        ..setup.train
    };
    let (model, _) = pretrain(model, setup.train_docs, &setup.specials, &tcfg, |_| {})?;
    let eval = make_examples(
        setup.heldout_docs,
        cell.objective,
        tcfg.mask_rate,
        tcfg.chunk_len.min(model.config.max_context),
        &setup.specials,
        setup.eval_seed,
    )?;
    ntp_accuracy(&model, &eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    /// `(seed, accuracy)` sorted by seed.
    pub runs: Vec<(u64, f64)>,
}

/// Per-cell summaries keyed by cell name. Independent of run order.
pub fn summarize(runs: &[CellRun]) -> BTreeMap<String, CellSummary> {
    let mut by_cell: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for r in runs {
        by_cell.entry(r.cell.clone()).or_default().push((r.seed, r.accuracy));
    }
    by_cell
        .into_iter()
        .map(|(cell, mut rs)| {
            rs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.1).sum::<f64>() / n;
            let std = (rs.len() >= 2)
                .then(|| (rs.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            if std.is_none() {
                log::warn!("{cell}: fewer than two seeds, no standard deviation");
            }
            (
                cell.clone(),
                CellSummary {
                    cell,
                    mean,
                    std,
                    runs: rs,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: BTreeMap<String, CellSummary>,
    pub verdicts: Vec<Verdict>,
}

impl AblationReport {
    pub fn from_runs(runs: &[CellRun]) -> Self {
        let cells = summarize(runs);
        let verdicts = verdicts(&cells);
        Self { cells, verdicts }
    }
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Comparison verdicts for whichever grids are present in `cells`.
/// Accuracies are fractions; margins are absolute points (1 point = 0.01).
pub fn verdicts(cells: &BTreeMap<String, CellSummary>) -> Vec<Verdict> {
    let get = |g: Gates, m: DecoderMode, o: Objective| cells.get(&AblationCell::new(g, m, o).name);
    let mut out = Vec::new();
    let causal = DecoderMode::Causal;

    if let Some(t2t) = get(SPATIAL_ROWS[0], causal, Objective::Infill) {
        for &g in &SPATIAL_ROWS[1..] {
            if let Some(c) = get(g, causal, Objective::Infill) {
                let gap = c.mean - t2t.mean;
                out.push(Verdict {
                    claim: format!("{} exceeds T2T by >= 2 points", gate_label(g)),
                    holds: gap >= 0.02,
                    detail: format!("{} vs {} ({:+} points)", pts(c.mean), pts(t2t.mean), pts(gap)),
                });
            }
        }
        if let Some(ss) = get((0.0, 0.0, 1.0), causal, Objective::Infill) {
            let per_seed: Vec<bool> = ss
                .runs
                .iter()
                .map(|&(seed, acc)| t2t.runs.iter().any(|&(s, a)| s == seed && acc > a))
                .collect();
            out.push(Verdict {
                claim: "S2S + T2T > T2T on every seed".into(),
                holds: !per_seed.is_empty() && per_seed.iter().all(|&b| b),
                detail: ss
                    .runs
                    .iter()
                    .map(|&(seed, acc)| {
                        let base = t2t.runs.iter().find(|r| r.0 == seed).map(|r| pts(r.1));
                        format!("seed {seed}: {} vs {}", pts(acc), base.unwrap_or_else(|| "-".into()))
                    })
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
    }

    let ar = get((0.0, 0.0, 0.0), causal, Objective::Autoregressive);
    let ar_sp = get((0.0, 0.0, 1.0), causal, Objective::Autoregressive);
    let inf_sp = get((0.0, 0.0, 1.0), causal, Objective::Infill);
    if let (Some(a), Some(b), Some(c)) = (ar, ar_sp, inf_sp) {
        for (lo, hi, claim) in [
            (a, b, "causal+spatial exceeds causal by >= 1 point"),
            (b, c, "infill+spatial exceeds causal+spatial by >= 1 point"),
        ] {
            out.push(Verdict {
                claim: claim.into(),
                holds: hi.mean - lo.mean >= 0.01,
                detail: format!("{} vs {}", pts(hi.mean), pts(lo.mean)),
            });
        }
    }

    for &g in &PARITY_ROWS {
        let (Some(c), Some(p)) = (
            get(g, causal, Objective::Infill),
            get(g, DecoderMode::Prefix, Objective::Infill),
        ) else {
            continue;
        };
        let delta = (c.mean - p.mean).abs();
        let bound = c.std.unwrap_or(0.0).max(p.std.unwrap_or(0.0));
        out.push(Verdict {
            claim: format!("{}: |causal - prefix| below the larger seed std", gate_label(g)),
            holds: c.std.is_some() && p.std.is_some() && delta < bound,
            detail: format!("causal {} prefix {} |delta| {} std {}", pts(c.mean), pts(p.mean), pts(delta), pts(bound)),
        });
    }
    out
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<40}{:>10}{:>10}", "config", "NTP %", "std")?;
        for c in self.cells.values() {
            let std = c.std.map(pts).unwrap_or_else(|| "-".into());
            writeln!(f, "{:<40}{:>10}{:>10}", c.cell, pts(c.mean), std)?;
        }
        for v in &self.verdicts {
            writeln!(f, "[{}] {}: {}", if v.holds { "ok" } else { "FAIL" }, v.claim, v.detail)?;
        }
        Ok(())
    }
}
