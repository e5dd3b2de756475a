//! Resumable ablation sweeps.
//!
//! Three grids are available:
//! - `losses`: training loss sets crossed with adaptation loss sets. A cell
//!   whose adaptation uses a head the model was not trained with is
//!   recorded as invalid and not run.
//! - `layers`: which layer groups adaptation may update.
//! - `bn_params`: every subset of the four batch-norm tensor kinds.
//!
//! Each cell writes its effective config and `result.json` into its own
//! directory; a cell whose result already exists is read back instead of
//! rerun. Trained models are cached as checkpoints under `models/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bnta_core::layers::{GroupSet, ParamGroup};
use bnta_core::losses::LossSet;
use bnta_core::metrics::SplitSummary;
use bnta_core::model::ModelBundle;
use bnta_core::synth::{Dataset, TestPool};
use bnta_core::Float;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{self, Error, Result};
use crate::experiment;
use crate::report;

pub const COMBINED_CSV: &str = "ablation.csv";
pub const RESULT_FILE: &str = "result.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Losses,
    Layers,
    BnParams,
}

impl Sweep {
    pub const ALL: [Sweep; 3] = [Sweep::Losses, Sweep::Layers, Sweep::BnParams];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Losses => "losses",
            Sweep::Layers => "layers",
            Sweep::BnParams => "bn_params",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown sweep `{s}`; valid sweeps: losses, layers, bn_params")))
    }

    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Sweep> = list.split(',').map(Sweep::parse).collect::<Result<_>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Adaptation losses of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtaLosses {
    pub pos: bool,
    pub mat: bool,
}

impl TtaLosses {
    fn label(self) -> &'static str {
        match (self.pos, self.mat) {
            (true, true) => "pos+mat",
            (true, false) => "pos",
            (false, true) => "mat",
            (false, false) => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub sweep: Sweep,
    pub name: String,
    pub train_losses: LossSet,
    /// `None` scores the trained model without adaptation.
    pub tta: Option<TtaLosses>,
    pub groups: GroupSet,
}

impl Cell {
    /// Adaptation may only use heads the model was trained with.
    pub fn is_valid(&self) -> bool {
        self.tta
            .is_none_or(|t| (t.pos || t.mat) && (!t.pos || self.train_losses.pos) && (!t.mat || self.train_losses.mat))
    }

    fn dir(&self, root: &Path) -> PathBuf {
        root.join("cells").join(format!("{}-{}", self.sweep.name(), self.name))
    }

    fn config(&self, run: &RunConfig) -> RunConfig {
        let mut c = run.clone();
        c.train.losses = self.train_losses;
        if let Some(t) = self.tta {
            c.tta.use_pos = t.pos;
            c.tta.use_mat = t.mat;
        }
        c.tta.groups = self.groups;
        c
    }
}

const TRAIN_SETS: [LossSet; 6] = [
    LossSet { id: true, pos: false, mat: false },
    LossSet { id: false, pos: true, mat: false },
    LossSet { id: false, pos: false, mat: true },
    LossSet { id: true, pos: true, mat: false },
    LossSet { id: true, pos: false, mat: true },
    LossSet::ALL,
];

/// Six training loss sets by four adaptation loss sets, invalid cells included.
pub fn loss_cells(run: &RunConfig) -> Vec<Cell> {
    let tta_sets = [
        None,
        Some(TtaLosses { pos: true, mat: false }),
        Some(TtaLosses { pos: false, mat: true }),
        Some(TtaLosses { pos: true, mat: true }),
    ];
    TRAIN_SETS
        .iter()
        .flat_map(|&train| {
            tta_sets.iter().map(move |&tta| Cell {
                sweep: Sweep::Losses,
                name: format!("{}__{}", train.label(), tta.map_or("none", TtaLosses::label)),
                train_losses: train,
                tta,
                groups: run.tta.groups,
            })
        })
        .collect()
}

fn run_losses(run: &RunConfig) -> TtaLosses {
    TtaLosses {
        pos: run.tta.use_pos,
        mat: run.tta.use_mat,
    }
}

/// Adaptation restricted to combinations of conv, IN and all of BN.
pub fn layer_cells(run: &RunConfig) -> Vec<Cell> {
    let bn = GroupSet::all_bn();
    let conv = GroupSet::from_groups(&[ParamGroup::Conv]);
    let inorm = GroupSet::from_groups(&[ParamGroup::In]);
    [
        ("none", GroupSet::EMPTY),
        ("conv", conv),
        ("in", inorm),
        ("conv+in", conv.union(inorm)),
        ("bn", bn),
        ("bn+conv", bn.union(conv)),
        ("bn+in", bn.union(inorm)),
        ("bn+conv+in", bn.union(conv).union(inorm)),
    ]
    .into_iter()
    .map(|(name, groups)| Cell {
        sweep: Sweep::Layers,
        name: name.into(),
        train_losses: run.train.losses,
        tta: Some(run_losses(run)),
        groups,
    })
    .collect()
}

/// All sixteen subsets of the batch-norm kinds, smallest first.
pub fn bn_param_cells(run: &RunConfig) -> Vec<Cell> {
    let kinds = [ParamGroup::BnMu, ParamGroup::BnSigma2, ParamGroup::BnGamma, ParamGroup::BnBeta];
    let short = ["mu", "sigma2", "gamma", "beta"];
    let mut masks: Vec<usize> = (0..16).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    masks
        .into_iter()
        .map(|mask| {
            let chosen: Vec<usize> = (0..4).filter(|b| mask & (1 << b) != 0).collect();
            let name = if chosen.is_empty() {
                "none".to_string()
            } else {
                chosen.iter().map(|&b| short[b]).collect::<Vec<_>>().join("+")
            };
            Cell {
                sweep: Sweep::BnParams,
                name,
                train_losses: run.train.losses,
                tta: Some(run_losses(run)),
                groups: GroupSet::from_groups(&chosen.iter().map(|&b| kinds[b]).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn cells(run: &RunConfig, sweep: Sweep) -> Vec<Cell> {
    match sweep {
        Sweep::Losses => loss_cells(run),
        Sweep::Layers => layer_cells(run),
        Sweep::BnParams => bn_param_cells(run),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub sweep: Sweep,
    pub cell: String,
    pub train_losses: String,
    pub tta_losses: String,
    pub groups: String,
    pub valid: bool,
    /// Summary of the scored model (adapted when the cell adapts).
    pub summary: Option<SplitSummary>,
    /// Frozen model on the same splits.
    pub frozen: Option<SplitSummary>,
    pub unselected_changes: Vec<String>,
}

/// One row of the combined CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CsvRow<'a> {
    pub sweep: &'a str,
    pub cell: &'a str,
    pub train_losses: &'a str,
    pub tta_losses: &'a str,
    pub groups: &'a str,
    pub status: &'a str,
    pub splits: Option<usize>,
    pub rank1: Option<Float>,
    pub rank1_std: Option<Float>,
    pub rank5: Option<Float>,
    pub rank10: Option<Float>,
    pub map: Option<Float>,
    pub map_std: Option<Float>,
    pub frozen_rank1: Option<Float>,
    pub isolated: Option<bool>,
}

impl CellResult {
    fn row(&self) -> CsvRow<'_> {
        let s = self.summary.as_ref();
        CsvRow {
            sweep: self.sweep.name(),
            cell: &self.cell,
            train_losses: &self.train_losses,
            tta_losses: &self.tta_losses,
            groups: &self.groups,
            status: if self.valid { "done" } else { "invalid" },
            splits: s.map(|s| s.splits),
            rank1: s.map(|s| s.rank1.mean),
            rank1_std: s.map(|s| s.rank1.std),
            rank5: s.map(|s| s.rank5.mean),
            rank10: s.map(|s| s.rank10.mean),
            map: s.map(|s| s.map.mean),
            map_std: s.map(|s| s.map.std),
            frozen_rank1: self.frozen.map(|f| f.rank1.mean),
            isolated: self.valid.then_some(self.unselected_changes.is_empty()),
        }
    }
}

/// Results of a sweep, plus how many cells ran now and how many were reused.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub results: Vec<CellResult>,
    pub ran: usize,
    pub reused: usize,
}

/// Trained models by loss set, cached on disk.
struct ModelCache<'a> {
    root: PathBuf,
    run: &'a RunConfig,
    data: &'a Dataset,
    models: BTreeMap<String, ModelBundle>,
}

impl ModelCache<'_> {
    fn get(&mut self, losses: LossSet) -> Result<&ModelBundle> {
        let label = losses.label();
        if !self.models.contains_key(&label) {
            let path = self.root.join("models").join(format!("{label}.ckpt"));
            let model = if path.is_file() {
                checkpoint::load(&path)?.model
            } else {
                let mut run = self.run.clone();
                run.train.losses = losses;
                log::info!("ablate: training the {label} model");
                let (model, log) = experiment::train(&run, self.data)?;
                checkpoint::save(&model, run.seed, &path)?;
                report::write_csv(&self.root.join("models").join(format!("{label}.train_log.csv")), &log)?;
                model
            };
            self.models.insert(label.clone(), model);
        }
        Ok(&self.models[&label])
    }
}

fn run_cell(cell: &Cell, run: &RunConfig, pool: &TestPool, cache: &mut ModelCache<'_>) -> Result<CellResult> {
    let cfg = cell.config(run);
    let mut result = CellResult {
        sweep: cell.sweep,
        cell: cell.name.clone(),
        train_losses: cell.train_losses.label(),
        tta_losses: cell.tta.map_or("none", TtaLosses::label).into(),
        groups: cell.groups.to_list(),
        valid: cell.is_valid(),
        summary: None,
        frozen: None,
        unselected_changes: Vec::new(),
    };
    if !result.valid {
        return Ok(result);
    }
    let model = cache.get(cell.train_losses)?;
    let eval = experiment::evaluate(model, pool, &cfg, cell.tta.map(|_| &cfg.tta))?;
    result.summary = Some(eval.adapted.unwrap_or(eval.frozen));
    result.frozen = Some(eval.frozen);
    result.unselected_changes = eval.unselected_changes;
    Ok(result)
}

/// Run (or resume) the sweeps into `out` and write the combined CSV.
pub fn run_sweeps(run: &RunConfig, data: &Dataset, pool: &TestPool, sweeps: &[Sweep], out: &Path) -> Result<SweepOutcome> {
    run.echo(out)?;
    let mut cache = ModelCache {
        root: out.to_path_buf(),
        run,
        data,
        models: BTreeMap::new(),
    };
    let mut outcome = SweepOutcome {
        results: Vec::new(),
        ran: 0,
        reused: 0,
    };
    for &sweep in sweeps {
        for cell in cells(run, sweep) {
            let dir = cell.dir(out);
            let done = dir.join(RESULT_FILE);
            let result = if done.is_file() {
                outcome.reused += 1;
                serde_json::from_slice::<CellResult>(&error::read(&done)?)
                    .map_err(|e| Error::format(&done, e.to_string()))?
            } else {
                let r = run_cell(&cell, run, pool, &mut cache)?;
                cell.config(run).echo(&dir)?;
                report::write_json(&done, &r)?;
                outcome.ran += 1;
                log::info!("ablate: {} {} done", sweep.name(), cell.name);
                r
            };
            outcome.results.push(result);
        }
    }
    report::write_csv(&out.join(COMBINED_CSV), outcome.results.iter().map(CellResult::row))?;
    Ok(outcome)
}

/// Text table of a sweep's rank-1 per cell.
pub fn results_table(results: &[CellResult]) -> String {
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                format!("{}/{}", r.sweep.name(), r.cell),
                r.summary.map_or("-".into(), |s| report::percent(&s.rank1)),
                r.summary.map_or("-".into(), |s| report::percent(&s.map)),
                r.frozen.map_or("-".into(), |s| report::percent(&s.rank1)),
            ]
        })
        .collect();
    report::text_table(&["cell", "rank-1", "mAP", "frozen rank-1"], &rows)
}
