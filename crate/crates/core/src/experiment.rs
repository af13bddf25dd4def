//! Orchestration behind the command-line tool: simulation, training from a
//! configuration, evaluation reports and the seed-replicated comparison
//! matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{generate_dataset, Dataset, Environment};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::model::{FusionKind, InputMode, Model, Prediction};
use crate::posnet::{distance, error_stats, ErrorStats};
use crate::probmap::write_map_csv;
use crate::train::{train, EpochHook, Progress};

pub fn simulate(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let env = Environment::new(cfg.sim.clone())?;
    generate_dataset(&env, cfg.num_train, cfg.num_test, &cfg.trajectory)
}

/// One-line dataset summary.
pub fn describe(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> String {
    let snr = cfg.sim.snr_db.map_or("off".to_string(), |s| format!("{s} dB"));
    format!(
        "train {} / test {} samples ({} / {} trajectories), M_R={} W={}, area {}x{} m, SNR {snr}, impairments {}",
        train.len(),
        test.len(),
        train.trajectories().len(),
        test.trajectories().len(),
        train.m_r,
        train.w,
        cfg.sim.area[0],
        cfg.sim.area[1],
        if cfg.sim.impairments == crate::channel_sim::Impairments::none() { "off" } else { "on" },
    )
}

/// Trains a fresh model of the configured kind.
pub fn train_new(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mode: InputMode,
    fusion: FusionKind,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<(Model, Progress)> {
    let mut model = Model::init(cfg.model_spec(mode, fusion), cfg.train.seed)?;
    let mut progress = Progress::default();
    train(&mut model, data, &cfg.train, &mut progress, hook)?;
    Ok((model, progress))
}

pub fn checkpoint(cfg: &ExperimentConfig, model: &Model, progress: &Progress) -> Checkpoint {
    Checkpoint {
        spec: model.spec.clone(),
        config: serde_json::to_value(cfg).expect("configuration serializes"),
        store: model.store.clone(),
        progress: progress.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub index: usize,
    pub ue_id: u32,
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub x_hat: f64,
    pub y_hat: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub fusion: FusionKind,
    pub stats: ErrorStats,
    pub samples: Vec<SampleError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: InputMode,
    /// Earlier samples each scored record has in its trajectory.
    pub min_history: usize,
    pub columns: Vec<ColumnReport>,
}

pub fn score(ds: &Dataset, preds: &[Prediction]) -> Vec<SampleError> {
    preds
        .iter()
        .map(|p| {
            let r = &ds.records[p.index];
            let x = r.position_f64();
            SampleError {
                index: p.index,
                ue_id: r.ue_id,
                timestamp: r.timestamp,
                x: x[0],
                y: x[1],
                x_hat: p.estimate.position[0],
                y_hat: p.estimate.position[1],
                error: distance(p.estimate.position, x),
            }
        })
        .collect()
}

pub fn column(model: &Model, ds: &Dataset, min_history: usize) -> Result<(ColumnReport, Vec<Prediction>)> {
    let preds = model.predict_dataset(ds, min_history)?;
    if preds.is_empty() {
        return Err(Error::Contract(format!("no record has {min_history} earlier samples in its trajectory")));
    }
    let samples = score(ds, &preds);
    let errors: Vec<f64> = samples.iter().map(|s| s.error).collect();
    Ok((
        ColumnReport {
            fusion: model.spec.fusion,
            stats: error_stats(&errors),
            samples,
        },
        preds,
    ))
}

/// Fusion variants a trained model supports without further training: its
/// own, no fusion, and conflation of its maps.
pub fn untrained_variants(model: &Model) -> Vec<FusionKind> {
    let mut out = vec![FusionKind::None];
    let own = model.spec.fusion;
    if own == FusionKind::Feature {
        out.push(FusionKind::Combined);
    }
    if !matches!(own, FusionKind::Feature | FusionKind::Combined) {
        out.push(FusionKind::MapConflation);
    }
    if !out.contains(&own) {
        out.push(own);
    }
    out
}

/// Evaluates a model with and without fusion on a common set of records.
/// Returns the report and, per column, the predictions.
pub fn evaluate(model: &Model, ds: &Dataset, min_history: usize) -> Result<(EvalReport, Vec<Vec<Prediction>>)> {
    let mut columns = Vec::new();
    let mut preds = Vec::new();
    for fusion in untrained_variants(model) {
        let mut variant = if fusion == model.spec.fusion {
            model.clone()
        } else {
            let mut cfg = model.spec.fusion_cfg;
            if fusion == FusionKind::Combined {
                cfg.map_fusion = crate::fusion::MapFusionKind::Conflation;
            }
            model.with_fusion(fusion, cfg, 0)?
        };
        // A feature-fused model's network expects fused features.
        if fusion == FusionKind::None && model.feature_fusion.is_some() {
            variant = model.with_fusion(FusionKind::Feature, model.spec.fusion_cfg, 0)?;
            variant.spec.fusion_cfg.delta = 0;
        }
        let (mut c, p) = column(&variant, ds, min_history)?;
        c.fusion = fusion;
        columns.push(c);
        preds.push(p);
    }
    Ok((
        EvalReport {
            mode: model.spec.mode,
            min_history,
            columns,
        },
        preds,
    ))
}

pub fn write_errors_csv(mut out: impl std::io::Write, samples: &[SampleError]) -> Result<()> {
    writeln!(out, "index,ue_id,timestamp,x,y,x_hat,y_hat,error")?;
    for s in samples {
        writeln!(out, "{},{},{},{},{},{},{},{}", s.index, s.ue_id, s.timestamp, s.x, s.y, s.x_hat, s.y_hat, s.error)?;
    }
    Ok(())
}

/// Writes `report.json`, `summary.txt` and one per-sample CSV per column.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    for c in &report.columns {
        let f = fs::File::create(dir.join(format!("errors_{}.csv", c.fusion)))?;
        write_errors_csv(std::io::BufWriter::new(f), &c.samples)?;
    }
    fs::write(dir.join("summary.txt"), summary_table(report))?;
    Ok(())
}

pub fn summary_table(report: &EvalReport) -> String {
    let mut s = format!("mode {}, {} earlier samples per scored record\n", report.mode, report.min_history);
    let _ = writeln!(s, "{:<16}{:>8}{:>10}{:>10}{:>10}{:>10}", "fusion", "count", "MDE [m]", "p50", "p90", "p95");
    for c in &report.columns {
        let t = &c.stats;
        let _ = writeln!(s, "{:<16}{:>8}{:>10.4}{:>10.4}{:>10.4}{:>10.4}", c.fusion.as_str(), t.count, t.mde, t.p50, t.p90, t.p95);
    }
    s
}

/// One probability-map CSV per prediction.
pub fn dump_maps(dir: &Path, model: &Model, preds: &[Prediction]) -> Result<usize> {
    fs::create_dir_all(dir)?;
    for p in preds {
        let f = fs::File::create(dir.join(format!("map_{:06}.csv", p.index)))?;
        write_map_csv(std::io::BufWriter::new(f), &model.grid, &p.map)?;
    }
    Ok(preds.len())
}

/// MDE of one cell of the comparison matrix for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub mode: InputMode,
    pub fusion: FusionKind,
    pub mde: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

impl ReplicationTable {
    pub fn values(&self, mode: InputMode, fusion: FusionKind) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.mode == mode && c.fusion == fusion)
            .map(|c| c.mde)
            .collect()
    }

    pub fn median(&self, mode: InputMode, fusion: FusionKind) -> Option<f64> {
        median(&self.values(mode, fusion))
    }

    /// Modes as rows, fusion kinds as columns, median MDE in meters.
    pub fn render(&self) -> String {
        let fusions: Vec<FusionKind> = FusionKind::ALL.into_iter().filter(|f| self.cells.iter().any(|c| c.fusion == *f)).collect();
        let mut s = format!("median MDE [m] over seeds {:?}\n{:<10}", self.seeds, "input");
        for f in &fusions {
            let _ = write!(s, "{:>16}", f.as_str());
        }
        s.push('\n');
        for m in InputMode::ALL {
            if !self.cells.iter().any(|c| c.mode == m) {
                continue;
            }
            let _ = write!(s, "{:<10}", m.as_str());
            for &f in &fusions {
                match self.median(m, f) {
                    Some(v) => {
                        let _ = write!(s, "{v:>16.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>16}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "seed,mode,fusion,mde,count")?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{},{}", c.seed, c.mode, c.fusion, c.mde, c.count)?;
        }
        Ok(())
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Trains and scores the requested cells for one seed. Models are derived
/// from each other where the stages coincide: the feature-fused model starts
/// from the trained base model, the combined model from the feature-fused
/// one.
pub fn replicate_seed(cfg: &ExperimentConfig, seed: u64, cells: &[(InputMode, FusionKind)]) -> Result<Vec<Cell>> {
    let cfg = cfg.clone().with_seed(seed);
    let (train_ds, test_ds) = simulate(&cfg)?;
    let history = cfg.common_history();
    let mut out = Vec::new();
    for mode in InputMode::ALL {
        let wanted: Vec<FusionKind> = cells.iter().filter(|c| c.0 == mode).map(|c| c.1).collect();
        if wanted.is_empty() {
            continue;
        }
        let (base, base_progress) = train_new(&cfg, &train_ds, mode, FusionKind::None, None)?;
        let mut models: BTreeMap<&'static str, Model> = BTreeMap::new();
        let needs_feature = wanted.iter().any(|f| f.uses_feature_fusion());
        let mut feature_progress = base_progress.clone();
        if needs_feature {
            let mut m = base.with_fusion(FusionKind::Feature, cfg.fusion_config, seed)?;
            train(&mut m, &train_ds, &cfg.train, &mut feature_progress, None)?;
            models.insert(FusionKind::Feature.as_str(), m);
        }
        for &fusion in &wanted {
            let model = match fusion {
                FusionKind::None => base.clone(),
                FusionKind::Feature => models[FusionKind::Feature.as_str()].clone(),
                FusionKind::MapConflation => base.with_fusion(fusion, cfg.fusion_config, seed)?,
                FusionKind::MapRnn => {
                    let mut m = base.with_fusion(fusion, cfg.fusion_config, seed)?;
                    train(&mut m, &train_ds, &cfg.train, &mut base_progress.clone(), None)?;
                    m
                }
                FusionKind::Combined => {
                    let mut m = models[FusionKind::Feature.as_str()].with_fusion(fusion, cfg.fusion_config, seed)?;
                    train(&mut m, &train_ds, &cfg.train, &mut feature_progress.clone(), None)?;
                    m
                }
            };
            let (c, _) = column(&model, &test_ds, history)?;
            out.push(Cell {
                seed,
                mode,
                fusion,
                mde: c.stats.mde,
                count: c.stats.count,
            });
        }
    }
    Ok(out)
}

/// Runs the requested cells for every configured seed, seeds in parallel.
pub fn replicate_cells(cfg: &ExperimentConfig, cells: &[(InputMode, FusionKind)]) -> Result<ReplicationTable> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| replicate_seed(cfg, seed, cells))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationTable {
        seeds: cfg.seeds.clone(),
        cells: per_seed.into_iter().flatten().collect(),
    })
}

/// The full matrix: every input mode against every fusion kind.
pub fn replicate(cfg: &ExperimentConfig) -> Result<ReplicationTable> {
    let cells: Vec<_> = InputMode::ALL
        .into_iter()
        .flat_map(|m| FusionKind::ALL.into_iter().map(move |f| (m, f)))
        .collect();
    replicate_cells(cfg, &cells)
}

pub fn write_replication(dir: &Path, table: &ReplicationTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("replicate.json"), serde_json::to_string_pretty(table)?)?;
    table.write_csv(std::io::BufWriter::new(fs::File::create(dir.join("replicate.csv"))?))?;
    let mut f = fs::File::create(dir.join("replicate.txt"))?;
    f.write_all(table.render().as_bytes())?;
    Ok(())
}
