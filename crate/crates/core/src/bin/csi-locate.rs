use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csi_locate::channel_sim::Dataset;
use csi_locate::config::ExperimentConfig;
use csi_locate::experiment::{self, column, dump_maps, evaluate, summary_table, write_report};
use csi_locate::io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset};
use csi_locate::model::{FusionKind, InputMode, Model};
use csi_locate::train::{train, Progress, Stage};
use csi_locate::{Error, Result};

const THREADS_ENV: &str = "CSI_LOCATE_THREADS";

#[derive(Parser)]
#[command(name = "csi-locate", version, about = "CSI fingerprint positioning: simulate, train, evaluate, predict, replicate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults to the desk-scale preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for simulation and training; overrides the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Input representation; overrides the configuration.
    #[arg(long, global = true, value_parser = parse::<InputMode>)]
    mode: Option<InputMode>,
    /// Fusion variant; overrides the configuration.
    #[arg(long, global = true, value_parser = parse::<FusionKind>)]
    fusion: Option<FusionKind>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train.csip and test.csip in the output directory.
    Simulate,
    /// Train a model and write a checkpoint plus its loss curve.
    Train {
        /// Directory holding train.csip (and optionally test.csip); simulated
        /// from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset, with and without fusion.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to score.
        #[arg(long)]
        data: PathBuf,
        /// Also write one probability-map CSV per sample.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Stream a dataset through a checkpoint and write one estimate per ready sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the input-mode x fusion matrix over the configured seeds.
    Replicate,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
        cfg.seeds = vec![seed];
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(f) = c.fusion {
        cfg.fusion = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    match cli.cmd {
        Cmd::Simulate => simulate(&cfg, &out.unwrap_or_else(|| cfg.output.dir.clone())),
        Cmd::Train { data, resume } => cmd_train(&cfg, data.as_deref(), resume.as_deref(), out, cli.common.mode.is_some() || cli.common.fusion.is_some()),
        Cmd::Evaluate { checkpoint, data, dump_maps } => cmd_evaluate(&cfg, &checkpoint, &data, out, dump_maps || cfg.output.dump_maps),
        Cmd::Predict { checkpoint, data } => cmd_predict(&checkpoint, &data, out),
        Cmd::Replicate => cmd_replicate(&cfg, &cli.common, &out.unwrap_or_else(|| cfg.output.dir.clone())),
    }
}

fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let (train_ds, test_ds) = experiment::simulate(cfg)?;
    fs::create_dir_all(dir)?;
    write_dataset(&dir.join("train.csip"), &train_ds)?;
    write_dataset(&dir.join("test.csip"), &test_ds)?;
    println!("{}", experiment::describe(cfg, &train_ds, &test_ds));
    println!("wrote {}", dir.display());
    Ok(())
}

fn mde(model: &Model, ds: &Dataset, history: usize) -> Result<f64> {
    Ok(column(model, ds, history)?.0.stats.mde)
}

fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, resume: Option<&Path>, out: Option<PathBuf>, overridden: bool) -> Result<()> {
    let (train_ds, val_ds) = match data {
        Some(dir) => {
            let val = dir.join("test.csip");
            let val = if val.exists() { Some(read_dataset(&val)?) } else { None };
            (read_dataset(&dir.join("train.csip"))?, val)
        }
        None => {
            let (a, b) = experiment::simulate(cfg)?;
            (a, Some(b))
        }
    };
    let (mut model, mut progress) = match resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            if overridden && (ck.spec.mode != cfg.mode || ck.spec.fusion != cfg.fusion) {
                return Err(Error::Config(format!(
                    "checkpoint holds a {}/{} model; --mode/--fusion cannot change it",
                    ck.spec.mode, ck.spec.fusion
                )));
            }
            (Model::from_store(ck.spec, ck.store)?, ck.progress)
        }
        None => (Model::init(cfg.model_spec(cfg.mode, cfg.fusion), cfg.train.seed)?, Progress::default()),
    };
    let ckpt = out.unwrap_or_else(|| cfg.output.dir.join("model.ckpt"));
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut hook = |stage: Stage, epoch: usize, loss: f64, _: &Model, _: &Progress| -> Result<()> {
        eprintln!("{stage:?} epoch {epoch:>4}  loss {loss:.6}");
        Ok(())
    };
    train(&mut model, &train_ds, &cfg.train, &mut progress, Some(&mut hook))?;
    write_checkpoint(&ckpt, &experiment::checkpoint(cfg, &model, &progress))?;

    let curve = ckpt.with_extension("loss.csv");
    let mut f = BufWriter::new(fs::File::create(&curve)?);
    writeln!(f, "stage,epoch,loss")?;
    for (stage, epoch, loss) in progress.loss_curve() {
        writeln!(f, "{},{epoch},{loss}", serde_json::to_value(stage)?.as_str().unwrap_or_default())?;
    }
    f.flush()?;

    let history = model.spec.history();
    println!("train MDE {:.4} m", mde(&model, &train_ds, history)?);
    if let Some(v) = &val_ds {
        println!("val MDE   {:.4} m", mde(&model, v, history)?);
    }
    println!("wrote {} and {}", ckpt.display(), curve.display());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, out: Option<PathBuf>, maps: bool) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let model = Model::from_store(ck.spec, ck.store)?;
    let ds = read_dataset(data)?;
    let history = cfg.common_history().max(model.spec.history());
    let (report, preds) = evaluate(&model, &ds, history)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.join("eval"));
    write_report(&dir, &report)?;
    if maps {
        let own = report.columns.iter().position(|c| c.fusion == model.spec.fusion).unwrap_or(0);
        let n = dump_maps(&dir.join("maps"), &model, &preds[own])?;
        println!("wrote {n} probability maps");
    }
    print!("{}", summary_table(&report));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let model = Model::from_store(ck.spec, ck.store)?;
    let ds = read_dataset(data)?;
    model.check_dataset(&ds)?;
    let mut w: Box<dyn Write> = match &out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    writeln!(w, "index,ue_id,timestamp,x_hat,y_hat,var_x,var_y")?;
    let mut ready = 0;
    for traj in ds.trajectories() {
        let mut stream = model.stream();
        for i in traj {
            let r = &ds.records[i];
            if let Some(e) = stream.push(r)? {
                ready += 1;
                writeln!(
                    w,
                    "{i},{},{},{},{},{},{}",
                    r.ue_id, r.timestamp, e.position[0], e.position[1], e.covariance[0][0], e.covariance[1][1]
                )?;
            }
        }
    }
    w.flush()?;
    eprintln!("{ready} of {} measurements produced an estimate", ds.len());
    Ok(())
}

fn cmd_replicate(cfg: &ExperimentConfig, common: &Common, dir: &Path) -> Result<()> {
    let modes: Vec<InputMode> = common.mode.map_or(InputMode::ALL.to_vec(), |m| vec![m]);
    let fusions: Vec<FusionKind> = common.fusion.map_or(FusionKind::ALL.to_vec(), |f| vec![f]);
    let cells: Vec<_> = modes.iter().flat_map(|&m| fusions.iter().map(move |&f| (m, f))).collect();
    let table = experiment::replicate_cells(cfg, &cells)?;
    experiment::write_replication(dir, &table)?;
    print!("{}", table.render());
    println!("wrote {}", dir.display());
    Ok(())
}
