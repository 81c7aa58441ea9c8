//! Run directories and the experiment grids built from them.
//!
//! Every unit of work lands in `<out>/runs/<run-id>/` where the id hashes the
//! run kind and the resolved single-seed config, so identical cells of
//! different grids share one directory and a rerun finds its results in
//! place. Grids add `<out>/<command>-<id>/` holding the base config, the
//! raw per-cell table and a summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use headpurify_core::dig::gate_report;
use headpurify_core::domainsynth::{lodo_split, make_dataset, DomainDataset};
use headpurify_core::headlab::{drop_curve, mean_curve, rank_scored, CurvePoint, DropStrategy};
use headpurify_core::losses::ClassAnchors;
use headpurify_core::rng;
use headpurify_core::trainer::{evaluate, MmdUpdates, Record, Strategy, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{run_id, ExperimentConfig, Modules};
use crate::error::{Error, Result};
use crate::export;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub target: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    target: usize,
    #[serde(flatten)]
    record: &'a Record,
}

/// Train on every domain except `target`, starting from `resume` when given.
/// `sink` sees every metrics record; `on_epoch` runs after each epoch.
pub fn train_target(
    cfg: &ExperimentConfig,
    ds: &DomainDataset,
    target: usize,
    resume: Option<Trainer>,
    sink: &mut dyn FnMut(&Record),
    on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
) -> Result<(Trainer, f64)> {
    let split = lodo_split(ds, target, cfg.train.mmd_active())?;
    let mut t = match resume {
        Some(t) => t,
        None => {
            let seed = cfg.train.seed;
            let model = cfg.model_spec().build(seed)?;
            let anchors = ClassAnchors::random(
                ds.spec.num_classes,
                cfg.encoder.model_dim(),
                cfg.train.temperature,
                seed,
            )?;
            Trainer::new(model, anchors, cfg.train.clone())?
        }
    };
    while t.progress.epoch < t.config.epochs {
        t.run_epoch(ds, &split, sink)?;
        on_epoch(&t)?;
    }
    let acc = evaluate(&t.model, &t.anchors, ds, &split.test)?;
    if !acc.is_finite() {
        return Err(
            headpurify_core::Error::NonFinite(format!("accuracy on target {target}")).into(),
        );
    }
    Ok((t, acc))
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

/// One named configuration inside a grid.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub variant: String,
    pub seed: u64,
    pub target: usize,
    pub accuracy: f64,
    pub run_id: String,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub dir: PathBuf,
    pub cells: Vec<CellRow>,
}

/// Which training runs a command performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// All configured targets, results only.
    Lodo,
    /// `config.target` only, with checkpoints.
    Train,
}

pub struct Runner {
    pub out: PathBuf,
    /// Recompute runs whose results already exist.
    pub force: bool,
    pub verbose: bool,
}

impl Runner {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            force: false,
            verbose: false,
        }
    }

    fn log(&self, msg: std::fmt::Arguments) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    /// Run directory for `kind` and `cfg`, plus existing results when the
    /// directory already holds a finished run of the same snapshot.
    fn claim(
        &self,
        kind: &str,
        cfg: &ExperimentConfig,
    ) -> Result<(String, PathBuf, Option<Vec<ResultRow>>)> {
        let snap = cfg.to_toml();
        let id = run_id(kind, &snap);
        let dir = self.out.join("runs").join(&id);
        let results = dir.join("results.csv");
        if !self.force
            && results.exists()
            && fs::read_to_string(dir.join("config.toml")).ok().as_deref() == Some(&snap)
        {
            return Ok((id, dir, Some(read_csv(&results)?)));
        }
        create_dir(&dir)?;
        write_text(&dir.join("config.toml"), &snap)?;
        Ok((id, dir, None))
    }

    fn training_run(
        &self,
        kind: Kind,
        cfg: &ExperimentConfig,
        resume: Option<Trainer>,
    ) -> Result<RunDir> {
        let seed = cfg.seeds[0];
        let label = match (kind, &resume) {
            (Kind::Lodo, _) => "lodo".to_string(),
            (Kind::Train, None) => "train".to_string(),
            (Kind::Train, Some(t)) => format!("train-resume-e{}", t.progress.epoch),
        };
        let (id, dir, done) = self.claim(&label, cfg)?;
        if let Some(rows) = done {
            self.log(format_args!(
                "[{label}] seed {seed}: reusing {}",
                dir.display()
            ));
            return Ok(RunDir { id, dir, rows });
        }
        let ds = make_dataset(&cfg.data, seed)?;
        let targets = match kind {
            Kind::Lodo => cfg.lodo_targets(),
            Kind::Train => vec![cfg.target],
        };
        let metrics_path = dir.join("metrics.jsonl");
        let mut metrics = std::io::BufWriter::new(
            fs::File::create(&metrics_path).map_err(Error::io(&metrics_path))?,
        );
        let mut io_err = None;
        let mut rows = Vec::new();
        let mut resume = resume;
        for &target in &targets {
            let mut sink = |r: &Record| {
                let line = serde_json::to_string(&MetricLine { target, record: r })
                    .expect("record serializes");
                if let Err(e) = writeln!(metrics, "{line}") {
                    io_err.get_or_insert(e);
                }
            };
            let every = cfg.checkpoint_every;
            let mut on_epoch = |t: &Trainer| -> Result<()> {
                let e = t.progress.epoch;
                if kind == Kind::Train && every > 0 && e % every == 0 && e < t.config.epochs {
                    Checkpoint::from_trainer(t).save(&dir.join(format!("checkpoint-e{e}.hpck")))?;
                }
                Ok(())
            };
            let (t, accuracy) =
                train_target(cfg, &ds, target, resume.take(), &mut sink, &mut on_epoch)?;
            if t.model.gates.is_some() {
                let gates = gate_report(&t.model.params, t.model.config.num_layers)?;
                write_csv(&dir.join(format!("gate_report-t{target}.csv")), &gates)?;
            }
            if kind == Kind::Train {
                Checkpoint::from_trainer(&t).save(&dir.join("checkpoint.hpck"))?;
            }
            self.log(format_args!(
                "[{label}] {} seed {seed} target {target}: {:.2}%",
                cfg.modules.label(),
                100.0 * accuracy
            ));
            rows.push(ResultRow {
                seed,
                target,
                accuracy,
            });
        }
        if let Some(e) = io_err {
            return Err(Error::io(&metrics_path)(e));
        }
        metrics.flush().map_err(Error::io(&metrics_path))?;
        write_csv(&dir.join("results.csv"), &rows)?;
        Ok(RunDir { id, dir, rows })
    }

    /// One held-out target per seed, with checkpoints.
    pub fn train(&self, cfg: &ExperimentConfig) -> Result<Vec<RunDir>> {
        cfg.seeds
            .iter()
            .map(|&s| self.training_run(Kind::Train, &cfg.for_seed(s), None))
            .collect()
    }

    /// Continue the run saved in `ckpt` under the config it was written with.
    pub fn resume(&self, cfg: &ExperimentConfig, ckpt: Checkpoint) -> Result<RunDir> {
        let Some(state) = &ckpt.state else {
            return Err(Error::Config("checkpoint holds no training state".into()));
        };
        let cfg = cfg.for_seed(state.config.seed);
        if state.config != cfg.train {
            return Err(Error::Config(
                "train: checkpoint was written with a different train config".into(),
            ));
        }
        let spec = cfg.model_spec();
        let m = &ckpt.model;
        if m.config != spec.encoder
            || m.lora.as_ref().map(|l| &l.config) != spec.lora.as_ref()
            || m.gates != spec.gates
        {
            return Err(Error::Config(
                "encoder/lora/gates: checkpoint model differs from the config".into(),
            ));
        }
        self.training_run(Kind::Train, &cfg, Some(ckpt.into_trainer()?))
    }

    /// Every target of every seed under one config.
    pub fn lodo(&self, cfg: &ExperimentConfig) -> Result<Grid> {
        self.grid(
            "lodo",
            cfg,
            vec![Variant {
                label: cfg.modules.label().into(),
                config: cfg.clone(),
            }],
        )
    }

    pub fn grid(
        &self,
        command: &str,
        base: &ExperimentConfig,
        variants: Vec<Variant>,
    ) -> Result<Grid> {
        let dir = self
            .out
            .join(format!("{command}-{}", run_id(command, &base.to_toml())));
        create_dir(&dir)?;
        write_text(&dir.join("config.toml"), &base.to_toml())?;
        let mut cells = Vec::new();
        for v in &variants {
            for &seed in &base.seeds {
                let run = self.training_run(Kind::Lodo, &v.config.for_seed(seed), None)?;
                cells.extend(run.rows.iter().map(|r| CellRow {
                    variant: v.label.clone(),
                    seed,
                    target: r.target,
                    accuracy: r.accuracy,
                    run_id: run.id.clone(),
                }));
            }
        }
        write_csv(&dir.join("cells.csv"), &cells)?;
        let labels: Vec<String> = variants.iter().map(|v| v.label.clone()).collect();
        let agg = export::aggregate(&cells, &labels);
        write_text(&dir.join("summary.csv"), &export::wide_csv(&agg))?;
        self.log(format_args!("{}", export::render(&agg)));
        Ok(Grid { dir, cells })
    }

    pub fn ablate_components(&self, base: &ExperimentConfig) -> Result<Grid> {
        self.grid("ablate-components", base, component_variants(base))
    }

    pub fn ablate_mmd_routing(&self, base: &ExperimentConfig) -> Result<Grid> {
        self.grid("ablate-mmd-routing", base, routing_variants(base))
    }

    pub fn ablate_strategy(&self, base: &ExperimentConfig) -> Result<Grid> {
        self.grid("ablate-strategy", base, strategy_variants(base))
    }

    pub fn sweep_alpha(&self, base: &ExperimentConfig) -> Result<Grid> {
        self.grid("sweep-alpha", base, alpha_variants(base))
    }

    /// Drop curves and rankings for every configured strategy, one
    /// HA-LoRA base model per seed.
    pub fn headdrop(&self, base: &ExperimentConfig) -> Result<HeaddropOutput> {
        let dir = self
            .out
            .join(format!("headdrop-{}", run_id("headdrop", &base.to_toml())));
        create_dir(&dir)?;
        write_text(&dir.join("config.toml"), &base.to_toml())?;
        let mut out = HeaddropOutput {
            dir: dir.clone(),
            curves: Vec::new(),
            rankings: Vec::new(),
        };
        for &seed in &base.seeds {
            let cfg = headdrop_base(base).for_seed(seed);
            let run = self.headdrop_run(&cfg)?;
            out.curves
                .extend(read_csv::<CurveRow>(&run.join("curves.csv"))?);
            out.rankings.extend(
                read_csv::<RankingRow>(&run.join("rankings.csv"))?
                    .into_iter()
                    .map(|r| SeededRanking {
                        seed,
                        strategy: r.strategy,
                        rank: r.rank,
                        layer: r.layer,
                        head: r.head,
                        score: r.score,
                    }),
            );
        }
        write_csv(&dir.join("curves.csv"), &out.curves)?;
        write_csv(&dir.join("rankings.csv"), &out.rankings)?;
        Ok(out)
    }

    fn headdrop_run(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let seed = cfg.seeds[0];
        let (_, dir, done) = self.claim("headdrop", cfg)?;
        if done.is_some() {
            return Ok(dir);
        }
        let ds = make_dataset(&cfg.data, seed)?;
        let target = cfg.headdrop.target;
        let metrics_path = dir.join("metrics.jsonl");
        let mut lines = String::new();
        let mut sink = |r: &Record| {
            lines.push_str(
                &serde_json::to_string(&MetricLine { target, record: r })
                    .expect("record serializes"),
            );
            lines.push('\n');
        };
        let (t, accuracy) = train_target(cfg, &ds, target, None, &mut sink, &mut |_| Ok(()))?;
        write_text(&metrics_path, &lines)?;
        let split = lodo_split(&ds, target, false)?;
        let hd = &cfg.headdrop;
        let mut curves = Vec::new();
        let mut rankings = Vec::new();
        for &strategy in &hd.strategies {
            let plan = hd.plan(strategy);
            plan.validate(t.model.config.total_heads())?;
            let mut r = rng::stream(hd.bernoulli.seed, "headlab/random");
            let reps = if strategy == DropStrategy::Random {
                plan.repeats
            } else {
                1
            };
            let mut per = Vec::with_capacity(reps);
            for rep in 0..reps {
                let scored = rank_scored(
                    strategy,
                    &t.model,
                    &t.anchors,
                    &ds,
                    &split.train,
                    &hd.bernoulli,
                    &mut r,
                )?;
                let order: Vec<_> = scored.iter().map(|(h, _)| *h).collect();
                per.push(drop_curve(
                    &t.model,
                    &t.anchors,
                    &order,
                    &plan.drop_counts,
                    &ds,
                    &split.test,
                )?);
                if rep == 0 {
                    rankings.extend(scored.iter().enumerate().map(
                        |(rank, ((layer, head), score))| RankingRow {
                            strategy,
                            rank,
                            layer: *layer,
                            head: *head,
                            score: *score,
                        },
                    ));
                }
            }
            let curve: Vec<CurvePoint> = mean_curve(&per)?;
            self.log(format_args!(
                "[headdrop] seed {seed} {:<14} {:?}",
                strategy.as_str(),
                curve
                    .iter()
                    .map(|p| (1000.0 * p.accuracy).round() / 10.0)
                    .collect::<Vec<_>>()
            ));
            curves.extend(curve.into_iter().map(|p| CurveRow {
                strategy,
                seed,
                drop_count: p.drop_count,
                accuracy: p.accuracy,
            }));
        }
        write_csv(&dir.join("curves.csv"), &curves)?;
        write_csv(&dir.join("rankings.csv"), &rankings)?;
        write_csv(
            &dir.join("results.csv"),
            &[ResultRow {
                seed,
                target,
                accuracy,
            }],
        )?;
        Ok(dir)
    }

    /// Synthetic dataset file and manifest for every seed.
    pub fn data(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let mut dirs = Vec::new();
        for &seed in &cfg.seeds {
            let c = cfg.for_seed(seed);
            let (_, dir, done) = self.claim("data", &c)?;
            if done.is_none() {
                let ds = make_dataset(&c.data, seed)?;
                crate::dataset::save(&ds, &dir.join("dataset.hpds"))?;
                write_csv(&dir.join("manifest.csv"), &crate::dataset::manifest(&ds))?;
                write_csv::<ResultRow>(&dir.join("results.csv"), &[])?;
            }
            dirs.push(dir);
        }
        Ok(dirs)
    }

    /// Gate table of a checkpoint, written next to a copy-free reference to it.
    pub fn dump_gates(&self, ckpt_path: &Path) -> Result<PathBuf> {
        let bytes = fs::read(ckpt_path).map_err(Error::io(ckpt_path))?;
        let ck = Checkpoint::from_bytes(&bytes).map_err(|m| Error::format(ckpt_path, m))?;
        if ck.model.gates.is_none() {
            return Err(Error::Config(format!(
                "{}: model has no gates",
                ckpt_path.display()
            )));
        }
        let dir = self.out.join(format!("gates-{}", content_id(&bytes)));
        create_dir(&dir)?;
        let path = dir.join("gate_report.csv");
        write_csv(
            &path,
            &gate_report(&ck.model.params, ck.model.config.num_layers)?,
        )?;
        Ok(path)
    }

    /// Merged-weights copy of a checkpoint.
    pub fn merge(&self, ckpt_path: &Path) -> Result<PathBuf> {
        let bytes = fs::read(ckpt_path).map_err(Error::io(ckpt_path))?;
        let ck = Checkpoint::from_bytes(&bytes).map_err(|m| Error::format(ckpt_path, m))?;
        let dir = self.out.join(format!("merged-{}", content_id(&bytes)));
        create_dir(&dir)?;
        let path = dir.join("merged.hpck");
        ck.merged()?.save(&path)?;
        Ok(path)
    }
}

fn content_id(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: DropStrategy,
    pub seed: u64,
    pub drop_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub strategy: DropStrategy,
    pub rank: usize,
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededRanking {
    pub seed: u64,
    pub strategy: DropStrategy,
    pub rank: usize,
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct HeaddropOutput {
    pub dir: PathBuf,
    pub curves: Vec<CurveRow>,
    pub rankings: Vec<SeededRanking>,
}

/// Heads are dropped from a model adapted by HA-LoRA alone, trained on the
/// classification loss.
pub fn headdrop_base(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.modules = Modules {
        halora: true,
        dig: false,
    };
    c.train.alpha = 0.0;
    c
}

pub fn component_variants(base: &ExperimentConfig) -> Vec<Variant> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(halora, dig)| {
            let mut c = base.clone();
            c.modules = Modules { halora, dig };
            Variant {
                label: c.modules.label().into(),
                config: c,
            }
        })
        .collect()
}

pub fn routing_variants(base: &ExperimentConfig) -> Vec<Variant> {
    MmdUpdates::ALL
        .into_iter()
        .map(|m| {
            let mut c = base.clone();
            c.train.mmd_updates = m;
            Variant {
                label: m.as_str().into(),
                config: c,
            }
        })
        .collect()
}

pub fn strategy_variants(base: &ExperimentConfig) -> Vec<Variant> {
    Strategy::ALL
        .into_iter()
        .map(|s| {
            let mut c = base.clone();
            c.train.strategy = s;
            Variant {
                label: s.as_str().into(),
                config: c,
            }
        })
        .collect()
}

pub fn alpha_variants(base: &ExperimentConfig) -> Vec<Variant> {
    base.sweep
        .alpha
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            c.train.alpha = a;
            Variant {
                label: format!("alpha={a}"),
                config: c,
            }
        })
        .collect()
}
