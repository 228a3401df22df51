//! Subcommand implementations. Each one checks its primary output first and
//! returns [`Outcome::Skipped`] when it is already present.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use astra_tda::attribution::{
    ensemble, if_attribute, solve_seed, source_attribute, train_gradients, AttributionMatrix,
    IfSolver, SourceMode, SourcePlan,
};
use astra_tda::data::{
    corrupt_labels, load_csv_raw, split, synth_classification, synth_regression, write_csv,
    Dataset, DatasetManifest,
};
use astra_tda::ekfac::{fit, Accumulation, EkfacState};
use astra_tda::evaluation::{
    bin_curve, compute_ground_truth, curvature_scan, generate_masks, lds, null_lds,
    plateau_iteration, write_curvature_csv, Bin, GroundTruth, GroundTruthPlan, MaskSet, ScanConfig,
    ScanLds,
};
use astra_tda::ihvp::{
    effective_damping, neumann_filter, solve, InitMode, SolverConfig, LR_SWEEP_GRID,
};
use astra_tda::io::{
    read_attribution, read_ekfac, read_trajectory, write_attribution, write_ekfac,
    write_solve_trace, write_trajectory, TRAJECTORY_MANIFEST,
};
use astra_tda::model::{measurement_grad, Example, MlpSpec, Task};
use astra_tda::seed::derive;
use astra_tda::trainer::{implied_damping, segment_trajectory, train, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::run::{member_key, ModelSeeds, RunDir, ScoreMeta, CONFIG_COPY};
use crate::{Cli, Command, IterativeMethod, Method, Outcome, SourceMethod};

pub const TRAIN_CSV: &str = "data/train.csv";
pub const QUERIES_CSV: &str = "data/queries.csv";
pub const DATASET_JSON: &str = "data/dataset.json";
pub const MASKS_CSV: &str = "groundtruth/masks.csv";
pub const GROUND_TRUTH_CSV: &str = "groundtruth/ground_truth.csv";
pub const CELLS_DIR: &str = "groundtruth/cells";
pub const NULL_JSON: &str = "lds/null.json";
pub const FILTER_CSV: &str = "neumann/filter.csv";
/// Objectives averaged when ranking sweep step sizes.
const SWEEP_TAIL: usize = 10;

pub fn model_dir(k: usize) -> PathBuf {
    Path::new("models").join(member_key(k))
}

pub fn trajectory_dir(k: usize) -> PathBuf {
    model_dir(k).join("trajectory")
}

pub fn ekfac_path(k: usize) -> PathBuf {
    model_dir(k).join("ekfac.ekfc")
}

pub fn segment_ekfac_path(k: usize, segment: usize) -> PathBuf {
    model_dir(k)
        .join("source")
        .join(format!("segment_{segment:02}.ekfc"))
}

pub fn scores_path(name: &str) -> PathBuf {
    Path::new("scores").join(format!("{name}.attr"))
}

pub fn lds_path(name: &str) -> PathBuf {
    Path::new("lds").join(format!("{name}.json"))
}

pub fn trace_path(method: &str, query: usize) -> PathBuf {
    Path::new("ihvp").join(format!("{method}_q{query:03}.csv"))
}

pub fn sweep_path(method: &str, query: usize) -> PathBuf {
    Path::new("ihvp").join(format!("{method}_q{query:03}_sweep.csv"))
}

pub fn scan_path(query: usize) -> PathBuf {
    Path::new("scan").join(format!("curvature_q{query:03}.csv"))
}

/// `if_astra`, `source_ekfac_ens4`, ...
pub fn score_name(kind: &str, tag: &str, ensemble: usize) -> String {
    if ensemble == 1 {
        format!("{kind}_{tag}")
    } else {
        format!("{kind}_{tag}_ens{ensemble}")
    }
}

fn member_scores_path(name: &str, k: usize) -> PathBuf {
    if k == 0 {
        scores_path(name)
    } else {
        Path::new("scores")
            .join("members")
            .join(format!("{name}_{}.attr", member_key(k)))
    }
}

impl Method {
    fn solver(self) -> IfSolver {
        match self {
            Method::Ekfac => IfSolver::Ekfac,
            Method::Astra => IfSolver::Astra,
            Method::Sni => IfSolver::Sni,
            Method::Identity => IfSolver::Identity,
        }
    }
}

impl IterativeMethod {
    fn tag(self) -> &'static str {
        match self {
            IterativeMethod::Astra => "astra",
            IterativeMethod::Sni => "sni",
        }
    }
}

impl SourceMethod {
    fn mode(self) -> SourceMode {
        match self {
            SourceMethod::Ekfac => SourceMode::Ekfac,
            SourceMethod::Astra => SourceMode::Astra,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SourceMethod::Ekfac => "ekfac",
            SourceMethod::Astra => "astra",
        }
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::config("--workers", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
    Ok(pool.install(f))
}

fn check_ensemble(k: usize) -> Result<()> {
    if k == 0 {
        return Err(CliError::config("--ensemble", "must be at least 1"));
    }
    Ok(())
}

/// Loads the config named on the command line and opens its run directory.
pub fn open(cli: &Cli) -> Result<(ExperimentConfig, RunDir)> {
    let path = match (&cli.config, &cli.run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(CONFIG_COPY),
        (None, None) => {
            return Err(CliError::config(
                "--config",
                "no config file given and no --run-dir to read one from",
            ))
        }
    };
    if !path.is_file() {
        return Err(CliError::config(
            "--config",
            format!("config file {} does not exist", path.display()),
        ));
    }
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = RunDir::open(&config, cli.run_dir.as_deref())?;
    Ok((config, run))
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let (config, run) = open(cli)?;
    let mut ctx = Ctx { config, run };
    match cli.command {
        Command::GenData => with_workers(Some(1), || ctx.gen_data())?,
        Command::Train => with_workers(Some(1), || ctx.train())?,
        Command::RetrainGrid { workers } => with_workers(workers, || ctx.retrain_grid())?,
        Command::Ekfac => with_workers(Some(1), || ctx.ekfac())?,
        Command::IhvpSolve {
            method,
            query,
            lr_sweep,
        } => with_workers(Some(1), || ctx.ihvp_solve(method, query, lr_sweep))?,
        Command::Attribute {
            method,
            ensemble,
            workers,
        } => with_workers(workers, || ctx.attribute(method, ensemble))?,
        Command::SourceAttribute {
            method,
            ensemble,
            workers,
        } => with_workers(workers, || ctx.source_attribute(method, ensemble))?,
        Command::Lds {
            method,
            ensemble,
            source,
        } => with_workers(Some(1), || ctx.lds(method, ensemble, source))?,
        Command::CurvatureScan => with_workers(Some(1), || ctx.curvature_scan())?,
        Command::NeumannDamping => with_workers(Some(1), || ctx.neumann_damping())?,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    train: DatasetManifest,
    queries: usize,
    /// Training indices whose labels were replaced.
    corrupted: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NullRecord {
    trials: usize,
    mean: f64,
    std_dev: f64,
    upper_bound: f64,
}

struct Ctx {
    config: ExperimentConfig,
    run: RunDir,
}

impl Ctx {
    fn skipped(&self, rel: &Path, what: &str) -> Option<Outcome> {
        self.run.path(rel).exists().then(|| Outcome::Skipped {
            message: format!(
                "{what} already present at {}; nothing to do",
                self.run.path(rel).display()
            ),
        })
    }

    fn data(&self) -> Result<(Dataset, Vec<Example>)> {
        let task = self.config.data.task();
        let train_path = self.run.require(TRAIN_CSV, "gen-data")?;
        let query_path = self.run.require(QUERIES_CSV, "gen-data")?;
        let mut train = load_csv_raw(&train_path, "target", task)?;
        let queries = load_csv_raw(&query_path, "target", task)?;
        if task == Task::Classification {
            train.num_classes = match self.config.data.source {
                DataSource::Classification { classes, .. } => Some(classes),
                _ => train.num_classes.max(queries.num_classes),
            };
        }
        Ok((train, queries.examples))
    }

    fn spec(&self, train: &Dataset) -> Result<MlpSpec> {
        Ok(MlpSpec::new(
            self.config
                .layer_dims(train.feature_dim, train.output_dim()),
            train.task,
        )?)
    }

    fn model_seeds(&self, k: usize) -> ModelSeeds {
        ModelSeeds::member(self.run.seeds().master, k)
    }

    /// Trains member `k` and stores its trajectory.
    fn train_member(
        &mut self,
        spec: &MlpSpec,
        train_set: &Dataset,
        k: usize,
    ) -> Result<Trajectory> {
        let seeds = self.model_seeds(k);
        let cfg = self.config.train.train_config(seeds.init, seeds.batch);
        let traj = train(spec, train_set, &cfg, None)?;
        let rel = trajectory_dir(k);
        write_trajectory(&self.run.path(&rel), &traj)?;
        self.run.record_model(k, seeds)?;
        self.run
            .record(&[(format!("trajectory.{}", member_key(k)), rel)])?;
        Ok(traj)
    }

    /// The primary model's trajectory must exist; ensemble members are
    /// trained on demand.
    fn trajectory(&mut self, spec: &MlpSpec, train_set: &Dataset, k: usize) -> Result<Trajectory> {
        let manifest = trajectory_dir(k).join(TRAJECTORY_MANIFEST);
        if k == 0 {
            self.run.require(&manifest, "train")?;
        } else if !self.run.path(&manifest).exists() {
            log::info!("training ensemble member {k}");
            return self.train_member(spec, train_set, k);
        }
        Ok(read_trajectory(&self.run.path(trajectory_dir(k)), spec)?)
    }

    fn fit_ekfac(
        &mut self,
        spec: &MlpSpec,
        traj: &Trajectory,
        train_set: &Dataset,
        k: usize,
    ) -> Result<EkfacState> {
        let state = fit(
            spec,
            traj.final_params(),
            &train_set.examples,
            self.model_seeds(k).ekfac,
            Accumulation::Sequential,
        )?;
        let rel = ekfac_path(k);
        write_ekfac(&self.run.output(&rel)?, &state)?;
        self.run
            .record(&[(format!("ekfac.{}", member_key(k)), rel)])?;
        Ok(state)
    }

    fn ekfac_state(
        &mut self,
        spec: &MlpSpec,
        traj: &Trajectory,
        train_set: &Dataset,
        k: usize,
    ) -> Result<EkfacState> {
        let rel = ekfac_path(k);
        if k == 0 {
            self.run.require(&rel, "ekfac")?;
        } else if !self.run.path(&rel).exists() {
            return self.fit_ekfac(spec, traj, train_set, k);
        }
        Ok(read_ekfac(&self.run.path(&rel), spec)?)
    }

    /// Configured damping, or the step-weighted `1/(η̄K)` of the segments.
    fn damping(&mut self, traj: &Trajectory, k: usize) -> Result<f64> {
        let d = match self.config.solver.damping {
            Some(d) => d,
            None => implied_damping(&segment_trajectory(traj, self.config.segments)?),
        };
        self.run.record_damping(k, d)?;
        Ok(d)
    }

    fn masks(&self, n: usize) -> Result<MaskSet> {
        Ok(generate_masks(
            n,
            self.config.eval.beta,
            self.config.eval.masks,
            self.run.seeds().masks,
        )?)
    }

    fn gen_data(&mut self) -> Result<Outcome> {
        if let Some(s) = self.skipped(Path::new(QUERIES_CSV), "dataset") {
            return Ok(s);
        }
        let seeds = self.run.seeds();
        let d = &self.config.data;
        let (full, kind, source_path) = match &d.source {
            DataSource::Regression { n, d, noise } => (
                synth_regression(*n, *d, *noise, seeds.data)?,
                "regression",
                None,
            ),
            DataSource::Classification {
                n,
                d,
                classes,
                margin,
            } => (
                synth_classification(*n, *d, *classes, *margin, seeds.data)?,
                "classification",
                None,
            ),
            DataSource::Csv { path, target, task } => (
                load_csv_raw(path, target, *task)?,
                "csv",
                Some(path.clone()),
            ),
        };
        if d.queries + 2 > full.len() {
            return Err(CliError::config(
                "data.queries",
                format!(
                    "{} queries leave fewer than 2 training examples out of {}",
                    d.queries,
                    full.len()
                ),
            ));
        }
        let (mut train_set, queries) = split(&full, d.queries, seeds.split)?;
        let corrupted = if d.corrupt > 0.0 {
            corrupt_labels(&mut train_set, d.corrupt, seeds.corrupt)?
        } else {
            Vec::new()
        };
        train_set.standardize();
        let queries = Dataset::new(
            train_set.apply_stats(&queries),
            train_set.task,
            train_set.num_classes,
        )?;
        write_csv(&train_set, &self.run.output(TRAIN_CSV)?)?;
        write_csv(&queries, &self.run.output(QUERIES_CSV)?)?;
        let record = DatasetRecord {
            train: DatasetManifest::describe(&train_set, kind, Some(seeds.data), source_path),
            queries: queries.len(),
            corrupted,
        };
        fs::write(
            self.run.path(DATASET_JSON),
            serde_json::to_string_pretty(&record)?,
        )
        .map_err(|e| CliError::io(DATASET_JSON, e))?;
        let artifacts = vec![
            ("data.train".to_string(), PathBuf::from(TRAIN_CSV)),
            ("data.queries".to_string(), PathBuf::from(QUERIES_CSV)),
            ("data.manifest".to_string(), PathBuf::from(DATASET_JSON)),
        ];
        self.run.record(&artifacts)?;
        Ok(Outcome::Done {
            message: format!(
                "{} training examples, {} queries, d = {}",
                train_set.len(),
                queries.len(),
                train_set.feature_dim
            ),
            artifacts: artifacts.into_iter().map(|a| self.run.path(a.1)).collect(),
        })
    }

    fn train(&mut self) -> Result<Outcome> {
        if let Some(s) = self.skipped(
            &trajectory_dir(0).join(TRAJECTORY_MANIFEST),
            "checkpoint manifest",
        ) {
            return Ok(s);
        }
        let (train_set, _) = self.data()?;
        let spec = self.spec(&train_set)?;
        let traj = self.train_member(&spec, &train_set, 0)?;
        let tail = traj.losses.len().min(10);
        let loss = traj.losses[traj.losses.len() - tail..].iter().sum::<f64>() / tail as f64;
        Ok(Outcome::Done {
            message: format!(
                "{} steps, {} checkpoints, final mini-batch loss {loss:.4e}",
                traj.total_steps(),
                traj.checkpoints.len()
            ),
            artifacts: vec![self.run.path(trajectory_dir(0))],
        })
    }

    fn ekfac(&mut self) -> Result<Outcome> {
        if let Some(s) = self.skipped(&ekfac_path(0), "curvature state") {
            return Ok(s);
        }
        let (train_set, _) = self.data()?;
        let spec = self.spec(&train_set)?;
        let traj = self.trajectory(&spec, &train_set, 0)?;
        let state = self.fit_ekfac(&spec, &traj, &train_set, 0)?;
        let mut scalings = state.scalings();
        scalings.sort_by(f64::total_cmp);
        Ok(Outcome::Done {
            message: format!(
                "{} layers, eigenvalues in [{:.3e}, {:.3e}]",
                state.layers().len(),
                scalings.first().copied().unwrap_or(0.0),
                scalings.last().copied().unwrap_or(0.0)
            ),
            artifacts: vec![self.run.path(ekfac_path(0))],
        })
    }

    fn retrain_grid(&mut self) -> Result<Outcome> {
        if let Some(s) = self.skipped(Path::new(GROUND_TRUTH_CSV), "ground truth") {
            return Ok(s);
        }
        let (train_set, queries) = self.data()?;
        let spec = self.spec(&train_set)?;
        let masks = self.masks(train_set.len())?;
        let mut listing = String::from("mask_id,train_id\n");
        for (j, m) in masks.masks().iter().enumerate() {
            for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                let _ = writeln!(listing, "{j},{i}");
            }
        }
        let masks_out = self.run.output(MASKS_CSV)?;
        fs::write(&masks_out, listing).map_err(|e| CliError::io(&masks_out, e))?;
        let plan = GroundTruthPlan {
            repeats: self.config.eval.repeats,
            base_seed: self.run.seeds().ground_truth,
            cache_dir: Some(&self.run.path(CELLS_DIR)),
        };
        let gt = compute_ground_truth(
            &spec,
            &train_set,
            &self.config.train.train_config(0, 0),
            &masks,
            &queries,
            &plan,
        )?;
        gt.write_csv(&self.run.output(GROUND_TRUTH_CSV)?)?;
        self.run.record(&[
            ("ground_truth".to_string(), PathBuf::from(GROUND_TRUTH_CSV)),
            ("masks".to_string(), PathBuf::from(MASKS_CSV)),
        ])?;
        Ok(Outcome::Done {
            message: format!(
                "{} masks x {} repeats retrained, {} cells excluded after divergence",
                masks.len(),
                plan.repeats,
                gt.excluded_cells().len()
            ),
            artifacts: vec![self.run.path(GROUND_TRUTH_CSV), self.run.path(MASKS_CSV)],
        })
    }

    fn ihvp_solve(
        &mut self,
        method: IterativeMethod,
        query: usize,
        sweep: bool,
    ) -> Result<Outcome> {
        let trace_rel = trace_path(method.tag(), query);
        if let Some(s) = self.skipped(&trace_rel, "solver trace") {
            return Ok(s);
        }
        let (train_set, queries) = self.data()?;
        if query >= queries.len() {
            return Err(CliError::config(
                "--query",
                format!("query {query} out of range (0..{})", queries.len()),
            ));
        }
        let spec = self.spec(&train_set)?;
        let traj = self.trajectory(&spec, &train_set, 0)?;
        let damping = self.damping(&traj, 0)?;
        let state = match method {
            IterativeMethod::Astra => Some(self.ekfac_state(&spec, &traj, &train_set, 0)?),
            IterativeMethod::Sni => None,
        };
        let theta = traj.final_params();
        let v = measurement_grad(&spec, theta, &queries[query])?;
        let seed = solve_seed(self.model_seeds(0).solver, query, 0);
        let config_for = |lr: Option<f64>| -> Result<SolverConfig> {
            match method {
                IterativeMethod::Astra => {
                    let mut c = self.config.solver.astra(damping, seed);
                    if let Some(lr) = lr {
                        c.lr = lr;
                    }
                    Ok(c)
                }
                IterativeMethod::Sni => self.config.solver.sni(damping, seed, lr),
            }
        };
        let run_solver = |c: &SolverConfig| {
            solve(
                &spec,
                theta,
                &train_set.examples,
                &v,
                c,
                state.as_ref(),
                &mut |_| ControlFlow::Continue(()),
            )
        };

        if !sweep {
            let cfg = config_for(None)?;
            let (_, trace) = run_solver(&cfg)?;
            write_solve_trace(&self.run.output(&trace_rel)?, &trace)?;
            self.run.record(&[(
                format!("trace.{}_q{query:03}", method.tag()),
                trace_rel.clone(),
            )])?;
            let last = trace.points.last().map_or(f64::NAN, |p| p.objective);
            return Ok(Outcome::Done {
                message: format!(
                    "{} at λ = {damping:.4e}, lr = {:.4e}: final objective {last:.6e}",
                    method.tag(),
                    cfg.lr
                ),
                artifacts: vec![self.run.path(trace_rel)],
            });
        }

        let mut table = String::from("lr,tail_objective,final_objective,diverged\n");
        let mut best: Option<(f64, f64, astra_tda::ihvp::SolveTrace)> = None;
        for lr in LR_SWEEP_GRID {
            match run_solver(&config_for(Some(lr))?) {
                Ok((_, trace)) => {
                    let objs: Vec<f64> = trace.points.iter().map(|p| p.objective).collect();
                    let tail = &objs[objs.len().saturating_sub(SWEEP_TAIL)..];
                    let score = tail.iter().sum::<f64>() / tail.len() as f64;
                    let _ = writeln!(
                        table,
                        "{lr},{score},{},false",
                        objs.last().copied().unwrap_or(f64::NAN)
                    );
                    if best.as_ref().is_none_or(|b| score < b.1) {
                        best = Some((lr, score, trace));
                    }
                }
                Err(astra_tda::Error::Divergence { iteration, .. }) => {
                    log::info!("lr {lr:e} diverged at iteration {iteration}");
                    let _ = writeln!(table, "{lr},,,true");
                }
                Err(e) => return Err(e.into()),
            }
        }
        let sweep_rel = sweep_path(method.tag(), query);
        let sweep_out = self.run.output(&sweep_rel)?;
        fs::write(&sweep_out, table).map_err(|e| CliError::io(&sweep_out, e))?;
        let (lr, score, trace) = best.ok_or_else(|| {
            CliError::Divergence(format!(
                "{} diverged at every swept step size",
                method.tag()
            ))
        })?;
        write_solve_trace(&self.run.output(&trace_rel)?, &trace)?;
        self.run.record(&[
            (
                format!("trace.{}_q{query:03}", method.tag()),
                trace_rel.clone(),
            ),
            (
                format!("sweep.{}_q{query:03}", method.tag()),
                sweep_rel.clone(),
            ),
        ])?;
        Ok(Outcome::Done {
            message: format!("{} sweep at λ = {damping:.4e}: best lr {lr:e} (mean of last {SWEEP_TAIL} objectives {score:.6e})", method.tag()),
            artifacts: vec![self.run.path(sweep_rel), self.run.path(trace_rel)],
        })
    }

    /// Loads a member's stored scores or computes and stores them.
    fn member_scores(
        &mut self,
        name: &str,
        k: usize,
        compute: impl FnOnce(&mut Self) -> Result<AttributionMatrix>,
    ) -> Result<AttributionMatrix> {
        let rel = member_scores_path(name, k);
        let key = if k == 0 {
            name.to_string()
        } else {
            format!("{name}.{}", member_key(k))
        };
        if self.run.path(&rel).exists() {
            if let Some(meta) = self.run.manifest().scores.get(&key) {
                return Ok(read_attribution(
                    &self.run.path(&rel),
                    meta.method.clone(),
                    meta.seeds.clone(),
                )?);
            }
        }
        let m = compute(self)?;
        write_attribution(&self.run.output(&rel)?, &m)?;
        if k == 0 {
            m.write_csv(&self.run.path(rel.with_extension("csv")))?;
        }
        self.run.record_scores(
            &key,
            ScoreMeta {
                method: m.method.clone(),
                seeds: m.seeds.clone(),
                ensemble_size: 1,
            },
        )?;
        self.run.record(&[(format!("scores.{key}"), rel)])?;
        Ok(m)
    }

    fn finish_scores(&mut self, name: &str, members: Vec<AttributionMatrix>) -> Result<Outcome> {
        let k = members.len();
        let rel = scores_path(name);
        if k > 1 {
            let m = ensemble(&members)?;
            write_attribution(&self.run.output(&rel)?, &m)?;
            m.write_csv(&self.run.path(rel.with_extension("csv")))?;
            self.run.record_scores(
                name,
                ScoreMeta {
                    method: m.method.clone(),
                    seeds: m.seeds.clone(),
                    ensemble_size: k,
                },
            )?;
            self.run
                .record(&[(format!("scores.{name}"), rel.clone())])?;
        }
        let first = &members[0];
        Ok(Outcome::Done {
            message: format!(
                "{name}: {} queries x {} training examples from {k} model(s)",
                first.num_queries(),
                first.num_train()
            ),
            artifacts: vec![
                self.run.path(&rel),
                self.run.path(rel.with_extension("csv")),
            ],
        })
    }

    fn attribute(&mut self, method: Method, k: usize) -> Result<Outcome> {
        check_ensemble(k)?;
        let solver = method.solver();
        let name = score_name("if", solver.tag(), k);
        if let Some(s) = self.skipped(&scores_path(&name), "scores") {
            return Ok(s);
        }
        if method == Method::Sni && self.config.solver.sni_lr.is_none() {
            return Err(CliError::config(
                "solver.sni_lr",
                "required for the sni solver",
            ));
        }
        let (train_set, queries) = self.data()?;
        let spec = self.spec(&train_set)?;
        let single = score_name("if", solver.tag(), 1);
        let mut members = Vec::with_capacity(k);
        for member in 0..k {
            let m = self.member_scores(&single, member, |ctx| {
                let traj = ctx.trajectory(&spec, &train_set, member)?;
                let damping = ctx.damping(&traj, member)?;
                let seed = ctx.model_seeds(member).solver;
                let cfg = match method {
                    Method::Sni => ctx.config.solver.sni(damping, seed, None)?,
                    _ => ctx.config.solver.astra(damping, seed),
                };
                let state = if solver.needs_curvature() {
                    Some(ctx.ekfac_state(&spec, &traj, &train_set, member)?)
                } else {
                    None
                };
                Ok(if_attribute(
                    &spec,
                    traj.final_params(),
                    &train_set.examples,
                    &queries,
                    solver,
                    &cfg,
                    state.as_ref(),
                )?)
            })?;
            members.push(m);
        }
        self.finish_scores(&name, members)
    }

    fn source_plan(
        &mut self,
        spec: &MlpSpec,
        traj: &Trajectory,
        train_set: &Dataset,
        k: usize,
    ) -> Result<SourcePlan> {
        let segments = segment_trajectory(traj, self.config.segments)?;
        let base = self.model_seeds(k).source;
        let mut states = Vec::with_capacity(segments.len());
        for seg in &segments {
            let rel = segment_ekfac_path(k, seg.index);
            let state = if self.run.path(&rel).exists() {
                read_ekfac(&self.run.path(&rel), spec)?
            } else {
                let s = fit(
                    spec,
                    &seg.mean_params,
                    &train_set.examples,
                    derive(base, &[seg.index as u64]),
                    Accumulation::Sequential,
                )?;
                write_ekfac(&self.run.output(&rel)?, &s)?;
                self.run.record(&[(
                    format!("ekfac.{}.segment_{:02}", member_key(k), seg.index),
                    rel,
                )])?;
                s
            };
            states.push(state);
        }
        Ok(SourcePlan::from_parts(segments, states)?)
    }

    fn source_attribute(&mut self, method: SourceMethod, k: usize) -> Result<Outcome> {
        check_ensemble(k)?;
        let name = score_name("source", method.tag(), k);
        if let Some(s) = self.skipped(&scores_path(&name), "scores") {
            return Ok(s);
        }
        let (train_set, queries) = self.data()?;
        let spec = self.spec(&train_set)?;
        let single = score_name("source", method.tag(), 1);
        let mut members = Vec::with_capacity(k);
        for member in 0..k {
            let m = self.member_scores(&single, member, |ctx| {
                let traj = ctx.trajectory(&spec, &train_set, member)?;
                let plan = ctx.source_plan(&spec, &traj, &train_set, member)?;
                let template = ctx
                    .config
                    .solver
                    .astra(plan.if_damping(), ctx.model_seeds(member).solver);
                Ok(source_attribute(
                    &spec,
                    &plan,
                    &train_set.examples,
                    &queries,
                    traj.final_params(),
                    method.mode(),
                    &template,
                )?)
            })?;
            members.push(m);
        }
        self.finish_scores(&name, members)
    }

    fn ground_truth(&self, masks: &MaskSet, queries: usize) -> Result<GroundTruth> {
        let path = self.run.require(GROUND_TRUTH_CSV, "retrain-grid")?;
        let gt = GroundTruth::read_csv(&path)?;
        if gt.num_masks() != masks.len() || gt.num_queries() != queries {
            return Err(CliError::Core(astra_tda::Error::Format {
                what: "ground truth",
                detail: format!(
                    "{} has {} masks and {} queries, expected {} and {queries}",
                    path.display(),
                    gt.num_masks(),
                    gt.num_queries(),
                    masks.len()
                ),
            }));
        }
        Ok(gt)
    }

    fn null_record(&mut self, masks: &MaskSet, gt: &GroundTruth) -> Result<NullRecord> {
        let path = self.run.path(NULL_JSON);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let trials = self.config.eval.null_trials;
        let null = null_lds(masks, gt, trials, self.run.seeds().null)?;
        let record = NullRecord {
            trials,
            mean: null.mean,
            std_dev: null.std_dev,
            upper_bound: null.upper_bound(),
        };
        let out = self.run.output(NULL_JSON)?;
        fs::write(&out, serde_json::to_string_pretty(&record)?)
            .map_err(|e| CliError::io(&out, e))?;
        self.run
            .record(&[("lds.null".to_string(), PathBuf::from(NULL_JSON))])?;
        Ok(record)
    }

    fn lds(&mut self, method: Method, k: usize, source: bool) -> Result<Outcome> {
        check_ensemble(k)?;
        let (name, producer) = if source {
            let tag = match method {
                Method::Ekfac => "ekfac",
                Method::Astra => "astra",
                _ => {
                    return Err(CliError::config(
                        "--method",
                        "--source supports ekfac or astra only",
                    ))
                }
            };
            (score_name("source", tag, k), "source-attribute")
        } else {
            (score_name("if", method.solver().tag(), k), "attribute")
        };
        let out_rel = lds_path(&name);
        if let Some(s) = self.skipped(&out_rel, "LDS report") {
            return Ok(s);
        }
        let scores = self.run.require(scores_path(&name), producer)?;
        let (train_set, queries) = self.data()?;
        let masks = self.masks(train_set.len())?;
        let gt = self.ground_truth(&masks, queries.len())?;
        let meta = self
            .run
            .manifest()
            .scores
            .get(&name)
            .cloned()
            .unwrap_or(ScoreMeta {
                method: name.clone(),
                seeds: Vec::new(),
                ensemble_size: k,
            });
        let matrix = read_attribution(&scores, meta.method, meta.seeds)?;
        let mut report = lds(&matrix, &masks, &gt)?;
        report.ensemble_size = meta.ensemble_size;
        report.write_json(&self.run.output(&out_rel)?)?;
        self.run
            .record(&[(format!("lds.{name}"), out_rel.clone())])?;
        let null = self.null_record(&masks, &gt)?;
        Ok(Outcome::Done {
            message: format!(
                "{name}: mean LDS {:.4} ± {:.4} over {} queries ({} excluded); random-score 3σ bound {:.4}",
                report.mean,
                report.stderr,
                report.per_query.len() - report.excluded,
                report.excluded,
                null.upper_bound
            ),
            artifacts: vec![self.run.path(out_rel), self.run.path(NULL_JSON)],
        })
    }

    fn curvature_scan(&mut self) -> Result<Outcome> {
        let e = self.config.eval.clone();
        if let Some(s) = self.skipped(&scan_path(e.scan_queries - 1), "curvature scan") {
            return Ok(s);
        }
        let (train_set, queries) = self.data()?;
        let spec = self.spec(&train_set)?;
        let traj = self.trajectory(&spec, &train_set, 0)?;
        let state = self.ekfac_state(&spec, &traj, &train_set, 0)?;
        let theta = traj.final_params();
        let truth_data = if self.run.path(GROUND_TRUTH_CSV).exists() {
            let masks = self.masks(train_set.len())?;
            let gt = self.ground_truth(&masks, queries.len())?;
            Some((
                masks,
                gt,
                train_gradients(&spec, theta, &train_set.examples)?,
            ))
        } else {
            log::info!("no ground truth yet; scanning objectives only");
            None
        };
        let base = SolverConfig {
            lr: e.scan_lr,
            damping: e.scan_damping,
            precond_damping: None,
            batch_size: None,
            iterations: e.scan_iterations,
            momentum: 0.0,
            lr_decay: None,
            repeats: 1,
            seed: self.model_seeds(0).solver,
            init: InitMode::Zero,
            full_objective_every: None,
            snapshot_every: None,
        };
        let scan = ScanConfig {
            damping: e.scan_damping,
            sni: base.clone(),
            astra: base,
            thresholds: e.bins.clone(),
            stride: e.scan_stride,
        };
        let (top, bottom) = (Bin::Above(e.bins[0]), Bin::Above(e.bins[e.bins.len() - 1]));
        let mut summary = String::new();
        let mut artifacts = Vec::new();
        for (q, query) in queries.iter().enumerate().take(e.scan_queries) {
            let v = measurement_grad(&spec, theta, query)?;
            let column;
            let lds_ctx = match &truth_data {
                Some((masks, gt, grads)) => {
                    column = gt.column(q);
                    Some(ScanLds {
                        masks,
                        truth: &column,
                        train_grads: grads,
                    })
                }
                None => None,
            };
            let rows = curvature_scan(
                &spec,
                theta,
                &train_set.examples,
                &state,
                &v,
                &scan,
                lds_ctx.as_ref(),
            )?;
            let rel = scan_path(q);
            write_curvature_csv(&rows, &self.run.output(&rel)?)?;
            self.run.record(&[(format!("scan.q{q:03}"), rel.clone())])?;
            let plateau = |bin| {
                plateau_iteration(&bin_curve(&rows, "sni", bin), 10, 1e-8)
                    .map_or("none".to_string(), |k| k.to_string())
            };
            let _ = writeln!(
                summary,
                "query {q}: sni plateau at {} (bin > {:e}) vs {} (bin > {:e})",
                plateau(top),
                e.bins[0],
                plateau(bottom),
                e.bins[e.bins.len() - 1]
            );
            artifacts.push(self.run.path(rel));
        }
        Ok(Outcome::Done {
            message: summary.trim_end().to_string(),
            artifacts,
        })
    }

    fn neumann_damping(&mut self) -> Result<Outcome> {
        if let Some(s) = self.skipped(Path::new(FILTER_CSV), "filter table") {
            return Ok(s);
        }
        let n = &self.config.neumann;
        let mut table =
            String::from("sigma,alpha,damping,iterations,filter,damped_inverse,effective_damping,effective_inverse,relative_error\n");
        for &j in &n.iterations {
            let lam_hat = effective_damping(n.alpha, n.damping, j as f64);
            for e in -24..=4 {
                let sigma = 10f64.powf(e as f64 / 4.0);
                let f = neumann_filter(sigma, n.alpha, n.damping, j as f64);
                let target = 1.0 / (sigma + lam_hat);
                let _ = writeln!(
                    table,
                    "{sigma},{},{},{j},{f},{},{lam_hat},{target},{}",
                    n.alpha,
                    n.damping,
                    1.0 / (sigma + n.damping),
                    (f - target).abs() / target
                );
            }
        }
        let out = self.run.output(FILTER_CSV)?;
        fs::write(&out, table).map_err(|e| CliError::io(&out, e))?;
        self.run
            .record(&[("neumann.filter".to_string(), PathBuf::from(FILTER_CSV))])?;
        Ok(Outcome::Done {
            message: format!(
                "filter table for α = {}, λ = {}, J ∈ {{{}}}",
                n.alpha,
                n.damping,
                rel_display_list(&n.iterations)
            ),
            artifacts: vec![out],
        })
    }
}

fn rel_display_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
