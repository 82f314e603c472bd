//! Training: loss over integrated batches, Adam with constraint
//! maintenance, full experiment runs, and multi-seed aggregation.

use crate::cde::{
    cde_rhs, collapse, solve, CdeError, ModelParams, Constraint, SolverConfig, VariantId,
};
use crate::linalg::{self, SquareMatrix};
use crate::path::{fit_natural_cubic, generate_spirals, PathError, SplinePath};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

/// Experiment scale: 128 spirals of 100 observations, noise 0.02.
pub const TRAIN_SPIRALS: usize = 128;
pub const SPIRAL_TIMESTEPS: usize = 100;
pub const SPIRAL_NOISE: f64 = 0.02;
/// The held-out set uses the run seed plus this offset.
pub const TEST_SEED_OFFSET: u64 = 1000;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Cde(#[from] CdeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: CdeError,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("aggregation needs at least one report")]
    NoReports,
}

/// Settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: VariantId,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    pub g2_mode: collapse::G2Mode,
    pub repeats: usize,
}

impl TrainConfig {
    /// Defaults for a variant: 20 epochs, its published learning rate,
    /// batches of 32, adaptive solver.
    pub fn new(variant: VariantId) -> Self {
        Self {
            variant,
            epochs: 20,
            lr: variant.default_lr(),
            batch_size: 32,
            solver: SolverConfig::default(),
            seed: 0,
            g2_mode: collapse::G2Mode::default(),
            repeats: 1,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs < 1 {
            return Err(HarnessError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(HarnessError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.repeats < 1 {
            return Err(HarnessError::InvalidConfig("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step over every trainable tensor.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) {
    assert_eq!(grads.len(), model.params().len(), "one gradient per parameter");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, param) in model.params_mut().iter_mut().enumerate() {
        let g = &grads[idx];
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for (i, value) in param.tensor.data_mut().iter_mut().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Adam on every trainable, then polar projection of each maintained
/// matrix back onto the orthogonal group. Exponential-map generators need
/// no projection: their constraint is intrinsic.
pub fn constrained_update(
    model: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), HarnessError> {
    adam_step(model, grads, state, lr);
    for param in model.params_mut() {
        if param.constraint == Constraint::OrthoMaintained {
            let n = param.tensor.shape()[0];
            let m = SquareMatrix::from_slice(n, param.tensor.data()).expect("square");
            let projected = linalg::polar_project(&m)?;
            param.tensor.data_mut().copy_from_slice(projected.as_slice());
        }
    }
    Ok(())
}

/// Builds the batch loss on `tape`: integrate each sample's CDE, take
/// squared moduli of the terminal state, and score the mean NLL under the
/// softmax of those moduli (the norm-1 readout fused into the loss for
/// stability).
pub fn batch_loss(
    tape: &mut Tape,
    model: &ModelParams,
    samples: &[(SplinePath, usize)],
    indices: &[usize],
    solver: &mut SolverConfig,
) -> Result<(TensorId, Vec<TensorId>), HarnessError> {
    if indices.is_empty() {
        return Err(HarnessError::EmptyBatch);
    }
    let realized = model.realize(tape)?;
    let mut rows = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let (path, label) = &samples[i];
        let x0 = path.eval_at(path.t_start()).0;
        let z0 = realized.init_hidden(tape, &x0)?;
        let mut rhs = |tp: &mut Tape, c: &mut SolverConfig, t: f64, z: TensorId| {
            cde_rhs(tp, c, t, z, path, &realized)
        };
        let sol = solve(tape, solver, &mut rhs, z0, path.t_start(), path.t_end())
            .map_err(|e| HarnessError::Sample { sample: i, source: e })?;
        rows.push(tape.pair_square_sum(sol.state)?);
        targets.push(*label);
    }
    let logits = tape.stack_rows(&rows)?;
    let loss = tape.log_softmax_nll(logits, &targets)?;
    Ok((loss, realized.leaf_ids().to_vec()))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationStats {
    pub loss: f64,
    pub nfe_forward: u64,
    pub nfe_backward: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub nfe_forward: u64,
    pub nfe_backward: u64,
    pub iterations: Vec<IterationStats>,
}

/// Per-run metrics in the shape of the published results table.
/// `wall_time` is seconds and is the one non-deterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: VariantId,
    pub seed: u64,
    pub final_loss: f64,
    pub forward_nfe: u64,
    pub backward_nfe: u64,
    pub accuracy_train: f64,
    pub accuracy_test: f64,
    pub wall_time: f64,
}

impl RunReport {
    /// Equality over every deterministic field (wall time excluded).
    pub fn same_results(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.seed == other.seed
            && self.final_loss == other.final_loss
            && self.forward_nfe == other.forward_nfe
            && self.backward_nfe == other.backward_nfe
            && self.accuracy_train == other.accuracy_train
            && self.accuracy_test == other.accuracy_test
    }
}

/// A full run bundled for the JSON sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub report: RunReport,
    pub epochs: Vec<EpochStats>,
}

/// Incremental training driver. One instance owns the model, optimizer
/// state, and both datasets for a single (variant, seed) run.
pub struct Trainer {
    cfg: TrainConfig,
    model: ModelParams,
    adam: AdamState,
    train: Vec<(SplinePath, usize)>,
    test: Vec<(SplinePath, usize)>,
    shuffle_rng: ChaCha8Rng,
    history: Vec<EpochStats>,
}

fn fit_dataset(samples: &[(crate::path::TimeSeries, usize)]) -> Result<Vec<(SplinePath, usize)>, PathError> {
    samples
        .iter()
        .map(|(series, label)| Ok((fit_natural_cubic(series)?, *label)))
        .collect()
}

impl Trainer {
    /// Standard experiment datasets: 128 train spirals at the run seed,
    /// 128 held-out spirals at seed + 1000.
    pub fn new(cfg: TrainConfig) -> Result<Self, HarnessError> {
        let train = generate_spirals(TRAIN_SPIRALS, SPIRAL_TIMESTEPS, SPIRAL_NOISE, cfg.seed)?;
        let test = generate_spirals(
            TRAIN_SPIRALS,
            SPIRAL_TIMESTEPS,
            SPIRAL_NOISE,
            cfg.seed + TEST_SEED_OFFSET,
        )?;
        Self::with_datasets(cfg, fit_dataset(&train.samples)?, fit_dataset(&test.samples)?)
    }

    /// Custom datasets (already spline-fit); used by reduced-scale tests.
    pub fn with_datasets(
        cfg: TrainConfig,
        train: Vec<(SplinePath, usize)>,
        test: Vec<(SplinePath, usize)>,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        // Independent ChaCha streams: 1 for parameter draws, 2 for batch
        // shuffling; the dataset generator owns stream 0.
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(1);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2);
        let model = ModelParams::init(cfg.variant, &mut init_rng);
        let adam = AdamState::new(&model);
        Ok(Self { cfg, model, adam, train, test, shuffle_rng, history: Vec::new() })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    /// One shuffled pass over the training set.
    pub fn run_epoch(&mut self) -> Result<EpochStats, HarnessError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut iterations = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let fwd_before = self.cfg.solver.nfe_forward;
            let bwd_before = self.cfg.solver.nfe_backward;
            let mut tape = Tape::new();
            let (loss, leaf_ids) =
                batch_loss(&mut tape, &self.model, &self.train, chunk, &mut self.cfg.solver)?;
            let loss_value = tape.value(loss)[0];
            let stats = tape.backward(loss)?;
            self.cfg.solver.nfe_backward += stats.rhs_vjp_evals;
            let grads: Vec<Vec<f64>> = leaf_ids
                .iter()
                .map(|&id| tape.grad(id).expect("parameter leaf").to_vec())
                .collect();
            constrained_update(&mut self.model, &grads, &mut self.adam, self.cfg.lr)?;
            iterations.push(IterationStats {
                loss: loss_value,
                nfe_forward: self.cfg.solver.nfe_forward - fwd_before,
                nfe_backward: self.cfg.solver.nfe_backward - bwd_before,
            });
        }
        let epoch = self.history.len() + 1;
        let mean_loss = iterations.iter().map(|s| s.loss).sum::<f64>() / iterations.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss,
            nfe_forward: iterations.iter().map(|s| s.nfe_forward).sum(),
            nfe_backward: iterations.iter().map(|s| s.nfe_backward).sum(),
            iterations,
        };
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Argmax label for one path under the current model. Both readout
    /// normalizations are monotone, so the argmax of the squared moduli is
    /// the prediction either way.
    pub fn predict(&self, path: &SplinePath) -> Result<usize, HarnessError> {
        let mut tape = Tape::new();
        // Scratch counters: evaluation passes stay out of the training NFE.
        let mut scratch = self.cfg.solver.clone();
        let realized = self.model.realize(&mut tape)?;
        let x0 = path.eval_at(path.t_start()).0;
        let z0 = realized.init_hidden(&mut tape, &x0)?;
        let mut rhs = |tp: &mut Tape, c: &mut SolverConfig, t: f64, z: TensorId| {
            cde_rhs(tp, c, t, z, path, &realized)
        };
        let sol = solve(&mut tape, &mut scratch, &mut rhs, z0, path.t_start(), path.t_end())?;
        let moduli = collapse::g1(tape.value(sol.state)).expect("even state layout");
        Ok(collapse::g3_argmax(&moduli))
    }

    fn accuracy(&self, dataset: &[(SplinePath, usize)]) -> Result<f64, HarnessError> {
        let mut correct = 0usize;
        for (path, label) in dataset {
            if self.predict(path)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    pub fn train_accuracy(&self) -> Result<f64, HarnessError> {
        self.accuracy(&self.train)
    }

    pub fn test_accuracy(&self) -> Result<f64, HarnessError> {
        self.accuracy(&self.test)
    }

    /// Report over the final epoch's window.
    pub fn report(&self, wall_time: f64) -> Result<RunReport, HarnessError> {
        let last = self
            .history
            .last()
            .ok_or_else(|| HarnessError::InvalidConfig("no epochs have run".into()))?;
        Ok(RunReport {
            variant: self.cfg.variant,
            seed: self.cfg.seed,
            final_loss: last.mean_loss,
            forward_nfe: last.nfe_forward,
            backward_nfe: last.nfe_backward,
            accuracy_train: self.train_accuracy()?,
            accuracy_test: self.test_accuracy()?,
            wall_time,
        })
    }
}

/// Trains for `cfg.epochs` epochs on the standard spiral datasets and
/// reports final-epoch loss and NFE totals plus train/test accuracy.
pub fn run_experiment(cfg: TrainConfig) -> Result<RunRecord, HarnessError> {
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    let report = trainer.report(started.elapsed().as_secs_f64())?;
    Ok(RunRecord { config: cfg, report, epochs: trainer.history().to_vec() })
}

/// Runs every config, fanning out over at most `threads` workers. Results
/// come back in input order regardless of scheduling.
pub fn run_many(configs: Vec<TrainConfig>, threads: usize) -> Result<Vec<RunRecord>, HarnessError> {
    let threads = threads.max(1).min(configs.len().max(1));
    if threads == 1 {
        return configs.into_iter().map(run_experiment).collect();
    }
    let jobs: Vec<(usize, TrainConfig)> = configs.into_iter().enumerate().collect();
    let results: Mutex<Vec<Option<Result<RunRecord, HarnessError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let next = cursor.fetch_add(1, Ordering::Relaxed);
                if next >= jobs.len() {
                    break;
                }
                let (slot, cfg) = &jobs[next];
                let outcome = run_experiment(cfg.clone());
                results.lock().unwrap()[*slot] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Mean and sample standard deviation (n - 1; zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// One aggregated row per variant, in the published table's column order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub final_loss: MeanStd,
    pub forward_nfe: MeanStd,
    pub backward_nfe: MeanStd,
    pub accuracy_train: MeanStd,
    pub accuracy_test: MeanStd,
}

/// Groups reports by variant (sorted by variant then seed first, so the
/// result is independent of completion order) and reduces each metric.
pub fn aggregate(reports: &[RunReport]) -> Result<Vec<SummaryRow>, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::NoReports);
    }
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.variant, r.seed));
    let mut rows = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let variant = sorted[i].variant;
        let group: Vec<&RunReport> =
            sorted[i..].iter().take_while(|r| r.variant == variant).cloned().collect();
        i += group.len();
        let col = |f: fn(&RunReport) -> f64| -> MeanStd {
            mean_std(&group.iter().map(|r| f(r)).collect::<Vec<f64>>())
        };
        rows.push(SummaryRow {
            model: variant.name().to_string(),
            final_loss: col(|r| r.final_loss),
            forward_nfe: col(|r| r.forward_nfe as f64),
            backward_nfe: col(|r| r.backward_nfe as f64),
            accuracy_train: col(|r| r.accuracy_train),
            accuracy_test: col(|r| r.accuracy_test),
        });
    }
    Ok(rows)
}
