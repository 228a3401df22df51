//! Deterministic mini-batch SGD with momentum, checkpoint capture and
//! trajectory segmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mean_loss_and_grad, MlpSpec, ParamVector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `lr · factor^{⌊epoch / every_epochs⌋}`
    StepDecay {
        lr: f64,
        factor: f64,
        every_epochs: usize,
    },
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                lr,
                factor,
                every_epochs,
            } => lr * factor.powi((epoch / every_epochs.max(1)) as i32),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lr, ok) = match *self {
            LrSchedule::Constant { lr } => (lr, true),
            LrSchedule::StepDecay {
                lr,
                factor,
                every_epochs,
            } => (lr, factor > 0.0 && every_epochs >= 1),
        };
        if !(lr > 0.0) || !lr.is_finite() || !ok {
            return Err(Error::invalid(format!(
                "invalid learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
    pub batch_seed: u64,
    /// Steps between stored checkpoints; `None` stores one per epoch.
    /// The initial and final parameters are always stored.
    pub checkpoint_stride: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay {} is negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.checkpoint_stride == Some(0) {
            return Err(Error::invalid("checkpoint stride must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Strictly increasing steps, starting with the initialization at 0 and
    /// ending at `total_steps`.
    pub checkpoints: Vec<Checkpoint>,
    /// Learning rate used at each step.
    pub lrs: Vec<f64>,
    /// Mini-batch loss before each step.
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn total_steps(&self) -> usize {
        self.lrs.len()
    }

    pub fn final_params(&self) -> &ParamVector {
        &self
            .checkpoints
            .last()
            .expect("trajectory always has a checkpoint")
            .params
    }
}

/// Uniform in `[−1/√fan_in, 1/√fan_in]` per layer, fan_in excluding the bias.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed, &[0x1417]);
    let mut p = spec.zeros();
    for l in 0..spec.num_layers() {
        let bound = 1.0 / (spec.layer_dims()[l] as f64).sqrt();
        for w in p.layer_mut(l) {
            *w = rng.random_range(-bound..=bound);
        }
    }
    p
}

/// Trains from scratch on the examples selected by `mask` (all when `None`).
pub fn train(
    spec: &MlpSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    mask: Option<&[bool]>,
) -> Result<Trajectory> {
    config.validate()?;
    let included: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != dataset.len() {
                return Err(Error::dim(format!(
                    "mask of length {} for {} examples",
                    m.len(),
                    dataset.len()
                )));
            }
            (0..m.len()).filter(|&i| m[i]).collect()
        }
        None => (0..dataset.len()).collect(),
    };
    if included.is_empty() {
        return Err(Error::Empty("training set is empty after masking".into()));
    }
    if dataset.feature_dim != spec.input_dim()
        || dataset.output_dim() != spec.output_dim()
        || dataset.task != spec.task()
    {
        return Err(Error::dim(format!(
            "dataset ({} features, {} outputs, {}) does not fit network {:?} ({})",
            dataset.feature_dim,
            dataset.output_dim(),
            dataset.task,
            spec.layer_dims(),
            spec.task()
        )));
    }

    let mut params = init_params(spec, config.init_seed);
    let mut velocity = spec.zeros();
    let mut order = included;
    let mut batch_rng = seed::rng(config.batch_seed, &[0xba7c]);
    let steps_per_epoch = order.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;

    let mut checkpoints = vec![Checkpoint {
        step: 0,
        params: params.clone(),
    }];
    let mut lrs = Vec::with_capacity(total);
    let mut losses = Vec::with_capacity(total);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        let lr = config.schedule.at_epoch(epoch);
        for batch in order.chunks(config.batch_size) {
            let (loss, mut g) =
                mean_loss_and_grad(spec, &params, batch.iter().map(|&i| &dataset.examples[i]))?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::TrainingDivergence { step, loss });
            }
            g.axpy(config.weight_decay, &params);
            velocity.scale(config.momentum);
            velocity.axpy(1.0, &g);
            params.axpy(-lr, &velocity);
            lrs.push(lr);
            losses.push(loss);
            step += 1;
            let on_stride = match config.checkpoint_stride {
                Some(s) => step.is_multiple_of(s),
                None => step.is_multiple_of(steps_per_epoch),
            };
            if on_stride || step == total {
                checkpoints.push(Checkpoint {
                    step,
                    params: params.clone(),
                });
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::TrainingDivergence {
            step,
            loss: f64::NAN,
        });
    }
    Ok(Trajectory {
        checkpoints,
        lrs,
        losses,
    })
}

/// One contiguous span of training steps summarized for unrolling.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    /// First step of the span.
    pub start: usize,
    /// Number of steps `K` in the span.
    pub steps: usize,
    /// Mean learning rate over the span.
    pub mean_lr: f64,
    /// Unweighted mean of the checkpoints stored in the span.
    pub mean_params: ParamVector,
}

impl Segment {
    /// `1 / (η̄ K)`
    pub fn damping(&self) -> f64 {
        1.0 / (self.mean_lr * self.steps as f64)
    }
}

/// Step-weighted mean of the per-segment dampings `1/(η̄K)`.
pub fn implied_damping(segments: &[Segment]) -> f64 {
    let total: usize = segments.iter().map(|s| s.steps).sum();
    segments
        .iter()
        .map(|s| s.damping() * s.steps as f64)
        .sum::<f64>()
        / total as f64
}

/// Splits `[0, T)` into `l` near-equal spans, extra steps going to the
/// earliest spans. A checkpoint belongs to the span containing its step; the
/// final checkpoint (step `T`) belongs to the last span.
pub fn segment_trajectory(traj: &Trajectory, l: usize) -> Result<Vec<Segment>> {
    let t = traj.total_steps();
    if l == 0 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    if l > traj.checkpoints.len() {
        return Err(Error::invalid(format!(
            "{l} segments requested but only {} checkpoints stored",
            traj.checkpoints.len()
        )));
    }
    if l > t {
        return Err(Error::invalid(format!(
            "{l} segments requested for {t} training steps"
        )));
    }
    let base = t / l;
    let extra = t % l;
    let mut segments = Vec::with_capacity(l);
    let mut start = 0;
    for index in 0..l {
        let steps = base + usize::from(index < extra);
        let end = start + steps;
        let last = index + 1 == l;
        let members: Vec<&Checkpoint> = traj
            .checkpoints
            .iter()
            .filter(|c| (c.step >= start && c.step < end) || (last && c.step == t))
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!(
                "segment {index} (steps {start}..{end}) contains no checkpoint; store checkpoints more densely"
            )));
        }
        let mut mean_params = members[0].params.scaled(0.0);
        for c in &members {
            mean_params.axpy(1.0, &c.params);
        }
        mean_params.scale(1.0 / members.len() as f64);
        let mean_lr = traj.lrs[start..end].iter().sum::<f64>() / steps as f64;
        segments.push(Segment {
            index,
            start,
            steps,
            mean_lr,
            mean_params,
        });
        start = end;
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_regression;
    use crate::linalg::{sym_eigh, Cholesky, DenseMatrix};
    use crate::model::{Example, Task};

    fn config(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            schedule: LrSchedule::Constant { lr },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs,
            init_seed: 1,
            batch_seed: 2,
            checkpoint_stride: None,
        }
    }

    fn tiny() -> (MlpSpec, Dataset) {
        let ds = synth_regression(40, 3, 0.1, 7).unwrap();
        (MlpSpec::new(vec![3, 6, 1], Task::Regression).unwrap(), ds)
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let (spec, ds) = tiny();
        let traj = train(&spec, &ds, &config(0.01, 0), None).unwrap();
        assert_eq!(traj.checkpoints.len(), 1);
        assert_eq!(traj.total_steps(), 0);
        assert_eq!(traj.final_params(), &init_params(&spec, 1));
    }

    #[test]
    fn training_is_deterministic() {
        let (spec, ds) = tiny();
        let a = train(&spec, &ds, &config(0.01, 3), None).unwrap();
        let b = train(&spec, &ds, &config(0.01, 3), None).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Trajectory| {
            t.final_params()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        // 40 / 8 = 5 steps per epoch: init + 3 epoch boundaries
        assert_eq!(
            a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
            vec![0, 5, 10, 15]
        );
    }

    #[test]
    fn init_is_within_fan_in_bounds() {
        let spec = MlpSpec::new(vec![16, 4, 1], Task::Regression).unwrap();
        let p = init_params(&spec, 3);
        assert!(p.layer(0).iter().all(|w| w.abs() <= 0.25));
        assert!(p.layer(1).iter().all(|w| w.abs() <= 0.5));
        assert_ne!(p, init_params(&spec, 4));
    }

    /// Data matrix with a bias column, and its targets.
    fn design(ds: &Dataset) -> (DenseMatrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = ds
            .examples
            .iter()
            .map(|e| e.x.iter().copied().chain([1.0]).collect())
            .collect();
        (
            DenseMatrix::from_rows(&rows).unwrap(),
            ds.examples.iter().map(|e| e.t.as_f64()).collect(),
        )
    }

    #[test]
    fn linear_regression_converges_to_ridge_solution() {
        let ds = synth_regression(30, 3, 0.3, 5).unwrap();
        let spec = MlpSpec::new(vec![3, 1], Task::Regression).unwrap();
        let wd = 1e-3;
        let cfg = TrainConfig {
            schedule: LrSchedule::Constant { lr: 0.2 },
            momentum: 0.0,
            weight_decay: wd,
            batch_size: 30,
            epochs: 2000,
            init_seed: 0,
            batch_seed: 0,
            checkpoint_stride: Some(1000),
        };
        let traj = train(&spec, &ds, &cfg, None).unwrap();
        let (x, t) = design(&ds);
        let n = ds.len() as f64;
        let mut gram = x.tr_matmul(&x).unwrap();
        gram.scale(1.0 / n);
        gram.add_diagonal(wd);
        let mut rhs = x.tr_matvec(&t).unwrap();
        rhs.iter_mut().for_each(|v| *v /= n);
        let w = Cholesky::factor(&gram).unwrap().solve(&rhs).unwrap();
        for (a, b) in traj.final_params().as_slice().iter().zip(&w) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn full_batch_loss_is_monotone_below_stability_limit() {
        let ds = synth_regression(25, 4, 0.5, 8).unwrap();
        let spec = MlpSpec::new(vec![4, 1], Task::Regression).unwrap();
        let (x, _) = design(&ds);
        let mut gram = x.tr_matmul(&x).unwrap();
        gram.scale(1.0 / ds.len() as f64);
        let lmax = *sym_eigh(&gram).unwrap().values.last().unwrap();
        let cfg = TrainConfig {
            schedule: LrSchedule::Constant { lr: 0.9 / lmax },
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 25,
            epochs: 200,
            init_seed: 3,
            batch_seed: 3,
            checkpoint_stride: None,
        };
        let traj = train(&spec, &ds, &cfg, None).unwrap();
        for w in traj.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn masked_examples_never_touch_the_gradient() {
        let (spec, mut ds) = tiny();
        ds.examples[3] = Example::regression(vec![f64::NAN; 3], f64::NAN);
        let mut mask = vec![true; ds.len()];
        mask[3] = false;
        let traj = train(&spec, &ds, &config(0.01, 4), Some(&mask)).unwrap();
        assert!(traj.final_params().is_finite());
        assert!(train(&spec, &ds, &config(0.01, 1), None).is_err());
        assert!(matches!(
            train(&spec, &ds, &config(0.01, 1), Some(&[false; 40])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, ds) = tiny();
        let err = train(&spec, &ds, &config(1e3, 50), None).unwrap_err();
        assert!(matches!(err, Error::TrainingDivergence { .. }), "{err}");
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay {
            lr: 1.0,
            factor: 0.5,
            every_epochs: 2,
        };
        assert_eq!(
            [0, 1, 2, 3, 4].map(|e| s.at_epoch(e)),
            [1.0, 1.0, 0.5, 0.5, 0.25]
        );
    }

    fn synthetic_trajectory(t: usize, stride: usize, lr: impl Fn(usize) -> f64) -> Trajectory {
        let layout = MlpSpec::new(vec![1, 1], Task::Regression).unwrap();
        let mut checkpoints: Vec<Checkpoint> = (0..=t)
            .step_by(stride)
            .map(|s| Checkpoint {
                step: s,
                params: layout.params_from_vec(vec![s as f64, -(s as f64)]).unwrap(),
            })
            .collect();
        if checkpoints.last().unwrap().step != t {
            checkpoints.push(Checkpoint {
                step: t,
                params: layout.params_from_vec(vec![t as f64, -(t as f64)]).unwrap(),
            });
        }
        Trajectory {
            checkpoints,
            lrs: (0..t).map(lr).collect(),
            losses: vec![0.0; t],
        }
    }

    #[test]
    fn single_segment_covers_everything() {
        let traj = synthetic_trajectory(10, 5, |_| 0.1);
        let seg = segment_trajectory(&traj, 1).unwrap();
        assert_eq!(seg.len(), 1);
        assert_eq!(seg[0].steps, 10);
        assert!((seg[0].mean_lr - 0.1).abs() < 1e-15);
        assert_eq!(seg[0].mean_params.as_slice(), &[5.0, -5.0]);
    }

    #[test]
    fn uniform_split() {
        let traj = synthetic_trajectory(300, 50, |_| 0.05);
        let seg = segment_trajectory(&traj, 3).unwrap();
        assert_eq!(
            seg.iter().map(|s| s.steps).collect::<Vec<_>>(),
            vec![100, 100, 100]
        );
        assert!(seg.iter().all(|s| s.mean_lr == seg[0].mean_lr));
        // checkpoints {0, 50}, {100, 150}, {200, 250, 300}
        assert_eq!(seg[0].mean_params.as_slice()[0], 25.0);
        assert_eq!(seg[2].mean_params.as_slice()[0], 250.0);
    }

    #[test]
    fn decayed_lr_means_match_recomputation() {
        let lr = |k: usize| 0.1 * 0.5f64.powi((k / 7) as i32);
        let traj = synthetic_trajectory(23, 1, lr);
        let seg = segment_trajectory(&traj, 4).unwrap();
        // 23 = 6 + 6 + 6 + 5 with the remainder up front
        assert_eq!(
            seg.iter().map(|s| s.steps).collect::<Vec<_>>(),
            vec![6, 6, 6, 5]
        );
        assert_eq!(seg.iter().map(|s| s.steps).sum::<usize>(), 23);
        let mut start = 0;
        for s in &seg {
            let mut acc = 0.0;
            for k in start..start + s.steps {
                acc += lr(k);
            }
            assert!((s.mean_lr - acc / s.steps as f64).abs() < 1e-15);
            start += s.steps;
        }
    }

    #[test]
    fn segmentation_errors() {
        let traj = synthetic_trajectory(10, 10, |_| 0.1);
        assert!(segment_trajectory(&traj, 0).is_err());
        assert!(segment_trajectory(&traj, 3).is_err());
        // two checkpoints (0 and 10) but the second span [5, 10) holds only the final one
        assert!(segment_trajectory(&traj, 2).is_ok());
        let sparse = synthetic_trajectory(30, 30, |_| 0.1);
        let with_gap = Trajectory {
            checkpoints: vec![sparse.checkpoints[0].clone(), sparse.checkpoints[1].clone()],
            ..sparse
        };
        assert!(segment_trajectory(&with_gap, 2).is_ok());
        let three = Trajectory {
            checkpoints: vec![
                sparse.checkpoints[0].clone(),
                sparse.checkpoints[1].clone(),
                sparse.checkpoints[1].clone(),
            ],
            ..synthetic_trajectory(30, 30, |_| 0.1)
        };
        // middle span [10, 20) is empty
        assert!(segment_trajectory(&three, 3).is_err());
    }
}
