//! Synthetic datasets, fully determined by a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainError;

/// Hidden width of the random teacher network behind `teacher_regression`.
const TEACHER_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    /// `y = A x + b + noise`.
    LinearRegression,
    /// `y = teacher(x) + noise` for a random one-hidden-layer tanh teacher.
    TeacherRegression,
    /// Gaussian class blobs; labels are the index of the generating center.
    BlobClassification,
}

impl TaskId {
    pub fn is_classification(self) -> bool {
        matches!(self, TaskId::BlobClassification)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub task: TaskId,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major `len x dim`.
    Real { values: Vec<f64>, dim: usize },
    Classes { labels: Vec<usize>, classes: usize },
}

/// Row-major inputs with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Generates train and validation splits for `spec`.
///
/// `input_dim` and `output_dim` come from the model's first and last layer
/// widths; for classification `output_dim` is the number of classes.
pub fn generate(
    spec: &DataSpec,
    input_dim: usize,
    output_dim: usize,
    seed: u64,
) -> Result<Splits, TrainError> {
    if spec.n_train == 0 || spec.n_val == 0 {
        return Err(TrainError::Config("n_train and n_val must be positive".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(TrainError::Config("noise_std must be a finite value >= 0".into()));
    }
    if spec.task.is_classification() && output_dim < 2 {
        return Err(TrainError::Config("classification needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let total = spec.n_train + spec.n_val;

    let (inputs, targets) = match spec.task {
        TaskId::LinearRegression => {
            let a = normals(&mut rng, output_dim * input_dim)
                .into_iter()
                .map(|x| x / (input_dim as f64).sqrt())
                .collect::<Vec<_>>();
            let b = normals(&mut rng, output_dim);
            let inputs = normals(&mut rng, total * input_dim);
            let mut values = Vec::with_capacity(total * output_dim);
            for n in 0..total {
                let x = &inputs[n * input_dim..(n + 1) * input_dim];
                for o in 0..output_dim {
                    let row = &a[o * input_dim..(o + 1) * input_dim];
                    let clean = b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    values.push(clean + spec.noise_std * normal(&mut rng));
                }
            }
            (inputs, Targets::Real { values, dim: output_dim })
        }
        TaskId::TeacherRegression => {
            let w1 = normals(&mut rng, TEACHER_HIDDEN * input_dim)
                .into_iter()
                .map(|x| 2.0 * x / (input_dim as f64).sqrt())
                .collect::<Vec<_>>();
            let b1 = normals(&mut rng, TEACHER_HIDDEN).into_iter().map(|x| 0.5 * x).collect::<Vec<_>>();
            let w2 = normals(&mut rng, output_dim * TEACHER_HIDDEN)
                .into_iter()
                .map(|x| x / (TEACHER_HIDDEN as f64).sqrt())
                .collect::<Vec<_>>();
            let inputs = normals(&mut rng, total * input_dim);
            let mut values = Vec::with_capacity(total * output_dim);
            let mut hidden = vec![0.0; TEACHER_HIDDEN];
            for n in 0..total {
                let x = &inputs[n * input_dim..(n + 1) * input_dim];
                for (h, out) in hidden.iter_mut().enumerate() {
                    let row = &w1[h * input_dim..(h + 1) * input_dim];
                    *out = (b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh();
                }
                for o in 0..output_dim {
                    let row = &w2[o * TEACHER_HIDDEN..(o + 1) * TEACHER_HIDDEN];
                    let clean = row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>();
                    values.push(clean + spec.noise_std * normal(&mut rng));
                }
            }
            (inputs, Targets::Real { values, dim: output_dim })
        }
        TaskId::BlobClassification => {
            let centers = normals(&mut rng, output_dim * input_dim)
                .into_iter()
                .map(|x| 1.5 * x)
                .collect::<Vec<_>>();
            let mut inputs = Vec::with_capacity(total * input_dim);
            let mut labels = Vec::with_capacity(total);
            let spread = spec.noise_std.max(1e-3);
            for _ in 0..total {
                let c = rng.random_range(0..output_dim);
                let center = &centers[c * input_dim..(c + 1) * input_dim];
                for &m in center {
                    inputs.push(m + spread * normal(&mut rng));
                }
                labels.push(c);
            }
            (inputs, Targets::Classes { labels, classes: output_dim })
        }
    };

    Ok(split(inputs, targets, input_dim, spec.n_train))
}

fn split(inputs: Vec<f64>, targets: Targets, input_dim: usize, n_train: usize) -> Splits {
    let (train_x, val_x) = inputs.split_at(n_train * input_dim);
    let (train_t, val_t) = match targets {
        Targets::Real { values, dim } => {
            let (a, b) = values.split_at(n_train * dim);
            (
                Targets::Real { values: a.to_vec(), dim },
                Targets::Real { values: b.to_vec(), dim },
            )
        }
        Targets::Classes { labels, classes } => {
            let (a, b) = labels.split_at(n_train);
            (
                Targets::Classes { labels: a.to_vec(), classes },
                Targets::Classes { labels: b.to_vec(), classes },
            )
        }
    };
    Splits {
        train: Dataset { inputs: train_x.to_vec(), input_dim, targets: train_t },
        val: Dataset { inputs: val_x.to_vec(), input_dim, targets: val_t },
    }
}

/// Mini-batch row indices for a 0-based step, sampled with replacement.
///
/// A pure function of `(seed, step)` so a resumed run sees the same batches
/// the original run would have.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n_train: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + step);
    (0..batch_size).map(|_| rng.random_range(0..n_train)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskId) -> DataSpec {
        DataSpec { task, n_train: 64, n_val: 32, noise_std: 0.1 }
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = generate(&spec(TaskId::TeacherRegression), 4, 1, 7).unwrap();
        let b = generate(&spec(TaskId::TeacherRegression), 4, 1, 7).unwrap();
        let c = generate(&spec(TaskId::TeacherRegression), 4, 1, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.val.len(), 32);
    }

    #[test]
    fn classification_labels_in_range() {
        let s = generate(&spec(TaskId::BlobClassification), 3, 4, 1).unwrap();
        let Targets::Classes { labels, classes } = &s.train.targets else { panic!() };
        assert_eq!(*classes, 4);
        assert!(labels.iter().all(|&l| l < 4));
        assert!(generate(&spec(TaskId::BlobClassification), 3, 1, 1).is_err());
    }

    #[test]
    fn batches_depend_on_step_only() {
        assert_eq!(batch_indices(3, 10, 8, 100), batch_indices(3, 10, 8, 100));
        assert_ne!(batch_indices(3, 10, 8, 100), batch_indices(3, 11, 8, 100));
        assert!(batch_indices(3, 10, 256, 5).iter().all(|&i| i < 5));
    }
}
