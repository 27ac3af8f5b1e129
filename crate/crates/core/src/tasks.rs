//! Synthetic paired image/text data.
//!
//! A task is a small classification problem: each class has a unit direction
//! in image-input space and a random text-input vector. Image samples sit at
//! `separation · direction` plus unit Gaussian noise. The reference set is an
//! open-ended family of pairs generated from a shared latent "world": a latent
//! concept `z` produces both an image (through a fixed orthonormal embedding
//! plus noise) and a text vector (through a fixed Gaussian map), so a model can
//! learn an alignment that generalizes to unseen reference pairs.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Default reference set size.
pub const DEFAULT_REFERENCE_SIZE: usize = 1000;
/// Default held-out probe size.
pub const DEFAULT_PROBE_SIZE: usize = 2000;
/// Dimension of the latent concept behind reference pairs.
pub const REFERENCE_LATENT_DIM: usize = 8;
/// Signal scale of reference images.
pub const REFERENCE_SEPARATION: f64 = 4.0;
/// Std of the isotropic noise added to reference images.
pub const REFERENCE_NOISE: f64 = 0.3;

const WORLD_SEED: u64 = 0x0005_EED0_FA11_D47A;
const TASK_STREAM: u64 = 0;
const REFERENCE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub images: Matrix,
    pub labels: Vec<usize>,
    /// Text-side input per class, one row per (local) class.
    pub class_prototypes: Matrix,
    /// Original class id of each local class.
    pub class_ids: Vec<usize>,
    pub split: Split,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_prototypes.rows()
    }

    /// Pairs every image with the prototype text of its class.
    pub fn as_pairs(&self) -> ReferenceSet {
        ReferenceSet {
            images: self.images.clone(),
            texts: self.class_prototypes.select_rows(&self.labels),
        }
    }

    /// Writes `index,label,feature_0..feature_{d-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "index,label")?;
        for j in 0..self.images.cols() {
            write!(out, ",feature_{j}")?;
        }
        writeln!(out)?;
        for (i, (row, label)) in self.images.row_iter().zip(&self.labels).enumerate() {
            write!(out, "{i},{label}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Index-aligned image/text pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub images: Matrix,
    pub texts: Matrix,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = linalg::dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn check_counts(pairs: &[(&str, usize)]) -> Result<()> {
    for &(name, v) in pairs {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

/// Generates one classification task and splits it 80/20 into train and test.
///
/// Samples are laid out round-robin over classes, so any prefix of the
/// training set covers the classes evenly.
pub fn make_task(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    d_image_in: usize,
    d_text_in: usize,
    separation: f64,
) -> Result<(TaskDataset, TaskDataset)> {
    check_counts(&[
        ("n_classes", n_classes),
        ("n_per_class", n_per_class),
        ("d_image_in", d_image_in),
        ("d_text_in", d_text_in),
    ])?;
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TASK_STREAM);
    let directions: Vec<Vec<f64>> = (0..n_classes).map(|_| unit_vec(&mut rng, d_image_in)).collect();
    let texts: Vec<Vec<f64>> = (0..n_classes).map(|_| gaussian_vec(&mut rng, d_text_in)).collect();
    let prototypes = Matrix::from_rows(&texts);

    let n_train = if n_per_class == 1 {
        1
    } else {
        ((n_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n_per_class - 1)
    };
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for s in 0..n_per_class {
        for (c, dir) in directions.iter().enumerate() {
            let x: Vec<f64> = dir
                .iter()
                .map(|&u| separation * u + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let dst = if s < n_train { &mut train } else { &mut test };
            dst.0.extend(x);
            dst.1.push(c);
        }
    }
    let name = format!("task{seed}");
    let build = |(data, labels): (Vec<f64>, Vec<usize>), split| -> Result<TaskDataset> {
        Ok(TaskDataset {
            name: name.clone(),
            images: Matrix::from_vec(labels.len(), d_image_in, data)?,
            labels,
            class_prototypes: prototypes.clone(),
            class_ids: (0..n_classes).collect(),
            split,
        })
    };
    Ok((build(train, Split::Train)?, build(test, Split::Test)?))
}

/// Fixed latent-to-input maps shared by every reference set.
struct World {
    /// `d_image_in × k`, orthonormal columns.
    image_map: Matrix,
    /// `d_text_in × k`, standard normal entries.
    text_map: Matrix,
}

impl World {
    fn new(d_image_in: usize, d_text_in: usize) -> Self {
        let k = REFERENCE_LATENT_DIM.min(d_image_in);
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ ((d_image_in as u64) << 32) ^ d_text_in as u64);
        // Gram-Schmidt on Gaussian columns
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        while cols.len() < k {
            let mut v = gaussian_vec(&mut rng, d_image_in);
            for c in &cols {
                let p = linalg::dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            let n = linalg::dot(&v, &v).sqrt();
            if n > 1e-8 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let image_map = Matrix::from_fn(d_image_in, k, |i, j| cols[j][i]);
        let text_map = Matrix::from_fn(d_text_in, k, |_, _| rng.sample(StandardNormal));
        Self { image_map, text_map }
    }
}

/// Draws `size` reference pairs from the shared latent world.
pub fn make_reference_set(seed: u64, size: usize, d_image_in: usize, d_text_in: usize) -> Result<ReferenceSet> {
    check_counts(&[("size", size), ("d_image_in", d_image_in), ("d_text_in", d_text_in)])?;
    let world = World::new(d_image_in, d_text_in);
    let k = world.image_map.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(REFERENCE_STREAM);
    let latents = Matrix::from_rows(&(0..size).map(|_| unit_vec(&mut rng, k)).collect::<Vec<_>>());
    let mut images = linalg::matmul_nt(&latents, &world.image_map)?.scale(REFERENCE_SEPARATION);
    for v in images.data_mut() {
        *v += REFERENCE_NOISE * rng.sample::<f64, _>(StandardNormal);
    }
    let texts = linalg::matmul_nt(&latents, &world.text_map)?.scale((k as f64).sqrt());
    Ok(ReferenceSet { images, texts })
}

/// Partitions a task's classes into `n_splits` contiguous groups, spreading
/// the remainder over the first groups. Labels are renumbered locally;
/// `class_ids` keeps the original ids.
pub fn split_cil(task: &TaskDataset, n_splits: usize) -> Result<Vec<TaskDataset>> {
    let c = task.n_classes();
    if n_splits == 0 || n_splits > c {
        return Err(Error::InvalidArgument(format!(
            "cannot split {c} classes into {n_splits} tasks"
        )));
    }
    let base = c / n_splits;
    let extra = c % n_splits;
    let mut out = Vec::with_capacity(n_splits);
    let mut start = 0;
    for s in 0..n_splits {
        let size = base + usize::from(s < extra);
        let classes = start..start + size;
        let rows: Vec<usize> = (0..task.len()).filter(|&i| classes.contains(&task.labels[i])).collect();
        let local: Vec<usize> = classes.clone().collect();
        out.push(TaskDataset {
            name: if n_splits == 1 {
                task.name.clone()
            } else {
                format!("{}-split{}", task.name, s + 1)
            },
            images: task.images.select_rows(&rows),
            labels: rows.iter().map(|&i| task.labels[i] - start).collect(),
            class_prototypes: task.class_prototypes.select_rows(&local),
            class_ids: local.iter().map(|&l| task.class_ids[l]).collect(),
            split: task.split,
        });
        start += size;
    }
    Ok(out)
}

/// Shape of a task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub n_tasks: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub d_image_in: usize,
    pub d_text_in: usize,
    /// One entry per task, or a single entry applied to all.
    pub separations: Vec<f64>,
    pub base_seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            n_tasks: 6,
            n_classes: 4,
            n_per_class: 250,
            d_image_in: 32,
            d_text_in: 16,
            separations: vec![4.0],
            base_seed: 1000,
        }
    }
}

/// Builds `n_tasks` tasks with seeds `base_seed + 1, base_seed + 2, …`,
/// named `task1`, `task2`, ….
pub fn make_sequence(spec: &SequenceSpec) -> Result<Vec<(TaskDataset, TaskDataset)>> {
    if spec.separations.is_empty() || (spec.separations.len() != 1 && spec.separations.len() != spec.n_tasks) {
        return Err(Error::InvalidArgument(format!(
            "expected 1 or {} separations, got {}",
            spec.n_tasks,
            spec.separations.len()
        )));
    }
    (0..spec.n_tasks)
        .map(|t| {
            let sep = spec.separations[if spec.separations.len() == 1 { 0 } else { t }];
            let (mut train, mut test) = make_task(
                spec.base_seed + t as u64 + 1,
                spec.n_classes,
                spec.n_per_class,
                spec.d_image_in,
                spec.d_text_in,
                sep,
            )?;
            train.name = format!("task{}", t + 1);
            test.name = train.name.clone();
            Ok((train, test))
        })
        .collect()
}

/// Nearest-centroid accuracy on raw inputs: centroids from `train`, scored on
/// `test`. Used to check that tasks are learnable.
pub fn nearest_centroid_accuracy(train: &TaskDataset, test: &TaskDataset) -> f64 {
    let c = train.n_classes();
    let d = train.images.cols();
    let mut centroids = Matrix::zeros(c, d);
    let mut counts = vec![0usize; c];
    for (row, &l) in train.images.row_iter().zip(&train.labels) {
        counts[l] += 1;
        for (a, &x) in centroids.row_mut(l).iter_mut().zip(row) {
            *a += x;
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        for a in centroids.row_mut(l) {
            *a /= n.max(1) as f64;
        }
    }
    let correct = test
        .images
        .row_iter()
        .zip(&test.labels)
        .filter(|(row, &l)| {
            let best = (0..c)
                .map(|k| {
                    let dist: f64 = centroids.row(k).iter().zip(*row).map(|(a, b)| (a - b) * (a - b)).sum();
                    (k, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(l)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_task_is_deterministic() {
        let a = make_task(7, 3, 10, 8, 4, 2.0).unwrap();
        let b = make_task(7, 3, 10, 8, 4, 2.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.images, make_task(8, 3, 10, 8, 4, 2.0).unwrap().0.images);
    }

    #[test]
    fn make_task_layout() {
        let (train, test) = make_task(1, 4, 10, 6, 3, 1.0).unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 8);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        assert_eq!(&train.labels[..8], &[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(train.class_prototypes.shape(), (4, 3));
        assert!(make_task(1, 0, 10, 6, 3, 1.0).is_err());
        assert!(make_task(1, 2, 10, 6, 3, -1.0).is_err());
    }

    #[test]
    fn separable_tasks_are_easy() {
        let (train, test) = make_task(3, 4, 500, 32, 16, 10.0).unwrap();
        assert!(nearest_centroid_accuracy(&train, &test) >= 0.99);
    }

    #[test]
    fn zero_separation_is_chance() {
        let (train, test) = make_task(3, 4, 2500, 32, 16, 0.0).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn reference_set_examples() {
        let r = make_reference_set(5, 1000, 32, 16).unwrap();
        assert_eq!(r.len(), 1000);
        assert_eq!(r.texts.shape(), (1000, 16));
        assert_eq!(make_reference_set(5, 1, 32, 16).unwrap().len(), 1);
        assert!(make_reference_set(5, 0, 32, 16).is_err());
        assert_eq!(r, make_reference_set(5, 1000, 32, 16).unwrap());

        let (train, test) = make_task(5, 4, 50, 32, 16, 4.0).unwrap();
        for row in r.images.row_iter() {
            for other in train.images.row_iter().chain(test.images.row_iter()) {
                assert_ne!(row, other);
            }
        }
    }

    #[test]
    fn cil_examples() {
        let (train, _) = make_task(2, 10, 5, 4, 3, 3.0).unwrap();
        let one = split_cil(&train, 1).unwrap();
        assert_eq!(one, vec![train.clone()]);

        let five = split_cil(&train, 5).unwrap();
        assert!(five.iter().all(|t| t.n_classes() == 2));
        let three = split_cil(&train, 3).unwrap();
        let sizes: Vec<usize> = three.iter().map(TaskDataset::n_classes).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(split_cil(&train, 11).is_err());
        assert!(split_cil(&train, 0).is_err());
    }

    #[test]
    fn cil_partitions_classes() {
        let (train, _) = make_task(4, 7, 6, 5, 3, 3.0).unwrap();
        for n in 1..=7 {
            let parts = split_cil(&train, n).unwrap();
            let mut ids: Vec<usize> = parts.iter().flat_map(|p| p.class_ids.clone()).collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..7).collect::<Vec<_>>());
            let total: usize = parts.iter().map(TaskDataset::len).sum();
            assert_eq!(total, train.len());
            // every original row appears in its class's split, in order
            for p in &parts {
                let expected: Vec<&[f64]> = train
                    .images
                    .row_iter()
                    .zip(&train.labels)
                    .filter(|(_, l)| p.class_ids.contains(l))
                    .map(|(r, _)| r)
                    .collect();
                let got: Vec<&[f64]> = p.images.row_iter().collect();
                assert_eq!(got, expected);
                for &l in &p.labels {
                    assert_eq!(p.class_prototypes.row(l), train.class_prototypes.row(p.class_ids[l]));
                }
            }
        }
    }

    #[test]
    fn default_sequence_is_learnable() {
        let seq = make_sequence(&SequenceSpec::default()).unwrap();
        assert_eq!(seq.len(), 6);
        for (train, test) in &seq {
            assert!(nearest_centroid_accuracy(train, test) >= 0.95, "{}", train.name);
        }
    }

    #[test]
    fn csv_export_layout() {
        let (train, _) = make_task(1, 2, 5, 3, 2, 1.0).unwrap();
        let mut buf = Vec::new();
        train.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "index,label,feature_0,feature_1,feature_2");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 5);
        assert_eq!(first[2].parse::<f64>().unwrap(), train.images.get(0, 0));
    }
}
