//! Accuracy grid, continual-learning summaries, modality-gap traces and
//! image-to-text retrieval.

use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::modality_gap;
use crate::tasks::{ReferenceSet, TaskDataset};

/// `(T+1) × T` test accuracies: row 0 is the initial model, row `i` the model
/// after training task `i`; column `j` is task `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub grid: Matrix,
    pub task_names: Vec<String>,
}

impl AccuracyMatrix {
    pub fn new(task_names: Vec<String>) -> Self {
        let t = task_names.len();
        Self {
            grid: Matrix::zeros(t + 1, t),
            task_names,
        }
    }

    pub fn from_grid(grid: Matrix, task_names: Vec<String>) -> Result<Self> {
        let t = task_names.len();
        if grid.shape() != (t + 1, t) {
            return Err(Error::InvalidArgument(format!(
                "accuracy grid must be {}x{t}, got {:?}",
                t + 1,
                grid.shape()
            )));
        }
        if grid.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("accuracies must lie in [0, 1]".into()));
        }
        Ok(Self { grid, task_names })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    /// Accuracy on task `task` (1-based) after training stage `after` (0 = initial).
    pub fn get(&self, after: usize, task: usize) -> f64 {
        self.grid.get(after, task - 1)
    }
}

/// Continual-learning summary of an accuracy grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    /// Absent when fewer than two tasks exist.
    pub transfer: Option<f64>,
    pub last: f64,
    pub average: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Last = mean of the final row. Transfer = for each task `j ≥ 2`, the mean
/// accuracy over the rows before it was trained (zero-shot row included),
/// averaged over `j`. Average = per-task mean over rows `1..=T`, averaged.
pub fn summarize(matrix: &AccuracyMatrix) -> Summary {
    let t = matrix.n_tasks();
    let last = mean((1..=t).map(|j| matrix.get(t, j)));
    let average = mean((1..=t).map(|j| mean((1..=t).map(|i| matrix.get(i, j)))));
    let transfer = (t >= 2).then(|| mean((2..=t).map(|j| mean((0..j).map(|i| matrix.get(i, j))))));
    Summary {
        transfer,
        last,
        average,
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of test images whose most similar class text is their label.
pub fn evaluate_accuracy(model: &DualEncoder, task: &TaskDataset) -> Result<f64> {
    if task.is_empty() {
        return Err(Error::Empty("evaluate_accuracy"));
    }
    let img = model.embed_images(&task.images)?;
    let txt = model.embed_texts(&task.class_prototypes)?;
    accuracy_from_embeddings(&img, &txt, &task.labels)
}

/// Accuracy of argmax-cosine classification given precomputed embeddings.
pub fn accuracy_from_embeddings(image_emb: &Matrix, class_emb: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let sims = linalg::cosine_sim_matrix(image_emb, class_emb)?;
    let correct = sims.row_iter().zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of probe images whose paired text ranks within the top `k` texts
/// by cosine similarity. Ties rank the lower text index first.
pub fn retrieval_recall_at_k(model: &DualEncoder, probe: &ReferenceSet, k: usize) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Empty("retrieval_recall_at_k"));
    }
    let img = model.embed_images(&probe.images)?;
    let txt = model.embed_texts(&probe.texts)?;
    recall_from_embeddings(&img, &txt, k)
}

pub fn recall_from_embeddings(image_emb: &Matrix, text_emb: &Matrix, k: usize) -> Result<f64> {
    let n = image_emb.rows();
    if n == 0 {
        return Err(Error::Empty("recall"));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k must lie in [1, {n}], got {k}")));
    }
    let sims = linalg::cosine_sim_matrix(image_emb, text_emb)?;
    let hits = sims
        .row_iter()
        .enumerate()
        .filter(|(i, row)| {
            let own = row[*i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < *i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// A named set of paired data whose modality gap is tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub pairs: ReferenceSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRecord {
    pub checkpoint: usize,
    pub probe: String,
    pub gap: f64,
}

/// Modality gap per probe at each checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapSeries {
    pub records: Vec<GapRecord>,
}

impl GapSeries {
    pub fn values_for(&self, probe: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.probe == probe)
            .map(|r| r.gap)
            .collect()
    }

    /// Population standard deviation of one probe's gap across checkpoints.
    pub fn std_for(&self, probe: &str) -> Option<f64> {
        let v = self.values_for(probe);
        if v.is_empty() {
            return None;
        }
        let m = mean(v.iter().copied());
        Some(mean(v.iter().map(|x| (x - m) * (x - m))).sqrt())
    }
}

/// Appends the current modality gap of every probe.
pub fn track_gap(model: &DualEncoder, probes: &[Probe], checkpoint: usize, series: &mut GapSeries) -> Result<()> {
    if let Some(last) = series.records.last() {
        if checkpoint < last.checkpoint {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {checkpoint} precedes recorded checkpoint {}",
                last.checkpoint
            )));
        }
    }
    for p in probes {
        let img = model.embed_images(&p.pairs.images)?;
        let txt = model.embed_texts(&p.pairs.texts)?;
        series.records.push(GapRecord {
            checkpoint,
            probe: p.name.clone(),
            gap: modality_gap(&img, &txt)?,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, EncoderLayer, EncoderStack, ModelSpec};
    use crate::tasks::{make_reference_set, make_task, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    fn identity_model(d: usize) -> DualEncoder {
        let layer = || EncoderLayer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity, true).unwrap();
        let stack = || EncoderStack::new(vec![layer()], true).unwrap();
        DualEncoder::new(stack(), stack(), 0.07).unwrap()
    }

    fn aligned_task(labels: Vec<usize>) -> TaskDataset {
        let protos = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        TaskDataset {
            name: "aligned".into(),
            images: protos.select_rows(&labels).scale(2.5),
            labels,
            class_prototypes: protos,
            class_ids: vec![0, 1, 2],
            split: Split::Test,
        }
    }

    #[test]
    fn perfect_and_adversarial_accuracy() {
        let model = identity_model(3);
        let task = aligned_task(vec![0, 1, 2, 2, 1]);
        assert_eq!(evaluate_accuracy(&model, &task).unwrap(), 1.0);
        let mut permuted = task.clone();
        permuted.labels = task.labels.iter().map(|l| (l + 1) % 3).collect();
        assert_eq!(evaluate_accuracy(&model, &permuted).unwrap(), 0.0);
        let mut empty = task;
        empty.labels.clear();
        empty.images = Matrix::zeros(0, 3);
        assert!(evaluate_accuracy(&model, &empty).is_err());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let img = Matrix::from_rows(&[[1.0, 1.0]]);
        let classes = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(accuracy_from_embeddings(&img, &classes, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy_from_embeddings(&img, &classes, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn random_init_matches_embedding_space_centroid_oracle() {
        // Oracle: embed every test image and every class prototype, normalize,
        // and pick the class whose embedding is nearest in Euclidean distance.
        let model = DualEncoder::init(&ModelSpec::default(), 1).unwrap();
        let (_, test) = make_task(11, 4, 100, 32, 16, 10.0).unwrap();
        let acc = evaluate_accuracy(&model, &test).unwrap();
        let img = linalg::l2_normalize_rows(&model.embed_images(&test.images).unwrap(), 1e-12);
        let cls = linalg::l2_normalize_rows(&model.embed_texts(&test.class_prototypes).unwrap(), 1e-12);
        let correct = img
            .row_iter()
            .zip(&test.labels)
            .filter(|(x, &l)| {
                let dists: Vec<f64> = cls
                    .row_iter()
                    .map(|c| c.iter().zip(*x).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let best = (0..dists.len()).fold(0, |b, k| if dists[k] < dists[b] { k } else { b });
                best == l
            })
            .count();
        let oracle = correct as f64 / test.len() as f64;
        assert!((acc - oracle).abs() <= 0.05, "{acc} vs {oracle}");
    }

    #[test]
    fn accuracy_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Matrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let cls = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let a = accuracy_from_embeddings(&img, &cls, &labels).unwrap();
        let b = accuracy_from_embeddings(&img.scale(7.5), &cls.scale(0.01), &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summarize_examples() {
        let names: Vec<String> = (1..=3).map(|i| format!("t{i}")).collect();
        let ones = AccuracyMatrix::from_grid(Matrix::from_fn(4, 3, |_, _| 1.0), names.clone()).unwrap();
        assert_eq!(
            summarize(&ones),
            Summary {
                transfer: Some(1.0),
                last: 1.0,
                average: 1.0
            }
        );
        let zeros = AccuracyMatrix::new(names.clone());
        assert_eq!(summarize(&zeros).last, 0.0);
        assert_eq!(summarize(&zeros).transfer, Some(0.0));

        let grid = Matrix::from_fn(4, 3, |i, j| 0.1 * (i + j + 1) as f64);
        let s = summarize(&AccuracyMatrix::from_grid(grid, names).unwrap());
        assert!(close(s.transfer.unwrap(), 0.325));
        assert!(close(s.last, 0.5));
        assert!(close(s.average, 0.4));

        let single = AccuracyMatrix::new(vec!["only".into()]);
        assert_eq!(summarize(&single).transfer, None);
    }

    #[test]
    fn summarize_last_and_average_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 5;
        let grid = Matrix::from_fn(t + 1, t, |_, _| rng.random_range(0.0..1.0));
        let names: Vec<String> = (0..t).map(|i| i.to_string()).collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted = Matrix::from_fn(t + 1, t, |i, j| grid.get(i, perm[j]));
        let a = summarize(&AccuracyMatrix::from_grid(grid, names.clone()).unwrap());
        let b = summarize(&AccuracyMatrix::from_grid(permuted, names).unwrap());
        assert!((a.last - b.last).abs() < 1e-12);
        assert!((a.average - b.average).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let model = identity_model(3);
        let probe = ReferenceSet {
            images: Matrix::identity(3).scale(2.0),
            texts: Matrix::identity(3),
        };
        assert_eq!(retrieval_recall_at_k(&model, &probe, 1).unwrap(), 1.0);
        assert_eq!(retrieval_recall_at_k(&model, &probe, 3).unwrap(), 1.0);
        assert!(retrieval_recall_at_k(&model, &probe, 4).is_err());
        assert!(retrieval_recall_at_k(&model, &probe, 0).is_err());
    }

    #[test]
    fn recall_of_random_embeddings_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Matrix::from_fn(100, 16, |_, _| rng.random_range(-1.0..1.0));
        let txt = Matrix::from_fn(100, 16, |_, _| rng.random_range(-1.0..1.0));
        let r = recall_from_embeddings(&img, &txt, 5).unwrap();
        assert!((0.0..=0.15).contains(&r), "{r}");
        let mut prev = 0.0;
        for k in 1..=100 {
            let r = recall_from_embeddings(&img, &txt, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn gap_tracking() {
        let model = identity_model(3);
        let same = Probe {
            name: "same".into(),
            pairs: ReferenceSet {
                images: Matrix::identity(3),
                texts: Matrix::identity(3),
            },
        };
        let mut series = GapSeries::default();
        track_gap(&model, std::slice::from_ref(&same), 0, &mut series).unwrap();
        track_gap(&model, std::slice::from_ref(&same), 1, &mut series).unwrap();
        assert_eq!(series.values_for("same"), vec![1.0, 1.0]);
        assert_eq!(series.std_for("same"), Some(0.0));
        assert!(track_gap(&model, &[same], 0, &mut series).is_err());

        let m = DualEncoder::init(&ModelSpec::default(), 4).unwrap();
        let probe = Probe {
            name: "ref".into(),
            pairs: make_reference_set(1, 50, 32, 16).unwrap(),
        };
        let mut a = GapSeries::default();
        track_gap(&m, std::slice::from_ref(&probe), 0, &mut a).unwrap();
        track_gap(&m, &[probe], 0, &mut a).unwrap();
        assert_eq!(a.records[0].gap, a.records[1].gap);
    }
}
