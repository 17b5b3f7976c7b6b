use rand::seq::index;
use rand::Rng;

use crate::data::dataset::{Dataset, SequenceRecord};
use crate::error::{GaitError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `p` subjects x `k` sequences per subject, `t` frames per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub t: usize,
}

impl BatchSpec {
    pub fn new(p: usize, k: usize, t: usize) -> Result<Self> {
        if p < 2 || k < 2 || t < 1 {
            return Err(GaitError::Config(format!(
                "batch needs P >= 2, K >= 2, T >= 1 (got P={p}, K={k}, T={t})"
            )));
        }
        Ok(BatchSpec { p, k, t })
    }

    pub fn size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    /// `[P*K, 1, T, H, W]`, pixels scaled to `[0, 1]`.
    pub input: Tensor<F>,
    /// Class label (position of the subject in `Dataset::subjects`) per row.
    pub labels: Vec<usize>,
}

fn push_frames<F: Real>(out: &mut Vec<F>, rec: &SequenceRecord, start: usize, t: usize) {
    let n = rec.frames.len();
    let scale = F::of(1.0 / 255.0);
    for i in 0..t {
        out.extend(rec.frames[(start + i) % n].pixels.iter().map(|&v| F::of(v as f64) * scale));
    }
}

/// Composes one training batch. Subjects are drawn without replacement;
/// sequences without replacement unless a subject has fewer than `K`. Each
/// sequence contributes a random contiguous `T`-frame window, read
/// cyclically when the sequence is shorter than `T`.
pub fn sample_batch<F: Real, R: Rng + ?Sized>(ds: &Dataset, spec: &BatchSpec, rng: &mut R) -> Result<Batch<F>> {
    let subjects = ds.subjects();
    if subjects.len() < spec.p {
        return Err(GaitError::Sampling(format!(
            "need {} subjects, dataset has {}",
            spec.p,
            subjects.len()
        )));
    }
    let (h, w) = ds
        .frame_extents()
        .ok_or_else(|| GaitError::Sampling("records differ in frame size".into()))?;
    let mut chosen = index::sample(rng, subjects.len(), spec.p).into_vec();
    chosen.sort_unstable();

    let mut data = Vec::with_capacity(spec.size() * spec.t * h * w);
    let mut labels = Vec::with_capacity(spec.size());
    for &label in &chosen {
        let recs = ds.records_of(subjects[label]);
        let picks: Vec<usize> = if recs.len() >= spec.k {
            index::sample(rng, recs.len(), spec.k).into_vec()
        } else {
            (0..spec.k).map(|_| rng.gen_range(0..recs.len())).collect()
        };
        for i in picks {
            let rec = &ds.records()[recs[i]];
            let n = rec.frames.len();
            let start = if n >= spec.t {
                rng.gen_range(0..=n - spec.t)
            } else {
                rng.gen_range(0..n)
            };
            push_frames(&mut data, rec, start, spec.t);
            labels.push(label);
        }
    }
    Ok(Batch {
        input: Tensor::from_vec(&[spec.size(), 1, spec.t, h, w], data)?,
        labels,
    })
}

/// Whole sequence as a `[1, 1, T, H, W]` tensor in `[0, 1]`.
pub fn sequence_tensor<F: Real>(rec: &SequenceRecord) -> Tensor<F> {
    let (h, w) = rec.extents();
    let t = rec.frames.len();
    let mut data = Vec::with_capacity(t * h * w);
    push_frames(&mut data, rec, 0, t);
    Tensor::from_vec(&[1, 1, t, h, w], data).expect("frames share extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Condition;
    use crate::data::frame::FrameImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(v: u8) -> FrameImage {
        FrameImage::new(2, 2, vec![v; 4]).unwrap()
    }

    fn rec(s: &str, frames: &[u8]) -> SequenceRecord {
        SequenceRecord::new(s, Condition::Nm, 1, 0, frames.iter().map(|&v| flat(v)).collect()).unwrap()
    }

    #[test]
    fn shape_and_labels() {
        let ds = Dataset::new(vec![rec("a", &[1, 2, 3, 4, 5]), rec("b", &[6, 7, 8, 9])]);
        let spec = BatchSpec::new(2, 2, 4).unwrap();
        let b: Batch<f64> = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.input.shape(), &[4, 1, 4, 2, 2]);
        assert_eq!(b.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn short_sequence_is_read_cyclically() {
        let ds = Dataset::new(vec![rec("a", &[10, 20]), rec("b", &[10, 20])]);
        let spec = BatchSpec::new(2, 2, 4).unwrap();
        for seed in 0..10 {
            let b: Batch<f64> = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for row in b.input.data().chunks_exact(16) {
                let frames: Vec<f64> = row.chunks_exact(4).map(|f| f[0] * 255.0).collect();
                let ok = [[10.0, 20.0, 10.0, 20.0], [20.0, 10.0, 20.0, 10.0]]
                    .iter()
                    .any(|p| frames.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-9));
                assert!(ok, "{frames:?}");
            }
        }
    }

    #[test]
    fn seeded_batches_repeat() {
        let ds = Dataset::new(vec![rec("a", &[1, 2, 3]), rec("b", &[4, 5]), rec("c", &[6])]);
        let spec = BatchSpec::new(2, 3, 2).unwrap();
        let x: Batch<f32> = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let y: Batch<f32> = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn too_few_subjects() {
        let ds = Dataset::new(vec![rec("a", &[1])]);
        let spec = BatchSpec::new(2, 2, 1).unwrap();
        assert!(matches!(
            sample_batch::<f64, _>(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(GaitError::Sampling(_))
        ));
        assert!(BatchSpec::new(1, 2, 1).is_err());
    }
}
