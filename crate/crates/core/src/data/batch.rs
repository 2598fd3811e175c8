use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// Record indices into the source dataset.
    pub indices: Vec<usize>,
    /// `[B, C, N₀]`
    pub signals: Tensor<T>,
    /// `[B, K]` of 0/1.
    pub labels: Tensor<T>,
}

impl<T: Element> Batch<T> {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Self {
        let (c, n, k) = (ds.leads, ds.len, ds.classes);
        let mut sig = Vec::with_capacity(indices.len() * c * n);
        let mut lab = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            let r = &ds.records[i];
            sig.extend(r.signal.data().iter().map(|&x| T::of(x as f64)));
            lab.extend(r.labels.iter().map(|&y| T::of(y as f64)));
        }
        Batch {
            indices: indices.to_vec(),
            signals: Tensor::new(vec![indices.len(), c, n], sig).expect("record shapes checked"),
            labels: Tensor::new(vec![indices.len(), k], lab).expect("label widths checked"),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Consecutive batches of `batch_size` records, the last one possibly
/// shorter. With a seed the record order is shuffled first.
pub fn batches<T: Element>(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> impl Iterator<Item = Batch<T>> + '_ {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| Batch::gather(ds, &idx))
}
