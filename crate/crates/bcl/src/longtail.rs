//! Synthetic long-tailed label distributions, embedding initialization, and
//! mini-batch sampling with per-class partitions.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::RawConfiguration;
use crate::error::{Error, Result};

/// Shape of the class-count decay from head to tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// n_k = round(n_max * beta^(-k/(K-1))), the standard long-tailed
    /// construction.
    Exponential,
    /// First half of the classes at n_max, the rest at n_min.
    Step,
}

/// Parameters of a synthetic long-tailed distribution. The imbalance factor
/// beta is N_max / N_min.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub k: usize,
    pub n_max: usize,
    pub beta: f64,
    pub profile: Profile,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidSpec("K must be >= 1".into()));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidSpec("n_max must be >= 1".into()));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "beta must be >= 1 (got {})",
                self.beta
            )));
        }
        if (self.n_max as f64 / self.beta).round() < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "n_min = round(n_max/beta) = round({}/{}) < 1",
                self.n_max, self.beta
            )));
        }
        Ok(())
    }
}

/// Per-class sample counts for a spec; monotone non-increasing, every count
/// >= 1, counts[0] = n_max, counts[K-1] = round(n_max/beta).
pub fn class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let n_max = spec.n_max as f64;
    let n_min = (n_max / spec.beta).round().max(1.0) as usize;
    if spec.k == 1 {
        return Ok(vec![spec.n_max]);
    }
    let counts = match spec.profile {
        Profile::Exponential => (0..spec.k)
            .map(|k| {
                let exponent = -(k as f64) / (spec.k as f64 - 1.0);
                (n_max * spec.beta.powf(exponent)).round().max(1.0) as usize
            })
            .collect::<Vec<_>>(),
        Profile::Step => {
            let head = spec.k.div_ceil(2);
            (0..spec.k)
                .map(|k| if k < head { spec.n_max } else { n_min })
                .collect()
        }
    };
    debug_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    Ok(counts)
}

/// Draws N = sum(counts) embeddings i.i.d. standard normal per coordinate,
/// with labels assigned by count blocks. Deterministic given the rng.
pub fn init_embeddings<R: Rng>(counts: &[usize], h: usize, rng: &mut R) -> Result<RawConfiguration> {
    if h == 0 {
        return Err(Error::InvalidSpec("h must be >= 1".into()));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidSpec("counts sum to 0".into()));
    }
    let w = Array2::from_shape_fn((n, h), |_| rng.sample(StandardNormal));
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(class).take(count));
    }
    RawConfiguration::new(w, labels, counts.len())
}

/// An index set with its per-class partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub per_class: BTreeMap<usize, Vec<usize>>,
    pub classes_present: BTreeSet<usize>,
}

impl Batch {
    /// Partitions `indices` by label.
    pub fn from_indices(indices: Vec<usize>, labels: &[usize]) -> Self {
        let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &indices {
            per_class.entry(labels[i]).or_default().push(i);
        }
        let classes_present = per_class.keys().copied().collect();
        Batch {
            indices,
            per_class,
            classes_present,
        }
    }

    /// The whole dataset as one batch.
    pub fn full(labels: &[usize]) -> Self {
        Self::from_indices((0..labels.len()).collect(), labels)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_size(&self, y: usize) -> usize {
        self.per_class.get(&y).map_or(0, Vec::len)
    }
}

/// Samples `batch_size` instances uniformly without replacement.
pub fn sample_batch<R: Rng>(labels: &[usize], batch_size: usize, rng: &mut R) -> Result<Batch> {
    if batch_size > labels.len() {
        return Err(Error::BatchTooLarge {
            requested: batch_size,
            available: labels.len(),
        });
    }
    let mut picked = rand::seq::index::sample(rng, labels.len(), batch_size).into_vec();
    picked.sort_unstable();
    Ok(Batch::from_indices(picked, labels))
}
