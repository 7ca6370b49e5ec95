//! P×K mini-batch construction: `P` identities drawn without replacement,
//! `K` samples from each.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlaError, Result};

/// Batch geometry: `identities` (P) × `per_identity` (K).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub identities: usize,
    pub per_identity: usize,
}

impl Default for BatchSpec {
    /// `P = 16`, `K = 8`.
    fn default() -> Self {
        Self {
            identities: 16,
            per_identity: 8,
        }
    }
}

impl BatchSpec {
    pub fn new(identities: usize, per_identity: usize) -> Result<Self> {
        let spec = Self {
            identities,
            per_identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.per_identity < 2 {
            return Err(PlaError::Config(format!(
                "batch needs P >= 2 and K >= 2, got P={} K={}",
                self.identities, self.per_identity
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.per_identity
    }

    /// Batches making up one epoch: `ceil(dataset_size / (P·K))`.
    pub fn batches_per_epoch(&self, dataset_size: usize) -> usize {
        dataset_size.div_ceil(self.batch_size()).max(1)
    }
}

/// Sample indices grouped by identity, in ascending label order.
fn group_by_identity(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.into_values().collect()
}

fn draw<R: Rng + ?Sized>(
    groups: &[Vec<usize>],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    spec.validate()?;
    if groups.len() < spec.identities {
        return Err(PlaError::InsufficientData {
            needed: spec.identities,
            found: groups.len(),
        });
    }
    let k = spec.per_identity;
    let mut out = Vec::with_capacity(spec.batch_size());
    for g in index::sample(rng, groups.len(), spec.identities) {
        let members = &groups[g];
        if members.len() >= k {
            out.extend(
                index::sample(rng, members.len(), k)
                    .into_iter()
                    .map(|j| members[j]),
            );
        } else {
            out.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

/// One P×K batch of sample indices from `labels`.
///
/// Identities are chosen uniformly without replacement. Within an identity,
/// samples are drawn without replacement when it has at least `K` of them and
/// with replacement otherwise.
pub fn pk_sample<R: Rng + ?Sized>(
    labels: &[usize],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    draw(&group_by_identity(labels), spec, rng)
}

/// Stateful P×K sampler over a fixed label list.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(labels: &[usize], seed: u64) -> Self {
        Self {
            groups: group_by_identity(labels),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sampler driven by an existing generator, e.g. a seeded stream.
    pub fn with_rng(labels: &[usize], rng: ChaCha8Rng) -> Self {
        Self {
            groups: group_by_identity(labels),
            rng,
        }
    }

    pub fn identity_count(&self) -> usize {
        self.groups.len()
    }

    pub fn sample(&mut self, spec: &BatchSpec) -> Result<Vec<usize>> {
        draw(&self.groups, spec, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn balanced(ids: usize, per: usize) -> Vec<usize> {
        (0..ids).flat_map(|i| std::iter::repeat_n(i, per)).collect()
    }

    fn label_counts(labels: &[usize], idx: &[usize]) -> HashMap<usize, usize> {
        let mut m = HashMap::new();
        for &i in idx {
            *m.entry(labels[i]).or_default() += 1;
        }
        m
    }

    #[test]
    fn default_geometry() {
        let labels = balanced(32, 8);
        let mut s = PkSampler::new(&labels, 1);
        let idx = s.sample(&BatchSpec::default()).unwrap();
        assert_eq!(idx.len(), 128);
        let counts = label_counts(&labels, &idx);
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 8));
        // Without replacement inside each identity.
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 128);
    }

    #[test]
    fn exhaustive_identity_selection() {
        let labels = balanced(5, 4);
        let mut s = PkSampler::new(&labels, 3);
        let idx = s.sample(&BatchSpec::new(5, 2).unwrap()).unwrap();
        let counts = label_counts(&labels, &idx);
        assert_eq!(counts.len(), 5);
    }

    #[test]
    fn small_identity_uses_replacement() {
        let mut labels = balanced(3, 10);
        labels.extend([7, 7, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BatchSpec::new(4, 8).unwrap();
        let idx = pk_sample(&labels, &spec, &mut rng).unwrap();
        let small: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == 7).collect();
        assert_eq!(small.len(), 8);
        assert!(small.iter().all(|&i| (30..33).contains(&i)));
    }

    #[test]
    fn too_few_identities() {
        let labels = balanced(3, 4);
        let mut s = PkSampler::new(&labels, 0);
        let err = s.sample(&BatchSpec::new(4, 2).unwrap()).unwrap_err();
        assert!(matches!(
            err,
            PlaError::InsufficientData {
                needed: 4,
                found: 3
            }
        ));
    }

    #[test]
    fn spec_validation_and_epochs() {
        assert!(BatchSpec::new(1, 4).is_err());
        assert!(BatchSpec::new(4, 1).is_err());
        let spec = BatchSpec::default();
        assert_eq!(spec.batches_per_epoch(128), 1);
        assert_eq!(spec.batches_per_epoch(129), 2);
        assert_eq!(spec.batches_per_epoch(1024), 8);
    }

    #[test]
    fn same_seed_same_sequence() {
        let labels = balanced(20, 6);
        let spec = BatchSpec::new(8, 4).unwrap();
        let mut a = PkSampler::new(&labels, 42);
        let mut b = PkSampler::new(&labels, 42);
        for _ in 0..20 {
            assert_eq!(a.sample(&spec).unwrap(), b.sample(&spec).unwrap());
        }
    }

    #[test]
    fn identity_frequencies_are_uniform() {
        let ids = 32;
        let labels = balanced(ids, 8);
        let spec = BatchSpec::new(16, 2).unwrap();
        let mut s = PkSampler::new(&labels, 2024);
        let batches = 10_000;
        let mut freq = vec![0usize; ids];
        for _ in 0..batches {
            let idx = s.sample(&spec).unwrap();
            for chunk in idx.chunks(spec.per_identity) {
                freq[labels[chunk[0]]] += 1;
            }
        }
        let q = spec.identities as f64 / ids as f64;
        let mean = batches as f64 * q;
        let sd = (batches as f64 * q * (1.0 - q)).sqrt();
        for (id, &f) in freq.iter().enumerate() {
            assert!(
                (f as f64 - mean).abs() <= 3.0 * sd,
                "identity {id}: {f} vs {mean}±{sd}"
            );
        }
    }

    proptest! {
        #[test]
        fn every_batch_is_p_by_k(
            sizes in proptest::collection::vec(1usize..12, 2..20),
            p in 2usize..6,
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(id, &n)| std::iter::repeat_n(id * 3 + 1, n))
                .collect();
            let spec = BatchSpec::new(p, k).unwrap();
            let mut s = PkSampler::new(&labels, seed);
            match s.sample(&spec) {
                Ok(idx) => {
                    prop_assert_eq!(idx.len(), p * k);
                    let counts = label_counts(&labels, &idx);
                    prop_assert_eq!(counts.len(), p);
                    prop_assert!(counts.values().all(|&c| c == k));
                }
                Err(PlaError::InsufficientData { .. }) => prop_assert!(sizes.len() < p),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
