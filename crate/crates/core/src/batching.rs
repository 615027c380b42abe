//! Length-bucketed minibatches: every row of a batch shares its shape key,
//! so batches need no padding or masking.

use std::collections::BTreeMap;

use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct BucketSampler {
    buckets: Vec<Vec<usize>>,
    total: usize,
}

impl BucketSampler {
    /// Groups item indices by key; buckets are ordered by key.
    pub fn new<K: Ord>(keys: impl IntoIterator<Item = K>) -> Self {
        let mut map: BTreeMap<K, Vec<usize>> = BTreeMap::new();
        for (i, k) in keys.into_iter().enumerate() {
            map.entry(k).or_default().push(i);
        }
        let buckets: Vec<Vec<usize>> = map.into_values().collect();
        let total = buckets.iter().map(Vec::len).sum();
        Self { buckets, total }
    }

    pub fn buckets(&self) -> &[Vec<usize>] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// One batch: a bucket drawn with probability proportional to its size,
    /// then up to `batch` distinct items from it.
    pub fn sample(&self, batch: usize, rng: &mut RngStream) -> Vec<usize> {
        assert!(self.total > 0, "contract violation: sampling from an empty dataset");
        let weights: Vec<f64> = self.buckets.iter().map(|b| b.len() as f64).collect();
        let bucket = &self.buckets[rng.categorical(&weights)];
        let take = batch.min(bucket.len());
        // partial Fisher-Yates over a copy of the bucket
        let mut items = bucket.clone();
        for i in 0..take {
            let j = i + rng.below((items.len() - i) as u64) as usize;
            items.swap(i, j);
        }
        items.truncate(take);
        items
    }

    /// A shuffled pass over every item, cut into single-bucket batches of at
    /// most `batch` items; batch order is shuffled too.
    pub fn epoch(&self, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        assert!(batch > 0, "contract violation: batch size must be positive");
        let mut out = Vec::new();
        for b in &self.buckets {
            let mut items = b.clone();
            rng.shuffle(&mut items);
            out.extend(items.chunks(batch).map(<[usize]>::to_vec));
        }
        rng.shuffle(&mut out);
        out
    }
}
