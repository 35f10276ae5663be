use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Corpus, Split};

/// Endless stream of language-balanced batches of utterance indices.
///
/// Each language keeps its own shuffled queue and contributes
/// `batch_size / num_languages` items per batch. A language whose queue
/// runs dry is reshuffled and refilled immediately, so smaller languages
/// are oversampled relative to larger ones.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    per_language: usize,
    pools: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `pools[l]` holds the item indices of language `l`.
    pub fn new(pools: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Self> {
        let n = pools.len();
        if n == 0 {
            return Err(Error::Config("no languages to sample from".into()));
        }
        if batch_size == 0 || !batch_size.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "batch size {batch_size} is not a positive multiple of the language count {n}"
            )));
        }
        if let Some(l) = pools.iter().position(|p| p.is_empty()) {
            return Err(Error::EmptySplit(format!("language {l} has no training utterances")));
        }
        Ok(BatchSampler {
            per_language: batch_size / n,
            queues: vec![Vec::new(); n],
            pools,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Sampler over the training split of `corpus`, grouped by language.
    pub fn for_corpus(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Self> {
        let mut pools = vec![Vec::new(); corpus.num_languages()];
        for i in corpus.split_indices(Split::Train) {
            pools[corpus.utterances[i].sequence.language].push(i);
        }
        Self::new(pools, batch_size, seed)
    }

    pub fn per_language(&self) -> usize {
        self.per_language
    }

    /// Next batch, ordered by language.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.per_language * self.pools.len());
        for l in 0..self.pools.len() {
            for _ in 0..self.per_language {
                if self.queues[l].is_empty() {
                    let mut q = self.pools[l].clone();
                    q.shuffle(&mut self.rng);
                    q.reverse();
                    self.queues[l] = q;
                }
                out.push(self.queues[l].pop().expect("refilled above"));
            }
        }
        out
    }
}

/// The first `count` batches of a [`BatchSampler`] over the training split.
pub fn make_batches(corpus: &Corpus, batch_size: usize, seed: u64, count: usize) -> Result<Vec<Vec<usize>>> {
    let mut s = BatchSampler::for_corpus(corpus, batch_size, seed)?;
    Ok((0..count).map(|_| s.next_batch()).collect())
}
