//! Order-preserving fan-out over scoped threads.

use uanet_core::encoder::{BayesEncoder, DraftPrediction, EncodedSentence};
use uanet_core::train::DraftRunner;

/// Maps `f` over `items` on up to `workers` threads. Output order matches
/// input order, so results do not depend on the worker count.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ThreadedRunner {
    pub workers: usize,
}

impl DraftRunner for ThreadedRunner {
    fn drafts(
        &self,
        encoder: &BayesEncoder,
        inputs: &[&EncodedSentence],
        seeds: &[u64],
        samples: usize,
    ) -> uanet_core::Result<Vec<DraftPrediction>> {
        par_map(self.workers, inputs, |i, x| encoder.mc_forward(x, samples, seeds[i]))
            .into_iter()
            .collect()
    }
}
