use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Document;
use crate::error::CorpusError;

/// Document-level train/dev split with `round(fraction * n)` dev documents.
/// Both halves keep the input order.
pub fn split_train_dev(
    docs: &[Document],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>), CorpusError> {
    if docs.len() < 10 {
        return Err(CorpusError::TooFewDocuments(docs.len()));
    }
    let n_dev = (fraction * docs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; docs.len()];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (dev, train): (Vec<_>, Vec<_>) = docs.iter().cloned().zip(is_dev).partition(|(_, d)| *d);
    Ok((
        train.into_iter().map(|(d, _)| d).collect(),
        dev.into_iter().map(|(d, _)| d).collect(),
    ))
}
