//! Seeded few-shot splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles with `seed` and takes `n` training items, one validation item
/// when `n > 1`, and leaves the rest for testing.
pub fn sample_split<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Split<T>> {
    let val = usize::from(n > 1);
    if n == 0 || items.len() < n + val {
        return Err(Error::Split(format!(
            "cannot draw {n} training and {val} validation items from {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok(Split {
        train: pick(&order[..n]),
        validation: pick(&order[n..n + val]),
        test: pick(&order[n + val..]),
    })
}
