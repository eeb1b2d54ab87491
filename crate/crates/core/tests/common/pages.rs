use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use privinv::scanner::PAGE_SIZE;

/// A page of clean fixture words with privileged ones planted at random
/// aligned offsets. Returns the page and the planted offsets.
pub fn planted_page(rng: &mut StdRng, clean: &[u32], bad: &[u32], max_plants: usize) -> (Vec<u8>, BTreeSet<usize>) {
    let mut words: Vec<u32> = (0..PAGE_SIZE / 4).map(|_| *clean.choose(rng).unwrap()).collect();
    let mut slots: Vec<usize> = (0..words.len()).collect();
    slots.shuffle(rng);
    let n = rng.random_range(0..=max_plants);
    let mut planted = BTreeSet::new();
    for &s in &slots[..n] {
        words[s] = *bad.choose(rng).unwrap();
        planted.insert(s * 4);
    }
    (words.iter().flat_map(|w| w.to_le_bytes()).collect(), planted)
}

