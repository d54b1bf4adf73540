use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;

/// One token per byte.
pub fn encode_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const OBJECTS: &[&str] = &[
    "lamp", "book", "key", "coin", "map", "cup", "rope", "seed", "shell", "stone",
];
const COLORS: &[&str] = &["red", "blue", "green", "grey", "gold", "white"];
const PLACES: &[&str] = &["market", "river", "tower", "garden", "harbor", "mill"];

fn made_up_name(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    let mut c = s.chars();
    let first = c.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Deterministic English-like text in short paragraphs. Each paragraph
/// invents a few names and repeats them, so predicting a name requires
/// copying it from earlier context.
pub fn toy_corpus(seed: u64, paragraphs: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.gen_range(0..xs.len())];
    for _ in 0..paragraphs {
        let names: Vec<String> = (0..rng.gen_range(2..=3)).map(|_| made_up_name(&mut rng)).collect();
        let sentences = rng.gen_range(3..=5);
        for _ in 0..sentences {
            let a = &names[rng.gen_range(0..names.len())];
            let b = &names[rng.gen_range(0..names.len())];
            let obj = pick(&mut rng, OBJECTS);
            let s = match rng.gen_range(0..5) {
                0 => format!("{a} gave the {obj} to {b}. "),
                1 => format!("{a} went to the {} with {b}. ", pick(&mut rng, PLACES)),
                2 => format!("the {} {obj} belongs to {a}. ", pick(&mut rng, COLORS)),
                3 => format!("{b} asked {a} about the {obj}. {a} said nothing. "),
                _ => format!("{a} and {b} met at the {}. ", pick(&mut rng, PLACES)),
            };
            out.push_str(&s);
        }
        out.push('\n');
    }
    out
}

/// A list of token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub seqs: Vec<Vec<usize>>,
}

/// Fixed-length windows of a token stream, split into train and held-out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
}

impl Corpus {
    /// Cuts `tokens` into non-overlapping windows of `window` tokens; the last
    /// `held_out_fraction` of windows (at least one) is held out.
    pub fn from_tokens(tokens: &[usize], window: usize, held_out_fraction: f64) -> Result<Self, ModelError> {
        if window < 2 {
            return Err(ModelError::EmptyCorpus);
        }
        let windows: Vec<Vec<usize>> = tokens.chunks_exact(window).map(<[usize]>::to_vec).collect();
        if windows.len() < 2 {
            return Err(ModelError::EmptyCorpus);
        }
        let n_held =
            ((windows.len() as f64 * held_out_fraction.clamp(0.0, 1.0)).round() as usize).clamp(1, windows.len() - 1);
        let split = windows.len() - n_held;
        let mut train = windows;
        let held_out = train.split_off(split);
        Ok(Self { train, held_out })
    }

    pub fn from_text(text: &str, window: usize, held_out_fraction: f64) -> Result<Self, ModelError> {
        Self::from_tokens(&encode_bytes(text), window, held_out_fraction)
    }

    /// The training batch for `step`: epochs are seeded permutations of the
    /// training windows, consumed `batch_size` at a time.
    pub fn batch(&self, step: usize, batch_size: usize, seed: u64) -> Batch {
        let n = self.train.len();
        let batch_size = batch_size.max(1);
        let mut seqs = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            let flat = step * batch_size + k;
            let (epoch, idx) = (flat / n, flat % n);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            seqs.push(self.train[order[idx]].clone());
        }
        Batch { seqs }
    }
}
