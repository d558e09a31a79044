//! Seeded synthetic Devanagari corpora for tests, benchmarks and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DatasetSplit, LabelSchema, LabeledExample, SplitName, TaskId};

/// The 35 consonants U+0915..=U+0937 split into `classes` disjoint groups.
pub fn consonant_inventories(classes: usize) -> Vec<Vec<char>> {
    let consonants: Vec<char> = ('\u{0915}'..='\u{0937}').collect();
    let per = consonants.len() / classes.max(1);
    (0..classes)
        .map(|c| consonants[c * per..(c + 1) * per].to_vec())
        .collect()
}

const VOWEL_SIGNS: [char; 6] = ['\u{093E}', '\u{093F}', '\u{0940}', '\u{0941}', '\u{0947}', '\u{094B}'];

fn word(rng: &mut ChaCha8Rng, letters: &[char]) -> String {
    let len = rng.gen_range(2..=5);
    let mut w = String::new();
    for _ in 0..len {
        w.push(*letters.choose(rng).expect("non-empty inventory"));
        if rng.gen_bool(0.4) {
            w.push(*VOWEL_SIGNS.choose(rng).unwrap());
        }
    }
    w
}

fn sentence(rng: &mut ChaCha8Rng, letters: &[char]) -> String {
    let words = rng.gen_range(3..=6);
    (0..words).map(|_| word(rng, letters)).collect::<Vec<_>>().join(" ")
}

/// `per_class` examples per label; class `c` uses only consonant group `c`
/// plus shared vowel signs. Examples are shuffled.
pub fn separable_split(task: TaskId, name: SplitName, per_class: usize, seed: u64) -> DatasetSplit {
    let schema = LabelSchema::for_task(task);
    let inventories = consonant_inventories(schema.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(per_class * schema.len());
    for (c, letters) in inventories.iter().enumerate() {
        for _ in 0..per_class {
            examples.push(LabeledExample {
                text: sentence(&mut rng, letters),
                label: Some(c as u32),
            });
        }
    }
    examples.shuffle(&mut rng);
    DatasetSplit::new(name, schema, examples)
}

/// Binary split with `majority` class-0 and `minority` class-1 examples over
/// a shared inventory. A minority text ends with a word of marker consonants
/// with probability 0.8, a majority text with probability 0.01.
pub fn imbalanced_binary(name: SplitName, majority: usize, minority: usize, seed: u64) -> DatasetSplit {
    let schema = LabelSchema::for_task(TaskId::B);
    let groups = consonant_inventories(5);
    let shared: Vec<char> = groups[..4].concat();
    let markers = &groups[4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(majority + minority);
    for (label, count, p_marker) in [(0u32, majority, 0.01), (1, minority, 0.8)] {
        for _ in 0..count {
            let mut text = sentence(&mut rng, &shared);
            if rng.gen_bool(p_marker) {
                text.push(' ');
                text.push_str(&word(&mut rng, markers));
            }
            examples.push(LabeledExample {
                text,
                label: Some(label),
            });
        }
    }
    examples.shuffle(&mut rng);
    DatasetSplit::new(name, schema, examples)
}
