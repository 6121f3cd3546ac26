//! Synthetic sequence-to-sequence tasks over a letter vocabulary.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Example, PAD, SEP};
use crate::numerics::Rng;

/// Token of letter `a`; letters occupy `LETTER_BASE..LETTER_BASE + 26`.
pub const LETTER_BASE: u32 = 2;
/// Replacement token used by the vowel-mask task.
pub const MASK: u32 = 28;
pub const VOCAB_USED: u32 = 29;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Copy,
    Reverse,
    Caesar,
    VowelMask,
    Duplicate,
    Sort,
    ModularAdd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub family: Family,
    /// Shift for `caesar`, step for `modular-add`.
    #[serde(default)]
    pub param: u32,
    /// Letters inputs are drawn from.
    pub alphabet: String,
    /// Letter prepended to every input; it is not part of the transformed text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<char>,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn letter(c: char) -> Result<u32> {
    if c.is_ascii_lowercase() {
        Ok(LETTER_BASE + (c as u32 - 'a' as u32))
    } else {
        Err(Error::Invalid(format!("`{c}` is not a lowercase letter")))
    }
}

pub fn encode(s: &str) -> Result<Vec<u32>> {
    s.chars().map(|c| if c == '*' { Ok(MASK) } else { letter(c) }).collect()
}

pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            PAD => '_',
            SEP => '|',
            MASK => '*',
            t if (LETTER_BASE..LETTER_BASE + 26).contains(&t) => (b'a' + (t - LETTER_BASE) as u8) as char,
            _ => '?',
        })
        .collect()
}

fn is_vowel(t: u32) -> bool {
    matches!(t.checked_sub(LETTER_BASE), Some(0 | 4 | 8 | 14 | 20))
}

fn shift(t: u32, by: u32) -> u32 {
    LETTER_BASE + (t - LETTER_BASE + by) % 26
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config(format!("task `{}` has an empty alphabet", self.name)));
        }
        encode(&self.alphabet).map_err(|e| Error::Config(format!("task `{}`: {e}", self.name)))?;
        if let Some(m) = self.marker {
            letter(m).map_err(|e| Error::Config(format!("task `{}` marker: {e}", self.name)))?;
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("task `{}` has bad length range", self.name)));
        }
        let distinct: f64 = (self.min_len..=self.max_len)
            .map(|l| (self.alphabet.len() as f64).powi(l as i32))
            .sum();
        if distinct < (self.train + self.val + self.test) as f64 {
            return Err(Error::Config(format!(
                "task `{}` cannot produce {} distinct inputs",
                self.name,
                self.train + self.val + self.test
            )));
        }
        Ok(())
    }

    /// Longest token sequence fed to the model (input, separator, target minus one).
    pub fn max_sequence(&self) -> usize {
        let target = match self.family {
            Family::Duplicate => 2 * self.max_len,
            _ => self.max_len,
        };
        self.max_len + target + usize::from(self.marker.is_some())
    }

    /// The task's output for a tokenized input.
    pub fn apply(&self, input: &[u32]) -> Vec<u32> {
        match self.family {
            Family::Copy => input.to_vec(),
            Family::Reverse => input.iter().rev().copied().collect(),
            Family::Caesar => input.iter().map(|&t| shift(t, self.param)).collect(),
            Family::VowelMask => input.iter().map(|&t| if is_vowel(t) { MASK } else { t }).collect(),
            Family::Duplicate => input.iter().flat_map(|&t| [t, t]).collect(),
            Family::Sort => {
                let mut v = input.to_vec();
                v.sort_unstable();
                v
            }
            Family::ModularAdd => input
                .iter()
                .enumerate()
                .map(|(i, &t)| shift(t, (self.param * i as u32) % 26))
                .collect(),
        }
    }

    /// Deterministic train/val/test splits with pairwise-distinct inputs.
    pub fn generate(&self, seed: u64) -> Result<TaskDataset> {
        self.validate()?;
        let letters = encode(&self.alphabet)?;
        let marker = self.marker.map(letter).transpose()?;
        let mut rng = Rng::derive(seed, &format!("task/{}", self.name));
        let total = self.train + self.val + self.test;
        let mut seen = HashSet::with_capacity(total);
        let mut inputs = Vec::with_capacity(total);
        while inputs.len() < total {
            let len = rng.range_inclusive(self.min_len, self.max_len);
            let x: Vec<u32> = (0..len).map(|_| letters[rng.below(letters.len())]).collect();
            if seen.insert(x.clone()) {
                inputs.push(x);
            }
        }
        let mut examples = inputs.into_iter().map(|x| {
            let y = self.apply(&x);
            match marker {
                Some(m) => Example::new(std::iter::once(m).chain(x).collect(), y),
                None => Example::new(x, y),
            }
        });
        let train: Vec<Example> = examples.by_ref().take(self.train).collect();
        let val: Vec<Example> = examples.by_ref().take(self.val).collect();
        let test: Vec<Example> = examples.collect();
        Ok(TaskDataset {
            spec: self.clone(),
            train,
            val,
            test,
        })
    }
}

/// The eight-task reference suite. All tasks share one input alphabet and are
/// told apart by a leading marker letter.
pub fn reference_suite() -> Vec<TaskSpec> {
    let defs: [(&str, Family, u32, char); 8] = [
        ("copy", Family::Copy, 0, 's'),
        ("reverse", Family::Reverse, 0, 't'),
        ("caesar1", Family::Caesar, 1, 'u'),
        ("caesar3", Family::Caesar, 3, 'v'),
        ("vowel_mask", Family::VowelMask, 0, 'w'),
        ("duplicate", Family::Duplicate, 0, 'x'),
        ("sort", Family::Sort, 0, 'y'),
        ("modadd2", Family::ModularAdd, 2, 'z'),
    ];
    defs.iter()
        .map(|&(name, family, param, marker)| TaskSpec {
            name: name.to_string(),
            family,
            param,
            alphabet: "abcdefgh".to_string(),
            marker: Some(marker),
            min_len: 4,
            max_len: 10,
            train: 2000,
            val: 200,
            test: 200,
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TextExample {
    input: String,
    target: String,
}

#[derive(Serialize, Deserialize)]
struct TextDataset {
    spec: TaskSpec,
    train: Vec<TextExample>,
    val: Vec<TextExample>,
    test: Vec<TextExample>,
}

fn to_text(v: &[Example]) -> Vec<TextExample> {
    v.iter()
        .map(|e| TextExample {
            input: decode(&e.input),
            target: decode(&e.target),
        })
        .collect()
}

fn from_text(v: &[TextExample]) -> Result<Vec<Example>> {
    v.iter()
        .map(|e| Ok(Example::new(encode(&e.input)?, encode(&e.target)?)))
        .collect()
}

impl TaskDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let t = TextDataset {
            spec: self.spec.clone(),
            train: to_text(&self.train),
            val: to_text(&self.val),
            test: to_text(&self.test),
        };
        std::fs::write(path, serde_json::to_string(&t)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let t: TextDataset = serde_json::from_str(&text)?;
        Ok(Self {
            spec: t.spec,
            train: from_text(&t.train)?,
            val: from_text(&t.val)?,
            test: from_text(&t.test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, param: u32) -> TaskSpec {
        TaskSpec {
            name: "t".into(),
            family,
            param,
            alphabet: "abcz".into(),
            marker: None,
            min_len: 3,
            max_len: 5,
            train: 50,
            val: 10,
            test: 10,
        }
    }

    fn run(family: Family, param: u32, x: &str) -> String {
        decode(&spec(family, param).apply(&encode(x).unwrap()))
    }

    #[test]
    fn family_examples() {
        assert_eq!(run(Family::Copy, 0, "abc"), "abc");
        assert_eq!(run(Family::Reverse, 0, "abc"), "cba");
        assert_eq!(run(Family::Caesar, 1, "abz"), "bca");
        assert_eq!(run(Family::VowelMask, 0, "mnoa"), "mn**");
        assert_eq!(run(Family::Duplicate, 0, "ab"), "aabb");
        assert_eq!(run(Family::Sort, 0, "cab"), "abc");
        assert_eq!(run(Family::ModularAdd, 2, "aaaz"), "acef");
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let s = spec(Family::Reverse, 0);
        let d = s.generate(7).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (50, 10, 10));
        let mut all: HashSet<Vec<u32>> = HashSet::new();
        for e in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!(all.insert(e.input.clone()));
            assert!((3..=5).contains(&e.input.len()));
        }
        assert_eq!(s.generate(7).unwrap(), d);
        assert_ne!(s.generate(8).unwrap().train, d.train);
    }

    #[test]
    fn impossible_sizes_rejected() {
        let mut s = spec(Family::Copy, 0);
        s.alphabet = "a".into();
        assert!(s.generate(0).is_err());
    }

    #[test]
    fn reference_suite_fits_model() {
        for s in reference_suite() {
            s.validate().unwrap();
            assert!(s.max_sequence() <= 32);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let d = spec(Family::VowelMask, 0).generate(1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        d.save(&p).unwrap();
        assert_eq!(TaskDataset::load(&p).unwrap(), d);
    }
}
