//! Deterministic encyclopedia-style text for desk-scale runs.
//!
//! Articles have a title, headed sections and sentences drawn from a Zipfian
//! pseudo-word lexicon. Each article leans on one topic's vocabulary and
//! repeats its title, so both local spelling and longer-range context carry
//! signal.

use crate::rng::RngStream;

const ONSETS: &[&str] = &[
    "", "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th",
    "st", "ch", "br", "tr", "gr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ou", "ea", "io", "ai"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "t", "nd", "st", "ng", "m"];
const LEXICON: usize = 3000;
const TOPICS: usize = 16;
const TOPIC_WORDS: usize = 150;

struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cdf = (0..n)
            .map(|r| {
                acc += 1.0 / (r as f64 + 2.7);
                acc
            })
            .collect::<Vec<_>>();
        let total = acc;
        Self {
            cdf: cdf.into_iter().map(|c| c / total).collect(),
        }
    }

    fn sample(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn make_word(rng: &mut RngStream, rank: usize) -> String {
    let syllables = match rank {
        0..=40 => 1,
        41..=600 => 1 + rng.below(2),
        _ => 2 + rng.below(2),
    };
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(VOWELS[rng.below(VOWELS.len())]);
        w.push_str(CODAS[rng.below(CODAS.len())]);
    }
    w
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Exactly `bytes` bytes of ASCII text determined by `seed`.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = RngStream::new(seed, "corpus");
    let mut words: Vec<String> = Vec::with_capacity(LEXICON);
    while words.len() < LEXICON {
        let w = make_word(&mut rng, words.len());
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let topics: Vec<Vec<usize>> = (0..TOPICS)
        .map(|_| (0..TOPIC_WORDS).map(|_| 100 + rng.below(LEXICON - 100)).collect())
        .collect();
    let global = Zipf::new(LEXICON);
    let local = Zipf::new(TOPIC_WORDS);

    let mut out = String::with_capacity(bytes + 4096);
    while out.len() < bytes {
        let topic = &topics[rng.below(TOPICS)];
        let title: Vec<String> = (0..2 + rng.below(2))
            .map(|_| capitalize(&words[topic[local.sample(&mut rng)]]))
            .collect();
        let title = title.join(" ");
        out.push_str(&format!("= {title} =\n\n"));
        for s in 0..3 + rng.below(4) {
            if s > 0 {
                let head = capitalize(&words[topic[local.sample(&mut rng)]]);
                out.push_str(&format!("== {head} ==\n"));
            }
            for _ in 0..1 + rng.below(3) {
                for _ in 0..2 + rng.below(4) {
                    let n = 5 + rng.below(12);
                    let mut sentence = Vec::with_capacity(n);
                    for i in 0..n {
                        let r = rng.uniform();
                        let w = if i == 0 && r < 0.15 {
                            title.clone()
                        } else if r < 0.45 {
                            words[topic[local.sample(&mut rng)]].clone()
                        } else {
                            words[global.sample(&mut rng)].clone()
                        };
                        let r = rng.uniform();
                        let w = if r < 0.04 {
                            format!("[[{w}]]")
                        } else if r < 0.06 {
                            format!("in {}", 1700 + rng.below(320))
                        } else if r < 0.12 && i + 1 < n {
                            format!("{w},")
                        } else {
                            w
                        };
                        sentence.push(w);
                    }
                    out.push_str(&capitalize(&sentence.join(" ")));
                    out.push_str(". ");
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    let mut v = out.into_bytes();
    v.truncate(bytes);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_corpus(10_000, 1);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_corpus(10_000, 1));
        assert_ne!(a, synthetic_corpus(10_000, 2));
        assert!(a.iter().all(|b| b.is_ascii()));
    }
}
