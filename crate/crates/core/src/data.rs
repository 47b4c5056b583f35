//! Toy datasets: a teacher-network classification task and token streams.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Batch, Targets};
use crate::numcore::SeededRng;

/// Inputs `x ~ N(0, I)` labelled by a fixed random two-layer tanh teacher.
/// Class labels are sampled from the teacher's softmax, so the loss has a
/// nonzero floor.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub d_in: usize,
    pub d_out: usize,
    hidden: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
    /// Sharpness of the label distribution.
    pub temperature: f64,
}

impl TeacherTask {
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let hidden = 64;
        let mut rng = SeededRng::new(seed, crate::numcore::label("teacher"));
        let s1 = (1.0 / d_in as f64).sqrt() * 2.0;
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = (0..d_in * hidden).map(|_| s1 * rng.normal()).collect();
        let w2 = (0..hidden * d_out).map(|_| s2 * rng.normal()).collect();
        Self {
            d_in,
            d_out,
            hidden,
            w1,
            w2,
            temperature: 4.0,
        }
    }

    /// Teacher outputs for `rows` inputs.
    pub fn teacher(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d_in;
        let mut out = vec![0.0; rows * self.d_out];
        let mut h = vec![0.0; self.hidden];
        for r in 0..rows {
            let xr = &x[r * self.d_in..(r + 1) * self.d_in];
            for (j, hj) in h.iter_mut().enumerate() {
                let z: f64 = xr
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| xi * self.w1[i * self.hidden + j])
                    .sum();
                *hj = z.tanh();
            }
            for k in 0..self.d_out {
                out[r * self.d_out + k] = h
                    .iter()
                    .enumerate()
                    .map(|(j, hj)| hj * self.w2[j * self.d_out + k])
                    .sum();
            }
        }
        out
    }

    fn inputs(&self, rows: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..rows * self.d_in).map(|_| rng.normal()).collect()
    }

    pub fn classification_batch(&self, rows: usize, rng: &mut SeededRng) -> Batch {
        let x = self.inputs(rows, rng);
        let logits = self.teacher(&x);
        let labels = logits
            .chunks_exact(self.d_out)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row
                    .iter()
                    .map(|l| (self.temperature * (l - max)).exp())
                    .collect();
                let mut u = rng.uniform() * w.iter().sum::<f64>();
                for (k, wk) in w.iter().enumerate() {
                    if u < *wk {
                        return k;
                    }
                    u -= wk;
                }
                self.d_out - 1
            })
            .collect();
        Batch::Dense {
            x,
            rows,
            targets: Targets::Classes(labels),
        }
    }

    pub fn regression_batch(&self, rows: usize, rng: &mut SeededRng) -> Batch {
        let x = self.inputs(rows, rng);
        let y = self.teacher(&x);
        Batch::Dense {
            x,
            rows,
            targets: Targets::Values(y),
        }
    }
}

/// A fixed finite dataset of dense examples, sampled in minibatches.
#[derive(Debug, Clone)]
pub struct DenseDataset {
    pub d_in: usize,
    x: Vec<f64>,
    targets: Targets,
    rows: usize,
}

impl DenseDataset {
    pub fn from_batch(batch: Batch) -> Result<Self> {
        let Batch::Dense { x, rows, targets } = batch else {
            return Err(Error::Shape("dense dataset needs a dense batch".into()));
        };
        Ok(Self {
            d_in: x.len() / rows.max(1),
            x,
            targets,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Rows `idx` as one batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.d_in;
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&self.x[i * d..(i + 1) * d]);
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let k = v.len() / self.rows;
                let mut out = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    out.extend_from_slice(&v[i * k..(i + 1) * k]);
                }
                Targets::Values(out)
            }
        };
        Batch::Dense {
            x,
            rows: idx.len(),
            targets,
        }
    }

    pub fn sample(&self, rows: usize, rng: &mut SeededRng) -> Batch {
        let idx: Vec<usize> = (0..rows).map(|_| rng.below(self.rows)).collect();
        self.select(&idx)
    }

    pub fn all(&self) -> Batch {
        self.select(&(0..self.rows).collect::<Vec<_>>())
    }
}

/// Token stream from an order-2 Markov chain whose transition rows put most
/// mass on a few successors.
pub fn markov_corpus(vocab: usize, len: usize, seed: u64) -> Result<Vec<usize>> {
    if vocab < 2 {
        return Err(Error::Config("markov corpus needs vocab >= 2".into()));
    }
    let mut rng = SeededRng::new(seed, crate::numcore::label("markov"));
    let favoured = 3.min(vocab);
    let table: Vec<Vec<f64>> = (0..vocab * vocab)
        .map(|_| {
            let mut w: Vec<f64> = (0..vocab).map(|_| 0.05 * rng.uniform()).collect();
            for _ in 0..favoured {
                w[rng.below(vocab)] += 1.0 + rng.uniform();
            }
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(len);
    let (mut a, mut b) = (rng.below(vocab), rng.below(vocab));
    for _ in 0..len {
        let row = &table[a * vocab + b];
        let mut u = rng.uniform();
        let mut next = vocab - 1;
        for (k, p) in row.iter().enumerate() {
            if u < *p {
                next = k;
                break;
            }
            u -= p;
        }
        out.push(next);
        a = b;
        b = next;
    }
    Ok(out)
}

/// Character-level encoding of a UTF-8 text file. Returns ids and the sorted
/// alphabet.
pub fn load_text(path: &Path) -> Result<(Vec<usize>, Vec<char>)> {
    let text = std::fs::read_to_string(path)?;
    Ok(encode_chars(&text))
}

pub fn encode_chars(text: &str) -> (Vec<usize>, Vec<char>) {
    let mut alphabet: Vec<char> = text.chars().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let ids = text
        .chars()
        .map(|c| alphabet.binary_search(&c).expect("char is in the alphabet"))
        .collect();
    (ids, alphabet)
}

/// `batch` random windows of `seq_len + 1` consecutive tokens.
pub fn token_batch(
    corpus: &[usize],
    batch: usize,
    seq_len: usize,
    rng: &mut SeededRng,
) -> Result<Batch> {
    if corpus.len() < seq_len + 1 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one window of {}",
            corpus.len(),
            seq_len + 1
        )));
    }
    let span = corpus.len() - seq_len;
    let mut ids = Vec::with_capacity(batch * (seq_len + 1));
    for _ in 0..batch {
        let start = rng.below(span);
        ids.extend_from_slice(&corpus[start..start + seq_len + 1]);
    }
    Ok(Batch::Tokens {
        ids,
        batch,
        seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_is_deterministic_and_in_range() {
        let a = markov_corpus(11, 500, 3).unwrap();
        assert_eq!(a, markov_corpus(11, 500, 3).unwrap());
        assert!(a.iter().all(|&t| t < 11));
        assert_ne!(a, markov_corpus(11, 500, 4).unwrap());
    }

    #[test]
    fn chars_round_trip() {
        let (ids, alpha) = encode_chars("abca b");
        let back: String = ids.iter().map(|&i| alpha[i]).collect();
        assert_eq!(back, "abca b");
        assert_eq!(alpha.len(), 4);
    }

    #[test]
    fn token_windows_are_contiguous() {
        let corpus: Vec<usize> = (0..50).collect();
        let Batch::Tokens {
            ids,
            batch,
            seq_len,
        } = token_batch(&corpus, 3, 4, &mut SeededRng::new(0, 0)).unwrap()
        else {
            unreachable!()
        };
        assert_eq!((batch, seq_len), (3, 4));
        for w in ids.chunks_exact(5) {
            assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        }
        assert!(token_batch(&corpus[..3], 1, 4, &mut SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn teacher_labels_are_valid() {
        let task = TeacherTask::new(6, 4, 0);
        let Batch::Dense {
            rows,
            targets: Targets::Classes(c),
            ..
        } = task.classification_batch(32, &mut SeededRng::new(1, 0))
        else {
            unreachable!()
        };
        assert_eq!(rows, 32);
        assert!(c.iter().all(|&k| k < 4));
    }
}
