//! Byte corpora, train/validation split and batch assembly.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Contiguous split: the first `1 - val_fraction` of the bytes train, the
/// rest validate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    pub fn split(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let cut = bytes.len() - (bytes.len() as f64 * val_fraction).round() as usize;
        Ok(Self {
            train: bytes[..cut].to_vec(),
            val: bytes[cut..].to_vec(),
        })
    }

    /// Offset of the first validation byte in the original buffer.
    pub fn val_offset(&self) -> usize {
        self.train.len()
    }
}

/// `batch` sequences laid out back to back; `targets` is `inputs` shifted by
/// one byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    /// Start offset of every window in the source buffer.
    pub starts: Vec<usize>,
}

/// Endless shuffled batches of non-overlapping windows. Each epoch visits
/// every window once in a fresh order drawn from the stream.
pub struct BatchIter<'a> {
    data: &'a [u8],
    seq: usize,
    batch: usize,
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

pub fn make_batches(
    data: &[u8],
    seq_len: usize,
    batch: usize,
    rng: RngStream,
) -> Result<BatchIter<'_>> {
    if seq_len == 0 || batch == 0 {
        return Err(Error::Config("seq_len and batch must be positive".into()));
    }
    if data.len() < seq_len + 1 {
        return Err(Error::Config(format!(
            "corpus of {} bytes is too short for seq_len {seq_len}",
            data.len()
        )));
    }
    let windows = (data.len() - 1) / seq_len;
    let mut it = BatchIter {
        data,
        seq: seq_len,
        batch,
        rng,
        order: (0..windows).collect(),
        pos: 0,
    };
    it.shuffle();
    Ok(it)
}

impl BatchIter<'_> {
    fn shuffle(&mut self) {
        let n = self.order.len();
        for i in (1..n).rev() {
            let j = self.rng.below(i + 1);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut b = Batch {
            inputs: Vec::with_capacity(self.batch * self.seq),
            targets: Vec::with_capacity(self.batch * self.seq),
            batch: self.batch,
            starts: Vec::with_capacity(self.batch),
        };
        for _ in 0..self.batch {
            if self.pos == self.order.len() {
                self.shuffle();
            }
            let s = self.order[self.pos] * self.seq;
            self.pos += 1;
            b.starts.push(s);
            b.inputs.extend(self.data[s..s + self.seq].iter().map(|&x| x as usize));
            b.targets.extend(self.data[s + 1..s + self.seq + 1].iter().map(|&x| x as usize));
        }
        Some(b)
    }
}

/// Consecutive non-overlapping evaluation windows, at most `max` of them
/// (`0` means all).
pub fn eval_windows(data: &[u8], seq_len: usize, max: usize) -> Result<Vec<Batch>> {
    if data.len() < seq_len + 1 || seq_len == 0 {
        return Err(Error::Config(format!(
            "validation data of {} bytes is too short for seq_len {seq_len}",
            data.len()
        )));
    }
    let mut n = (data.len() - 1) / seq_len;
    if max > 0 {
        n = n.min(max);
    }
    Ok((0..n)
        .map(|i| {
            let s = i * seq_len;
            Batch {
                inputs: data[s..s + seq_len].iter().map(|&x| x as usize).collect(),
                targets: data[s + 1..s + seq_len + 1].iter().map(|&x| x as usize).collect(),
                batch: 1,
                starts: vec![s],
            }
        })
        .collect())
}

/// Joins single windows into batches of up to `size` sequences.
pub fn group_windows(windows: &[Batch], size: usize) -> Vec<Batch> {
    windows
        .chunks(size.max(1))
        .map(|c| Batch {
            inputs: c.iter().flat_map(|w| w.inputs.iter().copied()).collect(),
            targets: c.iter().flat_map(|w| w.targets.iter().copied()).collect(),
            batch: c.iter().map(|w| w.batch).sum(),
            starts: c.iter().flat_map(|w| w.starts.iter().copied()).collect(),
        })
        .collect()
}
