use ndarray::Array2;
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// One stored transition over policy inputs. `a` is in the unit action box.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub h_next: Vec<f64>,
    pub done: bool,
}

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub h: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array2<f64>,
    pub h_next: Array2<f64>,
    /// `1.0` for terminal transitions.
    pub done: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    pub fn from_entries(entries: &[&ReplayEntry]) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::State("empty replay batch".into()))?;
        let (n, hd, ad) = (entries.len(), first.h.len(), first.a.len());
        let mut b = Batch {
            h: Array2::zeros((n, hd)),
            a: Array2::zeros((n, ad)),
            r: Array2::zeros((n, 1)),
            h_next: Array2::zeros((n, hd)),
            done: Array2::zeros((n, 1)),
        };
        for (i, e) in entries.iter().enumerate() {
            if e.h.len() != hd || e.h_next.len() != hd || e.a.len() != ad {
                return Err(shape_err("ragged replay batch"));
            }
            b.h.row_mut(i).assign(&ndarray::ArrayView1::from(&e.h[..]));
            b.h_next
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&e.h_next[..]));
            b.a.row_mut(i).assign(&ndarray::ArrayView1::from(&e.a[..]));
            b.r[[i, 0]] = e.r;
            b.done[[i, 0]] = if e.done { 1.0 } else { 0.0 };
        }
        Ok(b)
    }
}

/// FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
    capacity: usize,
    next: usize,
    input_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, input_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be > 0".into()));
        }
        Ok(Self {
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn push(&mut self, entry: ReplayEntry) -> Result<()> {
        if entry.h.len() != self.input_dim || entry.h_next.len() != self.input_dim {
            return Err(shape_err(format!(
                "replay entry input length {} != {}",
                entry.h.len(),
                self.input_dim
            )));
        }
        if !entry.r.is_finite()
            || entry
                .h
                .iter()
                .chain(&entry.h_next)
                .chain(&entry.a)
                .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("replay entry".into()));
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.next] = entry;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry> {
        let split = if self.entries.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.entries[split..].iter().chain(&self.entries[..split])
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.entries.is_empty() {
            return Err(Error::State("sampling from an empty replay buffer".into()));
        }
        let picks: Vec<&ReplayEntry> = (0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect();
        Batch::from_entries(&picks)
    }
}
