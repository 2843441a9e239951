//! Packing clips of different durations into fixed-length sequence rows.
//!
//! Rows are filled first-fit-decreasing. Every example keeps its own
//! coordinates (starting at the origin), attends only to itself, and
//! contributes equally to the loss regardless of its length.

use std::fmt;

use crate::dit::{example_tokens, num_tokens, segment_ids, DitExample, Modality, Source, Token};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Scalar, Tensor};

/// Token-count descriptor of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExampleDesc {
    pub text_len: usize,
    /// Latent shape `(T', H', W')`.
    pub grid: [usize; 3],
}

impl ExampleDesc {
    pub fn of<F: Scalar>(ex: &DitExample<F>) -> Self {
        let s = ex.latent.shape();
        Self {
            text_len: ex.text.len(),
            grid: [s[0], s[1], s[2]],
        }
    }

    pub fn vision_tokens(&self, p: usize) -> Result<usize> {
        let [t, h, w] = self.grid;
        num_tokens(&[t, h, w, 1], p)
    }

    pub fn len(&self, p: usize) -> Result<usize> {
        Ok(self.text_len + self.vision_tokens(p)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackRequest {
    pub examples: Vec<ExampleDesc>,
    pub capacity: usize,
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedRow {
    /// Example indices in placement order.
    pub examples: Vec<usize>,
    /// Occupied slots; the rest is padding.
    pub used: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    pub capacity: usize,
    pub patch: usize,
    pub descs: Vec<ExampleDesc>,
    pub rows: Vec<PackedRow>,
}

/// One line of packing statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackStats {
    pub rows: usize,
    pub examples: usize,
    pub waste_frac: f64,
}

impl fmt::Display for PackStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rows {}, examples {}, waste_frac {:.4}",
            self.rows, self.examples, self.waste_frac
        )
    }
}

fn lengths(req: &PackRequest) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(req.examples.len());
    for (index, e) in req.examples.iter().enumerate() {
        let len = e.len(req.patch)?;
        if len > req.capacity || len == 0 {
            return Err(Error::Oversized {
                index,
                len,
                capacity: req.capacity,
            });
        }
        out.push(len);
    }
    Ok(out)
}

fn place(order: impl Iterator<Item = usize>, lens: &[usize], capacity: usize) -> Vec<PackedRow> {
    let mut rows: Vec<PackedRow> = Vec::new();
    for i in order {
        match rows.iter_mut().find(|r| r.used + lens[i] <= capacity) {
            Some(r) => {
                r.examples.push(i);
                r.used += lens[i];
            }
            None => rows.push(PackedRow {
                examples: vec![i],
                used: lens[i],
            }),
        }
    }
    rows
}

/// First-fit-decreasing: examples sorted by length (descending, ties by
/// index), each placed into the first row with room.
pub fn pack(req: &PackRequest) -> Result<PackedBatch> {
    let lens = lengths(req)?;
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
    Ok(PackedBatch {
        capacity: req.capacity,
        patch: req.patch,
        descs: req.examples.clone(),
        rows: place(order.into_iter(), &lens, req.capacity),
    })
}

/// First-fit in arrival order, the baseline FFD is compared against.
pub fn pack_first_fit(req: &PackRequest) -> Result<PackedBatch> {
    let lens = lengths(req)?;
    Ok(PackedBatch {
        capacity: req.capacity,
        patch: req.patch,
        descs: req.examples.clone(),
        rows: place(0..lens.len(), &lens, req.capacity),
    })
}

impl PackedBatch {
    pub fn waste(&self) -> usize {
        self.rows.iter().map(|r| self.capacity - r.used).sum()
    }

    pub fn stats(&self) -> PackStats {
        let total = self.rows.len() * self.capacity;
        PackStats {
            rows: self.rows.len(),
            examples: self.descs.len(),
            waste_frac: if total == 0 { 0.0 } else { self.waste() as f64 / total as f64 },
        }
    }

    /// Slots of row `r`, padded with `None` to the capacity. Token example
    /// ids are global example indices.
    pub fn row_tokens(&self, r: usize) -> Result<Vec<Option<Token>>> {
        let mut out = Vec::with_capacity(self.capacity);
        for &e in &self.rows[r].examples {
            let d = self.descs[e];
            let [t, h, w] = d.grid;
            out.extend(example_tokens(e, d.text_len, &[t, h, w, 1], self.patch)?.into_iter().map(Some));
        }
        out.resize(self.capacity, None);
        Ok(out)
    }

    pub fn all_rows(&self) -> Result<Vec<Vec<Option<Token>>>> {
        (0..self.rows.len()).map(|r| self.row_tokens(r)).collect()
    }
}

/// Additive mask: `0` where both tokens belong to the same example, `-inf`
/// otherwise (padding sees and is seen by nothing).
pub fn build_mask(row: &[Option<Token>]) -> Tensor<f32> {
    AttnMask::from_segments(&segment_ids(row)).to_additive()
}

/// Per-slot rotary coordinates; each example starts at the origin.
pub fn coords_reset(row: &[Option<Token>]) -> Vec<Option<[usize; 3]>> {
    row.iter().map(|t| t.and_then(|t| t.coords())).collect()
}

/// Per-slot loss weights: `1/n_vision` for the vision tokens of an example,
/// zero for text and padding.
pub fn loss_weights<F: Scalar>(row: &[Option<Token>], examples: &[DitExample<F>], p: usize) -> Result<Vec<f64>> {
    row.iter()
        .map(|t| match t {
            Some(Token {
                example,
                source: Source::Vision { .. },
                modality: Modality::Vision,
            }) => {
                let n = num_tokens(examples[*example].latent.shape(), p)?;
                Ok(1.0 / n as f64)
            }
            _ => Ok(0.0),
        })
        .collect()
}
