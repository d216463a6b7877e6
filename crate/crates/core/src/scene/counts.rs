use serde::{Deserialize, Serialize};

use super::palette::{ObjectType, Palette};
use crate::canvas::{SegmentSlice, TokenCanvas, TokenId};

/// Exact per-band, per-type object tallies over a canvas's populated prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    bands: Vec<SegmentSlice>,
    /// `counts[band][token]`, background included at index 0.
    counts: Vec<Vec<u32>>,
    palette: Palette,
}

impl CountTable {
    pub fn bands(&self) -> &[SegmentSlice] {
        &self.bands
    }

    pub fn get(&self, band: usize, ty: ObjectType) -> u32 {
        self.palette
            .token_of(ty)
            .map_or(0, |t| self.counts[band][t as usize])
    }

    /// Count of `ty` summed over all bands.
    pub fn total(&self, ty: ObjectType) -> u32 {
        (0..self.bands.len()).map(|b| self.get(b, ty)).sum()
    }

    /// Count of `ty` in rows `[0, rows)`, using whole bands only.
    pub fn total_above(&self, ty: ObjectType, rows: usize) -> u32 {
        self.bands
            .iter()
            .filter(|b| b.row_end <= rows)
            .map(|b| self.get(b.band_index, ty))
            .sum()
    }

    /// Non-zero object entries of one band.
    pub fn band_objects(&self, band: usize) -> Vec<(ObjectType, u32)> {
        self.counts[band]
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &n)| n > 0)
            .filter_map(|(t, &n)| self.palette.object_of(t as TokenId).map(|ty| (ty, n)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|b| b.iter().skip(1).all(|&n| n == 0))
    }
}

/// Tally objects per band over the populated prefix of `canvas`.
pub fn scene_counts(canvas: &TokenCanvas, palette: &Palette, bands: &[SegmentSlice]) -> CountTable {
    let w = canvas.spec().w;
    let mut counts = vec![vec![0u32; palette.k()]; bands.len()];
    for (pos, &tok) in canvas.tokens().iter().enumerate() {
        let row = pos / w;
        if let Some(b) = bands.iter().position(|b| b.contains_row(row)) {
            if let Some(slot) = counts[b].get_mut(tok as usize) {
                *slot += 1;
            }
        }
    }
    CountTable { bands: bands.to_vec(), counts, palette: palette.clone() }
}

/// Per-token tallies of a raw sequence (index = token id).
pub fn token_histogram(tokens: &[TokenId], k: usize) -> Vec<u32> {
    let mut out = vec![0u32; k];
    for &t in tokens {
        if let Some(slot) = out.get_mut(t as usize) {
            *slot += 1;
        }
    }
    out
}
