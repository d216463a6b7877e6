//! Latent canvas geometry: raster ordering, row-band partitions and grid
//! composition of partial candidates.
//!
//! Raster order is row-major, left-to-right, top-to-bottom. Only horizontal
//! bands are supported and the band count must divide the canvas height.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the codebook.
pub type TokenId = u16;

/// Tokens in raster order.
pub type TokenSequence = Vec<TokenId>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanvasError {
    #[error("invalid canvas spec: {0}")]
    InvalidSpec(String),
    #[error("canvas height {h} is not divisible into {bands} bands")]
    IndivisibleCanvas { h: usize, bands: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("position {position} is outside a canvas of {total} tokens")]
    OutOfRange { position: usize, total: usize },
    #[error("token id {token} is outside the codebook of size {k}")]
    TokenOutOfRange { token: TokenId, k: usize },
}

/// Size of the latent grid and of the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Pixel edge of one rendered token tile.
    pub tile_px: usize,
}

impl CanvasSpec {
    pub fn new(h: usize, w: usize, k: usize, tile_px: usize) -> Result<Self, CanvasError> {
        let spec = Self { h, w, k, tile_px };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CanvasError> {
        if self.h == 0 || self.w == 0 {
            return Err(CanvasError::InvalidSpec(format!(
                "canvas must be at least 1x1, got {}x{}",
                self.h, self.w
            )));
        }
        if self.k < 2 {
            return Err(CanvasError::InvalidSpec(format!(
                "codebook needs at least 2 entries, got {}",
                self.k
            )));
        }
        if self.k > TokenId::MAX as usize + 1 {
            return Err(CanvasError::InvalidSpec(format!("codebook size {} too large", self.k)));
        }
        Ok(())
    }

    /// Total token count `h * w`.
    pub fn total(&self) -> usize {
        self.h * self.w
    }

    pub fn raster_index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn row_of(&self, position: usize) -> usize {
        position / self.w
    }

    pub fn check_token(&self, token: TokenId) -> Result<(), CanvasError> {
        if (token as usize) < self.k {
            Ok(())
        } else {
            Err(CanvasError::TokenOutOfRange { token, k: self.k })
        }
    }
}

/// One horizontal band of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSlice {
    pub band_index: usize,
    /// First latent row (inclusive).
    pub row_start: usize,
    /// Last latent row (exclusive).
    pub row_end: usize,
    pub token_count: usize,
}

impl SegmentSlice {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn contains_row(&self, row: usize) -> bool {
        (self.row_start..self.row_end).contains(&row)
    }
}

/// Split the canvas into `bands` equal horizontal bands.
pub fn partition_rows(spec: &CanvasSpec, bands: usize) -> Result<Vec<SegmentSlice>, CanvasError> {
    if bands == 0 || !spec.h.is_multiple_of(bands) {
        return Err(CanvasError::IndivisibleCanvas { h: spec.h, bands });
    }
    let rows = spec.h / bands;
    Ok((0..bands)
        .map(|band_index| SegmentSlice {
            band_index,
            row_start: band_index * rows,
            row_end: (band_index + 1) * rows,
            token_count: rows * spec.w,
        })
        .collect())
}

/// Band containing the row of `position`.
pub fn band_of(
    spec: &CanvasSpec,
    position: usize,
    bands: &[SegmentSlice],
) -> Result<usize, CanvasError> {
    if position >= spec.total() {
        return Err(CanvasError::OutOfRange { position, total: spec.total() });
    }
    let row = spec.row_of(position);
    if let Some(first) = bands.first() {
        // Equal-height partitions allow direct lookup.
        let rows = first.rows();
        if rows > 0 && first.row_start == 0 {
            let idx = row / rows;
            if let Some(band) = bands.get(idx) {
                if band.contains_row(row) {
                    return Ok(band.band_index);
                }
            }
        }
    }
    bands
        .iter()
        .find(|b| b.contains_row(row))
        .map(|b| b.band_index)
        .ok_or(CanvasError::OutOfRange { position, total: spec.total() })
}

/// A canvas populated over a raster prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCanvas {
    spec: CanvasSpec,
    tokens: Vec<TokenId>,
}

impl TokenCanvas {
    pub fn empty(spec: CanvasSpec) -> Self {
        Self { spec, tokens: Vec::with_capacity(spec.total()) }
    }

    /// Canvas whose first `prefix.len()` positions are populated.
    pub fn from_prefix(spec: CanvasSpec, prefix: &[TokenId]) -> Result<Self, CanvasError> {
        spec.validate()?;
        if prefix.len() > spec.total() {
            return Err(CanvasError::ShapeMismatch(format!(
                "prefix of {} tokens exceeds canvas of {}",
                prefix.len(),
                spec.total()
            )));
        }
        for &t in prefix {
            spec.check_token(t)?;
        }
        Ok(Self { spec, tokens: prefix.to_vec() })
    }

    pub fn spec(&self) -> &CanvasSpec {
        &self.spec
    }

    /// Populated prefix.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn filled(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_full(&self) -> bool {
        self.tokens.len() == self.spec.total()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<TokenId> {
        self.tokens.get(self.spec.raster_index(row, col)).copied()
    }

    pub fn push(&mut self, token: TokenId) -> Result<(), CanvasError> {
        if self.is_full() {
            return Err(CanvasError::OutOfRange {
                position: self.tokens.len(),
                total: self.spec.total(),
            });
        }
        self.spec.check_token(token)?;
        self.tokens.push(token);
        Ok(())
    }

    pub fn into_tokens(self) -> TokenSequence {
        self.tokens
    }
}

/// Stack `segments` top to bottom into one fully populated canvas.
pub fn compose_grid(segments: &[TokenSequence], spec: &CanvasSpec) -> Result<TokenCanvas, CanvasError> {
    let Some(first) = segments.first() else {
        return Err(CanvasError::ShapeMismatch("no segments to compose".into()));
    };
    let len = first.len();
    if segments.iter().any(|s| s.len() != len) {
        return Err(CanvasError::ShapeMismatch("segments have unequal lengths".into()));
    }
    if len * segments.len() != spec.total() {
        return Err(CanvasError::ShapeMismatch(format!(
            "{} segments of {} tokens do not tile a {}x{} canvas",
            segments.len(),
            len,
            spec.h,
            spec.w
        )));
    }
    if len % spec.w != 0 {
        return Err(CanvasError::ShapeMismatch(format!(
            "segment length {len} is not a whole number of rows of width {}",
            spec.w
        )));
    }
    let tokens: Vec<TokenId> = segments.iter().flatten().copied().collect();
    TokenCanvas::from_prefix(*spec, &tokens)
}

/// Inverse of [`compose_grid`]: cut a populated canvas along `bands`.
pub fn slice_grid(canvas: &TokenCanvas, bands: &[SegmentSlice]) -> Result<Vec<TokenSequence>, CanvasError> {
    let w = canvas.spec().w;
    bands
        .iter()
        .map(|b| {
            let start = b.row_start * w;
            let end = b.row_end * w;
            canvas
                .tokens()
                .get(start..end)
                .map(<[TokenId]>::to_vec)
                .ok_or_else(|| CanvasError::ShapeMismatch(format!("band {} not populated", b.band_index)))
        })
        .collect()
}
