use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DatasetKind, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const SPRITE_SIDE: usize = 64;

/// dSprites-like grid: square (modality 1) and oval (modality 2) sprites
/// rendered at shared `(x, y, scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpritesSpec {
    pub positions: usize,
    pub scales: usize,
    pub min_half_width: f64,
    pub max_half_width: f64,
    /// oval semi-axes are `(h, h / oval_aspect)`
    pub oval_aspect: f64,
}

impl Default for SpritesSpec {
    fn default() -> Self {
        Self {
            positions: 32,
            scales: 6,
            min_half_width: 4.0,
            max_half_width: 14.0,
            oval_aspect: 1.5,
        }
    }
}

impl SpritesSpec {
    pub fn len(&self) -> usize {
        self.positions * self.positions * self.scales
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half_width(&self, scale: usize) -> f64 {
        if self.scales == 1 {
            return self.min_half_width;
        }
        let t = scale as f64 / (self.scales - 1) as f64;
        self.min_half_width + t * (self.max_half_width - self.min_half_width)
    }

    /// Centre of position index `i`; the grid spans exactly the range in
    /// which the largest sprite stays inside the frame.
    pub fn center(&self, i: usize) -> f64 {
        let (lo, hi) = (
            self.max_half_width,
            SPRITE_SIDE as f64 - self.max_half_width,
        );
        if self.positions == 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * i as f64 / (self.positions - 1) as f64
    }

    /// Sample index of factor indices `(x, y, scale)`.
    pub fn index(&self, x: usize, y: usize, scale: usize) -> usize {
        (x * self.positions + y) * self.scales + scale
    }

    /// Rasterises one sprite. Pixel `(r, c)` covers `[c, c+1) × [r, r+1)` and
    /// is set when its centre lies inside the shape.
    pub fn render(&self, oval: bool, x: usize, y: usize, scale: usize, out: &mut [f64]) {
        let (cx, cy, h) = (self.center(x), self.center(y), self.half_width(scale));
        let hy = if oval { h / self.oval_aspect } else { h };
        for r in 0..SPRITE_SIDE {
            let dy = r as f64 + 0.5 - cy;
            for c in 0..SPRITE_SIDE {
                let dx = c as f64 + 0.5 - cx;
                let inside = if oval {
                    (dx / h).powi(2) + (dy / hy).powi(2) <= 1.0
                } else {
                    dx.abs() <= h && dy.abs() <= hy
                };
                out[r * SPRITE_SIDE + c] = if inside { 1.0 } else { 0.0 };
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.positions > 0
            && self.scales > 0
            && self.min_half_width > 0.0
            && self.max_half_width >= self.min_half_width
            && 2.0 * self.max_half_width < SPRITE_SIDE as f64
            && self.oval_aspect >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sprites spec {self:?}")))
        }
    }
}

/// Every grid point once; the same set serves as train and test split.
pub fn sprites_generate(spec: &SpritesSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let (n, px) = (spec.len(), SPRITE_SIDE * SPRITE_SIDE);
    let mut x1 = vec![0.0; n * px];
    let mut x2 = vec![0.0; n * px];
    let mut factors = vec![0.0; n * 3];
    for x in 0..spec.positions {
        for y in 0..spec.positions {
            for s in 0..spec.scales {
                let i = spec.index(x, y, s);
                spec.render(false, x, y, s, &mut x1[i * px..(i + 1) * px]);
                spec.render(true, x, y, s, &mut x2[i * px..(i + 1) * px]);
                factors[i * 3..i * 3 + 3].copy_from_slice(&[x as f64, y as f64, s as f64]);
            }
        }
    }
    let split = Arc::new(Split::new(
        Tensor::new(vec![n, px], x1)?,
        Tensor::new(vec![n, px], x2)?,
        Some(Tensor::new(vec![n, 3], factors)?),
    )?);
    Ok(PairedDataset {
        kind: DatasetKind::Sprites,
        seed: 0,
        train: split.clone(),
        test: split,
    })
}
