use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl MaskRaster {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }
}

/// Column-major uncompressed run lengths, alternating zero- and one-runs and
/// always starting with a (possibly empty) zero-run.
pub fn rle_encode(mask: &MaskRaster) -> Vec<u64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let bit = mask.bits[y * w + x];
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u64], width: u32, height: u32) -> Result<MaskRaster> {
    let expected = width as u64 * height as u64;
    let got: u64 = counts.iter().sum();
    if got != expected {
        return Err(Error::RleLength { got, expected });
    }
    let (w, h) = (width as usize, height as usize);
    let mut mask = MaskRaster::zeros(width, height);
    let mut pos = 0usize;
    for (i, &count) in counts.iter().enumerate() {
        let bit = i % 2 == 1;
        for k in pos..pos + count as usize {
            if bit {
                // column-major k -> (x, y)
                mask.bits[(k % h) * w + k / h] = true;
            }
        }
        pos += count as usize;
    }
    Ok(mask)
}
