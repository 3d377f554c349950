//! Run-length coding of binary masks: row-major, alternating runs starting
//! with a (possibly empty) run of zeros.

use super::Mask;
use crate::error::{Error, Result};

pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &bit in &mask.data {
        if bit != current {
            counts.push(run);
            run = 0;
            current = bit;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], size: usize) -> Result<Mask> {
    let mut data = Vec::with_capacity(size * size);
    let mut bit = false;
    for &c in counts {
        data.extend(std::iter::repeat_n(bit, c as usize));
        bit = !bit;
    }
    if data.len() != size * size {
        return Err(Error::format("rle mask", format!("decoded {} cells, expected {}", data.len(), size * size)));
    }
    Ok(Mask { size, data })
}
