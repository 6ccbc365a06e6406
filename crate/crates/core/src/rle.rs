//! Row-major run-length encoding of binary frames.
//!
//! Runs alternate between 0 and 1 starting with 0, so a frame that begins
//! with foreground starts with a zero-length run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub rows: usize,
    pub cols: usize,
    pub runs: Vec<u32>,
}

impl MaskRle {
    pub fn encode(frame: &[u8], rows: usize, cols: usize) -> Result<Self> {
        if frame.len() != rows * cols {
            return Err(Error::Shape(format!(
                "frame of {} pixels is not {rows}x{cols}",
                frame.len()
            )));
        }
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u32;
        for &b in frame {
            let b = u8::from(b != 0);
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Ok(Self { rows, cols, runs })
    }

    /// Expands the runs, validating that they cover exactly `rows * cols` pixels.
    pub fn decode(&self) -> Result<Vec<u8>> {
        let total: u64 = self.runs.iter().map(|&r| u64::from(r)).sum();
        let expected = (self.rows * self.cols) as u64;
        if total != expected {
            return Err(Error::Format(format!(
                "runs cover {total} pixels, expected {expected}"
            )));
        }
        let mut out = Vec::with_capacity(expected as usize);
        for (i, &r) in self.runs.iter().enumerate() {
            out.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
        }
        Ok(out)
    }
}
