use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed sinusoidal encodings of every signed offset in `[−(W−1), W−1]`.
///
/// Channel `2m` holds `sin(d·ω_m)` and `2m+1` holds `cos(d·ω_m)` with
/// `ω_m = 10000^(−2m/C_e)`. The sine channels make `e(d) ≠ e(−d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosTable {
    w_s: usize,
    channels: usize,
    table: Tensor<f64>,
}

impl RelPosTable {
    pub fn new(w_s: usize, channels: usize) -> Result<Self> {
        if w_s == 0 || channels == 0 {
            return Err(Error::Config("relative position table needs W_s, C_e ≥ 1".into()));
        }
        let rows = 2 * w_s - 1;
        let mut data = Vec::with_capacity(rows * channels);
        for r in 0..rows {
            let d = r as f64 - (w_s as f64 - 1.0);
            for c in 0..channels {
                let omega = 10000f64.powf(-((c / 2 * 2) as f64) / channels as f64);
                data.push(if c % 2 == 0 { (d * omega).sin() } else { (d * omega).cos() });
            }
        }
        Ok(Self {
            w_s,
            channels,
            table: Tensor::new(vec![rows, channels], data)?,
        })
    }

    pub fn w_s(&self) -> usize {
        self.w_s
    }

    pub fn len(&self) -> usize {
        2 * self.w_s - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Encoding of the signed offset `d`.
    pub fn offset(&self, d: isize) -> Result<&[f64]> {
        let r = d + self.w_s as isize - 1;
        if r < 0 || r as usize >= self.len() {
            return Err(Error::Index(format!("offset {d} outside ±{}", self.w_s - 1)));
        }
        let r = r as usize;
        Ok(&self.table.data()[r * self.channels..(r + 1) * self.channels])
    }

    /// The whole table as `[2W−1, C_e]`, row `r` holding offset `r − (W−1)`.
    pub fn tensor<F: Scalar>(&self) -> Tensor<F> {
        self.table.cast()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_length_and_asymmetry() {
        let t = RelPosTable::new(16, 8).unwrap();
        assert_eq!(t.len(), 31);
        assert_eq!(t.tensor::<f32>().shape(), &[31, 8]);
        assert_ne!(t.offset(3).unwrap(), t.offset(-3).unwrap());
        assert_eq!(t.offset(0).unwrap()[1], 1.0);
        assert!(t.offset(16).is_err());
    }
}
