/// Sentinel stored at padded positions. The mask is authoritative.
pub const PAD_VALUE: i64 = -1;

/// A fixed-length fiducial index sequence with its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiducialFeature {
    pub values: Vec<i64>,
    pub mask: Vec<bool>,
    pub pad_value: i64,
}

impl FiducialFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Copy with a different sentinel at masked-off positions.
    pub fn with_pad_value(&self, pad_value: i64) -> Self {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(v, m)| if *m { *v } else { pad_value })
            .collect();
        Self {
            values,
            mask: self.mask.clone(),
            pad_value,
        }
    }
}

/// Truncates from the tail or right-pads `indices` to `target_len`.
pub fn clip_pad(indices: &[usize], target_len: usize, pad_value: i64) -> FiducialFeature {
    let kept = indices.len().min(target_len);
    let mut values: Vec<i64> = indices[..kept].iter().map(|v| *v as i64).collect();
    let mut mask = vec![true; kept];
    values.resize(target_len, pad_value);
    mask.resize(target_len, false);
    FiducialFeature {
        values,
        mask,
        pad_value,
    }
}
