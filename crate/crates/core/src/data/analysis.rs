use serde::Serialize;

use super::Dataset;
use crate::blocks::age_bin;
use crate::error::{Error, Result};

/// Counts of matching records by age bin (rows) and gender (columns F, M).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistributionTable {
    pub bin_labels: Vec<String>,
    pub counts: Vec<[usize; 2]>,
}

impl DistributionTable {
    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r[0] + r[1]).collect()
    }

    pub fn column_totals(&self) -> [usize; 2] {
        self.counts
            .iter()
            .fold([0, 0], |acc, r| [acc[0] + r[0], acc[1] + r[1]])
    }

    pub fn total(&self) -> usize {
        self.row_totals().iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("age_bin,F,M,total\n");
        for (label, row) in self.bin_labels.iter().zip(&self.counts) {
            out.push_str(&format!("{label},{},{},{}\n", row[0], row[1], row[0] + row[1]));
        }
        let [f, m] = self.column_totals();
        out.push_str(&format!("total,{f},{m},{}\n", self.total()));
        out
    }
}

/// Tallies records carrying any label in `labels` by age bin and gender.
pub fn analyze_distribution(
    dataset: &Dataset,
    labels: &[usize],
    bin_width: u32,
    bins: usize,
) -> Result<DistributionTable> {
    if bins == 0 || bin_width == 0 {
        return Err(Error::InvalidArgument("age bins must be positive".into()));
    }
    let bin_labels = (0..bins)
        .map(|b| {
            let lo = b as u32 * bin_width;
            if b + 1 == bins {
                format!("{lo}+")
            } else {
                format!("{lo}-{}", lo + bin_width - 1)
            }
        })
        .collect();
    let mut counts = vec![[0usize; 2]; bins];
    for (i, r) in dataset.records.iter().enumerate() {
        let (Some(age), Some(gender)) = (r.age, r.gender) else {
            return Err(Error::InvalidArgument(format!(
                "record {i} lacks age or gender; the distribution table needs both"
            )));
        };
        if r.labels.iter().any(|l| labels.contains(l)) {
            counts[age_bin(age, bin_width, bins)][gender.index()] += 1;
        }
    }
    Ok(DistributionTable { bin_labels, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMode;
    use crate::signal::{EcgRecord, Gender};

    fn rec(g: Gender, age: u32, labels: Vec<usize>) -> EcgRecord {
        EcgRecord::new(vec![vec![0.0, 1.0]], 500.0, Some(age), Some(g), labels).unwrap()
    }

    #[test]
    fn hand_tally() {
        let d = Dataset::new(
            vec![
                rec(Gender::Female, 25, vec![1]),
                rec(Gender::Male, 25, vec![1]),
                rec(Gender::Female, 70, vec![0]),
            ],
            2,
            LabelMode::Multi,
            "t",
        )
        .unwrap();
        let t = analyze_distribution(&d, &[1], 10, 10).unwrap();
        assert_eq!(t.counts[2], [1, 1]);
        assert_eq!(t.total(), 2);
        assert_eq!(t.bin_labels[2], "20-29");
        assert_eq!(t.bin_labels[9], "90+");

        let empty = analyze_distribution(&d, &[], 10, 10).unwrap();
        assert_eq!(empty.total(), 0);

        let csv = t.to_csv();
        assert!(csv.contains("20-29,1,1,2\n"));
        assert!(csv.ends_with("total,1,1,2\n"));
    }

    #[test]
    fn marginals_match_cells() {
        let d = Dataset::new(
            (0..30)
                .map(|i| {
                    let g = if i % 3 == 0 { Gender::Male } else { Gender::Female };
                    rec(g, (i * 7) as u32, vec![i % 2])
                })
                .collect(),
            2,
            LabelMode::Multi,
            "t",
        )
        .unwrap();
        let t = analyze_distribution(&d, &[0, 1], 10, 10).unwrap();
        let [f, m] = t.column_totals();
        assert_eq!(f + m, t.total());
        assert_eq!(t.row_totals().iter().sum::<usize>(), 30);
    }

    #[test]
    fn missing_demographics_rejected() {
        let d = Dataset::new(
            vec![EcgRecord::new(vec![vec![0.0, 1.0]], 500.0, None, None, vec![0]).unwrap()],
            1,
            LabelMode::Single,
            "t",
        )
        .unwrap();
        assert!(analyze_distribution(&d, &[0], 10, 10).is_err());
    }
}
