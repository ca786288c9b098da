//! Dice overlap between an automatic and a manual segmentation.
//!
//! Labels absent from both volumes have no defined Dice and are left out of
//! the mean and median instead of counting as perfect agreement. Background
//! (label 0) is never scored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LabelVolume;

fn check_dims(auto: &LabelVolume, manual: &LabelVolume) -> Result<()> {
    if auto.dims() != manual.dims() {
        return Err(Error::GeometryMismatch(format!(
            "automatic dims {:?} vs manual dims {:?}",
            auto.dims(),
            manual.dims()
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)` for one label; `None` when neither volume has it.
pub fn dice(auto: &LabelVolume, manual: &LabelVolume, label: u16) -> Result<Option<f64>> {
    check_dims(auto, manual)?;
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in auto.data().iter().zip(manual.data()) {
        let (ia, ib) = (x == label, y == label);
        a += ia as u64;
        b += ib as u64;
        both += (ia && ib) as u64;
    }
    Ok((a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Dice for every non-background label, `None` when undefined.
    pub per_label: BTreeMap<u16, Option<f64>>,
    pub mean_dsc: Option<f64>,
    pub median_dsc: Option<f64>,
    pub labels_evaluated: usize,
}

/// Per-label Dice over labels `1..L` in a single pass over the voxels.
pub fn report(auto: &LabelVolume, manual: &LabelVolume) -> Result<DiceReport> {
    check_dims(auto, manual)?;
    let num_labels = auto.num_labels().max(manual.num_labels()) as usize;
    let mut in_auto = vec![0u64; num_labels];
    let mut in_manual = vec![0u64; num_labels];
    let mut overlap = vec![0u64; num_labels];
    for (&x, &y) in auto.data().iter().zip(manual.data()) {
        in_auto[x as usize] += 1;
        in_manual[y as usize] += 1;
        if x == y {
            overlap[x as usize] += 1;
        }
    }
    let per_label: BTreeMap<u16, Option<f64>> = (1..num_labels)
        .map(|l| {
            let denom = in_auto[l] + in_manual[l];
            let d = (denom > 0).then(|| 2.0 * overlap[l] as f64 / denom as f64);
            (l as u16, d)
        })
        .collect();
    let mut defined: Vec<f64> = per_label.values().flatten().copied().collect();
    let labels_evaluated = defined.len();
    let mean_dsc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    defined.sort_by(f64::total_cmp);
    let median_dsc = (!defined.is_empty()).then(|| {
        let n = defined.len();
        if n % 2 == 1 {
            defined[n / 2]
        } else {
            (defined[n / 2 - 1] + defined[n / 2]) / 2.0
        }
    });
    Ok(DiceReport {
        per_label,
        mean_dsc,
        median_dsc,
        labels_evaluated,
    })
}

impl DiceReport {
    /// Tab-separated table, one row per label; undefined entries print as `NA`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("label\tdice\n");
        for (label, d) in &self.per_label {
            match d {
                Some(v) => writeln!(s, "{label}\t{v:.6}").unwrap(),
                None => writeln!(s, "{label}\tNA").unwrap(),
            }
        }
        s
    }

    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        format!(
            "mean DSC {}  median DSC {}  labels {}",
            fmt(self.mean_dsc),
            fmt(self.median_dsc),
            self.labels_evaluated
        )
    }
}
