//! Chronological train / validation / test splits by payment day.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{day_index, Dataset};
use crate::error::{IgtError, Result};

/// Validation and test windows, counted in days back from the dataset's last
/// day. Test is the final `test_days`; validation the `validation_days` before.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_days: i64,
    pub test_days: i64,
}

/// Index ranges into the (time-sorted) dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
    /// Number of calendar days covered by the train range.
    pub train_days: i64,
}

pub fn chronological_split(ds: &Dataset, spec: SplitSpec) -> Result<Split> {
    if spec.validation_days < 0 || spec.test_days < 0 {
        return Err(IgtError::Config("split days must be non-negative".into()));
    }
    let held = spec.validation_days + spec.test_days;
    let span = ds.span_days();
    if held > 0 && held >= span {
        return Err(IgtError::Config(format!(
            "split holds out {held} days but the dataset spans {span}"
        )));
    }
    let Some(first) = ds.first_day() else {
        return Ok(Split {
            train: 0..0,
            validation: 0..0,
            test: 0..0,
            train_days: 0,
        });
    };
    let train_days = span - held;
    let val_start = first + train_days;
    let test_start = val_start + spec.validation_days;
    let orders = ds.orders();
    let a = orders.partition_point(|o| day_index(o.payment_ts) < val_start);
    let b = orders.partition_point(|o| day_index(o.payment_ts) < test_start);
    Ok(Split {
        train: 0..a,
        validation: a..b,
        test: b..orders.len(),
        train_days,
    })
}
