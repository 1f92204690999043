//! Ridge linear regression over the concatenated raw element features.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ElementType};
use crate::error::{IgtError, Result};
use crate::model::FeatureScaler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub scaler: FeatureScaler,
    /// Intercept first, then one weight per standardized feature column.
    pub weights: Vec<f64>,
    pub ridge: f64,
}

fn design_row(ds: &Dataset, scaler: &FeatureScaler, i: usize, out: &mut Vec<f64>) {
    out.push(1.0);
    for kind in ElementType::ALL {
        scaler.apply(kind, ds.order_features(kind, i), out);
    }
}

impl LinearBaseline {
    /// Solves `(XᵀX + λI) w = Xᵀy` on `train`; the intercept is not penalized.
    pub fn fit(ds: &Dataset, train: Range<usize>, ridge: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(IgtError::Data("baseline needs training orders".into()));
        }
        let scaler = FeatureScaler::fit(ds, train.clone());
        let p = 1 + ds.schema().widths().iter().sum::<usize>();
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut row = Vec::with_capacity(p);
        for i in train {
            row.clear();
            design_row(ds, &scaler, i, &mut row);
            let x = DVector::from_column_slice(&row);
            xtx.ger(1.0, &x, &x, 1.0);
            xty.axpy(ds.orders()[i].delivery_hours, &x, 1.0);
        }
        for j in 1..p {
            xtx[(j, j)] += ridge;
        }
        let w = match xtx.clone().cholesky() {
            Some(c) => c.solve(&xty),
            None => xtx
                .svd(true, true)
                .solve(&xty, 1e-10)
                .map_err(|e| IgtError::Invalid(format!("baseline solve failed: {e}")))?,
        };
        Ok(Self {
            scaler,
            weights: w.iter().copied().collect(),
            ridge,
        })
    }

    pub fn predict(&self, ds: &Dataset, orders: Range<usize>) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.weights.len());
        orders
            .map(|i| {
                row.clear();
                design_row(ds, &self.scaler, i, &mut row);
                row.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawOrder;

    #[test]
    fn fits_constant_labels() {
        let raw: Vec<RawOrder> = (0..40)
            .map(|i| RawOrder {
                order_id: format!("o{i}"),
                retailer_id: format!("r{}", i % 3),
                origin_id: "a".into(),
                destination_id: format!("d{}", i % 5),
                payment_ts: 1_600_000_000 + 3600 * i,
                delivery_hours: 12.0,
                origin_coord: (0.0, 0.0),
                dest_coord: (1.0, 1.0),
            })
            .collect();
        let ds = Dataset::from_raw(raw).unwrap();
        let lr = LinearBaseline::fit(&ds, 0..40, 1e-6).unwrap();
        for p in lr.predict(&ds, 0..40) {
            assert!((p - 12.0).abs() < 1e-6);
        }
    }
}
