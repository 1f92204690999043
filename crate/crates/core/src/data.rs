//! Orders, interned element identifiers, and leakage-free dynamic features.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IgtError, Result};

pub const SECONDS_PER_HOUR: i64 = 3600;
pub const SECONDS_PER_DAY: i64 = 86_400;
pub const HOURS_PER_DAY: usize = 24;

/// The four order elements, in the fixed order used everywhere downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementType {
    Retailer,
    Origin,
    Destination,
    PaymentSlot,
}

impl ElementType {
    pub const ALL: [ElementType; 4] = [
        ElementType::Retailer,
        ElementType::Origin,
        ElementType::Destination,
        ElementType::PaymentSlot,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::Retailer => "retailer",
            ElementType::Origin => "origin",
            ElementType::Destination => "destination",
            ElementType::PaymentSlot => "slot",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementType {
    type Err = IgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retailer" => Ok(ElementType::Retailer),
            "origin" => Ok(ElementType::Origin),
            "destination" => Ok(ElementType::Destination),
            "slot" | "payment_slot" => Ok(ElementType::PaymentSlot),
            other => Err(IgtError::Invalid(format!("unknown element type '{other}'"))),
        }
    }
}

/// Hour of day (UTC) of a unix timestamp.
pub fn hour_of_day(ts: i64) -> usize {
    (ts.rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_HOUR) as usize
}

/// Absolute hour index, the time-slot granularity for dynamic features.
pub fn time_slot(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_HOUR)
}

pub fn day_index(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_DAY)
}

/// One order. Element fields hold interned ids local to the owning
/// [`Dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct Order {
    pub order_id: String,
    pub retailer: usize,
    pub origin: usize,
    pub destination: usize,
    pub slot: usize,
    pub payment_ts: i64,
    pub delivery_hours: f64,
}

impl Order {
    pub fn element(&self, kind: ElementType) -> usize {
        match kind {
            ElementType::Retailer => self.retailer,
            ElementType::Origin => self.origin,
            ElementType::Destination => self.destination,
            ElementType::PaymentSlot => self.slot,
        }
    }

    pub fn hour(&self) -> usize {
        hour_of_day(self.payment_ts)
    }
}

/// Maps external identifiers to dense indices in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interner {
    ids: Vec<String>,
    map: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.map.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.map.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.map.get(id).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn slot_id(hour: usize) -> String {
    format!("{hour:02}")
}

/// Widths and channel names of each element type's raw feature vector.
///
/// * retailer: `log1p_count, mean_hours, ewma_hours`
/// * origin / destination: `lon, lat, log1p_count, mean_hours`
/// * payment slot: 24-way hour one-hot, then `log1p_count, mean_hours`
///
/// Trailing statistics only see orders paid before the start of the query
/// slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: [Vec<String>; 4],
}

pub const EWMA_ALPHA: f64 = 0.1;

impl Default for FeatureSchema {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let mut slot: Vec<String> = (0..HOURS_PER_DAY).map(|h| format!("hour_{h:02}")).collect();
        slot.extend(s(&["log1p_count", "mean_hours"]));
        Self {
            names: [
                s(&["log1p_count", "mean_hours", "ewma_hours"]),
                s(&["lon", "lat", "log1p_count", "mean_hours"]),
                s(&["lon", "lat", "log1p_count", "mean_hours"]),
                slot,
            ],
        }
    }
}

impl FeatureSchema {
    pub fn width(&self, kind: ElementType) -> usize {
        self.names[kind.index()].len()
    }

    pub fn widths(&self) -> [usize; 4] {
        ElementType::ALL.map(|k| self.width(k))
    }
}

/// Running statistics for one element.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElementStats {
    pub count: u64,
    pub sum_hours: f64,
    pub ewma_hours: f64,
}

impl ElementStats {
    pub fn push(&mut self, hours: f64) {
        self.ewma_hours = if self.count == 0 {
            hours
        } else {
            EWMA_ALPHA * hours + (1.0 - EWMA_ALPHA) * self.ewma_hours
        };
        self.count += 1;
        self.sum_hours += hours;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_hours / self.count as f64
        }
    }
}

/// Assembles a feature vector from an element's statistics.
pub fn assemble_features(
    kind: ElementType,
    stats: &ElementStats,
    coord: Option<(f64, f64)>,
    hour: Option<usize>,
) -> Vec<f64> {
    let lc = (stats.count as f64).ln_1p();
    match kind {
        ElementType::Retailer => vec![lc, stats.mean(), stats.ewma_hours],
        ElementType::Origin | ElementType::Destination => {
            let (lon, lat) = coord.unwrap_or((0.0, 0.0));
            vec![lon, lat, lc, stats.mean()]
        }
        ElementType::PaymentSlot => {
            let mut v = vec![0.0; HOURS_PER_DAY + 2];
            if let Some(h) = hour {
                v[h] = 1.0;
            }
            v[HOURS_PER_DAY] = lc;
            v[HOURS_PER_DAY + 1] = stats.mean();
            v
        }
    }
}

/// Orders sorted by payment time, with per-order raw features.
#[derive(Clone, Debug)]
pub struct Dataset {
    orders: Vec<Order>,
    interners: [Interner; 4],
    coords: [Vec<Option<(f64, f64)>>; 2],
    schema: FeatureSchema,
    /// Per element type: `orders.len() × width` row-major features, computed
    /// at each order's own time slot.
    features: [Vec<f64>; 4],
}

/// An order before interning.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOrder {
    pub order_id: String,
    pub retailer_id: String,
    pub origin_id: String,
    pub destination_id: String,
    pub payment_ts: i64,
    pub delivery_hours: f64,
    pub origin_coord: (f64, f64),
    pub dest_coord: (f64, f64),
}

pub const CSV_HEADER: [&str; 10] = [
    "order_id",
    "retailer_id",
    "origin_id",
    "destination_id",
    "payment_unix_ts",
    "delivery_hours",
    "origin_lon",
    "origin_lat",
    "dest_lon",
    "dest_lat",
];

impl Dataset {
    /// Sorts (stably, by payment time), interns and computes features.
    pub fn from_raw(mut raw: Vec<RawOrder>) -> Result<Self> {
        for (i, r) in raw.iter().enumerate() {
            if r.delivery_hours <= 0.0 || !r.delivery_hours.is_finite() {
                return Err(IgtError::Data(format!(
                    "order {i} ('{}'): delivery_hours must be positive, got {}",
                    r.order_id, r.delivery_hours
                )));
            }
        }
        raw.sort_by_key(|r| r.payment_ts);
        let mut interners: [Interner; 4] = Default::default();
        let mut coords: [Vec<Option<(f64, f64)>>; 2] = Default::default();
        let mut orders = Vec::with_capacity(raw.len());
        for r in raw {
            let retailer = interners[0].intern(&r.retailer_id);
            let origin = interners[1].intern(&r.origin_id);
            let destination = interners[2].intern(&r.destination_id);
            let slot = interners[3].intern(&slot_id(hour_of_day(r.payment_ts)));
            for (k, (id, c)) in [(origin, r.origin_coord), (destination, r.dest_coord)]
                .into_iter()
                .enumerate()
            {
                if coords[k].len() <= id {
                    coords[k].resize(id + 1, None);
                }
                coords[k][id].get_or_insert(c);
            }
            orders.push(Order {
                order_id: r.order_id,
                retailer,
                origin,
                destination,
                slot,
                payment_ts: r.payment_ts,
                delivery_hours: r.delivery_hours,
            });
        }
        let mut ds = Self {
            orders,
            interners,
            coords,
            schema: FeatureSchema::default(),
            features: Default::default(),
        };
        ds.compute_features();
        Ok(ds)
    }

    /// One sweep over hourly groups: features for an hour are read before the
    /// hour's own orders enter the running statistics.
    fn compute_features(&mut self) {
        let widths = self.schema.widths();
        let mut stats: [Vec<ElementStats>; 4] =
            std::array::from_fn(|k| vec![ElementStats::default(); self.interners[k].len()]);
        let mut feats: [Vec<f64>; 4] =
            std::array::from_fn(|k| Vec::with_capacity(self.orders.len() * widths[k]));
        let mut start = 0;
        while start < self.orders.len() {
            let slot = time_slot(self.orders[start].payment_ts);
            let mut end = start;
            while end < self.orders.len() && time_slot(self.orders[end].payment_ts) == slot {
                end += 1;
            }
            for o in &self.orders[start..end] {
                for kind in ElementType::ALL {
                    let id = o.element(kind);
                    let v = assemble_features(
                        kind,
                        &stats[kind.index()][id],
                        self.coord(kind, id),
                        Some(o.hour()),
                    );
                    feats[kind.index()].extend_from_slice(&v);
                }
            }
            for o in &self.orders[start..end] {
                for kind in ElementType::ALL {
                    stats[kind.index()][o.element(kind)].push(o.delivery_hours);
                }
            }
            start = end;
        }
        self.features = feats;
    }

    pub fn empty() -> Self {
        Self::from_raw(Vec::new()).expect("empty dataset is valid")
    }

    pub fn orders(&self) -> &[Order] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn interner(&self, kind: ElementType) -> &Interner {
        &self.interners[kind.index()]
    }

    /// Total interned elements across all four types.
    pub fn interned_count(&self) -> usize {
        self.interners.iter().map(Interner::len).sum()
    }

    pub fn coord(&self, kind: ElementType, id: usize) -> Option<(f64, f64)> {
        match kind {
            ElementType::Origin => self.coords[0].get(id).copied().flatten(),
            ElementType::Destination => self.coords[1].get(id).copied().flatten(),
            _ => None,
        }
    }

    /// Raw features of `kind` for order `i`, evaluated at the order's slot.
    pub fn order_features(&self, kind: ElementType, i: usize) -> &[f64] {
        let w = self.schema.width(kind);
        &self.features[kind.index()][i * w..(i + 1) * w]
    }

    pub fn labels(&self) -> Vec<f64> {
        self.orders.iter().map(|o| o.delivery_hours).collect()
    }

    /// Features of an element (by external id) at an absolute hour slot,
    /// recomputed from every order paid strictly before the slot starts.
    /// Unknown ids yield the neutral vector.
    pub fn feature_vector(&self, kind: ElementType, external_id: &str, slot: i64) -> Vec<f64> {
        let cutoff = slot * SECONDS_PER_HOUR;
        let id = self.interner(kind).get(external_id);
        let mut stats = ElementStats::default();
        if let Some(id) = id {
            for o in self.orders.iter().take_while(|o| o.payment_ts < cutoff) {
                if o.element(kind) == id {
                    stats.push(o.delivery_hours);
                }
            }
        }
        let hour = match kind {
            ElementType::PaymentSlot => external_id.parse::<usize>().ok().filter(|&h| h < 24),
            _ => None,
        };
        assemble_features(kind, &stats, id.and_then(|i| self.coord(kind, i)), hour)
    }

    /// Span in days from the first order's day to the last order's day,
    /// inclusive.
    pub fn span_days(&self) -> i64 {
        match (self.orders.first(), self.orders.last()) {
            (Some(a), Some(b)) => day_index(b.payment_ts) - day_index(a.payment_ts) + 1,
            _ => 0,
        }
    }

    pub fn first_day(&self) -> Option<i64> {
        self.orders.first().map(|o| day_index(o.payment_ts))
    }

    pub fn to_raw(&self) -> Vec<RawOrder> {
        self.orders
            .iter()
            .map(|o| RawOrder {
                order_id: o.order_id.clone(),
                retailer_id: self.interners[0].name(o.retailer).to_string(),
                origin_id: self.interners[1].name(o.origin).to_string(),
                destination_id: self.interners[2].name(o.destination).to_string(),
                payment_ts: o.payment_ts,
                delivery_hours: o.delivery_hours,
                origin_coord: self
                    .coord(ElementType::Origin, o.origin)
                    .unwrap_or_default(),
                dest_coord: self
                    .coord(ElementType::Destination, o.destination)
                    .unwrap_or_default(),
            })
            .collect()
    }

    pub fn external_id(&self, kind: ElementType, id: usize) -> &str {
        self.interner(kind).name(id)
    }

    /// Reads the documented CSV layout.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv_from(file)
    }

    pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).collect::<Vec<_>>() != CSV_HEADER {
            return Err(IgtError::Data(format!(
                "unexpected header {:?}, expected {:?}",
                header.iter().collect::<Vec<_>>(),
                CSV_HEADER
            )));
        }
        let mut raw = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| IgtError::Data(format!("row {row}: {e}")))?;
            if rec.len() != CSV_HEADER.len() {
                return Err(IgtError::Data(format!(
                    "row {row}: expected {} fields, got {}",
                    CSV_HEADER.len(),
                    rec.len()
                )));
            }
            let num = |j: usize| -> Result<f64> {
                rec[j].trim().parse::<f64>().map_err(|_| {
                    IgtError::Data(format!("row {row}: bad {} '{}'", CSV_HEADER[j], &rec[j]))
                })
            };
            let ts = rec[4].trim().parse::<i64>().map_err(|_| {
                IgtError::Data(format!("row {row}: bad payment_unix_ts '{}'", &rec[4]))
            })?;
            let hours = num(5)?;
            if hours.is_nan() || hours <= 0.0 {
                return Err(IgtError::Data(format!(
                    "row {row}: delivery_hours must be positive, got {hours}"
                )));
            }
            raw.push(RawOrder {
                order_id: rec[0].to_string(),
                retailer_id: rec[1].to_string(),
                origin_id: rec[2].to_string(),
                destination_id: rec[3].to_string(),
                payment_ts: ts,
                delivery_hours: hours,
                origin_coord: (num(6)?, num(7)?),
                dest_coord: (num(8)?, num(9)?),
            });
        }
        Self::from_raw(raw)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in self.to_raw() {
            w.write_record([
                r.order_id,
                r.retailer_id,
                r.origin_id,
                r.destination_id,
                r.payment_ts.to_string(),
                r.delivery_hours.to_string(),
                r.origin_coord.0.to_string(),
                r.origin_coord.1.to_string(),
                r.dest_coord.0.to_string(),
                r.dest_coord.1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
