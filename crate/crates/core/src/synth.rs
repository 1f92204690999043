//! Synthetic order generator.
//!
//! Labels follow
//!
//! ```text
//! hours = base + retailer_effect(r) + rate * |origin - destination|
//!       + dispatch_penalty(payment hour) + N(0, sigma²),   truncated at 1
//! ```
//!
//! where packages paid at or after the dispatch cutoff hour miss the day's
//! dispatch and wait for the next one. Retailer popularity is Zipf-like and
//! payment hours follow a diurnal histogram. A fraction of retailers can be
//! held back until a late start day so they only appear at the end of the data.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::data::{Dataset, RawOrder, HOURS_PER_DAY, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::error::{IgtError, Result};

/// Human-regularity payment histogram: quiet nights, morning and evening peaks.
pub const DEFAULT_DIURNAL: [f64; 24] = [
    3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 4.0, 7.0, 9.0, 10.0, 10.0, 9.0, 9.0, 9.0, 9.0, 8.0, 8.0,
    9.0, 10.0, 11.0, 11.0, 9.0, 6.0,
];

const LON0: f64 = 116.0;
const LAT0: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub retailers: usize,
    pub origins: usize,
    pub destinations: usize,
    pub origins_per_retailer: usize,
    pub days: usize,
    pub orders_per_day: usize,
    /// Noise standard deviation in hours.
    pub sigma: f64,
    pub dispatch_cutoff_hour: f64,
    pub base_hours: f64,
    pub retailer_effect_std: f64,
    pub hours_per_distance: f64,
    /// Half-width of the square origins are drawn from.
    pub origin_extent: f64,
    /// Half-width of the square destinations are drawn from.
    pub destination_extent: f64,
    pub retailer_zipf: f64,
    pub late_retailer_fraction: f64,
    /// First day on which late retailers place orders.
    pub late_start_day: usize,
    pub start_ts: i64,
    pub diurnal: [f64; 24],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            retailers: 300,
            origins: 400,
            destinations: 3000,
            origins_per_retailer: 2,
            days: 50,
            orders_per_day: 1000,
            sigma: 1.0,
            dispatch_cutoff_hour: 15.0,
            base_hours: 24.0,
            retailer_effect_std: 6.0,
            hours_per_distance: 3.0,
            origin_extent: 10.0,
            destination_extent: 3.0,
            retailer_zipf: 0.8,
            late_retailer_fraction: 0.0,
            late_start_day: 0,
            // 2021-01-03 00:00:00 UTC
            start_ts: 1_609_632_000,
            diurnal: DEFAULT_DIURNAL,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "retailers",
    "origins",
    "destinations",
    "origins_per_retailer",
    "days",
    "orders_per_day",
    "sigma",
    "dispatch_cutoff_hour",
    "base_hours",
    "retailer_effect_std",
    "hours_per_distance",
    "origin_extent",
    "destination_extent",
    "retailer_zipf",
    "late_retailer_fraction",
    "late_start_day",
    "start_ts",
    "diurnal",
];

impl SynthConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(CONFIG_KEYS)?;
        let mut c = Self::default();
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.get(stringify!($name))? {
                    c.$name = v;
                }
            };
        }
        field!(retailers);
        field!(origins);
        field!(destinations);
        field!(origins_per_retailer);
        field!(days);
        field!(orders_per_day);
        field!(sigma);
        field!(dispatch_cutoff_hour);
        field!(base_hours);
        field!(retailer_effect_std);
        field!(hours_per_distance);
        field!(origin_extent);
        field!(destination_extent);
        field!(retailer_zipf);
        field!(late_retailer_fraction);
        field!(late_start_day);
        field!(start_ts);
        if let Some(d) = kv.get_list::<f64>("diurnal")? {
            c.diurnal = d.try_into().map_err(|v: Vec<f64>| {
                IgtError::Config(format!("diurnal needs 24 weights, got {}", v.len()))
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("retailers", self.retailers),
            ("origins", self.origins),
            ("destinations", self.destinations),
            ("origins_per_retailer", self.origins_per_retailer),
            ("days", self.days),
            ("orders_per_day", self.orders_per_day),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(IgtError::Config(format!("{k} must be positive")));
        }
        if self.origins_per_retailer > self.origins {
            return Err(IgtError::Config(
                "origins_per_retailer exceeds origins".into(),
            ));
        }
        if self.sigma.is_nan()
            || self.sigma < 0.0
            || !(0.0..24.0).contains(&self.dispatch_cutoff_hour)
        {
            return Err(IgtError::Config(
                "sigma >= 0 and cutoff in [0, 24) required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.late_retailer_fraction) {
            return Err(IgtError::Config(
                "late_retailer_fraction must be in [0, 1)".into(),
            ));
        }
        if self.diurnal.iter().any(|&w| w.is_nan() || w < 0.0)
            || self.diurnal.iter().sum::<f64>() <= 0.0
        {
            return Err(IgtError::Config(
                "diurnal weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn total_orders(&self) -> usize {
        self.days * self.orders_per_day
    }
}

/// Extra hours for a package paid in `hour` (0..24): zero when it makes the
/// same-day dispatch, otherwise the time until the next day's dispatch.
pub fn dispatch_penalty(hour: usize, cutoff: f64) -> f64 {
    let h = hour as f64;
    if h < cutoff {
        0.0
    } else {
        HOURS_PER_DAY as f64 - h + cutoff
    }
}

/// The latent structure drawn before any order is sampled.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub retailer_effect: Vec<f64>,
    pub retailer_weight: Vec<f64>,
    pub retailer_origins: Vec<Vec<usize>>,
    pub late: Vec<bool>,
    pub origin_xy: Vec<(f64, f64)>,
    pub destination_xy: Vec<(f64, f64)>,
}

impl SyntheticWorld {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let effect = Normal::new(0.0, cfg.retailer_effect_std)
            .map_err(|e| IgtError::Config(e.to_string()))?;
        let retailer_effect = (0..cfg.retailers).map(|_| effect.sample(rng)).collect();
        let retailer_weight = (0..cfg.retailers)
            .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.retailer_zipf))
            .collect();
        let retailer_origins = (0..cfg.retailers)
            .map(|_| {
                let mut v = sample(rng, cfg.origins, cfg.origins_per_retailer).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let n_late = if cfg.late_retailer_fraction > 0.0 {
            ((cfg.late_retailer_fraction * cfg.retailers as f64).round() as usize).max(1)
        } else {
            0
        };
        let mut late = vec![false; cfg.retailers];
        for r in sample(rng, cfg.retailers, n_late.min(cfg.retailers - 1)) {
            late[r] = true;
        }
        let square =
            |rng: &mut ChaCha8Rng, e: f64| (rng.random_range(-e..=e), rng.random_range(-e..=e));
        let origin_xy = (0..cfg.origins)
            .map(|_| square(rng, cfg.origin_extent))
            .collect();
        let destination_xy = (0..cfg.destinations)
            .map(|_| square(rng, cfg.destination_extent))
            .collect();
        Ok(Self {
            retailer_effect,
            retailer_weight,
            retailer_origins,
            late,
            origin_xy,
            destination_xy,
        })
    }

    pub fn distance(&self, origin: usize, destination: usize) -> f64 {
        let (a, b) = (self.origin_xy[origin], self.destination_xy[destination]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    /// Noise-free label of an order.
    pub fn expected_hours(
        &self,
        cfg: &SynthConfig,
        retailer: usize,
        origin: usize,
        destination: usize,
        hour: usize,
    ) -> f64 {
        cfg.base_hours
            + self.retailer_effect[retailer]
            + cfg.hours_per_distance * self.distance(origin, destination)
            + dispatch_penalty(hour, cfg.dispatch_cutoff_hour)
    }
}

/// Generated orders together with the world that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    pub dataset: Dataset,
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    Ok(generate_with_world(cfg, seed)?.dataset)
}

pub fn generate_with_world(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = SyntheticWorld::draw(cfg, &mut rng)?;
    let hours = WeightedIndex::new(cfg.diurnal).map_err(|e| IgtError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| IgtError::Config(e.to_string()))?;
    let early_only: Vec<f64> = world
        .retailer_weight
        .iter()
        .zip(&world.late)
        .map(|(&w, &l)| if l { 0.0 } else { w })
        .collect();
    let pick_early =
        WeightedIndex::new(&early_only).map_err(|e| IgtError::Config(e.to_string()))?;
    let pick_all =
        WeightedIndex::new(&world.retailer_weight).map_err(|e| IgtError::Config(e.to_string()))?;
    let mut raw = Vec::with_capacity(cfg.total_orders());
    for day in 0..cfg.days {
        let picker = if day >= cfg.late_start_day {
            &pick_all
        } else {
            &pick_early
        };
        for k in 0..cfg.orders_per_day {
            let hour = hours.sample(&mut rng);
            let secs = rng.random_range(0..SECONDS_PER_HOUR);
            let r = picker.sample(&mut rng);
            let origins = &world.retailer_origins[r];
            let o = origins[rng.random_range(0..origins.len())];
            let d = rng.random_range(0..cfg.destinations);
            let y = (world.expected_hours(cfg, r, o, d, hour) + noise.sample(&mut rng)).max(1.0);
            let (ox, oy) = world.origin_xy[o];
            let (dx, dy) = world.destination_xy[d];
            raw.push(RawOrder {
                order_id: format!("ORD{day:04}{k:06}"),
                retailer_id: format!("R{r:05}"),
                origin_id: format!("O{o:05}"),
                destination_id: format!("D{d:05}"),
                payment_ts: cfg.start_ts
                    + day as i64 * SECONDS_PER_DAY
                    + hour as i64 * SECONDS_PER_HOUR
                    + secs,
                delivery_hours: y,
                origin_coord: (LON0 + ox, LAT0 + oy),
                dest_coord: (LON0 + dx, LAT0 + dy),
            });
        }
    }
    Ok(SyntheticData {
        world,
        dataset: Dataset::from_raw(raw)?,
    })
}
