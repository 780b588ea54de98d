//! POI and trip-order files.
//!
//! `poi.csv` has header `lon,lat,category` with categories already mapped to
//! the 16 AutoNavi classes. `orders.csv` has header
//! `pickup_lon,pickup_lat,pickup_ts,dropoff_ts` with local-time epoch seconds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_grid::GeoPoint;

pub const NUM_CATEGORIES: usize = 16;
pub const HOURS: usize = 24;

/// Longest accepted trip.
pub const MAX_TRIP_SECS: i64 = 24 * 3600;

const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "automobile and motorcycle related",
    "food and beverages related",
    "shopping related place",
    "daily life service place",
    "sports and recreation place",
    "medical and health care service place",
    "accommodation service related",
    "tourist attraction related",
    "residential area",
    "enterprise",
    "governmental and social groups related",
    "science and education cultural place",
    "traffic hinge",
    "transit network",
    "finance and insurance service institution",
    "public facility",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {msg}")]
    Range { line: u64, msg: String },
    #[error("line {line}: dropoff_ts {dropoff} is not after pickup_ts {pickup}")]
    OrderTime { line: u64, pickup: i64, dropoff: i64 },
    #[error("category index {0} out of range 0..15")]
    CategoryRange(usize),
    #[error("csv write error: {0}")]
    Write(String),
}

/// One of the 16 urban-function classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Category(u8);

impl Category {
    pub fn new(index: usize) -> Result<Self, IngestError> {
        if index < NUM_CATEGORIES {
            Ok(Category(index as u8))
        } else {
            Err(IngestError::CategoryRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Category> {
        (0..NUM_CATEGORIES as u8).map(Category)
    }
}

impl TryFrom<u8> for Category {
    type Error = IngestError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Category::new(v as usize)
    }
}

impl From<Category> for u8 {
    fn from(c: Category) -> u8 {
        c.0
    }
}

pub fn category_name(index: usize) -> Result<&'static str, IngestError> {
    Category::new(index).map(Category::name)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiRecord {
    pub location: GeoPoint,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripOrder {
    pub pickup: GeoPoint,
    pub pickup_ts: i64,
    pub dropoff_ts: i64,
}

impl TripOrder {
    pub fn duration_secs(&self) -> i64 {
        self.dropoff_ts - self.pickup_ts
    }

    pub fn duration_hours(&self) -> f64 {
        self.duration_secs() as f64 / 3600.0
    }

    /// Hour of day of the pickup, 0..=23.
    pub fn hour_bucket(&self) -> usize {
        (self.pickup_ts.rem_euclid(86_400) / 3600) as usize
    }

    fn check(&self, line: u64) -> Result<(), IngestError> {
        if self.dropoff_ts <= self.pickup_ts {
            return Err(IngestError::OrderTime {
                line,
                pickup: self.pickup_ts,
                dropoff: self.dropoff_ts,
            });
        }
        if self.duration_secs() > MAX_TRIP_SECS {
            return Err(IngestError::Range {
                line,
                msg: format!("trip duration {} s exceeds 24 h", self.duration_secs()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct PoiRow {
    lon: f64,
    lat: f64,
    category: i64,
}

#[derive(Debug, Deserialize, Serialize)]
struct OrderRow {
    pickup_lon: f64,
    pickup_lat: f64,
    pickup_ts: i64,
    dropoff_ts: i64,
}

/// How invalid order rows are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    /// First invalid row aborts parsing.
    #[default]
    Strict,
    /// Rows failing the time predicates are dropped and counted.
    SkipInvalid,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedOrders {
    pub orders: Vec<TripOrder>,
    pub rejected_non_positive: u64,
    pub rejected_too_long: u64,
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn csv_reader<R: Read>(r: R, expected: &[&str]) -> Result<csv::Reader<R>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(|e| IngestError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(IngestError::Parse {
            line: 1,
            msg: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(rdr)
}

fn row_line(e: &csv::Error, fallback: u64) -> u64 {
    e.position().map(|p| p.line()).unwrap_or(fallback)
}

/// Calendar days from the first pickup to the last, inclusive. Zero for no orders.
pub fn observed_days(orders: &[TripOrder]) -> u32 {
    let days = orders.iter().map(|o| o.pickup_ts.div_euclid(86_400));
    match (days.clone().min(), days.max()) {
        (Some(a), Some(b)) => (b - a + 1) as u32,
        _ => 0,
    }
}

pub fn parse_poi_csv(path: &Path) -> Result<Vec<PoiRecord>, IngestError> {
    parse_poi_reader(open(path)?)
}

pub fn parse_poi_reader<R: Read>(r: R) -> Result<Vec<PoiRecord>, IngestError> {
    let mut rdr = csv_reader(r, &["lon", "lat", "category"])?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PoiRow>().enumerate() {
        let fallback = i as u64 + 2;
        let row = row.map_err(|e| IngestError::Parse {
            line: row_line(&e, fallback),
            msg: e.to_string(),
        })?;
        let line = fallback;
        let location = GeoPoint::new(row.lon, row.lat).map_err(|e| IngestError::Range {
            line,
            msg: e.to_string(),
        })?;
        if !(0..NUM_CATEGORIES as i64).contains(&row.category) {
            return Err(IngestError::Range {
                line,
                msg: format!("category {} out of range 0..15", row.category),
            });
        }
        out.push(PoiRecord {
            location,
            category: Category(row.category as u8),
        });
    }
    Ok(out)
}

pub fn parse_orders_csv(path: &Path) -> Result<Vec<TripOrder>, IngestError> {
    parse_orders_reader(open(path)?, OrderPolicy::Strict).map(|p| p.orders)
}

pub fn parse_orders_csv_with(path: &Path, policy: OrderPolicy) -> Result<ParsedOrders, IngestError> {
    parse_orders_reader(open(path)?, policy)
}

pub fn parse_orders_reader<R: Read>(r: R, policy: OrderPolicy) -> Result<ParsedOrders, IngestError> {
    let mut rdr = csv_reader(r, &["pickup_lon", "pickup_lat", "pickup_ts", "dropoff_ts"])?;
    let mut out = ParsedOrders::default();
    let mut record = csv::StringRecord::new();
    let mut line = 1u64;
    loop {
        line += 1;
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(IngestError::Parse {
                    line: row_line(&e, line),
                    msg: e.to_string(),
                })
            }
        }
        let row: OrderRow = record.deserialize(None).map_err(|e| IngestError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let pickup = GeoPoint::new(row.pickup_lon, row.pickup_lat).map_err(|e| IngestError::Range {
            line,
            msg: e.to_string(),
        })?;
        let order = TripOrder {
            pickup,
            pickup_ts: row.pickup_ts,
            dropoff_ts: row.dropoff_ts,
        };
        match (order.check(line), policy) {
            (Ok(()), _) => out.orders.push(order),
            (Err(e), OrderPolicy::Strict) => return Err(e),
            (Err(IngestError::OrderTime { .. }), OrderPolicy::SkipInvalid) => {
                out.rejected_non_positive += 1
            }
            (Err(_), OrderPolicy::SkipInvalid) => out.rejected_too_long += 1,
        }
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>, IngestError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn write_poi_csv(path: &Path, pois: &[PoiRecord]) -> Result<(), IngestError> {
    write_poi(create(path)?, pois)
}

pub fn write_poi<W: Write>(w: W, pois: &[PoiRecord]) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in pois {
        wtr.serialize(PoiRow {
            lon: p.location.lon,
            lat: p.location.lat,
            category: p.category.index() as i64,
        })
        .map_err(|e| IngestError::Write(e.to_string()))?;
    }
    if pois.is_empty() {
        wtr.write_record(["lon", "lat", "category"])
            .map_err(|e| IngestError::Write(e.to_string()))?;
    }
    wtr.flush().map_err(|e| IngestError::Write(e.to_string()))
}

pub fn write_orders_csv(path: &Path, orders: &[TripOrder]) -> Result<(), IngestError> {
    write_orders(create(path)?, orders)
}

pub fn write_orders<W: Write>(w: W, orders: &[TripOrder]) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(w);
    if orders.is_empty() {
        wtr.write_record(["pickup_lon", "pickup_lat", "pickup_ts", "dropoff_ts"])
            .map_err(|e| IngestError::Write(e.to_string()))?;
    }
    for o in orders {
        wtr.serialize(OrderRow {
            pickup_lon: o.pickup.lon,
            pickup_lat: o.pickup.lat,
            pickup_ts: o.pickup_ts,
            dropoff_ts: o.dropoff_ts,
        })
        .map_err(|e| IngestError::Write(e.to_string()))?;
    }
    wtr.flush().map_err(|e| IngestError::Write(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_days_spans_calendar_days() {
        let o = |ts: i64| TripOrder {
            pickup: GeoPoint { lon: 110.3, lat: 20.0 },
            pickup_ts: ts,
            dropoff_ts: ts + 60,
        };
        assert_eq!(observed_days(&[]), 0);
        assert_eq!(observed_days(&[o(86_400 * 10 + 5)]), 1);
        assert_eq!(observed_days(&[o(86_400 * 10 + 86_399), o(86_400 * 39)]), 30);
    }
    use proptest::prelude::*;

    #[test]
    fn parses_residential_poi() {
        let src = "lon,lat,category\n110.3303,20.0199,8\n";
        let pois = parse_poi_reader(src.as_bytes()).unwrap();
        assert_eq!(pois.len(), 1);
        assert_eq!(pois[0].location, GeoPoint { lon: 110.3303, lat: 20.0199 });
        assert_eq!(pois[0].category.index(), 8);
        assert_eq!(pois[0].category.name(), "residential area");
    }

    #[test]
    fn empty_poi_file() {
        assert!(parse_poi_reader("lon,lat,category\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn category_out_of_range_reports_line() {
        let src = "lon,lat,category\n110.3,20.0,1\n110.3,20.0,16\n";
        match parse_poi_reader(src.as_bytes()).unwrap_err() {
            IngestError::Range { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let src = "lon,lat,category\n110.3,20.0,1\n110.3,abc,2\n";
        match parse_poi_reader(src.as_bytes()).unwrap_err() {
            IngestError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_header() {
        let err = parse_poi_reader("x,y,category\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 1, .. }));
    }

    #[test]
    fn bad_coordinate_is_range_error() {
        let src = "lon,lat,category\n200.0,20.0,1\n";
        assert!(matches!(
            parse_poi_reader(src.as_bytes()).unwrap_err(),
            IngestError::Range { line: 2, .. }
        ));
    }

    #[test]
    fn category_names() {
        assert_eq!(category_name(12).unwrap(), "traffic hinge");
        assert_eq!(category_name(13).unwrap(), "transit network");
        assert_eq!(category_name(0).unwrap(), "automobile and motorcycle related");
        assert!(matches!(category_name(16), Err(IngestError::CategoryRange(16))));
    }

    #[test]
    fn order_duration_and_bucket() {
        // 2021-01-01 07:30:00 to 08:00:00 local
        let day = 18_628 * 86_400;
        let src = format!(
            "pickup_lon,pickup_lat,pickup_ts,dropoff_ts\n110.3,20.0,{},{}\n",
            day + 7 * 3600 + 1800,
            day + 8 * 3600
        );
        let orders = parse_orders_reader(src.as_bytes(), OrderPolicy::Strict).unwrap().orders;
        assert_eq!(orders[0].duration_hours(), 0.5);
        assert_eq!(orders[0].hour_bucket(), 7);
    }

    #[test]
    fn zero_duration_order_is_rejected() {
        let src = "pickup_lon,pickup_lat,pickup_ts,dropoff_ts\n110.3,20.0,100,200\n110.3,20.0,500,500\n";
        match parse_orders_reader(src.as_bytes(), OrderPolicy::Strict).unwrap_err() {
            IngestError::OrderTime { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let lenient = parse_orders_reader(src.as_bytes(), OrderPolicy::SkipInvalid).unwrap();
        assert_eq!(lenient.orders.len(), 1);
        assert_eq!(lenient.rejected_non_positive, 1);
    }

    #[test]
    fn overlong_order_is_rejected() {
        let src = format!(
            "pickup_lon,pickup_lat,pickup_ts,dropoff_ts\n110.3,20.0,0,{}\n",
            MAX_TRIP_SECS + 1
        );
        assert!(matches!(
            parse_orders_reader(src.as_bytes(), OrderPolicy::Strict).unwrap_err(),
            IngestError::Range { line: 2, .. }
        ));
        let lenient = parse_orders_reader(src.as_bytes(), OrderPolicy::SkipInvalid).unwrap();
        assert_eq!(lenient.rejected_too_long, 1);
    }

    #[test]
    fn negative_timestamps_bucket_by_local_hour() {
        let o = TripOrder {
            pickup: GeoPoint { lon: 0.0, lat: 0.0 },
            pickup_ts: -3600,
            dropoff_ts: 0,
        };
        assert_eq!(o.hour_bucket(), 23);
    }

    proptest! {
        #[test]
        fn poi_csv_round_trip(rows in prop::collection::vec((-180.0f64..180.0, -90.0f64..90.0, 0usize..16), 0..40)) {
            let pois: Vec<PoiRecord> = rows.iter().map(|&(lon, lat, c)| PoiRecord {
                location: GeoPoint { lon, lat },
                category: Category::new(c).unwrap(),
            }).collect();
            let mut buf = Vec::new();
            write_poi(&mut buf, &pois).unwrap();
            prop_assert_eq!(parse_poi_reader(buf.as_slice()).unwrap(), pois);
        }

        #[test]
        fn orders_csv_round_trip(rows in prop::collection::vec((-180.0f64..180.0, -90.0f64..90.0, 0i64..2_000_000_000, 1i64..86_400), 0..40)) {
            let orders: Vec<TripOrder> = rows.iter().map(|&(lon, lat, ts, d)| TripOrder {
                pickup: GeoPoint { lon, lat },
                pickup_ts: ts,
                dropoff_ts: ts + d,
            }).collect();
            let mut buf = Vec::new();
            write_orders(&mut buf, &orders).unwrap();
            prop_assert_eq!(parse_orders_reader(buf.as_slice(), OrderPolicy::Strict).unwrap().orders, orders);
        }
    }
}
