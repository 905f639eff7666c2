//! Event streams: parsing, fixed-duration slicing and 3-channel slice maps.
//!
//! On disk an event is one line `t x y p` with `t` in seconds, integer pixel
//! coordinates and polarity in `{0, 1}`. In memory polarity is signed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    fn from_disk(bit: &str) -> Option<Self> {
        match bit {
            "1" => Some(Polarity::Positive),
            "0" => Some(Polarity::Negative),
            _ => None,
        }
    }

    fn disk_bit(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds, microsecond resolution.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: Polarity) -> Self {
        Event { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

impl SensorSize {
    pub const fn new(width: u32, height: u32) -> Self {
        SensorSize { width, height }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

impl Default for SensorSize {
    /// DAVIS346 resolution.
    fn default() -> Self {
        SensorSize::new(346, 260)
    }
}

/// What to do when timestamps in a file go backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    #[default]
    StableSort,
    Reject,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedEvents {
    pub events: Vec<Event>,
    /// Number of lines whose timestamp was smaller than the preceding one.
    pub out_of_order: usize,
}

pub fn load_events(path: &Path, sensor: SensorSize, policy: OrderPolicy) -> Result<LoadedEvents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file), path, sensor, policy)
}

pub fn parse_events<R: Read>(
    reader: BufReader<R>,
    origin: &Path,
    sensor: SensorSize,
    policy: OrderPolicy,
) -> Result<LoadedEvents> {
    let mut events = Vec::new();
    let mut out_of_order = 0;
    let mut previous = f64::NEG_INFINITY;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected `t x y p`, found {} fields", fields.len()),
            ));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad timestamp `{}`", fields[0])))?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("timestamp {t} is not finite and non-negative"),
            ));
        }
        let x: i64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad x `{}`", fields[1])))?;
        let y: i64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad y `{}`", fields[2])))?;
        let polarity = Polarity::from_disk(fields[3])
            .ok_or_else(|| Error::parse(origin, lineno, format!("polarity must be 0 or 1, got `{}`", fields[3])))?;
        if !sensor.contains(x, y) {
            return Err(Error::OutOfBounds {
                line: lineno,
                x,
                y,
                width: sensor.width,
                height: sensor.height,
            });
        }
        if t < previous {
            match policy {
                OrderPolicy::Reject => {
                    return Err(Error::NonMonotone {
                        line: lineno,
                        t,
                        previous,
                    })
                }
                OrderPolicy::StableSort => out_of_order += 1,
            }
        }
        previous = previous.max(t);
        events.push(Event::new(t, x as u16, y as u16, polarity));
    }

    if out_of_order > 0 {
        // Vec::sort_by is stable, so events sharing a timestamp keep file order.
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    Ok(LoadedEvents { events, out_of_order })
}

pub fn save_events(path: &Path, events: &[Event]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_events(&mut w, events).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_events<W: Write>(w: &mut W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        // `{}` on f64 is the shortest string that parses back to the same value.
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.polarity.disk_bit())?;
    }
    Ok(())
}

/// Events falling in the half-open window `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSlice {
    events: Vec<Event>,
    t_start: f64,
    t_end: f64,
    sensor: SensorSize,
}

impl EventSlice {
    /// Builds a slice, checking ordering and window membership.
    pub fn new(events: Vec<Event>, t_start: f64, t_end: f64, sensor: SensorSize) -> Result<Self> {
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "slice window [{t_start}, {t_end}) is empty"
            )));
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidArgument("slice events are not time-sorted".into()));
        }
        if let Some(e) = events.iter().find(|e| e.t < t_start || e.t >= t_end) {
            return Err(Error::InvalidArgument(format!(
                "event at t={} outside slice window [{t_start}, {t_end})",
                e.t
            )));
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.x as u32 >= sensor.width || e.y as u32 >= sensor.height)
        {
            return Err(Error::InvalidArgument(format!(
                "event at ({}, {}) outside {}x{} sensor",
                e.x, e.y, sensor.width, sensor.height
            )));
        }
        Ok(EventSlice {
            events,
            t_start,
            t_end,
            sensor,
        })
    }

    pub(crate) fn new_unchecked(events: Vec<Event>, t_start: f64, t_end: f64, sensor: SensorSize) -> Self {
        EventSlice {
            events,
            t_start,
            t_end,
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Index of the half-open window `[origin + k*step, origin + (k+1)*step)` containing `t`.
///
/// Window edges are always recomputed as `origin + k as f64 * step` so that
/// an event sitting exactly on an edge lands in the later window regardless
/// of rounding in the division.
fn window_index(t: f64, origin: f64, step: f64) -> usize {
    let mut k = ((t - origin) / step).floor().max(0.0) as usize;
    while k > 0 && origin + k as f64 * step > t {
        k -= 1;
    }
    while origin + (k + 1) as f64 * step <= t {
        k += 1;
    }
    k
}

fn split_windows(
    events: &[Event],
    origin: f64,
    step: f64,
    count: usize,
    end: Option<f64>,
    sensor: SensorSize,
) -> Vec<EventSlice> {
    let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); count];
    for e in events {
        let k = window_index(e.t, origin, step).min(count - 1);
        buckets[k].push(*e);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(k, evs)| {
            let t_start = origin + k as f64 * step;
            let mut t_end = origin + (k + 1) as f64 * step;
            if k + 1 == count {
                if let Some(end) = end {
                    t_end = end;
                }
            }
            EventSlice::new_unchecked(evs, t_start, t_end, sensor)
        })
        .collect()
}

/// Groups a time-sorted stream into consecutive `delta_t` windows starting at
/// the first event. Empty windows between events are kept.
pub fn slice_stream(events: &[Event], delta_t: f64, sensor: SensorSize) -> Result<Vec<EventSlice>> {
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "delta_t must be positive, got {delta_t}"
        )));
    }
    if events.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::InvalidArgument("events are not time-sorted".into()));
    }
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Ok(Vec::new()),
    };
    let count = window_index(last, first, delta_t) + 1;
    Ok(split_windows(events, first, delta_t, count, None, sensor))
}

/// `count` consecutive `delta_t` windows starting at `origin`. Events outside
/// `[origin, origin + count * delta_t)` are dropped.
pub fn slice_windows(
    events: &[Event],
    origin: f64,
    delta_t: f64,
    count: usize,
    sensor: SensorSize,
) -> Result<Vec<EventSlice>> {
    if !(delta_t > 0.0) || !delta_t.is_finite() || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "need positive delta_t and count, got {delta_t} and {count}"
        )));
    }
    let end = origin + count as f64 * delta_t;
    let inside: Vec<Event> = events.iter().copied().filter(|e| e.t >= origin && e.t < end).collect();
    if inside.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::InvalidArgument("events are not time-sorted".into()));
    }
    Ok(split_windows(&inside, origin, delta_t, count, None, sensor))
}

/// Tiles a slice into `fine_dt` sub-slices. The last sub-slice ends at the
/// slice end, so it may be shorter when the duration is not a multiple.
pub fn subdivide(slice: &EventSlice, fine_dt: f64) -> Result<Vec<EventSlice>> {
    let duration = slice.duration();
    if !(fine_dt > 0.0) || fine_dt > duration * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "fine_dt {fine_dt} must be in (0, {duration}]"
        )));
    }
    let count = ((duration / fine_dt) - 1e-9).ceil().max(1.0) as usize;
    Ok(split_windows(
        slice.events(),
        slice.t_start,
        fine_dt,
        count,
        Some(slice.t_end),
        slice.sensor,
    ))
}

/// Positive counts, negative counts and mean normalized timestamp per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMap {
    pub pos_count: Grid<u32>,
    pub neg_count: Grid<u32>,
    pub time_agg: Grid<f64>,
}

impl SliceMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        SliceMap {
            pos_count: Grid::filled(width, height, 0),
            neg_count: Grid::filled(width, height, 0),
            time_agg: Grid::filled(width, height, 0.0),
        }
    }

    pub fn width(&self) -> usize {
        self.pos_count.width()
    }

    pub fn height(&self) -> usize {
        self.pos_count.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pos_count.dims()
    }

    pub fn total_count(&self) -> u64 {
        self.pos_count
            .as_slice()
            .iter()
            .chain(self.neg_count.as_slice())
            .map(|&c| c as u64)
            .sum()
    }

    /// Accumulates events given as `(x, y, normalized_time, polarity)`.
    pub(crate) fn accumulate<I>(width: usize, height: usize, items: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64, Polarity)>,
    {
        let mut map = SliceMap::zeros(width, height);
        for (x, y, tn, pol) in items {
            let i = map.pos_count.index(x, y);
            match pol {
                Polarity::Positive => map.pos_count[i] += 1,
                Polarity::Negative => map.neg_count[i] += 1,
            }
            map.time_agg[i] += tn;
        }
        for i in 0..map.time_agg.len() {
            let n = map.pos_count[i] + map.neg_count[i];
            if n > 0 {
                map.time_agg[i] = (map.time_agg[i] / n as f64).clamp(0.0, 1.0);
            }
        }
        map
    }
}

pub fn project_slice(slice: &EventSlice) -> SliceMap {
    let span = slice.duration();
    let t0 = slice.t_start;
    SliceMap::accumulate(
        slice.sensor.width as usize,
        slice.sensor.height as usize,
        slice
            .events
            .iter()
            .map(|e| (e.x as usize, e.y as usize, (e.t - t0) / span, e.polarity)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::Positive)
    }

    fn parse(text: &str, policy: OrderPolicy) -> Result<LoadedEvents> {
        parse_events(
            BufReader::new(text.as_bytes()),
            Path::new("<mem>"),
            SensorSize::default(),
            policy,
        )
    }

    #[test]
    fn parses_disk_polarity() {
        let got = parse("0.000001 10 20 1\n0.000002 11 20 0\n", OrderPolicy::Reject).unwrap();
        assert_eq!(got.events.len(), 2);
        assert_eq!(got.events[0], Event::new(0.000001, 10, 20, Polarity::Positive));
        assert_eq!(got.events[1].polarity.sign(), -1);
    }

    #[test]
    fn empty_and_comment_only_files() {
        assert!(parse("", OrderPolicy::Reject).unwrap().events.is_empty());
        assert!(parse("# header\n\n", OrderPolicy::Reject).unwrap().events.is_empty());
    }

    #[test]
    fn rejects_out_of_bounds() {
        let err = parse("0.5 500 20 1\n", OrderPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { line: 1, x: 500, .. }), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("# c\n0.1 1 1 1\n0.2 1 1 2\n", OrderPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse("0.1 1 1\n", OrderPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("-0.1 1 1 1\n", OrderPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn non_monotone_policies() {
        let text = "0.3 1 1 1\n0.1 2 1 1\n0.1 3 1 0\n0.2 4 1 1\n";
        let err = parse(text, OrderPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::NonMonotone { line: 2, .. }));

        let got = parse(text, OrderPolicy::StableSort).unwrap();
        assert_eq!(got.out_of_order, 3);
        let xs: Vec<u16> = got.events.iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![2, 3, 4, 1]);
    }

    #[test]
    fn slicing_100ms_at_25ms() {
        let events: Vec<Event> = (0..100)
            .map(|i| ev(if i == 0 { 0.0 } else { i as f64 * 0.001 + 0.0002 }, 1, 1))
            .collect();
        let slices = slice_stream(&events, 0.025, SensorSize::default()).unwrap();
        assert_eq!(slices.len(), 4);
        assert!(slices.iter().all(|s| s.len() == 25));
    }

    #[test]
    fn fixed_windows_drop_outsiders() {
        // Binary-exact times; 3.25 sits on the edge and belongs to the later window.
        let events: Vec<Event> = [0.5, 1.0, 3.25, 9.0].iter().map(|&t| ev(t, 1, 1)).collect();
        let slices = slice_windows(&events, 0.75, 2.5, 2, SensorSize::default()).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!((slices[0].len(), slices[1].len()), (1, 1));
        assert_eq!(slices[1].events()[0].t, 3.25);
        assert_eq!(slices[1].t_end(), 5.75);
        assert!(slice_windows(&events, 0.0, 0.025, 0, SensorSize::default()).is_err());
    }

    #[test]
    fn slicing_empty_stream() {
        assert!(slice_stream(&[], 0.025, SensorSize::default()).unwrap().is_empty());
        assert!(slice_stream(&[], 0.0, SensorSize::default()).is_err());
    }

    #[test]
    fn boundary_event_goes_to_later_slice() {
        let events = vec![ev(0.0, 1, 1), ev(0.025, 2, 2)];
        let slices = slice_stream(&events, 0.025, SensorSize::default()).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[0].len(), 1);
        assert_eq!(slices[1].events()[0].x, 2);

        // Edges that are not exactly representable: 0.1 + 3*0.1.
        let events = vec![ev(0.1, 1, 1), ev(0.1 + 3.0 * 0.1, 2, 2)];
        let slices = slice_stream(&events, 0.1, SensorSize::default()).unwrap();
        assert_eq!(slices.len(), 4);
        assert_eq!(slices[3].len(), 1);
        for s in &slices {
            assert!(s.events().iter().all(|e| e.t >= s.t_start() && e.t < s.t_end()));
        }
    }

    #[test]
    fn subdivide_into_millisecond_slices() {
        let slice = EventSlice::new(
            vec![ev(0.0002, 1, 1), ev(0.0007, 1, 1)],
            0.0,
            0.025,
            SensorSize::default(),
        )
        .unwrap();
        let subs = subdivide(&slice, 0.001).unwrap();
        assert_eq!(subs.len(), 25);
        assert_eq!(subs[0].len(), 2);
        assert_eq!(subs.iter().filter(|s| s.is_empty()).count(), 24);
        assert_eq!(subs.last().unwrap().t_end(), 0.025);

        let whole = subdivide(&slice, 0.025).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0], slice);

        assert!(subdivide(&slice, 0.0).is_err());
        assert!(subdivide(&slice, 0.03).is_err());
    }

    #[test]
    fn projection_definitions() {
        let sensor = SensorSize::new(10, 10);
        let one = EventSlice::new(vec![ev(0.5, 5, 5)], 0.0, 1.0, sensor).unwrap();
        let map = project_slice(&one);
        assert_eq!(*map.pos_count.get(5, 5), 1);
        assert_eq!(*map.neg_count.get(5, 5), 0);
        assert_eq!(*map.time_agg.get(5, 5), 0.5);

        let two = EventSlice::new(
            vec![ev(0.2, 3, 4), Event::new(0.8, 3, 4, Polarity::Negative)],
            0.0,
            1.0,
            sensor,
        )
        .unwrap();
        let map = project_slice(&two);
        assert_eq!(map.pos_count.get(3, 4) + map.neg_count.get(3, 4), 2);
        assert!((map.time_agg.get(3, 4) - 0.5).abs() < 1e-15);

        let empty = EventSlice::new(vec![], 0.0, 1.0, sensor).unwrap();
        assert_eq!(project_slice(&empty), SliceMap::zeros(10, 10));
    }

    #[test]
    fn slice_constructor_checks_invariants() {
        let s = SensorSize::new(4, 4);
        assert!(EventSlice::new(vec![], 1.0, 1.0, s).is_err());
        assert!(EventSlice::new(vec![ev(2.0, 0, 0)], 0.0, 1.0, s).is_err());
        assert!(EventSlice::new(vec![ev(0.5, 0, 0), ev(0.2, 0, 0)], 0.0, 1.0, s).is_err());
        assert!(EventSlice::new(vec![ev(0.5, 4, 0)], 0.0, 1.0, s).is_err());
    }
}
