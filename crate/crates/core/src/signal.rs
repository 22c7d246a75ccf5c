//! Latest-value signal cache and the sources that feed it.
//!
//! Every observation gets a stamp from one monotone counter shared with
//! [`SignalCache::next_signal`] call stamps, so "strictly after the call"
//! holds even when two events land in the same clock tick.

use crate::model::TreeValue;
use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub name: String,
    pub value: TreeValue,
    /// Nanoseconds since the cache was created, strictly increasing across
    /// the whole cache.
    pub observed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignalError {
    #[error("no observation of {0} yet")]
    NoData(String),
    #[error("no fresh observation of {0} before the deadline")]
    Timeout(String),
}

struct CacheInner {
    latest: HashMap<String, Observation>,
    last_stamp: u64,
}

pub struct SignalCache {
    epoch: Instant,
    inner: Mutex<CacheInner>,
    fresh: Condvar,
}

impl Default for SignalCache {
    fn default() -> Self {
        Self::new()
    }
}

impl SignalCache {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
            inner: Mutex::new(CacheInner { latest: HashMap::new(), last_stamp: 0 }),
            fresh: Condvar::new(),
        }
    }

    fn stamp(&self, inner: &mut CacheInner) -> u64 {
        let now = self.epoch.elapsed().as_nanos() as u64;
        inner.last_stamp = now.max(inner.last_stamp + 1);
        inner.last_stamp
    }

    pub fn observe(&self, name: &str, value: TreeValue) -> Observation {
        let mut inner = self.inner.lock();
        let observed_at = self.stamp(&mut inner);
        let obs = Observation { name: name.to_owned(), value, observed_at };
        inner.latest.insert(name.to_owned(), obs.clone());
        drop(inner);
        self.fresh.notify_all();
        obs
    }

    pub fn get_signal(&self, name: &str) -> Result<Observation, SignalError> {
        self.inner.lock().latest.get(name).cloned().ok_or_else(|| SignalError::NoData(name.to_owned()))
    }

    /// Blocks until an observation of `name` newer than this call arrives.
    pub fn next_signal(&self, name: &str, timeout: Duration) -> Result<Observation, SignalError> {
        let called_at = self.call_stamp();
        self.next_after(name, called_at, timeout)
    }

    /// A stamp later than every observation made so far and earlier than
    /// every observation made afterwards.
    pub fn call_stamp(&self) -> u64 {
        let mut inner = self.inner.lock();
        self.stamp(&mut inner)
    }

    /// Waits for an observation of `name` stamped after `after`.
    pub fn next_after(&self, name: &str, after: u64, timeout: Duration) -> Result<Observation, SignalError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        loop {
            if let Some(obs) = inner.latest.get(name) {
                if obs.observed_at > after {
                    return Ok(obs.clone());
                }
            }
            if self.fresh.wait_until(&mut inner, deadline).timed_out() {
                return match inner.latest.get(name) {
                    Some(obs) if obs.observed_at > after => Ok(obs.clone()),
                    _ => Err(SignalError::Timeout(name.to_owned())),
                };
            }
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.inner.lock().latest.keys().cloned().collect();
        names.sort();
        names
    }
}

/// Anything that can feed a cache until told to stop.
pub trait SignalSource: Send {
    fn run(self: Box<Self>, cache: &SignalCache, stop: &AtomicBool);
}

/// A running source; stops its thread on drop.
pub struct Ingest {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Ingest {
    pub fn spawn(source: Box<dyn SignalSource>, cache: Arc<SignalCache>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("signal-ingest".into())
            .spawn(move || source.run(&cache, &flag))
            .expect("spawn signal ingest thread");
        Self { stop, thread: Some(thread) }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map_or(true, |t| t.is_finished())
    }

    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Ingest {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Sleeps until `until`, waking early when `stop` is raised.
fn sleep_until(until: Instant, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= until {
            return true;
        }
        std::thread::sleep((until - now).min(Duration::from_millis(20)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t_ms: u64,
    pub cells: Vec<(String, TreeValue)>,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("first column must be t_ms")]
    MissingTime,
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
}

/// Parses a replay file. Rows before a bad row are returned together with
/// the error so a replay can still emit them.
pub fn parse_csv(reader: impl std::io::Read) -> (Vec<CsvRow>, Option<CsvError>) {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return (Vec::new(), Some(e.into())),
    };
    if headers.get(0) != Some("t_ms") {
        return (Vec::new(), Some(CsvError::MissingTime));
    }
    let mut rows = Vec::new();
    let mut last_t = 0;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => return (rows, Some(e.into())),
        };
        let bad = |msg: String| CsvError::Row { row, msg };
        let t_ms: u64 = match record.get(0).unwrap_or("").parse() {
            Ok(t) => t,
            Err(_) => return (rows, Some(bad(format!("bad t_ms {:?}", record.get(0))))),
        };
        if t_ms < last_t {
            return (rows, Some(bad(format!("t_ms {t_ms} goes backwards"))));
        }
        last_t = t_ms;
        let mut cells = Vec::new();
        for (name, cell) in headers.iter().zip(record.iter()).skip(1) {
            if cell.is_empty() {
                continue;
            }
            match serde_json::from_str::<TreeValue>(cell) {
                Ok(v) => cells.push((name.to_owned(), v)),
                Err(_) => return (rows, Some(bad(format!("cell {cell:?} under {name} is not a number or JSON")))),
            }
        }
        rows.push(CsvRow { t_ms, cells });
    }
    (rows, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedFactor(pub f64);

impl SpeedFactor {
    pub const MAX: SpeedFactor = SpeedFactor(f64::INFINITY);
}

impl Serialize for SpeedFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("max")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for SpeedFactor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(f) if f > 0.0 => Ok(SpeedFactor(f)),
            Raw::Word(w) if w == "max" => Ok(SpeedFactor::MAX),
            _ => Err(serde::de::Error::custom("speed_factor must be a positive number or \"max\"")),
        }
    }
}

impl Default for SpeedFactor {
    fn default() -> Self {
        SpeedFactor(1.0)
    }
}

pub struct CsvReplay {
    pub path: PathBuf,
    pub speed_factor: SpeedFactor,
    pub looping: bool,
}

impl CsvReplay {
    pub fn new(path: impl AsRef<Path>) -> Self {
        Self { path: path.as_ref().to_owned(), speed_factor: SpeedFactor::default(), looping: false }
    }
}

/// Length of one replay cycle: the last timestamp plus the smallest
/// positive gap between rows.
pub fn cycle_ms(rows: &[CsvRow]) -> u64 {
    let last = rows.last().map_or(0, |r| r.t_ms);
    let gap = rows.windows(2).map(|w| w[1].t_ms - w[0].t_ms).filter(|g| *g > 0).min();
    last + gap.unwrap_or(last.max(1))
}

impl SignalSource for CsvReplay {
    fn run(self: Box<Self>, cache: &SignalCache, stop: &AtomicBool) {
        let (rows, err) = match std::fs::File::open(&self.path) {
            Ok(f) => parse_csv(f),
            Err(e) => {
                tracing::error!(path = %self.path.display(), error = %e, "signal replay stopped");
                return;
            }
        };
        // A bad file is replayed once up to the bad row, never looped.
        let looping = self.looping && err.is_none() && !rows.is_empty();
        let cycle = cycle_ms(&rows);
        let start = Instant::now();
        let mut offset = 0u64;
        'outer: loop {
            for row in &rows {
                if self.speed_factor.0.is_finite() {
                    let at = Duration::from_secs_f64((offset + row.t_ms) as f64 / 1000.0 / self.speed_factor.0);
                    if !sleep_until(start + at, stop) {
                        break 'outer;
                    }
                } else if stop.load(Ordering::SeqCst) {
                    break 'outer;
                }
                for (name, value) in &row.cells {
                    cache.observe(name, value.clone());
                }
            }
            if !looping {
                break;
            }
            offset += cycle;
        }
        if let Some(e) = err {
            tracing::error!(path = %self.path.display(), error = %e, "signal replay stopped");
        }
    }
}

/// Uniform draws in `[0, 1)` for each name once per period.
pub struct RandomSource {
    pub names: Vec<String>,
    pub period_ms: u64,
    pub seed: u64,
}

impl RandomSource {
    /// The value sequence this source emits, period by period.
    pub fn draws(&self) -> impl Iterator<Item = Vec<(String, f64)>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        std::iter::repeat_with(move || self.names.iter().map(|n| (n.clone(), rng.gen::<f64>())).collect())
    }
}

impl SignalSource for RandomSource {
    fn run(self: Box<Self>, cache: &SignalCache, stop: &AtomicBool) {
        let start = Instant::now();
        let period = Duration::from_millis(self.period_ms.max(1));
        for (k, draw) in self.draws().enumerate() {
            if !sleep_until(start + period * k as u32, stop) {
                break;
            }
            for (name, v) in draw {
                cache.observe(&name, serde_json::json!(v));
            }
        }
    }
}

/// Declarative source description, as found in agent configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    CsvReplay {
        path: PathBuf,
        #[serde(default)]
        speed_factor: SpeedFactor,
        #[serde(default, rename = "loop")]
        looping: bool,
    },
    Random {
        names: Vec<String>,
        period_ms: u64,
        seed: u64,
    },
}

impl SourceConfig {
    pub fn build(&self) -> Box<dyn SignalSource> {
        match self {
            SourceConfig::CsvReplay { path, speed_factor, looping } => {
                Box::new(CsvReplay { path: path.clone(), speed_factor: *speed_factor, looping: *looping })
            }
            SourceConfig::Random { names, period_ms, seed } => {
                Box::new(RandomSource { names: names.clone(), period_ms: *period_ms, seed: *seed })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn replay_all(body: &str) -> SignalCache {
        let f = csv_file(body);
        let cache = SignalCache::new();
        let src = Box::new(CsvReplay { path: f.path().into(), speed_factor: SpeedFactor::MAX, looping: false });
        src.run(&cache, &AtomicBool::new(false));
        cache
    }

    #[test]
    fn latest_wins_and_unknown_is_no_data() {
        let cache = SignalCache::new();
        cache.observe("speed", json!(1.0));
        cache.observe("speed", json!(2.0));
        assert_eq!(cache.get_signal("speed").unwrap().value, json!(2.0));
        assert_eq!(cache.get_signal("rpm"), Err(SignalError::NoData("rpm".into())));
    }

    #[test]
    fn stateful_signal_stays_readable() {
        let cache = SignalCache::new();
        cache.observe("door_open", json!(true));
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(cache.get_signal("door_open").unwrap().value, json!(true));
    }

    #[test]
    fn stamps_strictly_increase() {
        let cache = SignalCache::new();
        let stamps: Vec<u64> = (0..1000).map(|i| cache.observe("x", json!(i)).observed_at).collect();
        assert!(stamps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn next_signal_ignores_values_cached_before_the_call() {
        let cache = Arc::new(SignalCache::new());
        cache.observe("speed", json!(1));
        assert_eq!(
            cache.next_signal("speed", Duration::from_millis(50)),
            Err(SignalError::Timeout("speed".into()))
        );
        let writer = cache.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(30));
            writer.observe("speed", json!(2));
        });
        let obs = cache.next_signal("speed", Duration::from_secs(2)).unwrap();
        assert_eq!(obs.value, json!(2));
        t.join().unwrap();
    }

    #[test]
    fn next_signal_timeout_without_source() {
        let cache = SignalCache::new();
        let t0 = Instant::now();
        assert!(matches!(cache.next_signal("none", Duration::from_millis(100)), Err(SignalError::Timeout(_))));
        assert!(t0.elapsed() >= Duration::from_millis(100));
    }

    #[test]
    fn ten_hz_replay_delivers_within_a_period() {
        let rows: String = (0..40).map(|i| format!("{},{}\n", i * 100, i)).collect();
        let f = csv_file(&format!("t_ms,speed\n{rows}"));
        let cache = Arc::new(SignalCache::new());
        let _ingest = Ingest::spawn(Box::new(CsvReplay::new(f.path())), cache.clone());
        std::thread::sleep(Duration::from_millis(120));
        for _ in 0..3 {
            let t0 = Instant::now();
            cache.next_signal("speed", Duration::from_secs(1)).unwrap();
            assert!(t0.elapsed() <= Duration::from_millis(150), "waited {:?}", t0.elapsed());
        }
    }

    #[test]
    fn csv_cells_numeric_json_and_empty() {
        let cache = replay_all("t_ms,speed,gear,pos\n0,1.5,,\"{\"\"lat\"\": 1}\"\n10,2,3,\n");
        assert_eq!(cache.get_signal("speed").unwrap().value, json!(2));
        assert_eq!(cache.get_signal("gear").unwrap().value, json!(3));
        assert_eq!(cache.get_signal("pos").unwrap().value, json!({"lat": 1}));
    }

    #[test]
    fn three_rows_end_at_the_last() {
        let cache = replay_all("t_ms,a\n0,1\n5,2\n9,3\n");
        assert_eq!(cache.get_signal("a").unwrap().value, json!(3));
    }

    #[test]
    fn parse_error_keeps_earlier_rows() {
        let cache = replay_all("t_ms,a\n0,1\n5,oops\n9,3\n");
        assert_eq!(cache.get_signal("a").unwrap().value, json!(1));
        let (rows, err) = parse_csv("t_ms,a\n5,1\n2,1\n".as_bytes());
        assert_eq!(rows.len(), 1);
        assert!(matches!(err, Some(CsvError::Row { row: 2, .. })));
        assert!(matches!(parse_csv("time,a\n".as_bytes()).1, Some(CsvError::MissingTime)));
    }

    #[test]
    fn replays_at_max_speed_are_identical() {
        let body = "t_ms,a,b\n0,1,\n3,,x\n3,2,\"[1,2]\"\n";
        let names = |c: &SignalCache| -> Vec<(String, TreeValue)> {
            c.names().into_iter().map(|n| (n.clone(), c.get_signal(&n).unwrap().value)).collect()
        };
        // "x" is not JSON, so both runs stop at the same row.
        assert_eq!(names(&replay_all(body)), names(&replay_all(body)));
        let ok = "t_ms,a,b\n0,1,\n3,,\"\"\"x\"\"\"\n3,2,\"[1,2]\"\n";
        let c = replay_all(ok);
        assert_eq!(names(&c), names(&replay_all(ok)));
        assert_eq!(names(&c), vec![("a".into(), json!(2)), ("b".into(), json!([1, 2]))]);
    }

    #[test]
    fn looping_cycle_uses_min_gap() {
        let (rows, _) = parse_csv("t_ms,s\n0,48\n100,50\n200,52\n".as_bytes());
        assert_eq!(cycle_ms(&rows), 300);
        let (single, _) = parse_csv("t_ms,s\n0,1\n".as_bytes());
        assert_eq!(cycle_ms(&single), 1);
    }

    #[test]
    fn looping_replay_keeps_cycling() {
        let f = csv_file("t_ms,s\n0,48\n10,50\n20,52\n");
        let cache = Arc::new(SignalCache::new());
        let src = CsvReplay { path: f.path().into(), speed_factor: SpeedFactor(1.0), looping: true };
        let _ingest = Ingest::spawn(Box::new(src), cache.clone());
        let seen: Vec<TreeValue> =
            (0..7).map(|_| cache.next_signal("s", Duration::from_secs(1)).unwrap().value).collect();
        // Consecutive reads follow the cyclic order 48, 50, 52.
        let idx = |v: &TreeValue| [json!(48), json!(50), json!(52)].iter().position(|x| x == v).unwrap();
        for w in seen.windows(2) {
            assert_eq!((idx(&w[0]) + 1) % 3, idx(&w[1]), "{seen:?}");
        }
    }

    #[test]
    fn random_source_is_deterministic() {
        let src = RandomSource { names: vec!["a".into(), "b".into()], period_ms: 1, seed: 7 };
        let one: Vec<_> = src.draws().take(50).collect();
        let two: Vec<_> = src.draws().take(50).collect();
        assert_eq!(one, two);
        assert!(one.iter().flatten().all(|(_, v)| (0.0..1.0).contains(v)));
        let other = RandomSource { seed: 8, ..src };
        assert_ne!(other.draws().next(), one.first().cloned());
    }

    #[test]
    fn disjoint_sources_share_one_cache() {
        let f = csv_file("t_ms,speed\n0,50\n");
        let cache = Arc::new(SignalCache::new());
        let a = Ingest::spawn(Box::new(CsvReplay { path: f.path().into(), speed_factor: SpeedFactor::MAX, looping: false }), cache.clone());
        let b = Ingest::spawn(Box::new(RandomSource { names: vec!["noise".into()], period_ms: 1, seed: 1 }), cache.clone());
        a.join();
        cache.next_signal("noise", Duration::from_secs(1)).unwrap();
        drop(b);
        assert_eq!(cache.names(), vec!["noise".to_string(), "speed".to_string()]);
    }

    #[test]
    fn source_config_round_trip() {
        let cfg: SourceConfig =
            serde_json::from_str(r#"{"kind":"csv_replay","path":"s.csv","speed_factor":"max","loop":true}"#).unwrap();
        assert_eq!(cfg, SourceConfig::CsvReplay { path: "s.csv".into(), speed_factor: SpeedFactor::MAX, looping: true });
        let back: SourceConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<SourceConfig>(r#"{"kind":"csv_replay","path":"s","speed_factor":0}"#).is_err());
    }
}
